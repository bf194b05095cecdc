//! Command-line driver.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use dltsim_core::cluster::{ClusterSpec, DeviceClass, TopologyClass};
use dltsim_core::collator::collate;
use dltsim_core::collator::dedup_workers;
use dltsim_core::estimator::{
    annotate, Estimate, EstimateError, Estimator, KernelDesc, Roofline, TableEstimator,
};
use dltsim_core::frontend::{generate_trace, unique_workers, FrontendOptions, Plan};
use dltsim_core::frontend::{profile_mode_annotate, profile_table, EstimatorOracle, NoisyOracle};
use dltsim_core::model::{ConfigPoint, ModelSpec};
use dltsim_core::pipeline::{
    Generated, Launch, PipelineError, PipelineEvaluator, PredictOptions, Prediction,
};
use dltsim_core::search::{enumerate_space, SearchDriver};
use dltsim_core::sim::{compute_mfu, simulate, SimOptions};
use dltsim_core::trace::{CollectiveKind, WorkerTrace};
use dltsim_core::Nanos;

use crate::config::{load_cluster, load_model, load_search, parse_schedule, Inputs};
use crate::io::{read_profile_table, read_trace_dir, write_file, write_trace_dir, JOB_FILE};
use crate::pool::{default_jobs, par_map, search_batched, search_concurrent};
use crate::report::{summary_text, PredictionReport, SearchReport};
use crate::{io, plot, timeline, Error, Result};

#[derive(Debug, Parser)]
#[command(
    name = "dltsim",
    version,
    about = "Trace-driven performance prediction for distributed training"
)]
pub struct Cli {
    /// Worker threads for trace generation and search trials (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate per-rank traces for one configuration.
    Generate(GenerateArgs),
    /// Match collectives across a trace directory and write the job manifest.
    Collate(CollateArgs),
    /// Predict iteration time, MFU and memory for one configuration.
    Predict(PredictArgs),
    /// Search a configuration space for the highest MFU.
    Search(SearchArgs),
    /// Build a profile table from oracle-timed traces of one configuration.
    Profile(ProfileArgs),
}

#[derive(Debug, Args)]
pub struct InputArgs {
    /// TOML file bundling model, cluster, config and frontend settings.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Model preset name or TOML file.
    #[arg(long)]
    pub model: Option<String>,
    /// Cluster preset name or TOML file.
    #[arg(long)]
    pub cluster: Option<String>,
    /// Configuration TOML file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Pipeline schedule: gpipe, 1f1b or interleaved.
    #[arg(long)]
    pub schedule: Option<String>,
    /// Seed for every random choice (gap jitter, search order).
    #[arg(long)]
    pub seed: Option<u64>,
}

impl InputArgs {
    fn resolve(&self) -> Result<Inputs> {
        let mut inputs = match &self.manifest {
            Some(p) => Inputs::from_manifest(p)?,
            None => Inputs::default(),
        };
        if let Some(m) = &self.model {
            inputs.model = Some(load_model(m)?);
        }
        if let Some(c) = &self.cluster {
            inputs.cluster = Some(load_cluster(c)?);
        }
        if let Some(c) = &self.config {
            inputs.set_config_file(c)?;
        }
        if let Some(s) = &self.schedule {
            parse_schedule(s)?;
            inputs.frontend.schedule = Some(s.clone());
        }
        if let Some(seed) = self.seed {
            inputs.frontend.seed = Some(seed);
        }
        Ok(inputs)
    }
}

#[derive(Debug, Clone, Copy, Default, ValueEnum)]
pub enum LaunchArg {
    #[default]
    Selective,
    PostHoc,
    Full,
}

impl From<LaunchArg> for Launch {
    fn from(l: LaunchArg) -> Self {
        match l {
            LaunchArg::Selective => Launch::Selective,
            LaunchArg::PostHoc => Launch::PostHoc,
            LaunchArg::Full => Launch::Full,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub inputs: InputArgs,
    /// Which ranks to generate.
    #[arg(long, value_enum, default_value_t = LaunchArg::Selective)]
    pub launch: LaunchArg,
    /// Output directory for `rank_<r>.trace` files.
    #[arg(long, default_value = "traces")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct CollateArgs {
    #[command(flatten)]
    pub inputs: InputArgs,
    /// Directory written by `generate`.
    #[arg(long)]
    pub traces: PathBuf,
    /// Job manifest path (default: `job.manifest` in the trace directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub inputs: InputArgs,
    /// `roofline` or `table:<path>`.
    #[arg(long, default_value = "roofline")]
    pub estimator: String,
    /// Replay this trace directory instead of generating traces.
    #[arg(long)]
    pub traces: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = LaunchArg::Selective)]
    pub launch: LaunchArg,
    /// Output directory for the report, summary and timeline.
    #[arg(long, default_value = "predict-out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[command(flatten)]
    pub inputs: InputArgs,
    /// Search-spec preset name or TOML file.
    #[arg(long)]
    pub search_spec: Option<String>,
    /// `roofline` or `table:<path>`.
    #[arg(long, default_value = "roofline")]
    pub estimator: String,
    /// Simulate every candidate instead of inferring outcomes from history.
    #[arg(long)]
    pub no_tactics: bool,
    /// Override the search file's strategy: grid, random or evolutionary.
    #[arg(long)]
    pub strategy: Option<String>,
    /// Dispatch trials in fixed batches so results do not depend on timing.
    #[arg(long)]
    pub deterministic_search: bool,
    #[arg(long, default_value = "search-out")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    #[command(flatten)]
    pub inputs: InputArgs,
    /// Relative noise applied to the roofline oracle (0.05 = ±5%).
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Profile table output path.
    #[arg(long, default_value = "profile.txt")]
    pub out: PathBuf,
}

/// Roofline or profile-table estimation, chosen on the command line.
#[derive(Debug, Clone)]
pub enum AnyEstimator {
    Roofline,
    Table(TableEstimator),
}

impl AnyEstimator {
    pub fn parse(spec: &str) -> Result<Self> {
        match spec.split_once(':') {
            None if spec == "roofline" => Ok(AnyEstimator::Roofline),
            Some(("table", path)) if !path.is_empty() => Ok(AnyEstimator::Table(
                TableEstimator::new(read_profile_table(Path::new(path))?),
            )),
            _ => Err(Error::Usage(format!(
                "unknown estimator `{spec}` (expected roofline or table:<path>)"
            ))),
        }
    }
}

impl Estimator for AnyEstimator {
    fn estimate_kernel(
        &self,
        kernel: &KernelDesc<'_>,
        device: &DeviceClass,
    ) -> Result<Estimate, EstimateError> {
        match self {
            AnyEstimator::Roofline => Roofline.estimate_kernel(kernel, device),
            AnyEstimator::Table(t) => t.estimate_kernel(kernel, device),
        }
    }

    fn estimate_collective(
        &self,
        kind: CollectiveKind,
        bytes: u64,
        nranks: u32,
        topology: TopologyClass,
        device: &DeviceClass,
    ) -> Result<Nanos, EstimateError> {
        match self {
            AnyEstimator::Roofline => {
                Roofline.estimate_collective(kind, bytes, nranks, topology, device)
            }
            AnyEstimator::Table(t) => t.estimate_collective(kind, bytes, nranks, topology, device),
        }
    }
}

fn jobs(n: usize) -> usize {
    if n == 0 {
        default_jobs()
    } else {
        n
    }
}

/// Like [`dltsim_core::pipeline::generate_job`], with ranks generated in parallel.
pub fn generate_parallel(
    model: &ModelSpec,
    config: &ConfigPoint,
    cluster: &ClusterSpec,
    options: &FrontendOptions,
    launch: Launch,
    jobs: usize,
) -> Result<Generated> {
    let plan = Plan::new(model, config, cluster, options.schedule)?;
    let (ranks, expansion) = match launch {
        Launch::Selective => {
            let u = unique_workers(model, config, cluster)?;
            (u.ranks, Some(u.expansion))
        }
        Launch::PostHoc | Launch::Full => ((0..plan.layout.num_ranks()).collect(), None),
    };
    let traces = par_map(&ranks, jobs, |&r| {
        generate_trace(model, config, cluster, options, r)
    })
    .into_iter()
    .collect::<Result<Vec<WorkerTrace>, _>>()?;
    let (traces, duplicates) = match (launch, expansion) {
        (_, Some(e)) => (traces, e),
        (Launch::PostHoc, None) => {
            let d = dedup_workers(&traces);
            let reps = traces
                .into_iter()
                .filter(|t| !d.duplicates.contains_key(&t.global_rank))
                .collect();
            (reps, d.duplicates)
        }
        _ => (traces, Default::default()),
    };
    Ok(Generated {
        plan,
        traces,
        duplicates,
    })
}

/// Collate, annotate and simulate generated traces.
pub fn replay<E: Estimator + ?Sized>(
    generated: Generated,
    cluster: &ClusterSpec,
    estimator: &E,
    timeline: bool,
) -> Result<Prediction> {
    let plan = generated.plan.clone();
    let ranks = generated.traces.iter().map(|t| t.global_rank).collect();
    let job = collate(
        generated.traces,
        generated.duplicates,
        cluster,
        &plan.layout,
    )
    .map_err(PipelineError::from)?;
    let job = annotate(job, estimator, &cluster.device).map_err(PipelineError::from)?;
    let report = simulate(&job, cluster, &SimOptions { timeline }).map_err(PipelineError::from)?;
    let model_flops = plan
        .model
        .model_flops_per_iteration(plan.config.global_batch);
    let mfu = compute_mfu(&report, model_flops, cluster, plan.model.dtype);
    Ok(Prediction {
        plan,
        generated: ranks,
        report,
        model_flops,
        mfu,
    })
}

fn cmd_generate(a: &GenerateArgs, jobs: usize) -> Result<()> {
    let inputs = a.inputs.resolve()?;
    let (model, cluster, config) = (inputs.model()?, inputs.cluster()?, inputs.config()?);
    let fe = inputs.frontend.resolve()?;
    let g = generate_parallel(model, &config, cluster, &fe, a.launch.into(), jobs)?;
    write_trace_dir(&a.out, &g.traces, &g.duplicates)?;
    let total = g.plan.layout.num_ranks();
    let ranks: Vec<String> = g.traces.iter().map(|t| t.global_rank.to_string()).collect();
    println!(
        "{} unique workers for {} ranks (ranks {}); wrote {}",
        g.traces.len(),
        total,
        ranks.join(", "),
        a.out.display()
    );
    Ok(())
}

fn cmd_collate(a: &CollateArgs) -> Result<()> {
    let inputs = a.inputs.resolve()?;
    let (model, cluster, config) = (inputs.model()?, inputs.cluster()?, inputs.config()?);
    let fe = inputs.frontend.resolve()?;
    let plan = Plan::new(model, &config, cluster, fe.schedule)?;
    let (traces, dups) = read_trace_dir(&a.traces)?;
    let job = collate(traces, dups, cluster, &plan.layout)?;
    let out = a.out.clone().unwrap_or_else(|| a.traces.join(JOB_FILE));
    write_file(&out, io::encode_job_manifest(&job))?;
    println!(
        "{} ranks from {} traces, {} collective groups; wrote {}",
        job.num_ranks(),
        job.traces.len(),
        job.collectives.len(),
        out.display()
    );
    Ok(())
}

fn cmd_predict(a: &PredictArgs, jobs: usize) -> Result<()> {
    let inputs = a.inputs.resolve()?;
    let (model, cluster, config) = (inputs.model()?, inputs.cluster()?, inputs.config()?);
    let fe = inputs.frontend.resolve()?;
    let estimator = AnyEstimator::parse(&a.estimator)?;
    let generated = match &a.traces {
        Some(dir) => {
            let plan = Plan::new(model, &config, cluster, fe.schedule)?;
            let (traces, duplicates) = read_trace_dir(dir)?;
            Generated {
                plan,
                traces,
                duplicates,
            }
        }
        None => generate_parallel(model, &config, cluster, &fe, a.launch.into(), jobs)?,
    };
    log::info!("replaying {} traces", generated.traces.len());
    let p = replay(generated, cluster, &estimator, true)?;
    let report = PredictionReport::new(model, cluster, config, &a.estimator, fe.seed, &p);
    write_file(&a.out.join("report.json"), report.to_json())?;
    let summary = summary_text(&report);
    write_file(&a.out.join("summary.txt"), &summary)?;
    let spans = p.report.timeline.as_deref().unwrap_or(&[]);
    write_file(&a.out.join("timeline.json"), timeline::chrome_trace(spans))?;
    print!("{summary}");
    if p.report.is_oom() {
        log::warn!("configuration runs out of device memory");
    }
    Ok(())
}

fn cmd_search(a: &SearchArgs, jobs: usize) -> Result<()> {
    let inputs = a.inputs.resolve()?;
    let (model, cluster) = (inputs.model()?, inputs.cluster()?);
    let mut spec = match (&a.search_spec, &inputs.search) {
        (Some(s), _) => load_search(s)?,
        (None, Some(s)) => s.clone(),
        (None, None) => {
            return Err(Error::Usage(
                "no search spec given (use --search-spec or a manifest)".into(),
            ))
        }
    };
    if let Some(s) = &a.strategy {
        spec.strategy = s.clone();
    }
    if let Some(seed) = a.inputs.seed {
        spec.seed = seed;
    }
    if a.no_tactics {
        spec.tactics = false;
    }
    let options = spec.options()?;
    let fe = inputs.frontend.resolve()?;
    let points = enumerate_space(&spec.space, model, cluster, fe.schedule)?;
    log::info!(
        "{} valid points, {} excluded",
        points.valid.len(),
        points.excluded.len()
    );
    let evaluator = PipelineEvaluator {
        model: model.clone(),
        cluster: cluster.clone(),
        estimator: AnyEstimator::parse(&a.estimator)?,
        options: PredictOptions {
            frontend: fe,
            launch: Launch::Selective,
            timeline: false,
        },
    };
    let driver = SearchDriver::new(&spec.space, &points, options);
    let outcome = if a.deterministic_search || jobs == 1 {
        search_batched(driver, &evaluator, jobs)
    } else {
        search_concurrent(driver, &evaluator, jobs)
    };
    let report = SearchReport::new(
        &model.name,
        cluster,
        &spec.strategy,
        spec.tactics,
        spec.seed,
        &points,
        &outcome,
    );
    let text = report.to_text();
    write_file(
        &a.out.join("trials.json"),
        serde_json::to_string_pretty(&outcome).expect("trials serialize") + "\n",
    )?;
    write_file(&a.out.join("ranking.json"), report.to_json())?;
    write_file(&a.out.join("ranking.txt"), &text)?;
    write_file(
        &a.out.join("time_distribution.svg"),
        plot::time_distribution_svg(&outcome)?,
    )?;
    write_file(
        &a.out.join("mfu_by_trial.svg"),
        plot::mfu_by_trial_svg(&outcome)?,
    )?;
    print!("{text}");
    Ok(())
}

fn cmd_profile(a: &ProfileArgs, jobs: usize) -> Result<()> {
    if !(0.0..1.0).contains(&a.noise) {
        return Err(Error::Usage(format!(
            "--noise must be in [0, 1), got {}",
            a.noise
        )));
    }
    let inputs = a.inputs.resolve()?;
    let (model, cluster, config) = (inputs.model()?, inputs.cluster()?, inputs.config()?);
    let fe = inputs.frontend.resolve()?;
    let g = generate_parallel(model, &config, cluster, &fe, Launch::Selective, jobs)?;
    let oracle = NoisyOracle {
        inner: EstimatorOracle {
            estimator: Roofline,
            device: cluster.device.clone(),
        },
        relative: a.noise,
        seed: fe.seed,
    };
    let timed = g
        .traces
        .iter()
        .map(|t| profile_mode_annotate(t, &oracle, &cluster.device.name))
        .collect::<Result<Vec<_>, _>>()?;
    let table = profile_table(&timed)?;
    write_file(&a.out, table.to_text())?;
    println!(
        "{} profile rows from {} traces; wrote {}",
        table.len(),
        timed.len(),
        a.out.display()
    );
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    let jobs = jobs(cli.jobs);
    match &cli.command {
        Command::Generate(a) => cmd_generate(a, jobs),
        Command::Collate(a) => cmd_collate(a),
        Command::Predict(a) => cmd_predict(a, jobs),
        Command::Search(a) => cmd_search(a, jobs),
        Command::Profile(a) => cmd_profile(a, jobs),
    }
}
