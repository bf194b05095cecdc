//! End-to-end prediction for one configuration point:
//! generate → collate → annotate → simulate → MFU.

use alloc::collections::BTreeMap;
use alloc::string::ToString;
use alloc::vec::Vec;

use thiserror::Error;

use crate::cluster::ClusterSpec;
use crate::collator::{collate, dedup_workers, CollateError, JobTrace};
use crate::estimator::{annotate, AnnotateError, Estimator};
use crate::frontend::{generate_trace, unique_workers, FrontendError, FrontendOptions, Plan};
use crate::model::{ConfigPoint, ModelSpec};
use crate::search::{Evaluator, Outcome};
use crate::sim::{compute_mfu, simulate, SimError, SimOptions, SimReport};
use crate::trace::WorkerTrace;
use crate::Rank;

/// Which workers get generated.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub enum Launch {
    /// Only one representative per stage; the rest come from the layout.
    #[default]
    Selective,
    /// Every rank is generated, then deduplicated by trace signature.
    PostHoc,
    /// Every rank is generated and simulated from its own trace.
    Full,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PredictOptions {
    pub frontend: FrontendOptions,
    pub launch: Launch,
    pub timeline: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PipelineError {
    #[error("generate: {0}")]
    Frontend(#[from] FrontendError),
    #[error("collate: {0}")]
    Collate(#[from] CollateError),
    #[error("annotate: {0}")]
    Annotate(#[from] AnnotateError),
    #[error("simulate: {0}")]
    Simulate(#[from] SimError),
}

impl PipelineError {
    pub fn stage(&self) -> &'static str {
        match self {
            PipelineError::Frontend(_) => "generate",
            PipelineError::Collate(_) => "collate",
            PipelineError::Annotate(_) => "annotate",
            PipelineError::Simulate(_) => "simulate",
        }
    }
}

/// Generated traces and the duplicate map to collate them with.
#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub plan: Plan,
    pub traces: Vec<WorkerTrace>,
    pub duplicates: BTreeMap<Rank, Rank>,
}

pub fn generate_job(
    model: &ModelSpec,
    config: &ConfigPoint,
    cluster: &ClusterSpec,
    options: &FrontendOptions,
    launch: Launch,
) -> Result<Generated, FrontendError> {
    let plan = Plan::new(model, config, cluster, options.schedule)?;
    let gen = |r| generate_trace(model, config, cluster, options, r);
    let (traces, duplicates) = match launch {
        Launch::Selective => {
            let u = unique_workers(model, config, cluster)?;
            (
                u.ranks
                    .iter()
                    .map(|&r| gen(r))
                    .collect::<Result<Vec<_>, _>>()?,
                u.expansion,
            )
        }
        Launch::PostHoc | Launch::Full => {
            let all = (0..plan.layout.num_ranks())
                .map(gen)
                .collect::<Result<Vec<_>, _>>()?;
            if launch == Launch::Full {
                (all, BTreeMap::new())
            } else {
                let d = dedup_workers(&all);
                let reps = all
                    .into_iter()
                    .filter(|t| !d.duplicates.contains_key(&t.global_rank))
                    .collect();
                (reps, d.duplicates)
            }
        }
    };
    Ok(Generated {
        plan,
        traces,
        duplicates,
    })
}

/// Collates generated traces, translating communicators through the plan's layout.
pub fn collate_job(generated: Generated, cluster: &ClusterSpec) -> Result<JobTrace, CollateError> {
    collate(
        generated.traces,
        generated.duplicates,
        cluster,
        &generated.plan.layout,
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub plan: Plan,
    /// Ranks whose traces were generated.
    pub generated: Vec<Rank>,
    pub report: SimReport,
    pub model_flops: u64,
    /// `None` when the run is OOM.
    pub mfu: Option<f64>,
}

pub fn predict<E: Estimator + ?Sized>(
    model: &ModelSpec,
    config: &ConfigPoint,
    cluster: &ClusterSpec,
    estimator: &E,
    options: &PredictOptions,
) -> Result<Prediction, PipelineError> {
    let generated = generate_job(model, config, cluster, &options.frontend, options.launch)?;
    let plan = generated.plan.clone();
    let ranks = generated.traces.iter().map(|t| t.global_rank).collect();
    let job = collate_job(generated, cluster)?;
    let job = annotate(job, estimator, &cluster.device)?;
    let report = simulate(
        &job,
        cluster,
        &SimOptions {
            timeline: options.timeline,
        },
    )?;
    let model_flops = model.model_flops_per_iteration(config.global_batch);
    let mfu = compute_mfu(&report, model_flops, cluster, model.dtype);
    Ok(Prediction {
        plan,
        generated: ranks,
        report,
        model_flops,
        mfu,
    })
}

/// Search evaluator backed by [`predict`].
#[derive(Debug, Clone)]
pub struct PipelineEvaluator<E> {
    pub model: ModelSpec,
    pub cluster: ClusterSpec,
    pub estimator: E,
    pub options: PredictOptions,
}

impl<E: Estimator> Evaluator for PipelineEvaluator<E> {
    fn evaluate(&self, config: &ConfigPoint) -> Outcome {
        match predict(
            &self.model,
            config,
            &self.cluster,
            &self.estimator,
            &self.options,
        ) {
            Ok(p) => match p.mfu {
                Some(mfu) => Outcome::Completed {
                    time: p.report.total_time,
                    mfu,
                },
                None if p.report.is_oom() => Outcome::Oom,
                None => Outcome::Invalid("empty iteration".into()),
            },
            Err(e) => Outcome::Invalid(e.to_string()),
        }
    }
}
