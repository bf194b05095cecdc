//! Static SVG plots of search results.

use dltsim_core::search::{SearchOutcome, TrialStatus};
use plotters::prelude::*;

use crate::{Error, Result};

const SIZE: (u32, u32) = (800, 500);
const BINS: usize = 20;

fn err<E: std::fmt::Display>(e: E) -> Error {
    Error::Plot(e.to_string())
}

/// Histogram of predicted iteration times (ms) over completed trials.
pub fn time_distribution_svg(out: &SearchOutcome) -> Result<String> {
    let times: Vec<f64> = out
        .trials
        .iter()
        .filter_map(|t| t.outcome.time())
        .map(|t| t as f64 / 1e6)
        .collect();
    let lo = times.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = times.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if times.is_empty() {
        (0.0, 1.0)
    } else if hi > lo {
        (lo, hi)
    } else {
        (lo - 0.5, hi + 0.5)
    };
    let width = (hi - lo) / BINS as f64;
    let mut counts = [0u32; BINS];
    for t in &times {
        let b = (((t - lo) / width) as usize).min(BINS - 1);
        counts[b] += 1;
    }
    let ymax = counts.iter().copied().max().unwrap_or(0).max(1);

    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption("Predicted iteration time", ("sans-serif", 22))
            .margin(15)
            .x_label_area_size(40)
            .y_label_area_size(50)
            .build_cartesian_2d(lo..hi, 0u32..ymax + 1)
            .map_err(err)?;
        chart
            .configure_mesh()
            .x_desc("iteration time (ms)")
            .y_desc("configurations")
            .draw()
            .map_err(err)?;
        chart
            .draw_series(
                counts
                    .iter()
                    .enumerate()
                    .filter(|(_, &c)| c > 0)
                    .map(|(i, &c)| {
                        let x0 = lo + i as f64 * width;
                        Rectangle::new([(x0, 0), (x0 + width, c)], BLUE.mix(0.6).filled())
                    }),
            )
            .map_err(err)?;
        root.present().map_err(err)?;
    }
    Ok(svg)
}

/// MFU of every trial against its position in the search, pruned trials in a
/// separate colour.
pub fn mfu_by_trial_svg(out: &SearchOutcome) -> Result<String> {
    let pts = |pruned: bool| -> Vec<(f64, f64)> {
        out.trials
            .iter()
            .filter(|t| (t.status() == TrialStatus::SkippedPruned) == pruned)
            .filter_map(|t| t.outcome.mfu().map(|m| (t.index as f64, m * 100.0)))
            .collect()
    };
    let (simulated, pruned) = (pts(false), pts(true));
    let ymax = simulated
        .iter()
        .chain(&pruned)
        .map(|p| p.1)
        .fold(1.0, f64::max)
        * 1.1;
    let xmax = out.trials.len().max(1) as f64;

    let mut svg = String::new();
    {
        let root = SVGBackend::with_string(&mut svg, SIZE).into_drawing_area();
        root.fill(&WHITE).map_err(err)?;
        let mut chart = ChartBuilder::on(&root)
            .caption("MFU by trial", ("sans-serif", 22))
            .margin(15)
            .x_label_area_size(40)
            .y_label_area_size(50)
            .build_cartesian_2d(-0.5..xmax - 0.5, 0.0..ymax)
            .map_err(err)?;
        chart
            .configure_mesh()
            .x_desc("trial index")
            .y_desc("MFU (%)")
            .draw()
            .map_err(err)?;
        chart
            .draw_series(simulated.iter().map(|&p| Circle::new(p, 3, BLUE.filled())))
            .map_err(err)?
            .label("simulated")
            .legend(|(x, y)| Circle::new((x, y), 3, BLUE.filled()));
        chart
            .draw_series(
                pruned
                    .iter()
                    .map(|&p| TriangleMarker::new(p, 4, RED.filled())),
            )
            .map_err(err)?
            .label("pruned")
            .legend(|(x, y)| TriangleMarker::new((x, y), 4, RED.filled()));
        chart
            .configure_series_labels()
            .border_style(BLACK)
            .background_style(WHITE)
            .draw()
            .map_err(err)?;
        root.present().map_err(err)?;
    }
    Ok(svg)
}
