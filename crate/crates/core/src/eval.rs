//! Test metrics, per-step error curves and resolution sweeps.

use std::fmt::Write as _;

use ndarray::{ArrayD, Axis};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{IknoError, Result};
use crate::grid::WindowPair;
use crate::model::IknoModel;

fn same_shape(pred: &ArrayD<f64>, target: &ArrayD<f64>) -> Result<()> {
    if pred.shape() != target.shape() || pred.is_empty() {
        return Err(IknoError::Shape(format!(
            "prediction {:?} and target {:?} must be non-empty and equal in shape",
            pred.shape(),
            target.shape()
        )));
    }
    Ok(())
}

/// Mean absolute error over all elements.
pub fn mae(pred: &ArrayD<f64>, target: &ArrayD<f64>) -> Result<f64> {
    same_shape(pred, target)?;
    Ok(pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum::<f64>() / pred.len() as f64)
}

/// `100 · ‖û − u‖/‖u‖` per sample and step (norms over space), averaged
/// over samples and steps. Arrays are `batch × R… × steps`.
pub fn relative_l2_percent(pred: &ArrayD<f64>, target: &ArrayD<f64>) -> Result<f64> {
    same_shape(pred, target)?;
    Ok(100.0 * crate::train::relative_l2_loss(pred, target)?)
}

/// `100 · ‖û_i − u_i‖/‖u_i‖` with norms over space and steps together,
/// averaged over samples.
pub fn relative_l2_percent_by_sample(pred: &ArrayD<f64>, target: &ArrayD<f64>) -> Result<f64> {
    same_shape(pred, target)?;
    let b = pred.shape()[0];
    let mut total = 0.0;
    for i in 0..b {
        let p = pred.index_axis(Axis(0), i);
        let t = target.index_axis(Axis(0), i);
        let den: f64 = t.iter().map(|v| v * v).sum();
        if den == 0.0 {
            return Err(IknoError::DegenerateTarget { sample: i, step: 0 });
        }
        let num: f64 = p.iter().zip(t.iter()).map(|(a, c)| (a - c).powi(2)).sum();
        total += (num / den).sqrt();
    }
    Ok(100.0 * total / b as f64)
}

/// Least-squares slope of `y` against its index; zero for fewer than two points.
pub fn least_squares_slope(y: &[f64]) -> f64 {
    let n = y.len();
    if n < 2 {
        return 0.0;
    }
    let xm = (n - 1) as f64 / 2.0;
    let ym = y.iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, v) in y.iter().enumerate() {
        let dx = i as f64 - xm;
        sxy += dx * (v - ym);
        sxx += dx * dx;
    }
    sxy / sxx
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepMetrics {
    pub step: usize,
    pub mae: f64,
    pub rel_l2_percent: f64,
}

/// Error as a function of the rollout step.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepCurve {
    pub resolution: usize,
    pub steps: Vec<StepMetrics>,
    /// Least-squares slope of the relative error per step (reported only).
    pub rel_l2_slope: f64,
    pub all_finite: bool,
}

/// One row of the sweep table.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ResolutionRow {
    pub train_resolution: usize,
    pub test_resolution: usize,
    pub mae: f64,
    /// Mean over samples and steps of per-step relative errors.
    pub rel_l2_percent_steps: f64,
    /// Mean over samples of whole-trajectory relative errors.
    pub rel_l2_percent_samples: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub checkpoint_id: String,
    pub dataset_id: String,
    pub horizon: usize,
    pub rows: Vec<ResolutionRow>,
    pub curves: Vec<StepCurve>,
}

/// Closed-loop predictions for every window, evaluated in chunks.
pub fn predict(model: &IknoModel, inputs: &ArrayD<f64>, steps: usize, chunk: usize) -> Result<ArrayD<f64>> {
    let n = inputs.shape()[0];
    if n == 0 {
        return Err(IknoError::Input("no windows to evaluate".into()));
    }
    let starts: Vec<usize> = (0..n).step_by(chunk.max(1)).collect();
    let parts = starts
        .par_iter()
        .map(|&start| {
            let idx: Vec<usize> = (start..(start + chunk.max(1)).min(n)).collect();
            model.rollout(&inputs.select(Axis(0), &idx), steps)
        })
        .collect::<Result<Vec<_>>>()?;
    let views: Vec<_> = parts.iter().map(|a| a.view()).collect();
    Ok(ndarray::concatenate(Axis(0), &views).expect("equal chunks").as_standard_layout().into_owned())
}

fn horizon_of(data: &WindowPair, horizon: Option<usize>) -> Result<usize> {
    let available = data.target.shape()[data.target.ndim() - 1];
    let h = horizon.unwrap_or(available);
    if h == 0 || h > available {
        return Err(IknoError::Config(format!("evaluation horizon {h} outside 1..={available}")));
    }
    Ok(h)
}

fn leading_steps(a: &ArrayD<f64>, h: usize) -> ArrayD<f64> {
    a.slice_axis(Axis(a.ndim() - 1), ndarray::Slice::from(..h)).to_owned()
}

fn curve_from(pred: &ArrayD<f64>, target: &ArrayD<f64>, resolution: usize) -> Result<StepCurve> {
    let last = Axis(pred.ndim() - 1);
    let mut steps = Vec::new();
    for j in 0..pred.shape()[pred.ndim() - 1] {
        let p = pred.index_axis(last, j).insert_axis(last).to_owned();
        let t = target.index_axis(last, j).insert_axis(last).to_owned();
        steps.push(StepMetrics { step: j, mae: mae(&p, &t)?, rel_l2_percent: relative_l2_percent(&p, &t)? });
    }
    let series: Vec<f64> = steps.iter().map(|s| s.rel_l2_percent).collect();
    Ok(StepCurve {
        resolution,
        all_finite: steps.iter().all(|s| s.mae.is_finite() && s.rel_l2_percent.is_finite()),
        rel_l2_slope: least_squares_slope(&series),
        steps,
    })
}

/// Metrics at each rollout step for one dataset.
pub fn per_step_curve(model: &IknoModel, data: &WindowPair, horizon: Option<usize>, chunk: usize) -> Result<StepCurve> {
    let h = horizon_of(data, horizon)?;
    let pred = predict(model, &data.input, h, chunk)?;
    curve_from(&pred, &leading_steps(&data.target, h), data.input.shape()[1])
}

/// Evaluates one model on test sets that differ only in resolution.
/// `sets` holds `(resolution, windows)`; the first spatial axis length is
/// checked against the stated resolution.
pub fn resolution_sweep(
    model: &IknoModel,
    train_resolution: usize,
    sets: &[(usize, &WindowPair)],
    horizon: Option<usize>,
    chunk: usize,
) -> Result<(Vec<ResolutionRow>, Vec<StepCurve>)> {
    let mut rows = Vec::new();
    let mut curves = Vec::new();
    for &(r, data) in sets {
        if data.input.ndim() < 3 || data.input.shape()[1] != r {
            return Err(IknoError::Shape(format!("test set labelled {r} has shape {:?}", data.input.shape())));
        }
        let h = horizon_of(data, horizon)?;
        let pred = predict(model, &data.input, h, chunk)?;
        let target = leading_steps(&data.target, h);
        rows.push(ResolutionRow {
            train_resolution,
            test_resolution: r,
            mae: mae(&pred, &target)?,
            rel_l2_percent_steps: relative_l2_percent(&pred, &target)?,
            rel_l2_percent_samples: relative_l2_percent_by_sample(&pred, &target)?,
        });
        curves.push(curve_from(&pred, &target, r)?);
    }
    Ok((rows, curves))
}

pub const SWEEP_CSV_HEADER: &str = "train_res,test_res,mae,rel_l2_pct_steps,rel_l2_pct_samples";
pub const CURVE_CSV_HEADER: &str = "test_res,step,mae,rel_l2_pct";

impl EvalReport {
    pub fn sweep_csv(&self) -> String {
        let mut s = format!("{SWEEP_CSV_HEADER}\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.10e},{:.10e},{:.10e}",
                r.train_resolution, r.test_resolution, r.mae, r.rel_l2_percent_steps, r.rel_l2_percent_samples
            );
        }
        s
    }

    pub fn curve_csv(&self) -> String {
        let mut s = format!("{CURVE_CSV_HEADER}\n");
        for c in &self.curves {
            for m in &c.steps {
                let _ = writeln!(s, "{},{},{:.10e},{:.10e}", c.resolution, m.step, m.mae, m.rel_l2_percent);
            }
        }
        s
    }

    /// Fixed-width table with the columns of the sweep CSV.
    pub fn table(&self) -> String {
        let mut s = format!(
            "{:>9} {:>8} {:>14} {:>14} {:>14}\n",
            "train_res", "test_res", "MAE", "relL2% steps", "relL2% samples"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:>9} {:>8} {:>14.6e} {:>14.6} {:>14.6}",
                r.train_resolution, r.test_resolution, r.mae, r.rel_l2_percent_steps, r.rel_l2_percent_samples
            );
        }
        s
    }
}
