//! Per-class Chamfer tables averaged over resampling runs.

use std::fmt;

use rand::seq::index::sample;
use rand::Rng;
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

use crate::config::{EvalConfig, Subsample};
use crate::datagen::{SamplePair, ShapeKind};
use crate::gen_net::NetError;
use crate::geometry::{chamfer_directional, fps, GeometryError, PointCloud};
use crate::model::CompletionModel;
use crate::seed::{stream_rng, streams};

/// Table values are reported in units of 10⁻⁴.
pub const CD_SCALE: f64 = 1e4;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("evaluation split is empty")]
    EmptySplit,
    #[error("eval.runs must be at least 1")]
    NoRuns,
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ClassRow {
    pub kind: ShapeKind,
    pub samples: usize,
    /// Mean bidirectional CD × 10⁴.
    pub cd: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalTable {
    /// Kinds present in the split, in canonical order.
    pub rows: Vec<ClassRow>,
    /// Unweighted mean over classes, × 10⁴.
    pub average: f64,
    /// Mean over samples of the prediction → ground-truth term, × 10⁴.
    pub pred_to_gt: f64,
    /// Mean over samples of the ground-truth → prediction term, × 10⁴.
    pub gt_to_pred: f64,
    pub runs: usize,
}

impl fmt::Display for EvalTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>8} {:>12}", "class", "samples", "CD x 1e4")?;
        for r in &self.rows {
            writeln!(f, "{:<10} {:>8} {:>12.4}", r.kind.to_string(), r.samples, r.cd)?;
        }
        write!(f, "{:<10} {:>8} {:>12.4}", "average", self.rows.iter().map(|r| r.samples).sum::<usize>(), self.average)
    }
}

/// Reduces `cloud` to `m` points. `m = 0` or `m ≥ |cloud|` keeps it as is.
/// FPS starts from a random point; random subsampling draws without
/// replacement and keeps the original order.
pub fn subsample<R: Rng>(cloud: &PointCloud, m: usize, method: Subsample, rng: &mut R) -> Result<PointCloud, GeometryError> {
    let n = cloud.len();
    if m == 0 || m >= n {
        return Ok(cloud.clone());
    }
    let idx = match method {
        Subsample::Fps => fps(cloud, m, rng.gen_range(0..n))?,
        Subsample::Random => {
            let mut v = sample(rng, n, m).into_vec();
            v.sort_unstable();
            v
        }
    };
    cloud.select(&idx)
}

/// Evaluates an arbitrary predictor. Run `r` feeds sample `i` an input
/// drawn with stream `EVAL`, index `r·len + i`; each run yields a table and
/// the reported values are the means over runs.
pub fn evaluate_with<F>(samples: &[SamplePair], eval: &EvalConfig, seed: u64, predict: F) -> Result<EvalTable, EvalError>
where
    F: Fn(&PointCloud, &SamplePair) -> Result<PointCloud, EvalError> + Sync,
{
    if samples.is_empty() {
        return Err(EvalError::EmptySplit);
    }
    if eval.runs == 0 {
        return Err(EvalError::NoRuns);
    }
    let len = samples.len() as u64;
    let kinds: Vec<ShapeKind> = ShapeKind::ALL.into_iter().filter(|k| samples.iter().any(|s| s.label == *k)).collect();
    let mut class_sums = vec![0.0; kinds.len()];
    let (mut avg_sum, mut fwd_sum, mut bwd_sum) = (0.0, 0.0, 0.0);
    for run in 0..eval.runs as u64 {
        let per_sample = samples
            .par_iter()
            .enumerate()
            .map(|(i, s)| {
                let mut rng = stream_rng(seed, streams::EVAL, run * len + i as u64);
                let input = subsample(&s.partial, eval.input_points, eval.subsample, &mut rng)?;
                let pred = predict(&input, s)?;
                Ok(chamfer_directional(&pred, &s.complete))
            })
            .collect::<Result<Vec<(f64, f64)>, EvalError>>()?;
        let mut run_avg = 0.0;
        for (c, kind) in kinds.iter().enumerate() {
            let cds: Vec<f64> = samples
                .iter()
                .zip(&per_sample)
                .filter(|(s, _)| s.label == *kind)
                .map(|(_, (a, b))| a + b)
                .collect();
            let mean = cds.iter().sum::<f64>() / cds.len() as f64;
            class_sums[c] += mean;
            run_avg += mean;
        }
        avg_sum += run_avg / kinds.len() as f64;
        fwd_sum += per_sample.iter().map(|p| p.0).sum::<f64>() / len as f64;
        bwd_sum += per_sample.iter().map(|p| p.1).sum::<f64>() / len as f64;
    }
    let runs = eval.runs as f64;
    let rows = kinds
        .iter()
        .zip(&class_sums)
        .map(|(&kind, &sum)| ClassRow {
            kind,
            samples: samples.iter().filter(|s| s.label == kind).count(),
            cd: sum / runs * CD_SCALE,
        })
        .collect();
    Ok(EvalTable {
        rows,
        average: avg_sum / runs * CD_SCALE,
        pred_to_gt: fwd_sum / runs * CD_SCALE,
        gt_to_pred: bwd_sum / runs * CD_SCALE,
        runs: eval.runs,
    })
}

/// Evaluates P_o, or P_g when `eval.deformation` is off.
pub fn evaluate(model: &CompletionModel, samples: &[SamplePair], eval: &EvalConfig, seed: u64) -> Result<EvalTable, EvalError> {
    evaluate_with(samples, eval, seed, |input, _| {
        Ok(if eval.deformation {
            model.complete(input)?.0
        } else {
            model.complete_without_deformation(input)?
        })
    })
}
