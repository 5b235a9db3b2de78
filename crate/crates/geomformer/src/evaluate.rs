//! Split-level MSE of the model and of the linear-extrapolation baseline.
//!
//! Per-record squared-error sums are computed in parallel and reduced in
//! record order, so results are identical for any thread count.

use geomformer_core::model::{positions_tensor, Model};
use geomformer_core::nbody::{linear_extrapolation, TrajectoryRecord};
use geomformer_core::train::mse_loss;
use geomformer_core::Tensor;
use rayon::prelude::*;

use crate::dataset::record_system;
use crate::error::{CliError, Result};

/// Mean over every coordinate of every record, given per-record means.
fn pooled(per_record: Vec<(f64, usize)>) -> Result<f64> {
    let (sum, count) = per_record
        .into_iter()
        .fold((0.0, 0usize), |(s, c), (mse, k)| (s + mse * k as f64, c + k));
    if count == 0 {
        return Err(CliError::Config("cannot evaluate an empty split".into()));
    }
    Ok(sum / count as f64)
}

fn record_mse(pred: &Tensor, record: &TrajectoryRecord) -> Result<(f64, usize)> {
    let target = positions_tensor(&record.p_t)?;
    Ok((mse_loss(pred, &target)?, target.len()))
}

/// Model MSE with dropout disabled.
pub fn evaluate(model: &Model, records: &[TrajectoryRecord]) -> Result<f64> {
    let per: Result<Vec<_>> = records
        .par_iter()
        .map(|r| {
            let pred = model.predict_positions(&record_system(r)?)?;
            record_mse(&pred, r)
        })
        .collect();
    pooled(per?)
}

/// MSE of `p0 + v0·horizon`.
pub fn baseline_mse(records: &[TrajectoryRecord], horizon: f64) -> Result<f64> {
    let per: Result<Vec<_>> = records
        .iter()
        .map(|r| {
            let pred = positions_tensor(&linear_extrapolation(&r.p0, &r.v0, horizon))?;
            record_mse(&pred, r)
        })
        .collect();
    pooled(per?)
}
