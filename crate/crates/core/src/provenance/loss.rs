use std::sync::Arc;

use ndarray::Array2;

use crate::autodiff::{MlpParams, MlpVars, Tape, Var};
use crate::error::{Error, Result};
use crate::geometry::Vec3;

use super::field::ProvenanceField;
use super::latent::LatentFunction;
use super::ProvenanceSample;

/// Inputs of one pointwise matching loss evaluation.
#[derive(Clone, Debug)]
pub struct FimleBatch {
    /// Head inputs, `k * n_points` rows, latent-major.
    pub inputs: Array2<f64>,
    pub n_points: usize,
    pub k: usize,
    /// Point index of each matching term.
    pub term_point: Vec<usize>,
    /// Normalized target 4-vectors, one row per term.
    pub targets: Array2<f64>,
}

impl FimleBatch {
    /// One term per nonzero target tuple. For deterministic fields `pool`
    /// is ignored and `k` is 1.
    pub fn build(
        field: &ProvenanceField,
        pool: &[LatentFunction],
        xs: &[Vec3],
        targets: &[Vec<ProvenanceSample>],
    ) -> Result<Self> {
        if xs.is_empty() || xs.len() != targets.len() {
            return Err(Error::Shape {
                op: "fimle_batch",
                detail: format!("{} points, {} target sets", xs.len(), targets.len()),
            });
        }
        let k = if field.config.deterministic { 1 } else { pool.len() };
        if k == 0 {
            return Err(Error::Config("latent pool is empty".into()));
        }
        let scale = field.config.distance_scale();
        let mut term_point = Vec::new();
        let mut flat = Vec::new();
        for (i, set) in targets.iter().enumerate() {
            for s in set.iter().filter(|s| !s.is_zero()) {
                term_point.push(i);
                flat.extend_from_slice(&s.to_vec4(scale));
            }
        }
        if term_point.is_empty() {
            return Err(Error::NoTargets);
        }
        let enc = field.encode(xs)?;
        Ok(Self {
            inputs: field.stacked_inputs(pool, &enc)?,
            n_points: xs.len(),
            k,
            targets: Array2::from_shape_vec((term_point.len(), 4), flat).expect("4 per term"),
            term_point,
        })
    }
}

/// Mean over terms of the squared 4-dim distance from each target to the
/// nearest of the `k` decoded head outputs at its point. Only the selected
/// output receives gradient.
pub fn fimle_loss(
    tape: &mut Tape,
    head: &MlpParams,
    batch: &FimleBatch,
    decode_offset: f64,
) -> Result<(Var, MlpVars)> {
    if batch.inputs.nrows() != batch.k * batch.n_points {
        return Err(Error::Shape {
            op: "fimle_loss",
            detail: format!(
                "{} input rows for k={} x n={}",
                batch.inputs.nrows(),
                batch.k,
                batch.n_points
            ),
        });
    }
    let input = tape.constant(batch.inputs.clone());
    let vars = head.forward(tape, input)?;
    let decoded = tape.decode(vars.output, decode_offset)?;
    let targets = tape.constant(batch.targets.clone());
    let mut cols = Vec::with_capacity(batch.k);
    for j in 0..batch.k {
        let idx: Vec<usize> = batch
            .term_point
            .iter()
            .map(|&i| j * batch.n_points + i)
            .collect();
        let picked = tape.gather_rows(decoded, Arc::new(idx))?;
        let diff = tape.sub(picked, targets)?;
        let sq = tape.square(diff);
        cols.push(tape.row_sum(sq));
    }
    let all = tape.concat_cols(&cols)?;
    let nearest = tape.min_select(all)?;
    Ok((tape.mean(nearest), vars))
}
