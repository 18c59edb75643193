//! Provenance: per-point distributions over the locations a point is seen from.

pub mod empirical;
pub mod field;
pub mod latent;
pub mod loss;
pub mod train;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Vec3;

pub use empirical::{empirical_provenance, EmpiricalOracle, EmpiricalProvenanceSet};
pub use field::{FieldConfig, ProvenanceField};
pub use latent::{sample_latent_function, LatentFunction, LatentMode};
pub use loss::{fimle_loss, FimleBatch};
pub use train::{
    train_deterministic_baseline, train_provenance_field, SampleMode, TrainConfig, TrainOutcome,
};

/// Distance-direction tuple; `|d|` is the visibility and `t` is the
/// distance scaled by it.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceSample {
    pub t: f64,
    pub d: [f64; 3],
}

impl ProvenanceSample {
    pub const ZERO: Self = Self {
        t: 0.0,
        d: [0.0; 3],
    };

    /// Tuple for an observer at distance `dist` along unit `dir` (from
    /// observer to point) with visibility `v`.
    pub fn from_visibility(dist: f64, dir: &Vec3, v: f64) -> Self {
        Self {
            t: v * dist,
            d: [v * dir.x, v * dir.y, v * dir.z],
        }
    }

    pub fn direction(&self) -> Vec3 {
        Vec3::from(self.d)
    }

    pub fn visibility(&self) -> f64 {
        self.direction().norm()
    }

    pub fn is_zero(&self) -> bool {
        self.t == 0.0 && self.d == [0.0; 3]
    }

    /// `[t / scale, d]`, the vector compared by matching losses and metrics.
    pub fn to_vec4(&self, scale: f64) -> [f64; 4] {
        [self.t / scale, self.d[0], self.d[1], self.d[2]]
    }

    /// Distance from the observer to the point, `t / |d|`.
    pub fn distance(&self) -> Result<f64> {
        let v = self.visibility();
        if v == 0.0 {
            return Err(Error::InvisibleSample);
        }
        Ok(self.t / v)
    }
}

/// Observer location `x - (t/|d|) d/|d|`, the exact inverse of the
/// visibility scaling.
pub fn recover_observation_location(x: &Vec3, sample: &ProvenanceSample) -> Result<Vec3> {
    let v = sample.visibility();
    if v == 0.0 {
        return Err(Error::InvisibleSample);
    }
    Ok(x - sample.direction() * (sample.t / (v * v)))
}

/// Squared distance between two 4-vectors.
pub fn sq_dist4(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    (0..4).map(|i| (a[i] - b[i]).powi(2)).sum()
}

/// Anything that can draw provenance samples at query points.
pub trait ProvenanceSource: Sync {
    /// `n` draws per point (fewer or more for sources with a fixed sample
    /// set), before any visibility filtering.
    fn sample_batch(&self, xs: &[Vec3], n: usize, seed: u64) -> Result<Vec<Vec<ProvenanceSample>>>;

    /// Scale used to normalize `t` in 4-vector comparisons.
    fn distance_scale(&self) -> f64;

    fn sample(&self, x: &Vec3, n: usize, seed: u64) -> Result<Vec<ProvenanceSample>> {
        Ok(self
            .sample_batch(std::slice::from_ref(x), n, seed)?
            .pop()
            .unwrap_or_default())
    }
}

/// Samples with visibility at least `v_min`.
pub fn filter_visible(samples: &[ProvenanceSample], v_min: f64) -> Vec<ProvenanceSample> {
    samples
        .iter()
        .copied()
        .filter(|s| s.visibility() >= v_min && s.visibility() > 0.0)
        .collect()
}
