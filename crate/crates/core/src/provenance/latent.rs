use ndarray::{concatenate, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentMode {
    /// `Z(p) = [z p; p]` with a Gaussian matrix `z`.
    #[default]
    Linear,
    /// `Z(p) = [ε; p]`: one Gaussian vector shared by every point.
    SpatiallyInvariant,
}

/// A random function sample applied to (encoded) positions.
#[derive(Clone, Debug, PartialEq)]
pub struct LatentFunction {
    /// `(b+1) x in_dim` for [`LatentMode::Linear`], `(b+1) x 1` otherwise.
    pub z: Array2<f64>,
    pub mode: LatentMode,
}

impl LatentFunction {
    pub fn sample<R: Rng>(rng: &mut R, b: usize, lambda: f64, in_dim: usize, mode: LatentMode) -> Self {
        let normal = Normal::new(0.0, lambda).expect("finite scale");
        let cols = match mode {
            LatentMode::Linear => in_dim,
            LatentMode::SpatiallyInvariant => 1,
        };
        Self {
            z: Array2::from_shape_fn((b + 1, cols), |_| normal.sample(rng)),
            mode,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.z.nrows()
    }

    pub fn out_dim(&self, in_dim: usize) -> usize {
        self.latent_dim() + in_dim
    }

    /// Applies the function to each row of `p`.
    pub fn apply(&self, p: &Array2<f64>) -> Result<Array2<f64>> {
        let latent = match self.mode {
            LatentMode::Linear => {
                if p.ncols() != self.z.ncols() {
                    return Err(Error::Shape {
                        op: "latent_apply",
                        detail: format!("input width {} vs {}", p.ncols(), self.z.ncols()),
                    });
                }
                p.dot(&self.z.t())
            }
            LatentMode::SpatiallyInvariant => {
                let row = self.z.t();
                row.broadcast((p.nrows(), self.z.nrows()))
                    .expect("row broadcast")
                    .to_owned()
            }
        };
        Ok(concatenate(Axis(1), &[latent.view(), p.view()]).expect("matching rows"))
    }

    pub fn apply_one(&self, p: &[f64]) -> Result<Vec<f64>> {
        let m = Array2::from_shape_vec((1, p.len()), p.to_vec()).expect("row");
        Ok(self.apply(&m)?.into_raw_vec_and_offset().0)
    }
}

/// Fresh latent function with entries drawn i.i.d. from `N(0, λ²)`.
pub fn sample_latent_function(
    b: usize,
    lambda: f64,
    in_dim: usize,
    mode: LatentMode,
    seed: u64,
) -> Result<LatentFunction> {
    if b < 1 || !(lambda > 0.0) {
        return Err(Error::Config(format!("latent b={b}, lambda={lambda}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(LatentFunction::sample(&mut rng, b, lambda, in_dim, mode))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tiny_scale_passes_input_through() {
        let z = sample_latent_function(4, 1e-12, 3, LatentMode::Linear, 1).unwrap();
        let out = z.apply_one(&[0.5, -1.0, 2.0]).unwrap();
        assert_eq!(out.len(), 4 + 1 + 3);
        assert!(out[..5].iter().all(|v| v.abs() < 1e-10));
        assert_eq!(&out[5..], &[0.5, -1.0, 2.0]);
    }

    #[test]
    fn linear_in_input() {
        let z = sample_latent_function(6, 1.0, 3, LatentMode::Linear, 9).unwrap();
        let a = z.apply_one(&[0.1, 0.2, -0.3]).unwrap();
        let b = z.apply_one(&[0.25, 0.5, -0.75]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((2.5 * x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn entry_variance_matches_scale() {
        let lambda = 0.7;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut n = 0.0;
        for _ in 0..100_000 {
            let f = LatentFunction::sample(&mut rng, 1, lambda, 3, LatentMode::Linear);
            for &v in f.z.iter() {
                sum += v;
                sum_sq += v * v;
                n += 1.0;
            }
        }
        let mean = sum / n;
        let var = sum_sq / n - mean * mean;
        assert!((var / (lambda * lambda) - 1.0).abs() < 0.03, "{var}");
    }

    #[test]
    fn seed_determinism_and_invariant_mode() {
        let a = sample_latent_function(3, 1.0, 3, LatentMode::Linear, 5).unwrap();
        assert_eq!(a, sample_latent_function(3, 1.0, 3, LatentMode::Linear, 5).unwrap());
        let e = sample_latent_function(3, 1.0, 3, LatentMode::SpatiallyInvariant, 5).unwrap();
        let p = Array2::from_shape_fn((2, 3), |(i, j)| (i + j) as f64);
        let out = e.apply(&p).unwrap();
        assert_eq!(out.row(0).slice(ndarray::s![..4]), out.row(1).slice(ndarray::s![..4]));
        assert!(sample_latent_function(0, 1.0, 3, LatentMode::Linear, 5).is_err());
    }
}
