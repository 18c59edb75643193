use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::tape::{Tape, Var};
use crate::error::{Error, Result};

/// Width of the raw provenance head: one distance unit and three direction units.
pub const HEAD_DIM: usize = 4;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Relu,
}

/// Three dense layers `in -> hidden -> hidden -> 4`, stored as `(W, b)` pairs
/// with `W: in x out` and `b: 1 x out` (row-vector batches).
#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    tensors: Vec<Array2<f64>>,
    pub activation: Activation,
}

/// Tape handles for one recorded forward pass.
#[derive(Clone, Debug)]
pub struct MlpVars {
    pub output: Var,
    pub params: Vec<Var>,
}

pub const PARAM_NAMES: [&str; 6] = ["w1", "b1", "w2", "b2", "w3", "b3"];

impl MlpParams {
    /// He-normal hidden layers, a scaled-down output layer and zero biases.
    pub fn init(in_dim: usize, hidden: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut dense = |fan_in: usize, fan_out: usize, gain: f64| {
            let std = gain * (2.0 / fan_in as f64).sqrt();
            let normal = Normal::new(0.0, std).expect("finite std");
            Array2::from_shape_fn((fan_in, fan_out), |_| normal.sample(&mut rng))
        };
        let w1 = dense(in_dim, hidden, 1.0);
        let w2 = dense(hidden, hidden, 1.0);
        let w3 = dense(hidden, HEAD_DIM, 0.1);
        Self {
            tensors: vec![
                w1,
                Array2::zeros((1, hidden)),
                w2,
                Array2::zeros((1, hidden)),
                w3,
                Array2::zeros((1, HEAD_DIM)),
            ],
            activation: Activation::Relu,
        }
    }

    pub fn from_tensors(tensors: Vec<Array2<f64>>) -> Result<Self> {
        let p = Self {
            tensors,
            activation: Activation::Relu,
        };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        let t = &self.tensors;
        let bad = |detail: String| Error::Shape {
            op: "mlp_params",
            detail,
        };
        if t.len() != 6 {
            return Err(bad(format!("expected 6 tensors, got {}", t.len())));
        }
        let hidden = t[0].ncols();
        let expected = [
            (t[0].nrows(), hidden),
            (1, hidden),
            (hidden, hidden),
            (1, hidden),
            (hidden, HEAD_DIM),
            (1, HEAD_DIM),
        ];
        for (i, (tensor, want)) in t.iter().zip(expected).enumerate() {
            if tensor.dim() != want {
                return Err(bad(format!(
                    "{} is {:?}, expected {:?}",
                    PARAM_NAMES[i],
                    tensor.dim(),
                    want
                )));
            }
        }
        if t.iter().any(|m| m.iter().any(|v| !v.is_finite())) {
            return Err(Error::NonFinite("mlp parameter".into()));
        }
        Ok(())
    }

    pub fn in_dim(&self) -> usize {
        self.tensors[0].nrows()
    }

    pub fn hidden(&self) -> usize {
        self.tensors[0].ncols()
    }

    pub fn tensors(&self) -> &[Array2<f64>] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Array2<f64>] {
        &mut self.tensors
    }

    fn check_input(&self, cols: usize) -> Result<()> {
        if cols != self.in_dim() {
            return Err(Error::Shape {
                op: "mlp_forward",
                detail: format!("input has {cols} columns, expected {}", self.in_dim()),
            });
        }
        Ok(())
    }

    fn act(&self, tape: &mut Tape, v: Var) -> Var {
        match self.activation {
            Activation::Relu => tape.relu(v),
        }
    }

    /// Records the forward pass of an `N x in_dim` batch; returns the raw `N x 4` head.
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<MlpVars> {
        self.check_input(tape.value(input).ncols())?;
        let params: Vec<Var> = self.tensors.iter().map(|t| tape.param(t.clone())).collect();
        let mut h = input;
        for layer in 0..3 {
            let z = tape.matmul(h, params[2 * layer])?;
            let z = tape.add_bias(z, params[2 * layer + 1])?;
            h = if layer < 2 { self.act(tape, z) } else { z };
        }
        Ok(MlpVars { output: h, params })
    }

    /// Same arithmetic as [`forward`](Self::forward) without recording.
    pub fn forward_plain(&self, input: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(input.ncols())?;
        let mut h = input.clone();
        for layer in 0..3 {
            let mut z = h.dot(&self.tensors[2 * layer]);
            z += &self.tensors[2 * layer + 1];
            h = if layer < 2 {
                match self.activation {
                    Activation::Relu => z.mapv(|x| x.max(0.0)),
                }
            } else {
                z
            };
        }
        Ok(h)
    }
}
