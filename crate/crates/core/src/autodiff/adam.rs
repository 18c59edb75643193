use ndarray::{Array2, Zip};

use crate::error::{Error, Result};

/// Learning rate used when none is configured.
pub const DEFAULT_LR: f64 = 5e-5;

#[derive(Clone, Debug)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
}

impl AdamState {
    pub fn new(lr: f64, params: &[Array2<f64>]) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: params.iter().map(|p| Array2::zeros(p.dim())).collect(),
            v: params.iter().map(|p| Array2::zeros(p.dim())).collect(),
        }
    }

    /// One bias-corrected Adam update. Gradients are checked before any
    /// parameter is touched, so a rejected step leaves everything unchanged.
    pub fn step(
        &mut self,
        params: &mut [Array2<f64>],
        grads: &[Array2<f64>],
        names: &[&str],
    ) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be > 0", self.lr)));
        }
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Shape {
                op: "adam_step",
                detail: format!(
                    "{} params, {} grads, {} moments",
                    params.len(),
                    grads.len(),
                    self.m.len()
                ),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            let name = names.get(i).copied().unwrap_or("?");
            if p.dim() != g.dim() || p.dim() != self.m[i].dim() {
                return Err(Error::Shape {
                    op: "adam_step",
                    detail: format!("{name}: param {:?} grad {:?}", p.dim(), g.dim()),
                });
            }
            if g.iter().any(|x| !x.is_finite()) {
                return Err(Error::NanGradient(name.to_string()));
            }
        }

        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        let (b1, b2, eps, lr) = (self.beta1, self.beta2, self.eps, self.lr);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            Zip::from(p)
                .and(g)
                .and(m)
                .and(v)
                .for_each(|p, &g, m, v| {
                    *m = b1 * *m + (1.0 - b1) * g;
                    *v = b2 * *v + (1.0 - b2) * g * g;
                    let m_hat = *m / bc1;
                    let v_hat = *v / bc2;
                    *p -= lr * m_hat / (v_hat.sqrt() + eps);
                });
        }
        Ok(())
    }
}
