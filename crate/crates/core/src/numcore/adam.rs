use super::matrix::Matrix;
use super::params::{ParamGrads, ParamStore};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Bias-corrected Adam with per-parameter moment estimates.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub config: AdamConfig,
    pub first_moment: Vec<Matrix>,
    pub second_moment: Vec<Matrix>,
    /// Number of steps taken so far.
    pub t: u64,
}

impl AdamState {
    pub fn new(config: AdamConfig, shapes: impl IntoIterator<Item = (usize, usize)>) -> Self {
        let first_moment: Vec<Matrix> = shapes
            .into_iter()
            .map(|(r, c)| Matrix::zeros(r, c))
            .collect();
        Self {
            config,
            second_moment: first_moment.clone(),
            first_moment,
            t: 0,
        }
    }

    pub fn for_store(config: AdamConfig, store: &ParamStore) -> Self {
        Self::new(config, store.iter().map(|(_, p)| p.value.shape()))
    }

    /// One update of every entry of `params`, which must align with the
    /// shapes this state was created with.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[&Matrix]) -> Result<()> {
        if params.len() != self.first_moment.len() || grads.len() != params.len() {
            return Err(Error::InvalidArgument(format!(
                "adam: {} params and {} grads for {} accumulators",
                params.len(),
                grads.len(),
                self.first_moment.len()
            )));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            self.check(i, p, g)?;
        }
        self.t += 1;
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            self.update(i, p, g);
        }
        Ok(())
    }

    /// Updates the trainable parameters of `store`; buffers are left alone.
    pub fn step_store(&mut self, store: &mut ParamStore, grads: &ParamGrads) -> Result<()> {
        if store.len() != self.first_moment.len() || grads.values.len() != store.len() {
            return Err(Error::InvalidArgument(format!(
                "adam: store of {} params for {} accumulators",
                store.len(),
                self.first_moment.len()
            )));
        }
        for (id, p) in store.iter() {
            self.check(id.index(), &p.value, grads.get(id))?;
        }
        self.t += 1;
        let ids: Vec<_> = store.ids().collect();
        for id in ids {
            if store.get(id).trainable {
                self.update(id.index(), store.value_mut(id), grads.get(id));
            }
        }
        Ok(())
    }

    fn check(&self, i: usize, p: &Matrix, g: &Matrix) -> Result<()> {
        for other in [g.shape(), self.first_moment[i].shape()] {
            if p.shape() != other {
                return Err(Error::ShapeMismatch {
                    op: "adam_step",
                    left: p.shape(),
                    right: other,
                });
            }
        }
        Ok(())
    }

    fn update(&mut self, i: usize, p: &mut Matrix, g: &Matrix) {
        let AdamConfig {
            lr,
            beta1,
            beta2,
            eps,
        } = self.config;
        let c1 = 1.0 - beta1.powi(self.t as i32);
        let c2 = 1.0 - beta2.powi(self.t as i32);
        let m = self.first_moment[i].as_mut_slice();
        let v = self.second_moment[i].as_mut_slice();
        for (((theta, &gi), mi), vi) in p
            .as_mut_slice()
            .iter_mut()
            .zip(g.as_slice())
            .zip(m.iter_mut())
            .zip(v.iter_mut())
        {
            *mi = beta1 * *mi + (1.0 - beta1) * gi;
            *vi = beta2 * *vi + (1.0 - beta2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *theta -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
}
