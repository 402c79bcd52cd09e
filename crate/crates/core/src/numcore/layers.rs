use std::sync::atomic::{AtomicBool, Ordering};

use rand::Rng;

use super::matrix::Matrix;
use super::params::{Binder, ParamId, ParamStore};
use super::tape::{Tape, Var};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_MOMENTUM: f64 = 0.1;

/// Dense layer `x W + b` with `W: in x out`, `b: 1 x out`.
#[derive(Debug, Clone, Copy)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            weight: store.add(
                format!("{name}.weight"),
                Matrix::glorot(fan_in, fan_out, rng),
                true,
            ),
            bias: store.add(format!("{name}.bias"), Matrix::zeros(1, fan_out), true),
        }
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, x: Var) -> Result<Var> {
        let w = binder.var(tape, self.weight);
        let b = binder.var(tape, self.bias);
        let xw = tape.matmul(x, w)?;
        tape.add_row(xw, b)
    }
}

/// Inverted dropout: survivors are scaled by `1 / (1 - rate)` in training
/// mode, and evaluation mode is the identity.
pub fn dropout<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Var,
    rate: f64,
    mode: Mode,
    rng: &mut R,
) -> Result<Var> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "dropout rate must lie in [0, 1), got {rate}"
        )));
    }
    if mode == Mode::Eval || rate == 0.0 {
        return Ok(x);
    }
    let (rows, cols) = tape.shape(x);
    let keep = 1.0 / (1.0 - rate);
    let mask: Vec<f64> = (0..rows * cols)
        .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep })
        .collect();
    tape.mask_mul(x, Matrix::from_vec(rows, cols, mask)?)
}

/// Batch normalization over the rows of its input, with learned `gamma` and
/// `beta` plus running statistics kept as non-trainable buffers.
#[derive(Debug, Clone, Copy)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

/// Running-statistics update produced by a training-mode pass. Applied
/// explicitly so that a forward pass never mutates the parameters.
#[derive(Debug, Clone)]
pub struct RunningUpdate {
    pub mean: (ParamId, Matrix),
    pub var: (ParamId, Matrix),
}

impl RunningUpdate {
    pub fn apply(&self, store: &mut ParamStore) {
        *store.value_mut(self.mean.0) = self.mean.1.clone();
        *store.value_mut(self.var.0) = self.var.1.clone();
    }
}

static SINGLETON_BATCH_WARNED: AtomicBool = AtomicBool::new(false);

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, features: usize) -> Self {
        Self {
            gamma: store.add(
                format!("{name}.gamma"),
                Matrix::filled(1, features, 1.0),
                true,
            ),
            beta: store.add(format!("{name}.beta"), Matrix::zeros(1, features), true),
            running_mean: store.add(
                format!("{name}.running_mean"),
                Matrix::zeros(1, features),
                false,
            ),
            running_var: store.add(
                format!("{name}.running_var"),
                Matrix::filled(1, features, 1.0),
                false,
            ),
        }
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        x: Var,
        mode: Mode,
    ) -> Result<(Var, Option<RunningUpdate>)> {
        let gamma = binder.var(tape, self.gamma);
        let beta = binder.var(tape, self.beta);
        let batch = tape.shape(x).0;
        if mode == Mode::Train && batch > 1 {
            let (y, stats) = tape.batch_norm_train(x, gamma, beta, BATCH_NORM_EPS)?;
            let store = binder.store();
            let n = batch as f64;
            let blend = |old: &Matrix, new: &[f64], unbias: f64| {
                let vals = old
                    .as_slice()
                    .iter()
                    .zip(new)
                    .map(|(o, v)| {
                        (1.0 - BATCH_NORM_MOMENTUM) * o + BATCH_NORM_MOMENTUM * v * unbias
                    })
                    .collect();
                Matrix::from_vec(1, new.len(), vals).expect("row shape")
            };
            let update = RunningUpdate {
                mean: (
                    self.running_mean,
                    blend(store.value(self.running_mean), &stats.mean, 1.0),
                ),
                var: (
                    self.running_var,
                    blend(store.value(self.running_var), &stats.var, n / (n - 1.0)),
                ),
            };
            return Ok((y, Some(update)));
        }
        if mode == Mode::Train && !SINGLETON_BATCH_WARNED.swap(true, Ordering::Relaxed) {
            log::warn!("batch norm with a batch of one: normalizing with running statistics");
        }
        let store = binder.store();
        let (mean, var) = (
            store.value(self.running_mean),
            store.value(self.running_var),
        );
        let cols = tape.shape(x).1;
        if mean.cols() != cols {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                left: tape.shape(x),
                right: mean.shape(),
            });
        }
        let shift = tape.constant(mean.map(|m| -m));
        let scale = tape.constant(var.map(|v| 1.0 / (v + BATCH_NORM_EPS).sqrt()));
        let centered = tape.add_row(x, shift)?;
        let normalized = tape.mul_row(centered, scale)?;
        let scaled = tape.mul_row(normalized, gamma)?;
        Ok((tape.add_row(scaled, beta)?, None))
    }
}
