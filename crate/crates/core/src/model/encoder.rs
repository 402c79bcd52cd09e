use std::rc::Rc;

use rand::Rng;

use super::config::NormPlacement;
use super::layers::{
    aggregate, build_mlp, gru_combine, readout, Attention, GraphBatch, Gru, Readout,
};
use crate::error::{Error, Result};
use crate::numcore::{
    BatchNorm, Binder, Dense, Mode, ParamStore, RunningUpdate, Segment, Tape, Var,
};

/// Shape of one message passing network.
#[derive(Debug, Clone, Copy)]
pub struct EncoderShape {
    pub input_dim: usize,
    pub hidden: usize,
    pub iterations: usize,
    pub mlp_layers: usize,
    pub gru: bool,
    pub multi_readout: bool,
    /// `true` when graphs carry a master node that skips attention.
    pub master_skip: bool,
    pub norm: NormPlacement,
}

impl EncoderShape {
    pub fn readout_width(&self) -> usize {
        if self.master_skip {
            2 * self.hidden
        } else {
            self.hidden
        }
    }

    pub fn output_len(&self) -> usize {
        let steps = if self.multi_readout {
            self.iterations
        } else {
            1
        };
        steps * self.readout_width()
    }
}

#[derive(Debug, Clone)]
struct Step {
    mlp: Vec<Dense>,
    gru: Option<Gru>,
}

/// Attention weights of one readout; `segments` delimits each graph's rows.
pub struct AttentionRecord {
    pub alpha: Var,
    pub segments: Rc<[Segment]>,
}

/// Values recorded during a forward pass that callers may want afterwards.
#[derive(Default)]
pub struct Trace {
    pub updates: Vec<RunningUpdate>,
    /// One record per readout, in the order they were computed.
    pub alphas: Vec<AttentionRecord>,
}

/// `T` rounds of aggregate + combine, followed by (multi-)readout.
#[derive(Debug, Clone)]
pub struct Encoder {
    shape: EncoderShape,
    steps: Vec<Step>,
    readouts: Vec<Readout>,
    final_norm: Option<BatchNorm>,
}

impl Encoder {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        shape: EncoderShape,
        rng: &mut R,
    ) -> Self {
        let mut steps = Vec::with_capacity(shape.iterations);
        for t in 0..shape.iterations {
            let input = if t == 0 {
                shape.input_dim
            } else {
                shape.hidden
            };
            let prefix = format!("{name}.t{}", t + 1);
            let mlp = build_mlp(
                store,
                &format!("{prefix}.mlp"),
                input,
                shape.hidden,
                shape.mlp_layers,
                rng,
            );
            let gru = shape
                .gru
                .then(|| Gru::new(store, &format!("{prefix}.gru"), input, shape.hidden, rng));
            steps.push(Step { mlp, gru });
        }
        let readout_steps: Vec<usize> = if shape.multi_readout {
            (1..=shape.iterations).collect()
        } else {
            vec![shape.iterations]
        };
        let readouts = readout_steps
            .into_iter()
            .map(|t| {
                let prefix = format!("{name}.t{t}.readout");
                let attention =
                    Attention::new(store, &format!("{prefix}.attention"), shape.hidden, rng);
                let norm = (shape.norm == NormPlacement::PerStep).then(|| {
                    BatchNorm::new(store, &format!("{prefix}.norm"), shape.readout_width())
                });
                Readout { attention, norm }
            })
            .collect();
        let final_norm = (shape.norm == NormPlacement::Final)
            .then(|| BatchNorm::new(store, &format!("{name}.norm"), shape.output_len()));
        Self {
            shape,
            steps,
            readouts,
            final_norm,
        }
    }

    pub fn shape(&self) -> &EncoderShape {
        &self.shape
    }

    /// Returns the graph representations, one row per graph of `batch`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        h0: Var,
        batch: &GraphBatch,
        mode: Mode,
        trace: &mut Trace,
    ) -> Result<Var> {
        let mut h = h0;
        let mut parts = Vec::with_capacity(self.readouts.len());
        let last = self.steps.len() - 1;
        for (t, step) in self.steps.iter().enumerate() {
            let m = aggregate(tape, binder, h, &batch.blocks, &step.mlp)?;
            h = match &step.gru {
                Some(gru) => gru_combine(tape, binder, h, m, gru)?,
                None => m,
            };
            if self.shape.multi_readout || t == last {
                let ro = &self.readouts[parts.len()];
                let out = readout(tape, binder, h, &batch.layout, ro, mode)?;
                trace.alphas.push(AttentionRecord {
                    alpha: out.alpha,
                    segments: batch.layout.segments.clone(),
                });
                trace.updates.extend(out.update);
                parts.push(out.vector);
            }
        }
        let mut rep = if parts.len() == 1 {
            parts[0]
        } else {
            tape.concat_cols(&parts)?
        };
        if let Some(bn) = &self.final_norm {
            let (y, update) = bn.forward(tape, binder, rep, mode)?;
            trace.updates.extend(update);
            rep = y;
        }
        let width = tape.shape(rep).1;
        if width != self.shape.output_len() {
            return Err(Error::ShapeMismatch {
                op: "encoder",
                left: tape.shape(rep),
                right: (batch.layout.num_graphs(), self.shape.output_len()),
            });
        }
        Ok(rep)
    }
}
