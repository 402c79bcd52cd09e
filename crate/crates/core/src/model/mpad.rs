use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{MpadConfig, Variant};
use super::encoder::{AttentionRecord, Encoder, EncoderShape, Trace};
use super::layers::{Attention, GraphBatch, PreparedGraph, ReadoutLayout};
use crate::corpus::EncodedDocument;
use crate::error::{Error, Result};
use crate::graph::{build_cooccurrence_graph, clique_graph, path_graph, MASTER_ID};
use crate::numcore::{dropout, Binder, Dense, Matrix, Mode, ParamId, ParamStore, Tape, Var};

pub const EMBEDDINGS_PARAM: &str = "embeddings";

/// Scale applied to the Glorot draw of the output layer.
const OUTPUT_INIT_SCALE: f64 = 0.1;

#[derive(Debug, Clone)]
struct Classifier {
    hidden: Dense,
    output: Dense,
}

#[derive(Debug, Clone)]
enum Head {
    Flat,
    SentenceAttention {
        sentence: Dense,
        attention: Attention,
    },
    SentenceGraph {
        sentence: Dense,
        level2: Encoder,
    },
}

/// Graphs of one document, ready for the forward pass.
#[derive(Debug, Clone)]
pub struct PreparedDocument {
    pub label: usize,
    /// The document graph (flat) or one graph per sentence (hierarchical).
    pub graphs: Vec<PreparedGraph>,
    /// Clique or path over the sentences.
    pub sentence_graph: Option<PreparedGraph>,
}

/// Result of a forward pass. Borrow of the parameters ends when this is
/// dropped.
pub struct ForwardPass<'a> {
    pub tape: Tape,
    pub binder: Binder<'a>,
    pub logits: Var,
    /// Document representations before the classifier.
    pub representation: Var,
    pub trace: Trace,
}

/// A message passing attention network for document classification.
#[derive(Debug, Clone)]
pub struct Mpad {
    pub config: MpadConfig,
    pub params: ParamStore,
    embeddings: ParamId,
    encoder: Encoder,
    head: Head,
    classifier: Classifier,
}

impl Mpad {
    /// Initializes a model around an embedding table (`V x d0`).
    pub fn new(config: MpadConfig, embeddings: Matrix, seed: u64) -> Result<Self> {
        config.validate()?;
        if embeddings.cols() != config.embedding_dim || embeddings.rows() == 0 {
            return Err(Error::InvalidArgument(format!(
                "embedding table {:?} does not match embedding_dim {}",
                embeddings.shape(),
                config.embedding_dim
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let embeddings = params.add(EMBEDDINGS_PARAM, embeddings, config.train_embeddings);
        let d = config.hidden_dim;
        let shape = EncoderShape {
            input_dim: config.embedding_dim,
            hidden: d,
            iterations: config.iterations,
            mlp_layers: config.mlp_layers,
            gru: config.gru_combine,
            multi_readout: config.multi_readout,
            master_skip: config.master_node && config.master_skip,
            norm: config.batch_norm,
        };
        let encoder = Encoder::new(&mut params, "encoder", shape, &mut rng);
        assert_eq!(shape.output_len(), config.representation_len());

        let (head, head_out) = match config.variant {
            Variant::Flat => (Head::Flat, config.representation_len()),
            Variant::SentenceAtt => {
                let sentence = Dense::new(&mut params, "sentence", shape.output_len(), d, &mut rng);
                let attention = Attention::new(&mut params, "document.attention", d, &mut rng);
                (
                    Head::SentenceAttention {
                        sentence,
                        attention,
                    },
                    d,
                )
            }
            Variant::Clique | Variant::Path => {
                let sentence = Dense::new(&mut params, "sentence", shape.output_len(), d, &mut rng);
                let level2_shape = EncoderShape {
                    input_dim: d,
                    hidden: d,
                    iterations: config.level2_iterations,
                    mlp_layers: config.mlp_layers,
                    gru: config.gru_combine,
                    multi_readout: config.level2_multi_readout,
                    master_skip: false,
                    norm: config.batch_norm,
                };
                let level2 = Encoder::new(&mut params, "level2", level2_shape, &mut rng);
                assert_eq!(
                    level2_shape.output_len(),
                    config.level2_representation_len()
                );
                (
                    Head::SentenceGraph { sentence, level2 },
                    level2_shape.output_len(),
                )
            }
        };
        let hidden = Dense::new(&mut params, "classifier.hidden", head_out, d, &mut rng);
        let output = Dense::new(
            &mut params,
            "classifier.output",
            d,
            config.num_classes,
            &mut rng,
        );
        let w = params.value_mut(output.weight);
        *w = w.map(|v| v * OUTPUT_INIT_SCALE);

        Ok(Self {
            config,
            params,
            embeddings,
            encoder,
            head,
            classifier: Classifier { hidden, output },
        })
    }

    /// Rebuilds a model from stored parameters (e.g. a checkpoint).
    pub fn from_params(config: MpadConfig, stored: &ParamStore) -> Result<Self> {
        let id = stored
            .id(EMBEDDINGS_PARAM)
            .ok_or_else(|| Error::Checkpoint("missing embeddings".into()))?;
        let (v, d0) = stored.value(id).shape();
        let mut model = Self::new(config, Matrix::zeros(v, d0), 0)?;
        model
            .params
            .copy_values_from(stored)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        Ok(model)
    }

    pub fn vocab_size(&self) -> usize {
        self.params.value(self.embeddings).rows()
    }

    pub fn embeddings(&self) -> &Matrix {
        self.params.value(self.embeddings)
    }

    /// Builds the graphs the configured variant consumes.
    pub fn prepare(&self, doc: &EncodedDocument) -> Result<PreparedDocument> {
        let c = &self.config;
        if let Some(&bad) = doc.tokens.iter().find(|&&t| t >= self.vocab_size()) {
            return Err(Error::InvalidArgument(format!(
                "token index {bad} outside vocabulary of {}",
                self.vocab_size()
            )));
        }
        let word_graph = |tokens: &[usize]| -> Result<PreparedGraph> {
            let g = build_cooccurrence_graph(tokens, c.window, c.directed, c.master_node)?;
            Ok(PreparedGraph::new(g, c.renormalize))
        };
        match c.variant {
            Variant::Flat => Ok(PreparedDocument {
                label: doc.label,
                graphs: vec![word_graph(&doc.tokens)?],
                sentence_graph: None,
            }),
            variant => {
                if doc.sentences.is_empty() {
                    return Err(Error::EmptyGraph);
                }
                let graphs = doc
                    .sentences
                    .iter()
                    .map(|s| word_graph(s))
                    .collect::<Result<Vec<_>>>()?;
                let k = graphs.len();
                let sentence_graph = match variant {
                    Variant::Clique => Some(PreparedGraph::new(clique_graph(k)?, c.renormalize)),
                    Variant::Path => Some(PreparedGraph::new(path_graph(k)?, c.renormalize)),
                    _ => None,
                };
                Ok(PreparedDocument {
                    label: doc.label,
                    graphs,
                    sentence_graph,
                })
            }
        }
    }

    /// Initial node features: embedding rows for words, zeros for master
    /// nodes.
    fn node_features(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        graphs: &[&PreparedGraph],
    ) -> Var {
        let ids: Vec<Option<usize>> = graphs
            .iter()
            .flat_map(|g| g.graph.node_ids.iter())
            .map(|&id| (id != MASTER_ID).then_some(id))
            .collect();
        if self.config.train_embeddings {
            let table = binder.var(tape, self.embeddings);
            tape.gather_rows(table, ids.into())
                .expect("node ids validated in prepare")
        } else {
            let table = self.params.value(self.embeddings);
            let mut h0 = Matrix::zeros(ids.len(), table.cols());
            for (row, id) in ids.iter().enumerate() {
                if let Some(id) = *id {
                    h0.row_mut(row).copy_from_slice(table.row(id));
                }
            }
            tape.constant(h0)
        }
    }

    fn classify<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        rep: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let rate = self.config.dropout;
        let x = dropout(tape, rep, rate, mode, rng)?;
        let x = self.classifier.hidden.forward(tape, binder, x)?;
        let x = tape.relu(x)?;
        let x = dropout(tape, x, rate, mode, rng)?;
        self.classifier.output.forward(tape, binder, x)
    }

    /// Forward pass over a batch of documents, producing `batch x C` logits.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        docs: &[&PreparedDocument],
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardPass<'_>> {
        if docs.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params);
        let mut trace = Trace::default();
        let graphs: Vec<&PreparedGraph> = docs.iter().flat_map(|d| d.graphs.iter()).collect();
        let h0 = self.node_features(&mut tape, &mut binder, &graphs);
        let representation = self.encode(
            &mut tape,
            &mut binder,
            h0,
            docs,
            &graphs,
            mode,
            rng,
            &mut trace,
        )?;
        let logits = self.classify(&mut tape, &mut binder, representation, mode, rng)?;
        Ok(ForwardPass {
            tape,
            binder,
            logits,
            representation,
            trace,
        })
    }

    /// Flat forward pass with caller-supplied initial node features (rows
    /// aligned with the stacked nodes of `graphs`).
    pub fn forward_graphs<R: Rng + ?Sized>(
        &self,
        graphs: &[&PreparedGraph],
        features: Matrix,
        mode: Mode,
        rng: &mut R,
    ) -> Result<ForwardPass<'_>> {
        if self.config.variant != Variant::Flat {
            return Err(Error::InvalidArgument(
                "forward_graphs requires the flat variant".into(),
            ));
        }
        let mut tape = Tape::new();
        let mut binder = Binder::new(&self.params);
        let mut trace = Trace::default();
        let h0 = tape.constant(features);
        let batch = GraphBatch::new(graphs, self.config.master_skip)?;
        let representation =
            self.encoder
                .forward(&mut tape, &mut binder, h0, &batch, mode, &mut trace)?;
        let logits = self.classify(&mut tape, &mut binder, representation, mode, rng)?;
        Ok(ForwardPass {
            tape,
            binder,
            logits,
            representation,
            trace,
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn encode<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        h0: Var,
        docs: &[&PreparedDocument],
        graphs: &[&PreparedGraph],
        mode: Mode,
        rng: &mut R,
        trace: &mut Trace,
    ) -> Result<Var> {
        let batch = GraphBatch::new(graphs, self.config.master_skip)?;
        let words = self
            .encoder
            .forward(tape, binder, h0, &batch, mode, trace)?;
        let sentence_vectors =
            |tape: &mut Tape, binder: &mut Binder, rng: &mut R, dense: &Dense| {
                let x = dropout(tape, words, self.config.dropout, mode, rng)?;
                let x = dense.forward(tape, binder, x)?;
                tape.relu(x)
            };
        match &self.head {
            Head::Flat => Ok(words),
            Head::SentenceAttention {
                sentence,
                attention,
            } => {
                let s = sentence_vectors(tape, binder, rng, sentence)?;
                let sizes: Vec<usize> = docs.iter().map(|d| d.graphs.len()).collect();
                let layout = ReadoutLayout::all_rows(&sizes)?;
                let (u, alpha) = attention.pool(tape, binder, s, &layout)?;
                trace.alphas.push(AttentionRecord {
                    alpha,
                    segments: layout.segments.clone(),
                });
                Ok(u)
            }
            Head::SentenceGraph { sentence, level2 } => {
                let s = sentence_vectors(tape, binder, rng, sentence)?;
                let level2_graphs = docs
                    .iter()
                    .map(|d| {
                        d.sentence_graph.as_ref().ok_or_else(|| {
                            Error::InvalidArgument("document prepared for another variant".into())
                        })
                    })
                    .collect::<Result<Vec<_>>>()?;
                let batch2 = GraphBatch::new(&level2_graphs, false)?;
                level2.forward(tape, binder, s, &batch2, mode, trace)
            }
        }
    }

    /// Eval-mode class probabilities, one row per document.
    pub fn predict_proba(
        &self,
        docs: &[PreparedDocument],
        batch_size: usize,
    ) -> Result<Vec<Vec<f64>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut out = Vec::with_capacity(docs.len());
        for chunk in docs.chunks(batch_size.max(1)) {
            let refs: Vec<&PreparedDocument> = chunk.iter().collect();
            let pass = self.forward(&refs, Mode::Eval, &mut rng)?;
            let logits = pass.tape.value(pass.logits);
            for i in 0..logits.rows() {
                out.push(softmax(logits.row(i)));
            }
        }
        Ok(out)
    }

    /// Eval-mode attention weights for one document: one entry per readout,
    /// holding one weight vector per attended graph (in the node order of its
    /// attended nodes). Word-level readouts come first, in step order.
    pub fn attention(&self, doc: &PreparedDocument) -> Result<Vec<Vec<Vec<f64>>>> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pass = self.forward(&[doc], Mode::Eval, &mut rng)?;
        Ok(pass
            .trace
            .alphas
            .iter()
            .map(|rec| {
                let alpha = pass.tape.value(rec.alpha).as_slice();
                rec.segments
                    .iter()
                    .map(|s| alpha[s.start..s.start + s.len].to_vec())
                    .collect()
            })
            .collect())
    }
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}
