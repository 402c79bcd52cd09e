//! The three message passing functions: MLP aggregation over the
//! renormalized adjacency, GRU combination, and attention readout with the
//! master node skip connection.
//!
//! Every function works on a batch of graphs stacked row-wise: node `k` of
//! graph `g` lives at row `offset(g) + k`. Aggregation multiplies each
//! graph's block by its own operator; readout pools each graph's rows
//! separately.

use std::rc::Rc;

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{renormalize, DocumentGraph};
use crate::numcore::{
    BatchNorm, Binder, Block, Dense, Matrix, Mode, ParamId, ParamStore, RunningUpdate, Segment,
    Tape, Var,
};

/// A graph together with its aggregation operator.
#[derive(Debug, Clone)]
pub struct PreparedGraph {
    pub graph: DocumentGraph,
    /// `D^-1 A`, or `A` when renormalization is disabled.
    pub operator: Matrix,
}

impl PreparedGraph {
    pub fn new(graph: DocumentGraph, renormalize_rows: bool) -> Self {
        let operator = renormalize(&graph, renormalize_rows);
        Self { graph, operator }
    }

    pub fn num_nodes(&self) -> usize {
        self.graph.num_nodes()
    }
}

/// Which rows a readout pools, graph by graph.
#[derive(Debug, Clone)]
pub struct ReadoutLayout {
    /// Rows entering attention, grouped by graph.
    pub content: Rc<[Option<usize>]>,
    /// One segment of `content` per graph.
    pub segments: Rc<[Segment]>,
    /// Master row per graph, when the skip connection is active.
    pub masters: Option<Rc<[Option<usize>]>>,
}

impl ReadoutLayout {
    /// Every row of every graph enters attention; no skip connection.
    pub fn all_rows(sizes: &[usize]) -> Result<Self> {
        let mut content = Vec::new();
        let mut segments = Vec::with_capacity(sizes.len());
        let mut offset = 0;
        for &n in sizes {
            if n == 0 {
                return Err(Error::EmptyGraph);
            }
            segments.push(Segment {
                start: content.len(),
                len: n,
            });
            content.extend((offset..offset + n).map(Some));
            offset += n;
        }
        Ok(Self {
            content: content.into(),
            segments: segments.into(),
            masters: None,
        })
    }

    pub fn num_graphs(&self) -> usize {
        self.segments.len()
    }
}

/// Graphs stacked for one forward pass.
#[derive(Debug, Clone)]
pub struct GraphBatch {
    pub blocks: Rc<[Block]>,
    pub layout: ReadoutLayout,
    pub num_rows: usize,
    /// Row offset of each graph.
    pub offsets: Vec<usize>,
}

impl GraphBatch {
    /// With `master_skip`, master rows are excluded from attention and
    /// concatenated to its output instead; otherwise every row is attended.
    pub fn new(graphs: &[&PreparedGraph], master_skip: bool) -> Result<Self> {
        if graphs.is_empty() {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        let skip = master_skip && graphs.iter().all(|g| g.graph.master_index.is_some());
        let mut blocks = Vec::with_capacity(graphs.len());
        let mut offsets = Vec::with_capacity(graphs.len());
        let mut content = Vec::new();
        let mut segments = Vec::with_capacity(graphs.len());
        let mut masters = Vec::with_capacity(graphs.len());
        let mut offset = 0;
        for g in graphs {
            let n = g.num_nodes();
            let start = content.len();
            for k in 0..n {
                if skip && Some(k) == g.graph.master_index {
                    masters.push(Some(offset + k));
                } else {
                    content.push(Some(offset + k));
                }
            }
            if content.len() == start {
                return Err(Error::EmptyGraph);
            }
            segments.push(Segment {
                start,
                len: content.len() - start,
            });
            blocks.push(Block {
                offset,
                matrix: g.operator.clone(),
            });
            offsets.push(offset);
            offset += n;
        }
        Ok(Self {
            blocks: blocks.into(),
            layout: ReadoutLayout {
                content: content.into(),
                segments: segments.into(),
                masters: skip.then(|| masters.into()),
            },
            num_rows: offset,
            offsets,
        })
    }
}

/// `M = MLP(op · H)`, ReLU after every dense layer.
pub fn aggregate(
    tape: &mut Tape,
    binder: &mut Binder,
    h: Var,
    blocks: &Rc<[Block]>,
    mlp: &[Dense],
) -> Result<Var> {
    let mut x = tape.block_matmul(blocks.clone(), h)?;
    for layer in mlp {
        let z = layer.forward(tape, binder, x)?;
        x = tape.relu(z)?;
    }
    Ok(x)
}

pub fn build_mlp<R: Rng + ?Sized>(
    store: &mut ParamStore,
    name: &str,
    input_dim: usize,
    hidden: usize,
    layers: usize,
    rng: &mut R,
) -> Vec<Dense> {
    (0..layers)
        .map(|l| {
            let fan_in = if l == 0 { input_dim } else { hidden };
            Dense::new(store, &format!("{name}.{l}"), fan_in, hidden, rng)
        })
        .collect()
}

/// GRU update of node states from messages, row convention:
///
/// ```text
/// R  = sigmoid(M W_r + H U_r + b_r)
/// Z  = sigmoid(M W_z + H U_z + b_z)
/// H~ = tanh(M W_h + (R * H) U_h + b_h)
/// H' = (1 - Z) * H + Z * H~
/// ```
///
/// When the incoming state width differs from the hidden size, `H` is first
/// mapped through the linear `input_proj`.
#[derive(Debug, Clone, Copy)]
pub struct Gru {
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_h: ParamId,
    pub u_h: ParamId,
    pub b_h: ParamId,
    pub input_proj: Option<ParamId>,
}

impl Gru {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input_dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Self {
        let mut w = |suffix: &str, rows: usize, rng: &mut R| {
            store.add(
                format!("{name}.{suffix}"),
                Matrix::glorot(rows, hidden, rng),
                true,
            )
        };
        let w_r = w("w_r", hidden, rng);
        let u_r = w("u_r", hidden, rng);
        let w_z = w("w_z", hidden, rng);
        let u_z = w("u_z", hidden, rng);
        let w_h = w("w_h", hidden, rng);
        let u_h = w("u_h", hidden, rng);
        let input_proj = (input_dim != hidden).then(|| w("input_proj", input_dim, rng));
        let mut b =
            |suffix: &str| store.add(format!("{name}.{suffix}"), Matrix::zeros(1, hidden), true);
        Self {
            w_r,
            u_r,
            b_r: b("b_r"),
            w_z,
            u_z,
            b_z: b("b_z"),
            w_h,
            u_h,
            b_h: b("b_h"),
            input_proj,
        }
    }

    fn gate(
        tape: &mut Tape,
        binder: &mut Binder,
        m: Var,
        w: ParamId,
        h: Var,
        u: ParamId,
        b: ParamId,
    ) -> Result<Var> {
        let (w, u, b) = (
            binder.var(tape, w),
            binder.var(tape, u),
            binder.var(tape, b),
        );
        let mw = tape.matmul(m, w)?;
        let hu = tape.matmul(h, u)?;
        let s = tape.add(mw, hu)?;
        tape.add_row(s, b)
    }
}

pub fn gru_combine(tape: &mut Tape, binder: &mut Binder, h: Var, m: Var, gru: &Gru) -> Result<Var> {
    let h = match gru.input_proj {
        Some(p) => {
            let p = binder.var(tape, p);
            tape.matmul(h, p)?
        }
        None => h,
    };
    let r_pre = Gru::gate(tape, binder, m, gru.w_r, h, gru.u_r, gru.b_r)?;
    let r = tape.sigmoid(r_pre)?;
    let z_pre = Gru::gate(tape, binder, m, gru.w_z, h, gru.u_z, gru.b_z)?;
    let z = tape.sigmoid(z_pre)?;
    let rh = tape.mul(r, h)?;
    let c_pre = Gru::gate(tape, binder, m, gru.w_h, rh, gru.u_h, gru.b_h)?;
    let candidate = tape.tanh(c_pre)?;
    // (1 - Z) * H + Z * H~  ==  H + Z * (H~ - H)
    let delta = tape.sub(candidate, h)?;
    let step = tape.mul(z, delta)?;
    tape.add(h, step)
}

/// Self-attention pooling with a single context vector.
#[derive(Debug, Clone, Copy)]
pub struct Attention {
    pub dense: Dense,
    pub context: ParamId,
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            dense: Dense::new(store, &format!("{name}.dense"), dim, dim, rng),
            context: store.add(format!("{name}.context"), Matrix::glorot(dim, 1, rng), true),
        }
    }

    /// Returns the pooled vectors (one row per graph) and the attention
    /// weights (one row per attended node).
    pub fn pool(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        h: Var,
        layout: &ReadoutLayout,
    ) -> Result<(Var, Var)> {
        let content = tape.gather_rows(h, layout.content.clone())?;
        let pre = self.dense.forward(tape, binder, content)?;
        let y = tape.tanh(pre)?;
        let v = binder.var(tape, self.context);
        let scores = tape.matmul(y, v)?;
        let alpha = tape.segment_softmax(scores, layout.segments.clone())?;
        let pooled = tape.segment_weighted_sum(alpha, content, layout.segments.clone())?;
        Ok((pooled, alpha))
    }
}

/// Attention pooling, master skip connection, optional batch norm.
#[derive(Debug, Clone, Copy)]
pub struct Readout {
    pub attention: Attention,
    pub norm: Option<BatchNorm>,
}

pub struct ReadoutOutput {
    pub vector: Var,
    pub alpha: Var,
    pub update: Option<RunningUpdate>,
}

pub fn readout(
    tape: &mut Tape,
    binder: &mut Binder,
    h: Var,
    layout: &ReadoutLayout,
    readout: &Readout,
    mode: Mode,
) -> Result<ReadoutOutput> {
    let (u, alpha) = readout.attention.pool(tape, binder, h, layout)?;
    let joined = match &layout.masters {
        Some(masters) => {
            let m = tape.gather_rows(h, masters.clone())?;
            tape.concat_cols(&[u, m])?
        }
        None => u,
    };
    let (vector, update) = match &readout.norm {
        Some(bn) => bn.forward(tape, binder, joined, mode)?,
        None => (joined, None),
    };
    Ok(ReadoutOutput {
        vector,
        alpha,
        update,
    })
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::graph::{build_cooccurrence_graph, path_graph};

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(17)
    }

    #[test]
    fn zero_input_and_zero_bias_aggregate_to_zero() {
        let mut store = ParamStore::new();
        let mlp = build_mlp(&mut store, "mlp", 3, 4, 2, &mut rng());
        let g = PreparedGraph::new(
            build_cooccurrence_graph(&[0, 1, 2, 0], 2, true, true).unwrap(),
            true,
        );
        let batch = GraphBatch::new(&[&g], true).unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let h = tape.constant(Matrix::zeros(4, 3));
        let m = aggregate(&mut tape, &mut binder, h, &batch.blocks, &mlp).unwrap();
        assert_eq!(tape.value(m), &Matrix::zeros(4, 4));
    }

    #[test]
    fn isolated_node_receives_zero_message() {
        let mut store = ParamStore::new();
        let layer = Dense::new(&mut store, "id", 2, 2, &mut rng());
        *store.value_mut(layer.weight) = Matrix::identity(2);
        let g = PreparedGraph::new(path_graph(2).unwrap(), true);
        let batch = GraphBatch::new(&[&g], false).unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let h = tape.constant(Matrix::from_rows(&[[5.0, 7.0], [1.0, 1.0]]));
        let m = aggregate(&mut tape, &mut binder, h, &batch.blocks, &[layer]).unwrap();
        assert_eq!(tape.value(m).row(0), &[0.0, 0.0]);
        assert_eq!(tape.value(m).row(1), &[5.0, 7.0]);
    }

    #[test]
    fn identity_mlp_averages_in_neighbors() {
        // 0 -> 1 (w 1), 0 -> 2 (w 1), 1 -> 2 (w 3)
        let graph = DocumentGraph {
            node_ids: vec![0, 1, 2],
            adjacency: Matrix::from_rows(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [1.0, 3.0, 0.0]]),
            master_index: None,
            directed: true,
        };
        let g = PreparedGraph::new(graph, true);
        let mut store = ParamStore::new();
        let layer = Dense::new(&mut store, "id", 2, 2, &mut rng());
        *store.value_mut(layer.weight) = Matrix::identity(2);
        let batch = GraphBatch::new(&[&g], false).unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let h = tape.constant(Matrix::from_rows(&[[4.0, 8.0], [2.0, 0.0], [9.0, 9.0]]));
        let m = aggregate(&mut tape, &mut binder, h, &batch.blocks, &[layer]).unwrap();
        // hand evaluation of D^-1 A H
        let expected = Matrix::from_rows(&[
            [0.0, 0.0],
            [4.0, 8.0],
            [0.25 * 4.0 + 0.75 * 2.0, 0.25 * 8.0 + 0.75 * 0.0],
        ]);
        assert!(tape.value(m).max_abs_diff(&expected) < 1e-15);
    }

    fn gru_fixture(d: usize) -> (ParamStore, Gru) {
        let mut store = ParamStore::new();
        let gru = Gru::new(&mut store, "gru", d, d, &mut rng());
        (store, gru)
    }

    fn run_gru(store: &ParamStore, gru: &Gru, h: &Matrix, m: &Matrix) -> Matrix {
        let mut tape = Tape::new();
        let mut binder = Binder::new(store);
        let hv = tape.constant(h.clone());
        let mv = tape.constant(m.clone());
        let out = gru_combine(&mut tape, &mut binder, hv, mv, gru).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn gru_update_gate_open_gives_candidate() {
        let (mut store, gru) = gru_fixture(3);
        *store.value_mut(gru.b_z) = Matrix::filled(1, 3, 40.0);
        let mut r = rng();
        let h = Matrix::uniform(2, 3, 1.0, &mut r);
        let m = Matrix::uniform(2, 3, 1.0, &mut r);
        let out = run_gru(&store, &gru, &h, &m);
        // candidate computed directly with the reset gate
        let s = |x: f64| 1.0 / (1.0 + (-x).exp());
        let lin = |a: &Matrix, w: ParamId| a.matmul(store.value(w)).unwrap();
        let rg = lin(&m, gru.w_r).zip_map(&lin(&h, gru.u_r), |a, b| s(a + b));
        let cand = lin(&m, gru.w_h)
            .zip_map(&lin(&rg.zip_map(&h, |a, b| a * b), gru.u_h), |a, b| {
                (a + b).tanh()
            });
        assert!(out.max_abs_diff(&cand) < 1e-6);
    }

    #[test]
    fn gru_update_gate_closed_keeps_state() {
        let (mut store, gru) = gru_fixture(3);
        *store.value_mut(gru.b_z) = Matrix::filled(1, 3, -40.0);
        let mut r = rng();
        let h = Matrix::uniform(2, 3, 1.0, &mut r);
        let m = Matrix::uniform(2, 3, 1.0, &mut r);
        assert!(run_gru(&store, &gru, &h, &m).max_abs_diff(&h) < 1e-6);
    }

    #[test]
    fn input_projection_appears_only_when_widths_differ() {
        let mut store = ParamStore::new();
        let a = Gru::new(&mut store, "a", 5, 3, &mut rng());
        let b = Gru::new(&mut store, "b", 3, 3, &mut rng());
        assert_eq!(store.value(a.input_proj.unwrap()).shape(), (5, 3));
        assert!(b.input_proj.is_none());
    }

    fn readout_fixture(d: usize) -> (ParamStore, Readout) {
        let mut store = ParamStore::new();
        let attention = Attention::new(&mut store, "att", d, &mut rng());
        (
            store,
            Readout {
                attention,
                norm: None,
            },
        )
    }

    #[test]
    fn identical_rows_get_uniform_attention() {
        let (store, ro) = readout_fixture(2);
        let g = PreparedGraph::new(
            build_cooccurrence_graph(&[0, 1, 2, 3], 2, true, true).unwrap(),
            true,
        );
        let batch = GraphBatch::new(&[&g], true).unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let h = tape.constant(Matrix::from_rows(&[
            [0.3, -0.2],
            [0.3, -0.2],
            [0.3, -0.2],
            [0.3, -0.2],
            [9.0, 9.0],
        ]));
        let out = readout(&mut tape, &mut binder, h, &batch.layout, &ro, Mode::Eval).unwrap();
        for &a in tape.value(out.alpha).as_slice() {
            assert!((a - 0.25).abs() < 1e-15);
        }
        let v = tape.value(out.vector).row(0).to_vec();
        assert!((v[0] - 0.3).abs() < 1e-15 && (v[1] + 0.2).abs() < 1e-15);
        assert_eq!(&v[2..], &[9.0, 9.0]);
    }

    #[test]
    fn single_content_row_is_returned_verbatim() {
        let (store, ro) = readout_fixture(2);
        let g = PreparedGraph::new(build_cooccurrence_graph(&[4], 2, true, true).unwrap(), true);
        let batch = GraphBatch::new(&[&g], true).unwrap();
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let h = tape.constant(Matrix::from_rows(&[[1.5, 2.5], [0.0, -1.0]]));
        let out = readout(&mut tape, &mut binder, h, &batch.layout, &ro, Mode::Eval).unwrap();
        assert_eq!(tape.value(out.alpha).as_slice(), &[1.0]);
        assert_eq!(tape.value(out.vector).row(0), &[1.5, 2.5, 0.0, -1.0]);
    }

    #[test]
    fn hand_computed_attention() {
        let (mut store, ro) = readout_fixture(2);
        *store.value_mut(ro.attention.dense.weight) = Matrix::identity(2);
        *store.value_mut(ro.attention.context) = Matrix::column_vector(&[1.0, 0.0]);
        let g = PreparedGraph::new(
            build_cooccurrence_graph(&[0, 1, 2], 2, true, true).unwrap(),
            true,
        );
        let batch = GraphBatch::new(&[&g], true).unwrap();
        let rows = [[0.5, 1.0], [-1.0, 2.0], [2.0, 0.0]];
        let mut tape = Tape::new();
        let mut binder = Binder::new(&store);
        let h = tape.constant(Matrix::from_rows(&[rows[0], rows[1], rows[2], [7.0, 8.0]]));
        let out = readout(&mut tape, &mut binder, h, &batch.layout, &ro, Mode::Eval).unwrap();

        let scores: Vec<f64> = rows.iter().map(|r| r[0].tanh()).collect();
        let z: f64 = scores.iter().map(|s| s.exp()).sum();
        let alpha: Vec<f64> = scores.iter().map(|s| s.exp() / z).collect();
        let u0: f64 = alpha.iter().zip(&rows).map(|(a, r)| a * r[0]).sum();
        let u1: f64 = alpha.iter().zip(&rows).map(|(a, r)| a * r[1]).sum();
        let got_alpha = tape.value(out.alpha).as_slice();
        for (g, e) in got_alpha.iter().zip(&alpha) {
            assert!((g - e).abs() < 1e-15);
        }
        let v = tape.value(out.vector).row(0);
        assert!((v[0] - u0).abs() < 1e-14 && (v[1] - u1).abs() < 1e-14);
        assert_eq!(&v[2..], &[7.0, 8.0]);
    }

    #[test]
    fn master_only_graph_is_empty() {
        let graph = DocumentGraph {
            node_ids: vec![crate::graph::MASTER_ID],
            adjacency: Matrix::zeros(1, 1),
            master_index: Some(0),
            directed: true,
        };
        let g = PreparedGraph::new(graph, true);
        assert!(matches!(
            GraphBatch::new(&[&g], true),
            Err(Error::EmptyGraph)
        ));
    }

    #[test]
    fn batch_without_skip_attends_all_rows() {
        let g = PreparedGraph::new(
            build_cooccurrence_graph(&[0, 1], 2, true, true).unwrap(),
            true,
        );
        let h = PreparedGraph::new(
            build_cooccurrence_graph(&[3, 4, 5], 2, true, true).unwrap(),
            true,
        );
        let with = GraphBatch::new(&[&g, &h], true).unwrap();
        assert_eq!(with.layout.content.len(), 5);
        assert_eq!(
            with.layout.masters.as_deref(),
            Some(&[Some(2), Some(6)][..])
        );
        let without = GraphBatch::new(&[&g, &h], false).unwrap();
        assert_eq!(without.layout.content.len(), 7);
        assert!(without.layout.masters.is_none());
        assert_eq!(without.offsets, [0, 3]);
    }
}
