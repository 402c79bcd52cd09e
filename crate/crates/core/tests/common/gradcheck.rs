//! Central finite differences against the tape's analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use mpad::corpus::EncodedDocument;
use mpad::graph::{build_cooccurrence_graph, clique_graph, path_graph};
use mpad::model::{
    aggregate, build_mlp, gru_combine, readout, Attention, Encoder, EncoderShape, GraphBatch, Gru,
    Mpad, MpadConfig, PreparedDocument, PreparedGraph, Readout, Trace, Variant,
};
use mpad::numcore::{BatchNorm, Binder, Matrix, Mode, ParamStore, Tape, Var};
use mpad::Result;

pub const STEP: f64 = 1e-5;
/// Fallback step for coordinates with a ReLU kink inside `[-STEP, STEP]`.
pub const KINK_STEP: f64 = 1e-7;

/// Central difference at `STEP`, or at `KINK_STEP` when the two one-sided
/// slopes disagree (the function is not smooth across the stencil).
fn central(at: impl Fn(f64) -> f64) -> f64 {
    let (up, mid, down) = (at(STEP), at(0.0), at(-STEP));
    let (forward, backward) = ((up - mid) / STEP, (mid - down) / STEP);
    if (forward - backward).abs() > 1e-4 * (forward.abs() + backward.abs()) + 1e-6 {
        (at(KINK_STEP) - at(-KINK_STEP)) / (2.0 * KINK_STEP)
    } else {
        (up - down) / (2.0 * STEP)
    }
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale < 1e-300 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// Worst relative error over every trainable parameter and the input of a
/// scalar function `loss(tape, binder, input)`.
pub fn check_function<F>(store: &mut ParamStore, input: &Matrix, loss: F) -> f64
where
    F: Fn(&mut Tape, &mut Binder, Var) -> Result<Var>,
{
    let eval = |store: &ParamStore, input: &Matrix| -> f64 {
        let mut tape = Tape::new();
        let mut binder = Binder::new(store);
        let x = tape.leaf(input.clone(), true);
        let l = loss(&mut tape, &mut binder, x).unwrap();
        tape.value(l)[(0, 0)]
    };
    let (param_grads, input_grad) = {
        let mut tape = Tape::new();
        let mut binder = Binder::new(store);
        let x = tape.leaf(input.clone(), true);
        let l = loss(&mut tape, &mut binder, x).unwrap();
        let grads = tape.backward(l).unwrap();
        let input_grad = grads
            .get(x)
            .cloned()
            .unwrap_or_else(|| Matrix::zeros(input.rows(), input.cols()));
        (binder.collect(&grads), input_grad)
    };

    let mut worst: f64 = 0.0;
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if !store.get(id).trainable {
            continue;
        }
        let analytic = param_grads.get(id).as_slice().to_vec();
        let mut numeric = vec![0.0; analytic.len()];
        for (k, slot) in numeric.iter_mut().enumerate() {
            let original = store.value(id).as_slice()[k];
            let cell = std::cell::RefCell::new(&mut *store);
            *slot = central(|dx| {
                let mut s = cell.borrow_mut();
                s.value_mut(id).as_mut_slice()[k] = original + dx;
                eval(&s, input)
            });
            store.value_mut(id).as_mut_slice()[k] = original;
        }
        let err = relative_error(&analytic, &numeric);
        assert!(err.is_finite(), "{}: non-finite error", store.get(id).name);
        worst = worst.max(err);
    }

    let mut numeric = vec![0.0; input.len()];
    for (k, slot) in numeric.iter_mut().enumerate() {
        *slot = central(|dx| {
            let mut shifted = input.clone();
            shifted.as_mut_slice()[k] += dx;
            eval(store, &shifted)
        });
    }
    worst.max(relative_error(input_grad.as_slice(), &numeric))
}

/// Reduces `out` to a scalar through a fixed random projection so every
/// output entry gets a distinct weight.
pub fn project(tape: &mut Tape, out: Var, weights: &Matrix) -> Result<Var> {
    let w = tape.constant(weights.clone());
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

/// Relative error of the whole gradient (every trainable parameter of
/// `model`, flattened) of the mean cross-entropy on `docs`. Dropout masks
/// are replayed from `seed`.
pub fn check_model(model: &mut Mpad, docs: &[PreparedDocument], mode: Mode, seed: u64) -> f64 {
    let refs: Vec<&PreparedDocument> = docs.iter().collect();
    let labels: Vec<usize> = docs.iter().map(|d| d.label).collect();
    let eval = |model: &Mpad| -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pass = model.forward(&refs, mode, &mut rng).unwrap();
        let l = pass.tape.cross_entropy(pass.logits, &labels).unwrap();
        pass.tape.value(l)[(0, 0)]
    };
    let grads = {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pass = model.forward(&refs, mode, &mut rng).unwrap();
        let l = pass.tape.cross_entropy(pass.logits, &labels).unwrap();
        let g = pass.tape.backward(l).unwrap();
        pass.binder.collect(&g)
    };
    let mut analytic = Vec::new();
    let mut numeric = Vec::new();
    let ids: Vec<_> = model.params.ids().collect();
    for id in ids {
        if !model.params.get(id).trainable {
            continue;
        }
        analytic.extend_from_slice(grads.get(id).as_slice());
        for k in 0..model.params.value(id).len() {
            let original = model.params.value(id).as_slice()[k];
            let cell = std::cell::RefCell::new(&mut *model);
            numeric.push(central(|dx| {
                let mut m = cell.borrow_mut();
                m.params.value_mut(id).as_mut_slice()[k] = original + dx;
                eval(&m)
            }));
            model.params.value_mut(id).as_mut_slice()[k] = original;
        }
    }
    relative_error(&analytic, &numeric)
}

/// A co-occurrence graph with exactly five word nodes (six with master).
pub fn five_node_graph(rng: &mut ChaCha8Rng, master: bool) -> PreparedGraph {
    loop {
        let len = rng.gen_range(5..10);
        let tokens: Vec<usize> = (0..len).map(|_| rng.gen_range(0..5)).collect();
        let g = build_cooccurrence_graph(&tokens, 2, true, master).unwrap();
        if g.content_nodes().len() == 5 {
            return PreparedGraph::new(g, true);
        }
    }
}

fn shift_all(store: &mut ParamStore, by: f64) {
    for id in store.ids().collect::<Vec<_>>() {
        let v = store.value_mut(id);
        *v = v.map(|x| x + by);
    }
}

pub fn mlp_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graph = five_node_graph(&mut rng, true);
    let batch = GraphBatch::new(&[&graph], true).unwrap();
    let mut store = ParamStore::new();
    let mlp = build_mlp(&mut store, "mlp", 4, 3, 2, &mut rng);
    shift_all(&mut store, 0.1);
    let h = Matrix::uniform(6, 4, 1.0, &mut rng);
    let proj = Matrix::uniform(6, 3, 1.0, &mut rng);
    check_function(&mut store, &h, |tape, binder, x| {
        let m = aggregate(tape, binder, x, &batch.blocks, &mlp)?;
        project(tape, m, &proj)
    })
}

/// Worst error over both GRU inputs, with and without the input projection.
pub fn gru_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for input_dim in [3, 4] {
        let mut store = ParamStore::new();
        let gru = Gru::new(&mut store, "gru", input_dim, 3, &mut rng);
        let m = Matrix::uniform(5, 3, 1.0, &mut rng);
        let h = Matrix::uniform(5, input_dim, 1.0, &mut rng);
        let proj = Matrix::uniform(5, 3, 1.0, &mut rng);
        worst = worst.max(check_function(&mut store, &h, |tape, binder, x| {
            let m = tape.constant(m.clone());
            let out = gru_combine(tape, binder, x, m, &gru)?;
            project(tape, out, &proj)
        }));
        worst = worst.max(check_function(&mut store, &m, |tape, binder, x| {
            let h = tape.constant(h.clone());
            let out = gru_combine(tape, binder, h, x, &gru)?;
            project(tape, out, &proj)
        }));
    }
    worst
}

pub fn attention_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let graphs = [
        five_node_graph(&mut rng, true),
        five_node_graph(&mut rng, true),
    ];
    let batch = GraphBatch::new(&[&graphs[0], &graphs[1]], true).unwrap();
    let mut store = ParamStore::new();
    let ro = Readout {
        attention: Attention::new(&mut store, "att", 3, &mut rng),
        norm: None,
    };
    let h = Matrix::uniform(batch.num_rows, 3, 1.0, &mut rng);
    let proj = Matrix::uniform(2, 6, 1.0, &mut rng);
    check_function(&mut store, &h, |tape, binder, x| {
        let out = readout(tape, binder, x, &batch.layout, &ro, Mode::Train)?;
        project(tape, out.vector, &proj)
    })
}

/// Worst error over train (batch statistics) and eval (running statistics).
pub fn batch_norm_error(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let bn = BatchNorm::new(&mut store, "bn", 4);
    for id in store.ids().collect::<Vec<_>>() {
        if store.get(id).trainable {
            *store.value_mut(id) = Matrix::uniform(1, 4, 1.0, &mut rng);
        }
    }
    let x = Matrix::uniform(6, 4, 1.0, &mut rng);
    let proj = Matrix::uniform(6, 4, 1.0, &mut rng);
    [Mode::Train, Mode::Eval]
        .into_iter()
        .map(|mode| {
            check_function(&mut store, &x, |tape, binder, x| {
                let (y, _) = bn.forward(tape, binder, x, mode)?;
                project(tape, y, &proj)
            })
        })
        .fold(0.0, f64::max)
}

/// Moves every trainable parameter off its initial value so that no ReLU
/// input sits exactly at zero (zero biases on zero rows otherwise do).
pub fn jitter(model: &mut Mpad, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA5A5);
    for id in model.params.ids().collect::<Vec<_>>() {
        if model.params.get(id).trainable {
            for x in model.params.value_mut(id).as_mut_slice() {
                *x += rng.gen_range(-0.1..0.1);
            }
        }
    }
}

/// d = 4, d0 = 3, three classes, six-word vocabulary, trainable embeddings.
pub fn tiny_model(base: MpadConfig, seed: u64) -> Mpad {
    let config = MpadConfig {
        hidden_dim: 4,
        embedding_dim: 3,
        num_classes: 3,
        train_embeddings: true,
        ..base
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    let mut model = Mpad::new(config, Matrix::uniform(6, 3, 0.5, &mut rng), seed).unwrap();
    jitter(&mut model, seed);
    model
}

pub fn random_doc(rng: &mut ChaCha8Rng, label: usize, sentences: usize) -> EncodedDocument {
    let sentences: Vec<Vec<usize>> = (0..sentences)
        .map(|_| {
            (0..rng.gen_range(3..7))
                .map(|_| rng.gen_range(1..6))
                .collect()
        })
        .collect();
    EncodedDocument {
        label,
        tokens: sentences.concat(),
        sentences,
    }
}

/// Full flat model: eval mode on one 5-node document, then train mode on
/// that document plus three more (batch statistics need more than two rows
/// to carry gradient). Returns `(eval, train)` errors.
pub fn flat_model_error(seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = tiny_model(MpadConfig::default(), seed);
    let graph = five_node_graph(&mut rng, true);
    let doc = EncodedDocument {
        label: 1,
        tokens: graph.graph.node_ids[..5].to_vec(),
        sentences: vec![],
    };
    let single = vec![model.prepare(&doc).unwrap()];
    assert_eq!(single[0].graphs[0].num_nodes(), 6);
    let eval = check_model(&mut model, &single, Mode::Eval, seed);
    let mut batch = single;
    for i in 0..3 {
        batch.push(model.prepare(&random_doc(&mut rng, i, 1)).unwrap());
    }
    (eval, check_model(&mut model, &batch, Mode::Train, seed))
}

/// Whole hierarchical model on four documents of one to three sentences,
/// worst of eval and train mode.
pub fn hierarchical_model_error(variant: Variant, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = tiny_model(
        MpadConfig {
            variant,
            ..MpadConfig::default()
        },
        seed,
    );
    let docs: Vec<_> = (0..4)
        .map(|i| {
            model
                .prepare(&random_doc(&mut rng, i % 3, 1 + i % 3))
                .unwrap()
        })
        .collect();
    [Mode::Eval, Mode::Train]
        .into_iter()
        .map(|mode| check_model(&mut model, &docs, mode, seed))
        .fold(0.0, f64::max)
}

/// A sentence-level encoder on its own, over a batch of clique or path
/// graphs of sizes 1, 3 and 5.
pub fn sentence_level_error(variant: Variant, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let build = match variant {
        Variant::Clique => clique_graph,
        Variant::Path => path_graph,
        other => panic!("{other} has no sentence graph"),
    };
    let graphs: Vec<PreparedGraph> = [1, 3, 5]
        .into_iter()
        .map(|k| PreparedGraph::new(build(k).unwrap(), true))
        .collect();
    let refs: Vec<&PreparedGraph> = graphs.iter().collect();
    let batch = GraphBatch::new(&refs, false).unwrap();
    let config = MpadConfig::default();
    let shape = EncoderShape {
        input_dim: 4,
        hidden: 4,
        iterations: config.level2_iterations,
        mlp_layers: config.mlp_layers,
        gru: true,
        multi_readout: config.level2_multi_readout,
        master_skip: false,
        norm: config.batch_norm,
    };
    let mut store = ParamStore::new();
    let encoder = Encoder::new(&mut store, "level2", shape, &mut rng);
    for id in store.ids().collect::<Vec<_>>() {
        if store.get(id).trainable {
            for x in store.value_mut(id).as_mut_slice() {
                *x += rng.gen_range(-0.1..0.1);
            }
        }
    }
    let h = Matrix::uniform(batch.num_rows, 4, 1.0, &mut rng);
    let proj = Matrix::uniform(3, shape.output_len(), 1.0, &mut rng);
    check_function(&mut store, &h, |tape, binder, x| {
        let mut trace = Trace::default();
        let out = encoder.forward(tape, binder, x, &batch, Mode::Train, &mut trace)?;
        project(tape, out, &proj)
    })
}
