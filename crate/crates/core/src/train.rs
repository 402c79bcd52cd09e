//! Mini-batch training with validation-based epoch selection, evaluation
//! metrics, and k-fold cross-validation.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{argmax, Mpad, PreparedDocument};
use crate::numcore::{AdamConfig, AdamState, Mode, ParamStore};

pub const MIN_SPLIT_DOCUMENTS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub val_fraction: f64,
    pub stratified: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            batch_size: 64,
            learning_rate: 1e-3,
            val_fraction: 0.1,
            stratified: false,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "epochs and batch_size must be positive".into(),
            ));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::InvalidArgument(format!(
                "validation fraction must lie in [0, 1), got {}",
                self.val_fraction
            )));
        }
        Ok(())
    }
}

/// Index sets of a train/validation split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
}

/// Number of held-out documents: `fraction * n`, rounded half away from zero.
pub fn validation_size(n: usize, fraction: f64) -> usize {
    (fraction * n as f64).round() as usize
}

/// Randomly holds out `round(fraction * N)` documents. With `stratified`,
/// each class contributes its own rounded share instead.
pub fn split_validation(
    labels: &[usize],
    fraction: f64,
    seed: u64,
    stratified: bool,
) -> Result<Split> {
    let n = labels.len();
    if n < MIN_SPLIT_DOCUMENTS {
        return Err(Error::InvalidArgument(format!(
            "need at least {MIN_SPLIT_DOCUMENTS} documents to split, got {n}"
        )));
    }
    if !(0.0..1.0).contains(&fraction) {
        return Err(Error::InvalidArgument(format!(
            "validation fraction must lie in [0, 1), got {fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut validation = Vec::new();
    let mut train = Vec::new();
    if stratified {
        let classes = labels.iter().copied().max().map_or(0, |m| m + 1);
        for c in 0..classes {
            let mut members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
            members.shuffle(&mut rng);
            let k = validation_size(members.len(), fraction);
            validation.extend_from_slice(&members[..k]);
            train.extend_from_slice(&members[k..]);
        }
    } else {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        let k = validation_size(n, fraction);
        validation.extend_from_slice(&order[..k]);
        train.extend_from_slice(&order[k..]);
    }
    train.sort_unstable();
    validation.sort_unstable();
    Ok(Split { train, validation })
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainRun {
    pub config: TrainConfig,
    pub history: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_params: ParamStore,
}

impl TrainRun {
    pub fn best(&self) -> &EpochRecord {
        &self.history[self.best_epoch - 1]
    }
}

/// 1-based index of the best epoch: highest validation accuracy (train
/// accuracy when there is no validation set), earliest on ties.
pub fn select_best_epoch(history: &[EpochRecord]) -> Option<usize> {
    let score = |r: &EpochRecord| r.val_acc.unwrap_or(r.train_acc);
    let mut best: Option<&EpochRecord> = None;
    for r in history {
        if best.is_none_or(|b| score(r) > score(b)) {
            best = Some(r);
        }
    }
    best.map(|r| r.epoch)
}

fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

fn numerical(e: Error, epoch: usize, batch: usize) -> Error {
    if e.is_numerical() {
        Error::Diverged { epoch, batch }
    } else {
        e
    }
}

/// Splits off a validation set and trains on the remainder.
pub fn train(
    model: &mut Mpad,
    docs: &[PreparedDocument],
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainRun> {
    let labels: Vec<usize> = docs.iter().map(|d| d.label).collect();
    let split = split_validation(&labels, config.val_fraction, config.seed, config.stratified)?;
    let pick = |idx: &[usize]| idx.iter().map(|&i| docs[i].clone()).collect::<Vec<_>>();
    train_with_validation(
        model,
        &pick(&split.train),
        &pick(&split.validation),
        config,
        on_epoch,
    )
}

/// Trains for `config.epochs` epochs and leaves the best epoch's parameters
/// in `model`.
pub fn train_with_validation(
    model: &mut Mpad,
    train: &[PreparedDocument],
    validation: &[PreparedDocument],
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainRun> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let classes = model.config.num_classes;
    if classes < 2 {
        return Err(Error::InvalidArgument(
            "training needs at least 2 classes".into(),
        ));
    }
    if let Some(d) = train.iter().chain(validation).find(|d| d.label >= classes) {
        return Err(Error::InvalidArgument(format!(
            "label {} outside {classes} classes",
            d.label
        )));
    }
    let adam_config = AdamConfig {
        lr: config.learning_rate,
        ..AdamConfig::default()
    };
    let mut adam = AdamState::for_store(adam_config, &model.params);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(1));
    let mut history = Vec::with_capacity(config.epochs);
    let mut best_params = model.params.clone();
    let mut best_score = f64::NEG_INFINITY;
    let mut best_epoch = 0;

    for epoch in 1..=config.epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed(
            config.seed,
            epoch,
        )));
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch = b + 1;
            let docs: Vec<&PreparedDocument> = chunk.iter().map(|&i| &train[i]).collect();
            let labels: Vec<usize> = docs.iter().map(|d| d.label).collect();
            let (loss, grads, updates) = {
                let mut pass = model
                    .forward(&docs, Mode::Train, &mut dropout_rng)
                    .map_err(|e| numerical(e, epoch, batch))?;
                let loss = pass
                    .tape
                    .cross_entropy(pass.logits, &labels)
                    .map_err(|e| numerical(e, epoch, batch))?;
                let value = pass.tape.value(loss)[(0, 0)];
                if !value.is_finite() {
                    return Err(Error::Diverged { epoch, batch });
                }
                let grads = pass
                    .tape
                    .backward(loss)
                    .map_err(|e| numerical(e, epoch, batch))?;
                (value, pass.binder.collect(&grads), pass.trace.updates)
            };
            adam.step_store(&mut model.params, &grads)?;
            for u in &updates {
                u.apply(&mut model.params);
            }
            loss_sum += loss * chunk.len() as f64;
        }
        let train_acc = evaluate(model, train, config.batch_size)?.accuracy;
        let val_acc = if validation.is_empty() {
            None
        } else {
            Some(evaluate(model, validation, config.batch_size)?.accuracy)
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train.len() as f64,
            train_acc,
            val_acc,
            seconds: started.elapsed().as_secs_f64(),
        };
        let score = val_acc.unwrap_or(train_acc);
        if score > best_score {
            best_score = score;
            best_epoch = epoch;
            best_params = model.params.clone();
        }
        log::info!(
            "epoch {epoch}: loss {:.4} train {:.4} val {}",
            record.train_loss,
            train_acc,
            val_acc.map_or("-".into(), |v| format!("{v:.4}"))
        );
        on_epoch(&record);
        history.push(record);
    }
    model.params.copy_values_from(&best_params)?;
    Ok(TrainRun {
        config: config.clone(),
        history,
        best_epoch,
        best_params,
    })
}

/// Mean cross-entropy of a fresh train-mode pass, without updating anything.
pub fn initial_loss(model: &Mpad, docs: &[PreparedDocument], seed: u64) -> Result<f64> {
    let refs: Vec<&PreparedDocument> = docs.iter().collect();
    let labels: Vec<usize> = docs.iter().map(|d| d.label).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pass = model.forward(&refs, Mode::Train, &mut rng)?;
    let loss = pass.tape.cross_entropy(pass.logits, &labels)?;
    Ok(pass.tape.value(loss)[(0, 0)])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// `None` for classes that were never predicted.
    pub precision: Vec<Option<f64>>,
    /// `None` for classes absent from the gold labels.
    pub recall: Vec<Option<f64>>,
    /// `confusion[gold][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

impl Metrics {
    pub fn from_predictions(gold: &[usize], predicted: &[usize], classes: usize) -> Result<Self> {
        if gold.len() != predicted.len() {
            return Err(Error::InvalidArgument(format!(
                "{} labels but {} predictions",
                gold.len(),
                predicted.len()
            )));
        }
        if gold.is_empty() {
            return Err(Error::EmptyCorpus);
        }
        let mut confusion = vec![vec![0usize; classes]; classes];
        for (&g, &p) in gold.iter().zip(predicted) {
            if g >= classes || p >= classes {
                return Err(Error::InvalidArgument(format!(
                    "class index outside {classes} classes"
                )));
            }
            confusion[g][p] += 1;
        }
        let correct: usize = (0..classes).map(|c| confusion[c][c]).sum();
        let ratio = |num: usize, den: usize| (den > 0).then(|| num as f64 / den as f64);
        let precision = (0..classes)
            .map(|c| ratio(confusion[c][c], (0..classes).map(|g| confusion[g][c]).sum()))
            .collect();
        let recall = (0..classes)
            .map(|c| ratio(confusion[c][c], confusion[c].iter().sum()))
            .collect();
        Ok(Self {
            accuracy: correct as f64 / gold.len() as f64,
            precision,
            recall,
            confusion,
        })
    }

    pub fn from_logits(gold: &[usize], logits: &[Vec<f64>], classes: usize) -> Result<Self> {
        let predicted: Vec<usize> = logits.iter().map(|row| argmax(row)).collect();
        Self::from_predictions(gold, &predicted, classes)
    }
}

/// Eval-mode accuracy, per-class precision/recall and confusion matrix.
pub fn evaluate(model: &Mpad, docs: &[PreparedDocument], batch_size: usize) -> Result<Metrics> {
    let probs = model.predict_proba(docs, batch_size)?;
    let gold: Vec<usize> = docs.iter().map(|d| d.label).collect();
    Metrics::from_logits(&gold, &probs, model.config.num_classes)
}

/// Deterministic partition of `0..n` into `folds` test sets.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if folds < 2 {
        return Err(Error::InvalidArgument(format!(
            "need at least 2 folds, got {folds}"
        )));
    }
    if folds > n {
        return Err(Error::InvalidArgument(format!(
            "{folds} folds requested for {n} documents"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut out = vec![Vec::new(); folds];
    for (pos, i) in order.into_iter().enumerate() {
        out[pos % folds].push(i);
    }
    for f in &mut out {
        f.sort_unstable();
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossValidation {
    pub fold_accuracies: Vec<f64>,
    pub mean: f64,
    /// Sample standard deviation across folds.
    pub std: f64,
}

impl CrossValidation {
    pub fn from_accuracies(fold_accuracies: Vec<f64>) -> Self {
        let k = fold_accuracies.len() as f64;
        let mean = fold_accuracies.iter().sum::<f64>() / k;
        let var = if fold_accuracies.len() > 1 {
            fold_accuracies
                .iter()
                .map(|a| (a - mean).powi(2))
                .sum::<f64>()
                / (k - 1.0)
        } else {
            0.0
        };
        Self {
            fold_accuracies,
            mean,
            std: var.sqrt(),
        }
    }
}

/// k-fold cross-validation. `make_model` builds a fresh model per fold; each
/// fold's training part is split again for validation.
pub fn cross_validate(
    docs: &[PreparedDocument],
    folds: usize,
    config: &TrainConfig,
    mut make_model: impl FnMut(usize) -> Result<Mpad>,
) -> Result<CrossValidation> {
    let assignment = fold_assignment(docs.len(), folds, config.seed)?;
    let mut accuracies = Vec::with_capacity(folds);
    for (f, test_idx) in assignment.iter().enumerate() {
        let mut in_test = vec![false; docs.len()];
        for &i in test_idx {
            in_test[i] = true;
        }
        let train_docs: Vec<PreparedDocument> = (0..docs.len())
            .filter(|&i| !in_test[i])
            .map(|i| docs[i].clone())
            .collect();
        let test_docs: Vec<PreparedDocument> = test_idx.iter().map(|&i| docs[i].clone()).collect();
        let mut model = make_model(f)?;
        let fold_config = TrainConfig {
            seed: config.seed.wrapping_add(f as u64),
            ..config.clone()
        };
        train(&mut model, &train_docs, &fold_config, |_| {})?;
        let acc = evaluate(&model, &test_docs, config.batch_size)?.accuracy;
        log::info!("fold {}: accuracy {acc:.4}", f + 1);
        accuracies.push(acc);
    }
    Ok(CrossValidation::from_accuracies(accuracies))
}
