//! Optimization and evaluation: Adam with two learning-rate groups, the
//! epoch/batch loop shared by all wirings, early stopping on validation
//! balanced error, and the two reported metrics.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::{make_split, DocumentGraph, Split, TfidfVectorizer};
use crate::error::GcError;
use crate::fusion::{ArchitectureSpec, Banks, FusionModel, PreparedCorpus, Wiring};
use crate::gnn::GraphInputs;
use crate::lm::{tokenize, MiniLmConfig, Vocabulary};
use crate::nn::{Linear, ParamGroup, ParamStore};
use crate::tensor::ParamId;
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    /// Learning rate for the text encoder's parameters.
    pub lr_lm: f64,
    /// Learning rate for everything else (GNN, classifier head).
    pub lr_other: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr_lm: 1e-4, lr_other: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Adam with bias correction. Frozen parameters are skipped entirely: no
/// value update and no moment update, so they stay bit-identical.
pub struct Adam {
    pub config: AdamConfig,
    m: HashMap<ParamId, Vec<f64>>,
    v: HashMap<ParamId, Vec<f64>>,
    pub t: u64,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, m: HashMap::new(), v: HashMap::new(), t: 0 }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &HashMap<ParamId, Vec<f64>>) {
        self.t += 1;
        let t = self.t as i32;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(t);
        let bc2 = 1.0 - c.beta2.powi(t);
        let mut ids: Vec<ParamId> = grads.keys().copied().collect();
        ids.sort_unstable();
        for id in ids {
            let g = &grads[&id];
            let p = store.param(id);
            if p.frozen {
                continue;
            }
            let lr = if p.group == ParamGroup::Lm { c.lr_lm } else { c.lr_other };
            let m = self.m.entry(id).or_insert_with(|| vec![0.0; g.len()]);
            let v = self.v.entry(id).or_insert_with(|| vec![0.0; g.len()]);
            let value = &mut store.value_mut(id).data;
            for i in 0..g.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                value[i] -= lr * m_hat / (v_hat.sqrt() + c.eps);
            }
        }
    }
}

fn check_metric_inputs(
    predictions: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<(), GcError> {
    if predictions.len() != labels.len() {
        return Err(GcError::Contract(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if let Some(&bad) = predictions.iter().chain(labels).find(|&&c| c >= num_classes) {
        return Err(GcError::Contract(format!("class {bad} outside [0, {num_classes})")));
    }
    Ok(())
}

/// 100 minus the mean of per-class recalls, in percent. Every class must
/// appear in `labels`, otherwise its recall is undefined.
pub fn balanced_error(
    predictions: &[usize],
    labels: &[usize],
    num_classes: usize,
) -> Result<f64, GcError> {
    check_metric_inputs(predictions, labels, num_classes)?;
    let mut support = vec![0usize; num_classes];
    let mut correct = vec![0usize; num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        support[y] += 1;
        if p == y {
            correct[y] += 1;
        }
    }
    let mut recall_sum = 0.0;
    for c in 0..num_classes {
        if support[c] == 0 {
            return Err(GcError::Contract(format!("class {c} absent from labels")));
        }
        recall_sum += correct[c] as f64 / support[c] as f64;
    }
    Ok(100.0 - 100.0 * recall_sum / num_classes as f64)
}

/// Per-class F1 averaged with equal class weight, in percent. A class with
/// no predicted and no true positives contributes F1 = 0.
pub fn macro_f1(predictions: &[usize], labels: &[usize], num_classes: usize) -> Result<f64, GcError> {
    check_metric_inputs(predictions, labels, num_classes)?;
    let mut tp = vec![0usize; num_classes];
    let mut fp = vec![0usize; num_classes];
    let mut fn_ = vec![0usize; num_classes];
    for (&p, &y) in predictions.iter().zip(labels) {
        if p == y {
            tp[y] += 1;
        } else {
            fp[p] += 1;
            fn_[y] += 1;
        }
    }
    let mut f1_sum = 0.0;
    for c in 0..num_classes {
        let denom = 2 * tp[c] + fp[c] + fn_[c];
        if denom > 0 {
            f1_sum += 2.0 * tp[c] as f64 / denom as f64;
        }
    }
    Ok(100.0 * f1_sum / num_classes as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 32,
            max_epochs: 100,
            patience: 10,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunResult {
    pub variant: String,
    pub seed: u64,
    pub balanced_error: f64,
    pub macro_f1: f64,
    pub best_epoch: usize,
    pub trace: Vec<EpochStats>,
}

pub struct TrainedModel {
    pub result: RunResult,
    pub store: ParamStore,
    pub model: FusionModel,
    pub banks: Banks,
}

pub fn predict(
    model: &FusionModel,
    store: &ParamStore,
    corpus: &PreparedCorpus,
    banks: &Banks,
    indices: &[usize],
    batch_size: usize,
) -> Result<Vec<usize>, GcError> {
    let mut preds = Vec::with_capacity(indices.len());
    // dropout is off outside training, so this rng is never consumed
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for chunk in indices.chunks(batch_size) {
        let mut tape = Tape::new();
        let out = model.forward_batch(&mut tape, store, corpus, banks, chunk, false, &mut rng)?;
        let logits = tape.value(out.logits);
        for r in 0..logits.rows() {
            let row = logits.row(r);
            let best = (0..row.len())
                .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
                .unwrap();
            preds.push(best);
        }
    }
    Ok(preds)
}

/// Balanced error and macro F1 on the given documents, without bank writes.
pub fn evaluate(
    model: &FusionModel,
    store: &ParamStore,
    corpus: &PreparedCorpus,
    banks: &Banks,
    indices: &[usize],
    batch_size: usize,
) -> Result<(f64, f64), GcError> {
    let preds = predict(model, store, corpus, banks, indices, batch_size)?;
    let labels: Vec<usize> = indices.iter().map(|&i| corpus.labels[i]).collect();
    Ok((
        balanced_error(&preds, &labels, corpus.num_classes)?,
        macro_f1(&preds, &labels, corpus.num_classes)?,
    ))
}

fn train_epoch(
    model: &FusionModel,
    store: &mut ParamStore,
    corpus: &PreparedCorpus,
    banks: &mut Banks,
    adam: &mut Adam,
    order: &[usize],
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<f64, GcError> {
    let mut loss_sum = 0.0;
    for chunk in order.chunks(batch_size) {
        let mut tape = Tape::new();
        let out = model.forward_batch(&mut tape, store, corpus, banks, chunk, true, rng)?;
        let labels: Vec<usize> = chunk.iter().map(|&i| corpus.labels[i]).collect();
        let loss = tape.cross_entropy(out.logits, &labels)?;
        loss_sum += tape.value(loss).item() * chunk.len() as f64;
        let grads = tape.backward(loss)?;
        let param_grads = tape.accumulated_param_grads(&grads);
        adam.step(store, &param_grads);
        model.apply_bank_update(banks, chunk, &out);
    }
    Ok(loss_sum / order.len() as f64)
}

/// When the architecture asks for a frozen GNN, the GNN is first fitted to
/// the task over the features its wiring feeds it (static V for late/early
/// fusion, the initial text bank otherwise) with a throwaway head, then
/// frozen at its best validation state.
fn pretrain_gnn(
    model: &FusionModel,
    store: &mut ParamStore,
    corpus: &PreparedCorpus,
    banks: &Banks,
    split: &Split,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<(), GcError> {
    let gnn = model.gnn.as_ref().expect("frozen wiring has a GNN");
    let head = Linear::new(
        store,
        "gnn_pretrain.head",
        gnn.output_dim(),
        corpus.num_classes,
        ParamGroup::Gnn,
        rng,
    );
    let mut adam = Adam::new(config.adam);
    let mut best_err = f64::INFINITY;
    let mut best_state: Option<Vec<Tensor>> = None;
    let mut since_best = 0;
    let feature_bank =
        if matches!(model.spec.wiring, Wiring::Late | Wiring::Early) { &banks.v } else { &banks.t };
    let forward = |tape: &mut Tape, store: &ParamStore, chunk: &[usize], training: bool, rng: &mut ChaCha8Rng| {
        let feats = tape.constant(feature_bank.clone());
        let n_all = gnn.forward(tape, store, feats, &corpus.graph, training, rng)?;
        let n_b = tape.gather_rows(n_all, chunk)?;
        head.forward(tape, store, n_b)
    };
    // temporary tuning hook, removed once the constant settles
    let cap: usize = std::env::var("GEN_PRETRAIN_CAP")
        .ok()
        .and_then(|v| v.parse().ok())
        .unwrap_or(config.max_epochs);
    for _ in 0..config.max_epochs.min(cap) {
        let mut order = split.train.clone();
        order.shuffle(rng);
        let mut step_rng = ChaCha8Rng::seed_from_u64(rng.gen());
        for chunk in order.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let logits = forward(&mut tape, store, chunk, true, &mut step_rng)?;
            let labels: Vec<usize> = chunk.iter().map(|&i| corpus.labels[i]).collect();
            let loss = tape.cross_entropy(logits, &labels)?;
            let grads = tape.backward(loss)?;
            let param_grads = tape.accumulated_param_grads(&grads);
            adam.step(store, &param_grads);
        }
        let mut preds = Vec::new();
        for chunk in split.validation.chunks(config.batch_size) {
            let mut tape = Tape::new();
            let logits = forward(&mut tape, store, chunk, false, &mut step_rng)?;
            let t = tape.value(logits);
            for r in 0..t.rows() {
                let row = t.row(r);
                preds.push(
                    (0..row.len())
                        .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
                        .unwrap(),
                );
            }
        }
        let labels: Vec<usize> = split.validation.iter().map(|&i| corpus.labels[i]).collect();
        let err = balanced_error(&preds, &labels, corpus.num_classes)?;
        if err < best_err {
            best_err = err;
            best_state = Some(store.snapshot());
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    if let Some(state) = best_state {
        store.restore(&state);
    }
    Ok(())
}

/// Everything a run derives from the raw graph for one seed: the split, a
/// vocabulary and TF-IDF features fitted on the train texts only, and the
/// tokenized corpus.
pub fn prepare_corpus(
    config: &RunConfig,
    graph: &DocumentGraph,
    seed: u64,
) -> Result<(PreparedCorpus, Split, MiniLmConfig), GcError> {
    let split = make_split(graph.len(), seed)?;
    let texts = graph.texts();
    let train_texts: Vec<&str> = split.train.iter().map(|&i| texts[i]).collect();
    let vocab = Vocabulary::build(&train_texts);
    let vectorizer = TfidfVectorizer::fit(&train_texts, config.vocab_cap)?;
    let corpus = PreparedCorpus {
        sequences: texts.iter().map(|t| tokenize(t, &vocab, config.max_len)).collect(),
        graph: GraphInputs::new(&graph.adjacency())?,
        features: vectorizer.transform(&texts),
        labels: graph.labels(),
        num_classes: graph.num_classes,
    };
    Ok((corpus, split, config.lm_config(vocab.size())))
}

/// Full training run for one architecture and one seed: builds the model,
/// initializes banks, handles freezing, loops epochs with early stopping on
/// validation balanced error, and reports test metrics of the best state.
pub fn train_model(
    corpus: &PreparedCorpus,
    split: &Split,
    arch: ArchitectureSpec,
    lm_config: MiniLmConfig,
    config: &TrainConfig,
) -> Result<TrainedModel, GcError> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut store = ParamStore::new();
    let model = FusionModel::new(
        &mut store,
        arch,
        lm_config,
        corpus.features.cols(),
        corpus.num_classes,
        &mut rng,
    )?;
    let mut banks = model.initialize_banks(&store, corpus, &mut rng)?;
    if arch.freeze_gnn {
        pretrain_gnn(&model, &mut store, corpus, &banks, split, config, &mut rng)?;
        store.set_group_frozen(ParamGroup::Gnn, true);
    }
    if arch.freeze_lm {
        store.set_group_frozen(ParamGroup::Lm, true);
    }

    let mut adam = Adam::new(config.adam);
    let mut trace = Vec::new();
    let mut best_err = f64::INFINITY;
    let mut best_epoch = 0;
    let mut best_state = store.snapshot();
    let mut best_banks = banks.clone();
    let mut since_best = 0;
    for epoch in 1..=config.max_epochs {
        let mut order = split.train.clone();
        order.shuffle(&mut rng);
        let train_loss = train_epoch(
            &model,
            &mut store,
            corpus,
            &mut banks,
            &mut adam,
            &order,
            config.batch_size,
            &mut rng,
        )?;
        let (val_error, _) =
            evaluate(&model, &store, corpus, &banks, &split.validation, config.batch_size)?;
        trace.push(EpochStats { epoch, train_loss, val_error });
        // temporary tuning hook, removed once the defaults settle
        if std::env::var("GEN_TRACE").is_ok() {
            let (test_error, _) =
                evaluate(&model, &store, corpus, &banks, &split.test, config.batch_size)?;
            eprintln!(
                "trace epoch {epoch}: train_loss {train_loss:.4} val {val_error:.2} test {test_error:.2}"
            );
        }
        if val_error < best_err {
            best_err = val_error;
            best_epoch = epoch;
            best_state = store.snapshot();
            best_banks = banks.clone();
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= config.patience {
                break;
            }
        }
    }
    store.restore(&best_state);
    banks = best_banks;
    let (test_error, test_f1) =
        evaluate(&model, &store, corpus, &banks, &split.test, config.batch_size)?;
    Ok(TrainedModel {
        result: RunResult {
            variant: arch.name(),
            seed: config.seed,
            balanced_error: test_error,
            macro_f1: test_f1,
            best_epoch,
            trace,
        },
        store,
        model,
        banks,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Aggregate {
    pub variant: String,
    pub runs: usize,
    pub mean_error: f64,
    pub std_error: f64,
    pub min_error: f64,
    pub max_error: f64,
    pub mean_f1: f64,
    pub std_f1: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Mean and sample standard deviation of the metrics across seeds.
pub fn aggregate_runs(results: &[RunResult]) -> Result<Aggregate, GcError> {
    if results.is_empty() {
        return Err(GcError::Contract("no runs to aggregate".into()));
    }
    let errors: Vec<f64> = results.iter().map(|r| r.balanced_error).collect();
    let f1s: Vec<f64> = results.iter().map(|r| r.macro_f1).collect();
    let (mean_error, std_error) = mean_std(&errors);
    let (mean_f1, std_f1) = mean_std(&f1s);
    Ok(Aggregate {
        variant: results[0].variant.clone(),
        runs: results.len(),
        mean_error,
        std_error,
        min_error: errors.iter().cloned().fold(f64::INFINITY, f64::min),
        max_error: errors.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        mean_f1,
        std_f1,
    })
}
