//! Leave-one-subject-out training and evaluation.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{Dataset, Sample, SampleKey};
use crate::ingest::{CohortManifest, Label};
use crate::models::{ModelConfig, ModelGraph, N_CLASSES};
use crate::synth::derive_seed;
use crate::tensor::{write_checkpoint, Adam, AdamConfig, FlushDenormals, Mode, Real, Tape, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

/// How the early-stopping validation set is drawn from a fold's training pool.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ValidationPolicy {
    /// One seeded subject per class, when the class has at least two training subjects.
    #[default]
    SubjectPerClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub validation: ValidationPolicy,
    pub aggregation_fraction: f64,
    pub lr_grid: Vec<f64>,
    pub batch_grid: Vec<usize>,
    /// Folds used per grid cell (all when unset).
    pub grid_folds: Option<usize>,
    pub precision: Precision,
    /// Optional per-class loss weights `[S, H]`.
    pub class_weights: Option<[f64; 2]>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 64,
            max_epochs: 200,
            patience: 15,
            seed: 7,
            validation: ValidationPolicy::SubjectPerClass,
            aggregation_fraction: 0.25,
            lr_grid: vec![1e-4, 3e-4, 1e-5, 3e-5],
            batch_grid: vec![32, 64, 128],
            grid_folds: None,
            precision: Precision::F32,
            class_weights: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail("lr must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be positive");
        }
        if self.max_epochs == 0 {
            return fail("max_epochs must be positive");
        }
        if self.patience >= self.max_epochs {
            return fail("patience must be smaller than max_epochs");
        }
        if !(self.aggregation_fraction > 0.0 && self.aggregation_fraction <= 1.0) {
            return fail("aggregation_fraction must lie in (0, 1]");
        }
        if let Some(w) = self.class_weights {
            if w.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return fail("class weights must be positive");
            }
        }
        Ok(())
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// Hex SHA-256 of the canonical JSON of both configurations.
pub fn config_hash(model: &ModelConfig, train: &TrainConfig) -> String {
    let json = serde_json::to_string(&(model, train)).expect("configs serialize");
    hex::encode(Sha256::digest(json.as_bytes()))
}

/// One LOSO fold.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fold {
    pub index: usize,
    pub test_subject: String,
    pub test_label: Label,
    pub train_subjects: Vec<(String, Label)>,
}

/// One fold per subject, in the given order.
pub fn loso_split_subjects(subjects: &[(String, Label)]) -> Result<Vec<Fold>> {
    if subjects.len() < 3 {
        return Err(Error::InsufficientSubjects(subjects.len()));
    }
    if !(subjects.iter().any(|s| s.1 == Label::Sz) && subjects.iter().any(|s| s.1 == Label::Hc)) {
        return Err(Error::SingleClassCohort);
    }
    Ok(subjects
        .iter()
        .enumerate()
        .map(|(index, (id, label))| Fold {
            index,
            test_subject: id.clone(),
            test_label: *label,
            train_subjects: subjects.iter().filter(|s| &s.0 != id).cloned().collect(),
        })
        .collect())
}

pub fn loso_split(manifest: &CohortManifest) -> Result<Vec<Fold>> {
    let subjects: Vec<(String, Label)> = manifest.subjects.iter().map(|s| (s.subject_id.clone(), s.label)).collect();
    loso_split_subjects(&subjects)
}

/// Picks validation subjects from a fold's training pool. A class with
/// fewer than two training subjects contributes none.
pub fn choose_validation(fold: &Fold, policy: ValidationPolicy, seed: u64) -> Vec<String> {
    let ValidationPolicy::SubjectPerClass = policy;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x76616c));
    let mut chosen = Vec::new();
    for label in [Label::Sz, Label::Hc] {
        let pool: Vec<&String> = fold.train_subjects.iter().filter(|s| s.1 == label).map(|s| &s.0).collect();
        if pool.len() >= 2 {
            chosen.push(pool.choose(&mut rng).expect("nonempty").to_string());
        }
    }
    chosen
}

/// Patience-based stopping on a monitored loss.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    epoch: usize,
    waited: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            epoch: 0,
            waited: 0,
        }
    }

    /// Records one epoch's loss; returns `(improved, stop)`.
    pub fn update(&mut self, loss: f64) -> (bool, bool) {
        self.epoch += 1;
        if loss < self.best {
            self.best = loss;
            self.best_epoch = self.epoch;
            self.waited = 0;
            (true, false)
        } else {
            self.waited += 1;
            (false, self.waited >= self.patience)
        }
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// 1-based epoch of the best loss (0 before any update).
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    /// Monitored loss per epoch (validation loss, or training loss when no validation subjects exist).
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub stopped_early: bool,
}

fn batch_inputs<T: Real>(samples: &[&Sample]) -> Result<Vec<Tensor<T>>> {
    let n_inputs = samples.first().ok_or(Error::EmptyInput)?.inputs.len();
    (0..n_inputs)
        .map(|k| {
            let parts: Vec<&Tensor<f64>> = samples.iter().map(|s| &s.inputs[k]).collect();
            Ok(Tensor::stack(&parts)?.cast())
        })
        .collect()
}

fn labels_of(samples: &[&Sample]) -> Vec<usize> {
    samples.iter().map(|s| s.label.index()).collect()
}

/// Mean eval-mode cross-entropy over `samples`.
pub fn mean_loss<T: Real>(
    graph: &ModelGraph<T>,
    samples: &[&Sample],
    batch_size: usize,
    class_weights: Option<[f64; 2]>,
) -> Result<f64> {
    let _flush = FlushDenormals::new();
    let mut total = 0.0;
    let mut weight = 0.0;
    for chunk in samples.chunks(batch_size.max(1)) {
        let inputs = batch_inputs::<T>(chunk)?;
        let labels = labels_of(chunk);
        let mut tape = Tape::new(&graph.store, Mode::Eval, 0);
        let p = graph.forward(&mut tape, &inputs)?;
        let loss = tape.cross_entropy(p, &labels, class_weights.as_ref().map(|w| &w[..]))?;
        let w: f64 = labels.iter().map(|&l| class_weights.map_or(1.0, |cw| cw[l])).sum();
        total += tape.value(loss).data()[0].as_f64() * w;
        weight += w;
    }
    Ok(total / weight)
}

/// Eval-mode `[p_S, p_H]` per sample.
pub fn predict<T: Real>(graph: &ModelGraph<T>, samples: &[&Sample], batch_size: usize) -> Result<Vec<[f64; 2]>> {
    let _flush = FlushDenormals::new();
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        out.extend(graph.predict(&batch_inputs::<T>(chunk)?)?);
    }
    Ok(out)
}

/// Mini-batch Adam on cross-entropy with patience-based early stopping on
/// `val` (or on the training loss when `val` is empty). The parameters of
/// the best monitored epoch are restored before returning.
pub fn train_fold<T: Real>(
    graph: &mut ModelGraph<T>,
    train: &[&Sample],
    val: &[&Sample],
    config: &TrainConfig,
    seed: u64,
) -> Result<TrainHistory> {
    config.validate()?;
    if train.is_empty() {
        return Err(Error::EmptyInput);
    }
    let _flush = FlushDenormals::new();
    for label in [Label::Sz, Label::Hc] {
        if !train.iter().any(|s| s.label == label) {
            return Err(Error::Validation(format!("fold training set has no {label} samples")));
        }
    }
    let weights = config.class_weights.as_ref().map(|w| &w[..]);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0x7368756666));
    let mut adam = Adam::new(config.adam());
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = graph.store.snapshot();
    let mut history = TrainHistory {
        train_loss: Vec::new(),
        val_loss: Vec::new(),
        best_epoch: 0,
        epochs_run: 0,
        stopped_early: false,
    };
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..config.max_epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, idx) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Sample> = idx.iter().map(|&i| train[i]).collect();
            let inputs = batch_inputs::<T>(&batch)?;
            let labels = labels_of(&batch);
            let (loss, grads, updates) = {
                let dropout_seed = derive_seed(seed, ((epoch as u64) << 32) | b as u64);
                let mut tape = Tape::new(&graph.store, Mode::Train, dropout_seed);
                let p = graph.forward(&mut tape, &inputs)?;
                let loss = tape.cross_entropy(p, &labels, weights)?;
                let value = tape.value(loss).data()[0].as_f64();
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss(epoch + 1));
                }
                (value, tape.backward(loss)?, tape.batch_norm_updates().to_vec())
            };
            adam.step(&mut graph.store, &grads)?;
            for u in &updates {
                u.apply(&mut graph.store);
            }
            epoch_loss += loss * batch.len() as f64;
        }
        let train_loss = epoch_loss / train.len() as f64;
        let monitored = if val.is_empty() {
            train_loss
        } else {
            mean_loss(graph, val, config.batch_size, config.class_weights)?
        };
        if !monitored.is_finite() {
            return Err(Error::NonFiniteLoss(epoch + 1));
        }
        history.train_loss.push(train_loss);
        history.val_loss.push(monitored);
        history.epochs_run = epoch + 1;
        log::debug!("epoch {}: train {train_loss:.5} monitored {monitored:.5}", epoch + 1);
        let (improved, stop) = stopper.update(monitored);
        if improved {
            best = graph.store.snapshot();
        }
        if stop {
            history.stopped_early = true;
            break;
        }
    }
    graph.store.restore(best);
    history.best_epoch = stopper.best_epoch();
    Ok(history)
}

/// Subject decision from its segment probabilities `[p_S, p_H]`.
///
/// The `ceil(fraction·n)` most confident segments (largest max probability)
/// vote with their argmax; a tied vote goes to the class with the larger mean
/// probability over the selected segments, and a fully tied case to S.
/// Segments with exactly equal class probabilities abstain.
pub fn aggregate_subject(probs: &[[f64; 2]], fraction: f64) -> Result<Label> {
    if probs.is_empty() {
        return Err(Error::EmptyInput);
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::Config(format!("aggregation fraction {fraction} outside (0, 1]")));
    }
    let n = probs.len();
    let k = ((fraction * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
    let mut sorted = probs.to_vec();
    // full lexicographic order keeps the selection independent of input order
    sorted.sort_by(|a, b| {
        let ca = a[0].max(a[1]);
        let cb = b[0].max(b[1]);
        cb.total_cmp(&ca).then(b[0].total_cmp(&a[0])).then(b[1].total_cmp(&a[1]))
    });
    let selected = &sorted[..k];
    let votes_s = selected.iter().filter(|p| p[0] > p[1]).count();
    let votes_h = selected.iter().filter(|p| p[1] > p[0]).count();
    if votes_s != votes_h {
        return Ok(if votes_s > votes_h { Label::Sz } else { Label::Hc });
    }
    let mean_s: f64 = selected.iter().map(|p| p[0]).sum::<f64>() / k as f64;
    let mean_h: f64 = selected.iter().map(|p| p[1]).sum::<f64>() / k as f64;
    Ok(if mean_h > mean_s { Label::Hc } else { Label::Sz })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentProb {
    pub key: SampleKey,
    pub p_s: f64,
    pub p_h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    pub subject_id: String,
    pub true_label: Label,
    pub predicted_label: Label,
    pub segments: Vec<SegmentProb>,
    pub validation_subjects: Vec<String>,
    pub history: TrainHistory,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// True when a zero denominator forced a 0.
    pub undefined: bool,
}

fn class_score(tp: usize, fp: usize, fn_: usize) -> ClassScore {
    let mut undefined = false;
    let mut ratio = |num: usize, den: usize| {
        if den == 0 {
            undefined = true;
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        undefined = true;
        0.0
    };
    ClassScore {
        precision,
        recall,
        f1,
        undefined,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSummary {
    pub fold: usize,
    pub subject_id: String,
    pub true_label: Label,
    pub predicted_label: Label,
    pub n_segments: usize,
    pub epochs_run: usize,
    pub best_epoch: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub n_folds: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub f1_s: ClassScore,
    pub f1_h: ClassScore,
    pub folds: Vec<FoldSummary>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }

    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "config {}", self.config_hash);
        let _ = writeln!(s, "{:<6} {:<12} {:<5} {:<5} {:>8} {:>7}", "fold", "subject", "true", "pred", "segments", "epochs");
        for f in &self.folds {
            let _ = writeln!(
                s,
                "{:<6} {:<12} {:<5} {:<5} {:>8} {:>7}",
                f.fold, f.subject_id, f.true_label, f.predicted_label, f.n_segments, f.epochs_run
            );
        }
        let flag = |c: &ClassScore| if c.undefined { " (undefined terms set to 0)" } else { "" };
        let _ = writeln!(
            s,
            "accuracy {:.4} ({}/{})\nF1(S) {:.4}{}\nF1(H) {:.4}{}",
            self.accuracy,
            self.correct,
            self.n_folds,
            self.f1_s.f1,
            flag(&self.f1_s),
            self.f1_h.f1,
            flag(&self.f1_h)
        );
        s
    }
}

/// Subject-level accuracy and per-class F1 over fold results.
pub fn evaluate(results: &[FoldResult], config_hash: &str) -> Result<EvalReport> {
    if results.is_empty() {
        return Err(Error::EmptyInput);
    }
    let count = |t: Label, p: Label| results.iter().filter(|r| r.true_label == t && r.predicted_label == p).count();
    let (ss, sh, hs, hh) = (
        count(Label::Sz, Label::Sz),
        count(Label::Sz, Label::Hc),
        count(Label::Hc, Label::Sz),
        count(Label::Hc, Label::Hc),
    );
    let correct = ss + hh;
    Ok(EvalReport {
        config_hash: config_hash.to_string(),
        n_folds: results.len(),
        correct,
        accuracy: correct as f64 / results.len() as f64,
        f1_s: class_score(ss, hs, sh),
        f1_h: class_score(hh, sh, hs),
        folds: results
            .iter()
            .map(|r| FoldSummary {
                fold: r.fold,
                subject_id: r.subject_id.clone(),
                true_label: r.true_label,
                predicted_label: r.predicted_label,
                n_segments: r.segments.len(),
                epochs_run: r.history.epochs_run,
                best_epoch: r.history.best_epoch,
            })
            .collect(),
    })
}

/// Samples of a fold's three disjoint subject sets.
pub struct FoldData<'a> {
    pub train: Vec<&'a Sample>,
    pub val: Vec<&'a Sample>,
    pub test: Vec<&'a Sample>,
    pub validation_subjects: Vec<String>,
}

impl<'a> FoldData<'a> {
    pub fn new(dataset: &'a Dataset, fold: &Fold, config: &TrainConfig, seed: u64) -> Self {
        let validation_subjects = choose_validation(fold, config.validation, seed);
        let train_ids: BTreeSet<&str> = fold
            .train_subjects
            .iter()
            .map(|s| s.0.as_str())
            .filter(|id| !validation_subjects.iter().any(|v| v == id))
            .collect();
        let pick = |pred: &dyn Fn(&str) -> bool| -> Vec<&'a Sample> {
            dataset.samples.iter().filter(|s| pred(&s.key.subject_id)).collect()
        };
        FoldData {
            train: pick(&|id| train_ids.contains(id)),
            val: pick(&|id| validation_subjects.iter().any(|v| v == id)),
            test: pick(&|id| id == fold.test_subject),
            validation_subjects,
        }
    }

    /// Subject ids shared between the test set and the train or validation sets.
    pub fn leaked_subjects(&self) -> BTreeSet<String> {
        let test: BTreeSet<&str> = self.test.iter().map(|s| s.key.subject_id.as_str()).collect();
        self.train
            .iter()
            .chain(&self.val)
            .map(|s| s.key.subject_id.as_str())
            .filter(|id| test.contains(id))
            .map(str::to_string)
            .collect()
    }
}

fn fold_stem(fold: &Fold) -> String {
    format!("fold{:02}_{}", fold.index, fold.test_subject)
}

/// Per-segment probability table for one fold.
pub fn segment_csv(result: &FoldResult) -> String {
    let mut s = String::from("subject_id,session_id,utterance_id,segment,true_label,p_s,p_h\n");
    for seg in &result.segments {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{}",
            seg.key.subject_id, seg.key.session_id, seg.key.utterance_id, seg.key.segment, result.true_label, seg.p_s, seg.p_h
        );
    }
    s
}

fn run_fold_typed<T: Real>(
    dataset: &Dataset,
    fold: &Fold,
    model: &ModelConfig,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<FoldResult> {
    let seed = config.seed.wrapping_add(fold.index as u64);
    let data = FoldData::new(dataset, fold, config, seed);
    let leaked = data.leaked_subjects();
    if !leaked.is_empty() {
        return Err(Error::Validation(format!("fold {} leaks subjects {leaked:?}", fold.index)));
    }
    if data.test.is_empty() {
        return Err(Error::Validation(format!("subject {} has no samples", fold.test_subject)));
    }
    let mut graph = ModelGraph::<T>::build(model, seed)?;
    let history = train_fold(&mut graph, &data.train, &data.val, config, seed)?;
    let probs = predict(&graph, &data.test, config.batch_size)?;
    let predicted_label = aggregate_subject(&probs, config.aggregation_fraction)?;
    log::info!(
        "fold {} ({}): true {} predicted {} after {} epochs",
        fold.index,
        fold.test_subject,
        fold.test_label,
        predicted_label,
        history.epochs_run
    );
    let result = FoldResult {
        fold: fold.index,
        subject_id: fold.test_subject.clone(),
        true_label: fold.test_label,
        predicted_label,
        segments: data
            .test
            .iter()
            .zip(&probs)
            .map(|(s, p)| SegmentProb {
                key: s.key.clone(),
                p_s: p[0],
                p_h: p[1],
            })
            .collect(),
        validation_subjects: data.validation_subjects,
        history,
    };
    if let Some(dir) = out_dir {
        let stem = fold_stem(fold);
        write_checkpoint(&dir.join(format!("{stem}.ckpt")), &graph.store)?;
        let csv_path = dir.join(format!("{stem}_segments.csv"));
        fs::write(&csv_path, segment_csv(&result)).map_err(|e| Error::io(&csv_path, e))?;
    }
    Ok(result)
}

/// Trains and tests one fold with the configured precision.
pub fn run_fold(
    dataset: &Dataset,
    fold: &Fold,
    model: &ModelConfig,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<FoldResult> {
    match config.precision {
        Precision::F32 => run_fold_typed::<f32>(dataset, fold, model, config, out_dir),
        Precision::F64 => run_fold_typed::<f64>(dataset, fold, model, config, out_dir),
    }
}

/// Full LOSO run. Folds run on the current rayon pool; results are reduced in fold order.
pub fn run_loso(
    dataset: &Dataset,
    model: &ModelConfig,
    config: &TrainConfig,
    out_dir: Option<&Path>,
) -> Result<(EvalReport, Vec<FoldResult>)> {
    model.validate()?;
    config.validate()?;
    retain_freed_memory();
    let folds = loso_split_subjects(&dataset.subjects())?;
    let results = folds
        .par_iter()
        .map(|fold| run_fold(dataset, fold, model, config, out_dir))
        .collect::<Result<Vec<_>>>()?;
    let report = evaluate(&results, &config_hash(model, config))?;
    Ok((report, results))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridCell {
    pub lr: f64,
    pub batch_size: usize,
    pub mean_val_loss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub cells: Vec<GridCell>,
    pub best_lr: f64,
    pub best_batch_size: usize,
}

/// Lower mean loss wins; exact ties go to the larger batch, then the larger lr.
fn better(a: &GridCell, b: &GridCell) -> bool {
    let (la, lb) = (a.mean_val_loss.unwrap_or(f64::INFINITY), b.mean_val_loss.unwrap_or(f64::INFINITY));
    la < lb || (la == lb && (a.batch_size, a.lr) > (b.batch_size, b.lr))
}

/// Picks the best grid cell from evaluated cells.
pub fn select_grid_cell(cells: Vec<GridCell>) -> Result<GridResult> {
    let best = cells
        .iter()
        .filter(|c| c.mean_val_loss.is_some())
        .fold(None::<&GridCell>, |acc, c| match acc {
            Some(b) if !better(c, b) => Some(b),
            _ => Some(c),
        })
        .ok_or(Error::GridExhausted)?;
    let (best_lr, best_batch_size) = (best.lr, best.batch_size);
    Ok(GridResult {
        cells,
        best_lr,
        best_batch_size,
    })
}

/// Exhaustive lr × batch search scored by the best validation loss, averaged
/// over LOSO folds (the first `grid_folds` when set). Every cell uses the same
/// seeds. A cell whose training fails is recorded with its error.
pub fn grid_search(dataset: &Dataset, model: &ModelConfig, config: &TrainConfig) -> Result<GridResult> {
    if config.lr_grid.is_empty() || config.batch_grid.is_empty() {
        return Err(Error::Config("grid search needs nonempty lr and batch grids".into()));
    }
    retain_freed_memory();
    let mut folds = loso_split_subjects(&dataset.subjects())?;
    if let Some(k) = config.grid_folds {
        folds.truncate(k.max(1));
    }
    let mut cells = Vec::new();
    for &lr in &config.lr_grid {
        for &batch_size in &config.batch_grid {
            let cell_config = TrainConfig {
                lr,
                batch_size,
                ..config.clone()
            };
            let losses: Result<Vec<f64>> = folds
                .par_iter()
                .map(|fold| {
                    let seed = cell_config.seed.wrapping_add(fold.index as u64);
                    let data = FoldData::new(dataset, fold, &cell_config, seed);
                    let h = match cell_config.precision {
                        Precision::F32 => {
                            let mut g = ModelGraph::<f32>::build(model, seed)?;
                            train_fold(&mut g, &data.train, &data.val, &cell_config, seed)?
                        }
                        Precision::F64 => {
                            let mut g = ModelGraph::<f64>::build(model, seed)?;
                            train_fold(&mut g, &data.train, &data.val, &cell_config, seed)?
                        }
                    };
                    Ok(h.val_loss[h.best_epoch - 1])
                })
                .collect();
            let cell = match losses {
                Ok(l) => GridCell {
                    lr,
                    batch_size,
                    mean_val_loss: Some(l.iter().sum::<f64>() / l.len() as f64),
                    error: None,
                },
                Err(e) => GridCell {
                    lr,
                    batch_size,
                    mean_val_loss: None,
                    error: Some(e.to_string()),
                },
            };
            log::info!("grid lr {lr:e} batch {batch_size}: {:?} {:?}", cell.mean_val_loss, cell.error);
            cells.push(cell);
        }
    }
    select_grid_cell(cells)
}

/// Keeps freed heap memory in the process so the large per-batch activation
/// buffers are not returned to and re-faulted from the OS on every step.
pub fn retain_freed_memory() {
    #[cfg(all(target_os = "linux", target_env = "gnu"))]
    // SAFETY: mallopt only adjusts allocator tunables.
    unsafe {
        libc::mallopt(libc::M_MMAP_MAX, 0);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}

const _: () = assert!(N_CLASSES == 2);
