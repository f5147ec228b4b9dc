//! Downstream evaluation: ridge and classifier probes on frozen embeddings,
//! joint fine-tuning, workout-level voting and the metric suite.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataio::{batch_tensor, Window};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::ndtensor::{Adam, ParamId, ParamStore, Tape, Tensor, Var};

// ----- ridge regression -----------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    pub weights: Vec<f64>,
    pub bias: f64,
    pub lambda: f64,
}

impl RidgeModel {
    pub fn predict_one(&self, x: &[f64]) -> f64 {
        self.bias + self.weights.iter().zip(x).map(|(w, v)| w * v).sum::<f64>()
    }

    pub fn predict(&self, x: &[Vec<f64>]) -> Vec<f64> {
        x.iter().map(|r| self.predict_one(r)).collect()
    }
}

fn check_rows(x: &[Vec<f64>]) -> Result<usize> {
    let d = x.first().map(Vec::len).ok_or_else(|| Error::Data("no samples".into()))?;
    if d == 0 || x.iter().any(|r| r.len() != d) {
        return Err(Error::shape("features", "rows must share a non-zero length"));
    }
    Ok(d)
}

/// Closed-form ridge regression with an unpenalized bias.
pub fn fit_linear_regression(x: &[Vec<f64>], y: &[f64], lambda: f64) -> Result<RidgeModel> {
    let d = check_rows(x)?;
    if x.len() != y.len() {
        return Err(Error::shape("ridge", format!("{} rows vs {} targets", x.len(), y.len())));
    }
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::Config(format!("ridge lambda must be non-negative, got {lambda}")));
    }
    let n = x.len() as f64;
    let mut mean = vec![0.0; d];
    for r in x {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n);
    }
    let y_mean = y.iter().sum::<f64>() / n;
    let xc = DMatrix::from_fn(x.len(), d, |i, j| x[i][j] - mean[j]);
    let yc = DVector::from_iterator(y.len(), y.iter().map(|v| v - y_mean));
    let mut gram = xc.transpose() * &xc;
    for i in 0..d {
        gram[(i, i)] += lambda;
    }
    let scale = gram.diagonal().amax().max(1.0);
    let singular = || Error::Singular("ridge normal equations are singular; use lambda > 0".into());
    let chol = gram.clone().cholesky().ok_or_else(singular)?;
    if chol.l().diagonal().iter().any(|&l| l * l < 1e-12 * scale) {
        return Err(singular());
    }
    let w = chol.solve(&(xc.transpose() * yc));
    let weights: Vec<f64> = w.iter().copied().collect();
    let bias = y_mean - weights.iter().zip(&mean).map(|(a, b)| a * b).sum::<f64>();
    if weights.iter().any(|v| !v.is_finite()) || !bias.is_finite() {
        return Err(singular());
    }
    Ok(RidgeModel { weights, bias, lambda })
}

// ----- classifiers ----------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    LinearReg,
    LinearClf,
    MlpClf,
    Finetune,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig {
    pub kind: ProbeKind,
    pub hidden: usize,
    pub lr: f64,
    pub steps: usize,
    pub seed: u64,
}

impl Default for ClassifierConfig {
    fn default() -> Self {
        Self {
            kind: ProbeKind::LinearClf,
            hidden: 64,
            lr: 1e-2,
            steps: 300,
            seed: 0,
        }
    }
}

/// Softmax classifier over standardized features.
#[derive(Debug, Clone)]
pub struct ClassifierProbe {
    pub kind: ProbeKind,
    pub n_classes: usize,
    feature_mean: Vec<f64>,
    feature_std: Vec<f64>,
    params: ParamStore,
    layers: Vec<(ParamId, ParamId)>,
}

impl ClassifierProbe {
    fn new(kind: ProbeKind, dims: &[usize], feature_mean: Vec<f64>, feature_std: Vec<f64>, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, io)| {
                let std = (2.0 / io[0] as f64).sqrt() * if l + 2 == dims.len() { 0.5 } else { 1.0 };
                let w = params.push(format!("layer{l}.weight"), Tensor::randn([io[0], io[1]], std, &mut rng));
                let b = params.push(format!("layer{l}.bias"), Tensor::zeros([io[1]]));
                (w, b)
            })
            .collect();
        Self {
            kind,
            n_classes: *dims.last().unwrap_or(&0),
            feature_mean,
            feature_std,
            params,
            layers,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.feature_mean.len()
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Logits `[B, n_classes]` for raw features `[B, d]` already on the tape.
    fn logits(&self, tape: &mut Tape, params: &[Var], features: Var) -> Result<Var> {
        let mean = tape.constant(Tensor::vector(self.feature_mean.clone())?);
        let std = tape.constant(Tensor::vector(self.feature_std.clone())?);
        let centered = tape.sub(features, mean)?;
        let mut h = tape.div(centered, std)?;
        for (l, &(w, b)) in self.layers.iter().enumerate() {
            h = tape.matmul(h, params[w.index()])?;
            h = tape.add(h, params[b.index()])?;
            if l + 1 < self.layers.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn predict_proba(&self, x: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
        let d = check_rows(x)?;
        if d != self.input_dim() {
            return Err(Error::shape("probe", format!("features have {d} dims, probe expects {}", self.input_dim())));
        }
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let feats = tape.constant(Tensor::new(vec![x.len(), d], x.concat())?);
        let logits = self.logits(&mut tape, bound.vars(), feats)?;
        let probs = tape.softmax(logits, 1.0)?;
        Ok(tape.value(probs).chunks(self.n_classes).map(<[f64]>::to_vec).collect())
    }

    pub fn predict(&self, x: &[Vec<f64>]) -> Result<Vec<usize>> {
        Ok(self.predict_proba(x)?.iter().map(|p| argmax(p)).collect())
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

fn feature_stats(x: &[f64], d: usize) -> (Vec<f64>, Vec<f64>) {
    let n = (x.len() / d) as f64;
    let mut mean = vec![0.0; d];
    for r in x.chunks(d) {
        mean.iter_mut().zip(r).for_each(|(m, v)| *m += v / n);
    }
    let mut var = vec![0.0; d];
    for r in x.chunks(d) {
        var.iter_mut().zip(r).zip(&mean).for_each(|((s, v), m)| *s += (v - m).powi(2) / n);
    }
    (mean, var.into_iter().map(|v| v.sqrt().max(1e-8)).collect())
}

/// Mean softmax cross-entropy of `logits [B, C]` against integer labels.
fn cross_entropy(tape: &mut Tape, logits: Var, labels: &[usize], n_classes: usize) -> Result<Var> {
    let mut onehot = vec![0.0; labels.len() * n_classes];
    for (i, &l) in labels.iter().enumerate() {
        onehot[i * n_classes + l] = 1.0;
    }
    let onehot = tape.constant(Tensor::new(vec![labels.len(), n_classes], onehot)?);
    let lse = tape.logsumexp(logits)?;
    let picked = tape.mul(logits, onehot)?;
    let picked = tape.sum(picked, 1, false)?;
    let nll = tape.sub(lse, picked)?;
    tape.mean_all(nll)
}

fn check_labels(labels: &[usize], n_classes: usize) -> Result<()> {
    if let Some(&bad) = labels.iter().find(|&&l| l >= n_classes) {
        return Err(Error::Data(format!("label {bad} outside {n_classes} classes")));
    }
    if labels.iter().collect::<BTreeSet<_>>().len() < 2 {
        return Err(Error::Data("classifier training needs at least two distinct classes".into()));
    }
    Ok(())
}

/// Trains a linear or one-hidden-layer softmax classifier with full-batch Adam.
pub fn fit_classifier(x: &[Vec<f64>], labels: &[usize], n_classes: usize, config: &ClassifierConfig) -> Result<ClassifierProbe> {
    let d = check_rows(x)?;
    if x.len() != labels.len() {
        return Err(Error::shape("classifier", format!("{} rows vs {} labels", x.len(), labels.len())));
    }
    check_labels(labels, n_classes)?;
    let dims = match config.kind {
        ProbeKind::LinearClf => vec![d, n_classes],
        ProbeKind::MlpClf => vec![d, config.hidden.max(1), n_classes],
        ProbeKind::LinearReg | ProbeKind::Finetune => {
            return Err(Error::Config(format!("{:?} is not a classifier probe", config.kind)))
        }
    };
    let flat = x.concat();
    let (mean, std) = feature_stats(&flat, d);
    let mut probe = ClassifierProbe::new(config.kind, &dims, mean, std, config.seed);
    let features = Tensor::new(vec![x.len(), d], flat)?;
    let mut adam = Adam::new(config.lr);
    for step in 0..config.steps {
        let mut tape = Tape::new();
        let bound = probe.params.bind(&mut tape, true);
        let feats = tape.constant(features.clone());
        let logits = probe.logits(&mut tape, bound.vars(), feats)?;
        let loss = cross_entropy(&mut tape, logits, labels, n_classes)?;
        tape.backward(loss)?;
        let grads = probe.params.collect_grads(&tape, &bound);
        adam.step(probe.params.tensors_mut(), &grads).map_err(|e| match e {
            Error::NonFinite(detail) => Error::Diverged {
                stage: "probe training",
                step,
                detail,
            },
            other => other,
        })?;
    }
    Ok(probe)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 32,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Finetuned {
    pub encoder: Encoder,
    pub head: ClassifierProbe,
    pub losses: Vec<f64>,
}

impl Finetuned {
    pub fn predict_proba(&self, windows: &[Window]) -> Result<Vec<Vec<f64>>> {
        let emb = self.encoder.encode_batch(windows)?;
        self.head.predict_proba(&tensor_rows(&emb))
    }
}

/// Rows of a `[B, d]` tensor.
pub fn tensor_rows(t: &Tensor) -> Vec<Vec<f64>> {
    let d = t.shape().last().copied().unwrap_or(1);
    t.data().chunks(d).map(<[f64]>::to_vec).collect()
}

/// Trains the encoder and a linear head jointly from a pre-trained start.
pub fn finetune(
    encoder: &Encoder,
    windows: &[Window],
    labels: &[usize],
    n_classes: usize,
    config: &FinetuneConfig,
) -> Result<Finetuned> {
    if windows.len() != labels.len() || windows.is_empty() {
        return Err(Error::shape("finetune", format!("{} windows vs {} labels", windows.len(), labels.len())));
    }
    check_labels(labels, n_classes)?;
    if config.batch_size == 0 {
        return Err(Error::Config("finetune batch_size must be positive".into()));
    }
    let mut encoder = encoder.clone();
    let d = encoder.embed_dim();
    let init = encoder.encode_batch(windows)?;
    let (mean, std) = feature_stats(init.data(), d);
    let mut head = ClassifierProbe::new(ProbeKind::Finetune, &[d, n_classes], mean, std, config.seed);
    let n_enc = encoder.params().len();
    let mut adam = Adam::new(config.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut idx = Vec::with_capacity(config.batch_size);
        while idx.len() < config.batch_size.min(windows.len()) {
            if order.is_empty() {
                order = (0..windows.len()).collect();
                order.shuffle(&mut rng);
            }
            idx.push(order.pop().unwrap_or(0));
        }
        let mut tape = Tape::new();
        let enc_bound = encoder.params().bind(&mut tape, true);
        let head_bound = head.params.bind(&mut tape, true);
        let x = tape.constant(batch_tensor(idx.iter().map(|&i| &windows[i]))?);
        let emb = encoder.forward(&mut tape, &enc_bound, x)?;
        let logits = head.logits(&mut tape, head_bound.vars(), emb)?;
        let batch_labels: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let loss = cross_entropy(&mut tape, logits, &batch_labels, n_classes)?;
        tape.backward(loss)?;
        losses.push(tape.scalar(loss)?);
        let mut grads = encoder.params().collect_grads(&tape, &enc_bound);
        grads.extend(head.params.collect_grads(&tape, &head_bound));
        let mut tensors: Vec<Tensor> = encoder.params().tensors().iter().chain(head.params.tensors()).cloned().collect();
        adam.step(&mut tensors, &grads).map_err(|e| match e {
            Error::NonFinite(detail) => Error::Diverged {
                stage: "finetune",
                step,
                detail,
            },
            other => other,
        })?;
        let (enc_t, head_t) = tensors.split_at(n_enc);
        encoder.params_mut().tensors_mut().clone_from_slice(enc_t);
        head.params.tensors_mut().clone_from_slice(head_t);
    }
    Ok(Finetuned { encoder, head, losses })
}

// ----- aggregation & metrics -------------------------------------------------

/// Most frequent class; ties go to the smallest id.
pub fn majority_vote(predictions: &[usize]) -> Result<usize> {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &p in predictions {
        *counts.entry(p).or_default() += 1;
    }
    let best = counts.values().copied().max().ok_or_else(|| Error::Data("majority vote over no predictions".into()))?;
    Ok(counts.into_iter().find(|&(_, c)| c == best).map(|(k, _)| k).unwrap_or(0))
}

/// Per-group majority vote over `(group, prediction)` pairs.
pub fn vote_by_group<K: Ord + Clone>(items: &[(K, usize)]) -> Result<BTreeMap<K, usize>> {
    let mut groups: BTreeMap<K, Vec<usize>> = BTreeMap::new();
    for (k, p) in items {
        groups.entry(k.clone()).or_default().push(*p);
    }
    groups.into_iter().map(|(k, v)| Ok((k, majority_vote(&v)?))).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub class: usize,
    pub support: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserRow {
    pub user_id: String,
    pub count: usize,
    pub mean_squared_error: f64,
    pub mean_absolute_error: f64,
    pub mean_prediction: f64,
    pub mean_target: f64,
}

/// Named scalar metrics plus per-class and per-user breakdowns.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsReport {
    pub scalars: BTreeMap<String, f64>,
    pub per_class: Vec<ClassRow>,
    pub per_user: Vec<UserRow>,
    pub warnings: Vec<String>,
}

impl MetricsReport {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.scalars.get(name).copied()
    }

    /// Copies `other`'s scalars under `prefix.` and appends its warnings.
    pub fn absorb(&mut self, prefix: &str, other: &MetricsReport) {
        for (k, v) in &other.scalars {
            self.scalars.insert(format!("{prefix}.{k}"), *v);
        }
        self.warnings.extend(other.warnings.iter().map(|w| format!("{prefix}: {w}")));
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Header and value rows for a flat CSV of the scalar metrics.
    pub fn csv_row(&self) -> (Vec<String>, Vec<String>) {
        (
            self.scalars.keys().cloned().collect(),
            self.scalars.values().map(|v| v.to_string()).collect(),
        )
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (n − 1); zero for a single value.
pub fn sample_std(v: &[f64]) -> f64 {
    if v.len() < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (v.len() - 1) as f64).sqrt()
}

pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::Data(format!("correlation needs two equal series of length >= 2, got {} and {}", a.len(), b.len())));
    }
    let (ma, mb) = (mean(a), mean(b));
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Err(Error::Data("correlation undefined for a constant series".into()));
    }
    Ok((cov / (va * vb).sqrt()).clamp(-1.0, 1.0))
}

/// Errors are averaged per user first; MSE/MAE are means over users,
/// SDSE/SDAE sample standard deviations over users, and the correlation
/// is taken between per-user mean prediction and per-user mean target.
pub fn regression_metrics(preds: &[f64], targets: &[f64], user_ids: &[String]) -> Result<MetricsReport> {
    if preds.len() != targets.len() || preds.len() != user_ids.len() || preds.is_empty() {
        return Err(Error::shape(
            "regression metrics",
            format!("{} predictions, {} targets, {} users", preds.len(), targets.len(), user_ids.len()),
        ));
    }
    let mut groups: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, u) in user_ids.iter().enumerate() {
        groups.entry(u.as_str()).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(Error::Data("regression metrics need at least two users".into()));
    }
    let per_user: Vec<UserRow> = groups
        .iter()
        .map(|(u, idx)| {
            let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
            let (p, t) = (pick(preds), pick(targets));
            UserRow {
                user_id: u.to_string(),
                count: idx.len(),
                mean_squared_error: mean(&p.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).collect::<Vec<_>>()),
                mean_absolute_error: mean(&p.iter().zip(&t).map(|(a, b)| (a - b).abs()).collect::<Vec<_>>()),
                mean_prediction: mean(&p),
                mean_target: mean(&t),
            }
        })
        .collect();
    let col = |f: fn(&UserRow) -> f64| per_user.iter().map(f).collect::<Vec<_>>();
    let (se, ae) = (col(|r| r.mean_squared_error), col(|r| r.mean_absolute_error));
    let mut report = MetricsReport::default();
    report.scalars.insert("mse".into(), mean(&se));
    report.scalars.insert("sdse".into(), sample_std(&se));
    report.scalars.insert("mae".into(), mean(&ae));
    report.scalars.insert("sdae".into(), sample_std(&ae));
    let (mp, mt) = (col(|r| r.mean_prediction), col(|r| r.mean_target));
    match pearson(&mp, &mt) {
        Ok(r) => {
            report.scalars.insert("pearson_corr".into(), r);
        }
        Err(e) => report.warnings.push(format!("pearson_corr omitted: {e}")),
    }
    report.per_user = per_user;
    Ok(report)
}

/// Area under the trapezoidal ROC of `scores` for `positive` labels,
/// with tied scores grouped into a single ROC step.
pub fn binary_auc(scores: &[f64], positive: &[bool]) -> Option<f64> {
    let n_pos = positive.iter().filter(|&&p| p).count();
    let n_neg = positive.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut area = 0.0;
    let mut i = 0;
    while i < order.len() {
        let (prev_tp, prev_fp) = (tp, fp);
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if positive[order[i]] {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        area += (fp - prev_fp) as f64 * (tp + prev_tp) as f64 / 2.0;
    }
    Some(area / (n_pos * n_neg) as f64)
}

/// Cohen's kappa from a confusion matrix (rows = truth, columns = prediction).
pub fn cohen_kappa(confusion: &[Vec<u64>]) -> f64 {
    let n: u64 = confusion.iter().flatten().sum();
    let diag: u64 = (0..confusion.len()).map(|i| confusion[i][i]).sum();
    let chance: u128 = (0..confusion.len())
        .map(|k| {
            let row: u64 = confusion[k].iter().sum();
            let col: u64 = confusion.iter().map(|r| r[k]).sum();
            row as u128 * col as u128
        })
        .sum();
    let n2 = n as u128 * n as u128;
    if n2 == chance {
        return if diag == n { 1.0 } else { 0.0 };
    }
    (n as i128 * diag as i128 - chance as i128) as f64 / (n2 - chance) as f64
}

pub fn confusion_matrix(preds: &[usize], labels: &[usize], n_classes: usize) -> Vec<Vec<u64>> {
    let mut m = vec![vec![0u64; n_classes]; n_classes];
    for (&p, &l) in preds.iter().zip(labels) {
        m[l][p] += 1;
    }
    m
}

/// Accuracy, macro F1, Cohen's kappa and one-vs-rest macro AUC.
/// Classes absent from `labels` are left out of the macro averages.
pub fn classification_metrics(preds: &[usize], scores: &[Vec<f64>], labels: &[usize], n_classes: usize) -> Result<MetricsReport> {
    if preds.len() != labels.len() || scores.len() != labels.len() || labels.is_empty() {
        return Err(Error::shape(
            "classification metrics",
            format!("{} predictions, {} score rows, {} labels", preds.len(), scores.len(), labels.len()),
        ));
    }
    if let Some(bad) = preds.iter().chain(labels).find(|&&c| c >= n_classes) {
        return Err(Error::Data(format!("class {bad} outside {n_classes} classes")));
    }
    if let Some(row) = scores.iter().find(|r| r.len() != n_classes || (r.iter().sum::<f64>() - 1.0).abs() > 1e-6) {
        return Err(Error::Data(format!("score row {row:?} is not a distribution over {n_classes} classes")));
    }
    let confusion = confusion_matrix(preds, labels, n_classes);
    let mut report = MetricsReport::default();
    let mut f1s = Vec::new();
    let mut aucs = Vec::new();
    for c in 0..n_classes {
        let tp = confusion[c][c];
        let support: u64 = confusion[c].iter().sum();
        let predicted: u64 = confusion.iter().map(|r| r[c]).sum();
        let ratio = |a: u64, b: u64| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let (precision, recall) = (ratio(tp, predicted), ratio(tp, support));
        let f1 = ratio(2 * tp, support + predicted);
        let class_scores: Vec<f64> = scores.iter().map(|r| r[c]).collect();
        let positive: Vec<bool> = labels.iter().map(|&l| l == c).collect();
        let auc = binary_auc(&class_scores, &positive);
        if support == 0 {
            report.warnings.push(format!("class {c} absent from labels; excluded from macro averages"));
        } else {
            f1s.push(f1);
            match auc {
                Some(a) => aucs.push(a),
                None => report.warnings.push(format!("class {c} has no negatives; AUC undefined")),
            }
        }
        report.per_class.push(ClassRow {
            class: c,
            support: support as usize,
            precision,
            recall,
            f1,
            auc,
        });
    }
    let correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    report.scalars.insert("accuracy".into(), correct as f64 / labels.len() as f64);
    report.scalars.insert("f1_macro".into(), mean(&f1s));
    report.scalars.insert("kappa".into(), cohen_kappa(&confusion));
    if !aucs.is_empty() {
        report.scalars.insert("auc_macro".into(), mean(&aucs));
    }
    Ok(report)
}

/// Mean and sample std of each scalar across repeated runs, as
/// `<name>_mean` and `<name>_std`.
pub fn summarize_repeats(runs: &[MetricsReport]) -> MetricsReport {
    let mut out = MetricsReport::default();
    let names: BTreeSet<&String> = runs.iter().flat_map(|r| r.scalars.keys()).collect();
    for name in names {
        let vals: Vec<f64> = runs.iter().filter_map(|r| r.get(name)).collect();
        out.scalars.insert(format!("{name}_mean"), mean(&vals));
        out.scalars.insert(format!("{name}_std"), sample_std(&vals));
    }
    for r in runs {
        out.warnings.extend(r.warnings.iter().cloned());
    }
    out.warnings.dedup();
    out
}
