//! Run configuration, stage orchestration and artifact layout shared by the
//! command-line tool and the Python bindings.

use std::collections::{BTreeMap, BTreeSet};
use std::f64::consts::TAU;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{random_unit_axis, rotation3d, AugmentationPipeline};
use crate::dataio::{
    batch_tensor, generate_synthetic, load_csv_dataset, split_by_user, write_csv_dataset, Dataset, Split, SplitManifest,
    SyntheticSpec, Window, WindowId,
};
use crate::distnet::{train_distance, AttentionNormalizer, DistanceNetConfig, DistanceTrainConfig, FrozenDistance};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::evalkit::{
    classification_metrics, finetune, fit_classifier, fit_linear_regression, regression_metrics, summarize_repeats,
    tensor_rows, vote_by_group, ClassifierConfig, FinetuneConfig, MetricsReport, ProbeKind,
};
use crate::ndtensor::{Adam, Tape, Var};
use crate::relconloss::{anchor_loss, LossConfig, LossVariant};
use crate::sampler::{sample_batch, score_candidates, AnchorStream, CandidateSource, SamplerConfig, WindowPool};

pub const DISTANCE_CKPT: &str = "distance.ckpt";
pub const ENCODER_CKPT: &str = "encoder.ckpt";
pub const FINETUNED_CKPT: &str = "encoder_finetuned.ckpt";
pub const METRICS_JSON: &str = "metrics.json";
pub const LOSS_CSV: &str = "loss.csv";
pub const EFFECTIVE_CONFIG: &str = "effective_config.json";
pub const EMBEDDINGS_CSV: &str = "embeddings.csv";
pub const REPORT_CSV: &str = "report.csv";

// ----- configuration --------------------------------------------------------

/// Where windows come from: a dataset directory, or the synthetic generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSource {
    pub path: Option<PathBuf>,
    pub synthetic: SyntheticSpec,
    /// Used when a dataset directory carries no split of its own.
    pub split_ratios: [f64; 3],
    pub split_seed: u64,
}

impl Default for DataSource {
    fn default() -> Self {
        Self {
            path: None,
            synthetic: SyntheticSpec::default(),
            split_ratios: [0.5, 0.0, 0.5],
            split_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
    pub log_every: usize,
}

impl Default for EncoderTrainConfig {
    fn default() -> Self {
        Self {
            steps: 5000,
            batch_size: 16,
            lr: 1e-3,
            seed: 0,
            log_every: 100,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Hop between evaluation windows; workout-level voting always uses
    /// non-overlapping windows.
    pub window_stride: usize,
    pub ridge_lambda: f64,
    pub repeats: usize,
    pub kinds: Vec<ProbeKind>,
    pub classifier: ClassifierConfig,
    pub finetune: FinetuneConfig,
    /// Windows per recording/triplet budget for the distance invariance check.
    pub invariance_triplets: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            window_stride: 16,
            ridge_lambda: 1e-3,
            repeats: 5,
            kinds: vec![ProbeKind::LinearReg, ProbeKind::LinearClf, ProbeKind::MlpClf],
            classifier: ClassifierConfig::default(),
            finetune: FinetuneConfig::default(),
            invariance_triplets: 500,
        }
    }
}

/// Checkpoints consumed by later stages.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CheckpointPaths {
    pub distance: Option<PathBuf>,
    pub encoder: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    NoAugmentations,
    NoRevin,
    NoSparsemax,
    NoWithinSubject,
}

impl std::str::FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "no_augmentations" => Ok(Self::NoAugmentations),
            "no_revin" => Ok(Self::NoRevin),
            "no_sparsemax" => Ok(Self::NoSparsemax),
            "no_within_subject" => Ok(Self::NoWithinSubject),
            other => Err(Error::Config(format!(
                "unknown ablation {other:?}; expected no_augmentations, no_revin, no_sparsemax or no_within_subject"
            ))),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AblationFlags {
    pub no_augmentations: bool,
    pub no_revin: bool,
    pub no_sparsemax: bool,
    pub no_within_subject: bool,
    pub loss_variant: Option<LossVariant>,
}

impl AblationFlags {
    pub fn set(&mut self, ablation: Ablation) {
        match ablation {
            Ablation::NoAugmentations => self.no_augmentations = true,
            Ablation::NoRevin => self.no_revin = true,
            Ablation::NoSparsemax => self.no_sparsemax = true,
            Ablation::NoWithinSubject => self.no_within_subject = true,
        }
    }

    /// Whether the distance network itself differs from the unablated run.
    pub fn touches_distance(&self) -> bool {
        self.no_augmentations || self.no_revin || self.no_sparsemax
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Master seed; every stage seed is derived from it.
    pub seed: u64,
    pub window_len: usize,
    /// Hop between candidate windows for distance training.
    pub pretrain_stride: usize,
    pub data: DataSource,
    pub augment: AugmentationPipeline,
    pub distance: DistanceNetConfig,
    pub distance_train: DistanceTrainConfig,
    pub encoder: EncoderConfig,
    pub encoder_train: EncoderTrainConfig,
    pub sampler: SamplerConfig,
    pub loss: LossConfig,
    pub eval: EvalConfig,
    pub checkpoints: CheckpointPaths,
    pub ablation: AblationFlags,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl RunConfig {
    /// Laptop-scale preset.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            window_len: 64,
            pretrain_stride: 1,
            data: DataSource::default(),
            augment: AugmentationPipeline::default(),
            distance: DistanceNetConfig::desk(),
            distance_train: DistanceTrainConfig::default(),
            encoder: EncoderConfig::desk(),
            encoder_train: EncoderTrainConfig::default(),
            sampler: SamplerConfig::default(),
            loss: LossConfig::default(),
            eval: EvalConfig::default(),
            checkpoints: CheckpointPaths::default(),
            ablation: AblationFlags::default(),
        }
    }

    /// Full-size architecture and schedule.
    pub fn full_scale() -> Self {
        let mut cfg = Self::desk();
        cfg.window_len = 256;
        cfg.distance = DistanceNetConfig::full_scale();
        cfg.distance_train.batch_size = 64;
        cfg.encoder = EncoderConfig::full_scale();
        cfg.encoder_train.steps = 100_000;
        cfg.encoder_train.batch_size = 64;
        cfg.sampler.candidate_count = 20;
        cfg.sampler.within_user_count = 10;
        cfg
    }

    pub fn from_json_file(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Applies ablation flags and derives stage seeds from the master seed.
    pub fn effective(&self) -> RunConfig {
        let mut cfg = self.clone();
        let s = cfg.seed;
        cfg.distance_train.seed = s;
        cfg.encoder_train.seed = s.wrapping_add(1);
        cfg.sampler.rng_seed = s.wrapping_add(2);
        cfg.eval.classifier.seed = s.wrapping_add(3);
        cfg.eval.finetune.seed = s.wrapping_add(4);
        cfg.augment.rng_seed = s.wrapping_add(5);
        let flags = &cfg.ablation;
        if flags.no_augmentations {
            cfg.augment = AugmentationPipeline::identity().with_seed(cfg.augment.rng_seed);
        }
        if flags.no_revin {
            cfg.distance.revin = false;
        }
        if flags.no_sparsemax {
            cfg.distance.normalizer = AttentionNormalizer::Softmax;
        }
        if flags.no_within_subject {
            cfg.sampler.within_user_count = 0;
            cfg.sampler.include_augmented_self = true;
            cfg.sampler.augment_between = true;
        }
        if let Some(v) = flags.loss_variant {
            cfg.loss.variant = v;
        }
        cfg
    }

    /// Checks every stage config and referenced path.
    pub fn validate(&self) -> Result<()> {
        self.data.synthetic.validate()?;
        if let Some(p) = &self.data.path {
            if !p.is_dir() {
                return Err(Error::Config(format!("dataset directory {} does not exist", p.display())));
            }
        }
        for (name, p) in [("distance", &self.checkpoints.distance), ("encoder", &self.checkpoints.encoder)] {
            if let Some(p) = p {
                if !p.is_file() {
                    return Err(Error::Config(format!("{name} checkpoint {} does not exist", p.display())));
                }
            }
        }
        if self.window_len < 2 || self.pretrain_stride == 0 || self.eval.window_stride == 0 {
            return Err(Error::Config("window_len must be >= 2 and strides positive".into()));
        }
        if self.window_len < self.encoder.min_len() {
            return Err(Error::Config(format!(
                "window_len {} is shorter than the encoder's total stride {}",
                self.window_len,
                self.encoder.min_len()
            )));
        }
        if self.encoder_train.batch_size == 0 || !(self.encoder_train.lr > 0.0) {
            return Err(Error::Config("encoder training needs batch_size > 0 and lr > 0".into()));
        }
        if self.eval.repeats == 0 {
            return Err(Error::Config("eval.repeats must be positive".into()));
        }
        self.augment.validate()?;
        self.distance.validate()?;
        self.encoder.validate()?;
        self.sampler.validate()?;
        self.loss.validate()
    }
}

// ----- data ----------------------------------------------------------------

/// Loads or generates the configured dataset with its participant split.
pub fn load_data(cfg: &RunConfig) -> Result<(Dataset, SplitManifest)> {
    match &cfg.data.path {
        Some(root) => {
            let loaded = load_csv_dataset(root, cfg.window_len)?;
            for w in &loaded.report.warnings {
                log::warn!("{w}");
            }
            let split = if loaded.split.is_empty() {
                split_by_user(&loaded.dataset.users(), cfg.data.split_ratios, cfg.data.split_seed)?
            } else {
                loaded.split
            };
            Ok((loaded.dataset, split))
        }
        None => generate_synthetic(&cfg.data.synthetic),
    }
}

fn split_part(dataset: &Dataset, split: &SplitManifest, part: Split) -> Result<Dataset> {
    let users = split.users(part);
    if users.is_empty() {
        return Err(Error::Data(format!("no users assigned to the {part:?} split")));
    }
    Ok(dataset.restrict(&users))
}

// ----- encoder pre-training ---------------------------------------------------

#[derive(Debug, Clone)]
pub struct EncoderTraining {
    pub encoder: Encoder,
    pub losses: Vec<f64>,
}

/// Pre-trains an encoder against a frozen distance network.
///
/// Each step draws anchors, samples and scores their candidate sets, encodes
/// every window once on the tape and averages the per-anchor loss.
pub fn train_encoder(dataset: &Dataset, distance: &FrozenDistance, cfg: &RunConfig) -> Result<EncoderTraining> {
    let train = &cfg.encoder_train;
    let pool = WindowPool::new(dataset, cfg.window_len)?;
    let mut encoder = Encoder::new(cfg.encoder.clone(), train.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.sampler.rng_seed);
    let mut stream = AnchorStream::new();
    let between = cfg.sampler.between_user_count();
    let mut adam = Adam::new(train.lr);
    let mut losses = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let batch = stream.next_mixed_batch(&pool, train.batch_size, between, &mut rng)?;
        let mut sets = sample_batch(&batch, &pool, &cfg.sampler, &cfg.augment, &mut rng)?;
        score_candidates(&mut sets, distance)?;

        // Unaugmented between-user candidates are batch members: reuse their rows.
        let mut batch_row: BTreeMap<WindowId, usize> = BTreeMap::new();
        for (i, w) in batch.iter().enumerate() {
            batch_row.entry(w.id()).or_insert(i);
        }
        let mut rows: Vec<&Window> = batch.iter().collect();
        let mut cand_rows = Vec::with_capacity(sets.len());
        for set in &sets {
            let mut idx = Vec::with_capacity(set.candidates.len());
            for c in &set.candidates {
                let shared = (c.source == CandidateSource::BetweenUser && !c.id.augmented)
                    .then(|| batch_row.get(&c.id.window).copied())
                    .flatten();
                idx.push(shared.unwrap_or_else(|| {
                    rows.push(&c.window);
                    rows.len() - 1
                }));
            }
            cand_rows.push(idx);
        }

        let mut tape = Tape::new();
        let bound = encoder.params().bind(&mut tape, true);
        let x = tape.constant(batch_tensor(rows)?);
        let emb = encoder.forward(&mut tape, &bound, x)?;
        let d = encoder.embed_dim();
        let mut per_anchor: Vec<Var> = Vec::with_capacity(sets.len());
        for (i, (set, idx)) in sets.iter().zip(&cand_rows).enumerate() {
            let a = tape.index_select(emb, &[i])?;
            let a = tape.reshape(a, &[d])?;
            let c = tape.index_select(emb, idx)?;
            per_anchor.push(anchor_loss(&mut tape, a, c, &set.distances()?, &cfg.loss)?);
        }
        let stacked = tape.concat(&per_anchor)?;
        let loss = tape.mean_all(stacked)?;
        let value = tape.scalar(loss)?;
        let diverged = |detail: String| Error::Diverged {
            stage: "encoder training",
            step,
            detail,
        };
        if !value.is_finite() {
            return Err(diverged(format!("loss {value}")));
        }
        tape.backward(loss)?;
        let grads = encoder.params().collect_grads(&tape, &bound);
        adam.step(encoder.params_mut().tensors_mut(), &grads).map_err(|e| match e {
            Error::NonFinite(detail) => diverged(detail),
            other => other,
        })?;
        if train.log_every > 0 && step % train.log_every == 0 {
            log::info!("encoder step {step}: loss {value:.5}");
        }
        losses.push(value);
    }
    Ok(EncoderTraining { encoder, losses })
}

// ----- distance sanity check ------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct InvarianceCheck {
    pub rotated: Vec<f64>,
    pub other_class: Vec<f64>,
}

fn median(v: &[f64]) -> f64 {
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let n = s.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        s[n / 2]
    } else {
        (s[n / 2 - 1] + s[n / 2]) / 2.0
    }
}

impl InvarianceCheck {
    /// Fraction of triplets where the rotated copy is closer than the other-class window.
    pub fn win_rate(&self) -> f64 {
        let wins = self.rotated.iter().zip(&self.other_class).filter(|(r, o)| r < o).count();
        wins as f64 / self.rotated.len().max(1) as f64
    }

    pub fn report(&self) -> MetricsReport {
        let mut r = MetricsReport::default();
        r.scalars.insert("invariance.win_rate".into(), self.win_rate());
        r.scalars.insert("invariance.median_rotated".into(), median(&self.rotated));
        r.scalars.insert("invariance.median_other_class".into(), median(&self.other_class));
        r
    }
}

/// Compares d(X, rot X) against d(X, Y) for Y of a different class over
/// `n` random triplets with uniformly random 3D rotations.
pub fn invariance_check(distance: &FrozenDistance, windows: &[Window], n: usize, seed: u64) -> Result<InvarianceCheck> {
    let labeled: Vec<&Window> = windows.iter().filter(|w| w.class.is_some()).collect();
    if labeled.iter().map(|w| w.class).collect::<BTreeSet<_>>().len() < 2 {
        return Err(Error::Data("invariance check needs labeled windows from two classes".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut anchors, mut rotated, mut others) = (Vec::new(), Vec::new(), Vec::new());
    while anchors.len() < n {
        let x = labeled[rng.random_range(0..labeled.len())];
        let y = labeled[rng.random_range(0..labeled.len())];
        if y.class == x.class {
            continue;
        }
        let axis = random_unit_axis(&mut rng);
        let angle = rng.random_range(0.0..TAU);
        rotated.push(rotation3d(x, axis, angle)?);
        anchors.push(x);
        others.push(y);
    }
    let rot_refs: Vec<&Window> = rotated.iter().collect();
    Ok(InvarianceCheck {
        rotated: distance.distances(&anchors, &rot_refs)?,
        other_class: distance.distances(&anchors, &others)?,
    })
}

// ----- evaluation -----------------------------------------------------------

struct EvalSplit {
    train: Vec<Window>,
    test: Vec<Window>,
    workout: Vec<Window>,
    n_classes: usize,
    targets: Vec<String>,
}

fn eval_split(dataset: &Dataset, split: &SplitManifest, cfg: &RunConfig) -> Result<EvalSplit> {
    let train = split_part(dataset, split, Split::Train)?;
    let test = split_part(dataset, split, Split::Test)?;
    Ok(EvalSplit {
        train: train.windows(cfg.window_len, cfg.eval.window_stride)?,
        test: test.windows(cfg.window_len, cfg.eval.window_stride)?,
        workout: test.windows(cfg.window_len, cfg.window_len)?,
        n_classes: dataset.label_names.len(),
        targets: dataset.target_names(),
    })
}

fn labeled(windows: &[Window]) -> (Vec<usize>, Vec<usize>) {
    windows
        .iter()
        .enumerate()
        .filter_map(|(i, w)| w.class.map(|c| (i, c)))
        .unzip()
}

fn pick<T: Clone>(v: &[T], idx: &[usize]) -> Vec<T> {
    idx.iter().map(|&i| v[i].clone()).collect()
}

/// Window- and workout-level classification metrics from class probabilities.
fn classification_reports(
    test: &[Window],
    test_proba: &[Vec<f64>],
    workout: &[Window],
    workout_proba: &[Vec<f64>],
    n_classes: usize,
) -> Result<MetricsReport> {
    let mut out = MetricsReport::default();
    let (idx, labels) = labeled(test);
    let proba = pick(test_proba, &idx);
    let preds: Vec<usize> = proba.iter().map(|p| argmax(p)).collect();
    let window = classification_metrics(&preds, &proba, &labels, n_classes)?;
    out.absorb("window", &window);
    out.per_class = window.per_class;

    // One vote per recording over non-overlapping windows; the recording's
    // label and score are the modal window label and the mean probability.
    let mut votes = Vec::new();
    let mut truth = Vec::new();
    let mut mean_proba: BTreeMap<&str, (Vec<f64>, usize)> = BTreeMap::new();
    for (w, p) in workout.iter().zip(workout_proba) {
        if let Some(c) = w.class {
            votes.push((w.recording_id.as_str(), argmax(p)));
            truth.push((w.recording_id.as_str(), c));
            let e = mean_proba.entry(w.recording_id.as_str()).or_insert((vec![0.0; n_classes], 0));
            e.0.iter_mut().zip(p).for_each(|(a, b)| *a += b);
            e.1 += 1;
        }
    }
    let voted = vote_by_group(&votes)?;
    let truth = vote_by_group(&truth)?;
    let scores: Vec<Vec<f64>> = mean_proba.values().map(|(s, n)| s.iter().map(|v| v / *n as f64).collect()).collect();
    let workout = classification_metrics(
        &voted.values().copied().collect::<Vec<_>>(),
        &scores,
        &truth.values().copied().collect::<Vec<_>>(),
        n_classes,
    )?;
    out.absorb("workout", &workout);
    Ok(out)
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

/// Frozen-embedding probes on held-out users, each repeated `eval.repeats`
/// times with distinct seeds and summarized as `<metric>_mean` / `_std`.
pub fn probe_encoder(encoder: &Encoder, dataset: &Dataset, split: &SplitManifest, cfg: &RunConfig) -> Result<MetricsReport> {
    let data = eval_split(dataset, split, cfg)?;
    let train_emb = tensor_rows(&encoder.encode_batch(&data.train)?);
    let test_emb = tensor_rows(&encoder.encode_batch(&data.test)?);
    let workout_emb = tensor_rows(&encoder.encode_batch(&data.workout)?);
    let mut runs = Vec::with_capacity(cfg.eval.repeats);
    let mut per_class = Vec::new();
    let mut per_user = Vec::new();
    for rep in 0..cfg.eval.repeats {
        let mut run = MetricsReport::default();
        for &kind in &cfg.eval.kinds {
            match kind {
                ProbeKind::LinearReg => {
                    for name in &data.targets {
                        let (tr_idx, tr_y) = target_rows(&data.train, name);
                        let (te_idx, te_y) = target_rows(&data.test, name);
                        if tr_idx.is_empty() || te_idx.is_empty() {
                            run.warnings.push(format!("target {name} missing from a split; skipped"));
                            continue;
                        }
                        let model = fit_linear_regression(&pick(&train_emb, &tr_idx), &tr_y, cfg.eval.ridge_lambda)?;
                        let preds = model.predict(&pick(&test_emb, &te_idx));
                        let users: Vec<String> = te_idx.iter().map(|&i| data.test[i].user_id.clone()).collect();
                        let r = regression_metrics(&preds, &te_y, &users)?;
                        run.absorb(&format!("linear_reg.{name}"), &r);
                        if rep == 0 && per_user.is_empty() {
                            per_user = r.per_user;
                        }
                    }
                }
                ProbeKind::LinearClf | ProbeKind::MlpClf => {
                    let (idx, labels) = labeled(&data.train);
                    let clf_cfg = ClassifierConfig {
                        kind,
                        seed: cfg.eval.classifier.seed.wrapping_add(rep as u64),
                        ..cfg.eval.classifier.clone()
                    };
                    let probe = fit_classifier(&pick(&train_emb, &idx), &labels, data.n_classes, &clf_cfg)?;
                    let r = classification_reports(
                        &data.test,
                        &probe.predict_proba(&test_emb)?,
                        &data.workout,
                        &probe.predict_proba(&workout_emb)?,
                        data.n_classes,
                    )?;
                    let prefix = if kind == ProbeKind::LinearClf { "linear_clf" } else { "mlp_clf" };
                    run.absorb(prefix, &r);
                    if rep == 0 && kind == ProbeKind::LinearClf {
                        per_class = r.per_class;
                    }
                }
                ProbeKind::Finetune => {
                    return Err(Error::Config("fine-tuning is its own stage; drop it from eval.kinds".into()));
                }
            }
        }
        runs.push(run);
    }
    let mut report = summarize_repeats(&runs);
    report.per_class = per_class;
    report.per_user = per_user;
    Ok(report)
}

fn target_rows(windows: &[Window], name: &str) -> (Vec<usize>, Vec<f64>) {
    windows
        .iter()
        .enumerate()
        .filter_map(|(i, w)| w.targets.get(name).map(|&y| (i, y)))
        .unzip()
}

/// Fine-tunes encoder and linear head on the training users and evaluates
/// on the held-out users.
pub fn finetune_encoder(
    encoder: &Encoder,
    dataset: &Dataset,
    split: &SplitManifest,
    cfg: &RunConfig,
) -> Result<(crate::evalkit::Finetuned, MetricsReport)> {
    let data = eval_split(dataset, split, cfg)?;
    let (idx, labels) = labeled(&data.train);
    let tuned = finetune(encoder, &pick(&data.train, &idx), &labels, data.n_classes, &cfg.eval.finetune)?;
    let r = classification_reports(
        &data.test,
        &tuned.predict_proba(&data.test)?,
        &data.workout,
        &tuned.predict_proba(&data.workout)?,
        data.n_classes,
    )?;
    let mut report = MetricsReport::default();
    report.absorb("finetune", &r);
    report.per_class = r.per_class;
    Ok((tuned, report))
}

// ----- report -----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub run: String,
    pub values: Vec<Option<f64>>,
    /// `(value − baseline) / |baseline| · 100`.
    pub deltas_pct: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub baseline: String,
    pub metrics: Vec<String>,
    pub rows: Vec<ReportRow>,
}

/// Joins runs into one table with percentage deltas against `baseline`.
pub fn build_report(runs: &[(String, MetricsReport)], baseline: &str) -> Result<ReportTable> {
    let base = runs
        .iter()
        .find(|(n, _)| n == baseline)
        .map(|(_, r)| r)
        .ok_or_else(|| Error::Config(format!("baseline run {baseline:?} is not among the reported runs")))?;
    let metrics: Vec<String> = runs
        .iter()
        .flat_map(|(_, r)| r.scalars.keys().cloned())
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let rows = runs
        .iter()
        .map(|(name, r)| {
            let values: Vec<Option<f64>> = metrics.iter().map(|m| r.get(m)).collect();
            let deltas_pct = metrics
                .iter()
                .zip(&values)
                .map(|(m, v)| match (v, base.get(m)) {
                    (Some(v), Some(b)) if b != 0.0 => Some((v - b) / b.abs() * 100.0),
                    (Some(v), Some(b)) if *v == b => Some(0.0),
                    _ => None,
                })
                .collect();
            ReportRow {
                run: name.clone(),
                values,
                deltas_pct,
            }
        })
        .collect();
    Ok(ReportTable {
        baseline: baseline.to_string(),
        metrics,
        rows,
    })
}

impl ReportTable {
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header = vec!["run".to_string()];
        for m in &self.metrics {
            header.push(m.clone());
            header.push(format!("{m}_delta_pct"));
        }
        w.write_record(&header)?;
        let cell = |v: &Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for row in &self.rows {
            let mut rec = vec![row.run.clone()];
            for (v, d) in row.values.iter().zip(&row.deltas_pct) {
                rec.push(cell(v));
                rec.push(cell(d));
            }
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

// ----- artifacts ----------------------------------------------------------------

/// Per-stage provenance; timings live here so metrics stay reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub stage: String,
    pub revision: String,
    pub config: RunConfig,
    pub checkpoints: BTreeMap<String, PathBuf>,
    pub metrics: Option<PathBuf>,
    pub seconds: f64,
}

impl RunRecord {
    /// Writes `run_record.<stage>[.N].json`, never overwriting an earlier record.
    pub fn write(&self, out: &Path) -> Result<PathBuf> {
        let mut path = out.join(format!("run_record.{}.json", self.stage));
        let mut n = 1;
        while path.exists() {
            path = out.join(format!("run_record.{}.{n}.json", self.stage));
            n += 1;
        }
        write_json(&path, self)?;
        Ok(path)
    }
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn write_losses(path: &Path, losses: &[f64]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["step", "loss"])?;
    for (i, l) in losses.iter().enumerate() {
        w.write_record([i.to_string(), l.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Mean loss over the first and last tenth of training.
pub fn loss_deciles(losses: &[f64]) -> (f64, f64) {
    let k = (losses.len() / 10).max(1).min(losses.len().max(1));
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    (mean(&losses[..k.min(losses.len())]), mean(&losses[losses.len().saturating_sub(k)..]))
}

struct Stage<'a> {
    name: &'static str,
    cfg: RunConfig,
    out: &'a Path,
    started: Instant,
    checkpoints: BTreeMap<String, PathBuf>,
}

impl<'a> Stage<'a> {
    fn begin(name: &'static str, cfg: &RunConfig, out: &'a Path) -> Result<Self> {
        let cfg = cfg.effective();
        cfg.validate()?;
        fs::create_dir_all(out)?;
        write_json(&out.join(EFFECTIVE_CONFIG), &cfg)?;
        log::info!("{name}: writing to {}", out.display());
        Ok(Self {
            name,
            cfg,
            out,
            started: Instant::now(),
            checkpoints: BTreeMap::new(),
        })
    }

    fn finish(self, metrics: Option<&MetricsReport>) -> Result<PathBuf> {
        let metrics_path = match metrics {
            Some(m) => {
                let p = self.out.join(METRICS_JSON);
                write_json(&p, m)?;
                Some(p)
            }
            None => None,
        };
        RunRecord {
            stage: self.name.to_string(),
            revision: format!("relcon-core {}", env!("CARGO_PKG_VERSION")),
            config: self.cfg,
            checkpoints: self.checkpoints,
            metrics: metrics_path,
            seconds: self.started.elapsed().as_secs_f64(),
        }
        .write(self.out)
    }
}

fn required(path: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    path.clone()
        .ok_or_else(|| Error::Config(format!("a {what} checkpoint is required (set checkpoints.{what} or pass --{what})")))
}

/// Writes the synthetic dataset (CSV files plus manifest) to `out`.
pub fn cmd_gen_synth(cfg: &RunConfig, out: &Path) -> Result<()> {
    let stage = Stage::begin("gen-synth", cfg, out)?;
    let (dataset, split) = generate_synthetic(&stage.cfg.data.synthetic)?;
    write_csv_dataset(out, &dataset, Some(&split))?;
    stage.finish(None)?;
    Ok(())
}

pub fn cmd_train_distance(cfg: &RunConfig, out: &Path) -> Result<MetricsReport> {
    let mut stage = Stage::begin("train-distance", cfg, out)?;
    let c = &stage.cfg;
    let (dataset, split) = load_data(c)?;
    let windows = split_part(&dataset, &split, Split::Train)?.windows(c.window_len, c.pretrain_stride)?;
    let trained = train_distance(&windows, &c.augment, &c.distance, &c.distance_train)?;
    let ckpt = out.join(DISTANCE_CKPT);
    trained.model.net().save(&ckpt)?;
    write_losses(&out.join(LOSS_CSV), &trained.losses)?;
    let eval_windows = split_part(&dataset, &split, Split::Test)?.windows(c.window_len, c.eval.window_stride)?;
    let mut report = invariance_check(&trained.model, &eval_windows, c.eval.invariance_triplets, c.seed)?.report();
    let (first, last) = loss_deciles(&trained.losses);
    report.scalars.insert("loss.first_decile".into(), first);
    report.scalars.insert("loss.last_decile".into(), last);
    stage.checkpoints.insert("distance".into(), ckpt);
    stage.finish(Some(&report))?;
    Ok(report)
}

pub fn cmd_train_encoder(cfg: &RunConfig, out: &Path) -> Result<MetricsReport> {
    let mut stage = Stage::begin("train-encoder", cfg, out)?;
    let c = &stage.cfg;
    let dist_path = required(&c.checkpoints.distance, "distance")?;
    let distance = FrozenDistance::load(&dist_path)?;
    let (dataset, split) = load_data(c)?;
    let trained = train_encoder(&split_part(&dataset, &split, Split::Train)?, &distance, c)?;
    let ckpt = out.join(ENCODER_CKPT);
    trained.encoder.save(&ckpt)?;
    write_losses(&out.join(LOSS_CSV), &trained.losses)?;
    let (first, last) = loss_deciles(&trained.losses);
    let mut report = MetricsReport::default();
    report.scalars.insert("loss.first_decile".into(), first);
    report.scalars.insert("loss.last_decile".into(), last);
    stage.checkpoints.insert("distance".into(), dist_path);
    stage.checkpoints.insert("encoder".into(), ckpt);
    stage.finish(Some(&report))?;
    Ok(report)
}

/// Writes one embedding row per evaluation window of every user.
pub fn cmd_embed(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let mut stage = Stage::begin("embed", cfg, out)?;
    let c = &stage.cfg;
    let enc_path = required(&c.checkpoints.encoder, "encoder")?;
    let encoder = Encoder::load(&enc_path)?;
    let (dataset, _) = load_data(c)?;
    let windows = dataset.windows(c.window_len, c.eval.window_stride)?;
    let emb = encoder.encode_batch(&windows)?;
    let path = out.join(EMBEDDINGS_CSV);
    let mut w = csv::Writer::from_path(&path)?;
    let mut header = vec!["window_id".to_string()];
    header.extend((0..encoder.embed_dim()).map(|i| format!("e{i}")));
    w.write_record(&header)?;
    for (win, row) in windows.iter().zip(tensor_rows(&emb)) {
        let mut rec = vec![win.id().to_string()];
        rec.extend(row.iter().map(|v| v.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    stage.checkpoints.insert("encoder".into(), enc_path);
    stage.finish(None)?;
    Ok(path)
}

pub fn cmd_probe(cfg: &RunConfig, out: &Path) -> Result<MetricsReport> {
    let mut stage = Stage::begin("probe", cfg, out)?;
    let c = &stage.cfg;
    let enc_path = required(&c.checkpoints.encoder, "encoder")?;
    let encoder = Encoder::load(&enc_path)?;
    let (dataset, split) = load_data(c)?;
    let report = probe_encoder(&encoder, &dataset, &split, c)?;
    stage.checkpoints.insert("encoder".into(), enc_path);
    stage.finish(Some(&report))?;
    Ok(report)
}

pub fn cmd_finetune(cfg: &RunConfig, out: &Path) -> Result<MetricsReport> {
    let mut stage = Stage::begin("finetune", cfg, out)?;
    let c = &stage.cfg;
    let enc_path = required(&c.checkpoints.encoder, "encoder")?;
    let encoder = Encoder::load(&enc_path)?;
    let (dataset, split) = load_data(c)?;
    let (tuned, report) = finetune_encoder(&encoder, &dataset, &split, c)?;
    let ckpt = out.join(FINETUNED_CKPT);
    tuned.encoder.save(&ckpt)?;
    write_losses(&out.join(LOSS_CSV), &tuned.losses)?;
    stage.checkpoints.insert("encoder".into(), enc_path);
    stage.checkpoints.insert("finetuned".into(), ckpt);
    stage.finish(Some(&report))?;
    Ok(report)
}

/// Reads `metrics.json` from each run directory (named by its last path
/// component) and writes `report.csv` to `out`.
pub fn cmd_report(runs: &[PathBuf], baseline: Option<&str>, out: &Path) -> Result<ReportTable> {
    if runs.is_empty() {
        return Err(Error::Config("report needs at least one run directory".into()));
    }
    let mut loaded = Vec::with_capacity(runs.len());
    for dir in runs {
        let name = dir
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| dir.display().to_string());
        let path = dir.join(METRICS_JSON);
        let text = fs::read_to_string(&path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))?;
        let report: MetricsReport =
            serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        loaded.push((name, report));
    }
    let baseline = baseline.map(str::to_string).unwrap_or_else(|| loaded[0].0.clone());
    let table = build_report(&loaded, &baseline)?;
    fs::create_dir_all(out)?;
    table.write_csv(&out.join(REPORT_CSV))?;
    write_json(&out.join("report.json"), &table)?;
    Ok(table)
}

/// Distance training, encoder pre-training and frozen probes into
/// `out/{distance,encoder,probe}`. A distance checkpoint already set in the
/// config is reused instead of retraining.
pub fn run_pipeline(cfg: &RunConfig, out: &Path) -> Result<MetricsReport> {
    let mut cfg = cfg.clone();
    if cfg.checkpoints.distance.is_none() {
        cmd_train_distance(&cfg, &out.join("distance"))?;
        cfg.checkpoints.distance = Some(out.join("distance").join(DISTANCE_CKPT));
    }
    cmd_train_encoder(&cfg, &out.join("encoder"))?;
    cfg.checkpoints.encoder = Some(out.join("encoder").join(ENCODER_CKPT));
    let report = cmd_probe(&cfg, &out.join("probe"))?;
    fs::copy(out.join("probe").join(METRICS_JSON), out.join(METRICS_JSON))?;
    Ok(report)
}

/// The unablated run and its six single-change variants, in report order.
pub fn ablation_variants() -> Vec<(&'static str, AblationFlags)> {
    let flag = |a: Ablation| {
        let mut f = AblationFlags::default();
        f.set(a);
        f
    };
    let loss = |v: LossVariant| AblationFlags {
        loss_variant: Some(v),
        ..AblationFlags::default()
    };
    vec![
        ("full", AblationFlags::default()),
        ("no_augmentations", flag(Ablation::NoAugmentations)),
        ("no_revin", flag(Ablation::NoRevin)),
        ("no_sparsemax", flag(Ablation::NoSparsemax)),
        ("no_within_subject", flag(Ablation::NoWithinSubject)),
        ("log_ratio_loss", loss(LossVariant::LogRatio)),
        ("binary_loss", loss(LossVariant::Binary)),
    ]
}

/// Runs every ablation variant into `out/<variant>` and reports against
/// `full`. Variants that leave the distance network untouched reuse the
/// unablated distance checkpoint.
pub fn run_ablation_suite(cfg: &RunConfig, out: &Path) -> Result<ReportTable> {
    let mut dirs = Vec::new();
    let mut shared_distance: Option<PathBuf> = cfg.checkpoints.distance.clone();
    for (name, flags) in ablation_variants() {
        let mut variant = cfg.clone();
        variant.ablation = flags.clone();
        variant.checkpoints.distance = if flags.touches_distance() { None } else { shared_distance.clone() };
        let dir = out.join(name);
        log::info!("ablation {name}");
        run_pipeline(&variant, &dir)?;
        if name == "full" && shared_distance.is_none() {
            shared_distance = Some(dir.join("distance").join(DISTANCE_CKPT));
        }
        dirs.push(dir);
    }
    cmd_report(&dirs, Some("full"), out)
}
