//! Recordings, fixed-length windows, participant-level splits, CSV ingestion
//! and the synthetic multi-user generator.

mod csvio;
mod synth;

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndtensor::Tensor;

pub use csvio::{load_csv_dataset, write_csv_dataset, LoadReport, LoadedDataset};
pub use synth::{generate_synthetic, SyntheticGenerator, SyntheticSpec};

/// Identity of a window: its recording and start offset in samples.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct WindowId {
    pub recording_id: String,
    pub offset: usize,
}

impl std::fmt::Display for WindowId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}@{}", self.recording_id, self.offset)
    }
}

/// One `T×3` accelerometry subsequence with provenance and optional labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub user_id: String,
    pub recording_id: String,
    pub offset: usize,
    pub samples: Vec<[f64; 3]>,
    pub class: Option<usize>,
    pub targets: BTreeMap<String, f64>,
}

impl Window {
    pub fn new(user_id: impl Into<String>, recording_id: impl Into<String>, offset: usize, samples: Vec<[f64; 3]>) -> Self {
        Self {
            user_id: user_id.into(),
            recording_id: recording_id.into(),
            offset,
            samples,
            class: None,
            targets: BTreeMap::new(),
        }
    }

    /// Unlabelled window with placeholder provenance.
    pub fn from_samples(samples: Vec<[f64; 3]>) -> Self {
        Self::new("", "", 0, samples)
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn id(&self) -> WindowId {
        WindowId {
            recording_id: self.recording_id.clone(),
            offset: self.offset,
        }
    }

    /// Same provenance and labels, new samples.
    pub fn with_samples(&self, samples: Vec<[f64; 3]>) -> Self {
        Self {
            samples,
            ..self.clone()
        }
    }

    pub fn flat(&self) -> Vec<f64> {
        self.samples.iter().flatten().copied().collect()
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(vec![self.len(), 3], self.flat())
    }
}

/// Stacks equal-length windows into a `[B, T, 3]` tensor.
pub fn batch_tensor<'a>(windows: impl IntoIterator<Item = &'a Window>) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut count = 0;
    let mut len = None;
    for w in windows {
        match len {
            None => len = Some(w.len()),
            Some(t) if t != w.len() => {
                return Err(Error::shape("batch", format!("ragged batch: lengths {t} and {}", w.len())));
            }
            _ => {}
        }
        data.extend(w.samples.iter().flatten());
        count += 1;
    }
    let t = len.ok_or_else(|| Error::shape("batch", "empty batch"))?;
    Tensor::new(vec![count, t, 3], data)
}

/// A continuous stream of samples from one user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recording {
    pub user_id: String,
    pub recording_id: String,
    pub sample_rate_hz: f64,
    pub samples: Vec<[f64; 3]>,
    /// Per-sample class ids, when labelled.
    pub labels: Option<Vec<usize>>,
    /// Recording-level continuous targets.
    pub targets: BTreeMap<String, f64>,
}

impl Recording {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sample_rate_hz > 0.0) {
            return Err(Error::Data(format!("{}: sample rate must be positive", self.recording_id)));
        }
        if let Some(labels) = &self.labels {
            if labels.len() != self.samples.len() {
                return Err(Error::Data(format!(
                    "{}: {} labels for {} samples",
                    self.recording_id,
                    labels.len(),
                    self.samples.len()
                )));
            }
        }
        if self.samples.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::Data(format!("{}: non-finite sample", self.recording_id)));
        }
        Ok(())
    }

    /// Number of start offsets available for windows of length `t`.
    pub fn offsets(&self, t: usize) -> usize {
        if self.len() >= t {
            self.len() - t + 1
        } else {
            0
        }
    }

    /// The window starting at `offset`, labelled from this recording.
    pub fn window_at(&self, offset: usize, t: usize) -> Result<Window> {
        if offset + t > self.len() || t == 0 {
            return Err(Error::Data(format!(
                "{}: window [{offset}, {}) outside {} samples",
                self.recording_id,
                offset + t,
                self.len()
            )));
        }
        let mut w = Window::new(
            self.user_id.clone(),
            self.recording_id.clone(),
            offset,
            self.samples[offset..offset + t].to_vec(),
        );
        w.class = self.labels.as_ref().map(|l| majority_label(&l[offset..offset + t]));
        w.targets = self.targets.clone();
        Ok(w)
    }
}

/// Most frequent label; ties go to the smallest id.
fn majority_label(labels: &[usize]) -> usize {
    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for &l in labels {
        *counts.entry(l).or_default() += 1;
    }
    let best = counts.values().copied().max().unwrap_or(0);
    counts.into_iter().find(|&(_, c)| c == best).map(|(l, _)| l).unwrap_or(0)
}

/// Cuts a recording into windows at offsets `0, stride, 2·stride, …`.
pub fn window(recording: &Recording, t: usize, stride: usize) -> Result<Vec<Window>> {
    if stride == 0 {
        return Err(Error::Config("window stride must be positive".into()));
    }
    if t == 0 || t > recording.len() {
        return Err(Error::Data(format!(
            "{}: window length {t} exceeds recording length {}",
            recording.recording_id,
            recording.len()
        )));
    }
    (0..=(recording.len() - t) / stride)
        .map(|i| recording.window_at(i * stride, t))
        .collect()
}

/// A set of recordings sharing one sample rate and label vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub sample_rate_hz: f64,
    pub label_names: Vec<String>,
    pub recordings: Vec<Recording>,
}

impl Dataset {
    /// Distinct user ids in sorted order.
    pub fn users(&self) -> Vec<String> {
        self.recordings
            .iter()
            .map(|r| r.user_id.clone())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }

    /// Recordings belonging to the given users.
    pub fn restrict(&self, users: &BTreeSet<String>) -> Dataset {
        Dataset {
            sample_rate_hz: self.sample_rate_hz,
            label_names: self.label_names.clone(),
            recordings: self
                .recordings
                .iter()
                .filter(|r| users.contains(&r.user_id))
                .cloned()
                .collect(),
        }
    }

    /// Windows of every recording long enough for `t`.
    pub fn windows(&self, t: usize, stride: usize) -> Result<Vec<Window>> {
        let mut out = Vec::new();
        for r in self.recordings.iter().filter(|r| r.len() >= t) {
            out.extend(window(r, t, stride)?);
        }
        Ok(out)
    }

    pub fn target_names(&self) -> Vec<String> {
        self.recordings
            .iter()
            .flat_map(|r| r.targets.keys().cloned())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Participant-level split assignment.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct SplitManifest {
    pub assignments: BTreeMap<String, Split>,
}

impl SplitManifest {
    pub fn split_of(&self, user: &str) -> Option<Split> {
        self.assignments.get(user).copied()
    }

    pub fn users(&self, split: Split) -> BTreeSet<String> {
        self.assignments
            .iter()
            .filter(|(_, &s)| s == split)
            .map(|(u, _)| u.clone())
            .collect()
    }

    pub fn is_empty(&self) -> bool {
        self.assignments.is_empty()
    }
}

/// Random user-level split with `ratios = (train, val, test)`.
pub fn split_by_user(users: &[String], ratios: [f64; 3], seed: u64) -> Result<SplitManifest> {
    if ratios.iter().any(|&r| !(0.0..=1.0).contains(&r)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {ratios:?} must be in [0,1] and sum to 1")));
    }
    let mut order: Vec<String> = users.iter().cloned().collect::<BTreeSet<_>>().into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = order.len() as f64;
    let train_end = (ratios[0] * n).round() as usize;
    let val_end = ((ratios[0] + ratios[1]) * n).round() as usize;
    let assignments = order
        .into_iter()
        .enumerate()
        .map(|(i, u)| {
            let split = if i < train_end {
                Split::Train
            } else if i < val_end {
                Split::Val
            } else {
                Split::Test
            };
            (u, split)
        })
        .collect();
    Ok(SplitManifest { assignments })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn recording(n: usize, labels: Option<Vec<usize>>) -> Recording {
        Recording {
            user_id: "u0".into(),
            recording_id: "r0".into(),
            sample_rate_hz: 100.0,
            samples: (0..n).map(|i| [i as f64, 0.0, 1.0]).collect(),
            labels,
            targets: BTreeMap::from([("speed".to_string(), 1.5)]),
        }
    }

    #[test]
    fn window_counts() {
        let r = recording(8, None);
        assert_eq!(window(&r, 8, 3).unwrap().len(), 1);
        let r = recording(16, None);
        let ws = window(&r, 8, 8).unwrap();
        assert_eq!(ws.len(), 2);
        assert_eq!(ws[1].offset, 8);
        assert_eq!(ws[1].samples[0][0], 8.0);
        for (n, t, stride) in [(100, 10, 7), (64, 64, 1), (65, 16, 16)] {
            let r = recording(n, None);
            assert_eq!(window(&r, t, stride).unwrap().len(), (n - t) / stride + 1);
        }
        assert!(window(&r, 8, 0).is_err());
        assert!(window(&r, 200, 1).is_err());
    }

    #[test]
    fn batch_tensor_stacks_and_rejects_ragged() {
        let r = recording(10, None);
        let (a, b) = (r.window_at(0, 4).unwrap(), r.window_at(2, 4).unwrap());
        let t = batch_tensor([&a, &b]).unwrap();
        assert_eq!(t.shape(), &[2, 4, 3]);
        assert_eq!(t.at(&[1, 0, 0]), 2.0);
        let c = r.window_at(0, 5).unwrap();
        assert!(batch_tensor([&a, &c]).is_err());
        assert!(batch_tensor(std::iter::empty::<&Window>()).is_err());
    }

    #[test]
    fn window_labels() {
        let r = recording(6, Some(vec![2; 6]));
        let ws = window(&r, 3, 3).unwrap();
        assert!(ws.iter().all(|w| w.class == Some(2)));
        assert_eq!(ws[0].targets["speed"], 1.5);
        assert_eq!(majority_label(&[3, 1, 1, 3]), 1);
        assert_eq!(majority_label(&[4, 4, 0]), 4);
    }

    #[test]
    fn split_assigns_every_user_once() {
        let users: Vec<String> = (0..10).map(|i| format!("u{i}")).collect();
        let all_train = split_by_user(&users, [1.0, 0.0, 0.0], 3).unwrap();
        assert_eq!(all_train.users(Split::Train).len(), 10);

        let s = split_by_user(&users, [0.6, 0.2, 0.2], 3).unwrap();
        assert_eq!(s.assignments.len(), 10);
        let (tr, va, te) = (s.users(Split::Train), s.users(Split::Val), s.users(Split::Test));
        assert_eq!((tr.len(), va.len(), te.len()), (6, 2, 2));
        assert!(tr.is_disjoint(&te) && tr.is_disjoint(&va) && va.is_disjoint(&te));
        assert_eq!(s, split_by_user(&users, [0.6, 0.2, 0.2], 3).unwrap());
        assert!(split_by_user(&users, [0.6, 0.2, 0.3], 3).is_err());
    }
}
