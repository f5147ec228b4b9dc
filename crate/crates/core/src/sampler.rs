//! Candidate pools: windows of the anchor's own user drawn across time plus
//! windows of other users taken from the same batch, scored by the frozen
//! distance.

use std::collections::BTreeMap;

use rand::seq::{index, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentationPipeline;
use crate::dataio::{Dataset, Recording, Window, WindowId};
use crate::distnet::FrozenDistance;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CandidateSource {
    WithinUser,
    BetweenUser,
    /// An augmented copy of the anchor itself.
    AugmentedSelf,
}

/// A window identity plus whether the candidate is an augmented copy.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CandidateId {
    pub window: WindowId,
    pub augmented: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub candidate_count: usize,
    pub within_user_count: usize,
    /// Spend one between-user slot on an augmented copy of the anchor.
    pub include_augmented_self: bool,
    /// Augment between-user candidates before scoring.
    pub augment_between: bool,
    pub rng_seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            candidate_count: 8,
            within_user_count: 4,
            include_augmented_self: false,
            augment_between: false,
            rng_seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.candidate_count == 0 {
            return Err(Error::Config("candidate_count must be positive".into()));
        }
        if self.within_user_count + usize::from(self.include_augmented_self) > self.candidate_count {
            return Err(Error::Config(format!(
                "within_user_count {} (plus augmented self) exceeds candidate_count {}",
                self.within_user_count, self.candidate_count
            )));
        }
        Ok(())
    }

    pub fn between_user_count(&self) -> usize {
        self.candidate_count - self.within_user_count - usize::from(self.include_augmented_self)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub id: CandidateId,
    pub user_id: String,
    pub source: CandidateSource,
    pub window: Window,
    /// Filled by [`score_candidates`].
    pub dist_to_anchor: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateSet {
    pub anchor: Window,
    pub candidates: Vec<Candidate>,
}

impl CandidateSet {
    pub fn count(&self, source: CandidateSource) -> usize {
        self.candidates.iter().filter(|c| c.source == source).count()
    }

    /// Frozen distances in candidate order; errors if any is unscored.
    pub fn distances(&self) -> Result<Vec<f64>> {
        self.candidates
            .iter()
            .map(|c| {
                c.dist_to_anchor
                    .ok_or_else(|| Error::Data(format!("candidate {} has not been scored", c.id.window)))
            })
            .collect()
    }
}

/// Every window position of every user, addressable by a flat index.
#[derive(Debug, Clone)]
pub struct WindowPool {
    window_len: usize,
    recordings: Vec<Recording>,
    /// Per user: (recording index, first flat position) in order.
    users: BTreeMap<String, Vec<(usize, usize)>>,
    user_sizes: BTreeMap<String, usize>,
    /// Global flat index → (recording index, offset).
    global: Vec<(usize, usize)>,
}

impl WindowPool {
    pub fn new(dataset: &Dataset, window_len: usize) -> Result<Self> {
        if window_len == 0 {
            return Err(Error::Config("window length must be positive".into()));
        }
        let recordings: Vec<Recording> = dataset.recordings.iter().filter(|r| r.len() >= window_len).cloned().collect();
        if recordings.is_empty() {
            return Err(Error::Data(format!("no recording holds a window of length {window_len}")));
        }
        let mut users: BTreeMap<String, Vec<(usize, usize)>> = BTreeMap::new();
        let mut user_sizes: BTreeMap<String, usize> = BTreeMap::new();
        let mut global = Vec::new();
        for (i, r) in recordings.iter().enumerate() {
            let size = user_sizes.entry(r.user_id.clone()).or_default();
            users.entry(r.user_id.clone()).or_default().push((i, *size));
            *size += r.offsets(window_len);
            global.extend((0..r.offsets(window_len)).map(|o| (i, o)));
        }
        Ok(Self {
            window_len,
            recordings,
            users,
            user_sizes,
            global,
        })
    }

    pub fn window_len(&self) -> usize {
        self.window_len
    }

    pub fn len(&self) -> usize {
        self.global.len()
    }

    pub fn is_empty(&self) -> bool {
        self.global.is_empty()
    }

    pub fn users(&self) -> impl Iterator<Item = &str> {
        self.users.keys().map(String::as_str)
    }

    pub fn user_size(&self, user: &str) -> usize {
        self.user_sizes.get(user).copied().unwrap_or(0)
    }

    pub fn window(&self, flat: usize) -> Result<Window> {
        let &(r, o) = self
            .global
            .get(flat)
            .ok_or_else(|| Error::Data(format!("window index {flat} out of range")))?;
        self.recordings[r].window_at(o, self.window_len)
    }

    fn user_window(&self, user: &str, pos: usize) -> Result<Window> {
        let recs = &self.users[user];
        let k = recs.partition_point(|&(_, start)| start <= pos) - 1;
        let (r, start) = recs[k];
        self.recordings[r].window_at(pos - start, self.window_len)
    }

    /// Flat position of a window within its user's positions, if it belongs to the pool.
    fn user_position(&self, w: &Window) -> Option<usize> {
        self.users.get(&w.user_id)?.iter().find_map(|&(r, start)| {
            let rec = &self.recordings[r];
            (rec.recording_id == w.recording_id && w.offset < rec.offsets(self.window_len)).then_some(start + w.offset)
        })
    }
}

/// Anchors drawn uniformly without replacement, reshuffled each epoch.
#[derive(Debug, Clone, Default)]
pub struct AnchorStream {
    order: Vec<usize>,
    next: usize,
}

impl AnchorStream {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn next_batch<R: Rng + ?Sized>(&mut self, pool: &WindowPool, batch: usize, rng: &mut R) -> Result<Vec<Window>> {
        if batch > pool.len() {
            return Err(Error::Config(format!("batch {batch} exceeds {} available windows", pool.len())));
        }
        let mut out = Vec::with_capacity(batch);
        while out.len() < batch {
            if self.next >= self.order.len() {
                self.order = (0..pool.len()).collect();
                self.order.shuffle(rng);
                self.next = 0;
            }
            out.push(pool.window(self.order[self.next])?);
            self.next += 1;
        }
        Ok(out)
    }

    /// Like `next_batch`, but redraws (up to `MAX_REDRAWS` times) until every
    /// anchor has at least `between` batch-mates from other users.
    pub fn next_mixed_batch<R: Rng + ?Sized>(
        &mut self,
        pool: &WindowPool,
        batch: usize,
        between: usize,
        rng: &mut R,
    ) -> Result<Vec<Window>> {
        const MAX_REDRAWS: usize = 64;
        for _ in 0..MAX_REDRAWS {
            let out = self.next_batch(pool, batch, rng)?;
            if min_other_user_count(&out) >= between {
                return Ok(out);
            }
        }
        Err(Error::Data(format!(
            "no batch of {batch} gave every anchor {between} windows from other users after {MAX_REDRAWS} draws"
        )))
    }
}

/// Smallest number of batch-mates from a different user, over all anchors.
pub fn min_other_user_count(batch: &[Window]) -> usize {
    let mut per_user: BTreeMap<&str, usize> = BTreeMap::new();
    for w in batch {
        *per_user.entry(w.user_id.as_str()).or_default() += 1;
    }
    per_user.values().map(|&n| batch.len() - n).min().unwrap_or(0)
}

/// Builds the candidate pool for `batch[anchor]`.
pub fn sample_candidates<R: Rng + ?Sized>(
    anchor: usize,
    batch: &[Window],
    pool: &WindowPool,
    config: &SamplerConfig,
    pipeline: &AugmentationPipeline,
    rng: &mut R,
) -> Result<CandidateSet> {
    config.validate()?;
    let anc = batch
        .get(anchor)
        .ok_or_else(|| Error::Data(format!("anchor {anchor} outside batch of {}", batch.len())))?;
    let user = anc.user_id.as_str();
    let mut candidates = Vec::with_capacity(config.candidate_count);

    let c = config.within_user_count;
    if c > 0 {
        let size = pool.user_size(user);
        let own = pool.user_position(anc);
        let available = size - usize::from(own.is_some());
        if available < c {
            return Err(Error::Data(format!(
                "user {user} has {available} other windows, {c} within-user candidates requested"
            )));
        }
        for k in index::sample(rng, available, c) {
            // Skip over the anchor's own position.
            let pos = match own {
                Some(p) if k >= p => k + 1,
                _ => k,
            };
            let w = pool.user_window(user, pos)?;
            candidates.push(Candidate {
                id: CandidateId {
                    window: w.id(),
                    augmented: false,
                },
                user_id: user.to_string(),
                source: CandidateSource::WithinUser,
                window: w,
                dist_to_anchor: None,
            });
        }
    }

    let between = config.between_user_count();
    if between > 0 {
        let others: Vec<usize> = (0..batch.len()).filter(|&j| batch[j].user_id != anc.user_id).collect();
        if others.len() < between {
            return Err(Error::Data(format!(
                "batch holds {} windows from users other than {user}, {between} between-user candidates requested",
                others.len()
            )));
        }
        for k in index::sample(rng, others.len(), between) {
            let member = &batch[others[k]];
            let window = if config.augment_between {
                pipeline.apply_with_rng(member, rng)?
            } else {
                member.clone()
            };
            candidates.push(Candidate {
                id: CandidateId {
                    window: member.id(),
                    augmented: config.augment_between,
                },
                user_id: member.user_id.clone(),
                source: CandidateSource::BetweenUser,
                window,
                dist_to_anchor: None,
            });
        }
    }

    if config.include_augmented_self {
        candidates.push(Candidate {
            id: CandidateId {
                window: anc.id(),
                augmented: true,
            },
            user_id: user.to_string(),
            source: CandidateSource::AugmentedSelf,
            window: pipeline.apply_with_rng(anc, rng)?,
            dist_to_anchor: None,
        });
    }
    Ok(CandidateSet {
        anchor: anc.clone(),
        candidates,
    })
}

/// Candidate sets for every anchor of a batch, sampled in order from one stream.
pub fn sample_batch<R: Rng + ?Sized>(
    batch: &[Window],
    pool: &WindowPool,
    config: &SamplerConfig,
    pipeline: &AugmentationPipeline,
    rng: &mut R,
) -> Result<Vec<CandidateSet>> {
    (0..batch.len())
        .map(|i| sample_candidates(i, batch, pool, config, pipeline, rng))
        .collect()
}

/// Fills every candidate's distance to its anchor in one batched evaluation.
pub fn score_candidates(sets: &mut [CandidateSet], dist: &FrozenDistance) -> Result<()> {
    let (mut anchors, mut cands) = (Vec::new(), Vec::new());
    for set in sets.iter() {
        for c in &set.candidates {
            anchors.push(&set.anchor);
            cands.push(&c.window);
        }
    }
    let scores = dist.distances(&anchors, &cands)?;
    let mut it = scores.into_iter();
    for set in sets.iter_mut() {
        for c in &mut set.candidates {
            c.dist_to_anchor = it.next();
        }
    }
    Ok(())
}
