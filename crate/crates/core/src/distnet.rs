//! Learnable motif-based distance: how well a candidate window can
//! reconstruct an anchor through sparse cross-attention over dilated
//! convolutional embeddings, with both windows normalized by the
//! candidate's statistics.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::AugmentationPipeline;
use crate::dataio::{batch_tensor, Window};
use crate::error::{Error, Result};
use crate::ndtensor::{checkpoint, Adam, Bound, ParamId, ParamStore, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionNormalizer {
    Sparsemax,
    Softmax,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistanceNetConfig {
    pub embed_dim: usize,
    /// Odd convolution width shared by every layer.
    pub kernel_size: usize,
    /// One entry per convolution layer.
    pub dilations: Vec<usize>,
    pub normalizer: AttentionNormalizer,
    /// Normalize both windows by the candidate's statistics and undo it on output.
    pub revin: bool,
    /// Undo normalization as `(out + μ)·σ` instead of `out·σ + μ`.
    pub literal_unnorm: bool,
    pub eps: f64,
}

impl Default for DistanceNetConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl DistanceNetConfig {
    pub fn desk() -> Self {
        Self {
            embed_dim: 16,
            kernel_size: 7,
            dilations: vec![1, 2],
            normalizer: AttentionNormalizer::Sparsemax,
            revin: true,
            literal_unnorm: false,
            eps: 1e-5,
        }
    }

    pub fn full_scale() -> Self {
        Self {
            embed_dim: 64,
            kernel_size: 15,
            dilations: vec![1, 2, 4, 8],
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.dilations.is_empty() || self.dilations.contains(&0) {
            return Err(Error::Config("distance net needs embed_dim > 0 and positive dilations".into()));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::Config(format!("kernel_size must be odd, got {}", self.kernel_size)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        Ok(())
    }
}

/// Per-channel mean and floored population std of a candidate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateStats {
    pub mu: [f64; 3],
    pub sigma: [f64; 3],
}

impl CandidateStats {
    pub fn identity() -> Self {
        Self {
            mu: [0.0; 3],
            sigma: [1.0; 3],
        }
    }

    pub fn normalize(&self, samples: &[[f64; 3]]) -> Vec<[f64; 3]> {
        samples
            .iter()
            .map(|s| std::array::from_fn(|c| (s[c] - self.mu[c]) / self.sigma[c]))
            .collect()
    }

    pub fn denormalize(&self, samples: &[[f64; 3]]) -> Vec<[f64; 3]> {
        samples
            .iter()
            .map(|s| std::array::from_fn(|c| s[c] * self.sigma[c] + self.mu[c]))
            .collect()
    }
}

pub fn candidate_stats(cand: &Window, eps: f64) -> Result<CandidateStats> {
    if cand.len() < 2 {
        return Err(Error::Data(format!("candidate statistics need at least 2 samples, got {}", cand.len())));
    }
    let n = cand.len() as f64;
    let mut mu = [0.0; 3];
    for s in &cand.samples {
        (0..3).for_each(|c| mu[c] += s[c]);
    }
    mu.iter_mut().for_each(|m| *m /= n);
    let mut var = [0.0; 3];
    for s in &cand.samples {
        (0..3).for_each(|c| var[c] += (s[c] - mu[c]).powi(2));
    }
    let sigma = var.map(|v| (v / n).sqrt().max(eps));
    Ok(CandidateStats { mu, sigma })
}

#[derive(Debug, Clone, Copy)]
enum Branch {
    Query,
    Key,
    Value,
}

impl Branch {
    fn prefix(self) -> &'static str {
        match self {
            Branch::Query => "query",
            Branch::Key => "key",
            Branch::Value => "value",
        }
    }
}

/// Attention weights, reconstruction and distance for one anchor/candidate pair.
#[derive(Debug, Clone)]
pub struct Reconstruction {
    /// `[T_anchor, T_candidate]`, rows on the simplex.
    pub attention: Tensor,
    /// `[T, 3]` in the anchor's raw units.
    pub recon: Tensor,
    pub distance: f64,
}

/// Parameters and architecture of the distance network.
#[derive(Debug, Clone)]
pub struct DistanceNet {
    config: DistanceNetConfig,
    params: ParamStore,
    layers: [Vec<(ParamId, ParamId)>; 3],
    out_weight: ParamId,
    out_bias: ParamId,
}

pub(crate) struct Pass {
    pub distances: Var,
    pub attention: Var,
    pub recon: Var,
}

impl DistanceNet {
    pub fn new(config: DistanceNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let (k, d) = (config.kernel_size, config.embed_dim);
        for branch in [Branch::Query, Branch::Key, Branch::Value] {
            for l in 0..config.dilations.len() {
                let c_in = if l == 0 { 3 } else { d };
                let std = (2.0 / (k * c_in) as f64).sqrt();
                params.push(format!("{}.{l}.weight", branch.prefix()), Tensor::randn([k, c_in, d], std, &mut rng));
                params.push(format!("{}.{l}.bias", branch.prefix()), Tensor::zeros([d]));
            }
        }
        params.push("out.weight", Tensor::randn([d, 3], (1.0 / d as f64).sqrt(), &mut rng));
        params.push("out.bias", Tensor::zeros([3]));
        Self::from_parts(config, params)
    }

    pub fn from_parts(config: DistanceNetConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let (k, d) = (config.kernel_size, config.embed_dim);
        let lookup = |name: String, shape: &[usize]| -> Result<ParamId> {
            let id = params
                .id(&name)
                .ok_or_else(|| Error::Config(format!("distance net parameter {name} missing")))?;
            if params.get(id).shape() != shape {
                return Err(Error::Config(format!(
                    "{name} has shape {:?}, expected {shape:?}",
                    params.get(id).shape()
                )));
            }
            Ok(id)
        };
        let branch = |b: Branch| -> Result<Vec<(ParamId, ParamId)>> {
            (0..config.dilations.len())
                .map(|l| {
                    let c_in = if l == 0 { 3 } else { d };
                    Ok((
                        lookup(format!("{}.{l}.weight", b.prefix()), &[k, c_in, d])?,
                        lookup(format!("{}.{l}.bias", b.prefix()), &[d])?,
                    ))
                })
                .collect()
        };
        let layers = [branch(Branch::Query)?, branch(Branch::Key)?, branch(Branch::Value)?];
        let out_weight = lookup("out.weight".into(), &[d, 3])?;
        let out_bias = lookup("out.bias".into(), &[3])?;
        if params.len() != 2 * 3 * config.dilations.len() + 2 {
            return Err(Error::Config("distance net checkpoint has unexpected parameters".into()));
        }
        Ok(Self {
            config,
            params,
            layers,
            out_weight,
            out_bias,
        })
    }

    pub fn config(&self) -> &DistanceNetConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    fn stats(&self, cand: &Window) -> Result<CandidateStats> {
        if self.config.revin {
            candidate_stats(cand, self.config.eps)
        } else {
            Ok(CandidateStats::identity())
        }
    }

    fn conv_stack(&self, tape: &mut Tape, bound: &Bound, branch: Branch, x: Var) -> Result<Var> {
        let layers = &self.layers[branch as usize];
        let mut h = x;
        for (l, (&(w, b), &dil)) in layers.iter().zip(&self.config.dilations).enumerate() {
            h = tape.conv1d(h, bound.var(w), dil, 1)?;
            h = tape.add(h, bound.var(b))?;
            if l + 1 < layers.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Attention and un-normalized reconstruction from embeddings.
    /// `mu`/`sigma` broadcast against the `[.., T, 3]` output.
    fn attend(&self, tape: &mut Tape, bound: &Bound, q: Var, k: Var, v: Var, mu: Var, sigma: Var) -> Result<(Var, Var)> {
        let kt = tape.transpose(k)?;
        let scores = tape.matmul(q, kt)?;
        let scores = tape.scale(scores, 1.0 / (self.config.embed_dim as f64).sqrt())?;
        let attention = match self.config.normalizer {
            AttentionNormalizer::Sparsemax => tape.sparsemax(scores)?,
            AttentionNormalizer::Softmax => tape.softmax(scores, 1.0)?,
        };
        let ctx = tape.matmul(attention, v)?;
        let out = tape.matmul(ctx, bound.var(self.out_weight))?;
        let out = tape.add(out, bound.var(self.out_bias))?;
        let recon = if self.config.literal_unnorm {
            let shifted = tape.add(out, mu)?;
            tape.mul(shifted, sigma)?
        } else {
            let scaled = tape.mul(out, sigma)?;
            tape.add(scaled, mu)?
        };
        Ok((attention, recon))
    }

    /// Batched forward pass over paired anchors and candidates.
    pub(crate) fn forward(&self, tape: &mut Tape, bound: &Bound, anchors: &[&Window], cands: &[&Window]) -> Result<Pass> {
        if anchors.len() != cands.len() || anchors.is_empty() {
            return Err(Error::shape("distance", format!("{} anchors vs {} candidates", anchors.len(), cands.len())));
        }
        let t = anchors[0].len();
        if let Some(w) = anchors.iter().chain(cands).find(|w| w.len() != t) {
            return Err(Error::shape("distance", format!("window length {} differs from {t}", w.len())));
        }
        let b = anchors.len();
        let mut norm_a = Vec::with_capacity(b * t * 3);
        let mut norm_c = Vec::with_capacity(b * t * 3);
        let (mut mu, mut sigma) = (Vec::with_capacity(b * 3), Vec::with_capacity(b * 3));
        for (a, c) in anchors.iter().zip(cands) {
            let st = self.stats(c)?;
            norm_a.extend(st.normalize(&a.samples).iter().flatten());
            norm_c.extend(st.normalize(&c.samples).iter().flatten());
            mu.extend(st.mu);
            sigma.extend(st.sigma);
        }
        let xa = tape.constant(Tensor::new(vec![b, t, 3], norm_a)?);
        let xc = tape.constant(Tensor::new(vec![b, t, 3], norm_c)?);
        let mu = tape.constant(Tensor::new(vec![b, 1, 3], mu)?);
        let sigma = tape.constant(Tensor::new(vec![b, 1, 3], sigma)?);
        let q = self.conv_stack(tape, bound, Branch::Query, xa)?;
        let k = self.conv_stack(tape, bound, Branch::Key, xc)?;
        let v = self.conv_stack(tape, bound, Branch::Value, xc)?;
        let (attention, recon) = self.attend(tape, bound, q, k, v, mu, sigma)?;
        let target = tape.constant(batch_tensor(anchors.iter().copied())?);
        let diff = tape.sub(recon, target)?;
        let sq = tape.square(diff)?;
        let per_step = tape.sum(sq, 2, false)?;
        let distances = tape.sum(per_step, 1, false)?;
        Ok(Pass {
            distances,
            attention,
            recon,
        })
    }

    /// Query, key and value embeddings `[T, d]` of one pair.
    pub fn embed_qkv(&self, anchor: &Window, cand: &Window) -> Result<(Tensor, Tensor, Tensor)> {
        if anchor.len() != cand.len() {
            return Err(Error::shape("embed_qkv", format!("lengths {} and {}", anchor.len(), cand.len())));
        }
        let st = self.stats(cand)?;
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let xa = tape.constant(Window::from_samples(st.normalize(&anchor.samples)).to_tensor()?);
        let xc = tape.constant(Window::from_samples(st.normalize(&cand.samples)).to_tensor()?);
        let q = self.conv_stack(&mut tape, &bound, Branch::Query, xa)?;
        let k = self.conv_stack(&mut tape, &bound, Branch::Key, xc)?;
        let v = self.conv_stack(&mut tape, &bound, Branch::Value, xc)?;
        Ok((tape.tensor(q), tape.tensor(k), tape.tensor(v)))
    }

    /// Reconstruction `[T, 3]` from precomputed embeddings and candidate stats.
    pub fn recon_from_qkv(&self, q: &Tensor, k: &Tensor, v: &Tensor, stats: &CandidateStats) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let (q, k, v) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let mu = tape.constant(Tensor::new(vec![1, 3], stats.mu.to_vec())?);
        let sigma = tape.constant(Tensor::new(vec![1, 3], stats.sigma.to_vec())?);
        let (_, recon) = self.attend(&mut tape, &bound, q, k, v, mu, sigma)?;
        Ok(tape.tensor(recon))
    }

    pub fn reconstruct(&self, anchor: &Window, cand: &Window) -> Result<Reconstruction> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, false);
        let pass = self.forward(&mut tape, &bound, &[anchor], &[cand])?;
        let t = anchor.len();
        Ok(Reconstruction {
            attention: tape.tensor(pass.attention).reshape([t, t])?,
            recon: tape.tensor(pass.recon).reshape([t, 3])?,
            distance: tape.value(pass.distances)[0],
        })
    }

    /// Squared reconstruction error of `anchor` from `cand`.
    pub fn distance(&self, anchor: &Window, cand: &Window) -> Result<f64> {
        Ok(self.distances(&[anchor], &[cand])?[0])
    }

    /// Pairwise distances for aligned slices, evaluated in bounded chunks.
    pub fn distances(&self, anchors: &[&Window], cands: &[&Window]) -> Result<Vec<f64>> {
        const CHUNK: usize = 256;
        if anchors.len() != cands.len() {
            return Err(Error::shape("distance", format!("{} anchors vs {} candidates", anchors.len(), cands.len())));
        }
        let mut out = Vec::with_capacity(anchors.len());
        for (a, c) in anchors.chunks(CHUNK).zip(cands.chunks(CHUNK)) {
            let mut tape = Tape::new();
            let bound = self.params.bind(&mut tape, false);
            let pass = self.forward(&mut tape, &bound, a, c)?;
            out.extend_from_slice(tape.value(pass.distances));
        }
        Ok(out)
    }

    /// Mean distance over a batch and its parameter gradients.
    pub fn loss_and_grads(&self, anchors: &[&Window], cands: &[&Window]) -> Result<(f64, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape, true);
        let pass = self.forward(&mut tape, &bound, anchors, cands)?;
        let loss = tape.mean_all(pass.distances)?;
        tape.backward(loss)?;
        Ok((tape.scalar(loss)?, self.params.collect_grads(&tape, &bound)))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let meta = serde_json::json!({ "model": "distance", "config": self.config });
        checkpoint::save(path, &meta, &self.params)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (meta, params) = checkpoint::load(path)?;
        if meta.get("model").and_then(|m| m.as_str()) != Some("distance") {
            return Err(Error::Data(format!("{} is not a distance-network checkpoint", path.display())));
        }
        let config: DistanceNetConfig = serde_json::from_value(meta["config"].clone())?;
        Self::from_parts(config, params)
    }
}

/// A trained distance network that can only be evaluated.
#[derive(Debug, Clone)]
pub struct FrozenDistance(DistanceNet);

impl FrozenDistance {
    pub fn new(net: DistanceNet) -> Self {
        Self(net)
    }

    pub fn net(&self) -> &DistanceNet {
        &self.0
    }

    pub fn distance(&self, anchor: &Window, cand: &Window) -> Result<f64> {
        self.0.distance(anchor, cand)
    }

    pub fn distances(&self, anchors: &[&Window], cands: &[&Window]) -> Result<Vec<f64>> {
        self.0.distances(anchors, cands)
    }

    pub fn digest(&self) -> String {
        self.0.params.digest()
    }

    pub fn load(path: &Path) -> Result<Self> {
        DistanceNet::load(path).map(Self)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DistanceTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for DistanceTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct DistanceTraining {
    pub model: FrozenDistance,
    /// Mean batch distance per step.
    pub losses: Vec<f64>,
}

/// Trains the network to reconstruct anchors from their own augmentations.
pub fn train_distance(
    windows: &[Window],
    pipeline: &AugmentationPipeline,
    net_config: &DistanceNetConfig,
    train: &DistanceTrainConfig,
) -> Result<DistanceTraining> {
    if windows.is_empty() {
        return Err(Error::Data("distance training needs at least one window".into()));
    }
    if train.batch_size == 0 || !(train.lr > 0.0) {
        return Err(Error::Config("distance training needs batch_size > 0 and lr > 0".into()));
    }
    pipeline.validate()?;
    let mut net = DistanceNet::new(net_config.clone(), train.seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(train.seed ^ 0xD157_A9CE);
    let mut adam = Adam::new(train.lr);
    let mut losses = Vec::with_capacity(train.steps);
    for step in 0..train.steps {
        let anchors: Vec<&Window> = (0..train.batch_size)
            .map(|_| &windows[rng.random_range(0..windows.len())])
            .collect();
        let cands = anchors
            .iter()
            .map(|a| pipeline.apply_with_rng(a, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let cand_refs: Vec<&Window> = cands.iter().collect();
        let (loss, grads) = net
            .loss_and_grads(&anchors, &cand_refs)
            .map_err(|e| diverged(step, e))?;
        if !loss.is_finite() {
            return Err(diverged(step, Error::NonFinite(format!("loss {loss}"))));
        }
        adam.step(net.params_mut().tensors_mut(), &grads).map_err(|e| diverged(step, e))?;
        if step % 100 == 0 {
            log::info!("distance step {step}: loss {loss:.5}");
        }
        losses.push(loss);
    }
    Ok(DistanceTraining {
        model: FrozenDistance::new(net),
        losses,
    })
}

fn diverged(step: usize, e: Error) -> Error {
    match e {
        Error::NonFinite(detail) => Error::Diverged {
            stage: "distance training",
            step,
            detail,
        },
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_window(t: usize, seed: u64) -> Window {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Window::from_samples(Tensor::randn([t, 3], 1.0, &mut rng).data().chunks(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    fn tiny(normalizer: AttentionNormalizer) -> DistanceNetConfig {
        DistanceNetConfig {
            embed_dim: 8,
            kernel_size: 3,
            dilations: vec![1],
            normalizer,
            ..DistanceNetConfig::desk()
        }
    }

    #[test]
    fn stats_examples() {
        let c = Window::from_samples(vec![[2.5, 2.5, 2.5]; 10]);
        let st = candidate_stats(&c, 1e-5).unwrap();
        assert_eq!(st.mu, [2.5; 3]);
        assert_eq!(st.sigma, [1e-5; 3]);
        let alt = Window::from_samples((0..8).map(|i| [if i % 2 == 0 { 1.0 } else { 3.0 }, 0.0, 0.0]).collect());
        let st = candidate_stats(&alt, 1e-5).unwrap();
        assert!((st.mu[0] - 2.0).abs() < 1e-12 && (st.sigma[0] - 1.0).abs() < 1e-12);
        let big = noise_window(4096, 3);
        let st = candidate_stats(&big, 1e-5).unwrap();
        for c in 0..3 {
            assert!(st.mu[c].abs() < 0.1 && (st.sigma[c] - 1.0).abs() < 0.1);
        }
        let st = candidate_stats(&noise_window(32, 4), 1e-5).unwrap();
        let x = noise_window(32, 5);
        let round = st.denormalize(&st.normalize(&x.samples));
        for (a, b) in round.iter().flatten().zip(x.samples.iter().flatten()) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn embeddings_contracts() {
        let mut net = DistanceNet::new(DistanceNetConfig::desk(), 1).unwrap();
        // Copy key weights into the query branch.
        for l in 0..2 {
            for part in ["weight", "bias"] {
                let k = net.params().get(net.params().id(&format!("key.{l}.{part}")).unwrap()).clone();
                let qid = net.params().id(&format!("query.{l}.{part}")).unwrap();
                *net.params_mut().get_mut(qid) = k;
            }
        }
        let x = noise_window(32, 9);
        let (q, k, v) = net.embed_qkv(&x, &x).unwrap();
        assert_eq!(q, k);
        assert_eq!(v.shape(), &[32, 16]);
        let y = noise_window(32, 10);
        let doubled = Window::from_samples(y.samples.iter().map(|s| s.map(|v| 2.0 * v)).collect());
        let (_, k1, v1) = net.embed_qkv(&x, &y).unwrap();
        let (_, k2, v2) = net.embed_qkv(&x, &doubled).unwrap();
        for (a, b) in k1.data().iter().chain(v1.data()).zip(k2.data().iter().chain(v2.data())) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(net.embed_qkv(&x, &noise_window(16, 1)).is_err());
    }

    #[test]
    fn attention_rows_on_simplex_and_sparse() {
        for normalizer in [AttentionNormalizer::Sparsemax, AttentionNormalizer::Softmax] {
            let net = DistanceNet::new(DistanceNetConfig { normalizer, ..DistanceNetConfig::desk() }, 2).unwrap();
            let r = net.reconstruct(&noise_window(64, 1), &noise_window(64, 2)).unwrap();
            let mut zeros = 0;
            for row in r.attention.data().chunks(64) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|&w| w >= 0.0));
                zeros += row.iter().filter(|&&w| w == 0.0).count();
            }
            if normalizer == AttentionNormalizer::Sparsemax {
                assert!(zeros > 0);
            }
            assert!(r.distance >= 0.0);
        }
    }

    #[test]
    fn permuting_keys_and_values_jointly_is_invisible() {
        let net = DistanceNet::new(DistanceNetConfig::desk(), 3).unwrap();
        let (a, c) = (noise_window(24, 1), noise_window(24, 2));
        let (q, k, v) = net.embed_qkv(&a, &c).unwrap();
        let st = candidate_stats(&c, 1e-5).unwrap();
        let base = net.recon_from_qkv(&q, &k, &v, &st).unwrap();
        let perm: Vec<usize> = (0..24).map(|i| (i * 7 + 3) % 24).collect();
        let permute = |t: &Tensor| {
            let rows: Vec<Vec<f64>> = perm.iter().map(|&i| t.row(i).to_vec()).collect();
            Tensor::from_rows(&rows).unwrap()
        };
        let shuffled = net.recon_from_qkv(&q, &permute(&k), &permute(&v), &st).unwrap();
        for (x, y) in base.data().iter().zip(shuffled.data()) {
            assert!((x - y).abs() < 1e-9);
        }
        let direct = net.reconstruct(&a, &c).unwrap();
        for (x, y) in base.data().iter().zip(direct.recon.data()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn distance_is_deterministic_and_asymmetric() {
        let net = DistanceNet::new(DistanceNetConfig::desk(), 4).unwrap();
        let (a, b) = (noise_window(64, 1), noise_window(64, 2));
        let d1 = net.distance(&a, &b).unwrap();
        assert_eq!(d1.to_bits(), net.distance(&a, &b).unwrap().to_bits());
        assert_ne!(d1, net.distance(&b, &a).unwrap());
        let batch = net.distances(&[&a, &b], &[&b, &a]).unwrap();
        assert_eq!(batch[0], d1);
    }

    #[test]
    fn unnormalize_order_toggle() {
        let (a, c) = (noise_window(16, 1), noise_window(16, 2));
        let net = DistanceNet::new(tiny(AttentionNormalizer::Softmax), 5).unwrap();
        let literal = DistanceNet::from_parts(
            DistanceNetConfig { literal_unnorm: true, ..net.config().clone() },
            net.params().clone(),
        )
        .unwrap();
        let (q, k, v) = net.embed_qkv(&a, &c).unwrap();
        let st = candidate_stats(&c, 1e-5).unwrap();
        let unit = CandidateStats { mu: [0.0; 3], sigma: [1.0; 3] };
        let out = net.recon_from_qkv(&q, &k, &v, &unit).unwrap();
        let expected: Vec<f64> = out.data().chunks(3).flat_map(|r| (0..3).map(move |ch| (r[ch] + st.mu[ch]) * st.sigma[ch])).collect();
        let got = literal.recon_from_qkv(&q, &k, &v, &st).unwrap();
        for (x, y) in got.data().iter().zip(&expected) {
            assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for normalizer in [AttentionNormalizer::Sparsemax, AttentionNormalizer::Softmax] {
            let mut net = DistanceNet::new(tiny(normalizer), 6).unwrap();
            let anchors = [noise_window(16, 1), noise_window(16, 2)];
            let cands = [noise_window(16, 3), noise_window(16, 4)];
            let (a, c): (Vec<&Window>, Vec<&Window>) = (anchors.iter().collect(), cands.iter().collect());
            let (_, grads) = net.loss_and_grads(&a, &c).unwrap();
            let loss = |n: &DistanceNet| {
                let d = n.distances(&a, &c).unwrap();
                d.iter().sum::<f64>() / d.len() as f64
            };
            let h = 1e-5;
            // Central differences cannot resolve gradients below their own rounding error.
            let roundoff = 100.0 * f64::EPSILON * loss(&net).abs() / h;
            for p in 0..net.params().len() {
                for i in 0..net.params().tensors()[p].len() {
                    let orig = net.params().tensors()[p].data()[i];
                    net.params_mut().tensors_mut()[p].data_mut()[i] = orig + h;
                    let up = loss(&net);
                    net.params_mut().tensors_mut()[p].data_mut()[i] = orig - h;
                    let down = loss(&net);
                    net.params_mut().tensors_mut()[p].data_mut()[i] = orig;
                    let numeric = (up - down) / (2.0 * h);
                    let analytic = grads[p][i];
                    let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
                    assert!(rel < 1e-3 || (analytic - numeric).abs() < roundoff, "{normalizer:?} {}[{i}]: {analytic} vs {numeric}", net.params().names()[p]);
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = DistanceNet::new(DistanceNetConfig::desk(), 7).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("distance.ckpt");
        net.save(&path).unwrap();
        let frozen = FrozenDistance::load(&path).unwrap();
        assert_eq!(frozen.digest(), net.params().digest());
        let (a, b) = (noise_window(64, 1), noise_window(64, 2));
        assert_eq!(frozen.distance(&a, &b).unwrap(), net.distance(&a, &b).unwrap());
    }

    #[test]
    fn short_training_reduces_loss() {
        let windows: Vec<Window> = (0..16).map(|s| noise_window(32, s)).collect();
        let cfg = DistanceNetConfig {
            dilations: vec![1],
            kernel_size: 5,
            ..DistanceNetConfig::desk()
        };
        let train = DistanceTrainConfig {
            steps: 60,
            batch_size: 8,
            lr: 3e-3,
            seed: 1,
        };
        let out = train_distance(&windows, &AugmentationPipeline::default(), &cfg, &train).unwrap();
        let head: f64 = out.losses[..10].iter().sum();
        let tail: f64 = out.losses[50..].iter().sum();
        assert!(tail < head, "{head} -> {tail}");
        assert!(train_distance(&[], &AugmentationPipeline::default(), &cfg, &train).is_err());
    }
}
