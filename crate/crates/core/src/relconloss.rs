//! Relative contrastive loss and the binary and log-ratio alternatives.
//!
//! Every candidate takes a turn as the positive; its negatives are the
//! candidates the frozen distance places strictly farther from the anchor.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndtensor::{Tape, Tensor, Var};
use crate::sampler::{CandidateId, CandidateSource};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossVariant {
    Relcon,
    Binary,
    LogRatio,
}

impl std::str::FromStr for LossVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relcon" => Ok(LossVariant::Relcon),
            "binary" => Ok(LossVariant::Binary),
            "log_ratio" => Ok(LossVariant::LogRatio),
            other => Err(Error::Config(format!("unknown loss variant {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub temperature: f64,
    pub variant: LossVariant,
    /// Cosine instead of raw inner-product similarity.
    pub normalize_embeddings: bool,
    /// Floor for embedding and frozen distances in the log-ratio loss.
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: 1.0,
            variant: LossVariant::Relcon,
            normalize_embeddings: false,
            eps: 1e-8,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.temperature)));
        }
        if !(self.eps >= 0.0) {
            return Err(Error::Config("eps must be non-negative".into()));
        }
        Ok(())
    }
}

/// A candidate's embedding and its frozen distance to the anchor.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredCandidate {
    pub id: CandidateId,
    pub embedding: Vec<f64>,
    pub dist_to_anchor: f64,
    pub source: CandidateSource,
}

/// Indices of candidates strictly farther from the anchor than `pos`.
pub fn negative_set(dists: &[f64], pos: usize) -> Result<Vec<usize>> {
    let d_pos = *dists
        .get(pos)
        .ok_or_else(|| Error::Data(format!("positive {pos} not among {} candidates", dists.len())))?;
    Ok((0..dists.len()).filter(|&j| dists[j] > d_pos).collect())
}

/// First index of the smallest distance.
fn closest(dists: &[f64]) -> usize {
    let mut best = 0;
    for (i, &d) in dists.iter().enumerate() {
        if d < dists[best] {
            best = i;
        }
    }
    best
}

fn check_dists(dists: &[f64]) -> Result<()> {
    match dists.iter().find(|d| !(d.is_finite() && **d >= 0.0)) {
        Some(d) => Err(Error::Data(format!("frozen distance {d} is not finite and non-negative"))),
        None => Ok(()),
    }
}

/// Similarities `[n]` between `anchor [d]` and the rows of `cands [n, d]`.
fn similarities(tape: &mut Tape, anchor: Var, cands: Var, normalize: bool) -> Result<Var> {
    let d = tape.shape(anchor).iter().product::<usize>();
    let n = tape.shape(cands)[0];
    let (a, c) = if normalize {
        (unit_rows(tape, anchor, 1, d)?, unit_rows(tape, cands, n, d)?)
    } else {
        (tape.reshape(anchor, &[1, d])?, cands)
    };
    let col = tape.transpose(a)?;
    let sims = tape.matmul(c, col)?;
    tape.reshape(sims, &[n])
}

fn unit_rows(tape: &mut Tape, x: Var, n: usize, d: usize) -> Result<Var> {
    let x = tape.reshape(x, &[n, d])?;
    let sq = tape.square(x)?;
    let norm2 = tape.sum(sq, 1, true)?;
    let norm2 = tape.clamp_min(norm2, 1e-24)?;
    let norm = tape.sqrt(norm2)?;
    tape.div(x, norm)
}

/// `logsumexp([l_pos, l_negs]) − l_pos` from a logit vector.
fn nt_xent_from_logits(tape: &mut Tape, logits: Var, pos: usize, negs: &[usize]) -> Result<Var> {
    let mut idx = Vec::with_capacity(negs.len() + 1);
    idx.push(pos);
    idx.extend_from_slice(negs);
    let picked = tape.index_select(logits, &idx)?;
    let lse = tape.logsumexp(picked)?;
    let pos_logit = tape.index_select(logits, &[pos])?;
    let pos_logit = tape.reshape(pos_logit, &[])?;
    tape.sub(lse, pos_logit)
}

fn zero(tape: &mut Tape) -> Var {
    tape.constant(Tensor::scalar(0.0))
}

fn sum_terms(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    if terms.is_empty() {
        return Ok(zero(tape));
    }
    let all = tape.concat(terms)?;
    tape.sum_all(all)
}

/// Per-anchor loss on the tape: `anchor` is `[d]`, `cands` is `[n, d]`,
/// `dists[i]` the frozen distance of candidate `i`.
pub fn anchor_loss(tape: &mut Tape, anchor: Var, cands: Var, dists: &[f64], config: &LossConfig) -> Result<Var> {
    config.validate()?;
    check_dists(dists)?;
    let shape = tape.shape(cands).to_vec();
    if shape.len() != 2 || shape[0] != dists.len() || shape[1] != tape.shape(anchor).iter().product::<usize>() {
        return Err(Error::shape(
            "contrastive loss",
            format!("anchor {:?}, candidates {shape:?}, {} distances", tape.shape(anchor), dists.len()),
        ));
    }
    match config.variant {
        LossVariant::Relcon => {
            let sims = similarities(tape, anchor, cands, config.normalize_embeddings)?;
            let logits = tape.scale(sims, 1.0 / config.temperature)?;
            let mut terms = Vec::new();
            for i in 0..dists.len() {
                let negs = negative_set(dists, i)?;
                if !negs.is_empty() {
                    terms.push(nt_xent_from_logits(tape, logits, i, &negs)?);
                }
            }
            sum_terms(tape, &terms)
        }
        LossVariant::Binary => {
            if dists.len() < 2 {
                return Err(Error::Data("binary contrastive loss needs at least two candidates".into()));
            }
            let sims = similarities(tape, anchor, cands, config.normalize_embeddings)?;
            let logits = tape.scale(sims, 1.0 / config.temperature)?;
            let pos = closest(dists);
            let negs: Vec<usize> = (0..dists.len()).filter(|&j| j != pos).collect();
            nt_xent_from_logits(tape, logits, pos, &negs)
        }
        LossVariant::LogRatio => log_ratio(tape, anchor, cands, dists, config.eps),
    }
}

/// Σ over unordered candidate pairs of
/// `(ln(‖e_a−e_i‖/‖e_a−e_j‖) − ln(d_i/d_j))²`.
fn log_ratio(tape: &mut Tape, anchor: Var, cands: Var, dists: &[f64], eps: f64) -> Result<Var> {
    let n = dists.len();
    if n < 2 {
        return Ok(zero(tape));
    }
    let d = tape.shape(cands)[1];
    let log_d: Vec<f64> = dists
        .iter()
        .map(|&v| {
            let v = v.max(eps);
            if v > 0.0 {
                Ok(v.ln())
            } else {
                Err(Error::NonFinite("zero frozen distance in log-ratio loss; set eps > 0".into()))
            }
        })
        .collect::<Result<_>>()?;
    let a = tape.reshape(anchor, &[1, d])?;
    let diff = tape.sub(cands, a)?;
    let sq = tape.square(diff)?;
    let sq = tape.sum(sq, 1, false)?;
    let sq = tape.clamp_min(sq, eps * eps)?;
    let emb_dist = tape.sqrt(sq)?;
    let log_e = tape.log(emb_dist)?;
    let log_d = tape.constant(Tensor::vector(log_d)?);
    let gap = tape.sub(log_e, log_d)?;
    let (mut left, mut right) = (Vec::new(), Vec::new());
    for i in 0..n {
        for j in i + 1..n {
            left.push(i);
            right.push(j);
        }
    }
    let gi = tape.index_select(gap, &left)?;
    let gj = tape.index_select(gap, &right)?;
    let delta = tape.sub(gi, gj)?;
    let sq = tape.square(delta)?;
    tape.sum_all(sq)
}

fn embedding_tensor(rows: &[&[f64]]) -> Result<Tensor> {
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.iter().any(|r| r.len() != d) || d == 0 {
        return Err(Error::shape("embeddings", "rows must share a non-zero length"));
    }
    Tensor::new(vec![rows.len(), d], rows.concat())
}

/// Loss value and its gradients with respect to the anchor and each candidate embedding.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub value: f64,
    pub anchor: Vec<f64>,
    pub candidates: Vec<Vec<f64>>,
}

pub fn loss_with_grads(anchor: &[f64], candidates: &[ScoredCandidate], config: &LossConfig) -> Result<LossGrad> {
    if candidates.is_empty() {
        return Err(Error::Data("at least one candidate is required".into()));
    }
    let rows: Vec<&[f64]> = candidates.iter().map(|c| c.embedding.as_slice()).collect();
    let dists: Vec<f64> = candidates.iter().map(|c| c.dist_to_anchor).collect();
    let mut tape = Tape::new();
    let a = tape.param(&Tensor::vector(anchor.to_vec())?);
    let c = tape.param(&embedding_tensor(&rows)?);
    let loss = anchor_loss(&mut tape, a, c, &dists, config)?;
    tape.backward(loss)?;
    let d = anchor.len();
    let grad_or_zero = |v: Var, len: usize| tape.grad(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len]);
    let cand_grads = grad_or_zero(c, d * candidates.len());
    Ok(LossGrad {
        value: tape.scalar(loss)?,
        anchor: grad_or_zero(a, d),
        candidates: cand_grads.chunks(d).map(<[f64]>::to_vec).collect(),
    })
}

/// Loss value for one anchor under `config.variant`.
pub fn loss(anchor: &[f64], candidates: &[ScoredCandidate], config: &LossConfig) -> Result<f64> {
    Ok(loss_with_grads(anchor, candidates, config)?.value)
}

pub fn similarity(a: &[f64], b: &[f64], config: &LossConfig) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("similarity", format!("lengths {} and {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    if !config.normalize_embeddings {
        return Ok(dot);
    }
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
    Ok(dot / (norm(a) * norm(b)))
}

/// NT-Xent for one positive against explicit negatives.
pub fn nt_xent(anchor: &[f64], pos: &[f64], negs: &[&[f64]], config: &LossConfig) -> Result<f64> {
    config.validate()?;
    if negs.is_empty() {
        similarity(anchor, pos, config)?;
        return Ok(0.0);
    }
    let mut rows = vec![pos];
    rows.extend_from_slice(negs);
    let mut tape = Tape::new();
    let a = tape.constant(Tensor::vector(anchor.to_vec())?);
    let c = tape.constant(embedding_tensor(&rows)?);
    let sims = similarities(&mut tape, a, c, config.normalize_embeddings)?;
    let logits = tape.scale(sims, 1.0 / config.temperature)?;
    let negs: Vec<usize> = (1..rows.len()).collect();
    let l = nt_xent_from_logits(&mut tape, logits, 0, &negs)?;
    tape.scalar(l)
}

fn with_variant(config: &LossConfig, variant: LossVariant) -> LossConfig {
    LossConfig {
        variant,
        ..config.clone()
    }
}

pub fn relcon_loss(anchor: &[f64], candidates: &[ScoredCandidate], config: &LossConfig) -> Result<f64> {
    loss(anchor, candidates, &with_variant(config, LossVariant::Relcon))
}

pub fn binary_contrastive_loss(anchor: &[f64], candidates: &[ScoredCandidate], config: &LossConfig) -> Result<f64> {
    loss(anchor, candidates, &with_variant(config, LossVariant::Binary))
}

pub fn log_ratio_metric_loss(anchor: &[f64], candidates: &[ScoredCandidate], config: &LossConfig) -> Result<f64> {
    loss(anchor, candidates, &with_variant(config, LossVariant::LogRatio))
}
