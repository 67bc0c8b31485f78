//! Losses: cosine similarity, InfoNCE, token cross-entropy and their convex mix.

use std::cell::Cell;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::tokenizer::PAD;
use crate::tensor::{Graph, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("cosine similarity of a zero vector")]
    ZeroVector,
    #[error("invalid loss config: {0}")]
    InvalidConfig(String),
    #[error("contrastive item {0} needs at least one positive and one negative")]
    EmptyItem(usize),
    #[error("embedding dimension mismatch: {0} vs {1}")]
    DimensionMismatch(usize, usize),
    #[error("every target position is PAD")]
    AllPad,
    #[error("index {0} out of range")]
    OutOfRange(usize),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

pub type Result<T> = std::result::Result<T, ObjectiveError>;

const NORM_FLOOR: f64 = 1e-12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InfoNceMode {
    /// Positive term included in the denominator.
    #[default]
    Standard,
    /// Denominator sums over negatives only; the loss may go negative.
    Literal,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub tau: f64,
    pub lambda: f64,
    pub infonce_mode: InfoNceMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            lambda: 0.5,
            infonce_mode: InfoNceMode::Standard,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(ObjectiveError::InvalidConfig(format!(
                "tau must be > 0, got {}",
                self.tau
            )));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(ObjectiveError::InvalidConfig(format!(
                "lambda must lie in [0, 1], got {}",
                self.lambda
            )));
        }
        Ok(())
    }
}

thread_local! {
    static INFONCE_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of InfoNCE evaluations on this thread since the last reset.
pub fn infonce_evaluations() -> u64 {
    INFONCE_CALLS.with(Cell::get)
}

pub fn reset_infonce_counter() {
    INFONCE_CALLS.with(|c| c.set(0));
}

/// Plain-vector cosine similarity, clamped to [-1, 1].
pub fn cosine_sim(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(ObjectiveError::DimensionMismatch(u.len(), v.len()));
    }
    let nu = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nv = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if nu <= NORM_FLOOR || nv <= NORM_FLOOR {
        return Err(ObjectiveError::ZeroVector);
    }
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    Ok((dot / (nu * nv)).clamp(-1.0, 1.0))
}

/// Divide each row of `x: [n, d]` by its L2 norm.
pub fn normalize_rows(g: &mut Graph, x: Var) -> Result<Var> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 2 {
        return Err(TensorError::Invalid {
            op: "normalize_rows",
            msg: format!("expected a matrix, got {shape:?}"),
        }
        .into());
    }
    let d = shape[1];
    if g.value(x)
        .data()
        .chunks(d)
        .any(|r| r.iter().map(|a| a * a).sum::<f64>().sqrt() <= NORM_FLOOR)
    {
        return Err(ObjectiveError::ZeroVector);
    }
    let sq = g.mul(x, x)?;
    let ss = g.sum(sq, 1)?;
    let norm = g.sqrt(ss);
    let xt = g.transpose(x)?;
    let unit_t = g.div(xt, norm)?;
    Ok(g.transpose(unit_t)?)
}

/// Cosine similarity of row `pairs[m].0` of `a` with row `pairs[m].1` of `b`: `[pairs]`.
pub fn cosine_pairs(g: &mut Graph, a: Var, b: Var, pairs: &[(usize, usize)]) -> Result<Var> {
    let (da, db) = (g.shape(a)[1], g.shape(b)[1]);
    if da != db {
        return Err(ObjectiveError::DimensionMismatch(da, db));
    }
    let an = normalize_rows(g, a)?;
    let bn = normalize_rows(g, b)?;
    let ai: Vec<usize> = pairs.iter().map(|p| p.0).collect();
    let bi: Vec<usize> = pairs.iter().map(|p| p.1).collect();
    let ga = g.gather(an, &ai)?;
    let gb = g.gather(bn, &bi)?;
    let prod = g.mul(ga, gb)?;
    let dots = g.sum(prod, 1)?;
    Ok(g.clamp(dots, -1.0, 1.0))
}

/// One persona's contrastive group, as row indices into an offer-embedding matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ContrastiveGroup {
    pub persona: usize,
    pub positives: Vec<usize>,
    pub negatives: Vec<usize>,
}

/// Mean InfoNCE over groups; within a group, mean over positives with shared negatives.
pub fn infonce(
    g: &mut Graph,
    personas: Var,
    offers: Var,
    groups: &[ContrastiveGroup],
    cfg: &LossConfig,
) -> Result<Var> {
    cfg.validate()?;
    if groups.is_empty() {
        return Err(ObjectiveError::EmptyItem(0));
    }
    let (n_personas, n_offers) = (g.shape(personas)[0], g.shape(offers)[0]);
    let mut pairs = Vec::new();
    let mut slot = Vec::with_capacity(groups.len());
    for (i, grp) in groups.iter().enumerate() {
        if grp.positives.is_empty() || grp.negatives.is_empty() {
            return Err(ObjectiveError::EmptyItem(i));
        }
        if grp.persona >= n_personas {
            return Err(ObjectiveError::OutOfRange(grp.persona));
        }
        let mut idx = Vec::new();
        for &o in grp.positives.iter().chain(&grp.negatives) {
            if o >= n_offers {
                return Err(ObjectiveError::OutOfRange(o));
            }
            idx.push(pairs.len());
            pairs.push((grp.persona, o));
        }
        slot.push(idx);
    }
    INFONCE_CALLS.with(|c| c.set(c.get() + 1));
    let sims = cosine_pairs(g, personas, offers, &pairs)?;
    let logits = g.scale(sims, 1.0 / cfg.tau);
    let column = g.reshape(logits, &[pairs.len(), 1])?;

    // Each positive becomes one row: [positive, negatives...] (standard) or [negatives...] (literal).
    let mut pos_idx = Vec::new();
    let mut row_idx = Vec::new();
    let mut weights = Vec::new();
    let mut width = 0;
    for (grp, idx) in groups.iter().zip(&slot) {
        let (pos, neg) = idx.split_at(grp.positives.len());
        for &p in pos {
            pos_idx.push(p);
            match cfg.infonce_mode {
                InfoNceMode::Standard => row_idx.push(p),
                InfoNceMode::Literal => {}
            }
            row_idx.extend_from_slice(neg);
            weights.push(1.0 / (pos.len() * groups.len()) as f64);
        }
        width = neg.len() + usize::from(cfg.infonce_mode == InfoNceMode::Standard);
    }
    let rows = pos_idx.len();
    if row_idx.len() != rows * width {
        return Err(ObjectiveError::InvalidConfig(
            "groups must share the same number of negatives".into(),
        ));
    }
    let table = g.gather(column, &row_idx)?;
    let table = g.reshape(table, &[rows, width])?;
    let lse = g.logsumexp(table, 1)?;
    let pos = g.gather(column, &pos_idx)?;
    let pos = g.reshape(pos, &[rows])?;
    let per_row = g.sub(lse, pos)?;
    let w = g.constant(Tensor::vector(weights));
    let weighted = g.mul(per_row, w)?;
    Ok(g.sum_all(weighted))
}

/// InfoNCE for a single persona from raw embedding vectors.
pub fn infonce_loss(
    z: &[f64],
    positives: &[Vec<f64>],
    negatives: &[Vec<f64>],
    cfg: &LossConfig,
) -> Result<f64> {
    let d = z.len();
    for v in positives.iter().chain(negatives) {
        if v.len() != d {
            return Err(ObjectiveError::DimensionMismatch(d, v.len()));
        }
    }
    if positives.is_empty() || negatives.is_empty() {
        return Err(ObjectiveError::EmptyItem(0));
    }
    let mut g = Graph::new();
    let zt = g.constant(Tensor::matrix(1, d, z.to_vec())?);
    let rows: Vec<f64> = positives
        .iter()
        .chain(negatives)
        .flatten()
        .copied()
        .collect();
    let ot = g.constant(Tensor::matrix(positives.len() + negatives.len(), d, rows)?);
    let grp = ContrastiveGroup {
        persona: 0,
        positives: (0..positives.len()).collect(),
        negatives: (positives.len()..positives.len() + negatives.len()).collect(),
    };
    let loss = infonce(&mut g, zt, ot, &[grp], cfg)?;
    Ok(g.value(loss).item())
}

/// InfoNCE directly from similarity values for one positive.
pub fn infonce_from_sims(pos: f64, negs: &[f64], cfg: &LossConfig) -> Result<f64> {
    cfg.validate()?;
    if negs.is_empty() {
        return Err(ObjectiveError::EmptyItem(0));
    }
    let mut terms: Vec<f64> = negs.iter().map(|s| s / cfg.tau).collect();
    if cfg.infonce_mode == InfoNceMode::Standard {
        terms.push(pos / cfg.tau);
    }
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln();
    Ok(lse - pos / cfg.tau)
}

/// Token cross-entropy averaged over non-PAD targets. `logits: [T, vocab]`.
pub fn generation_loss(g: &mut Graph, logits: Var, targets: &[u32]) -> Result<Var> {
    let count = targets.iter().filter(|&&t| t != PAD).count();
    if count == 0 {
        return Err(ObjectiveError::AllPad);
    }
    let w = 1.0 / count as f64;
    let weights: Vec<f64> = targets
        .iter()
        .map(|&t| if t == PAD { 0.0 } else { w })
        .collect();
    let ids: Vec<usize> = targets.iter().map(|&t| t as usize).collect();
    Ok(g.cross_entropy(logits, &ids, &weights)?)
}

/// Cross-entropy over sequences packed back to back in the rows of `logits`:
/// mean over each sequence's non-PAD targets, then mean over sequences.
pub fn sequence_generation_loss(g: &mut Graph, logits: Var, targets: &[Vec<u32>]) -> Result<Var> {
    let rows: usize = targets.iter().map(Vec::len).sum();
    if g.shape(logits)[0] != rows {
        return Err(ObjectiveError::DimensionMismatch(g.shape(logits)[0], rows));
    }
    let counts: Vec<usize> = targets
        .iter()
        .map(|t| t.iter().filter(|&&x| x != PAD).count())
        .collect();
    let live = counts.iter().filter(|&&c| c > 0).count();
    if live == 0 {
        return Err(ObjectiveError::AllPad);
    }
    let mut ids = Vec::with_capacity(rows);
    let mut weights = Vec::with_capacity(rows);
    for (t, &c) in targets.iter().zip(&counts) {
        for &y in t {
            ids.push(y as usize);
            weights.push(if y == PAD {
                0.0
            } else {
                1.0 / (c * live) as f64
            });
        }
    }
    Ok(g.cross_entropy(logits, &ids, &weights)?)
}

/// `lambda * l_c + (1 - lambda) * l_g`; the boundaries return the operand itself.
pub fn dual_loss(g: &mut Graph, l_c: Option<Var>, l_g: Var, cfg: &LossConfig) -> Result<Var> {
    cfg.validate()?;
    if cfg.lambda == 0.0 {
        return Ok(l_g);
    }
    let l_c = l_c.ok_or_else(|| {
        ObjectiveError::InvalidConfig("lambda > 0 needs a contrastive loss".into())
    })?;
    if cfg.lambda == 1.0 {
        return Ok(l_c);
    }
    let a = g.scale(l_c, cfg.lambda);
    let b = g.scale(l_g, 1.0 - cfg.lambda);
    Ok(g.add(a, b)?)
}

pub fn dual_loss_value(l_c: f64, l_g: f64, lambda: f64) -> f64 {
    if lambda == 0.0 {
        l_g
    } else if lambda == 1.0 {
        l_c
    } else {
        lambda * l_c + (1.0 - lambda) * l_g
    }
}
