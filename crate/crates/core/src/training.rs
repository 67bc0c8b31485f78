//! Fine-tuning loop: persona/offer embeddings, InfoNCE, teacher-forced
//! cross-entropy, their convex mix, Adam with global-norm clipping, per-epoch
//! validation and checkpoint selection.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DatasetSplit, TrainingExample};
use crate::model::{save_checkpoint, Checkpoint, Decoded, Encoded, ModelError, Seq2Seq};
use crate::objectives::{
    cosine_sim, dual_loss, infonce, sequence_generation_loss, ContrastiveGroup, LossConfig,
    ObjectiveError,
};
use crate::tensor::{Binder, Graph, ParamStore, Tensor, TensorError, Var};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("training diverged at epoch {epoch}, batch {batch}: loss = {loss}")]
    Diverged {
        epoch: usize,
        batch: usize,
        loss: f64,
    },
    #[error("loss log is empty")]
    EmptyLog,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    BestValLoss,
    FixedEpoch(usize),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    pub loss: LossConfig,
    pub seed: u64,
    /// When set, every epoch's weights are written as `epoch_NNN.ckpt`.
    pub checkpoint_dir: Option<PathBuf>,
    pub select_by: Selection,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            batch_size: 16,
            learning_rate: 3e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(1.0),
            loss: LossConfig::default(),
            seed: 0,
            checkpoint_dir: None,
            select_by: Selection::BestValLoss,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            ));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || self.eps <= 0.0
        {
            return bad("adam betas must lie in [0, 1) and eps be positive".into());
        }
        if let Some(c) = self.clip_norm {
            if !(c.is_finite() && c > 0.0) {
                return bad(format!("clip_norm must be > 0, got {c}"));
            }
        }
        if let Selection::FixedEpoch(k) = self.select_by {
            if k == 0 || k > self.epochs {
                return bad(format!("fixed epoch {k} outside 1..={}", self.epochs));
            }
        }
        self.loss.validate()?;
        Ok(())
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.tensor.numel()]).collect();
        Self {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn steps(&self) -> i32 {
        self.t
    }

    /// Apply one update from the gradients accumulated in `store`.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for ((p, m), v) in store.iter_mut().zip(&mut self.m).zip(&mut self.v) {
            let w = p.tensor.data_mut();
            for i in 0..w.len() {
                let g = p.grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                if m[i] != 0.0 {
                    w[i] -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
                }
            }
        }
    }
}

/// Global L2 norm of all gradients.
pub fn grad_norm(store: &ParamStore) -> f64 {
    store
        .iter()
        .flat_map(|p| p.grad.iter())
        .map(|g| g * g)
        .sum::<f64>()
        .sqrt()
}

/// Rescale gradients so their global norm is at most `max_norm`; returns the pre-clip norm.
pub fn clip_grad_norm(store: &mut ParamStore, max_norm: f64) -> f64 {
    let norm = grad_norm(store);
    if norm > max_norm {
        let s = max_norm / norm;
        for p in store.iter_mut() {
            p.grad.iter_mut().for_each(|g| *g *= s);
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_final: f64,
    pub train_contrastive: f64,
    pub train_generation: f64,
    pub val_final: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossLog {
    pub records: Vec<EpochRecord>,
}

pub const LOSS_LOG_HEADER: &str = "epoch,train_final,train_contrastive,train_generation,val_final";

impl LossLog {
    pub fn to_csv(&self) -> Result<String> {
        if self.records.is_empty() {
            return Err(TrainError::EmptyLog);
        }
        let mut out = String::from(LOSS_LOG_HEADER);
        out.push('\n');
        for r in &self.records {
            out.push_str(&format!(
                "{},{:.16e},{:.16e},{:.16e},{:.16e}\n",
                r.epoch, r.train_final, r.train_contrastive, r.train_generation, r.val_final
            ));
        }
        Ok(out)
    }
}

pub fn export_loss_log(log: &LossLog, path: &Path) -> Result<()> {
    let csv = log.to_csv()?;
    let mut f = fs::File::create(path)?;
    f.write_all(csv.as_bytes())?;
    Ok(())
}

/// Tokenized training example.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub persona: Vec<u32>,
    pub accepted: Vec<Vec<u32>>,
    pub rejected: Vec<Vec<u32>>,
}

pub fn prepare(model: &Seq2Seq, examples: &[TrainingExample]) -> Vec<Prepared> {
    examples
        .iter()
        .map(|ex| Prepared {
            persona: model.persona_input(&ex.persona),
            accepted: ex
                .accepted
                .iter()
                .map(|o| model.offer_ids(&o.text))
                .collect(),
            rejected: ex
                .rejected
                .iter()
                .map(|o| model.offer_ids(&o.text))
                .collect(),
        })
        .collect()
}

struct Forward {
    enc: Encoded,
    dec: Decoded,
    /// Offers in decode order: accepted of every persona, then rejected.
    n_accepted: usize,
    groups: Vec<ContrastiveGroup>,
    targets: Vec<Vec<u32>>,
}

/// Encode the batch personas and decode their offers (rejected ones only if `with_rejected`).
fn forward(
    model: &Seq2Seq,
    g: &mut Graph,
    b: &mut Binder,
    batch: &[&Prepared],
    with_rejected: bool,
) -> Result<Forward> {
    let personas: Vec<Vec<u32>> = batch.iter().map(|p| p.persona.clone()).collect();
    let enc = model.encode_batch(g, b, &personas)?;
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    let mut accepted_rows = Vec::with_capacity(batch.len());
    for (i, p) in batch.iter().enumerate() {
        let start = inputs.len();
        for offer in &p.accepted {
            let (inp, tgt) = Seq2Seq::teacher_forcing_pair(offer);
            inputs.push((inp, i));
            targets.push(tgt);
        }
        accepted_rows.push(start..inputs.len());
    }
    let n_accepted = inputs.len();
    let mut groups = Vec::new();
    if with_rejected {
        for (i, p) in batch.iter().enumerate() {
            let start = inputs.len();
            for offer in &p.rejected {
                inputs.push((Seq2Seq::teacher_forcing_pair(offer).0, i));
            }
            groups.push(ContrastiveGroup {
                persona: i,
                positives: accepted_rows[i].clone().collect(),
                negatives: (start..inputs.len()).collect(),
            });
        }
    }
    let dec = model.decode_batch(g, b, &enc, &inputs)?;
    Ok(Forward {
        enc,
        dec,
        n_accepted,
        groups,
        targets,
    })
}

struct BatchLoss {
    total: Var,
    contrastive: f64,
    generation: f64,
}

fn batch_loss(
    model: &Seq2Seq,
    g: &mut Graph,
    b: &mut Binder,
    batch: &[&Prepared],
    cfg: &LossConfig,
) -> Result<BatchLoss> {
    let contrastive = cfg.lambda > 0.0;
    let f = forward(model, g, b, batch, contrastive)?;
    let l_c = if contrastive {
        let z = Seq2Seq::mean_pool(g, f.enc.states, &f.enc.spans)?;
        let o = Seq2Seq::mean_pool(g, f.dec.states, &f.dec.spans)?;
        Some(infonce(g, z, o, &f.groups, cfg)?)
    } else {
        None
    };
    let l_g = if cfg.lambda < 1.0 {
        let rows = f.dec.spans[f.n_accepted - 1].end();
        let acc = if rows == g.shape(f.dec.states)[0] {
            f.dec.states
        } else {
            g.slice(f.dec.states, 0, 0, rows)?
        };
        let logits = model.logits(g, b, acc)?;
        sequence_generation_loss(g, logits, &f.targets)?
    } else {
        g.constant(Tensor::scalar(0.0))
    };
    let total = dual_loss(g, l_c, l_g, cfg)?;
    Ok(BatchLoss {
        total,
        contrastive: l_c.map_or(0.0, |v| g.value(v).item()),
        generation: g.value(l_g).item(),
    })
}

/// `L_Final` of one batch as a graph node, exactly as the training step builds it.
pub fn batch_objective(
    model: &Seq2Seq,
    g: &mut Graph,
    b: &mut Binder,
    batch: &[&Prepared],
    cfg: &LossConfig,
) -> Result<Var> {
    Ok(batch_loss(model, g, b, batch, cfg)?.total)
}

/// Mean `L_Final` over `data` without updating parameters.
pub fn evaluate_loss(
    model: &Seq2Seq,
    data: &[Prepared],
    batch_size: usize,
    cfg: &LossConfig,
) -> Result<f64> {
    if data.is_empty() {
        return Err(TrainError::EmptySplit("evaluation"));
    }
    let mut sum = 0.0;
    for chunk in data.chunks(batch_size.max(1)) {
        let batch: Vec<&Prepared> = chunk.iter().collect();
        let mut g = Graph::new();
        let mut b = Binder::frozen(&model.params);
        let l = batch_loss(model, &mut g, &mut b, &batch, cfg)?;
        sum += g.value(l.total).item() * chunk.len() as f64;
    }
    Ok(sum / data.len() as f64)
}

/// Train with a per-epoch callback (e.g. for progress reporting).
pub fn train_with<F: FnMut(&EpochRecord)>(
    mut model: Seq2Seq,
    data: &DatasetSplit,
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<(Checkpoint, LossLog)> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if data.val.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let train = prepare(&model, &data.train);
    let val = prepare(&model, &data.val);
    let mut adam = Adam::new(
        &model.params,
        cfg.learning_rate,
        cfg.beta1,
        cfg.beta2,
        cfg.eps,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = LossLog::default();
    let mut selected: Option<(ParamStore, usize, f64)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let (mut s_final, mut s_c, mut s_g) = (0.0, 0.0, 0.0);
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Prepared> = idx.iter().map(|&i| &train[i]).collect();
            let mut g = Graph::new();
            let mut b = Binder::new(&model.params);
            let l = batch_loss(&model, &mut g, &mut b, &batch, &cfg.loss)?;
            let value = g.value(l.total).item();
            if !value.is_finite() {
                return Err(TrainError::Diverged {
                    epoch,
                    batch: bi + 1,
                    loss: value,
                });
            }
            g.backward(l.total)?;
            model.params.zero_grad();
            model.params.accumulate_grads(&g, &b);
            drop(g);
            if let Some(c) = cfg.clip_norm {
                let norm = clip_grad_norm(&mut model.params, c);
                if !norm.is_finite() {
                    return Err(TrainError::Diverged {
                        epoch,
                        batch: bi + 1,
                        loss: norm,
                    });
                }
            }
            adam.step(&mut model.params);
            let w = idx.len() as f64;
            s_final += value * w;
            s_c += l.contrastive * w;
            s_g += l.generation * w;
        }
        let n = train.len() as f64;
        let val_final = evaluate_loss(&model, &val, cfg.batch_size, &cfg.loss)?;
        let rec = EpochRecord {
            epoch,
            train_final: s_final / n,
            train_contrastive: s_c / n,
            train_generation: s_g / n,
            val_final,
        };
        log.records.push(rec);
        on_epoch(&rec);
        if let Some(dir) = &cfg.checkpoint_dir {
            save_checkpoint(
                &dir.join(format!("epoch_{epoch:03}.ckpt")),
                &model,
                epoch as u64,
                val_final,
            )?;
        }
        let take = match cfg.select_by {
            Selection::BestValLoss => selected.as_ref().is_none_or(|s| val_final < s.2),
            Selection::FixedEpoch(k) => k == epoch,
        };
        if take {
            selected = Some((model.params.clone(), epoch, val_final));
        }
    }
    let (params, epoch, val_loss) = selected.expect("at least one epoch ran");
    model.params = params;
    model.params.zero_grad();
    Ok((
        Checkpoint {
            model,
            epoch: epoch as u64,
            val_loss,
        },
        log,
    ))
}

pub fn train(
    model: Seq2Seq,
    data: &DatasetSplit,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, LossLog)> {
    train_with(model, data, cfg, |_| {})
}

/// Persona embeddings and, per persona, its accepted and rejected offer embeddings.
pub struct EmbeddingSet {
    pub personas: Vec<Vec<f64>>,
    pub accepted: Vec<Vec<Vec<f64>>>,
    pub rejected: Vec<Vec<Vec<f64>>>,
}

pub fn embed_examples(
    model: &Seq2Seq,
    examples: &[TrainingExample],
    batch_size: usize,
) -> Result<EmbeddingSet> {
    let data = prepare(model, examples);
    let d = model.config.d_model;
    let mut set = EmbeddingSet {
        personas: Vec::new(),
        accepted: Vec::new(),
        rejected: Vec::new(),
    };
    for chunk in data.chunks(batch_size.max(1)) {
        let batch: Vec<&Prepared> = chunk.iter().collect();
        let mut g = Graph::new();
        let mut b = Binder::frozen(&model.params);
        let f = forward(model, &mut g, &mut b, &batch, true)?;
        let z = Seq2Seq::mean_pool(&mut g, f.enc.states, &f.enc.spans)?;
        let o = Seq2Seq::mean_pool(&mut g, f.dec.states, &f.dec.spans)?;
        let rows = |v: Var, g: &Graph| -> Vec<Vec<f64>> {
            g.value(v).data().chunks(d).map(<[f64]>::to_vec).collect()
        };
        let offers = rows(o, &g);
        set.personas.extend(rows(z, &g));
        for grp in &f.groups {
            set.accepted
                .push(grp.positives.iter().map(|&i| offers[i].clone()).collect());
            set.rejected
                .push(grp.negatives.iter().map(|&i| offers[i].clone()).collect());
        }
    }
    Ok(set)
}

/// Mean over personas of mean cos(z, accepted) minus mean cos(z, rejected).
pub fn embedding_margin(model: &Seq2Seq, examples: &[TrainingExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(TrainError::EmptySplit("margin"));
    }
    let set = embed_examples(model, examples, 16)?;
    let mean_cos = |z: &[f64], vs: &[Vec<f64>]| -> Result<f64> {
        let mut s = 0.0;
        for v in vs {
            s += cosine_sim(z, v)?;
        }
        Ok(s / vs.len() as f64)
    };
    let mut total = 0.0;
    for ((z, acc), rej) in set.personas.iter().zip(&set.accepted).zip(&set.rejected) {
        total += mean_cos(z, acc)? - mean_cos(z, rej)?;
    }
    Ok(total / set.personas.len() as f64)
}
