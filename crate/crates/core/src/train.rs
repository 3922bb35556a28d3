//! Joint NLL + frequency-estimation training: Adam for the first epochs, then
//! plain SGD, each phase with its own global-norm clipping threshold.

use std::fmt;
use std::time::Instant;

use log::info;

use crate::corpus::ParallelCorpus;
use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::model::{Dropout, Network, Seq2Seq};
use crate::params::{Gradients, ParamStore};
use crate::rng::Rng;
use crate::wfe::{wfe_forward_graph, wfe_loss_graph, TrueFrequency, WfeLossConfig};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Epochs trained with Adam before switching to SGD.
    pub adam_epochs: usize,
    pub lr_adam: f64,
    pub lr_sgd: f64,
    pub clip_adam: f64,
    pub clip_sgd: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Stop after this many epochs without a validation improvement.
    pub patience: usize,
    pub dropout: f64,
    /// Weight of the frequency-estimation loss; 0 trains the plain baseline.
    pub wfe_weight: f64,
    pub seed: u64,
    /// Record wall-clock seconds in the log; off gives byte-identical logs.
    pub timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam_epochs: 5,
            lr_adam: 0.001,
            lr_sgd: 0.01,
            clip_adam: 10.0,
            clip_sgd: 5.0,
            batch_size: 16,
            max_epochs: 15,
            patience: 3,
            dropout: 0.3,
            wfe_weight: 1.0,
            seed: 1,
            timing: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lr_adam", self.lr_adam),
            ("lr_sgd", self.lr_sgd),
            ("clip_adam", self.clip_adam),
            ("clip_sgd", self.clip_sgd),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("{name} must be > 0, got {v}")));
            }
        }
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.max_epochs < 1 {
            return Err(Error::Config("max_epochs must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        if !(self.wfe_weight >= 0.0 && self.wfe_weight.is_finite()) {
            return Err(Error::Config(format!("wfe_weight must be >= 0, got {}", self.wfe_weight)));
        }
        Ok(())
    }

    pub fn phase(&self, epoch: usize) -> Phase {
        if epoch <= self.adam_epochs {
            Phase::Adam
        } else {
            Phase::Sgd
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Adam,
    Sgd,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Adam => "adam",
            Phase::Sgd => "sgd",
        })
    }
}

/// Per-example loss terms; `wfe` is 0 for a model without the head.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct JointLoss {
    pub nll: f64,
    pub wfe: f64,
    pub total: f64,
}

impl JointLoss {
    fn accumulate(&mut self, other: JointLoss) {
        self.nll += other.nll;
        self.wfe += other.wfe;
        self.total += other.total;
    }

    fn mean(self, n: usize) -> JointLoss {
        let n = n.max(1) as f64;
        JointLoss {
            nll: self.nll / n,
            wfe: self.wfe / n,
            total: self.total / n,
        }
    }
}

pub struct JointGraph {
    pub nll: Var,
    pub wfe: Option<Var>,
    pub total: Var,
}

/// `nll + λ · wfe_loss(â, a*)`, where `a*` counts the target tokens.
pub fn joint_loss_graph(
    net: &Network,
    tape: &mut Tape,
    src: &[usize],
    tgt: &[usize],
    loss_cfg: &WfeLossConfig,
    lambda: f64,
    dropout: &mut Dropout,
) -> Result<JointGraph> {
    let (nll, enc) = net.nll_graph(tape, src, tgt, dropout)?;
    let Some(p) = net.ids.wfe.as_ref() else {
        if lambda != 0.0 {
            return Err(Error::Config(
                "nonzero wfe_weight needs a model with the estimation head".into(),
            ));
        }
        return Ok(JointGraph {
            nll,
            wfe: None,
            total: nll,
        });
    };
    let est = wfe_forward_graph(tape, enc.states, p)?;
    let a_star = TrueFrequency::from_target(tgt, net.config.tgt_vocab_size)?;
    let wfe = wfe_loss_graph(tape, est.a_hat, &a_star, loss_cfg)?;
    let total = if lambda == 0.0 {
        nll
    } else {
        let weighted = tape.scale(wfe, lambda);
        tape.add(nll, weighted)?
    };
    Ok(JointGraph {
        nll,
        wfe: Some(wfe),
        total,
    })
}

fn values(tape: &Tape, g: &JointGraph) -> JointLoss {
    JointLoss {
        nll: tape.value(g.nll).item(),
        wfe: g.wfe.map_or(0.0, |w| tape.value(w).item()),
        total: tape.value(g.total).item(),
    }
}

/// Loss terms without dropout.
pub fn joint_loss(
    model: &Seq2Seq,
    src: &[usize],
    tgt: &[usize],
    loss_cfg: &WfeLossConfig,
    lambda: f64,
) -> Result<JointLoss> {
    let mut tape = Tape::new(&model.params);
    let g = joint_loss_graph(&model.net, &mut tape, src, tgt, loss_cfg, lambda, &mut Dropout::off())?;
    Ok(values(&tape, &g))
}

/// Mean loss terms over a corpus without dropout.
pub fn evaluate(
    model: &Seq2Seq,
    corpus: &ParallelCorpus,
    loss_cfg: &WfeLossConfig,
    lambda: f64,
) -> Result<JointLoss> {
    let mut sum = JointLoss::default();
    for (src, tgt) in &corpus.pairs {
        sum.accumulate(joint_loss(model, src, tgt, loss_cfg, lambda)?);
    }
    Ok(sum.mean(corpus.len()))
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, t)| vec![0.0; t.len()]).collect();
        Adam {
            lr,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients) {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        for (id, g) in grads.iter() {
            let (m, v) = (&mut self.m[id.index()], &mut self.v[id.index()]);
            let p = store.get_mut(id).data_mut();
            for i in 0..g.len() {
                m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                let m_hat = m[i] / c1;
                let v_hat = v[i] / c2;
                p[i] -= self.lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
            }
        }
    }
}

pub fn sgd_step(store: &mut ParamStore, grads: &Gradients, lr: f64) {
    for (id, g) in grads.iter() {
        for (p, g) in store.get_mut(id).data_mut().iter_mut().zip(g) {
            *p -= lr * g;
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub phase: Phase,
    pub train_nll: f64,
    pub train_wfe: f64,
    pub val_nll: f64,
    pub val_wfe: f64,
    pub seconds: f64,
}

impl EpochLog {
    pub fn to_tsv(&self) -> String {
        format!(
            "{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{:.3}",
            self.epoch, self.phase, self.train_nll, self.train_wfe, self.val_nll, self.val_wfe, self.seconds
        )
    }
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: Seq2Seq,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn log_tsv(&self) -> String {
        self.epochs.iter().map(|e| e.to_tsv() + "\n").collect()
    }
}

const DROPOUT_STREAM: u64 = 1 << 40;

/// One optimizer step over `batch`; returns the summed loss terms.
fn batch_gradients(
    model: &Seq2Seq,
    corpus: &ParallelCorpus,
    batch: &[usize],
    loss_cfg: &WfeLossConfig,
    cfg: &TrainConfig,
    stream: u64,
) -> Result<(Gradients, JointLoss)> {
    let mut grads = Gradients::zeros_like(&model.params);
    let mut sum = JointLoss::default();
    for (i, &ex) in batch.iter().enumerate() {
        let (src, tgt) = &corpus.pairs[ex];
        let mut rng = Rng::derive(cfg.seed, stream + i as u64);
        let mut dropout = Dropout::train(cfg.dropout, &mut rng);
        let mut tape = Tape::new(&model.params);
        let g = joint_loss_graph(&model.net, &mut tape, src, tgt, loss_cfg, cfg.wfe_weight, &mut dropout)?;
        sum.accumulate(values(&tape, &g));
        grads.add_assign(&tape.backward(g.total));
    }
    grads.scale(1.0 / batch.len() as f64);
    Ok((grads, sum))
}

pub fn train(
    model: Seq2Seq,
    train_set: &ParallelCorpus,
    val_set: &ParallelCorpus,
    loss_cfg: &WfeLossConfig,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train_with(model, train_set, val_set, loss_cfg, cfg, |_| {})
}

/// Like [`train`], calling `on_epoch` after every epoch.
pub fn train_with(
    mut model: Seq2Seq,
    train_set: &ParallelCorpus,
    val_set: &ParallelCorpus,
    loss_cfg: &WfeLossConfig,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainReport> {
    cfg.validate()?;
    loss_cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Input("training and validation sets must be nonempty".into()));
    }
    if cfg.wfe_weight > 0.0 && !model.has_wfe() {
        return Err(Error::Config(
            "nonzero wfe_weight needs a model with the estimation head".into(),
        ));
    }

    let mut adam = Adam::new(&model.params, cfg.lr_adam);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best = (f64::INFINITY, 0usize, model.params.clone());
    let mut epochs = Vec::new();
    let mut since_best = 0;
    let mut stopped_early = false;

    for epoch in 1..=cfg.max_epochs {
        let start = Instant::now();
        let phase = cfg.phase(epoch);
        Rng::derive(cfg.seed, epoch as u64).shuffle(&mut order);
        let mut sum = JointLoss::default();
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let stream = DROPOUT_STREAM + ((epoch as u64) << 24) + (b as u64) * cfg.batch_size as u64;
            let (mut grads, loss) = batch_gradients(&model, train_set, batch, loss_cfg, cfg, stream)?;
            let mean = loss.total / batch.len() as f64;
            let norm = grads.global_norm();
            if !mean.is_finite() || !norm.is_finite() {
                return Err(Error::Diverged {
                    epoch,
                    batch: b,
                    loss: if mean.is_finite() { norm } else { mean },
                });
            }
            sum.accumulate(loss);
            match phase {
                Phase::Adam => {
                    grads.clip_global_norm(cfg.clip_adam);
                    adam.step(&mut model.params, &grads);
                }
                Phase::Sgd => {
                    grads.clip_global_norm(cfg.clip_sgd);
                    sgd_step(&mut model.params, &grads, cfg.lr_sgd);
                }
            }
        }
        let train_loss = sum.mean(train_set.len());
        let val = evaluate(&model, val_set, loss_cfg, cfg.wfe_weight)?;
        if !val.total.is_finite() {
            return Err(Error::NonFinite(format!("validation loss at epoch {epoch}")));
        }
        let log = EpochLog {
            epoch,
            phase,
            train_nll: train_loss.nll,
            train_wfe: train_loss.wfe,
            val_nll: val.nll,
            val_wfe: val.wfe,
            seconds: if cfg.timing { start.elapsed().as_secs_f64() } else { 0.0 },
        };
        info!("{}", log.to_tsv());
        on_epoch(&log);
        epochs.push(log);

        if val.total < best.0 {
            best = (val.total, epoch, model.params.clone());
            since_best = 0;
        } else {
            since_best += 1;
            if cfg.patience > 0 && since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (best_val_loss, best_epoch, params) = best;
    model.params = params;
    Ok(TrainReport {
        model,
        epochs,
        best_epoch,
        best_val_loss,
        stopped_early,
    })
}
