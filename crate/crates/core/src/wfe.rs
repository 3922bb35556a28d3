//! Word-frequency estimation head.
//!
//! From the encoder columns `H^s` (`H x I`):
//!
//! ```text
//! r = W_r2 · Σ_i (W_r1 · h_i)                        frequency
//! g = W_g2 · concat(rowmax(W_g1 · H^s), rowmin(W_g1 · H^s))   occurrence
//! r̂ = relu(r),  ĝ = sigmoid(g),  â = r̂ ⊙ ĝ
//! ```
//!
//! and is trained with the asymmetric ε-insensitive loss
//! `Σ_m c1·max(0, â−a*−ε)^b + c2·max(0, a*−â−ε)^b`.

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::model::{EncoderStates, Seq2Seq, INIT_SCALE};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::{relu, sigmoid};

pub const W_R1: &str = "wfe.W_r1";
pub const W_R2: &str = "wfe.W_r2";
pub const W_G1: &str = "wfe.W_g1";
pub const W_G2: &str = "wfe.W_g2";

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WfeBiases {
    pub r1: ParamId,
    pub r2: ParamId,
    pub g1: ParamId,
    pub g2: ParamId,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WfeParams {
    pub w_r1: ParamId,
    pub w_r2: ParamId,
    pub w_g1: ParamId,
    pub w_g2: ParamId,
    pub bias: Option<WfeBiases>,
}

impl WfeParams {
    pub fn register(
        store: &mut ParamStore,
        hidden: usize,
        vocab: usize,
        bias: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        let s = INIT_SCALE;
        let w_r1 = store.add_uniform(W_R1, &[hidden, hidden], s, rng)?;
        let w_r2 = store.add_uniform(W_R2, &[vocab, hidden], s, rng)?;
        let w_g1 = store.add_uniform(W_G1, &[hidden, hidden], s, rng)?;
        let w_g2 = store.add_uniform(W_G2, &[vocab, 2 * hidden], s, rng)?;
        let bias = if bias {
            Some(WfeBiases {
                r1: store.add_uniform("wfe.b_r1", &[hidden], s, rng)?,
                r2: store.add_uniform("wfe.b_r2", &[vocab], s, rng)?,
                g1: store.add_uniform("wfe.b_g1", &[hidden], s, rng)?,
                g2: store.add_uniform("wfe.b_g2", &[vocab], s, rng)?,
            })
        } else {
            None
        };
        Ok(WfeParams {
            w_r1,
            w_r2,
            w_g1,
            w_g2,
            bias,
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WfeEstimate {
    pub r: Vec<f64>,
    pub g: Vec<f64>,
    pub r_hat: Vec<f64>,
    pub g_hat: Vec<f64>,
    pub a_hat: Vec<f64>,
}

impl WfeEstimate {
    /// Activates raw `(r, g)` scores.
    pub fn from_scores(r: Vec<f64>, g: Vec<f64>) -> Self {
        let r_hat: Vec<f64> = r.iter().map(|&x| relu(x)).collect();
        let g_hat: Vec<f64> = g.iter().map(|&x| sigmoid(x)).collect();
        let a_hat = r_hat.iter().zip(&g_hat).map(|(a, b)| a * b).collect();
        WfeEstimate {
            r,
            g,
            r_hat,
            g_hat,
            a_hat,
        }
    }

    /// An estimate given directly in activated form; `r`/`g` mirror the inputs.
    pub fn from_activated(r_hat: Vec<f64>, g_hat: Vec<f64>) -> Self {
        let a_hat = r_hat.iter().zip(&g_hat).map(|(a, b)| a * b).collect();
        WfeEstimate {
            r: r_hat.clone(),
            g: g_hat.clone(),
            r_hat,
            g_hat,
            a_hat,
        }
    }

    pub fn len(&self) -> usize {
        self.a_hat.len()
    }

    pub fn is_empty(&self) -> bool {
        self.a_hat.is_empty()
    }
}

pub struct WfeGraph {
    pub r: Var,
    pub g: Var,
    pub r_hat: Var,
    pub g_hat: Var,
    pub a_hat: Var,
}

pub fn wfe_forward_graph(tape: &mut Tape, states: Var, p: &WfeParams) -> Result<WfeGraph> {
    let (hidden, positions) = tape.value(states).dims2();
    if positions == 0 {
        return Err(Error::Input("WFE needs at least one encoder state".into()));
    }
    let w_r1 = tape.param(p.w_r1);
    if tape.value(w_r1).cols() != hidden {
        return Err(Error::dim("wfe_forward", tape.value(w_r1).shape(), &[hidden, positions]));
    }
    let h_r1 = tape.matmul(w_r1, states)?;
    let mut h_r = tape.row_sum(h_r1);
    let w_g1 = tape.param(p.w_g1);
    let h_g1 = tape.matmul(w_g1, states)?;
    let mut pos = tape.row_max(h_g1)?;
    let mut neg = tape.row_min(h_g1)?;
    if let Some(b) = &p.bias {
        // Column-broadcast biases commute with the sum and the pooling.
        let b_r1 = tape.param(b.r1);
        let summed = tape.scale(b_r1, positions as f64);
        h_r = tape.add(h_r, summed)?;
        let b_g1 = tape.param(b.g1);
        pos = tape.add(pos, b_g1)?;
        neg = tape.add(neg, b_g1)?;
    }
    let w_r2 = tape.param(p.w_r2);
    let mut r = tape.matmul(w_r2, h_r)?;
    if let Some(b) = &p.bias {
        let b_r2 = tape.param(b.r2);
        r = tape.add(r, b_r2)?;
    }
    let pooled = tape.concat(&[pos, neg]);
    let w_g2 = tape.param(p.w_g2);
    let mut g = tape.matmul(w_g2, pooled)?;
    if let Some(b) = &p.bias {
        let b_g2 = tape.param(b.g2);
        g = tape.add(g, b_g2)?;
    }
    let r_hat = tape.relu(r);
    let g_hat = tape.sigmoid(g);
    let a_hat = tape.mul(r_hat, g_hat)?;
    Ok(WfeGraph {
        r,
        g,
        r_hat,
        g_hat,
        a_hat,
    })
}

impl Seq2Seq {
    pub fn wfe_params(&self) -> Result<&WfeParams> {
        self.net
            .ids
            .wfe
            .as_ref()
            .ok_or_else(|| Error::State("model has no word-frequency-estimation head".into()))
    }

    pub fn wfe_estimate(&self, enc: &EncoderStates) -> Result<WfeEstimate> {
        let p = self.wfe_params()?;
        let mut tape = Tape::new(&self.params);
        let states = tape.leaf(enc.states.clone());
        let gr = wfe_forward_graph(&mut tape, states, p)?;
        Ok(WfeEstimate {
            r: tape.value(gr.r).data().to_vec(),
            g: tape.value(gr.g).data().to_vec(),
            r_hat: tape.value(gr.r_hat).data().to_vec(),
            g_hat: tape.value(gr.g_hat).data().to_vec(),
            a_hat: tape.value(gr.a_hat).data().to_vec(),
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WfeLossConfig {
    pub epsilon: f64,
    pub exponent: u32,
    /// Weight on over-estimation.
    pub c1: f64,
    /// Weight on under-estimation.
    pub c2: f64,
}

impl Default for WfeLossConfig {
    fn default() -> Self {
        WfeLossConfig {
            epsilon: 0.25,
            exponent: 2,
            c1: 0.2,
            c2: 1.0,
        }
    }
}

impl WfeLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epsilon.is_nan() || self.epsilon < 0.0 {
            return Err(Error::Config(format!("epsilon {} must be >= 0", self.epsilon)));
        }
        if self.exponent < 1 {
            return Err(Error::Config("loss exponent must be >= 1".into()));
        }
        if !(0.0 < self.c1 && self.c1 < self.c2) {
            return Err(Error::Config(format!(
                "need 0 < c1 < c2, got c1={} c2={}",
                self.c1, self.c2
            )));
        }
        Ok(())
    }
}

/// Reference word counts `a*` over the target vocabulary.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TrueFrequency {
    pub counts: Vec<u32>,
}

impl TrueFrequency {
    /// Counts every token of `target`, EOS included.
    pub fn from_target(target: &[usize], vocab_size: usize) -> Result<Self> {
        let mut counts = vec![0u32; vocab_size];
        for &t in target {
            *counts
                .get_mut(t)
                .ok_or_else(|| Error::Input(format!("target id {t} >= vocab size {vocab_size}")))? += 1;
        }
        Ok(TrueFrequency { counts })
    }

    pub fn as_f64(&self) -> Vec<f64> {
        self.counts.iter().map(|&c| c as f64).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().map(|&c| c as u64).sum()
    }
}

/// Loss value on plain vectors.
pub fn wfe_loss(a_hat: &[f64], a_star: &TrueFrequency, cfg: &WfeLossConfig) -> Result<f64> {
    if a_hat.len() != a_star.counts.len() {
        return Err(Error::dim("wfe_loss", &[a_hat.len()], &[a_star.counts.len()]));
    }
    let b = cfg.exponent as i32;
    Ok(a_hat
        .iter()
        .zip(&a_star.counts)
        .map(|(&est, &truth)| {
            let truth = truth as f64;
            let over = relu(est - truth - cfg.epsilon);
            let under = relu(truth - est - cfg.epsilon);
            cfg.c1 * over.powi(b) + cfg.c2 * under.powi(b)
        })
        .sum())
}

pub fn wfe_loss_graph(
    tape: &mut Tape,
    a_hat: Var,
    a_star: &TrueFrequency,
    cfg: &WfeLossConfig,
) -> Result<Var> {
    let m = tape.value(a_hat).len();
    if m != a_star.counts.len() {
        return Err(Error::dim("wfe_loss", &[m], &[a_star.counts.len()]));
    }
    let b = cfg.exponent as i32;
    let upper = tape.constant_vector(a_star.counts.iter().map(|&c| c as f64 + cfg.epsilon).collect());
    let lower = tape.constant_vector(a_star.counts.iter().map(|&c| c as f64 - cfg.epsilon).collect());
    let over = tape.sub(a_hat, upper)?;
    let over = tape.relu(over);
    let over = tape.powi(over, b);
    let under = tape.sub(lower, a_hat)?;
    let under = tape.relu(under);
    let under = tape.powi(under, b);
    let over = tape.scale(over, cfg.c1);
    let under = tape.scale(under, cfg.c2);
    let d = tape.add(over, under)?;
    Ok(tape.sum(d))
}

/// `floor(â + 0.5)` per word.
pub fn quantize(a_hat: &[f64]) -> Vec<u64> {
    a_hat.iter().map(|&a| (a + 0.5).floor().max(0.0) as u64).collect()
}
