//! Attentional encoder-decoder: 2-layer bidirectional LSTM encoder, 2-layer
//! LSTM decoder with global (bilinear) attention at the top layer, and an
//! output projection producing per-word scores.
//!
//! Each encoder direction has `H/2` units; the two directions are concatenated
//! so every encoder column is exactly `H`-dimensional. The decoder's initial
//! per-layer state is a linear map of the concatenated final encoder states
//! of the same layer. There is no input feeding.

use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::params::{ParamId, ParamStore};
use crate::rng::Rng;
use crate::tensor::Tensor;
use crate::vocab::{BOS, EOS};
use crate::wfe::WfeParams;

pub const LAYERS: usize = 2;
pub const INIT_SCALE: f64 = 0.08;

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub src_vocab_size: usize,
    pub tgt_vocab_size: usize,
    pub dropout: f64,
    /// Whether the word-frequency-estimation head is present.
    pub wfe_head: bool,
    /// Bias terms in the four WFE linear maps (off by default).
    pub wfe_bias: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 32,
            hidden_dim: 64,
            src_vocab_size: 0,
            tgt_vocab_size: 0,
            dropout: 0.3,
            wfe_head: true,
            wfe_bias: false,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.hidden_dim == 0 {
            return Err(Error::Config("embedding and hidden sizes must be >= 1".into()));
        }
        if !self.hidden_dim.is_multiple_of(2) {
            return Err(Error::Config(format!(
                "hidden size {} must be even (split across encoder directions)",
                self.hidden_dim
            )));
        }
        if self.src_vocab_size < 3 || self.tgt_vocab_size < 3 {
            return Err(Error::Config(
                "vocabularies must include the BOS, EOS and UNK symbols".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LstmParams {
    pub w: ParamId,
    pub b: ParamId,
    pub input: usize,
    pub hidden: usize,
}

impl LstmParams {
    fn register(
        store: &mut ParamStore,
        prefix: &str,
        input: usize,
        hidden: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let w = store.add_uniform(
            format!("{prefix}.W"),
            &[4 * hidden, input + hidden],
            INIT_SCALE,
            rng,
        )?;
        let b = store.add_uniform(format!("{prefix}.b"), &[4 * hidden], INIT_SCALE, rng)?;
        Ok(LstmParams {
            w,
            b,
            input,
            hidden,
        })
    }
}

/// One LSTM step. Gate rows of `W` are ordered input, forget, candidate, output.
pub fn lstm_cell(tape: &mut Tape, x: Var, h: Var, c: Var, p: &LstmParams) -> Result<(Var, Var)> {
    let xin = tape.value(x).len();
    let hin = tape.value(h).len();
    if xin != p.input || hin != p.hidden || tape.value(c).len() != p.hidden {
        return Err(Error::dim(
            "lstm_cell",
            &[xin, hin, tape.value(c).len()],
            &[p.input, p.hidden, p.hidden],
        ));
    }
    let n = p.hidden;
    let w = tape.param(p.w);
    let b = tape.param(p.b);
    let xh = tape.concat(&[x, h]);
    let wx = tape.matmul(w, xh)?;
    let z = tape.add(wx, b)?;
    let zi = tape.slice(z, 0, n);
    let zf = tape.slice(z, n, n);
    let zg = tape.slice(z, 2 * n, n);
    let zo = tape.slice(z, 3 * n, n);
    let i = tape.sigmoid(zi);
    let f = tape.sigmoid(zf);
    let g = tape.tanh(zg);
    let o = tape.sigmoid(zo);
    let fc = tape.mul(f, c)?;
    let ig = tape.mul(i, g)?;
    let c_next = tape.add(fc, ig)?;
    let tc = tape.tanh(c_next);
    let h_next = tape.mul(o, tc)?;
    Ok((h_next, c_next))
}

/// Inverted dropout on non-recurrent connections; inactive without an Rng.
pub struct Dropout<'r> {
    rate: f64,
    rng: Option<&'r mut Rng>,
}

impl<'r> Dropout<'r> {
    pub fn off() -> Self {
        Dropout { rate: 0.0, rng: None }
    }

    pub fn train(rate: f64, rng: &'r mut Rng) -> Self {
        Dropout {
            rate,
            rng: Some(rng),
        }
    }

    pub fn apply(&mut self, tape: &mut Tape, x: Var) -> Result<Var> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x);
        };
        if self.rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - self.rate);
        let n = tape.value(x).len();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.bernoulli(self.rate) { 0.0 } else { keep })
            .collect();
        let m = tape.constant_vector(mask);
        tape.mul(x, m)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub src_embed: ParamId,
    pub tgt_embed: ParamId,
    /// `[layer][direction]`, direction 0 = forward, 1 = backward.
    pub encoder: [[LstmParams; 2]; LAYERS],
    pub decoder: [LstmParams; LAYERS],
    pub init_h: [ParamId; LAYERS],
    pub init_c: [ParamId; LAYERS],
    pub attn: ParamId,
    pub combine: ParamId,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub wfe: Option<WfeParams>,
}

/// Encoder output: `H x I` matrix of column states plus per-layer final states.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderStates {
    pub states: Tensor,
    /// Per layer: concatenated (forward last, backward first) hidden and cell.
    pub finals: Vec<(Vec<f64>, Vec<f64>)>,
}

impl EncoderStates {
    pub fn len(&self) -> usize {
        self.states.cols()
    }

    pub fn is_empty(&self) -> bool {
        self.states.cols() == 0
    }
}

/// Per-layer decoder hidden and cell vectors after the previous step.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderState {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// Pre-softmax scores over the target vocabulary.
    pub logits: Vec<f64>,
    pub attention: Vec<f64>,
    pub state: DecoderState,
}

/// Encoder graph handles used by decoding and the WFE head.
pub struct EncodedGraph {
    pub states: Var,
    pub states_t: Var,
    pub init: Vec<(Var, Var)>,
    pub finals: Vec<(Var, Var)>,
}

pub struct StepGraph {
    pub logits: Var,
    pub attention: Var,
    pub state: Vec<(Var, Var)>,
}

/// Architecture and parameter handles; builds graphs against any tape whose
/// store has this network's layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub config: ModelConfig,
    pub ids: ModelParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Seq2Seq {
    pub net: Network,
    pub params: ParamStore,
}

impl Seq2Seq {
    /// Parameters drawn from `uniform(-0.08, 0.08)` in registration order.
    pub fn new(config: ModelConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let (d, h, m) = (config.embed_dim, config.hidden_dim, config.tgt_vocab_size);
        let half = h / 2;
        let s = INIT_SCALE;
        let mut store = ParamStore::new();
        let src_embed = store.add_uniform("embed.src", &[config.src_vocab_size, d], s, rng)?;
        let tgt_embed = store.add_uniform("embed.tgt", &[m, d], s, rng)?;
        let mut encoder = Vec::with_capacity(LAYERS);
        for layer in 0..LAYERS {
            let input = if layer == 0 { d } else { h };
            let fwd = LstmParams::register(&mut store, &format!("enc.l{layer}.fwd"), input, half, rng)?;
            let bwd = LstmParams::register(&mut store, &format!("enc.l{layer}.bwd"), input, half, rng)?;
            encoder.push([fwd, bwd]);
        }
        let mut decoder = Vec::with_capacity(LAYERS);
        for layer in 0..LAYERS {
            let input = if layer == 0 { d } else { h };
            decoder.push(LstmParams::register(&mut store, &format!("dec.l{layer}"), input, h, rng)?);
        }
        let mut init_h = Vec::with_capacity(LAYERS);
        let mut init_c = Vec::with_capacity(LAYERS);
        for layer in 0..LAYERS {
            init_h.push(store.add_uniform(format!("bridge.l{layer}.h"), &[h, h], s, rng)?);
            init_c.push(store.add_uniform(format!("bridge.l{layer}.c"), &[h, h], s, rng)?);
        }
        let attn = store.add_uniform("attn.W_a", &[h, h], s, rng)?;
        let combine = store.add_uniform("attn.W_c", &[h, 2 * h], s, rng)?;
        let out_w = store.add_uniform("out.W", &[m, h], s, rng)?;
        let out_b = store.add_uniform("out.b", &[m], s, rng)?;
        let wfe = if config.wfe_head {
            Some(WfeParams::register(&mut store, h, m, config.wfe_bias, rng)?)
        } else {
            None
        };
        let ids = ModelParams {
            src_embed,
            tgt_embed,
            encoder: [encoder[0], encoder[1]],
            decoder: [decoder[0], decoder[1]],
            init_h: [init_h[0], init_h[1]],
            init_c: [init_c[0], init_c[1]],
            attn,
            combine,
            out_w,
            out_b,
            wfe,
        };
        Ok(Seq2Seq {
            net: Network { config, ids },
            params: store,
        })
    }

    /// Same layout as [`Seq2Seq::new`] with every parameter set to zero.
    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let mut model = Seq2Seq::new(config, &mut Rng::new(0))?;
        model.params.fill(0.0);
        Ok(model)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.net.config
    }

    pub fn has_wfe(&self) -> bool {
        self.net.ids.wfe.is_some()
    }

    pub fn nll_loss(&self, src: &[usize], tgt: &[usize]) -> Result<f64> {
        let mut tape = Tape::new(&self.params);
        let (loss, _) = self.net.nll_graph(&mut tape, src, tgt, &mut Dropout::off())?;
        Ok(tape.value(loss).item())
    }

    pub fn encode(&self, src: &[usize]) -> Result<EncoderStates> {
        let mut tape = Tape::new(&self.params);
        let enc = self.net.encode_graph(&mut tape, src, &mut Dropout::off())?;
        Ok(EncoderStates {
            states: tape.value(enc.states).clone(),
            finals: enc
                .finals
                .iter()
                .map(|&(h, c)| (tape.value(h).data().to_vec(), tape.value(c).data().to_vec()))
                .collect(),
        })
    }

    pub fn initial_state(&self, enc: &EncoderStates) -> Result<DecoderState> {
        let mut tape = Tape::new(&self.params);
        let finals: Vec<(Var, Var)> = enc
            .finals
            .iter()
            .map(|(h, c)| (tape.constant_vector(h.clone()), tape.constant_vector(c.clone())))
            .collect();
        let init = self.net.bridge_graph(&mut tape, &finals)?;
        Ok(DecoderState {
            layers: init
                .iter()
                .map(|&(h, c)| (tape.value(h).data().to_vec(), tape.value(c).data().to_vec()))
                .collect(),
        })
    }

    /// One inference step: scores for the next word given the previous one.
    pub fn decode_step(
        &self,
        enc: &EncoderStates,
        state: &DecoderState,
        y_prev: usize,
    ) -> Result<StepOutput> {
        let h = self.net.config.hidden_dim;
        if enc.states.rows() != h {
            return Err(Error::dim("decode_step", enc.states.shape(), &[h]));
        }
        if state.layers.len() != LAYERS
            || state.layers.iter().any(|(a, b)| a.len() != h || b.len() != h)
        {
            return Err(Error::dim(
                "decode_step",
                &state.layers.iter().map(|(a, _)| a.len()).collect::<Vec<_>>(),
                &[h; LAYERS],
            ));
        }
        let mut tape = Tape::new(&self.params);
        let states = tape.leaf(enc.states.clone());
        let states_t = tape.transpose(states);
        let prev: Vec<(Var, Var)> = state
            .layers
            .iter()
            .map(|(h, c)| (tape.constant_vector(h.clone()), tape.constant_vector(c.clone())))
            .collect();
        let step = self.net.decode_step_graph(
            &mut tape,
            states,
            states_t,
            &prev,
            y_prev,
            &mut Dropout::off(),
        )?;
        Ok(StepOutput {
            logits: tape.value(step.logits).data().to_vec(),
            attention: tape.value(step.attention).data().to_vec(),
            state: DecoderState {
                layers: step
                    .state
                    .iter()
                    .map(|&(h, c)| (tape.value(h).data().to_vec(), tape.value(c).data().to_vec()))
                    .collect(),
            },
        })
    }
}

impl Network {
    fn check_source(&self, src: &[usize]) -> Result<()> {
        if src.is_empty() {
            return Err(Error::Input("empty source sequence".into()));
        }
        if let Some(&bad) = src.iter().find(|&&t| t >= self.config.src_vocab_size) {
            return Err(Error::Input(format!(
                "source token id {bad} outside vocabulary of size {}",
                self.config.src_vocab_size
            )));
        }
        Ok(())
    }

    fn check_target_token(&self, token: usize) -> Result<()> {
        if token >= self.config.tgt_vocab_size {
            return Err(Error::Input(format!(
                "target token id {token} outside vocabulary of size {}",
                self.config.tgt_vocab_size
            )));
        }
        Ok(())
    }

    pub fn encode_graph(
        &self,
        tape: &mut Tape,
        src: &[usize],
        dropout: &mut Dropout,
    ) -> Result<EncodedGraph> {
        self.check_source(src)?;
        let half = self.config.hidden_dim / 2;
        let emb = tape.param(self.ids.src_embed);
        let mut inputs = Vec::with_capacity(src.len());
        for &tok in src {
            let e = tape.row(emb, tok);
            inputs.push(dropout.apply(tape, e)?);
        }
        let mut finals = Vec::with_capacity(LAYERS);
        for (layer, dirs) in self.ids.encoder.iter().enumerate() {
            let zero = Tensor::zeros(&[half]);
            let mut fwd_out = Vec::with_capacity(inputs.len());
            let (mut h, mut c) = (tape.leaf(zero.clone()), tape.leaf(zero.clone()));
            for &x in &inputs {
                (h, c) = lstm_cell(tape, x, h, c, &dirs[0])?;
                fwd_out.push(h);
            }
            let (fwd_h, fwd_c) = (h, c);
            let mut bwd_out = vec![h; inputs.len()];
            let (mut h, mut c) = (tape.leaf(zero.clone()), tape.leaf(zero));
            for (i, &x) in inputs.iter().enumerate().rev() {
                (h, c) = lstm_cell(tape, x, h, c, &dirs[1])?;
                bwd_out[i] = h;
            }
            let final_h = tape.concat(&[fwd_h, h]);
            let final_c = tape.concat(&[fwd_c, c]);
            finals.push((final_h, final_c));
            let mut outputs = Vec::with_capacity(inputs.len());
            for (f, b) in fwd_out.into_iter().zip(bwd_out) {
                outputs.push(tape.concat(&[f, b]));
            }
            inputs = if layer + 1 < LAYERS {
                let mut next = Vec::with_capacity(outputs.len());
                for o in outputs {
                    next.push(dropout.apply(tape, o)?);
                }
                next
            } else {
                outputs
            };
        }
        let states = tape.hstack(&inputs)?;
        let states_t = tape.transpose(states);
        let init = self.bridge_graph(tape, &finals)?;
        Ok(EncodedGraph {
            states,
            states_t,
            init,
            finals,
        })
    }

    fn bridge_graph(&self, tape: &mut Tape, finals: &[(Var, Var)]) -> Result<Vec<(Var, Var)>> {
        let mut init = Vec::with_capacity(LAYERS);
        for (layer, &(fh, fc)) in finals.iter().enumerate() {
            let wh = tape.param(self.ids.init_h[layer]);
            let wc = tape.param(self.ids.init_c[layer]);
            let h = tape.matmul(wh, fh)?;
            let c = tape.matmul(wc, fc)?;
            init.push((h, c));
        }
        Ok(init)
    }

    pub fn decode_step_graph(
        &self,
        tape: &mut Tape,
        states: Var,
        states_t: Var,
        prev: &[(Var, Var)],
        y_prev: usize,
        dropout: &mut Dropout,
    ) -> Result<StepGraph> {
        self.check_target_token(y_prev)?;
        if prev.len() != LAYERS {
            return Err(Error::dim("decode_step", &[prev.len()], &[LAYERS]));
        }
        let emb = tape.param(self.ids.tgt_embed);
        let e = tape.row(emb, y_prev);
        let mut x = dropout.apply(tape, e)?;
        let mut next = Vec::with_capacity(LAYERS);
        for (layer, &(h, c)) in prev.iter().enumerate() {
            let (h2, c2) = lstm_cell(tape, x, h, c, &self.ids.decoder[layer])?;
            next.push((h2, c2));
            x = if layer + 1 < LAYERS {
                dropout.apply(tape, h2)?
            } else {
                h2
            };
        }
        let top = x;
        let wa = tape.param(self.ids.attn);
        let query = tape.matmul(wa, top)?;
        let scores = tape.matmul(states_t, query)?;
        let attention = tape.softmax(scores);
        let context = tape.matmul(states, attention)?;
        let joined = tape.concat(&[context, top]);
        let wc = tape.param(self.ids.combine);
        let pre = tape.matmul(wc, joined)?;
        let attentional = tape.tanh(pre);
        let attentional = dropout.apply(tape, attentional)?;
        let wo = tape.param(self.ids.out_w);
        let bo = tape.param(self.ids.out_b);
        let proj = tape.matmul(wo, attentional)?;
        let logits = tape.add(proj, bo)?;
        Ok(StepGraph {
            logits,
            attention,
            state: next,
        })
    }

    /// Teacher-forced `-Σ log p(y_j | y_<j, X)`; `tgt` must end with EOS.
    pub fn nll_graph(
        &self,
        tape: &mut Tape,
        src: &[usize],
        tgt: &[usize],
        dropout: &mut Dropout,
    ) -> Result<(Var, EncodedGraph)> {
        if tgt.is_empty() {
            return Err(Error::Input("empty target sequence".into()));
        }
        if tgt.last() != Some(&EOS) {
            return Err(Error::Input("target sequence must end with EOS".into()));
        }
        for &t in tgt {
            self.check_target_token(t)?;
        }
        let enc = self.encode_graph(tape, src, dropout)?;
        let mut state = enc.init.clone();
        let mut prev = BOS;
        let mut terms = Vec::with_capacity(tgt.len());
        for &y in tgt {
            let step = self.decode_step_graph(tape, enc.states, enc.states_t, &state, prev, dropout)?;
            let logp = tape.log_softmax(step.logits);
            terms.push(tape.pick(logp, y));
            state = step.state;
            prev = y;
        }
        let all = tape.concat(&terms);
        let total = tape.sum(all);
        Ok((tape.scale(total, -1.0), enc))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::grad_check;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            embed_dim: 3,
            hidden_dim: 4,
            src_vocab_size: 7,
            tgt_vocab_size: 6,
            dropout: 0.0,
            wfe_head: false,
            wfe_bias: false,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = tiny_config();
        c.hidden_dim = 5;
        assert!(c.validate().is_err());
        c.hidden_dim = 0;
        assert!(c.validate().is_err());
        let mut c = tiny_config();
        c.tgt_vocab_size = 2;
        assert!(c.validate().is_err());
        assert!(tiny_config().validate().is_ok());
    }

    #[test]
    fn lstm_zero_weights_zero_cell() {
        let mut s = ParamStore::new();
        let p = LstmParams::register(&mut s, "l", 2, 3, &mut Rng::new(1)).unwrap();
        s.fill(0.0);
        let mut t = Tape::new(&s);
        let x = t.constant_vector(vec![0.7, -0.2]);
        let h = t.constant_vector(vec![0.1, 0.2, 0.3]);
        let c = t.constant_vector(vec![0.0; 3]);
        let (h2, c2) = lstm_cell(&mut t, x, h, c, &p).unwrap();
        assert_eq!(t.value(h2).data(), &[0.0; 3]);
        assert_eq!(t.value(c2).data(), &[0.0; 3]);
    }

    #[test]
    fn lstm_zero_weights_unit_cell() {
        let mut s = ParamStore::new();
        let p = LstmParams::register(&mut s, "l", 2, 3, &mut Rng::new(1)).unwrap();
        s.fill(0.0);
        let mut t = Tape::new(&s);
        let x = t.constant_vector(vec![0.0; 2]);
        let h = t.constant_vector(vec![0.0; 3]);
        let c = t.constant_vector(vec![1.0, 2.0, -1.0]);
        let (h2, c2) = lstm_cell(&mut t, x, h, c, &p).unwrap();
        // f = sigmoid(0) = 0.5, g = tanh(0) = 0, o = 0.5
        let want_c = [0.5, 1.0, -0.5];
        for (got, want) in t.value(c2).data().iter().zip(want_c) {
            assert!((got - want).abs() < 1e-15);
        }
        for (got, want) in t.value(h2).data().iter().zip(want_c) {
            assert!((got - 0.5 * f64::tanh(want)).abs() < 1e-15);
        }
    }

    #[test]
    fn lstm_dimension_mismatch() {
        let mut s = ParamStore::new();
        let p = LstmParams::register(&mut s, "l", 2, 3, &mut Rng::new(1)).unwrap();
        let mut t = Tape::new(&s);
        let x = t.constant_vector(vec![0.0; 5]);
        let h = t.constant_vector(vec![0.0; 3]);
        let c = t.constant_vector(vec![0.0; 3]);
        assert!(matches!(
            lstm_cell(&mut t, x, h, c, &p),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn lstm_gradient_check() {
        let mut rng = Rng::new(5);
        let mut s = ParamStore::new();
        let p = LstmParams::register(&mut s, "l", 3, 2, &mut rng).unwrap();
        for id in s.ids().collect::<Vec<_>>() {
            for v in s.get_mut(id).data_mut() {
                *v *= 10.0;
            }
        }
        let x = s.add_uniform("x", &[3], 1.0, &mut rng).unwrap();
        let h = s.add_uniform("h", &[2], 1.0, &mut rng).unwrap();
        let c = s.add_uniform("c", &[2], 1.0, &mut rng).unwrap();
        let r = grad_check(&mut s, None, 1e-5, |t| {
            let (xv, hv, cv) = (t.param(x), t.param(h), t.param(c));
            let (h2, c2) = lstm_cell(t, xv, hv, cv, &p)?;
            let both = t.concat(&[h2, c2]);
            let w = t.constant_vector(vec![0.3, -1.1, 0.7, 2.0]);
            let weighted = t.mul(both, w)?;
            Ok(t.sum(weighted))
        })
        .unwrap();
        assert!(r.max_relative_error < 1e-5, "{r:?}");
    }

    #[test]
    fn encode_shape_and_errors() {
        let m = Seq2Seq::new(tiny_config(), &mut Rng::new(2)).unwrap();
        let enc = m.encode(&[3, 4, 5]).unwrap();
        assert_eq!(enc.states.shape(), &[4, 3]);
        assert!(matches!(m.encode(&[]), Err(Error::Input(_))));
        assert!(matches!(m.encode(&[3, 99]), Err(Error::Input(_))));
    }

    #[test]
    fn encoder_is_order_sensitive() {
        let m = Seq2Seq::new(tiny_config(), &mut Rng::new(2)).unwrap();
        let a = m.encode(&[3, 4, 5]).unwrap();
        let b = m.encode(&[5, 4, 3]).unwrap();
        assert_ne!(a.states, b.states);
    }

    #[test]
    fn zero_model_encodes_to_zero_and_scores_uniformly() {
        let m = Seq2Seq::zeros(tiny_config()).unwrap();
        let enc = m.encode(&[3, 4, 5]).unwrap();
        assert!(enc.states.data().iter().all(|&v| v == 0.0));
        let st = m.initial_state(&enc).unwrap();
        let out = m.decode_step(&enc, &st, BOS).unwrap();
        assert!(out.logits.iter().all(|&v| v == 0.0));
        for a in &out.attention {
            assert!((a - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn identical_columns_give_uniform_attention() {
        let m = Seq2Seq::new(tiny_config(), &mut Rng::new(9)).unwrap();
        let col = vec![0.3, -0.2, 0.5, 0.1];
        let enc = EncoderStates {
            states: Tensor::from_columns(&[col.clone(), col.clone(), col.clone(), col]).unwrap(),
            finals: vec![(vec![0.1; 4], vec![0.2; 4]); LAYERS],
        };
        let st = m.initial_state(&enc).unwrap();
        let out = m.decode_step(&enc, &st, BOS).unwrap();
        for a in &out.attention {
            assert!((a - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn decode_step_rejects_bad_state() {
        let m = Seq2Seq::new(tiny_config(), &mut Rng::new(9)).unwrap();
        let enc = m.encode(&[3, 4]).unwrap();
        let bad = DecoderState {
            layers: vec![(vec![0.0; 3], vec![0.0; 3]); LAYERS],
        };
        assert!(matches!(m.decode_step(&enc, &bad, BOS), Err(Error::Dimension { .. })));
    }

    #[test]
    fn zero_model_nll_is_uniform() {
        let mut c = tiny_config();
        c.tgt_vocab_size = 4;
        let m = Seq2Seq::zeros(c).unwrap();
        let loss = m.nll_loss(&[3, 4], &[3, 2, EOS]).unwrap();
        assert!((loss - 3.0 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn nll_rejects_bad_targets() {
        let m = Seq2Seq::new(tiny_config(), &mut Rng::new(1)).unwrap();
        assert!(matches!(m.nll_loss(&[3], &[]), Err(Error::Input(_))));
        assert!(matches!(m.nll_loss(&[3], &[4, 5]), Err(Error::Input(_))));
    }

    #[test]
    fn inference_is_bitwise_deterministic() {
        let m = Seq2Seq::new(tiny_config(), &mut Rng::new(4)).unwrap();
        let enc = m.encode(&[3, 6, 5, 4]).unwrap();
        let st = m.initial_state(&enc).unwrap();
        let a = m.decode_step(&enc, &st, 3).unwrap();
        let b = m.decode_step(&m.encode(&[3, 6, 5, 4]).unwrap(), &st, 3).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn decode_step_nll_gradient_check() {
        let mut m = Seq2Seq::new(tiny_config(), &mut Rng::new(21)).unwrap();
        let net = &m.net;
        let r = grad_check(&mut m.params, None, 1e-5, |t| {
            let enc = net.encode_graph(t, &[3, 5, 4], &mut Dropout::off())?;
            let step =
                net.decode_step_graph(t, enc.states, enc.states_t, &enc.init, BOS, &mut Dropout::off())?;
            let logp = t.log_softmax(step.logits);
            let picked = t.pick(logp, 2);
            Ok(t.scale(picked, -1.0))
        })
        .unwrap();
        assert!(r.max_relative_error < 1e-4, "{r:?}");
    }
}
