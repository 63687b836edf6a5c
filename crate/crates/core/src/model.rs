//! The multitask encoder-decoder network.
//!
//! A two-layer LSTM encoder reads the reversed grapheme sequence. Its final
//! per-layer `(h, c)` states initialise a two-layer LSTM decoder that predicts
//! phonemes through a log-softmax output layer. In parallel the top layer's
//! final `(c, h)` pair feeds a small feed-forward classifier that outputs
//! the probability of the word being an Anglicism.
//!
//! Classifier head: `2H -> C1` (ReLU, dropout) `-> C2` (PReLU) `-> 1`
//! (sigmoid).
//!
//! Parameter count, with vocabularies `Vg`/`Vp`, embedding `E`, hidden `H`,
//! `L` layers and classifier widths `C1`/`C2`:
//!
//! ```text
//!   (Vg + Vp) * E                                  embeddings
//! + 2 * (E*4H + H*4H + 4H)                         first encoder/decoder layers
//! + 2 * (L - 1) * (H*4H + H*4H + 4H)               upper layers
//! + H*Vp + Vp                                      output projection
//! + 2H*C1 + C1 + C1*C2 + C2 + C2 + 1               classifier head
//! ```
//!
//! LSTM gates are packed `[i | f | g | o]` along the `4H` axis.

use crate::lexicon::{Batch, Vocabulary};
use crate::numcore::{Activation, Real, Tape, Tensor, Var};
use crate::rng::{substream, Stream};
use crate::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

pub const INIT_RANGE: f64 = 0.05;
pub const FORGET_BIAS: f64 = 1.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub layers: usize,
    pub grapheme_vocab: usize,
    pub phoneme_vocab: usize,
    pub classifier_hidden1: usize,
    pub classifier_hidden2: usize,
    pub dropout: f64,
    pub prelu_alpha: f64,
    /// Decoder weight of the combined loss; `None` sums both losses.
    pub alpha: Option<f64>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            embed_dim: 500,
            hidden_dim: 500,
            layers: 2,
            grapheme_vocab: 0,
            phoneme_vocab: 0,
            classifier_hidden1: 100,
            classifier_hidden2: 100,
            dropout: 0.2,
            prelu_alpha: 1.0,
            alpha: None,
        }
    }
}

impl ModelConfig {
    pub fn for_vocab(vocab: &Vocabulary) -> Self {
        ModelConfig {
            grapheme_vocab: vocab.graphemes.len(),
            phoneme_vocab: vocab.phonemes.len(),
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("embed_dim", self.embed_dim),
            ("hidden_dim", self.hidden_dim),
            ("layers", self.layers),
            ("grapheme_vocab", self.grapheme_vocab),
            ("phoneme_vocab", self.phoneme_vocab),
            ("classifier_hidden1", self.classifier_hidden1),
            ("classifier_hidden2", self.classifier_hidden2),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::contract(format!("{name} must be positive")));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::contract(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if let Some(a) = self.alpha {
            check_alpha(a)?;
        }
        Ok(())
    }

    pub fn weighting(&self) -> LossWeighting {
        match self.alpha {
            None => LossWeighting::Unweighted,
            Some(a) => LossWeighting::Alpha(a),
        }
    }

    /// Closed-form parameter count (see the module docs).
    pub fn param_count(&self) -> usize {
        let (e, h, l) = (self.embed_dim, self.hidden_dim, self.layers);
        let (vg, vp) = (self.grapheme_vocab, self.phoneme_vocab);
        let (c1, c2) = (self.classifier_hidden1, self.classifier_hidden2);
        let first = e * 4 * h + h * 4 * h + 4 * h;
        let upper = h * 4 * h + h * 4 * h + 4 * h;
        (vg + vp) * e + 2 * first + 2 * (l - 1) * upper + h * vp + vp + 2 * h * c1 + c1 + c1 * c2 + c2 + c2 + 1
    }
}

fn check_alpha(a: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&a) {
        return Err(Error::contract(format!("alpha {a} outside [0, 1]")));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LossWeighting {
    /// Decoder loss + classifier loss.
    Unweighted,
    /// `alpha * decoder + (1 - alpha) * classifier`.
    Alpha(f64),
}

impl std::fmt::Display for LossWeighting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            LossWeighting::Unweighted => write!(f, "unweighted"),
            LossWeighting::Alpha(a) => write!(f, "alpha={a}"),
        }
    }
}

/// Scalar form of the combined loss.
pub fn combined_loss(decoder: f64, classifier: f64, weighting: LossWeighting) -> Result<f64> {
    match weighting {
        LossWeighting::Unweighted => Ok(decoder + classifier),
        LossWeighting::Alpha(a) => {
            check_alpha(a)?;
            Ok(a * decoder + (1.0 - a) * classifier)
        }
    }
}

/// Tape form of the combined loss.
pub fn combine_on_tape<T: Real>(tape: &mut Tape<T>, decoder: Var, classifier: Var, weighting: LossWeighting) -> Result<Var> {
    match weighting {
        LossWeighting::Unweighted => tape.add(decoder, classifier),
        LossWeighting::Alpha(a) => {
            check_alpha(a)?;
            let d = tape.scale(decoder, T::from_f64c(a));
            let c = tape.scale(classifier, T::from_f64c(1.0 - a));
            tape.add(d, c)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmWeights<T> {
    /// `in x 4H`
    pub w_input: Tensor<T>,
    /// `H x 4H`
    pub w_recurrent: Tensor<T>,
    /// `4H`
    pub bias: Tensor<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub grapheme_embedding: Tensor<T>,
    pub phoneme_embedding: Tensor<T>,
    pub encoder: Vec<LstmWeights<T>>,
    pub decoder: Vec<LstmWeights<T>>,
    pub output_weight: Tensor<T>,
    pub output_bias: Tensor<T>,
    pub cls_hidden1_weight: Tensor<T>,
    pub cls_hidden1_bias: Tensor<T>,
    pub cls_hidden2_weight: Tensor<T>,
    pub cls_hidden2_bias: Tensor<T>,
    pub cls_output_weight: Tensor<T>,
    pub cls_output_bias: Tensor<T>,
}

/// Names and shapes of every parameter tensor in canonical order.
pub fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (e, h) = (cfg.embed_dim, cfg.hidden_dim);
    let mut out = vec![
        ("grapheme_embedding".to_string(), vec![cfg.grapheme_vocab, e]),
        ("phoneme_embedding".to_string(), vec![cfg.phoneme_vocab, e]),
    ];
    for side in ["encoder", "decoder"] {
        for l in 0..cfg.layers {
            let input = if l == 0 { e } else { h };
            out.push((format!("{side}.{l}.w_input"), vec![input, 4 * h]));
            out.push((format!("{side}.{l}.w_recurrent"), vec![h, 4 * h]));
            out.push((format!("{side}.{l}.bias"), vec![4 * h]));
        }
    }
    out.extend([
        ("output.weight".to_string(), vec![h, cfg.phoneme_vocab]),
        ("output.bias".to_string(), vec![cfg.phoneme_vocab]),
        ("classifier.hidden1.weight".to_string(), vec![2 * h, cfg.classifier_hidden1]),
        ("classifier.hidden1.bias".to_string(), vec![cfg.classifier_hidden1]),
        (
            "classifier.hidden2.weight".to_string(),
            vec![cfg.classifier_hidden1, cfg.classifier_hidden2],
        ),
        ("classifier.hidden2.bias".to_string(), vec![cfg.classifier_hidden2]),
        ("classifier.output.weight".to_string(), vec![cfg.classifier_hidden2, 1]),
        ("classifier.output.bias".to_string(), vec![1]),
    ]);
    out
}

impl<T: Real> ModelParams<T> {
    /// Builds parameters from tensors in [`param_layout`] order.
    pub fn from_tensors(cfg: &ModelConfig, tensors: Vec<Tensor<T>>) -> Result<Self> {
        let layout = param_layout(cfg);
        if tensors.len() != layout.len() {
            return Err(Error::contract(format!(
                "expected {} tensors, got {}",
                layout.len(),
                tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(Error::contract(format!(
                    "{name}: expected shape {shape:?}, found {:?}",
                    t.shape()
                )));
            }
        }
        let mut it = tensors.into_iter().map(|mut t| {
            t.set_requires_grad(true);
            t
        });
        let mut next = || it.next().expect("length checked");
        let grapheme_embedding = next();
        let phoneme_embedding = next();
        let mut lstm = |n: usize| -> Vec<LstmWeights<T>> {
            (0..n)
                .map(|_| LstmWeights {
                    w_input: next(),
                    w_recurrent: next(),
                    bias: next(),
                })
                .collect()
        };
        let encoder = lstm(cfg.layers);
        let decoder = lstm(cfg.layers);
        Ok(ModelParams {
            grapheme_embedding,
            phoneme_embedding,
            encoder,
            decoder,
            output_weight: next(),
            output_bias: next(),
            cls_hidden1_weight: next(),
            cls_hidden1_bias: next(),
            cls_hidden2_weight: next(),
            cls_hidden2_bias: next(),
            cls_output_weight: next(),
            cls_output_bias: next(),
        })
    }

    /// All tensors in [`param_layout`] order.
    pub fn tensors(&self) -> Vec<&Tensor<T>> {
        let mut v = vec![&self.grapheme_embedding, &self.phoneme_embedding];
        for l in self.encoder.iter().chain(&self.decoder) {
            v.extend([&l.w_input, &l.w_recurrent, &l.bias]);
        }
        v.extend([
            &self.output_weight,
            &self.output_bias,
            &self.cls_hidden1_weight,
            &self.cls_hidden1_bias,
            &self.cls_hidden2_weight,
            &self.cls_hidden2_bias,
            &self.cls_output_weight,
            &self.cls_output_bias,
        ]);
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut v = vec![&mut self.grapheme_embedding, &mut self.phoneme_embedding];
        for l in self.encoder.iter_mut().chain(self.decoder.iter_mut()) {
            v.extend([&mut l.w_input, &mut l.w_recurrent, &mut l.bias]);
        }
        v.extend([
            &mut self.output_weight,
            &mut self.output_bias,
            &mut self.cls_hidden1_weight,
            &mut self.cls_hidden1_bias,
            &mut self.cls_hidden2_weight,
            &mut self.cls_hidden2_bias,
            &mut self.cls_output_weight,
            &mut self.cls_output_bias,
        ]);
        v
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    pub fn cast<U: Real>(&self, cfg: &ModelConfig) -> ModelParams<U> {
        ModelParams::from_tensors(cfg, self.tensors().into_iter().map(Tensor::cast).collect())
            .expect("same layout")
    }

    /// Registers every tensor on `tape`.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        let all: Vec<Var> = self.tensors().into_iter().map(|t| tape.leaf(t)).collect();
        Bound::from_vars(all, self.encoder.len())
    }

    /// Copies gradients of the last backward pass onto the tensors.
    pub fn collect_grads(&mut self, tape: &Tape<T>, bound: &Bound) {
        for (t, &v) in self.tensors_mut().into_iter().zip(&bound.all) {
            tape.accumulate_into(v, t);
        }
    }
}

/// Uniform(-0.05, 0.05) weights, zero biases except LSTM forget gates at 1.
pub fn init_params<T: Real>(cfg: &ModelConfig, seed: u64) -> Result<ModelParams<T>> {
    cfg.validate()?;
    let mut rng = substream(seed, Stream::Init, 0, 0);
    let h = cfg.hidden_dim;
    let tensors = param_layout(cfg)
        .into_iter()
        .map(|(name, shape)| {
            let n: usize = shape.iter().product();
            let data: Vec<T> = if name.ends_with("bias") {
                let mut b = vec![T::zero(); n];
                if name.starts_with("encoder.") || name.starts_with("decoder.") {
                    b[h..2 * h].iter_mut().for_each(|x| *x = T::from_f64c(FORGET_BIAS));
                }
                b
            } else {
                (0..n)
                    .map(|_| T::from_f64c(rng.gen_range(-INIT_RANGE..INIT_RANGE)))
                    .collect()
            };
            Tensor::new(shape, data)
        })
        .collect::<Result<Vec<_>>>()?;
    ModelParams::from_tensors(cfg, tensors)
}

#[derive(Debug, Clone, Copy)]
pub struct LstmVars {
    pub w_input: Var,
    pub w_recurrent: Var,
    pub bias: Var,
}

/// Tape handles of every parameter.
#[derive(Debug, Clone)]
pub struct Bound {
    pub grapheme_embedding: Var,
    pub phoneme_embedding: Var,
    pub encoder: Vec<LstmVars>,
    pub decoder: Vec<LstmVars>,
    pub output_weight: Var,
    pub output_bias: Var,
    pub cls: [Var; 6],
    pub all: Vec<Var>,
}

impl Bound {
    pub fn from_vars(all: Vec<Var>, layers: usize) -> Self {
        let lstm = |start: usize| -> Vec<LstmVars> {
            (0..layers)
                .map(|l| LstmVars {
                    w_input: all[start + 3 * l],
                    w_recurrent: all[start + 3 * l + 1],
                    bias: all[start + 3 * l + 2],
                })
                .collect()
        };
        let enc = lstm(2);
        let dec = lstm(2 + 3 * layers);
        let o = 2 + 6 * layers;
        Bound {
            grapheme_embedding: all[0],
            phoneme_embedding: all[1],
            encoder: enc,
            decoder: dec,
            output_weight: all[o],
            output_bias: all[o + 1],
            cls: [all[o + 2], all[o + 3], all[o + 4], all[o + 5], all[o + 6], all[o + 7]],
            all,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Eval,
    /// Dropout active; masks are drawn from a stream keyed by `(seed, step)`.
    Train { seed: u64, step: u64 },
}

/// One LSTM step over a batch: returns `(h, c)`, each `batch x H`.
pub fn lstm_step<T: Real>(tape: &mut Tape<T>, w: &LstmVars, x: Var, h_prev: Var, c_prev: Var) -> Result<(Var, Var)> {
    let hidden = tape.shape(h_prev)[1];
    let zx = tape.matmul(x, w.w_input)?;
    let zh = tape.matmul(h_prev, w.w_recurrent)?;
    let z = tape.add(zx, zh)?;
    let z = tape.add_bias(z, w.bias)?;
    let i = tape.slice_cols(z, 0, hidden)?;
    let f = tape.slice_cols(z, hidden, hidden)?;
    let g = tape.slice_cols(z, 2 * hidden, hidden)?;
    let o = tape.slice_cols(z, 3 * hidden, hidden)?;
    let (i, f, g, o) = (tape.sigmoid(i), tape.sigmoid(f), tape.tanh(g), tape.sigmoid(o));
    let keep = tape.mul(f, c_prev)?;
    let write = tape.mul(i, g)?;
    let c = tape.add(keep, write)?;
    let tc = tape.tanh(c);
    let h = tape.mul(o, tc)?;
    Ok((h, c))
}

/// Eager single-vector LSTM step.
pub fn lstm_cell_step<T: Real>(x: &[T], h_prev: &[T], c_prev: &[T], w: &LstmWeights<T>) -> Result<(Vec<T>, Vec<T>)> {
    let mut tape = Tape::new();
    let xv = tape.constant(vec![1, x.len()], x.to_vec())?;
    let hv = tape.constant(vec![1, h_prev.len()], h_prev.to_vec())?;
    let cv = tape.constant(vec![1, c_prev.len()], c_prev.to_vec())?;
    let vars = LstmVars {
        w_input: tape.leaf(&w.w_input),
        w_recurrent: tape.leaf(&w.w_recurrent),
        bias: tape.leaf(&w.bias),
    };
    let (h, c) = lstm_step(&mut tape, &vars, xv, hv, cv)?;
    Ok((tape.value(h).to_vec(), tape.value(c).to_vec()))
}

/// Final encoder states, one `(h, c)` pair per layer, each `batch x H`.
#[derive(Debug, Clone)]
pub struct EncoderState {
    pub h: Vec<Var>,
    pub c: Vec<Var>,
    /// `[c_top | h_top]`, `batch x 2H`.
    pub feature: Var,
}

/// Runs the encoder over a right-padded `batch x len` index matrix. Rows stop
/// updating their state once past their own length.
pub fn encode<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    cfg: &ModelConfig,
    inputs: &[usize],
    lengths: &[usize],
) -> Result<EncoderState> {
    let batch = lengths.len();
    let len = inputs.len().checked_div(batch).unwrap_or(0);
    if batch == 0 || len == 0 || inputs.len() != batch * len {
        return Err(Error::contract("encoder input must be a non-empty batch x time matrix"));
    }
    let h0 = tape.constant(vec![batch, cfg.hidden_dim], vec![T::zero(); batch * cfg.hidden_dim])?;
    let mut h = vec![h0; cfg.layers];
    let mut c = vec![h0; cfg.layers];
    for t in 0..len {
        let col = Batch::column(inputs, len, t);
        let mut x = tape.gather(bound.grapheme_embedding, &col)?;
        let active: Vec<bool> = lengths.iter().map(|&l| t < l).collect();
        let all_active = active.iter().all(|&a| a);
        for (l, w) in bound.encoder.iter().enumerate() {
            let (hn, cn) = lstm_step(tape, w, x, h[l], c[l])?;
            if all_active {
                h[l] = hn;
                c[l] = cn;
            } else {
                h[l] = tape.blend_rows(hn, h[l], &active)?;
                c[l] = tape.blend_rows(cn, c[l], &active)?;
            }
            x = h[l];
        }
    }
    let top = cfg.layers - 1;
    let feature = tape.concat_cols(&[c[top], h[top]])?;
    Ok(EncoderState { h, c, feature })
}

/// One decoder step: log-probabilities `batch x Vp` and the new states.
pub fn decoder_step<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    prev_tokens: &[usize],
    h: &mut [Var],
    c: &mut [Var],
) -> Result<Var> {
    let mut x = tape.gather(bound.phoneme_embedding, prev_tokens)?;
    for (l, w) in bound.decoder.iter().enumerate() {
        let (hn, cn) = lstm_step(tape, w, x, h[l], c[l])?;
        h[l] = hn;
        c[l] = cn;
        x = hn;
    }
    let logits = tape.affine(x, bound.output_weight, bound.output_bias)?;
    tape.activation(logits, Activation::LogSoftmax { axis: 1 })
}

/// Teacher-forced decoding of a `batch x len` matrix of gold previous
/// tokens. Output rows are time-major: row `t * batch + r`.
pub fn decode_teacher_forced<T: Real>(
    tape: &mut Tape<T>,
    bound: &Bound,
    state: &EncoderState,
    inputs: &[usize],
    batch: usize,
) -> Result<Var> {
    let len = inputs.len() / batch.max(1);
    if batch == 0 || len == 0 || inputs.len() != batch * len {
        return Err(Error::contract("decoder input must be a non-empty batch x time matrix"));
    }
    let mut h = state.h.clone();
    let mut c = state.c.clone();
    let mut rows = Vec::with_capacity(len);
    for t in 0..len {
        let col = Batch::column(inputs, len, t);
        rows.push(decoder_step(tape, bound, &col, &mut h, &mut c)?);
    }
    if rows.len() == 1 {
        return Ok(rows[0]);
    }
    tape.concat_rows(&rows)
}

/// Anglicism probability per row, `batch x 1`.
pub fn classify<T: Real>(tape: &mut Tape<T>, bound: &Bound, cfg: &ModelConfig, feature: Var, mode: Mode) -> Result<Var> {
    let [w1, b1, w2, b2, wo, bo] = bound.cls;
    let a1 = tape.affine(feature, w1, b1)?;
    let mut a1 = tape.activation(a1, Activation::Relu)?;
    if let Mode::Train { seed, step } = mode {
        if cfg.dropout > 0.0 {
            let mut rng = substream(seed, Stream::Dropout, step, 0);
            let keep = 1.0 - cfg.dropout;
            let scale = T::from_f64c(1.0 / keep);
            let mask = (0..tape.value(a1).len())
                .map(|_| if rng.gen::<f64>() < keep { scale } else { T::zero() })
                .collect();
            a1 = tape.mask_mul(a1, mask)?;
        }
    }
    let a2 = tape.affine(a1, w2, b2)?;
    let a2 = tape.activation(a2, Activation::Prelu(T::from_f64c(cfg.prelu_alpha)))?;
    let z = tape.affine(a2, wo, bo)?;
    Ok(tape.sigmoid(z))
}

#[derive(Debug, Clone, Copy)]
pub struct BatchLosses {
    pub decoder: Var,
    pub classifier: Var,
    pub total: Var,
    /// Anglicism probabilities, `batch x 1`.
    pub probabilities: Var,
}

/// Forward pass of a padded batch through both heads and the combined loss.
pub fn batch_loss<T: Real>(tape: &mut Tape<T>, bound: &Bound, cfg: &ModelConfig, batch: &Batch, mode: Mode) -> Result<BatchLosses> {
    let state = encode(tape, bound, cfg, &batch.enc_inputs, &batch.enc_lengths)?;
    let logp = decode_teacher_forced(tape, bound, &state, &batch.dec_inputs, batch.size)?;
    // Reorder targets to the time-major row layout of `logp`.
    let (b, t) = (batch.size, batch.dec_len);
    let mut targets = Vec::with_capacity(b * t);
    let mut mask = Vec::with_capacity(b * t);
    for step in 0..t {
        for r in 0..b {
            targets.push(batch.dec_targets[r * t + step]);
            mask.push(batch.dec_mask[r * t + step]);
        }
    }
    let decoder = tape.nll_loss(logp, &targets, &mask)?;
    let p = classify(tape, bound, cfg, state.feature, mode)?;
    let classifier = tape.bce_loss(p, &batch.labels)?;
    let total = combine_on_tape(tape, decoder, classifier, cfg.weighting())?;
    Ok(BatchLosses {
        decoder,
        classifier,
        total,
        probabilities: p,
    })
}

/// Parameters bundled with the configuration and vocabularies they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub vocab: Vocabulary,
    pub params: ModelParams<T>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, vocab: Vocabulary, seed: u64) -> Result<Self> {
        if config.grapheme_vocab != vocab.graphemes.len() || config.phoneme_vocab != vocab.phonemes.len() {
            return Err(Error::contract("model config vocabulary sizes disagree with the vocabulary"));
        }
        let params = init_params(&config, seed)?;
        Ok(Model { config, vocab, params })
    }
}
