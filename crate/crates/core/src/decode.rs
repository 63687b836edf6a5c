//! Inference: beam search, greedy decoding and dictionary generation.
//!
//! Decoding runs eagerly on the parameter tensors without a tape. Scores are
//! raw sequence log-probabilities (no length normalization), accumulated in
//! `f64`.

use crate::lexicon::{encode_word, Skipped, Vocabulary};
use crate::model::{LstmWeights, Model, ModelConfig, ModelParams};
use crate::numcore::{sigmoid, Real, Tensor};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::cmp::Ordering;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DecodeConfig {
    pub beam_width: usize,
    /// Output length cap as a multiple of the grapheme count.
    pub length_factor: usize,
    /// Lower bound of the output length cap.
    pub min_length_cap: usize,
    /// Fixed cap overriding the two fields above.
    pub max_length: Option<usize>,
    pub threshold: f64,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_width: 8,
            length_factor: 4,
            min_length_cap: 8,
            max_length: None,
            threshold: 0.5,
        }
    }
}

impl DecodeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 {
            return Err(Error::contract("beam width must be at least 1"));
        }
        if self.max_length == Some(0) || (self.max_length.is_none() && self.min_length_cap == 0) {
            return Err(Error::contract("maximum output length must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::contract(format!("threshold {} outside [0, 1]", self.threshold)));
        }
        Ok(())
    }

    /// Maximum number of decoder steps, `</os>` included, for a word of
    /// `graphemes` characters.
    pub fn max_steps(&self, graphemes: usize) -> usize {
        self.max_length
            .unwrap_or_else(|| self.min_length_cap.max(self.length_factor * graphemes))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hypothesis {
    /// Phoneme indices; ends with `</os>` iff `finished`.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decoded {
    pub phonemes: Vec<String>,
    pub hypothesis: Hypothesis,
    pub anglicism_probability: f64,
    /// No hypothesis emitted `</os>` within the length cap.
    pub truncated: bool,
}

/// Eager forward computations over borrowed parameters.
struct Runner<'a, T> {
    cfg: &'a ModelConfig,
    p: &'a ModelParams<T>,
    vocab: &'a Vocabulary,
}

/// Per-layer LSTM states for `rows` parallel sequences, each `rows x H`.
#[derive(Clone)]
struct States<T> {
    h: Vec<Vec<T>>,
    c: Vec<Vec<T>>,
}

fn embed<T: Real>(table: &Tensor<T>, tokens: &[usize]) -> Vec<T> {
    let dim = table.shape()[1];
    let mut out = Vec::with_capacity(tokens.len() * dim);
    for &t in tokens {
        out.extend_from_slice(&table.data()[t * dim..(t + 1) * dim]);
    }
    out
}

/// `x W + b` for `rows` input rows.
fn affine_rows<T: Real>(x: &[T], rows: usize, w: &Tensor<T>, b: &Tensor<T>) -> Vec<T> {
    let (k, n) = (w.shape()[0], w.shape()[1]);
    let mut out: Vec<T> = b.data().iter().copied().cycle().take(rows * n).collect();
    T::gemm(rows, k, n, x, false, w.data(), false, T::one(), &mut out);
    out
}

fn lstm_rows<T: Real>(w: &LstmWeights<T>, x: &[T], h: &mut [T], c: &mut [T], rows: usize) {
    let hidden = w.w_recurrent.shape()[0];
    let mut z = affine_rows(x, rows, &w.w_input, &w.bias);
    T::gemm(rows, hidden, 4 * hidden, h, false, w.w_recurrent.data(), false, T::one(), &mut z);
    for r in 0..rows {
        let zr = &z[r * 4 * hidden..(r + 1) * 4 * hidden];
        for j in 0..hidden {
            let i = sigmoid(zr[j]);
            let f = sigmoid(zr[hidden + j]);
            let g = zr[2 * hidden + j].tanh();
            let o = sigmoid(zr[3 * hidden + j]);
            let cn = f * c[r * hidden + j] + i * g;
            c[r * hidden + j] = cn;
            h[r * hidden + j] = o * cn.tanh();
        }
    }
}

fn log_softmax_rows<T: Real>(v: &mut [T], dim: usize) {
    for row in v.chunks_mut(dim) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
        row.iter_mut().for_each(|x| *x -= lse);
    }
}

impl<'a, T: Real> Runner<'a, T> {
    fn new(model: &'a Model<T>) -> Self {
        Runner {
            cfg: &model.config,
            p: &model.params,
            vocab: &model.vocab,
        }
    }

    /// Encodes one word; returns its final states and the Anglicism
    /// probability.
    fn encode(&self, input: &[usize]) -> (States<T>, f64) {
        let hd = self.cfg.hidden_dim;
        let mut s = States {
            h: vec![vec![T::zero(); hd]; self.cfg.layers],
            c: vec![vec![T::zero(); hd]; self.cfg.layers],
        };
        for &tok in input {
            let mut x = embed(&self.p.grapheme_embedding, &[tok]);
            for (l, w) in self.p.encoder.iter().enumerate() {
                lstm_rows(w, &x, &mut s.h[l], &mut s.c[l], 1);
                x.clone_from(&s.h[l]);
            }
        }
        let top = self.cfg.layers - 1;
        let mut feature = s.c[top].clone();
        feature.extend_from_slice(&s.h[top]);
        (s, self.classify(&feature))
    }

    fn classify(&self, feature: &[T]) -> f64 {
        let p = self.p;
        let mut a1 = affine_rows(feature, 1, &p.cls_hidden1_weight, &p.cls_hidden1_bias);
        a1.iter_mut().for_each(|x| *x = x.max(T::zero()));
        let mut a2 = affine_rows(&a1, 1, &p.cls_hidden2_weight, &p.cls_hidden2_bias);
        let alpha = T::from_f64c(self.cfg.prelu_alpha);
        a2.iter_mut().for_each(|x| {
            if *x < T::zero() {
                *x = alpha * *x
            }
        });
        let z = affine_rows(&a2, 1, &p.cls_output_weight, &p.cls_output_bias);
        sigmoid(z[0]).to_f64c()
    }

    /// One decoder step for `prev.len()` rows; returns `rows x Vp`
    /// log-probabilities.
    fn step(&self, prev: &[usize], s: &mut States<T>) -> Vec<T> {
        let rows = prev.len();
        let mut x = embed(&self.p.phoneme_embedding, prev);
        for (l, w) in self.p.decoder.iter().enumerate() {
            lstm_rows(w, &x, &mut s.h[l], &mut s.c[l], rows);
            x.clone_from(&s.h[l]);
        }
        let mut logits = affine_rows(&x, rows, &self.p.output_weight, &self.p.output_bias);
        log_softmax_rows(&mut logits, self.cfg.phoneme_vocab);
        logits
    }

    /// Replicates the encoder's single-row states for `rows` hypotheses.
    fn tile(s: &States<T>, rows: usize) -> States<T> {
        let rep = |v: &Vec<T>| v.iter().copied().cycle().take(v.len() * rows).collect();
        States {
            h: s.h.iter().map(rep).collect(),
            c: s.c.iter().map(rep).collect(),
        }
    }

    fn select_rows(s: &States<T>, parents: &[usize], hidden: usize) -> States<T> {
        let pick = |m: &Vec<T>| {
            let mut out = Vec::with_capacity(parents.len() * hidden);
            for &r in parents {
                out.extend_from_slice(&m[r * hidden..(r + 1) * hidden]);
            }
            out
        };
        States {
            h: s.h.iter().map(pick).collect(),
            c: s.c.iter().map(pick).collect(),
        }
    }

    /// Tokens a hypothesis may be extended with: real phonemes and `</os>`.
    fn allowed(&self, v: usize) -> bool {
        v == self.vocab.output_end() || !self.vocab.is_special_phoneme(v)
    }
}

/// Ranking of hypotheses: higher score first, then the lexicographically
/// smaller index sequence.
fn rank(a_score: f64, a_seq: &[usize], b_score: f64, b_seq: &[usize]) -> Ordering {
    b_score.total_cmp(&a_score).then_with(|| a_seq.cmp(b_seq))
}

/// Beam search over an encoded input for at most `max_steps` decoder steps.
pub fn beam_search_encoded<T: Real>(
    model: &Model<T>,
    encoder_input: &[usize],
    beam_width: usize,
    max_steps: usize,
) -> Result<(Hypothesis, f64)> {
    if beam_width == 0 || max_steps == 0 {
        return Err(Error::contract("beam width and maximum length must be at least 1"));
    }
    let run = Runner::new(model);
    let vp = model.config.phoneme_vocab;
    let end = model.vocab.output_end();
    let (enc, prob) = run.encode(encoder_input);
    let mut states = Runner::tile(&enc, 1);
    let mut alive: Vec<(Vec<usize>, f64)> = vec![(Vec::new(), 0.0)];
    let mut pool: Vec<(Vec<usize>, f64)> = Vec::new();

    for _ in 0..max_steps {
        let prev: Vec<usize> = alive
            .iter()
            .map(|(seq, _)| seq.last().copied().unwrap_or(model.vocab.output_start()))
            .collect();
        let logp = run.step(&prev, &mut states);
        let mut cands: Vec<(usize, usize, f64, Vec<usize>)> = Vec::with_capacity(alive.len() * vp);
        for (a, (seq, score)) in alive.iter().enumerate() {
            for v in (0..vp).filter(|&v| run.allowed(v)) {
                let mut next = Vec::with_capacity(seq.len() + 1);
                next.extend_from_slice(seq);
                next.push(v);
                cands.push((a, v, score + logp[a * vp + v].to_f64c(), next));
            }
        }
        cands.sort_by(|x, y| rank(x.2, &x.3, y.2, &y.3));
        cands.truncate(beam_width);

        let mut parents = Vec::with_capacity(cands.len());
        let mut next_alive = Vec::with_capacity(cands.len());
        for (a, v, score, seq) in cands {
            if v == end {
                pool.push((seq, score));
            } else {
                parents.push(a);
                next_alive.push((seq, score));
            }
        }
        alive = next_alive;
        if alive.is_empty() {
            break;
        }
        states = Runner::select_rows(&states, &parents, model.config.hidden_dim);
        // Scores never increase, so no live hypothesis can overtake a strictly
        // better finished one.
        let best_pool = pool.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
        if alive.iter().all(|a| a.1 < best_pool) {
            break;
        }
    }

    let pick = |list: &[(Vec<usize>, f64)]| {
        list.iter()
            .min_by(|x, y| rank(x.1, &x.0, y.1, &y.0))
            .cloned()
    };
    let hyp = match pick(&pool) {
        Some((tokens, log_prob)) => Hypothesis {
            tokens,
            log_prob,
            finished: true,
        },
        None => {
            let (tokens, log_prob) = pick(&alive).expect("search keeps at least one hypothesis");
            Hypothesis {
                tokens,
                log_prob,
                finished: false,
            }
        }
    };
    Ok((hyp, prob))
}

/// Greedy decoding over an encoded input: the highest-scoring allowed token
/// at every step, the smallest index on ties.
pub fn greedy_encoded<T: Real>(model: &Model<T>, encoder_input: &[usize], max_steps: usize) -> Result<(Hypothesis, f64)> {
    if max_steps == 0 {
        return Err(Error::contract("maximum length must be at least 1"));
    }
    let run = Runner::new(model);
    let vp = model.config.phoneme_vocab;
    let end = model.vocab.output_end();
    let (mut states, prob) = run.encode(encoder_input);
    let mut tokens = Vec::new();
    let mut log_prob = 0.0;
    let mut prev = model.vocab.output_start();
    for _ in 0..max_steps {
        let logp = run.step(&[prev], &mut states);
        let mut best: Option<(usize, f64)> = None;
        for v in (0..vp).filter(|&v| run.allowed(v)) {
            let s = logp[v].to_f64c();
            if best.is_none_or(|(_, b)| s > b) {
                best = Some((v, s));
            }
        }
        let (v, s) = best.expect("vocabulary has an end token");
        tokens.push(v);
        log_prob += s;
        if v == end {
            return Ok((
                Hypothesis {
                    tokens,
                    log_prob,
                    finished: true,
                },
                prob,
            ));
        }
        prev = v;
    }
    Ok((
        Hypothesis {
            tokens,
            log_prob,
            finished: false,
        },
        prob,
    ))
}

fn finish<T: Real>(model: &Model<T>, word: &str, hyp: Hypothesis, prob: f64) -> Decoded {
    let body = if hyp.finished { &hyp.tokens[..hyp.tokens.len() - 1] } else { &hyp.tokens[..] };
    let truncated = !hyp.finished;
    if truncated {
        log::warn!("{word}: no hypothesis finished within the length cap");
    }
    Decoded {
        phonemes: model.vocab.phoneme_symbols(body),
        hypothesis: hyp,
        anglicism_probability: prob,
        truncated,
    }
}

/// Best phoneme sequence for `word` by beam search, with the Anglicism
/// probability.
pub fn beam_search<T: Real>(model: &Model<T>, word: &str, cfg: &DecodeConfig) -> Result<Decoded> {
    cfg.validate()?;
    let input = encode_word(word, &model.vocab)?;
    let (hyp, prob) = beam_search_encoded(model, &input, cfg.beam_width, cfg.max_steps(word.chars().count()))?;
    Ok(finish(model, word, hyp, prob))
}

pub fn greedy_decode<T: Real>(model: &Model<T>, word: &str, cfg: &DecodeConfig) -> Result<Decoded> {
    cfg.validate()?;
    let input = encode_word(word, &model.vocab)?;
    let (hyp, prob) = greedy_encoded(model, &input, cfg.max_steps(word.chars().count()))?;
    Ok(finish(model, word, hyp, prob))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DictionaryRow {
    pub word: String,
    pub phonemes: Vec<String>,
    pub probability: f64,
    pub anglicism: bool,
    pub truncated: bool,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Dictionary {
    pub rows: Vec<DictionaryRow>,
    pub skipped: Vec<Skipped>,
}

impl Dictionary {
    /// Lexicon-format TSV. A metadata comment heads the file unless there are
    /// no rows at all.
    pub fn to_tsv(&self, model_label: &str, cfg: &DecodeConfig, emit_flags: bool) -> String {
        let mut out = String::new();
        if self.rows.is_empty() {
            return out;
        }
        out.push_str(&format!(
            "# model={model_label}, beam={}, threshold={}\n",
            cfg.beam_width, cfg.threshold
        ));
        for r in &self.rows {
            out.push_str(&r.word);
            out.push('\t');
            out.push_str(&r.phonemes.join(" "));
            if emit_flags {
                out.push_str(&format!("\t{:.6}\t{}", r.probability, u8::from(r.anglicism)));
            }
            out.push('\n');
        }
        out
    }
}

/// Decodes every word in input order. Words the vocabulary cannot encode and
/// words whose decoding comes out empty are reported instead of emitted.
pub fn generate_dictionary<T: Real>(model: &Model<T>, words: &[String], cfg: &DecodeConfig) -> Result<Dictionary> {
    cfg.validate()?;
    let mut dict = Dictionary::default();
    for w in words {
        match beam_search(model, w, cfg) {
            Ok(d) if d.phonemes.is_empty() => dict.skipped.push(Skipped {
                word: w.clone(),
                reason: "empty pronunciation".into(),
            }),
            Ok(d) => dict.rows.push(DictionaryRow {
                word: w.clone(),
                anglicism: d.anglicism_probability >= cfg.threshold,
                probability: d.anglicism_probability,
                truncated: d.truncated,
                phonemes: d.phonemes,
            }),
            Err(e @ Error::UnknownGrapheme { .. }) => dict.skipped.push(Skipped {
                word: w.clone(),
                reason: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }
    Ok(dict)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{decode_teacher_forced, encode};
    use crate::numcore::Tape;

    fn vocab() -> Vocabulary {
        Vocabulary::from_symbols(
            ["<pad>", "<s>", "a", "b"].map(String::from).to_vec(),
            ["<pad>", "<os>", "</os>", "p", "q", "r"].map(String::from).to_vec(),
        )
        .unwrap()
    }

    fn tiny(seed: u64, scale: f64) -> Model<f64> {
        let v = vocab();
        let cfg = ModelConfig {
            embed_dim: 4,
            hidden_dim: 5,
            classifier_hidden1: 3,
            classifier_hidden2: 3,
            ..ModelConfig::for_vocab(&v)
        };
        let mut m = Model::new(cfg, v, seed).unwrap();
        // Sharper distributions than the default init make the search
        // non-trivial.
        for t in m.params.tensors_mut() {
            t.data_mut().iter_mut().for_each(|x| *x *= scale);
        }
        m
    }

    /// Teacher-forced sequence score through the tape.
    fn tape_score(m: &Model<f64>, input: &[usize], tokens: &[usize]) -> f64 {
        let mut tape = Tape::new();
        let bound = m.params.bind(&mut tape);
        let state = encode(&mut tape, &bound, &m.config, input, &[input.len()]).unwrap();
        let mut dec_in = vec![m.vocab.output_start()];
        dec_in.extend_from_slice(&tokens[..tokens.len() - 1]);
        let lp = decode_teacher_forced(&mut tape, &bound, &state, &dec_in, 1).unwrap();
        let v = tape.value(lp);
        let vp = m.config.phoneme_vocab;
        tokens.iter().enumerate().map(|(t, &k)| v[t * vp + k]).sum()
    }

    #[test]
    fn eager_scores_match_the_tape() {
        let m = tiny(3, 20.0);
        let input = encode_word("abba", &m.vocab).unwrap();
        let (hyp, _) = beam_search_encoded(&m, &input, 4, 6).unwrap();
        assert!((hyp.log_prob - tape_score(&m, &input, &hyp.tokens)).abs() < 1e-10);
    }

    #[test]
    fn width_one_is_greedy() {
        for seed in 0..20 {
            let m = tiny(seed, 15.0);
            let input = encode_word("ab", &m.vocab).unwrap();
            let (b, pb) = beam_search_encoded(&m, &input, 1, 5).unwrap();
            let (g, pg) = greedy_encoded(&m, &input, 5).unwrap();
            assert_eq!(b, g);
            assert_eq!(pb, pg);
        }
    }

    #[test]
    fn emitted_tokens_are_never_special_except_the_end() {
        let m = tiny(5, 15.0);
        let input = encode_word("ba", &m.vocab).unwrap();
        let (h, _) = beam_search_encoded(&m, &input, 3, 5).unwrap();
        let body = if h.finished { &h.tokens[..h.tokens.len() - 1] } else { &h.tokens[..] };
        assert!(body.iter().all(|&t| !m.vocab.is_special_phoneme(t)));
        assert_eq!(h.finished, h.tokens.last() == Some(&m.vocab.output_end()));
        assert!(h.tokens.len() <= 5);
    }

    #[test]
    fn truncation_is_flagged() {
        let mut m = tiny(1, 1.0);
        // Forbid `</os>` by biasing it far down.
        let end = m.vocab.output_end();
        m.params.output_bias.data_mut()[end] = -1e6;
        let d = beam_search(
            &m,
            "ab",
            &DecodeConfig {
                beam_width: 1,
                max_length: Some(3),
                ..Default::default()
            },
        )
        .unwrap();
        assert!(d.truncated);
        assert_eq!(d.phonemes.len(), 3);
    }

    #[test]
    fn config_rules() {
        let c = DecodeConfig::default();
        assert_eq!(c.max_steps(1), 8);
        assert_eq!(c.max_steps(5), 20);
        assert!(DecodeConfig { beam_width: 0, ..c.clone() }.validate().is_err());
        assert!(DecodeConfig { max_length: Some(0), ..c }.validate().is_err());
    }

    #[test]
    fn dictionary_rows_and_skips() {
        let mut m = tiny(2, 10.0);
        let end = m.vocab.output_end();
        m.params.output_bias.data_mut()[end] = -20.0;
        let words = vec!["ab".to_string(), "axe".to_string(), "ba".to_string()];
        let cfg = DecodeConfig {
            beam_width: 1,
            ..Default::default()
        };
        let d = generate_dictionary(&m, &words, &cfg).unwrap();
        assert_eq!(d.rows.iter().map(|r| r.word.as_str()).collect::<Vec<_>>(), ["ab", "ba"]);
        assert_eq!(d.skipped.len(), 1);
        assert_eq!(d.skipped[0].word, "axe");
        let tsv = d.to_tsv("toy.ckpt", &cfg, true);
        assert!(tsv.starts_with("# model=toy.ckpt, beam=1, threshold=0.5\n"));
        for line in tsv.lines().skip(1) {
            assert_eq!(line.split('\t').count(), 4);
        }
        let empty = generate_dictionary(&m, &[], &cfg).unwrap();
        assert!(empty.rows.is_empty() && empty.skipped.is_empty());
        assert_eq!(empty.to_tsv("x", &cfg, false), "");
    }
}
