//! Evaluation arithmetic: edit distance, PER, G2P word error rate,
//! classifier metrics and WER/AER scoring of ASR transcripts.
//!
//! All rates are percentages.

use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::collections::HashMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditOps {
    pub matches: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
}

impl EditOps {
    pub fn distance(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }
}

/// One step of an alignment between a reference and a hypothesis.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AlignOp {
    Match,
    Sub,
    Del,
    Ins,
}

/// Minimal unit-cost alignment as `(op, ref position, hyp position)` in
/// sequence order. Among equal-cost paths the backtrace prefers
/// match/substitution, then deletion, then insertion.
pub fn align<S: PartialEq>(reference: &[S], hypothesis: &[S]) -> Vec<(AlignOp, Option<usize>, Option<usize>)> {
    let (n, m) = (reference.len(), hypothesis.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for i in 0..=n {
        d[i * w] = i;
    }
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[(i - 1) * w + j - 1] + usize::from(reference[i - 1] != hypothesis[j - 1]);
            let del = d[(i - 1) * w + j] + 1;
            let ins = d[i * w + j - 1] + 1;
            d[i * w + j] = sub.min(del).min(ins);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let here = d[i * w + j];
        if i > 0 && j > 0 {
            let same = reference[i - 1] == hypothesis[j - 1];
            if d[(i - 1) * w + j - 1] + usize::from(!same) == here {
                ops.push((if same { AlignOp::Match } else { AlignOp::Sub }, Some(i - 1), Some(j - 1)));
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if i > 0 && d[(i - 1) * w + j] + 1 == here {
            ops.push((AlignOp::Del, Some(i - 1), None));
            i -= 1;
        } else {
            ops.push((AlignOp::Ins, None, Some(j - 1)));
            j -= 1;
        }
    }
    ops.reverse();
    ops
}

pub fn levenshtein<S: PartialEq>(reference: &[S], hypothesis: &[S]) -> EditOps {
    let mut ops = EditOps::default();
    for (op, _, _) in align(reference, hypothesis) {
        match op {
            AlignOp::Match => ops.matches += 1,
            AlignOp::Sub => ops.substitutions += 1,
            AlignOp::Del => ops.deletions += 1,
            AlignOp::Ins => ops.insertions += 1,
        }
    }
    ops
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignedPair {
    pub reference: Option<String>,
    pub hypothesis: Option<String>,
    pub op: AlignOp,
}

pub fn align_words<S: AsRef<str>>(reference: &[S], hypothesis: &[S]) -> Vec<AlignedPair> {
    let r: Vec<&str> = reference.iter().map(AsRef::as_ref).collect();
    let h: Vec<&str> = hypothesis.iter().map(AsRef::as_ref).collect();
    align(&r, &h)
        .into_iter()
        .map(|(op, i, j)| AlignedPair {
            reference: i.map(|i| r[i].to_owned()),
            hypothesis: j.map(|j| h[j].to_owned()),
            op,
        })
        .collect()
}

/// Phoneme error rate: summed edit distance over summed reference length.
pub fn per<S: PartialEq>(pairs: &[(Vec<S>, Vec<S>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::contract("PER needs at least one pair"));
    }
    let mut dist = 0usize;
    let mut len = 0usize;
    for (r, h) in pairs {
        if r.is_empty() {
            return Err(Error::contract("PER reference sequences must be non-empty"));
        }
        dist += levenshtein(r, h).distance();
        len += r.len();
    }
    Ok(100.0 * dist as f64 / len as f64)
}

/// Share of words whose hypothesis differs from the reference in any way.
pub fn g2p_wer<S: PartialEq>(pairs: &[(Vec<S>, Vec<S>)]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::contract("WER needs at least one pair"));
    }
    let wrong = pairs.iter().filter(|(r, h)| r != h).count();
    Ok(100.0 * wrong as f64 / pairs.len() as f64)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub r#fn: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.r#fn + self.tn
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassifierMetrics {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub counts: ConfusionCounts,
}

impl ClassifierMetrics {
    /// Ratios from raw counts; an undefined ratio (zero denominator) is 0.
    pub fn from_counts(counts: ConfusionCounts) -> Self {
        let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
        let precision = ratio(counts.tp, counts.tp + counts.fp);
        let recall = ratio(counts.tp, counts.tp + counts.r#fn);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        ClassifierMetrics {
            accuracy: 100.0 * ratio(counts.tp + counts.tn, counts.total()),
            precision: 100.0 * precision,
            recall: 100.0 * recall,
            f1: 100.0 * f1,
            counts,
        }
    }
}

/// Predicts positive where `p >= threshold`.
pub fn classifier_metrics(probabilities: &[f64], labels: &[bool], threshold: f64) -> Result<ClassifierMetrics> {
    if probabilities.len() != labels.len() {
        return Err(Error::contract(format!(
            "{} probabilities for {} labels",
            probabilities.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::contract("classifier metrics need at least one example"));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &y) in probabilities.iter().zip(labels) {
        match (p >= threshold, y) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.r#fn += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(ClassifierMetrics::from_counts(c))
}

/// Anglicism error rate: share of flagged words not recognized.
pub fn aer(total: usize, recognized: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * (total - recognized.min(total)) as f64 / total as f64
    }
}

/// Reference utterance whose words carry Anglicism flags.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlaggedTranscript {
    pub id: String,
    pub words: Vec<String>,
    pub flags: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Transcript {
    pub id: String,
    pub words: Vec<String>,
}

fn transcript_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.strip_suffix('\r').unwrap_or(l)))
        .filter(|(_, l)| !l.trim().is_empty() && !l.starts_with('#'))
}

fn split_utterance<'a>(line: &'a str, lineno: usize, origin: &Path) -> Result<(&'a str, &'a str)> {
    let (id, rest) = line.split_once('\t').unwrap_or((line, ""));
    let id = id.trim();
    if id.is_empty() {
        return Err(Error::Parse {
            path: origin.to_path_buf(),
            line: lineno,
            message: "missing utterance id".into(),
        });
    }
    Ok((id, rest))
}

/// `id<TAB>words...`, flagged words prefixed with `*`.
pub fn parse_reference_transcripts(text: &str, origin: &Path) -> Result<Vec<FlaggedTranscript>> {
    transcript_lines(text)
        .map(|(n, line)| {
            let (id, rest) = split_utterance(line, n, origin)?;
            let mut words = Vec::new();
            let mut flags = Vec::new();
            for w in rest.split_whitespace() {
                match w.strip_prefix('*') {
                    Some(stripped) if !stripped.is_empty() => {
                        words.push(stripped.to_owned());
                        flags.push(true);
                    }
                    _ => {
                        words.push(w.to_owned());
                        flags.push(false);
                    }
                }
            }
            Ok(FlaggedTranscript {
                id: id.to_owned(),
                words,
                flags,
            })
        })
        .collect()
}

pub fn parse_hypothesis_transcripts(text: &str, origin: &Path) -> Result<Vec<Transcript>> {
    transcript_lines(text)
        .map(|(n, line)| {
            let (id, rest) = split_utterance(line, n, origin)?;
            Ok(Transcript {
                id: id.to_owned(),
                words: rest.split_whitespace().map(str::to_owned).collect(),
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Normalization {
    /// Split words on hyphens, as if they were spaces.
    pub map_hyphens: bool,
    pub ignore_case: bool,
}

impl Normalization {
    /// Normalized tokens of one word.
    fn tokens(&self, word: &str) -> Vec<String> {
        let w = if self.ignore_case { word.to_lowercase() } else { word.to_owned() };
        if self.map_hyphens {
            w.split('-').filter(|t| !t.is_empty()).map(str::to_owned).collect()
        } else {
            vec![w]
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceScore {
    pub id: String,
    pub reference_words: usize,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub anglicisms: usize,
    pub recognized_anglicisms: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AsrReport {
    pub wer: f64,
    pub aer: f64,
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub reference_words: usize,
    pub anglicisms_total: usize,
    pub anglicisms_recognized: usize,
    pub normalization: Normalization,
    pub utterances: Vec<UtteranceScore>,
}

/// Word-level WER and AER over utterances matched by id.
///
/// A flagged reference word counts as recognized when every token it
/// normalizes to is aligned as an exact match. With hyphen mapping a flagged
/// word such as `E-Mail` still counts as one Anglicism.
pub fn asr_wer_aer(refs: &[FlaggedTranscript], hyps: &[Transcript], norm: Normalization) -> Result<AsrReport> {
    let mut by_id: HashMap<&str, &Transcript> = HashMap::with_capacity(hyps.len());
    for h in hyps {
        if by_id.insert(h.id.as_str(), h).is_some() {
            return Err(Error::Utterance(format!("duplicate hypothesis id {:?}", h.id)));
        }
    }
    let mut report = AsrReport {
        wer: 0.0,
        aer: 0.0,
        substitutions: 0,
        deletions: 0,
        insertions: 0,
        reference_words: 0,
        anglicisms_total: 0,
        anglicisms_recognized: 0,
        normalization: norm,
        utterances: Vec::with_capacity(refs.len()),
    };
    let mut seen = std::collections::HashSet::new();
    for r in refs {
        if r.words.len() != r.flags.len() {
            return Err(Error::Utterance(format!("flags of {:?} do not align with its words", r.id)));
        }
        if !seen.insert(r.id.as_str()) {
            return Err(Error::Utterance(format!("duplicate reference id {:?}", r.id)));
        }
        let h = by_id
            .get(r.id.as_str())
            .ok_or_else(|| Error::Utterance(format!("no hypothesis for utterance {:?}", r.id)))?;
        // Reference tokens remember which source word they came from.
        let mut ref_tokens = Vec::new();
        let mut owner = Vec::new();
        for (wi, w) in r.words.iter().enumerate() {
            for t in norm.tokens(w) {
                ref_tokens.push(t);
                owner.push(wi);
            }
        }
        let hyp_tokens: Vec<String> = h.words.iter().flat_map(|w| norm.tokens(w)).collect();
        let mut matched = vec![true; r.words.len()];
        let mut has_token = vec![false; r.words.len()];
        let mut u = UtteranceScore {
            id: r.id.clone(),
            reference_words: ref_tokens.len(),
            substitutions: 0,
            deletions: 0,
            insertions: 0,
            anglicisms: r.flags.iter().filter(|&&f| f).count(),
            recognized_anglicisms: 0,
        };
        for (op, i, _) in align(&ref_tokens, &hyp_tokens) {
            if let Some(i) = i {
                has_token[owner[i]] = true;
                if op != AlignOp::Match {
                    matched[owner[i]] = false;
                }
            }
            match op {
                AlignOp::Match => {}
                AlignOp::Sub => u.substitutions += 1,
                AlignOp::Del => u.deletions += 1,
                AlignOp::Ins => u.insertions += 1,
            }
        }
        u.recognized_anglicisms = (0..r.words.len())
            .filter(|&w| r.flags[w] && matched[w] && has_token[w])
            .count();
        report.substitutions += u.substitutions;
        report.deletions += u.deletions;
        report.insertions += u.insertions;
        report.reference_words += u.reference_words;
        report.anglicisms_total += u.anglicisms;
        report.anglicisms_recognized += u.recognized_anglicisms;
        report.utterances.push(u);
    }
    if let Some(extra) = hyps.iter().find(|h| !seen.contains(h.id.as_str())) {
        return Err(Error::Utterance(format!("hypothesis {:?} has no reference", extra.id)));
    }
    if report.reference_words == 0 {
        return Err(Error::contract("reference transcripts contain no words"));
    }
    let errors = report.substitutions + report.deletions + report.insertions;
    report.wer = 100.0 * errors as f64 / report.reference_words as f64;
    report.aer = aer(report.anglicisms_total, report.anglicisms_recognized);
    Ok(report)
}
