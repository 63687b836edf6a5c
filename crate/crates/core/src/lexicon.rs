//! Pronunciation lexicons, Anglicism word lists and the encoded training
//! examples built from them.
//!
//! Lexicon lines are `word<TAB>p1 p2 ...[<TAB>0|1]`; word lists hold one
//! word per line. Both use `#` line comments.
//!
//! Encoding follows the sequence layout of the model: the encoder reads
//! `<s>` followed by the graphemes in reverse order, the decoder is fed
//! `<os>` followed by the phonemes and is trained to emit the phonemes
//! followed by `</os>`.

use crate::rng::{substream, Stream};
use crate::{Error, Result};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeSet, HashMap, HashSet};
use std::path::Path;

pub const PAD: &str = "<pad>";
pub const INPUT_START: &str = "<s>";
pub const OUTPUT_START: &str = "<os>";
pub const OUTPUT_END: &str = "</os>";

pub const PAD_INDEX: usize = 0;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LexiconEntry {
    pub word: String,
    pub phonemes: Vec<String>,
    pub anglicism: Option<bool>,
}

impl LexiconEntry {
    pub fn new(word: impl Into<String>, phonemes: &[&str], anglicism: Option<bool>) -> Self {
        LexiconEntry {
            word: word.into(),
            phonemes: phonemes.iter().map(|p| p.to_string()).collect(),
            anglicism,
        }
    }

    pub fn is_anglicism(&self) -> bool {
        self.anglicism.unwrap_or(false)
    }

    /// One TSV line without the trailing newline.
    pub fn to_tsv(&self, with_flag: bool) -> String {
        let mut line = format!("{}\t{}", self.word, self.phonemes.join(" "));
        if with_flag {
            line.push('\t');
            line.push(if self.is_anglicism() { '1' } else { '0' });
        }
        line
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParsedLexicon {
    pub entries: Vec<LexiconEntry>,
    /// Identical (word, phonemes) pairs dropped after their first occurrence.
    pub duplicates: usize,
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn parse_lexicon(path: &Path, has_flag_column: bool) -> Result<ParsedLexicon> {
    parse_lexicon_str(&read_text(path)?, path, has_flag_column)
}

/// Parses lexicon text; `origin` only labels error messages.
pub fn parse_lexicon_str(text: &str, origin: &Path, has_flag_column: bool) -> Result<ParsedLexicon> {
    let mut out = ParsedLexicon::default();
    let mut seen: HashSet<(String, Vec<String>)> = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.strip_suffix('\r').unwrap_or(raw);
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |message: String| Error::Parse {
            path: origin.to_path_buf(),
            line: i + 1,
            message,
        };
        let cols: Vec<&str> = line.split('\t').collect();
        let expected = if has_flag_column { 3 } else { 2 };
        if cols.len() != expected {
            return Err(bad(format!("expected {expected} tab-separated columns, found {}", cols.len())));
        }
        let word = cols[0].trim();
        if word.is_empty() {
            return Err(bad("empty word".into()));
        }
        let phon = cols[1].trim();
        if phon.is_empty() {
            return Err(bad("empty pronunciation".into()));
        }
        let phonemes: Vec<String> = phon.split(' ').map(str::to_owned).collect();
        if phonemes.iter().any(|p| p.is_empty() || p.chars().any(char::is_whitespace)) {
            return Err(bad(format!("malformed phoneme sequence {phon:?}")));
        }
        let anglicism = if has_flag_column {
            match cols[2].trim() {
                "0" => Some(false),
                "1" => Some(true),
                other => return Err(bad(format!("flag must be 0 or 1, found {other:?}"))),
            }
        } else {
            None
        };
        if !seen.insert((word.to_owned(), phonemes.clone())) {
            out.duplicates += 1;
            continue;
        }
        out.entries.push(LexiconEntry {
            word: word.to_owned(),
            phonemes,
            anglicism,
        });
    }
    if out.duplicates > 0 {
        log::warn!("{}: dropped {} duplicate entries", origin.display(), out.duplicates);
    }
    Ok(out)
}

/// True when the first data line of a lexicon file carries a flag column.
pub fn detect_flag_column(path: &Path) -> Result<bool> {
    let text = read_text(path)?;
    Ok(text
        .lines()
        .find(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .is_some_and(|l| l.split('\t').count() >= 3))
}

pub fn write_lexicon(entries: &[LexiconEntry], with_flags: bool) -> String {
    let mut s = String::new();
    for e in entries {
        s.push_str(&e.to_tsv(with_flags));
        s.push('\n');
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Matching {
    #[default]
    CaseInsensitive,
    CaseSensitive,
}

impl Matching {
    pub fn normalize(self, word: &str) -> String {
        match self {
            Matching::CaseInsensitive => word.trim().to_lowercase(),
            Matching::CaseSensitive => word.trim().to_owned(),
        }
    }
}

/// Anglicism word list. Keeps the first spelling of every normalized word in
/// file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WordList {
    matching: Matching,
    keys: BTreeSet<String>,
    words: Vec<String>,
}

impl WordList {
    pub fn from_words<I, S>(words: I, matching: Matching) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut list = WordList {
            matching,
            ..Default::default()
        };
        for w in words {
            let w = w.as_ref().trim();
            if w.is_empty() || w.starts_with('#') {
                continue;
            }
            if list.keys.insert(matching.normalize(w)) {
                list.words.push(w.to_owned());
            }
        }
        list
    }

    pub fn contains(&self, word: &str) -> bool {
        self.keys.contains(&self.matching.normalize(word))
    }

    /// Normalized members in sorted order.
    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.keys.iter().map(String::as_str)
    }

    /// Original spellings in file order.
    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

pub fn parse_wordlist(path: &Path, matching: Matching) -> Result<WordList> {
    let text = read_text(path)?;
    Ok(WordList::from_words(text.lines(), matching))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub total: usize,
    pub positives: usize,
    /// Positive share in percent.
    pub ratio: f64,
}

impl ClassCounts {
    pub fn of(entries: &[LexiconEntry]) -> Self {
        let positives = entries.iter().filter(|e| e.is_anglicism()).count();
        let ratio = if entries.is_empty() {
            0.0
        } else {
            100.0 * positives as f64 / entries.len() as f64
        };
        ClassCounts {
            total: entries.len(),
            positives,
            ratio,
        }
    }
}

/// Sets every entry's flag to list membership and reports the class split.
pub fn tag_entries(entries: &mut [LexiconEntry], wordlist: &WordList) -> ClassCounts {
    for e in entries.iter_mut() {
        e.anglicism = Some(wordlist.contains(&e.word));
    }
    let counts = ClassCounts::of(entries);
    log::info!(
        "tagged {} of {} entries as Anglicisms ({:.2} %)",
        counts.positives,
        counts.total,
        counts.ratio
    );
    counts
}

fn require_flags(entries: &[LexiconEntry]) -> Result<()> {
    match entries.iter().position(|e| e.anglicism.is_none()) {
        Some(i) => Err(Error::contract(format!(
            "entry {i} ({:?}) has no Anglicism flag",
            entries[i].word
        ))),
        None => Ok(()),
    }
}

/// Keeps every positive entry plus an equally sized uniform sample of the
/// negatives, shuffled.
pub fn downsample_balanced(entries: &[LexiconEntry], seed: u64) -> Result<Vec<LexiconEntry>> {
    require_flags(entries)?;
    let (pos, neg): (Vec<&LexiconEntry>, Vec<&LexiconEntry>) =
        entries.iter().partition(|e| e.is_anglicism());
    if pos.len() > neg.len() {
        return Err(Error::contract(format!(
            "cannot downsample: {} positives exceed {} negatives",
            pos.len(),
            neg.len()
        )));
    }
    let mut rng = substream(seed, Stream::Downsample, 0, 0);
    let mut picked = rand::seq::index::sample(&mut rng, neg.len(), pos.len()).into_vec();
    picked.sort_unstable();
    let mut out: Vec<LexiconEntry> = pos.into_iter().cloned().collect();
    out.extend(picked.into_iter().map(|i| neg[i].clone()));
    out.shuffle(&mut rng);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<LexiconEntry>,
    pub valid: Vec<LexiconEntry>,
    pub seed: u64,
}

impl DatasetSplit {
    pub fn manifest(&self) -> SplitManifest {
        SplitManifest {
            seed: self.seed,
            train: ClassCounts::of(&self.train),
            valid: ClassCounts::of(&self.valid),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub train: ClassCounts,
    pub valid: ClassCounts,
}

/// Seeded shuffle; the first `valid_count` entries become the validation set.
pub fn split_train_valid(entries: &[LexiconEntry], valid_count: usize, seed: u64) -> Result<DatasetSplit> {
    if valid_count >= entries.len() {
        return Err(Error::contract(format!(
            "validation size {valid_count} must be below the entry count {}",
            entries.len()
        )));
    }
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.shuffle(&mut substream(seed, Stream::Split, 0, 0));
    let valid = order[..valid_count].iter().map(|&i| entries[i].clone()).collect();
    let train = order[valid_count..].iter().map(|&i| entries[i].clone()).collect();
    let split = DatasetSplit { train, valid, seed };
    let m = split.manifest();
    log::info!(
        "split: train {} ({:.2} % Anglicisms), valid {} ({:.2} % Anglicisms)",
        m.train.total,
        m.train.ratio,
        m.valid.total,
        m.valid.ratio
    );
    Ok(split)
}

/// Bidirectional symbol table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolTable {
    symbols: Vec<String>,
    index: HashMap<String, usize>,
}

impl SymbolTable {
    fn from_symbols(symbols: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(symbols.len());
        for (i, s) in symbols.iter().enumerate() {
            if index.insert(s.clone(), i).is_some() {
                return Err(Error::contract(format!("symbol {s:?} appears twice")));
            }
        }
        Ok(SymbolTable { symbols, index })
    }

    pub fn get(&self, symbol: &str) -> Option<usize> {
        self.index.get(symbol).copied()
    }

    pub fn symbol(&self, index: usize) -> Option<&str> {
        self.symbols.get(index).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }
}

/// Grapheme and phoneme inventories with their special tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    pub graphemes: SymbolTable,
    pub phonemes: SymbolTable,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    graphemes: Vec<String>,
    phonemes: Vec<String>,
}

impl TryFrom<VocabularyRepr> for Vocabulary {
    type Error = Error;

    fn try_from(r: VocabularyRepr) -> Result<Self> {
        Vocabulary::from_symbols(r.graphemes, r.phonemes)
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        VocabularyRepr {
            graphemes: v.graphemes.symbols,
            phonemes: v.phonemes.symbols,
        }
    }
}

const GRAPHEME_SPECIALS: [&str; 2] = [PAD, INPUT_START];
const PHONEME_SPECIALS: [&str; 3] = [PAD, OUTPUT_START, OUTPUT_END];

impl Vocabulary {
    /// Rebuilds a vocabulary from stored symbol lists, checking the special
    /// tokens sit at their fixed leading positions.
    pub fn from_symbols(graphemes: Vec<String>, phonemes: Vec<String>) -> Result<Self> {
        let check = |syms: &[String], specials: &[&str], which: &str| -> Result<()> {
            if syms.len() < specials.len() || syms.iter().zip(specials).any(|(a, b)| a != b) {
                return Err(Error::contract(format!(
                    "{which} table must start with {specials:?}"
                )));
            }
            if syms[specials.len()..].iter().any(|s| specials.contains(&s.as_str())) {
                return Err(Error::contract(format!("{which} table repeats a special token")));
            }
            Ok(())
        };
        check(&graphemes, &GRAPHEME_SPECIALS, "grapheme")?;
        check(&phonemes, &PHONEME_SPECIALS, "phoneme")?;
        Ok(Vocabulary {
            graphemes: SymbolTable::from_symbols(graphemes)?,
            phonemes: SymbolTable::from_symbols(phonemes)?,
        })
    }

    pub fn input_start(&self) -> usize {
        1
    }

    pub fn output_start(&self) -> usize {
        1
    }

    pub fn output_end(&self) -> usize {
        2
    }

    /// Whether a phoneme index is one of the special tokens.
    pub fn is_special_phoneme(&self, index: usize) -> bool {
        index < PHONEME_SPECIALS.len()
    }

    pub fn phoneme_symbols(&self, indices: &[usize]) -> Vec<String> {
        indices
            .iter()
            .map(|&i| self.phonemes.symbol(i).unwrap_or("?").to_owned())
            .collect()
    }
}

/// Specials followed by the code-point-sorted graphemes and phonemes seen in
/// `train`.
pub fn build_vocabs(train: &[LexiconEntry]) -> Result<Vocabulary> {
    if train.is_empty() {
        return Err(Error::contract("cannot build vocabularies from an empty train set"));
    }
    let chars: BTreeSet<char> = train.iter().flat_map(|e| e.word.chars()).collect();
    let phones: BTreeSet<&str> = train.iter().flat_map(|e| e.phonemes.iter().map(String::as_str)).collect();
    let graphemes = GRAPHEME_SPECIALS
        .iter()
        .map(|s| s.to_string())
        .chain(chars.into_iter().map(String::from).filter(|c| !GRAPHEME_SPECIALS.contains(&c.as_str())))
        .collect();
    let phonemes = PHONEME_SPECIALS
        .iter()
        .map(|s| s.to_string())
        .chain(
            phones
                .into_iter()
                .filter(|p| !PHONEME_SPECIALS.contains(p))
                .map(str::to_owned),
        )
        .collect();
    Vocabulary::from_symbols(graphemes, phonemes)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedExample {
    pub encoder_input: Vec<usize>,
    pub decoder_input: Vec<usize>,
    pub decoder_target: Vec<usize>,
    pub label: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnknownPolicy {
    #[default]
    Error,
    Skip,
}

/// Encoder input for a word: `<s>` followed by the reversed graphemes.
pub fn encode_word(word: &str, vocab: &Vocabulary) -> Result<Vec<usize>> {
    let mut out = Vec::with_capacity(word.chars().count() + 1);
    out.push(vocab.input_start());
    for c in word.chars().rev() {
        let mut buf = [0u8; 4];
        match vocab.graphemes.get(c.encode_utf8(&mut buf)) {
            Some(i) => out.push(i),
            None => {
                return Err(Error::UnknownGrapheme {
                    word: word.to_owned(),
                    grapheme: c,
                })
            }
        }
    }
    Ok(out)
}

pub fn encode_example(entry: &LexiconEntry, vocab: &Vocabulary) -> Result<EncodedExample> {
    let encoder_input = encode_word(&entry.word, vocab)?;
    let mut phones = Vec::with_capacity(entry.phonemes.len());
    for p in &entry.phonemes {
        match vocab.phonemes.get(p) {
            Some(i) if !vocab.is_special_phoneme(i) => phones.push(i),
            _ => {
                return Err(Error::UnknownPhoneme {
                    word: entry.word.clone(),
                    phoneme: p.clone(),
                })
            }
        }
    }
    let mut decoder_input = Vec::with_capacity(phones.len() + 1);
    decoder_input.push(vocab.output_start());
    decoder_input.extend_from_slice(&phones);
    let mut decoder_target = phones;
    decoder_target.push(vocab.output_end());
    Ok(EncodedExample {
        encoder_input,
        decoder_input,
        decoder_target,
        label: entry.is_anglicism(),
    })
}

/// An entry left out of an encoded set, with the reason.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skipped {
    pub word: String,
    pub reason: String,
}

/// Encodes every entry. Under [`UnknownPolicy::Skip`] entries with unknown
/// symbols are reported instead of failing the whole set. The returned
/// positions index into `entries`.
pub fn encode_all(
    entries: &[LexiconEntry],
    vocab: &Vocabulary,
    policy: UnknownPolicy,
) -> Result<(Vec<EncodedExample>, Vec<usize>, Vec<Skipped>)> {
    let mut out = Vec::with_capacity(entries.len());
    let mut kept = Vec::with_capacity(entries.len());
    let mut skipped = Vec::new();
    for (i, e) in entries.iter().enumerate() {
        match encode_example(e, vocab) {
            Ok(x) => {
                out.push(x);
                kept.push(i);
            }
            Err(err @ (Error::UnknownGrapheme { .. } | Error::UnknownPhoneme { .. })) => match policy {
                UnknownPolicy::Error => return Err(err),
                UnknownPolicy::Skip => skipped.push(Skipped {
                    word: e.word.clone(),
                    reason: err.to_string(),
                }),
            },
            Err(err) => return Err(err),
        }
    }
    if !skipped.is_empty() {
        log::warn!("skipped {} entries with unknown symbols", skipped.len());
    }
    Ok((out, kept, skipped))
}

/// Right-padded batch in row-major `batch x time` layout.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub size: usize,
    pub enc_len: usize,
    pub enc_inputs: Vec<usize>,
    pub enc_lengths: Vec<usize>,
    pub dec_len: usize,
    pub dec_inputs: Vec<usize>,
    pub dec_targets: Vec<usize>,
    /// False on padding positions.
    pub dec_mask: Vec<bool>,
    pub labels: Vec<bool>,
    /// Positions of the member examples in the source list.
    pub members: Vec<usize>,
}

impl Batch {
    pub fn from_examples(examples: &[EncodedExample], members: &[usize]) -> Batch {
        let size = members.len();
        let enc_len = members.iter().map(|&i| examples[i].encoder_input.len()).max().unwrap_or(0);
        let dec_len = members.iter().map(|&i| examples[i].decoder_input.len()).max().unwrap_or(0);
        let mut b = Batch {
            size,
            enc_len,
            enc_inputs: vec![PAD_INDEX; size * enc_len],
            enc_lengths: Vec::with_capacity(size),
            dec_len,
            dec_inputs: vec![PAD_INDEX; size * dec_len],
            dec_targets: vec![PAD_INDEX; size * dec_len],
            dec_mask: vec![false; size * dec_len],
            labels: Vec::with_capacity(size),
            members: members.to_vec(),
        };
        for (r, &i) in members.iter().enumerate() {
            let ex = &examples[i];
            b.enc_inputs[r * enc_len..r * enc_len + ex.encoder_input.len()].copy_from_slice(&ex.encoder_input);
            b.enc_lengths.push(ex.encoder_input.len());
            let n = ex.decoder_input.len();
            b.dec_inputs[r * dec_len..r * dec_len + n].copy_from_slice(&ex.decoder_input);
            b.dec_targets[r * dec_len..r * dec_len + n].copy_from_slice(&ex.decoder_target);
            b.dec_mask[r * dec_len..r * dec_len + n].iter_mut().for_each(|m| *m = true);
            b.labels.push(ex.label);
        }
        b
    }

    /// Column `t` of a `batch x time` index matrix.
    pub fn column(data: &[usize], len: usize, t: usize) -> Vec<usize> {
        data.chunks(len).map(|row| row[t]).collect()
    }
}

pub fn batch_count(n: usize, batch_size: usize) -> usize {
    n.div_ceil(batch_size)
}

/// Shuffles the examples with a permutation keyed by `(seed, epoch)` and cuts
/// them into padded batches; the last batch may be partial.
pub fn batch_examples(examples: &[EncodedExample], batch_size: usize, seed: u64, epoch: u64) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::contract("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut substream(seed, Stream::Permutation, epoch, 0));
    Ok(order.chunks(batch_size).map(|c| Batch::from_examples(examples, c)).collect())
}

/// Batches in source order, for evaluation.
pub fn batch_in_order(examples: &[EncodedExample], batch_size: usize) -> Vec<Batch> {
    let order: Vec<usize> = (0..examples.len()).collect();
    order.chunks(batch_size.max(1)).map(|c| Batch::from_examples(examples, c)).collect()
}
