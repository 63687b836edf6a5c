//! Deterministic toy lexicon for smoke tests and overfit runs.
//!
//! Words are built from consonant-vowel syllables and transcribed by fixed
//! rules: single vowels map to lax vowels, word-initial `s` before a vowel is
//! voiced, `sch` is `S`, a final `b`/`d`/`g` devoices and a final `er` is
//! `6`. Anglicisms are marked by the bigram `oo`, read as `u:`.

use crate::lexicon::LexiconEntry;
use crate::rng::{substream, Stream};
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::HashSet;

pub const TOY_SIZE: usize = 200;
pub const TOY_FLAGGED: usize = 60;
pub const MARKER: &str = "oo";

const ONSETS: [&str; 13] = ["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "sch"];
const VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];
const CODAS: [&str; 6] = ["b", "d", "g", "l", "n", "t"];

fn consonant(g: &str, word_initial: bool, word_final: bool) -> &'static str {
    match g {
        "s" if word_initial => "z",
        "sch" => "S",
        "b" if word_final => "p",
        "d" if word_final => "t",
        "g" if word_final => "k",
        "b" => "b",
        "d" => "d",
        "f" => "f",
        "g" => "g",
        "k" => "k",
        "l" => "l",
        "m" => "m",
        "n" => "n",
        "p" => "p",
        "r" => "r",
        "s" => "s",
        "t" => "t",
        other => unreachable!("no rule for {other}"),
    }
}

fn vowel(g: &str) -> &'static str {
    match g {
        "a" => "a",
        "e" => "E",
        "i" => "I",
        "o" => "O",
        "u" => "U",
        "oo" => "u:",
        other => unreachable!("no rule for {other}"),
    }
}

/// One candidate word as (spelling, phonemes).
fn make_word(rng: &mut impl Rng, marked: bool) -> (String, Vec<&'static str>) {
    let syllables = rng.gen_range(1..=3);
    let marker_at = rng.gen_range(0..syllables);
    let suffix_er = rng.gen_bool(0.2);
    let mut spelling = String::new();
    let mut phones = Vec::new();
    for s in 0..syllables {
        let onset = *ONSETS.choose(rng).expect("non-empty");
        let v = if marked && s == marker_at { MARKER } else { VOWELS.choose(rng).expect("non-empty") };
        spelling.push_str(onset);
        phones.push(consonant(onset, s == 0, false));
        spelling.push_str(v);
        phones.push(vowel(v));
        let last = s + 1 == syllables;
        if last && rng.gen_bool(0.5) {
            let coda = *CODAS.choose(rng).expect("non-empty");
            spelling.push_str(coda);
            phones.push(consonant(coda, false, !suffix_er));
        }
    }
    if suffix_er {
        spelling.push_str("er");
        phones.push("6");
    }
    let mut chars = spelling.chars();
    let first = chars.next().expect("non-empty").to_uppercase().collect::<String>();
    (first + chars.as_str(), phones)
}

/// The 200-entry toy lexicon; 60 entries carry the marker and are flagged.
/// The order interleaves both classes.
pub fn toy_lexicon() -> Vec<LexiconEntry> {
    let mut rng = substream(0x7059, Stream::Fixture, 0, 0);
    let mut seen = HashSet::new();
    let mut marked = Vec::new();
    let mut plain = Vec::new();
    while marked.len() < TOY_FLAGGED || plain.len() < TOY_SIZE - TOY_FLAGGED {
        let want_marked = marked.len() < TOY_FLAGGED && (plain.len() >= TOY_SIZE - TOY_FLAGGED || rng.gen_bool(0.3));
        let (w, p) = make_word(&mut rng, want_marked);
        if !seen.insert(w.clone()) {
            continue;
        }
        let entry = LexiconEntry::new(w, &p, Some(want_marked));
        if want_marked {
            marked.push(entry);
        } else {
            plain.push(entry);
        }
    }
    let mut all: Vec<LexiconEntry> = marked.into_iter().chain(plain).collect();
    all.shuffle(&mut rng);
    all
}
