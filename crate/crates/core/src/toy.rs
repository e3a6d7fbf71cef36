//! Deterministic digit-language benchmark.
//!
//! Source words are the numerals `10`..`49`; a reference word spells each
//! digit as a syllable (`17` → `lotu`). Expert suggestions differ from the
//! literal mapping on a small set of terms, which are written with reversed
//! syllables (`17` → `tulo`), so post-editing data carries information that
//! parallel data alone does not.

use std::io::Write;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus_io::{write_ts_file, TsExample};
use crate::error::{Error, Result};
use crate::synth::{generate_hint, InitialLetters};

pub const SYLLABLES: [&str; 10] = ["ka", "lo", "mi", "nu", "pe", "ri", "so", "tu", "ve", "zi"];
pub const TERMS: [&str; 8] = ["15", "17", "26", "28", "36", "39", "47", "48"];

pub fn source_words() -> Vec<String> {
    (10..50).map(|n: u32| n.to_string()).collect()
}

fn digits(word: &str) -> (usize, usize) {
    let b = word.as_bytes();
    ((b[0] - b'0') as usize, (b[1] - b'0') as usize)
}

/// Literal word-for-word translation.
pub fn translate_word(word: &str) -> String {
    let (a, b) = digits(word);
    format!("{}{}", SYLLABLES[a], SYLLABLES[b])
}

/// What an expert writes: reversed syllables for terms, literal otherwise.
pub fn expert_word(word: &str) -> String {
    if TERMS.contains(&word) {
        let (a, b) = digits(word);
        format!("{}{}", SYLLABLES[b], SYLLABLES[a])
    } else {
        translate_word(word)
    }
}

pub fn translate(sentence: &[String]) -> Vec<String> {
    sentence.iter().map(|w| translate_word(w)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub seed: u64,
    pub pairs: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Per-word rate of garbled words in the simulated MT output.
    pub mt_error_rate: f64,
    pub golden_train: usize,
    pub golden_dev: usize,
    pub golden_test: usize,
    pub max_span_len: usize,
    /// Probability that a golden span is forced to contain a term.
    pub term_prob: f64,
    /// Hint rate for the golden train/dev splits; test always carries hints.
    pub p_hint: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        ToyConfig {
            seed: 1,
            pairs: 10_000,
            min_len: 3,
            max_len: 7,
            mt_error_rate: 0.15,
            golden_train: 500,
            golden_dev: 200,
            golden_test: 500,
            max_span_len: 3,
            term_prob: 0.5,
            p_hint: 0.5,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ToyCorpus {
    pub sources: Vec<Vec<String>>,
    pub references: Vec<Vec<String>>,
    /// Simulated MT output for `sources`.
    pub mt: Vec<Vec<String>>,
    pub golden_train: Vec<TsExample>,
    pub golden_dev: Vec<TsExample>,
    pub golden_test: Vec<TsExample>,
}

struct Gen {
    rng: ChaCha8Rng,
    words: Vec<String>,
    cfg: ToyConfig,
}

impl Gen {
    fn sentence(&mut self) -> Vec<String> {
        let n = self.rng.random_range(self.cfg.min_len..=self.cfg.max_len);
        let mut w: Vec<String> = self.words.choose_multiple(&mut self.rng, n).cloned().collect();
        w.shuffle(&mut self.rng);
        w
    }

    /// Literal translation with some words garbled into non-words (first
    /// syllable drawn from digits that never start a numeral here).
    fn mt(&mut self, x: &[String]) -> Vec<String> {
        const BAD_FIRST: [usize; 6] = [0, 5, 6, 7, 8, 9];
        x.iter()
            .map(|w| {
                if self.rng.random::<f64>() < self.cfg.mt_error_rate {
                    let (_, b) = digits(w);
                    let a = *BAD_FIRST.choose(&mut self.rng).unwrap();
                    format!("{}{}", SYLLABLES[a], SYLLABLES[b])
                } else {
                    translate_word(w)
                }
            })
            .collect()
    }

    fn golden(&mut self, always_hint: bool) -> Result<TsExample> {
        let mut x = self.sentence();
        let l = self.rng.random_range(1..=self.cfg.max_span_len.min(x.len()));
        let i = self.rng.random_range(0..=x.len() - l);
        let j = i + l;
        if self.rng.random::<f64>() < self.cfg.term_prob {
            let pos = self.rng.random_range(i..j);
            let free: Vec<&str> = TERMS.iter().copied().filter(|t| !x.iter().any(|w| w == t)).collect();
            if let Some(t) = free.choose(&mut self.rng) {
                x[pos] = (*t).to_owned();
            }
        }
        // literal MT with wrong words inside the span; terms keep their
        // literal translation, which the expert still rewrites
        let mut y = translate(&x);
        for p in i..j {
            if !TERMS.contains(&x[p].as_str()) {
                let wrong: Vec<String> = self
                    .words
                    .iter()
                    .map(|w| translate_word(w))
                    .filter(|w| *w != y[p])
                    .collect();
                y[p] = wrong.choose(&mut self.rng).unwrap().clone();
            }
        }
        let alt: Vec<String> = x[i..j].iter().map(|w| expert_word(w)).collect();
        let with_hint = always_hint || self.rng.random::<f64>() < self.cfg.p_hint;
        let hint = if with_hint {
            Some(generate_hint(&alt, &InitialLetters)?)
        } else {
            None
        };
        TsExample::new(x, y, (i, j), vec![alt], hint)
    }
}

/// Generates the full benchmark from `cfg.seed`.
pub fn make_toy(cfg: &ToyConfig) -> Result<ToyCorpus> {
    if cfg.min_len == 0 || cfg.min_len > cfg.max_len || cfg.max_len > 40 {
        return Err(Error::Config(format!(
            "sentence lengths {}..={} must lie within 1..=40",
            cfg.min_len, cfg.max_len
        )));
    }
    if cfg.max_span_len == 0 {
        return Err(Error::Config("max_span_len must be at least 1".into()));
    }
    let mut g = Gen {
        rng: ChaCha8Rng::seed_from_u64(cfg.seed),
        words: source_words(),
        cfg: *cfg,
    };
    let mut sources = Vec::with_capacity(cfg.pairs);
    let mut references = Vec::with_capacity(cfg.pairs);
    let mut mt = Vec::with_capacity(cfg.pairs);
    for _ in 0..cfg.pairs {
        let x = g.sentence();
        references.push(translate(&x));
        mt.push(g.mt(&x));
        sources.push(x);
    }
    let golden_train = (0..cfg.golden_train).map(|_| g.golden(false)).collect::<Result<_>>()?;
    let golden_dev = (0..cfg.golden_dev).map(|_| g.golden(false)).collect::<Result<_>>()?;
    let golden_test = (0..cfg.golden_test).map(|_| g.golden(true)).collect::<Result<_>>()?;
    Ok(ToyCorpus {
        sources,
        references,
        mt,
        golden_train,
        golden_dev,
        golden_test,
    })
}

fn write_lines(path: &Path, lines: &[Vec<String>]) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io_at(path, e))?;
    let mut w = std::io::BufWriter::new(f);
    for l in lines {
        writeln!(w, "{}", l.join(" ")).map_err(|e| Error::io_at(path, e))?;
    }
    w.flush().map_err(|e| Error::io_at(path, e))
}

impl ToyCorpus {
    pub const FILES: [&'static str; 6] = [
        "parallel.src",
        "parallel.ref",
        "parallel.mt",
        "golden.train.jsonl",
        "golden.dev.jsonl",
        "golden.test.jsonl",
    ];

    /// Writes plain-text parallel files and TS record files into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
        let [src, rf, mt, tr, dv, te] = Self::FILES;
        write_lines(&dir.join(src), &self.sources)?;
        write_lines(&dir.join(rf), &self.references)?;
        write_lines(&dir.join(mt), &self.mt)?;
        write_ts_file(&self.golden_train, dir.join(tr))?;
        write_ts_file(&self.golden_dev, dir.join(dv))?;
        write_ts_file(&self.golden_test, dir.join(te))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ToyConfig {
        ToyConfig {
            pairs: 300,
            golden_train: 50,
            golden_dev: 20,
            golden_test: 50,
            ..Default::default()
        }
    }

    #[test]
    fn word_mappings() {
        assert_eq!(translate_word("17"), "lotu");
        assert_eq!(expert_word("17"), "tulo");
        assert_eq!(expert_word("18"), "love");
        assert_eq!(source_words().len(), 40);
        let literal: std::collections::HashSet<String> = source_words().iter().map(|w| translate_word(w)).collect();
        assert_eq!(literal.len(), 40);
        for t in TERMS {
            assert!(!literal.contains(&expert_word(t)));
            assert_ne!(expert_word(t)[..1], translate_word(t)[..1]);
        }
    }

    #[test]
    fn parallel_side_is_literal() {
        let c = make_toy(&small()).unwrap();
        for (x, r) in c.sources.iter().zip(&c.references) {
            assert!((3..=7).contains(&x.len()));
            assert_eq!(&translate(x), r);
            let distinct: std::collections::HashSet<_> = x.iter().collect();
            assert_eq!(distinct.len(), x.len());
        }
        let literal: std::collections::HashSet<String> = source_words().iter().map(|w| translate_word(w)).collect();
        let (mut wrong, mut total) = (0, 0);
        for (m, r) in c.mt.iter().zip(&c.references) {
            for (a, b) in m.iter().zip(r) {
                total += 1;
                if a != b {
                    wrong += 1;
                    assert!(!literal.contains(a));
                }
            }
        }
        let rate = wrong as f64 / total as f64;
        assert!((0.1..0.2).contains(&rate), "{rate}");
    }

    #[test]
    fn golden_examples_mark_errors() {
        let c = make_toy(&small()).unwrap();
        assert_eq!(c.golden_test.len(), 50);
        assert!(c.golden_test.iter().all(|e| e.hint.is_some()));
        let mut terms = 0;
        for ex in c.golden_train.iter().chain(&c.golden_test) {
            assert!(!ex.is_null_span() && ex.span_end - ex.span_start <= 3);
            let expect: Vec<String> = ex.source[ex.span_start..ex.span_end].iter().map(|w| expert_word(w)).collect();
            assert_eq!(ex.alternatives, vec![expect]);
            assert_ne!(ex.span_tokens(), ex.alternatives[0].as_slice());
            // outside the span the translation is literal
            let lit = translate(&ex.source);
            assert_eq!(ex.translation[..ex.span_start], lit[..ex.span_start]);
            assert_eq!(ex.translation[ex.span_end..], lit[ex.span_end..]);
            terms += ex.source[ex.span_start..ex.span_end].iter().any(|w| TERMS.contains(&w.as_str())) as usize;
        }
        assert!(terms > 30, "{terms}");
    }

    #[test]
    fn deterministic_per_seed() {
        let a = make_toy(&small()).unwrap();
        let b = make_toy(&small()).unwrap();
        assert_eq!(a.mt, b.mt);
        assert_eq!(a.golden_test, b.golden_test);
        let c = make_toy(&ToyConfig { seed: 2, ..small() }).unwrap();
        assert_ne!(a.sources, c.sources);
    }

    #[test]
    fn writes_all_files() {
        let dir = tempfile::tempdir().unwrap();
        let c = make_toy(&small()).unwrap();
        c.write(dir.path()).unwrap();
        for f in ToyCorpus::FILES {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        let back = crate::corpus_io::read_ts_file(dir.path().join("golden.dev.jsonl")).unwrap();
        assert_eq!(back, c.golden_dev);
    }

    #[test]
    fn bad_lengths_rejected() {
        assert!(make_toy(&ToyConfig { min_len: 0, ..small() }).is_err());
        assert!(make_toy(&ToyConfig { min_len: 5, max_len: 4, ..small() }).is_err());
    }
}
