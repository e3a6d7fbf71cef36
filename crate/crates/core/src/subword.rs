//! Byte-pair-encoding subwords and the shared token vocabulary.
//!
//! Words are split into characters plus an end-of-word symbol `</w>`, and the
//! learned merges are replayed in rank order. On output, word-internal pieces
//! carry a trailing `@@` so that `undo_bpe` can glue them back together.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::corpus_io::{is_reserved, RESERVED, UNK};
use crate::error::{Error, Result};

pub const END_OF_WORD: &str = "</w>";
pub const CONTINUATION: &str = "@@";
const MERGES_HEADER: &str = "#version: 0.2";

/// Dense token ↔ id table. Reserved symbols occupy ids `0..6`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from the reserved symbols followed by `tokens`
    /// (duplicates and reserved entries are skipped).
    pub fn from_tokens<I, S>(tokens: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut v = Vocab {
            tokens: Vec::new(),
            index: HashMap::new(),
        };
        for r in RESERVED {
            v.push(r.to_owned());
        }
        for t in tokens {
            let t = t.into();
            if !v.index.contains_key(&t) {
                v.push(t);
            }
        }
        v
    }

    fn push(&mut self, token: String) {
        self.index.insert(token.clone(), self.tokens.len() as u32);
        self.tokens.push(token);
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn get(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Id of `token`, or the `<unk>` id.
    pub fn id(&self, token: &str) -> u32 {
        self.get(token).unwrap_or(1)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<u32> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[u32]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(UNK).to_owned())
            .collect()
    }

    pub fn write(&self, mut w: impl Write) -> Result<()> {
        for (id, t) in self.tokens.iter().enumerate() {
            writeln!(w, "{t} {id}")?;
        }
        Ok(())
    }

    pub fn read(r: impl BufRead) -> Result<Self> {
        let mut tokens = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() {
                continue;
            }
            let (tok, id) = line.rsplit_once(' ').ok_or_else(|| Error::Record {
                line: n + 1,
                message: "expected \"token id\"".into(),
            })?;
            let id: usize = id.parse().map_err(|_| Error::Record {
                line: n + 1,
                message: format!("bad id {id:?}"),
            })?;
            if id != tokens.len() {
                return Err(Error::Record {
                    line: n + 1,
                    message: format!("ids must be dense, expected {}", tokens.len()),
                });
            }
            tokens.push(tok.to_owned());
        }
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::VocabularyMismatch(
                "vocabulary must start with the reserved symbols".into(),
            ));
        }
        Ok(Vocab::from_tokens(tokens.into_iter().skip(RESERVED.len())))
    }

    /// Order-sensitive fingerprint used to pair checkpoints with vocabularies.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for t in &self.tokens {
            h.update(t.as_bytes());
            h.update([0u8]);
        }
        let digest = h.finalize();
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Ordered merge rules plus the vocabulary of the tokens they produce.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubwordModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
    vocab: Vocab,
}

#[derive(Debug, Clone, Copy)]
pub struct BpeOptions {
    pub num_merges: usize,
    /// Pairs seen fewer times than this are never merged.
    pub min_frequency: u64,
}

impl Default for BpeOptions {
    fn default() -> Self {
        BpeOptions {
            num_merges: 4000,
            min_frequency: 2,
        }
    }
}

type Pair = (String, String);

/// Learns merges greedily: the most frequent adjacent symbol pair wins, ties go
/// to the lexicographically smallest pair.
pub fn learn_bpe<I, S>(corpus: I, opts: BpeOptions) -> Result<SubwordModel>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[String]>,
{
    let mut word_freq: BTreeMap<String, u64> = BTreeMap::new();
    for sentence in corpus {
        for w in sentence.as_ref() {
            if !is_reserved(w) {
                *word_freq.entry(w.clone()).or_default() += 1;
            }
        }
    }
    if word_freq.is_empty() {
        return Err(Error::Empty("BPE training corpus"));
    }

    let mut words: Vec<(Vec<String>, u64)> = word_freq
        .iter()
        .map(|(w, &f)| (initial_symbols(w), f))
        .collect();

    let mut pair_counts: HashMap<Pair, i64> = HashMap::new();
    let mut pair_words: HashMap<Pair, BTreeSet<usize>> = HashMap::new();
    for (wi, (syms, f)) in words.iter().enumerate() {
        for p in syms.windows(2) {
            let key = (p[0].clone(), p[1].clone());
            *pair_counts.entry(key.clone()).or_default() += *f as i64;
            pair_words.entry(key).or_default().insert(wi);
        }
    }

    let mut merges = Vec::with_capacity(opts.num_merges);
    while merges.len() < opts.num_merges {
        let best = pair_counts
            .iter()
            .filter(|(_, &c)| c > 0)
            .max_by(|(pa, ca), (pb, cb)| ca.cmp(cb).then_with(|| pb.cmp(pa)));
        let Some((pair, &count)) = best else { break };
        if (count as u64) < opts.min_frequency.max(1) {
            break;
        }
        let pair = pair.clone();
        let affected: Vec<usize> = pair_words
            .get(&pair)
            .map(|s| s.iter().copied().collect())
            .unwrap_or_default();
        let merged = format!("{}{}", pair.0, pair.1);
        for wi in affected {
            let (syms, f) = &mut words[wi];
            let f = *f as i64;
            for p in syms.windows(2) {
                let key = (p[0].clone(), p[1].clone());
                if let Some(c) = pair_counts.get_mut(&key) {
                    *c -= f;
                }
            }
            *syms = merge_pair(syms, &pair, &merged);
            for p in syms.windows(2) {
                let key = (p[0].clone(), p[1].clone());
                *pair_counts.entry(key.clone()).or_default() += f;
                pair_words.entry(key).or_default().insert(wi);
            }
        }
        pair_counts.remove(&pair);
        pair_words.remove(&pair);
        merges.push(pair);
    }

    let mut model = SubwordModel::from_merges(merges, Vocab::from_tokens(Vec::<String>::new()));
    model.vocab = model.build_vocab(&word_freq);
    Ok(model)
}

fn initial_symbols(word: &str) -> Vec<String> {
    let mut syms: Vec<String> = word.chars().map(String::from).collect();
    syms.push(END_OF_WORD.to_owned());
    syms
}

fn merge_pair(syms: &[String], pair: &Pair, merged: &str) -> Vec<String> {
    let mut out = Vec::with_capacity(syms.len());
    let mut k = 0;
    while k < syms.len() {
        if k + 1 < syms.len() && syms[k] == pair.0 && syms[k + 1] == pair.1 {
            out.push(merged.to_owned());
            k += 2;
        } else {
            out.push(syms[k].clone());
            k += 1;
        }
    }
    out
}

impl SubwordModel {
    pub fn from_merges(merges: Vec<(String, String)>, vocab: Vocab) -> Self {
        let ranks = merges
            .iter()
            .enumerate()
            .map(|(r, p)| (p.clone(), r))
            .collect();
        SubwordModel {
            merges,
            ranks,
            vocab,
        }
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    pub fn vocab(&self) -> &Vocab {
        &self.vocab
    }

    /// Reserved symbols, then every token of the segmented corpus by frequency,
    /// then both forms of every character so that any word over the training
    /// alphabet (and any single-character hint) stays encodable.
    fn build_vocab(&self, word_freq: &BTreeMap<String, u64>) -> Vocab {
        let mut counts: BTreeMap<String, u64> = BTreeMap::new();
        let mut chars: BTreeSet<char> = BTreeSet::new();
        for (w, &f) in word_freq {
            chars.extend(w.chars());
            for t in self.segment_word(w) {
                *counts.entry(t).or_default() += f;
            }
        }
        for c in chars {
            counts.entry(c.to_string()).or_default();
            counts.entry(format!("{c}{CONTINUATION}")).or_default();
        }
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        Vocab::from_tokens(ranked.into_iter().map(|(t, _)| t))
    }

    /// Segments one word into output tokens.
    pub fn segment_word(&self, word: &str) -> Vec<String> {
        if is_reserved(word) {
            return vec![word.to_owned()];
        }
        let mut syms = initial_symbols(word);
        loop {
            let best = syms
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0].clone(), p[1].clone())))
                .min()
                .copied();
            let Some(rank) = best else { break };
            let pair = &self.merges[rank];
            let merged = format!("{}{}", pair.0, pair.1);
            syms = merge_pair(&syms, pair, &merged);
        }

        let mut pieces: Vec<(String, bool)> = Vec::with_capacity(syms.len());
        for s in syms {
            if s == END_OF_WORD {
                if let Some(last) = pieces.last_mut() {
                    last.1 = true;
                }
            } else if let Some(stem) = s.strip_suffix(END_OF_WORD) {
                pieces.push((stem.to_owned(), true));
            } else {
                pieces.push((s, false));
            }
        }
        pieces
            .into_iter()
            .map(|(t, last)| if last { t } else { format!("{t}{CONTINUATION}") })
            .collect()
    }

    /// Segments a word sequence.
    pub fn apply_bpe<S: AsRef<str>>(&self, words: &[S]) -> Vec<String> {
        words
            .iter()
            .flat_map(|w| self.segment_word(w.as_ref()))
            .collect()
    }

    pub fn write_merges(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{MERGES_HEADER}")?;
        for (a, b) in &self.merges {
            writeln!(w, "{a} {b}")?;
        }
        Ok(())
    }

    pub fn read_merges(r: impl BufRead) -> Result<Vec<(String, String)>> {
        let mut merges = Vec::new();
        for (n, line) in r.lines().enumerate() {
            let line = line?;
            if line.is_empty() || (n == 0 && line.starts_with("#version")) {
                continue;
            }
            let (a, b) = line.split_once(' ').ok_or_else(|| Error::Record {
                line: n + 1,
                message: "expected \"left right\"".into(),
            })?;
            merges.push((a.to_owned(), b.to_owned()));
        }
        Ok(merges)
    }

    pub fn save(&self, merges_path: &Path, vocab_path: &Path) -> Result<()> {
        let f = File::create(merges_path).map_err(|e| Error::io_at(merges_path, e))?;
        let mut w = BufWriter::new(f);
        self.write_merges(&mut w)?;
        w.flush()?;
        let f = File::create(vocab_path).map_err(|e| Error::io_at(vocab_path, e))?;
        let mut w = BufWriter::new(f);
        self.vocab.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(merges_path: &Path, vocab_path: &Path) -> Result<Self> {
        let f = File::open(merges_path).map_err(|e| Error::io_at(merges_path, e))?;
        let merges = Self::read_merges(BufReader::new(f))?;
        let f = File::open(vocab_path).map_err(|e| Error::io_at(vocab_path, e))?;
        let vocab = Vocab::read(BufReader::new(f))?;
        Ok(Self::from_merges(merges, vocab))
    }
}

/// Glues subword tokens back into words.
pub fn undo_bpe<S: AsRef<str>>(tokens: &[S]) -> Vec<String> {
    let mut words = Vec::new();
    let mut current = String::new();
    let mut open = false;
    for t in tokens {
        let t = t.as_ref();
        match t.strip_suffix(CONTINUATION) {
            Some(stem) if !is_reserved(t) => {
                current.push_str(stem);
                open = true;
            }
            _ => {
                current.push_str(t);
                words.push(std::mem::take(&mut current));
                open = false;
            }
        }
    }
    if open {
        words.push(current);
    }
    words
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn corpus(entries: &[(&str, usize)]) -> Vec<Vec<String>> {
        entries.iter()
            .flat_map(|(w, n)| std::iter::repeat_n(vec![w.to_string()], *n))
            .collect()
    }

    fn opts(n: usize) -> BpeOptions {
        BpeOptions {
            num_merges: n,
            min_frequency: 2,
        }
    }

    /// Independent oracle: recount every adjacent pair from scratch.
    fn brute_force_best_pair(words: &[(Vec<String>, u64)]) -> Option<Pair> {
        let mut counts: BTreeMap<Pair, u64> = BTreeMap::new();
        for (syms, f) in words {
            for p in syms.windows(2) {
                *counts.entry((p[0].clone(), p[1].clone())).or_default() += f;
            }
        }
        let max = *counts.values().max()?;
        counts.into_iter().find(|(_, c)| *c == max).map(|(p, _)| p)
    }

    #[test]
    fn zero_merges_is_character_level() {
        let m = learn_bpe(corpus(&[("abc", 3)]), opts(0)).unwrap();
        assert!(m.merges().is_empty());
        assert_eq!(m.apply_bpe(&["abc"]), vec!["a@@", "b@@", "c"]);
    }

    #[test]
    fn repeated_word_merges_ab_first() {
        let m = learn_bpe(corpus(&[("abab", 4)]), opts(1)).unwrap();
        assert_eq!(m.merges()[0], ("a".into(), "b".into()));
    }

    #[test]
    fn classic_toy_corpus_matches_brute_force() {
        let entries = [("low", 5), ("lower", 2), ("newest", 6), ("widest", 3)];
        let m = learn_bpe(corpus(&entries), opts(10)).unwrap();
        assert_eq!(m.merges()[0], ("e".into(), "s".into()));
        assert_eq!(m.merges()[1], ("es".into(), "t".into()));

        let mut words: Vec<(Vec<String>, u64)> = entries
            .iter()
            .map(|(w, n)| (initial_symbols(w), *n as u64))
            .collect();
        for learned in m.merges() {
            let expected = brute_force_best_pair(&words).unwrap();
            assert_eq!(&expected, learned);
            let merged = format!("{}{}", expected.0, expected.1);
            for (syms, _) in words.iter_mut() {
                *syms = merge_pair(syms, &expected, &merged);
            }
        }
    }

    #[test]
    fn seen_word_becomes_single_token() {
        let m = learn_bpe(corpus(&[("newest", 6), ("low", 5)]), opts(100)).unwrap();
        assert_eq!(m.apply_bpe(&["newest"]), vec!["newest"]);
    }

    #[test]
    fn empty_inputs() {
        let m = learn_bpe(corpus(&[("ab", 2)]), opts(5)).unwrap();
        assert!(m.apply_bpe::<&str>(&[]).is_empty());
        assert!(undo_bpe::<&str>(&[]).is_empty());
        assert!(matches!(
            learn_bpe(Vec::<Vec<String>>::new(), opts(5)),
            Err(Error::Empty(_))
        ));
    }

    #[test]
    fn unknown_characters_pass_through() {
        let m = learn_bpe(corpus(&[("ab", 2)]), opts(5)).unwrap();
        let toks = m.apply_bpe(&["abz"]);
        assert_eq!(toks, vec!["ab@@", "z"]);
        assert_eq!(m.vocab().get("z"), None);
        assert_eq!(m.vocab().id("z"), 1);
    }

    #[test]
    fn reserved_symbols_lowest_ids_and_never_merged() {
        let m = learn_bpe(corpus(&[("ab", 3), ("<sep>", 3)]), opts(10)).unwrap();
        for (i, r) in RESERVED.iter().enumerate() {
            assert_eq!(m.vocab().get(r), Some(i as u32));
        }
        assert!(m
            .merges()
            .iter()
            .all(|(a, b)| !is_reserved(&format!("{a}{b}")) && !a.contains("sep") && !b.contains("sep")));
        assert_eq!(m.apply_bpe(&["<slot>"]), vec!["<slot>"]);
    }

    #[test]
    fn save_load_keeps_ids_stable() {
        let m = learn_bpe(corpus(&[("lower", 3), ("newest", 4)]), opts(20)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (mp, vp) = (dir.path().join("merges"), dir.path().join("vocab"));
        m.save(&mp, &vp).unwrap();
        let back = SubwordModel::load(&mp, &vp).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.vocab().fingerprint(), m.vocab().fingerprint());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(1000))]
        #[test]
        fn undo_inverts_apply(word in "[a-f]{1,10}") {
            let m = learn_bpe(
                corpus(&[("abcabc", 4), ("fade", 3), ("bead", 2), ("cafe", 5)]),
                opts(30),
            ).unwrap();
            let toks = m.apply_bpe(&[word.as_str(), "cab"]);
            prop_assert_eq!(undo_bpe(&toks), vec![word.clone(), "cab".to_string()]);
            prop_assert_eq!(m.apply_bpe(&undo_bpe(&toks)), toks);
        }
    }
}
