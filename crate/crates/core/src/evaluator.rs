//! Multi-reference BLEU-4 and test-set evaluation of top-1 suggestions.
//!
//! Corpus BLEU follows `multi-bleu.perl`: n-gram counts are clipped by their
//! largest count in any reference, the effective reference length is the
//! closest reference length (ties to the shorter one), and there is no
//! smoothing. Sentence BLEU, used only in per-example dumps, adds one to every
//! n-gram match and total.

use std::collections::HashMap;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::corpus_io::{render_input, TsExample};
use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BleuMode {
    Word,
    /// Every non-whitespace character is a token.
    Char,
}

impl FromStr for BleuMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "word" => Ok(BleuMode::Word),
            "char" => Ok(BleuMode::Char),
            other => Err(Error::Config(format!("unknown BLEU mode {other:?} (word|char)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuReport {
    /// Percentage in [0, 100].
    pub bleu: f64,
    pub precisions: [f64; MAX_ORDER],
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl std::fmt::Display for BleuReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let p: Vec<String> = self.precisions.iter().map(|p| format!("{:.1}", 100.0 * p)).collect();
        write!(
            f,
            "BLEU = {:.2}, {} (BP={:.3}, ratio={:.3}, hyp_len={}, ref_len={})",
            self.bleu,
            p.join("/"),
            self.brevity_penalty,
            if self.ref_len == 0 { 0.0 } else { self.hyp_len as f64 / self.ref_len as f64 },
            self.hyp_len,
            self.ref_len
        )
    }
}

/// Tokens BLEU counts over in `mode`.
pub fn units<S: AsRef<str>>(tokens: &[S], mode: BleuMode) -> Vec<String> {
    match mode {
        BleuMode::Word => tokens.iter().map(|t| t.as_ref().to_owned()).collect(),
        BleuMode::Char => tokens
            .iter()
            .flat_map(|t| t.as_ref().chars().filter(|c| !c.is_whitespace()).map(String::from).collect::<Vec<_>>())
            .collect(),
    }
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Sufficient statistics of one segment.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Stats {
    matches: [usize; MAX_ORDER],
    totals: [usize; MAX_ORDER],
    hyp_len: usize,
    ref_len: usize,
}

impl Stats {
    fn add(&mut self, o: &Stats) {
        for n in 0..MAX_ORDER {
            self.matches[n] += o.matches[n];
            self.totals[n] += o.totals[n];
        }
        self.hyp_len += o.hyp_len;
        self.ref_len += o.ref_len;
    }
}

fn segment_stats(hyp: &[String], refs: &[Vec<String>]) -> Stats {
    let mut s = Stats { hyp_len: hyp.len(), ..Stats::default() };
    s.ref_len = refs
        .iter()
        .map(|r| r.len())
        .min_by_key(|&l| (l.abs_diff(hyp.len()), l))
        .unwrap_or(0);
    for n in 1..=MAX_ORDER {
        let h = ngram_counts(hyp, n);
        let mut max_ref: HashMap<&[String], usize> = HashMap::new();
        for r in refs {
            for (g, c) in ngram_counts(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        s.matches[n - 1] = h.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
        s.totals[n - 1] = hyp.len().saturating_sub(n - 1);
    }
    s
}

fn brevity_penalty(hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len > ref_len {
        1.0
    } else if hyp_len == 0 {
        if ref_len == 0 { 1.0 } else { 0.0 }
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    }
}

fn report(s: &Stats, smooth: bool) -> BleuReport {
    let mut precisions = [0.0; MAX_ORDER];
    for n in 0..MAX_ORDER {
        precisions[n] = if smooth {
            (s.matches[n] + 1) as f64 / (s.totals[n] + 1) as f64
        } else if s.totals[n] == 0 {
            0.0
        } else {
            s.matches[n] as f64 / s.totals[n] as f64
        };
    }
    let bp = brevity_penalty(s.hyp_len, s.ref_len);
    let bleu = if precisions.iter().any(|&p| p == 0.0) {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / MAX_ORDER as f64;
        (100.0 * bp * log_mean.exp()).min(100.0)
    };
    BleuReport { bleu, precisions, brevity_penalty: bp, hyp_len: s.hyp_len, ref_len: s.ref_len }
}

fn prepare<S: AsRef<str>>(hyp: &[S], refs: &[Vec<S>], mode: BleuMode) -> (Vec<String>, Vec<Vec<String>>) {
    (units(hyp, mode), refs.iter().map(|r| units(r, mode)).collect())
}

/// Corpus-level BLEU over token sequences; every segment has at least one
/// reference.
pub fn corpus_bleu<S: AsRef<str>>(hypotheses: &[Vec<S>], references: &[Vec<Vec<S>>], mode: BleuMode) -> Result<BleuReport> {
    if hypotheses.len() != references.len() {
        return Err(Error::LengthMismatch(format!(
            "{} hypotheses, {} reference sets",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() {
        return Err(Error::Empty("corpus"));
    }
    let mut total = Stats::default();
    for (k, (h, r)) in hypotheses.iter().zip(references).enumerate() {
        if r.is_empty() {
            return Err(Error::InvalidExample(format!("segment {k} has no reference")));
        }
        let (h, r) = prepare(h, r, mode);
        total.add(&segment_stats(&h, &r));
    }
    Ok(report(&total, false))
}

/// Add-one smoothed sentence BLEU, for diagnostics.
pub fn sentence_bleu<S: AsRef<str>>(hypothesis: &[S], references: &[Vec<S>], mode: BleuMode) -> f64 {
    let (h, r) = prepare(hypothesis, references, mode);
    report(&segment_stats(&h, &r), true).bleu
}

/// One ranked suggestion, already de-subworded.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Suggestion {
    pub tokens: Vec<String>,
    pub text: String,
    pub score: f64,
}

impl Suggestion {
    pub fn new(tokens: Vec<String>, score: f64) -> Self {
        Suggestion { text: tokens.join(" "), tokens, score }
    }
}

/// Per-example dump record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpRecord {
    pub input: String,
    pub top_k: Vec<String>,
    pub gold: Vec<String>,
    pub sentence_bleu: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub report: BleuReport,
    /// Fraction of examples whose top-1 equals some gold alternative.
    pub exact_match: f64,
    pub examples: usize,
    /// Examples where no hypothesis reached `<eos>`.
    pub truncated: usize,
    #[serde(skip)]
    pub dump: Vec<DumpRecord>,
}

/// Ranked suggestions for one example, plus whether search was truncated.
pub type Ranked = (Vec<Suggestion>, bool);

/// Scores the top-1 output of `suggest` against all gold alternatives.
pub fn evaluate_with<F>(examples: &[TsExample], mode: BleuMode, use_hints: bool, mut suggest: F) -> Result<Evaluation>
where
    F: FnMut(&TsExample) -> Result<Ranked>,
{
    if examples.is_empty() {
        return Err(Error::Empty("test set"));
    }
    let mut hyps = Vec::with_capacity(examples.len());
    let mut refs = Vec::with_capacity(examples.len());
    let mut dump = Vec::with_capacity(examples.len());
    let (mut exact, mut truncated) = (0usize, 0usize);
    for ex in examples {
        let (ranked, trunc) = suggest(ex)?;
        truncated += trunc as usize;
        let top = ranked.first().map(|s| s.tokens.clone()).unwrap_or_default();
        if ex.alternatives.contains(&top) {
            exact += 1;
        }
        let input = render_input(ex, use_hints, None)?.tokens.join(" ");
        dump.push(DumpRecord {
            input,
            top_k: ranked.iter().map(|s| s.text.clone()).collect(),
            gold: ex.alternatives.iter().map(|a| a.join(" ")).collect(),
            sentence_bleu: sentence_bleu(&top, &ex.alternatives, mode),
        });
        hyps.push(top);
        refs.push(ex.alternatives.clone());
    }
    Ok(Evaluation {
        report: corpus_bleu(&hyps, &refs, mode)?,
        exact_match: exact as f64 / examples.len() as f64,
        examples: examples.len(),
        truncated,
        dump,
    })
}

pub fn write_dump(records: &[DumpRecord], mut w: impl Write) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r).map_err(|e| Error::Parse(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus_io::tokenize;
    use proptest::prelude::*;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(s: &str) -> Vec<String> {
        tokenize(s)
    }

    #[test]
    fn identical_corpus_scores_100() {
        let h = vec![t("a b c d e"), t("x y z w")];
        let r = vec![vec![t("a b c d e")], vec![t("x y z w")]];
        let rep = corpus_bleu(&h, &r, BleuMode::Word).unwrap();
        assert_eq!(rep.bleu, 100.0);
        assert_eq!(rep.brevity_penalty, 1.0);
    }

    #[test]
    fn clipped_repetition() {
        let rep = corpus_bleu(&[t("the the the the")], &[vec![t("the cat")]], BleuMode::Word).unwrap();
        assert_eq!(rep.precisions[0], 0.25);
        assert_eq!(rep.precisions[1], 0.0);
        assert_eq!(rep.bleu, 0.0);
    }

    #[test]
    fn second_of_three_references() {
        let refs = vec![vec![t("a cat sat on it"), t("the dog sat on the mat"), t("one two")]];
        let rep = corpus_bleu(&[t("the dog sat on the mat")], &refs, BleuMode::Word).unwrap();
        assert_eq!(rep.bleu, 100.0);
    }

    #[test]
    fn hand_computed_value() {
        // hyp 6 words, ref 7; matches 5/6, 3/5, 2/4, 1/3
        let h = t("the cat sat on a mat");
        let r = t("the cat sat on the red mat");
        let rep = corpus_bleu(&[h], &[vec![r]], BleuMode::Word).unwrap();
        let p = [5.0 / 6.0, 3.0 / 5.0, 2.0 / 4.0, 1.0 / 3.0];
        let expect = 100.0 * (1.0f64 - 7.0 / 6.0).exp() * (p.iter().map(|x: &f64| x.ln()).sum::<f64>() / 4.0).exp();
        assert!((rep.bleu - expect).abs() < 1e-12, "{} vs {}", rep.bleu, expect);
    }

    #[test]
    fn closest_length_ties_to_shorter() {
        let h = t("a b c d e");
        let refs = vec![t("a b c d"), t("a b c d e f")];
        let rep = corpus_bleu(&[h], &[refs], BleuMode::Word).unwrap();
        assert_eq!(rep.ref_len, 4);
        assert_eq!(rep.brevity_penalty, 1.0);
    }

    #[test]
    fn errors_on_bad_shapes() {
        assert!(corpus_bleu::<String>(&[], &[], BleuMode::Word).is_err());
        assert!(corpus_bleu(&[t("a")], &[], BleuMode::Word).is_err());
        assert!(corpus_bleu(&[t("a")], &[vec![]], BleuMode::Word).is_err());
    }

    #[test]
    fn empty_hypothesis_contributes_nothing() {
        let h = vec![t("a b c d"), vec![]];
        let r = vec![vec![t("a b c d")], vec![t("x")]];
        let rep = corpus_bleu(&h, &r, BleuMode::Word).unwrap();
        assert_eq!(rep.hyp_len, 4);
        assert_eq!(rep.ref_len, 5);
        assert_eq!(rep.precisions, [1.0; 4]);
        assert_eq!(sentence_bleu::<String>(&[], &[t("x")], BleuMode::Word), 0.0);
        assert_eq!(sentence_bleu::<String>(&[], &[vec![]], BleuMode::Word), 100.0);
    }

    #[test]
    fn char_mode_splits_characters() {
        assert_eq!(units(&t("lotu ka"), BleuMode::Char), t("l o t u k a"));
        let rep = corpus_bleu(&[t("lotu")], &[vec![t("lotu")]], BleuMode::Char).unwrap();
        assert_eq!(rep.bleu, 100.0);
        assert_eq!(rep.hyp_len, 4);
    }

    #[test]
    fn sentence_bleu_is_smoothed() {
        // p = 3/4, 1/3, 1/2, 1/1 after add-one; hyp and ref both 3 long
        let s = sentence_bleu(&t("a b z"), &[t("a q b")], BleuMode::Word);
        let manual = 100.0 * (((3.0f64 / 4.0) * (1.0 / 3.0) * (1.0 / 2.0) * 1.0).ln() / 4.0).exp();
        assert!((s - manual).abs() < 1e-12, "{s} vs {manual}");
    }

    #[test]
    fn oracle_suggester_scores_100() {
        let ex = TsExample::new(t("17 26"), t("lotu kami"), (1, 2), vec![t("pezi ka lo mi"), t("zipe")], None).unwrap();
        let null = TsExample::new(t("17"), t("lotu"), (1, 1), vec![vec![]], None).unwrap();
        let exs = vec![ex.clone(), ex, null];
        let ev = evaluate_with(&exs, BleuMode::Word, false, |e| {
            Ok((vec![Suggestion::new(e.alternatives[0].clone(), 0.0)], false))
        })
        .unwrap();
        assert_eq!(ev.report.bleu, 100.0);
        assert_eq!(ev.exact_match, 1.0);
        assert_eq!(ev.dump.len(), 3);
        assert_eq!(ev.dump[2].gold, vec![String::new()]);
        let mut buf = Vec::new();
        write_dump(&ev.dump, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap().lines().count(), 3);
    }

    fn seq() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d"]), 0..7)
            .prop_map(|v| v.into_iter().map(String::from).collect())
    }

    proptest! {
        #[test]
        fn permutation_invariant(
            data in prop::collection::vec((seq(), prop::collection::vec(seq(), 1..3)), 1..8),
            seed in 0u64..1000,
        ) {
            let (h, r): (Vec<_>, Vec<_>) = data.iter().cloned().unzip();
            let base = corpus_bleu(&h, &r, BleuMode::Word).unwrap();
            let mut shuffled = data.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let (h2, r2): (Vec<_>, Vec<_>) = shuffled.into_iter().unzip();
            let other = corpus_bleu(&h2, &r2, BleuMode::Word).unwrap();
            prop_assert_eq!(base.bleu, other.bleu);
            prop_assert!((0.0..=100.0).contains(&base.bleu));
        }

        #[test]
        fn duplicate_reference_changes_nothing(
            data in prop::collection::vec((seq(), prop::collection::vec(seq(), 1..3)), 1..8),
            pick in 0usize..100,
        ) {
            let (h, r): (Vec<_>, Vec<_>) = data.into_iter().unzip();
            let base = corpus_bleu(&h, &r, BleuMode::Word).unwrap();
            let mut r2 = r.clone();
            let k = pick % r2.len();
            let dup = r2[k][0].clone();
            r2[k].push(dup);
            let other = corpus_bleu(&h, &r2, BleuMode::Word).unwrap();
            prop_assert_eq!(base, other);
        }

        #[test]
        fn char_mode_equals_word_mode_on_single_chars(
            data in prop::collection::vec((seq(), prop::collection::vec(seq(), 1..3)), 1..8),
        ) {
            let (h, r): (Vec<_>, Vec<_>) = data.into_iter().unzip();
            prop_assert_eq!(
                corpus_bleu(&h, &r, BleuMode::Word).unwrap(),
                corpus_bleu(&h, &r, BleuMode::Char).unwrap()
            );
        }
    }
}
