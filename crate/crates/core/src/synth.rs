//! Synthetic TS corpus construction: golden sampling over references, pseudo
//! sampling over machine translations, and alignment-based extraction with a
//! perplexity-margin filter. Also the training-time hint generator.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::aligner::BidirectionalAligner;
use crate::corpus_io::{mask_span, unmask, TsExample};
use crate::error::{Error, Result};
use crate::ngram_lm::NGramModel;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub max_span_len: usize,
    pub p_null: f64,
    pub samples_per_sentence: usize,
    pub seed: u64,
    pub beta: f64,
    pub p_hint: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            max_span_len: 6,
            p_null: 0.1,
            samples_per_sentence: 2,
            seed: 0,
            beta: 10.0,
            p_hint: 0.5,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_span_len == 0 {
            return Err(Error::Config("max_span_len must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.p_null) {
            return Err(Error::Config(format!("p_null {} not in [0, 1)", self.p_null)));
        }
        if self.beta.is_nan() || self.beta < 0.0 {
            return Err(Error::Config(format!("beta {} must be >= 0", self.beta)));
        }
        if !(0.0..=1.0).contains(&self.p_hint) {
            return Err(Error::Config(format!("p_hint {} not in [0, 1]", self.p_hint)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Golden,
    Pseudo,
    Align,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::Golden => "golden",
            Method::Pseudo => "pseudo",
            Method::Align => "align",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "golden" => Ok(Method::Golden),
            "pseudo" => Ok(Method::Pseudo),
            "align" | "alignment" => Ok(Method::Align),
            other => Err(Error::Parse(format!("unknown method {other:?}"))),
        }
    }
}

/// Counters written to the sidecar stats file.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SynthStats {
    pub input_pairs: usize,
    pub emitted: usize,
    pub null_spans: usize,
    pub hinted: usize,
    pub skipped_empty: usize,
    pub phrase_pairs: usize,
    pub rejected_identity: usize,
    pub rejected_boundary: usize,
    pub rejected_margin: usize,
}

/// Where an emitted example came from: input line (0-based) and the tokens
/// removed from the translation by the mask.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub line: usize,
    pub removed: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct SynthOutput {
    pub method: Method,
    pub examples: Vec<TsExample>,
    pub provenance: Vec<Provenance>,
    pub stats: SynthStats,
}

impl SynthOutput {
    fn new(method: Method) -> Self {
        SynthOutput {
            method,
            examples: Vec::new(),
            provenance: Vec::new(),
            stats: SynthStats::default(),
        }
    }

    /// Sidecar JSON: method name plus counters.
    pub fn stats_json(&self) -> String {
        serde_json::json!({ "method": self.method.as_str(), "stats": self.stats }).to_string()
    }
}

/// Produces hint characters for one word of an alternative.
pub trait HintExtractor {
    fn initial(&self, word: &str) -> Result<String>;
}

/// First character of each word. Refuses letters outside the Latin script,
/// where initials need a phonetic table.
#[derive(Debug, Clone, Copy, Default)]
pub struct InitialLetters;

fn is_latin(c: char) -> bool {
    !c.is_alphabetic()
        || c.is_ascii()
        || ('\u{00C0}'..='\u{024F}').contains(&c)
        || ('\u{1E00}'..='\u{1EFF}').contains(&c)
}

impl HintExtractor for InitialLetters {
    fn initial(&self, word: &str) -> Result<String> {
        match word.chars().next() {
            Some(c) if is_latin(c) => Ok(c.to_string()),
            Some(_) => Err(Error::ExtractorNotConfigured(word.to_owned())),
            None => Ok(String::new()),
        }
    }
}

pub fn generate_hint(alternative: &[String], extractor: &dyn HintExtractor) -> Result<Vec<String>> {
    let mut hint = Vec::with_capacity(alternative.len());
    for w in alternative {
        let h = extractor.initial(w)?;
        if !h.is_empty() {
            hint.push(h);
        }
    }
    Ok(hint)
}

/// Draws one span over a sentence of `len` words: null with probability
/// `p_null` (position uniform over `0..=len`), otherwise a length uniform over
/// `1..=min(max_span_len, len)` and then a uniform start.
pub fn sample_span(rng: &mut impl Rng, len: usize, cfg: &SamplerConfig) -> (usize, usize) {
    if rng.random::<f64>() < cfg.p_null {
        let i = rng.random_range(0..=len);
        return (i, i);
    }
    let l = rng.random_range(1..=cfg.max_span_len.min(len));
    let i = rng.random_range(0..=len - l);
    (i, i + l)
}

struct Emitter<'a> {
    rng: ChaCha8Rng,
    cfg: &'a SamplerConfig,
    extractor: &'a dyn HintExtractor,
    out: SynthOutput,
}

impl<'a> Emitter<'a> {
    fn new(method: Method, cfg: &'a SamplerConfig, extractor: &'a dyn HintExtractor) -> Self {
        Emitter {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            extractor,
            out: SynthOutput::new(method),
        }
    }

    fn emit(
        &mut self,
        line: usize,
        source: &[String],
        translation: &[String],
        span: (usize, usize),
        alternative: Vec<String>,
    ) -> Result<()> {
        // always draw, so hint settings do not shift the span stream
        let want_hint = self.rng.random::<f64>() < self.cfg.p_hint;
        let hint = if want_hint && !alternative.is_empty() {
            Some(generate_hint(&alternative, self.extractor)?).filter(|h| !h.is_empty())
        } else {
            None
        };
        let ex = TsExample::new(
            source.to_vec(),
            translation.to_vec(),
            span,
            vec![alternative],
            hint,
        )?;
        self.out.stats.emitted += 1;
        self.out.stats.null_spans += ex.is_null_span() as usize;
        self.out.stats.hinted += ex.hint.is_some() as usize;
        self.out.provenance.push(Provenance {
            line,
            removed: ex.span_tokens().to_vec(),
        });
        self.out.examples.push(ex);
        Ok(())
    }
}

fn sample_pairs<S: AsRef<[String]>>(
    method: Method,
    pairs: &[(S, S)],
    cfg: &SamplerConfig,
    extractor: &dyn HintExtractor,
) -> Result<SynthOutput> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Empty("parallel corpus"));
    }
    let mut em = Emitter::new(method, cfg, extractor);
    em.out.stats.input_pairs = pairs.len();
    for (line, (x, y)) in pairs.iter().enumerate() {
        let (x, y) = (x.as_ref(), y.as_ref());
        if y.is_empty() || x.is_empty() {
            em.out.stats.skipped_empty += 1;
            continue;
        }
        for _ in 0..cfg.samples_per_sentence {
            let (i, j) = sample_span(&mut em.rng, y.len(), cfg);
            let alt = y[i..j].to_vec();
            em.emit(line, x, y, (i, j), alt)?;
        }
    }
    Ok(em.out)
}

/// Masks random spans of reference translations; the removed words become
/// the gold alternative.
pub fn sample_golden<S: AsRef<[String]>>(
    pairs: &[(S, S)],
    cfg: &SamplerConfig,
    extractor: &dyn HintExtractor,
) -> Result<SynthOutput> {
    sample_pairs(Method::Golden, pairs, cfg, extractor)
}

/// Machine translations for pseudo sampling: a pre-translated corpus aligned
/// line by line with the sources, or a translation function.
pub enum Translations<'a> {
    Pretranslated(&'a [Vec<String>]),
    Translator(&'a dyn Fn(&[String]) -> Vec<String>),
}

/// Golden sampling semantics over `(x, translate(x))`.
pub fn sample_pseudo(
    sources: &[Vec<String>],
    translations: Translations<'_>,
    cfg: &SamplerConfig,
    extractor: &dyn HintExtractor,
) -> Result<SynthOutput> {
    let translated: Vec<Vec<String>> = match translations {
        Translations::Pretranslated(t) => {
            if t.len() < sources.len() {
                return Err(Error::MissingTranslation { line: t.len() + 1 });
            }
            if t.len() > sources.len() {
                return Err(Error::LengthMismatch(format!(
                    "{} translations for {} sources",
                    t.len(),
                    sources.len()
                )));
            }
            t.to_vec()
        }
        Translations::Translator(f) => sources.iter().map(|x| f(x)).collect(),
    };
    let pairs: Vec<(&[String], &[String])> = sources
        .iter()
        .zip(&translated)
        .map(|(x, y)| (x.as_slice(), y.as_slice()))
        .collect();
    sample_pairs(Method::Pseudo, &pairs, cfg, extractor)
}

/// `ppl(ỹ with alternative spliced at [i, j)) <= ppl(ỹ) - beta`.
pub fn margin_holds(
    lm: &NGramModel,
    mt: &[String],
    span: (usize, usize),
    alternative: &[String],
    beta: f64,
) -> Result<bool> {
    let (masked, _) = mask_span(mt, span.0, span.1)?;
    let corrected = unmask(&masked, alternative)?;
    Ok(lm.perplexity(&corrected) <= lm.perplexity(mt) - beta)
}

/// Re-checks the margin predicate for an emitted alignment-based example.
pub fn recheck_margin(lm: &NGramModel, ex: &TsExample, removed: &[String], beta: f64) -> Result<bool> {
    let (masked, _) = mask_span(&ex.translation, ex.span_start, ex.span_end)?;
    let mt = unmask(&masked, removed)?;
    if mt != ex.translation {
        return Err(Error::InvalidExample("provenance does not match example".into()));
    }
    margin_holds(lm, &mt, (ex.span_start, ex.span_end), &ex.alternatives[0], beta)
}

/// Above this reference OOV rate the LM is taken to belong to another
/// vocabulary.
const MAX_LM_OOV: f64 = 0.5;

/// A triple of source, machine translation and reference.
pub type Triple = (Vec<String>, Vec<String>, Vec<String>);

/// Pairs each consistent phrase of the MT with its aligned reference phrase
/// and keeps those that differ, have differing boundary words on both ends,
/// and lower LM perplexity by at least `beta`.
pub fn extract_alignment_based(
    triples: &[Triple],
    aligner: &BidirectionalAligner,
    lm: &NGramModel,
    cfg: &SamplerConfig,
    extractor: &dyn HintExtractor,
) -> Result<SynthOutput> {
    cfg.validate()?;
    let refs: Vec<&[String]> = triples.iter().map(|t| t.2.as_slice()).collect();
    let oov = lm.oov_rate(&refs);
    if oov > MAX_LM_OOV {
        return Err(Error::VocabularyMismatch(format!(
            "{:.1}% of reference tokens unknown to the language model",
            100.0 * oov
        )));
    }
    let mut em = Emitter::new(Method::Align, cfg, extractor);
    em.out.stats.input_pairs = triples.len();
    for (line, (x, mt, r)) in triples.iter().enumerate() {
        if mt.is_empty() || r.is_empty() || x.is_empty() {
            em.out.stats.skipped_empty += 1;
            continue;
        }
        let base = lm.perplexity(mt);
        for pp in aligner.phrase_pairs(mt, r) {
            em.out.stats.phrase_pairs += 1;
            let (i, j) = pp.src;
            let (a, b) = pp.tgt;
            if mt[i..j] == r[a..b] {
                em.out.stats.rejected_identity += 1;
                continue;
            }
            if mt[i] == r[a] || mt[j - 1] == r[b - 1] {
                em.out.stats.rejected_boundary += 1;
                continue;
            }
            let (masked, _) = mask_span(mt, i, j)?;
            let corrected = unmask(&masked, &r[a..b])?;
            if lm.perplexity(&corrected) > base - cfg.beta {
                em.out.stats.rejected_margin += 1;
                continue;
            }
            em.emit(line, x, mt, (i, j), r[a..b].to_vec())?;
        }
    }
    Ok(em.out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aligner::EmOptions;
    use crate::corpus_io::{tokenize, write_ts_records};
    use crate::ngram_lm::{train_lm, Smoothing};

    fn toks(s: &str) -> Vec<String> {
        tokenize(s)
    }

    fn no_hint(seed: u64) -> SamplerConfig {
        SamplerConfig { seed, p_hint: 0.0, ..Default::default() }
    }

    fn corpus(n: usize) -> Vec<(Vec<String>, Vec<String>)> {
        (0..n)
            .map(|k| {
                let len = 1 + k % 9;
                let x = (0..len).map(|w| format!("s{}", (k * 7 + w) % 23)).collect();
                let y = (0..len).map(|w| format!("t{}", (k * 7 + w) % 23)).collect();
                (x, y)
            })
            .collect()
    }

    #[test]
    fn golden_examples_reconstruct_reference() {
        let pairs = corpus(300);
        let out = sample_golden(&pairs, &no_hint(1), &InitialLetters).unwrap();
        assert_eq!(out.examples.len(), 600);
        for (ex, p) in out.examples.iter().zip(&out.provenance) {
            let (masked, _) = mask_span(&ex.translation, ex.span_start, ex.span_end).unwrap();
            assert_eq!(unmask(&masked, &ex.alternatives[0]).unwrap(), pairs[p.line].1);
            let l = ex.span_end - ex.span_start;
            assert!(l <= 6);
        }
    }

    #[test]
    fn forced_spans() {
        let r = toks("a b c");
        let (m, alt) = mask_span(&r, 1, 2).unwrap();
        assert_eq!(m, toks("a <slot> c"));
        assert_eq!(alt, toks("b"));
        let (_, alt) = mask_span(&r, 1, 1).unwrap();
        assert!(alt.is_empty());
    }

    #[test]
    fn fixed_seed_is_byte_identical() {
        let pairs = corpus(200);
        let cfg = SamplerConfig { seed: 42, ..Default::default() };
        let render = |o: &SynthOutput| {
            let mut buf = Vec::new();
            write_ts_records(&o.examples, &mut buf).unwrap();
            buf
        };
        let a = sample_golden(&pairs, &cfg, &InitialLetters).unwrap();
        let b = sample_golden(&pairs, &cfg, &InitialLetters).unwrap();
        assert_eq!(render(&a), render(&b));
        let c = sample_golden(&pairs, &SamplerConfig { seed: 43, ..cfg }, &InitialLetters).unwrap();
        assert_ne!(render(&a), render(&c));
    }

    #[test]
    fn null_fraction_within_three_sigma() {
        let pairs = corpus(5000);
        let cfg = SamplerConfig { seed: 5, p_null: 0.1, p_hint: 0.0, ..Default::default() };
        let out = sample_golden(&pairs, &cfg, &InitialLetters).unwrap();
        let n = out.examples.len() as f64;
        assert!(n >= 10_000.0);
        let frac = out.stats.null_spans as f64 / n;
        let sigma = (0.1 * 0.9 / n).sqrt();
        assert!((frac - 0.1).abs() <= 3.0 * sigma, "{frac}");
        assert!(out
            .examples
            .iter()
            .all(|e| e.is_null_span() || (1..=6).contains(&(e.span_end - e.span_start))));
    }

    #[test]
    fn hints_follow_alternatives() {
        let pairs = corpus(100);
        let cfg = SamplerConfig { seed: 3, p_hint: 1.0, p_null: 0.0, ..Default::default() };
        let out = sample_golden(&pairs, &cfg, &InitialLetters).unwrap();
        for ex in &out.examples {
            let hint = ex.hint.as_ref().unwrap();
            let expected: Vec<String> = ex.alternatives[0].iter().map(|w| w[..1].to_owned()).collect();
            assert_eq!(hint, &expected);
        }
        // the hint draw does not perturb span selection
        let plain = sample_golden(&pairs, &SamplerConfig { p_hint: 0.0, ..cfg }, &InitialLetters).unwrap();
        let spans = |o: &SynthOutput| o.examples.iter().map(|e| (e.span_start, e.span_end)).collect::<Vec<_>>();
        assert_eq!(spans(&out), spans(&plain));
    }

    #[test]
    fn hint_generation() {
        assert_eq!(generate_hint(&toks("getting popular"), &InitialLetters).unwrap(), toks("g p"));
        assert_eq!(generate_hint(&toks("fire"), &InitialLetters).unwrap(), toks("f"));
        assert!(generate_hint(&[], &InitialLetters).unwrap().is_empty());
        assert_eq!(generate_hint(&toks("élan"), &InitialLetters).unwrap(), toks("é"));
        assert!(matches!(
            generate_hint(&toks("火灾"), &InitialLetters),
            Err(Error::ExtractorNotConfigured(_))
        ));
    }

    #[test]
    fn pseudo_with_perfect_translator_matches_golden() {
        let pairs = corpus(150);
        let sources: Vec<Vec<String>> = pairs.iter().map(|p| p.0.clone()).collect();
        let lookup = |x: &[String]| pairs.iter().find(|p| p.0 == x).unwrap().1.clone();
        let cfg = SamplerConfig { seed: 8, ..Default::default() };
        let g = sample_golden(&pairs, &cfg, &InitialLetters).unwrap();
        let p = sample_pseudo(&sources, Translations::Translator(&lookup), &cfg, &InitialLetters).unwrap();
        assert_eq!(g.examples, p.examples);
        assert_eq!(p.method, Method::Pseudo);

        let refs: Vec<Vec<String>> = pairs.iter().map(|p| p.1.clone()).collect();
        let q = sample_pseudo(&sources, Translations::Pretranslated(&refs), &cfg, &InitialLetters).unwrap();
        assert_eq!(g.examples, q.examples);
    }

    #[test]
    fn pseudo_missing_translation_names_line() {
        let sources = vec![toks("a"), toks("b"), toks("c")];
        let short = vec![toks("x"), toks("y")];
        let err = sample_pseudo(&sources, Translations::Pretranslated(&short), &no_hint(0), &InitialLetters)
            .unwrap_err();
        assert!(matches!(err, Error::MissingTranslation { line: 3 }));
    }

    #[test]
    fn empty_targets_skipped() {
        let pairs = vec![(toks("a"), vec![]), (toks("a"), toks("b"))];
        let out = sample_golden(&pairs, &no_hint(0), &InitialLetters).unwrap();
        assert_eq!(out.stats.skipped_empty, 1);
        assert_eq!(out.examples.len(), 2);
    }

    #[test]
    fn invalid_config_rejected() {
        let pairs = corpus(3);
        for cfg in [
            SamplerConfig { max_span_len: 0, ..Default::default() },
            SamplerConfig { p_null: 1.0, ..Default::default() },
            SamplerConfig { beta: -1.0, ..Default::default() },
        ] {
            assert!(matches!(sample_golden(&pairs, &cfg, &InitialLetters), Err(Error::Config(_))));
        }
    }

    fn crafted() -> (Vec<Triple>, BidirectionalAligner, NGramModel) {
        // MT/reference bitext where the MT systematically says "cat" for "dog"
        let mut bitext: Vec<(Vec<String>, Vec<String>)> = Vec::new();
        for s in ["the sat", "a ran", "the", "sat", "ran", "a"] {
            bitext.push((toks(s), toks(s)));
        }
        for (mt, r) in [("cat", "dog"), ("the cat", "the dog"), ("a cat ran", "a dog ran")] {
            bitext.push((toks(mt), toks(r)));
        }
        let aligner = BidirectionalAligner::train(&bitext, EmOptions { iterations: 10, ..Default::default() }).unwrap();
        // "the dog sat" is frequent, "cat" is never seen by the LM
        let mut lm_corpus = vec![toks("the dog sat"); 30];
        lm_corpus.push(toks("the dog ran"));
        lm_corpus.push(toks("a dog sat"));
        let lm = train_lm(&lm_corpus, 3, Smoothing::KneserNey).unwrap();
        let triple = (toks("der hund sass"), toks("the cat sat"), toks("the dog sat"));
        (vec![triple], aligner, lm)
    }

    #[test]
    fn crafted_case_yields_single_example() {
        let (triples, aligner, lm) = crafted();
        assert!(lm.perplexity(&toks("the dog sat")) < lm.perplexity(&toks("the cat sat")) - 10.0);
        let cfg = SamplerConfig { beta: 10.0, p_hint: 0.0, ..Default::default() };
        let out = extract_alignment_based(&triples, &aligner, &lm, &cfg, &InitialLetters).unwrap();
        assert_eq!(aligner.align(&triples[0].1, &triples[0].2), vec![(0, 0), (1, 1), (2, 2)]);
        assert_eq!(out.examples.len(), 1, "{:?}", out.stats);
        let ex = &out.examples[0];
        assert_eq!((ex.span_start, ex.span_end), (1, 2));
        assert_eq!(ex.alternatives, vec![toks("dog")]);
        assert!(recheck_margin(&lm, ex, &out.provenance[0].removed, 10.0).unwrap());
    }

    #[test]
    fn identical_or_unreachable_margin_yields_nothing() {
        let (mut triples, aligner, lm) = crafted();
        let cfg = SamplerConfig { beta: f64::INFINITY, p_hint: 0.0, ..Default::default() };
        let out = extract_alignment_based(&triples, &aligner, &lm, &cfg, &InitialLetters).unwrap();
        assert!(out.examples.is_empty());

        triples[0].1 = triples[0].2.clone();
        let out = extract_alignment_based(&triples, &aligner, &lm, &no_hint(0), &InitialLetters).unwrap();
        assert!(out.examples.is_empty());
        assert_eq!(out.stats.rejected_identity + out.stats.rejected_boundary, out.stats.phrase_pairs);
    }

    #[test]
    fn foreign_lm_is_a_vocabulary_mismatch() {
        let (triples, aligner, _) = crafted();
        let lm = train_lm(&[toks("x y z")], 2, Smoothing::AddK(0.01)).unwrap();
        let err = extract_alignment_based(&triples, &aligner, &lm, &no_hint(0), &InitialLetters).unwrap_err();
        assert!(matches!(err, Error::VocabularyMismatch(_)));
    }

    #[test]
    fn stats_sidecar_names_method() {
        let out = sample_golden(&corpus(4), &no_hint(0), &InitialLetters).unwrap();
        let v: serde_json::Value = serde_json::from_str(&out.stats_json()).unwrap();
        assert_eq!(v["method"], "golden");
        assert_eq!(v["stats"]["emitted"], 8);
    }
}
