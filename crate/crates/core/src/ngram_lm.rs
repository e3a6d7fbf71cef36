//! Word n-gram language model used to score sentence perplexity.
//!
//! Sentences are padded with one `<s>` and terminated by `</s>`. The
//! prediction vocabulary is every training word plus `<unk>` and `</s>`.
//! Smoothing is interpolated Kneser-Ney (one discount per order, continuation
//! counts below the highest order), add-k, or plain maximum likelihood.

use std::collections::{BTreeMap, HashMap};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};

const UNK_ID: u32 = 0;
const EOS_ID: u32 = 1;
const BOS_ID: u32 = 2;
const LM_UNK: &str = "<unk>";
const LM_EOS: &str = "</s>";
const LM_BOS: &str = "<s>";
const FORMAT_HEADER: &str = "ts-ngram v1";
const FALLBACK_DISCOUNT: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Smoothing {
    /// Relative frequencies; unseen contexts back off to shorter ones.
    Mle,
    AddK(f64),
    KneserNey,
    /// Kneser-Ney when the highest order has count-of-count statistics for
    /// its discount, add-k with k = 0.01 otherwise.
    Auto,
}

impl Smoothing {
    fn label(&self) -> String {
        match self {
            Smoothing::Mle => "mle".into(),
            Smoothing::AddK(k) => format!("addk {k:?}"),
            Smoothing::KneserNey => "kn".into(),
            Smoothing::Auto => "auto".into(),
        }
    }

    fn parse(s: &str) -> Result<Self> {
        let mut it = s.split_whitespace();
        match (it.next(), it.next()) {
            (Some("mle"), None) => Ok(Smoothing::Mle),
            (Some("kn"), None) => Ok(Smoothing::KneserNey),
            (Some("auto"), None) => Ok(Smoothing::Auto),
            (Some("addk"), Some(k)) => k
                .parse()
                .map(Smoothing::AddK)
                .map_err(|_| Error::Parse(format!("bad add-k constant {k:?}"))),
            _ => Err(Error::Parse(format!("unknown smoothing {s:?}"))),
        }
    }
}

impl std::str::FromStr for Smoothing {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "addk" => Ok(Smoothing::AddK(0.01)),
            other => Smoothing::parse(&other.replace(':', " ")),
        }
    }
}

#[derive(Debug, Clone, Default)]
struct ContextStats {
    total: u64,
    next: HashMap<u32, u64>,
}

#[derive(Debug, Clone)]
pub struct NGramModel {
    order: usize,
    smoothing: Smoothing,
    words: Vec<String>,
    index: HashMap<String, u32>,
    /// Raw counts of every n-gram window, indexed by length - 1.
    raw: Vec<HashMap<Vec<u32>, u64>>,
    /// Per order: context → statistics over the counts the smoothing uses.
    tables: Vec<HashMap<Vec<u32>, ContextStats>>,
    discounts: Vec<f64>,
}

/// Trains an order-`order` model on tokenized sentences.
pub fn train_lm<I, S>(corpus: I, order: usize, smoothing: Smoothing) -> Result<NGramModel>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[String]>,
{
    if order == 0 {
        return Err(Error::Config("n-gram order must be at least 1".into()));
    }
    let mut model = NGramModel::empty(order, smoothing);
    let mut sentences = 0usize;
    let mut vocab_words: BTreeMap<String, ()> = BTreeMap::new();
    let corpus: Vec<S> = corpus.into_iter().collect();
    for s in &corpus {
        for w in s.as_ref() {
            vocab_words.insert(w.clone(), ());
        }
    }
    for w in vocab_words.into_keys() {
        model.add_word(w);
    }
    for s in &corpus {
        sentences += 1;
        let ids = model.padded_ids(s.as_ref());
        model.count_windows(&ids);
    }
    if sentences == 0 {
        return Err(Error::Empty("language-model corpus"));
    }
    model.finalize()?;
    Ok(model)
}

impl NGramModel {
    fn empty(order: usize, smoothing: Smoothing) -> Self {
        let mut m = NGramModel {
            order,
            smoothing,
            words: Vec::new(),
            index: HashMap::new(),
            raw: vec![HashMap::new(); order],
            tables: Vec::new(),
            discounts: Vec::new(),
        };
        for w in [LM_UNK, LM_EOS, LM_BOS] {
            m.add_word(w.to_owned());
        }
        m
    }

    fn add_word(&mut self, w: String) {
        if !self.index.contains_key(&w) {
            self.index.insert(w.clone(), self.words.len() as u32);
            self.words.push(w);
        }
    }

    fn padded_ids<S: AsRef<str>>(&self, sentence: &[S]) -> Vec<u32> {
        let mut ids = Vec::with_capacity(sentence.len() + 2);
        ids.push(BOS_ID);
        ids.extend(sentence.iter().map(|w| self.word_id(w.as_ref())));
        ids.push(EOS_ID);
        ids
    }

    fn word_id(&self, w: &str) -> u32 {
        match self.index.get(w) {
            Some(&id) if id != BOS_ID => id,
            _ => UNK_ID,
        }
    }

    fn count_windows(&mut self, ids: &[u32]) {
        for k in 1..ids.len() {
            for n in 1..=self.order.min(k + 1) {
                let gram = ids[k + 1 - n..=k].to_vec();
                *self.raw[n - 1].entry(gram).or_default() += 1;
            }
        }
    }

    /// Size of the prediction vocabulary (words, `<unk>`, `</s>`).
    pub fn vocab_size(&self) -> usize {
        self.words.len() - 1
    }

    pub fn order(&self) -> usize {
        self.order
    }

    /// The smoothing actually in effect (`Auto` is resolved at training time).
    pub fn smoothing(&self) -> Smoothing {
        self.smoothing
    }

    pub fn contains(&self, word: &str) -> bool {
        matches!(self.index.get(word), Some(&id) if id > BOS_ID)
    }

    /// Fraction of tokens in `sentences` outside the model's vocabulary.
    pub fn oov_rate<S: AsRef<[String]>>(&self, sentences: &[S]) -> f64 {
        let (mut oov, mut total) = (0usize, 0usize);
        for s in sentences {
            for w in s.as_ref() {
                total += 1;
                if !self.contains(w) {
                    oov += 1;
                }
            }
        }
        if total == 0 {
            0.0
        } else {
            oov as f64 / total as f64
        }
    }

    fn finalize(&mut self) -> Result<()> {
        let resolved = match self.smoothing {
            Smoothing::Auto => {
                if self.kn_well_defined() {
                    Smoothing::KneserNey
                } else {
                    Smoothing::AddK(0.01)
                }
            }
            Smoothing::AddK(k) if !(k > 0.0 && k.is_finite()) => {
                return Err(Error::Config(format!("add-k constant must be positive, got {k}")))
            }
            other => other,
        };
        self.smoothing = resolved;
        self.tables = (0..self.order).map(|_| HashMap::new()).collect();
        for n in 1..=self.order {
            let counts = match resolved {
                Smoothing::KneserNey => self.kn_counts(n),
                _ => self.raw[n - 1].clone(),
            };
            let table = &mut self.tables[n - 1];
            for (gram, c) in counts {
                let (ctx, w) = gram.split_at(n - 1);
                let st = table.entry(ctx.to_vec()).or_default();
                st.total += c;
                *st.next.entry(w[0]).or_default() += c;
            }
        }
        if resolved == Smoothing::KneserNey {
            self.discounts = (1..=self.order)
                .map(|n| match self.count_of_counts(n) {
                    (n1, n2) if n1 > 0 && n2 > 0 => n1 as f64 / (n1 as f64 + 2.0 * n2 as f64),
                    _ => FALLBACK_DISCOUNT,
                })
                .collect();
        }
        Ok(())
    }

    /// Highest order and `<s>`-initial grams keep raw counts; the rest use the
    /// number of distinct left extensions.
    fn kn_counts(&self, n: usize) -> HashMap<Vec<u32>, u64> {
        if n == self.order {
            return self.raw[n - 1].clone();
        }
        let mut out: HashMap<Vec<u32>, u64> = HashMap::new();
        for gram in self.raw[n - 1].keys() {
            if gram[0] == BOS_ID {
                out.insert(gram.clone(), self.raw[n - 1][gram]);
            }
        }
        for longer in self.raw[n].keys() {
            let suffix = &longer[1..];
            if suffix[0] != BOS_ID {
                *out.entry(suffix.to_vec()).or_default() += 1;
            }
        }
        out
    }

    fn count_of_counts(&self, n: usize) -> (u64, u64) {
        let table = &self.tables[n - 1];
        let mut n1 = 0;
        let mut n2 = 0;
        for st in table.values() {
            for &c in st.next.values() {
                match c {
                    1 => n1 += 1,
                    2 => n2 += 1,
                    _ => {}
                }
            }
        }
        (n1, n2)
    }

    /// Kneser-Ney needs singleton and doubleton statistics at the highest
    /// order; lower orders fall back to a fixed discount when theirs are
    /// degenerate (small dense vocabularies).
    fn kn_well_defined(&self) -> bool {
        let top = &self.raw[self.order - 1];
        top.values().any(|&c| c == 1) && top.values().any(|&c| c == 2)
    }

    /// p(word | context) over id sequences; `context` is truncated to the
    /// model order.
    fn prob_ids(&self, context: &[u32], word: u32) -> f64 {
        let keep = context.len().min(self.order - 1);
        let ctx = &context[context.len() - keep..];
        let v = self.vocab_size() as f64;
        match self.smoothing {
            Smoothing::AddK(k) => {
                let (c, total) = self.lookup(ctx, word);
                (c as f64 + k) / (total as f64 + k * v)
            }
            Smoothing::Mle => {
                let mut ctx = ctx;
                loop {
                    let (c, total) = self.lookup(ctx, word);
                    if total > 0 {
                        return c as f64 / total as f64;
                    }
                    if ctx.is_empty() {
                        return 0.0;
                    }
                    ctx = &ctx[1..];
                }
            }
            Smoothing::KneserNey => self.kn_prob(ctx, word),
            Smoothing::Auto => unreachable!("resolved during training"),
        }
    }

    fn lookup(&self, ctx: &[u32], word: u32) -> (u64, u64) {
        match self.tables[ctx.len()].get(ctx) {
            Some(st) => (st.next.get(&word).copied().unwrap_or(0), st.total),
            None => (0, 0),
        }
    }

    fn kn_prob(&self, ctx: &[u32], word: u32) -> f64 {
        let lower = if ctx.is_empty() {
            1.0 / self.vocab_size() as f64
        } else {
            self.kn_prob(&ctx[1..], word)
        };
        match self.tables[ctx.len()].get(ctx) {
            Some(st) if st.total > 0 => {
                let d = self.discounts[ctx.len()];
                let c = st.next.get(&word).copied().unwrap_or(0) as f64;
                let types = st.next.len() as f64;
                ((c - d).max(0.0) + d * types * lower) / st.total as f64
            }
            _ => lower,
        }
    }

    /// Conditional probability of `word` after `context`, both as surface
    /// tokens. A leading `<s>` in `context` marks the sentence start.
    pub fn prob<S: AsRef<str>>(&self, context: &[S], word: &str) -> f64 {
        let ctx: Vec<u32> = context
            .iter()
            .map(|w| match w.as_ref() {
                LM_BOS => BOS_ID,
                other => self.word_id(other),
            })
            .collect();
        let w = if word == LM_EOS { EOS_ID } else { self.word_id(word) };
        self.prob_ids(&ctx, w)
    }

    /// Natural-log probability of the sentence including `</s>`, and the
    /// number of predicted tokens.
    pub fn sentence_log_prob<S: AsRef<str>>(&self, sentence: &[S]) -> (f64, usize) {
        let ids = self.padded_ids(sentence);
        let mut total = 0.0;
        for k in 1..ids.len() {
            total += self.prob_ids(&ids[..k], ids[k]).ln();
        }
        (total, ids.len() - 1)
    }

    /// `exp(-(1/N) Σ ln p)` with `N = tokens + 1`.
    pub fn perplexity<S: AsRef<str>>(&self, sentence: &[S]) -> f64 {
        let (lp, n) = self.sentence_log_prob(sentence);
        (-lp / n as f64).exp()
    }

    /// Prediction vocabulary as surface strings (`<unk>`, `</s>`, words).
    pub fn prediction_vocab(&self) -> Vec<&str> {
        self.words
            .iter()
            .enumerate()
            .filter(|(i, _)| *i as u32 != BOS_ID)
            .map(|(_, w)| w.as_str())
            .collect()
    }

    /// Every context with at least one observation, as surface strings.
    pub fn seen_contexts(&self) -> Vec<Vec<&str>> {
        let mut out: Vec<Vec<&str>> = self
            .tables
            .iter()
            .flat_map(|t| t.keys())
            .map(|ctx| ctx.iter().map(|&i| self.words[i as usize].as_str()).collect())
            .collect();
        out.sort();
        out
    }

    pub fn write(&self, mut w: impl Write) -> Result<()> {
        writeln!(w, "{FORMAT_HEADER}")?;
        writeln!(w, "order\t{}", self.order)?;
        writeln!(w, "smoothing\t{}", self.smoothing.label())?;
        writeln!(w, "vocab\t{}", self.words.len() - 3)?;
        for word in &self.words[3..] {
            writeln!(w, "{word}")?;
        }
        let mut grams: Vec<(&Vec<u32>, &u64)> = self.raw.iter().flat_map(|t| t.iter()).collect();
        grams.sort_by(|a, b| a.0.len().cmp(&b.0.len()).then_with(|| a.0.cmp(b.0)));
        writeln!(w, "ngrams\t{}", grams.len())?;
        for (gram, c) in grams {
            let text: Vec<&str> = gram.iter().map(|&i| self.words[i as usize].as_str()).collect();
            writeln!(w, "{}\t{c}\t{}", gram.len(), text.join(" "))?;
        }
        Ok(())
    }

    pub fn read(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines().enumerate();
        let mut next = |what: &str| -> Result<(usize, String)> {
            match lines.next() {
                Some((n, l)) => Ok((n + 1, l?)),
                None => Err(Error::Parse(format!("truncated model file: missing {what}"))),
            }
        };
        let (_, header) = next("header")?;
        if header != FORMAT_HEADER {
            return Err(Error::Parse(format!("unsupported model header {header:?}")));
        }
        let field = |line: (usize, String), key: &str| -> Result<String> {
            line.1
                .strip_prefix(&format!("{key}\t"))
                .map(str::to_owned)
                .ok_or_else(|| Error::Record {
                    line: line.0,
                    message: format!("expected {key}"),
                })
        };
        let order: usize = field(next("order")?, "order")?
            .parse()
            .map_err(|_| Error::Parse("bad order".into()))?;
        let smoothing = Smoothing::parse(&field(next("smoothing")?, "smoothing")?)?;
        let nvocab: usize = field(next("vocab")?, "vocab")?
            .parse()
            .map_err(|_| Error::Parse("bad vocab size".into()))?;
        let mut model = NGramModel::empty(order.max(1), smoothing);
        for _ in 0..nvocab {
            let (_, w) = next("vocabulary entry")?;
            model.add_word(w);
        }
        let ngrams: usize = field(next("ngrams")?, "ngrams")?
            .parse()
            .map_err(|_| Error::Parse("bad n-gram count".into()))?;
        for _ in 0..ngrams {
            let (n, line) = next("n-gram")?;
            let bad = || Error::Record {
                line: n,
                message: "expected \"n<TAB>count<TAB>words\"".into(),
            };
            let mut parts = line.splitn(3, '\t');
            let len: usize = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
            let count: u64 = parts.next().and_then(|p| p.parse().ok()).ok_or_else(bad)?;
            let gram: Vec<u32> = parts
                .next()
                .ok_or_else(bad)?
                .split(' ')
                .map(|w| model.index.get(w).copied().ok_or_else(bad))
                .collect::<Result<_>>()?;
            if gram.len() != len || len == 0 || len > model.order {
                return Err(bad());
            }
            model.raw[len - 1].insert(gram, count);
        }
        model.finalize()?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io_at(path, e))?;
        let mut w = BufWriter::new(f);
        self.write(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = File::open(path).map_err(|e| Error::io_at(path, e))?;
        Self::read(BufReader::new(f))
    }
}
