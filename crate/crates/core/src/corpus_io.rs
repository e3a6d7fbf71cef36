//! Translation-suggestion examples, span masking, model-input rendering and
//! the line-delimited JSON record format.
//!
//! A record looks like
//!
//! ```text
//! {"source":["x1","x2"],"translation":["y1","y2"],"span":[0,1],"alternatives":[["z"]],"hint":null}
//! ```
//!
//! `span` is a half-open range over `translation`; `span[0] == span[1]` marks an
//! insertion point (null span).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const BOS: &str = "<bos>";
pub const EOS: &str = "<eos>";
pub const SEP: &str = "<sep>";
pub const PLACEHOLDER: &str = "<slot>";

/// Reserved symbols, in id order. Every vocabulary starts with these.
pub const RESERVED: [&str; 6] = [PAD, UNK, BOS, EOS, SEP, PLACEHOLDER];

pub fn is_reserved(token: &str) -> bool {
    RESERVED.contains(&token)
}

/// Segment id of the source sentence.
pub const SEGMENT_SOURCE: u8 = 0;
/// Segment id of the masked translation.
pub const SEGMENT_TRANSLATION: u8 = 1;
/// Segment id of the hint.
pub const SEGMENT_HINT: u8 = 2;
pub const NUM_SEGMENTS: usize = 3;

pub fn segment_name(segment: u8) -> &'static str {
    match segment {
        SEGMENT_SOURCE => "source",
        SEGMENT_TRANSLATION => "translation",
        SEGMENT_HINT => "hint",
        _ => "unknown",
    }
}

/// One suggestion instance: the translation has a single span `[span_start,
/// span_end)` whose correct replacements are listed in `alternatives`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Record", into = "Record")]
pub struct TsExample {
    pub source: Vec<String>,
    pub translation: Vec<String>,
    pub span_start: usize,
    pub span_end: usize,
    pub alternatives: Vec<Vec<String>>,
    pub hint: Option<Vec<String>>,
}

#[derive(Serialize, Deserialize)]
struct Record {
    source: Vec<String>,
    translation: Vec<String>,
    span: [usize; 2],
    alternatives: Vec<Vec<String>>,
    #[serde(default)]
    hint: Option<Vec<String>>,
}

impl TryFrom<Record> for TsExample {
    type Error = Error;

    fn try_from(r: Record) -> Result<Self> {
        let ex = TsExample {
            source: r.source,
            translation: r.translation,
            span_start: r.span[0],
            span_end: r.span[1],
            alternatives: r.alternatives,
            hint: r.hint,
        };
        ex.validate()?;
        Ok(ex)
    }
}

impl From<TsExample> for Record {
    fn from(ex: TsExample) -> Self {
        Record {
            source: ex.source,
            translation: ex.translation,
            span: [ex.span_start, ex.span_end],
            alternatives: ex.alternatives,
            hint: ex.hint,
        }
    }
}

impl TsExample {
    /// Builds and validates an example.
    pub fn new(
        source: Vec<String>,
        translation: Vec<String>,
        span: (usize, usize),
        alternatives: Vec<Vec<String>>,
        hint: Option<Vec<String>>,
    ) -> Result<Self> {
        let ex = TsExample {
            source,
            translation,
            span_start: span.0,
            span_end: span.1,
            alternatives,
            hint,
        };
        ex.validate()?;
        Ok(ex)
    }

    pub fn is_null_span(&self) -> bool {
        self.span_start == self.span_end
    }

    /// The words currently occupying the span.
    pub fn span_tokens(&self) -> &[String] {
        &self.translation[self.span_start..self.span_end]
    }

    pub fn validate(&self) -> Result<()> {
        if self.span_start > self.span_end || self.span_end > self.translation.len() {
            return Err(Error::SpanBounds {
                start: self.span_start,
                end: self.span_end,
                len: self.translation.len(),
            });
        }
        if self.alternatives.is_empty() {
            return Err(Error::InvalidExample("no alternatives".into()));
        }
        for alt in &self.alternatives {
            if alt.is_empty() && !self.is_null_span() {
                return Err(Error::InvalidExample(
                    "empty alternative is only allowed for a null span".into(),
                ));
            }
        }
        let fields: [(&str, &[String]); 2] =
            [("source", &self.source), ("translation", &self.translation)];
        for (name, tokens) in fields {
            check_user_tokens(name, tokens)?;
        }
        for alt in &self.alternatives {
            check_user_tokens("alternative", alt)?;
        }
        if let Some(hint) = &self.hint {
            check_user_tokens("hint", hint)?;
        }
        Ok(())
    }
}

fn check_user_tokens(field: &str, tokens: &[String]) -> Result<()> {
    if let Some(tok) = tokens.iter().find(|t| is_reserved(t)) {
        return Err(Error::InvalidExample(format!(
            "reserved symbol {tok} in {field}"
        )));
    }
    if tokens.iter().any(|t| t.is_empty()) {
        return Err(Error::InvalidExample(format!("empty token in {field}")));
    }
    Ok(())
}

/// Replaces `translation[i..j]` with a single placeholder.
///
/// Returns the masked sequence and the removed tokens. `i == j` inserts a
/// placeholder without removing anything.
pub fn mask_span<S: AsRef<str>>(
    translation: &[S],
    i: usize,
    j: usize,
) -> Result<(Vec<String>, Vec<String>)> {
    if i > j || j > translation.len() {
        return Err(Error::SpanBounds {
            start: i,
            end: j,
            len: translation.len(),
        });
    }
    let owned = |s: &[S]| s.iter().map(|t| t.as_ref().to_owned()).collect::<Vec<_>>();
    let mut masked = owned(&translation[..i]);
    masked.push(PLACEHOLDER.to_owned());
    masked.extend(owned(&translation[j..]));
    Ok((masked, owned(&translation[i..j])))
}

/// Splices `filler` in place of the single placeholder in `masked`.
pub fn unmask<S: AsRef<str>>(masked: &[S], filler: &[String]) -> Result<Vec<String>> {
    let slots: Vec<usize> = masked
        .iter()
        .enumerate()
        .filter(|(_, t)| t.as_ref() == PLACEHOLDER)
        .map(|(k, _)| k)
        .collect();
    let [at] = slots[..] else {
        return Err(Error::InvalidExample(format!(
            "expected exactly one placeholder, found {}",
            slots.len()
        )));
    };
    let mut out: Vec<String> = masked[..at].iter().map(|t| t.as_ref().to_owned()).collect();
    out.extend(filler.iter().cloned());
    out.extend(masked[at + 1..].iter().map(|t| t.as_ref().to_owned()));
    Ok(out)
}

/// Token sequence fed to the encoder, with per-token segment and position ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RenderedInput {
    pub tokens: Vec<String>,
    pub segment_ids: Vec<u8>,
    pub position_ids: Vec<usize>,
    pub target: Option<Vec<String>>,
}

impl RenderedInput {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Renders `source <sep> masked-translation [<sep> hint]`.
///
/// The separator after the source belongs to segment 0, the one before the hint
/// to segment 1. Positions restart at 0 in every segment. When `target` is
/// given, that alternative becomes the decoder target.
pub fn render_input(
    example: &TsExample,
    with_hint: bool,
    target: Option<usize>,
) -> Result<RenderedInput> {
    let hint = if with_hint { Some(example.hint.as_deref().unwrap_or(&[])) } else { None };
    let mut rendered = render_query(
        &example.source,
        &example.translation,
        (example.span_start, example.span_end),
        hint,
    )?;
    if let Some(k) = target {
        let alt = example.alternatives.get(k).ok_or_else(|| {
            Error::InvalidExample(format!(
                "alternative {k} requested, example has {}",
                example.alternatives.len()
            ))
        })?;
        rendered.target = Some(alt.clone());
    }
    Ok(rendered)
}

/// Inference-time rendering of a span query. `hint: Some(&[])` asks for a
/// hint that is not there and renders without the hint segment.
pub fn render_query(
    source: &[String],
    translation: &[String],
    span: (usize, usize),
    hint: Option<&[String]>,
) -> Result<RenderedInput> {
    let (masked, _) = mask_span(translation, span.0, span.1)?;
    let mut tokens = Vec::with_capacity(source.len() + masked.len() + 2);
    let mut segment_ids = Vec::with_capacity(tokens.capacity());
    let mut position_ids = Vec::with_capacity(tokens.capacity());

    let mut push_block = |block: &[String], seg: u8, tokens: &mut Vec<String>| {
        for (pos, t) in block.iter().enumerate() {
            tokens.push(t.clone());
            segment_ids.push(seg);
            position_ids.push(pos);
        }
    };
    let mut src = source.to_vec();
    src.push(SEP.to_owned());
    push_block(&src, SEGMENT_SOURCE, &mut tokens);

    let hint = match hint {
        Some(h) if !h.is_empty() => Some(h),
        Some(_) => {
            log::debug!("hint requested but absent; rendering without hint segment");
            None
        }
        None => None,
    };
    match hint {
        Some(h) => {
            let mut block = masked;
            block.push(SEP.to_owned());
            push_block(&block, SEGMENT_TRANSLATION, &mut tokens);
            push_block(h, SEGMENT_HINT, &mut tokens);
        }
        None => push_block(&masked, SEGMENT_TRANSLATION, &mut tokens),
    }
    Ok(RenderedInput {
        tokens,
        segment_ids,
        position_ids,
        target: None,
    })
}

/// Reads a line-delimited JSON TS file. Blank lines are ignored.
pub fn read_ts_file(path: impl AsRef<Path>) -> Result<Vec<TsExample>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io_at(path, e))?;
    read_ts_records(BufReader::new(file))
}

pub fn read_ts_records(reader: impl BufRead) -> Result<Vec<TsExample>> {
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: TsExample = serde_json::from_str(&line).map_err(|e| Error::Record {
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(ex);
    }
    Ok(out)
}

pub fn write_ts_file(examples: &[TsExample], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io_at(path, e))?;
    let mut w = BufWriter::new(file);
    write_ts_records(examples, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn write_ts_records(examples: &[TsExample], mut w: impl Write) -> Result<()> {
    for ex in examples {
        serde_json::to_writer(&mut w, ex).map_err(|e| Error::Parse(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Splits a whitespace-tokenized line into owned tokens.
pub fn tokenize(line: &str) -> Vec<String> {
    line.split_whitespace().map(str::to_owned).collect()
}
