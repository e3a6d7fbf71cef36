//! Word-level rendered inputs to subword ids.
//!
//! Every word of a rendered input is segmented independently; its pieces
//! inherit the word's segment and positions are recounted per segment over
//! pieces.

use crate::corpus_io::{render_input, RenderedInput, TsExample, BOS, EOS, NUM_SEGMENTS};
use crate::error::{Error, Result};
use crate::model::{EncodedInput, Pair};
use crate::subword::{undo_bpe, SubwordModel};

pub fn encode_rendered(sw: &SubwordModel, rendered: &RenderedInput) -> EncodedInput {
    let mut out = EncodedInput {
        ids: Vec::with_capacity(rendered.len() * 2),
        segments: Vec::with_capacity(rendered.len() * 2),
        positions: Vec::with_capacity(rendered.len() * 2),
    };
    let mut counters = [0usize; NUM_SEGMENTS];
    for (word, &seg) in rendered.tokens.iter().zip(&rendered.segment_ids) {
        for piece in sw.segment_word(word) {
            out.ids.push(sw.vocab().id(&piece));
            out.segments.push(seg);
            out.positions.push(counters[seg as usize]);
            counters[seg as usize] += 1;
        }
    }
    out
}

pub fn encode_words(sw: &SubwordModel, words: &[String]) -> Vec<u32> {
    sw.vocab().encode(&sw.apply_bpe(words))
}

/// Subword ids back to words.
pub fn decode_ids(sw: &SubwordModel, ids: &[u32]) -> Vec<String> {
    undo_bpe(&sw.vocab().decode(ids))
}

/// One training pair per gold alternative.
pub fn example_pairs(sw: &SubwordModel, ex: &TsExample, use_hint: bool) -> Result<Vec<Pair>> {
    let rendered = render_input(ex, use_hint, None)?;
    let input = encode_rendered(sw, &rendered);
    Ok(ex
        .alternatives
        .iter()
        .map(|alt| Pair {
            input: input.clone(),
            target: encode_words(sw, alt),
        })
        .collect())
}

pub fn corpus_pairs(sw: &SubwordModel, examples: &[TsExample], use_hints: bool) -> Result<Vec<Pair>> {
    let mut out = Vec::with_capacity(examples.len());
    for ex in examples {
        out.extend(example_pairs(sw, ex, use_hints)?);
    }
    Ok(out)
}

/// Ids of `<bos>` and `<eos>` in the subword vocabulary.
pub fn boundary_ids(sw: &SubwordModel) -> Result<(u32, u32)> {
    match (sw.vocab().get(BOS), sw.vocab().get(EOS)) {
        (Some(b), Some(e)) => Ok((b, e)),
        _ => Err(Error::VocabularyMismatch("vocabulary lacks <bos>/<eos>".into())),
    }
}
