//! Inference front end shared by evaluation, the CLI and the server.

use crate::corpus_io::{render_query, TsExample};
use crate::decoder_search::{beam_search, BeamConfig, OutputMask};
use crate::encoding::{boundary_ids, decode_ids, encode_rendered};
use crate::error::{Error, Result};
use crate::evaluator::{evaluate_with, BleuMode, Evaluation, Suggestion};
use crate::model::checkpoint::Checkpoint;
use crate::model::SaTransformer;
use crate::subword::SubwordModel;

/// A frozen model with its subword model and search settings.
#[derive(Debug, Clone)]
pub struct Suggester {
    model: SaTransformer,
    subword: SubwordModel,
    model_id: String,
    beam: BeamConfig,
    mask: OutputMask,
    bos: u32,
    eos: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SuggestOutcome {
    pub suggestions: Vec<Suggestion>,
    pub truncated: bool,
}

impl Suggester {
    pub fn new(model: SaTransformer, subword: SubwordModel, model_id: String, beam: BeamConfig) -> Result<Self> {
        if subword.vocab().len() != model.config().vocab_size {
            return Err(Error::VocabularyMismatch(format!(
                "subword vocabulary has {} entries, model expects {}",
                subword.vocab().len(),
                model.config().vocab_size
            )));
        }
        let (bos, eos) = boundary_ids(&subword)?;
        let mask = OutputMask::for_vocab(subword.vocab());
        Ok(Suggester { model, subword, model_id, beam, mask, bos, eos })
    }

    pub fn from_checkpoint(ck: Checkpoint, beam: BeamConfig) -> Result<Self> {
        let id = ck.model_id()?;
        let sw = ck
            .subword
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no subword model".into()))?;
        Self::new(ck.model, sw, id, beam)
    }

    pub fn model_id(&self) -> &str {
        &self.model_id
    }

    pub fn beam(&self) -> &BeamConfig {
        &self.beam
    }

    pub fn subword(&self) -> &SubwordModel {
        &self.subword
    }

    pub fn model(&self) -> &SaTransformer {
        &self.model
    }

    /// Top-`k` alternatives for `translation[span]`, best first. An empty
    /// hint counts as no hint.
    pub fn suggest(
        &self,
        source: &[String],
        translation: &[String],
        span: (usize, usize),
        hint: Option<&[String]>,
        k: usize,
    ) -> Result<SuggestOutcome> {
        if k == 0 || k > self.beam.beam_size {
            return Err(Error::Config(format!("k must be in 1..={}, got {k}", self.beam.beam_size)));
        }
        let rendered = render_query(source, translation, span, hint.filter(|h| !h.is_empty()))?;
        let input = encode_rendered(&self.subword, &rendered);
        let result = beam_search(&self.model, &input, &self.beam, self.bos, self.eos, &self.mask)?;
        let suggestions = result
            .hypotheses
            .iter()
            .take(k)
            .map(|h| Suggestion::new(decode_ids(&self.subword, &h.tokens), h.score))
            .collect();
        Ok(SuggestOutcome { suggestions, truncated: result.truncated })
    }

    pub fn suggest_example(&self, ex: &TsExample, use_hint: bool, k: usize) -> Result<SuggestOutcome> {
        let hint = if use_hint { ex.hint.as_deref() } else { None };
        self.suggest(&ex.source, &ex.translation, (ex.span_start, ex.span_end), hint, k)
    }

    /// Decodes every example and scores top-1 against its alternatives.
    pub fn evaluate(&self, examples: &[TsExample], mode: BleuMode, use_hints: bool, k: usize) -> Result<Evaluation> {
        self.check_coverage(examples)?;
        evaluate_with(examples, mode, use_hints, |ex| {
            let out = self.suggest_example(ex, use_hints, k)?;
            Ok((out.suggestions, out.truncated))
        })
    }

    /// Fails when most input pieces are unknown to the subword vocabulary,
    /// which means the test set was prepared for another model.
    fn check_coverage(&self, examples: &[TsExample]) -> Result<()> {
        let vocab = self.subword.vocab();
        let (mut unk, mut total) = (0usize, 0usize);
        for ex in examples {
            for w in ex.source.iter().chain(&ex.translation) {
                for piece in self.subword.segment_word(w) {
                    total += 1;
                    unk += vocab.get(&piece).is_none() as usize;
                }
            }
        }
        if total > 0 && unk * 2 > total {
            return Err(Error::VocabularyMismatch(format!(
                "{unk} of {total} input pieces are unknown to the subword vocabulary"
            )));
        }
        Ok(())
    }
}
