//! Two-phase training: pretraining on synthetic corpora, then fine-tuning on
//! golden suggestion data with model selection by dev BLEU.
//!
//! Adam with an inverse-square-root warmup schedule. The data stream and the
//! dropout masks are pure functions of `(seed, step)`, so a run resumed from a
//! saved state continues exactly like an uninterrupted one.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus_io::TsExample;
use crate::decoder_search::BeamConfig;
use crate::encoding::{boundary_ids, corpus_pairs};
use crate::error::{Error, Result};
use crate::evaluator::BleuMode;
use crate::model::checkpoint::{Checkpoint, Reader};
use crate::model::params::ParamStore;
use crate::model::{Batch, Pair, SaTransformer};
use crate::suggest::Suggester;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Pretrain,
    Finetune,
}

impl Phase {
    pub fn as_str(self) -> &'static str {
        match self {
            Phase::Pretrain => "pretrain",
            Phase::Finetune => "finetune",
        }
    }
}

impl FromStr for Phase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pretrain" => Ok(Phase::Pretrain),
            "finetune" => Ok(Phase::Finetune),
            other => Err(Error::Config(format!("unknown phase {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub phase: Phase,
    /// Budget of encoder plus decoder tokens per batch.
    pub batch_tokens: usize,
    /// Peak learning rate, reached at the end of warmup.
    pub lr: f64,
    pub warmup_steps: usize,
    pub max_steps: usize,
    pub eval_interval: usize,
    pub seed: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Render the hint segment when an example carries one.
    pub use_hints: bool,
    pub clip_norm: Option<f64>,
    pub bleu_mode: BleuMode,
    pub eval_beam: usize,
    pub max_decode_len: usize,
}

impl TrainConfig {
    /// Desk-scale pretraining defaults.
    pub fn pretrain() -> Self {
        TrainConfig {
            phase: Phase::Pretrain,
            batch_tokens: 1600,
            lr: 1e-3,
            warmup_steps: 200,
            max_steps: 2000,
            eval_interval: 500,
            seed: 1,
            checkpoint_dir: None,
            use_hints: false,
            clip_norm: None,
            bleu_mode: BleuMode::Word,
            eval_beam: 4,
            max_decode_len: 16,
        }
    }

    pub fn finetune() -> Self {
        TrainConfig {
            phase: Phase::Finetune,
            lr: 2e-3,
            warmup_steps: 10,
            max_steps: 100,
            eval_interval: 25,
            ..Self::pretrain()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_tokens == 0 {
            return Err(Error::Config("batch_tokens must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.eval_interval == 0 {
            return Err(Error::Config("eval_interval must be positive".into()));
        }
        if self.clip_norm.is_some_and(|c| c <= 0.0) {
            return Err(Error::Config("clip_norm must be positive".into()));
        }
        if self.eval_beam == 0 || self.max_decode_len == 0 {
            return Err(Error::Config("eval_beam and max_decode_len must be positive".into()));
        }
        Ok(())
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::pretrain()
    }
}

/// `lr · min(t / warmup, sqrt(warmup / t))` for step `t ≥ 1`.
pub fn learning_rate(peak: f64, warmup: usize, step: usize) -> f64 {
    let t = step.max(1) as f64;
    if warmup == 0 {
        return peak;
    }
    let w = warmup as f64;
    peak * (t / w).min((w / t).sqrt())
}

/// One JSON line of the metrics log. Eval records carry `bleu`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub phase: Phase,
    pub loss: f64,
    pub lr: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub bleu: Option<f64>,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.98;
const EPS: f64 = 1e-9;
const STATE_MAGIC: &[u8; 4] = b"TSOP";
const STATE_VERSION: u32 = 1;

/// Optimizer moments and the position in the data stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Trainer {
    cfg: TrainConfig,
    step: usize,
    epoch: u64,
    offset: usize,
    m: Vec<Array2<f64>>,
    v: Vec<Array2<f64>>,
    order: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepInfo {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

impl Trainer {
    pub fn new(params: &ParamStore, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let zeros: Vec<_> = params.tensors().map(|t| Array2::zeros(t.raw_dim())).collect();
        Ok(Trainer { cfg, step: 0, epoch: 0, offset: 0, m: zeros.clone(), v: zeros, order: vec![] })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Replaces the configuration, e.g. to extend `max_steps` on resume.
    pub fn with_config(self, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer { cfg, ..self })
    }

    /// Steps taken so far.
    pub fn step(&self) -> usize {
        self.step
    }

    fn epoch_order(&self, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(self.epoch + 1);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    /// Next pairs of the shuffled stream, filling the token budget (at least
    /// one pair per batch).
    fn next_batch<'a>(&mut self, data: &'a [Pair]) -> Vec<&'a Pair> {
        let mut out = Vec::new();
        let mut tokens = 0;
        loop {
            if self.offset >= data.len() {
                self.epoch += 1;
                self.offset = 0;
                self.order.clear();
            }
            if self.order.len() != data.len() {
                self.order = self.epoch_order(data.len());
            }
            let p = &data[self.order[self.offset]];
            let cost = p.input.len() + p.target.len() + 1;
            if !out.is_empty() && tokens + cost > self.cfg.batch_tokens {
                return out;
            }
            out.push(p);
            tokens += cost;
            self.offset += 1;
        }
    }

    /// One optimizer update on the next batch of `data`.
    pub fn train_step(&mut self, model: &mut SaTransformer, data: &[Pair], bos: u32, eos: u32) -> Result<StepInfo> {
        if data.is_empty() {
            return Err(Error::Empty("training data"));
        }
        let step = self.step + 1;
        let saved = (self.epoch, self.offset, self.order.clone());
        let pairs = self.next_batch(data);
        let batch = Batch::new(&pairs, bos, eos);
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(u64::MAX - step as u64);
        let result = model.loss_and_gradients(&batch, Some(&mut rng));
        let (loss, mut grads) = match result {
            Ok((loss, grads)) if loss.is_finite() && grads.is_finite() => (loss, grads),
            Ok((loss, _)) => {
                (self.epoch, self.offset, self.order) = saved;
                return Err(Error::Diverged { step, loss });
            }
            Err(Error::NonFinite(what)) => {
                log::warn!("non-finite values in {what} at step {step}");
                (self.epoch, self.offset, self.order) = saved;
                return Err(Error::Diverged { step, loss: f64::NAN });
            }
            Err(e) => return Err(e),
        };
        let grad_norm = match self.cfg.clip_norm {
            Some(c) => grads.clip(c),
            None => grads.global_norm(),
        };
        let lr = learning_rate(self.cfg.lr, self.cfg.warmup_steps, step);
        let c1 = 1.0 - BETA1.powi(step as i32);
        let c2 = 1.0 - BETA2.powi(step as i32);
        for (((p, m), v), g) in model.params_mut().tensors_mut().zip(&mut self.m).zip(&mut self.v).zip(&grads.grads) {
            ndarray::Zip::from(p).and(m).and(v).and(g).for_each(|p, m, v, &g| {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
            });
        }
        self.step = step;
        Ok(StepInfo { step, loss, lr, grad_norm })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend(STATE_MAGIC);
        out.extend(STATE_VERSION.to_le_bytes());
        let cfg = serde_json::to_vec(&self.cfg).map_err(|e| Error::Parse(e.to_string()))?;
        out.extend((cfg.len() as u64).to_le_bytes());
        out.extend(cfg);
        for x in [self.step as u64, self.epoch, self.offset as u64, self.m.len() as u64] {
            out.extend(x.to_le_bytes());
        }
        for t in self.m.iter().chain(&self.v) {
            out.extend((t.nrows() as u64).to_le_bytes());
            out.extend((t.ncols() as u64).to_le_bytes());
            for x in t.iter() {
                out.extend(x.to_le_bytes());
            }
        }
        Ok(out)
    }

    /// Restores a saved state; `params` must be the model it was saved with.
    pub fn from_bytes(buf: &[u8], params: &ParamStore) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(format!("optimizer state: {m}"));
        let mut r = Reader { buf, at: 0 };
        if r.take(4)? != STATE_MAGIC {
            return Err(bad("bad magic"));
        }
        if r.u32()? != STATE_VERSION {
            return Err(bad("unsupported version"));
        }
        let cfg: TrainConfig = serde_json::from_slice(r.bytes()?).map_err(|e| bad(&e.to_string()))?;
        let step = r.u64()? as usize;
        let epoch = r.u64()?;
        let offset = r.u64()? as usize;
        let n = r.u64()? as usize;
        if n != params.len() {
            return Err(bad(&format!("{n} tensors, model has {}", params.len())));
        }
        let mut tensors = Vec::with_capacity(2 * n);
        for k in 0..2 * n {
            let rows = r.u64()? as usize;
            let cols = r.u64()? as usize;
            if (rows, cols) != params.get(k % n).dim() {
                return Err(bad(&format!("shape mismatch for {}", params.name(k % n))));
            }
            let vals = r.take(rows * cols * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            tensors.push(Array2::from_shape_vec((rows, cols), vals).map_err(|e| bad(&e.to_string()))?);
        }
        if r.at != buf.len() {
            return Err(bad("trailing bytes"));
        }
        let v = tensors.split_off(n);
        Ok(Trainer { cfg, step, epoch, offset, m: tensors, v, order: vec![] })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BestPoint {
    pub step: usize,
    pub bleu: f64,
    pub loss: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainReport {
    pub metrics: Vec<MetricRecord>,
    /// Best dev point of a finetune run.
    pub best: Option<BestPoint>,
}

impl TrainReport {
    pub fn train_losses(&self) -> Vec<f64> {
        self.metrics.iter().filter(|m| m.bleu.is_none()).map(|m| m.loss).collect()
    }

    pub fn eval_records(&self) -> impl Iterator<Item = &MetricRecord> {
        self.metrics.iter().filter(|m| m.bleu.is_some())
    }
}

pub const LAST_CHECKPOINT: &str = "last.ck";
pub const BEST_CHECKPOINT: &str = "best.ck";
pub const OPTIMIZER_STATE: &str = "last.state";

fn emit(report: &mut TrainReport, sink: &mut Option<&mut dyn Write>, rec: MetricRecord) -> Result<()> {
    if let Some(w) = sink {
        serde_json::to_writer(&mut **w, &rec).map_err(|e| Error::Parse(e.to_string()))?;
        w.write_all(b"\n")?;
    }
    report.metrics.push(rec);
    Ok(())
}

fn save_last(dir: &Path, ck: &Checkpoint, trainer: &Trainer) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
    ck.save(&dir.join(LAST_CHECKPOINT))?;
    let p = dir.join(OPTIMIZER_STATE);
    std::fs::write(&p, trainer.to_bytes()?).map_err(|e| Error::io_at(&p, e))
}

fn boundaries(ck: &Checkpoint) -> Result<(u32, u32)> {
    match &ck.subword {
        Some(sw) => boundary_ids(sw),
        None => Ok((2, 3)),
    }
}

/// Runs `trainer` to its configured `max_steps` over `data`, writing the last
/// good state to the checkpoint directory on divergence.
fn run_steps(
    ck: &mut Checkpoint,
    trainer: &mut Trainer,
    data: &[Pair],
    report: &mut TrainReport,
    sink: &mut Option<&mut dyn Write>,
    mut on_eval: impl FnMut(&mut Checkpoint, &Trainer, &mut TrainReport, &mut Option<&mut dyn Write>) -> Result<()>,
) -> Result<()> {
    let (bos, eos) = boundaries(ck)?;
    let cfg = trainer.config().clone();
    while trainer.step() < cfg.max_steps {
        let info = match trainer.train_step(&mut ck.model, data, bos, eos) {
            Ok(i) => i,
            Err(e @ Error::Diverged { .. }) => {
                if let Some(dir) = &cfg.checkpoint_dir {
                    save_last(dir, ck, trainer)?;
                }
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        emit(report, sink, MetricRecord { step: info.step, phase: cfg.phase, loss: info.loss, lr: info.lr, bleu: None })?;
        if info.step % cfg.eval_interval == 0 || info.step == cfg.max_steps {
            log::info!("{} step {} loss {:.4} lr {:.2e}", cfg.phase.as_str(), info.step, info.loss, info.lr);
            on_eval(ck, trainer, report, sink)?;
            if let Some(dir) = &cfg.checkpoint_dir {
                save_last(dir, ck, trainer)?;
            }
        }
    }
    Ok(())
}

/// Trains on the concatenation of `corpora`, shuffled with the config seed.
pub fn pretrain(
    ck: &mut Checkpoint,
    corpora: &[Vec<Pair>],
    cfg: &TrainConfig,
    sink: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    let trainer = Trainer::new(ck.model.params(), TrainConfig { phase: Phase::Pretrain, ..cfg.clone() })?;
    resume_pretrain(ck, trainer, corpora, sink)
}

/// Continues pretraining from a saved trainer state.
pub fn resume_pretrain(
    ck: &mut Checkpoint,
    mut trainer: Trainer,
    corpora: &[Vec<Pair>],
    mut sink: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    if corpora.is_empty() {
        return Err(Error::Empty("corpus list"));
    }
    let data: Vec<Pair> = corpora.concat();
    let mut report = TrainReport::default();
    if trainer.config().max_steps > trainer.step() {
        run_steps(ck, &mut trainer, &data, &mut report, &mut sink, |_, _, _, _| Ok(()))?;
    }
    Ok(report)
}

/// Mean teacher-forced loss over `pairs`.
pub fn mean_loss(model: &SaTransformer, pairs: &[Pair], bos: u32, eos: u32, batch_tokens: usize) -> Result<f64> {
    let (mut sum, mut count) = (0.0, 0usize);
    let mut start = 0;
    while start < pairs.len() {
        let mut end = start;
        let mut tokens = 0;
        while end < pairs.len() && (end == start || tokens + pairs[end].input.len() + pairs[end].target.len() < batch_tokens) {
            tokens += pairs[end].input.len() + pairs[end].target.len() + 1;
            end += 1;
        }
        let refs: Vec<&Pair> = pairs[start..end].iter().collect();
        let batch = Batch::new(&refs, bos, eos);
        let (_, gold) = model.evaluate_loss(&batch)?;
        sum -= gold.iter().sum::<f64>();
        count += gold.len();
        start = end;
    }
    Ok(if count == 0 { 0.0 } else { sum / count as f64 })
}

/// Fine-tunes on golden examples, evaluating top-1 BLEU on `dev` every
/// `eval_interval` steps and at the end. The best point (higher BLEU, then
/// lower dev loss) is restored into `ck` when training ends.
pub fn finetune(
    ck: &mut Checkpoint,
    train: &[TsExample],
    dev: &[TsExample],
    cfg: &TrainConfig,
    mut sink: Option<&mut dyn Write>,
) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::Empty("golden training corpus"));
    }
    if dev.is_empty() {
        return Err(Error::Empty("golden dev corpus"));
    }
    let cfg = TrainConfig { phase: Phase::Finetune, ..cfg.clone() };
    let sw = ck
        .subword
        .clone()
        .ok_or_else(|| Error::Checkpoint("finetuning needs a checkpoint with a subword model".into()))?;
    let (bos, eos) = boundary_ids(&sw)?;
    let data = corpus_pairs(&sw, train, cfg.use_hints)?;
    let dev_pairs = corpus_pairs(&sw, dev, cfg.use_hints)?;
    let mut trainer = Trainer::new(ck.model.params(), cfg.clone())?;
    let mut report = TrainReport::default();
    let mut best: Option<(BestPoint, ParamStore)> = None;
    let beam = BeamConfig { beam_size: cfg.eval_beam, max_len: cfg.max_decode_len, ..BeamConfig::default() };
    run_steps(ck, &mut trainer, &data, &mut report, &mut sink, |ck, trainer, report, sink| {
        let loss = mean_loss(&ck.model, &dev_pairs, bos, eos, cfg.batch_tokens)?;
        let suggester = Suggester::new(ck.model.clone(), sw.clone(), String::new(), beam)?;
        let bleu = suggester.evaluate(dev, cfg.bleu_mode, cfg.use_hints, 1)?.report.bleu;
        let step = trainer.step();
        log::info!("finetune step {step} dev loss {loss:.4} dev BLEU {bleu:.2}");
        emit(report, sink, MetricRecord { step, phase: Phase::Finetune, loss, lr: learning_rate(cfg.lr, cfg.warmup_steps, step), bleu: Some(bleu) })?;
        let better = match &best {
            None => true,
            Some((b, _)) => bleu > b.bleu || (bleu == b.bleu && loss < b.loss),
        };
        if better {
            best = Some((BestPoint { step, bleu, loss }, ck.model.params().clone()));
            if let Some(dir) = &cfg.checkpoint_dir {
                std::fs::create_dir_all(dir).map_err(|e| Error::io_at(dir, e))?;
                ck.save(&dir.join(BEST_CHECKPOINT))?;
            }
        }
        Ok(())
    })?;
    if let Some((point, params)) = best {
        *ck.model.params_mut() = params;
        report.best = Some(point);
    }
    Ok(report)
}
