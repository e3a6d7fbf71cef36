//! The segment-aware Transformer.
//!
//! Encoder input rows are `token * √d + position + segment` embeddings; with
//! segment-aware attention the encoder scales each query/key row elementwise
//! by its segment embedding before projection. The same segment table feeds
//! both uses. Layers are pre-norm; examples in a batch are packed row-wise and
//! kept apart by the attention layout.

pub mod autograd;
pub mod checkpoint;
pub mod params;

use std::ops::Range;
use std::rc::Rc;

use ndarray::{s, Array2};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus_io::{segment_name, NUM_SEGMENTS};
use crate::error::{Error, Result};
use autograd::{scaled_scores, AttnBlock, AttnLayout, Graph, Var};
use params::{normal, xavier, ParamId, ParamStore};

pub use autograd::Gradients;

/// Ablation switches; all on is the full model, all off a plain Transformer
/// over the concatenated input.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Flags {
    pub independent_positions: bool,
    pub segment_embedding_in_input: bool,
    pub segment_aware_attention: bool,
}

impl Flags {
    pub const ALL: Flags = Flags {
        independent_positions: true,
        segment_embedding_in_input: true,
        segment_aware_attention: true,
    };
    pub const NONE: Flags = Flags {
        independent_positions: false,
        segment_embedding_in_input: false,
        segment_aware_attention: false,
    };
}

impl Default for Flags {
    fn default() -> Self {
        Flags::ALL
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub ffn_dim: usize,
    pub dropout: f64,
    /// Positions per segment (or per sequence without independent positions).
    pub max_positions: usize,
    pub vocab_size: usize,
    pub flags: Flags,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 64,
            n_heads: 4,
            encoder_layers: 2,
            decoder_layers: 2,
            ffn_dim: 256,
            dropout: 0.1,
            max_positions: 256,
            vocab_size: 0,
            flags: Flags::ALL,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("encoder_layers", self.encoder_layers),
            ("decoder_layers", self.decoder_layers),
            ("ffn_dim", self.ffn_dim),
            ("max_positions", self.max_positions),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Encoder input at subword-id level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedInput {
    pub ids: Vec<u32>,
    pub segments: Vec<u8>,
    pub positions: Vec<usize>,
}

impl EncodedInput {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// One training pair: encoder input and target ids (without `<bos>`/`<eos>`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pair {
    pub input: EncodedInput,
    pub target: Vec<u32>,
}

/// Packed teacher-forcing batch.
#[derive(Debug, Clone)]
pub struct Batch {
    pub enc_ids: Vec<u32>,
    pub enc_segments: Vec<u8>,
    pub enc_positions: Vec<usize>,
    pub enc_ranges: Vec<Range<usize>>,
    pub dec_ids: Vec<u32>,
    pub dec_ranges: Vec<Range<usize>>,
    pub targets: Vec<u32>,
}

impl Batch {
    pub fn new(pairs: &[&Pair], bos: u32, eos: u32) -> Self {
        let mut b = Batch {
            enc_ids: Vec::new(),
            enc_segments: Vec::new(),
            enc_positions: Vec::new(),
            enc_ranges: Vec::with_capacity(pairs.len()),
            dec_ids: Vec::new(),
            dec_ranges: Vec::with_capacity(pairs.len()),
            targets: Vec::new(),
        };
        for p in pairs {
            let start = b.enc_ids.len();
            b.enc_ids.extend(&p.input.ids);
            b.enc_segments.extend(&p.input.segments);
            b.enc_positions.extend(&p.input.positions);
            b.enc_ranges.push(start..b.enc_ids.len());
            let start = b.dec_ids.len();
            b.dec_ids.push(bos);
            b.dec_ids.extend(&p.target);
            b.dec_ranges.push(start..b.dec_ids.len());
            b.targets.extend(&p.target);
            b.targets.push(eos);
        }
        b
    }

    pub fn num_target_tokens(&self) -> usize {
        self.targets.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.enc_ids.len() + self.dec_ids.len()
    }
}

#[derive(Debug, Clone, Copy)]
struct AttnIds {
    wq: ParamId,
    bq: ParamId,
    wk: ParamId,
    bk: ParamId,
    wv: ParamId,
    bv: ParamId,
    wo: ParamId,
    bo: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct LayerIds {
    ln1: (ParamId, ParamId),
    attn: AttnIds,
    cross: Option<((ParamId, ParamId), AttnIds)>,
    ln2: (ParamId, ParamId),
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone)]
struct Ids {
    tok: ParamId,
    seg: ParamId,
    enc: Vec<LayerIds>,
    enc_ln: (ParamId, ParamId),
    dec: Vec<LayerIds>,
    dec_ln: (ParamId, ParamId),
    out_w: ParamId,
    out_b: ParamId,
}

fn ids_from(store: &ParamStore, cfg: &ModelConfig) -> Result<Ids> {
    let id = |n: &str| {
        store
            .id(n)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {n}")))
    };
    let ln = |p: &str| -> Result<(ParamId, ParamId)> { Ok((id(&format!("{p}.g"))?, id(&format!("{p}.b"))?)) };
    let attn = |p: &str| -> Result<AttnIds> {
        Ok(AttnIds {
            wq: id(&format!("{p}.wq"))?,
            bq: id(&format!("{p}.bq"))?,
            wk: id(&format!("{p}.wk"))?,
            bk: id(&format!("{p}.bk"))?,
            wv: id(&format!("{p}.wv"))?,
            bv: id(&format!("{p}.bv"))?,
            wo: id(&format!("{p}.wo"))?,
            bo: id(&format!("{p}.bo"))?,
        })
    };
    let layer = |p: &str, cross: bool| -> Result<LayerIds> {
        Ok(LayerIds {
            ln1: ln(&format!("{p}.ln1"))?,
            attn: attn(&format!("{p}.self"))?,
            cross: if cross {
                Some((ln(&format!("{p}.lnc"))?, attn(&format!("{p}.cross"))?))
            } else {
                None
            },
            ln2: ln(&format!("{p}.ln2"))?,
            w1: id(&format!("{p}.ff.w1"))?,
            b1: id(&format!("{p}.ff.b1"))?,
            w2: id(&format!("{p}.ff.w2"))?,
            b2: id(&format!("{p}.ff.b2"))?,
        })
    };
    Ok(Ids {
        tok: id("tok_emb")?,
        seg: id("seg_emb")?,
        enc: (0..cfg.encoder_layers)
            .map(|l| layer(&format!("enc.{l}"), false))
            .collect::<Result<_>>()?,
        enc_ln: ln("enc.ln")?,
        dec: (0..cfg.decoder_layers)
            .map(|l| layer(&format!("dec.{l}"), true))
            .collect::<Result<_>>()?,
        dec_ln: ln("dec.ln")?,
        out_w: id("out.w")?,
        out_b: id("out.b")?,
    })
}

fn init_params(cfg: &ModelConfig, rng: &mut impl Rng) -> ParamStore {
    let d = cfg.d_model;
    let mut p = ParamStore::default();
    let ones = |n| Array2::ones((1, n));
    let zeros = |n| Array2::zeros((1, n));
    p.insert("tok_emb", normal(rng, cfg.vocab_size, d, 0.0, (d as f64).powf(-0.5)));
    p.insert("seg_emb", normal(rng, NUM_SEGMENTS, d, 1.0, 0.01));
    let ln = |p: &mut ParamStore, name: &str| {
        p.insert(format!("{name}.g"), ones(d));
        p.insert(format!("{name}.b"), zeros(d));
    };
    let attn = |p: &mut ParamStore, rng: &mut dyn RngCore, name: &str| {
        for w in ["q", "k", "v", "o"] {
            p.insert(format!("{name}.w{w}"), xavier(rng, d, d));
            p.insert(format!("{name}.b{w}"), zeros(d));
        }
    };
    for (side, layers) in [("enc", cfg.encoder_layers), ("dec", cfg.decoder_layers)] {
        for l in 0..layers {
            let pre = format!("{side}.{l}");
            ln(&mut p, &format!("{pre}.ln1"));
            attn(&mut p, rng, &format!("{pre}.self"));
            if side == "dec" {
                ln(&mut p, &format!("{pre}.lnc"));
                attn(&mut p, rng, &format!("{pre}.cross"));
            }
            ln(&mut p, &format!("{pre}.ln2"));
            p.insert(format!("{pre}.ff.w1"), xavier(rng, d, cfg.ffn_dim));
            p.insert(format!("{pre}.ff.b1"), zeros(cfg.ffn_dim));
            p.insert(format!("{pre}.ff.w2"), xavier(rng, cfg.ffn_dim, d));
            p.insert(format!("{pre}.ff.b2"), zeros(d));
        }
        ln(&mut p, &format!("{side}.ln"));
    }
    p.insert("out.w", xavier(rng, d, cfg.vocab_size));
    p.insert("out.b", zeros(cfg.vocab_size));
    p
}

/// Sinusoidal table: `sin(p / 10000^(2i/d))` in even and `cos` in odd columns.
pub fn sinusoidal_table(n: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((n, d), |(p, c)| {
        let i = (c / 2) as f64;
        let angle = p as f64 / 10000f64.powf(2.0 * i / d as f64);
        if c % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Per-head attention logits `((e_q ∘ q) W_q + b_q)((e_k ∘ k) W_k + b_k)ᵀ / √d_h`.
/// Without segment rows the products are skipped, which is the plain form.
pub struct QkProjection<'a> {
    pub w_q: &'a Array2<f64>,
    pub b_q: &'a Array2<f64>,
    pub w_k: &'a Array2<f64>,
    pub b_k: &'a Array2<f64>,
}

pub fn attention_logits(
    q: &Array2<f64>,
    k: &Array2<f64>,
    segment_rows: Option<(&Array2<f64>, &Array2<f64>)>,
    proj: &QkProjection<'_>,
    heads: usize,
) -> Result<Vec<Array2<f64>>> {
    let d = proj.w_q.nrows();
    if q.ncols() != d || k.ncols() != d || d % heads != 0 {
        return Err(Error::Shape {
            op: "attention_logits",
            detail: format!("q {:?}, k {:?}, d {d}, heads {heads}", q.dim(), k.dim()),
        });
    }
    if let Some((eq, ek)) = segment_rows {
        if eq.dim() != q.dim() || ek.dim() != k.dim() {
            return Err(Error::Shape {
                op: "attention_logits",
                detail: format!("segment rows {:?}/{:?} vs q {:?}/k {:?}", eq.dim(), ek.dim(), q.dim(), k.dim()),
            });
        }
    }
    let store = ParamStore::default();
    let mut g = Graph::new(&store);
    let (qv, kv) = (g.constant(q.clone()), g.constant(k.clone()));
    let (qv, kv) = match segment_rows {
        Some((eq, ek)) => {
            let (eq, ek) = (g.constant(eq.clone()), g.constant(ek.clone()));
            (g.mul(qv, eq), g.mul(kv, ek))
        }
        None => (qv, kv),
    };
    let (wq, bq, wk, bk) = (
        g.constant(proj.w_q.clone()),
        g.constant(proj.b_q.clone()),
        g.constant(proj.w_k.clone()),
        g.constant(proj.b_k.clone()),
    );
    let qp = g.matmul(qv, wq);
    let qp = g.add_row(qp, bq);
    let kp = g.matmul(kv, wk);
    let kp = g.add_row(kp, bk);
    let dh = d / heads;
    Ok((0..heads)
        .map(|h| {
            let cols = h * dh..(h + 1) * dh;
            scaled_scores(
                g.value(qp).slice(s![.., cols.clone()]),
                g.value(kp).slice(s![.., cols]),
            )
        })
        .collect())
}

fn check_finite(g: &Graph, v: Var, what: impl FnOnce() -> String) -> Result<()> {
    if g.value(v).iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what()))
    }
}

#[derive(Debug, Clone)]
pub struct SaTransformer {
    config: ModelConfig,
    params: ParamStore,
    ids: Ids,
    pos_table: Array2<f64>,
}

/// Training-time randomness; `None` disables dropout.
pub type Dropout<'a> = Option<&'a mut dyn RngCore>;

/// Result of the teacher-forced forward pass.
pub struct ForwardOutput {
    pub loss: Var,
    pub logits: Var,
}

impl SaTransformer {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = init_params(&config, &mut rng);
        Self::from_params(config, params)
    }

    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let ids = ids_from(&params, &config)?;
        let d = config.d_model;
        let expect = |id: ParamId, shape: (usize, usize)| -> Result<()> {
            let got = params.get(id).dim();
            if got != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {} has shape {got:?}, config implies {shape:?}",
                    params.name(id)
                )));
            }
            Ok(())
        };
        expect(ids.tok, (config.vocab_size, d))?;
        expect(ids.seg, (NUM_SEGMENTS, d))?;
        expect(ids.out_w, (d, config.vocab_size))?;
        Ok(SaTransformer {
            pos_table: sinusoidal_table(config.max_positions, d),
            config,
            params,
            ids,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn segment_embedding_id(&self) -> ParamId {
        self.ids.seg
    }

    /// Changes the ablation flags in place (parameters are unaffected).
    pub fn set_flags(&mut self, flags: Flags) {
        self.config.flags = flags;
    }

    fn dropout(&self, g: &mut Graph, x: Var, rng: &mut Dropout<'_>) -> Var {
        let p = self.config.dropout;
        match rng {
            Some(r) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                let shape = g.value(x).raw_dim();
                let mask = Array2::from_shape_simple_fn(shape, || if r.random::<f64>() < p { 0.0 } else { keep });
                let m = g.constant(mask);
                g.mul(x, m)
            }
            _ => x,
        }
    }

    fn check_ids(&self, ids: &[u32]) -> Result<()> {
        match ids.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            Some(&id) => Err(Error::TokenOutOfRange { id, vocab: self.config.vocab_size }),
            None => Ok(()),
        }
    }

    /// Positions actually used by the embedding: per-segment positions, or
    /// global offsets within each example when independent positions are off.
    fn effective_positions(&self, positions: &[usize], segments: &[u8], ranges: &[Range<usize>]) -> Result<Vec<usize>> {
        let mut out = positions.to_vec();
        if !self.config.flags.independent_positions {
            for r in ranges {
                for (k, p) in out[r.clone()].iter_mut().enumerate() {
                    *p = k;
                }
            }
        }
        for (k, &p) in out.iter().enumerate() {
            if p >= self.config.max_positions {
                let seg = segments[k];
                return Err(Error::PositionOverflow {
                    segment: seg,
                    segment_name: segment_name(seg),
                    position: p,
                    max: self.config.max_positions,
                });
            }
        }
        Ok(out)
    }

    fn positions_const(&self, g: &mut Graph, positions: &[usize]) -> Var {
        let mut pe = Array2::zeros((positions.len(), self.config.d_model));
        for (k, &p) in positions.iter().enumerate() {
            pe.row_mut(k).assign(&self.pos_table.row(p));
        }
        g.constant(pe)
    }

    /// Input representation of the encoder rows (before dropout).
    pub fn embed_graph(
        &self,
        g: &mut Graph,
        ids: &[u32],
        segments: &[u8],
        positions: &[usize],
        ranges: &[Range<usize>],
    ) -> Result<Var> {
        self.check_ids(ids)?;
        if let Some(&bad) = segments.iter().find(|&&s| s as usize >= NUM_SEGMENTS) {
            return Err(Error::InvalidExample(format!("segment id {bad} out of range")));
        }
        if segments.len() != ids.len() || positions.len() != ids.len() {
            return Err(Error::Shape {
                op: "embed",
                detail: format!("{} ids, {} segments, {} positions", ids.len(), segments.len(), positions.len()),
            });
        }
        let pos = self.effective_positions(positions, segments, ranges)?;
        let tok = g.param(self.ids.tok);
        let x = g.gather(tok, ids);
        let x = g.scale(x, (self.config.d_model as f64).sqrt());
        let pe = self.positions_const(g, &pos);
        let mut x = g.add(x, pe);
        if self.config.flags.segment_embedding_in_input {
            let seg = g.param(self.ids.seg);
            let se = g.gather(seg, &segments.iter().map(|&s| s as u32).collect::<Vec<_>>());
            x = g.add(x, se);
        }
        Ok(x)
    }

    /// Embedding matrix of a single input.
    pub fn embed(&self, input: &EncodedInput) -> Result<Array2<f64>> {
        let mut g = Graph::new(&self.params);
        let x = self.embed_graph(&mut g, &input.ids, &input.segments, &input.positions, &[0..input.len()])?;
        Ok(g.value(x).clone())
    }

    fn attention_block(
        &self,
        g: &mut Graph,
        ids: &AttnIds,
        q_in: Var,
        kv_in: Var,
        qk_scale: Option<(Var, Var)>,
        layout: Rc<AttnLayout>,
    ) -> Var {
        let (q_src, k_src) = match qk_scale {
            Some((eq, ek)) => (g.mul(q_in, eq), g.mul(kv_in, ek)),
            None => (q_in, kv_in),
        };
        let lin = |g: &mut Graph, x: Var, w: ParamId, b: ParamId| {
            let (w, b) = (g.param(w), g.param(b));
            let y = g.matmul(x, w);
            g.add_row(y, b)
        };
        let q = lin(g, q_src, ids.wq, ids.bq);
        let k = lin(g, k_src, ids.wk, ids.bk);
        let v = lin(g, kv_in, ids.wv, ids.bv);
        let a = g.attention(q, k, v, self.config.n_heads, layout);
        lin(g, a, ids.wo, ids.bo)
    }

    fn layer_norm(&self, g: &mut Graph, x: Var, (gm, bt): (ParamId, ParamId)) -> Var {
        let (gm, bt) = (g.param(gm), g.param(bt));
        g.layer_norm(x, gm, bt)
    }

    fn feed_forward(&self, g: &mut Graph, l: &LayerIds, x: Var) -> Var {
        let (w1, b1, w2, b2) = (g.param(l.w1), g.param(l.b1), g.param(l.w2), g.param(l.b2));
        let h = g.matmul(x, w1);
        let h = g.add_row(h, b1);
        let h = g.relu(h);
        let h = g.matmul(h, w2);
        g.add_row(h, b2)
    }

    /// Encoder memory (after the final layer norm) for packed inputs.
    pub fn encode(
        &self,
        g: &mut Graph,
        ids: &[u32],
        segments: &[u8],
        positions: &[usize],
        ranges: &[Range<usize>],
        rng: &mut Dropout<'_>,
    ) -> Result<Var> {
        let x = self.embed_graph(g, ids, segments, positions, ranges)?;
        let mut x = self.dropout(g, x, rng);
        let scale = if self.config.flags.segment_aware_attention {
            let seg = g.param(self.ids.seg);
            let e = g.gather(seg, &segments.iter().map(|&s| s as u32).collect::<Vec<_>>());
            Some((e, e))
        } else {
            None
        };
        let layout = AttnLayout::self_attention(ranges, false);
        for (l, layer) in self.ids.enc.iter().enumerate() {
            let h = self.layer_norm(g, x, layer.ln1);
            let a = self.attention_block(g, &layer.attn, h, h, scale, layout.clone());
            let a = self.dropout(g, a, rng);
            x = g.add(x, a);
            let h = self.layer_norm(g, x, layer.ln2);
            let f = self.feed_forward(g, layer, h);
            let f = self.dropout(g, f, rng);
            x = g.add(x, f);
            check_finite(g, x, || format!("encoder layer {l}"))?;
        }
        Ok(self.layer_norm(g, x, self.ids.enc_ln))
    }

    /// Output logits for decoder rows `dec_ids` grouped by `dec_ranges`; block
    /// `b` attends to encoder rows `mem_ranges[b]`.
    pub fn decode(
        &self,
        g: &mut Graph,
        memory: Var,
        mem_ranges: &[Range<usize>],
        dec_ids: &[u32],
        dec_ranges: &[Range<usize>],
        rng: &mut Dropout<'_>,
    ) -> Result<Var> {
        self.check_ids(dec_ids)?;
        let mut pos = vec![0; dec_ids.len()];
        for r in dec_ranges {
            for (k, p) in pos[r.clone()].iter_mut().enumerate() {
                if k >= self.config.max_positions {
                    return Err(Error::PositionOverflow {
                        segment: u8::MAX,
                        segment_name: "target",
                        position: k,
                        max: self.config.max_positions,
                    });
                }
                *p = k;
            }
        }
        let tok = g.param(self.ids.tok);
        let y = g.gather(tok, dec_ids);
        let y = g.scale(y, (self.config.d_model as f64).sqrt());
        let pe = self.positions_const(g, &pos);
        let y = g.add(y, pe);
        let mut y = self.dropout(g, y, rng);
        let self_layout = AttnLayout::self_attention(dec_ranges, true);
        let cross_layout = AttnLayout::new(
            dec_ranges
                .iter()
                .zip(mem_ranges)
                .map(|(q, k)| AttnBlock { q: q.clone(), k: k.clone() })
                .collect(),
            false,
        );
        for (l, layer) in self.ids.dec.iter().enumerate() {
            let h = self.layer_norm(g, y, layer.ln1);
            let a = self.attention_block(g, &layer.attn, h, h, None, self_layout.clone());
            let a = self.dropout(g, a, rng);
            y = g.add(y, a);
            let (lnc, cross) = layer.cross.expect("decoder layers carry cross-attention");
            let h = self.layer_norm(g, y, lnc);
            let c = self.attention_block(g, &cross, h, memory, None, cross_layout.clone());
            let c = self.dropout(g, c, rng);
            y = g.add(y, c);
            let h = self.layer_norm(g, y, layer.ln2);
            let f = self.feed_forward(g, layer, h);
            let f = self.dropout(g, f, rng);
            y = g.add(y, f);
            check_finite(g, y, || format!("decoder layer {l}"))?;
        }
        let y = self.layer_norm(g, y, self.ids.dec_ln);
        let (w, b) = (g.param(self.ids.out_w), g.param(self.ids.out_b));
        let logits = g.matmul(y, w);
        let logits = g.add_row(logits, b);
        check_finite(g, logits, || "output projection".to_owned())?;
        Ok(logits)
    }

    /// Teacher-forced mean token NLL over a packed batch.
    pub fn forward_loss(&self, g: &mut Graph, batch: &Batch, mut rng: Dropout<'_>) -> Result<ForwardOutput> {
        if batch.enc_ranges.is_empty() {
            return Err(Error::Empty("batch"));
        }
        let mem = self.encode(
            g,
            &batch.enc_ids,
            &batch.enc_segments,
            &batch.enc_positions,
            &batch.enc_ranges,
            &mut rng,
        )?;
        let logits = self.decode(g, mem, &batch.enc_ranges, &batch.dec_ids, &batch.dec_ranges, &mut rng)?;
        self.check_ids(&batch.targets)?;
        let loss = g.cross_entropy(logits, &batch.targets);
        check_finite(g, loss, || "loss".to_owned())?;
        Ok(ForwardOutput { loss, logits })
    }

    /// Loss and gradients for one batch.
    pub fn loss_and_gradients(&self, batch: &Batch, rng: Dropout<'_>) -> Result<(f64, Gradients)> {
        let mut g = Graph::new(&self.params);
        let out = self.forward_loss(&mut g, batch, rng)?;
        Ok((g.scalar(out.loss), g.backward(out.loss)))
    }

    /// Loss and gold-token log-probabilities without dropout.
    pub fn evaluate_loss(&self, batch: &Batch) -> Result<(f64, Vec<f64>)> {
        let mut g = Graph::new(&self.params);
        let out = self.forward_loss(&mut g, batch, None)?;
        let lp = g.log_probs(out.loss).expect("loss is a cross-entropy node");
        let gold = batch
            .targets
            .iter()
            .enumerate()
            .map(|(r, &t)| lp[[r, t as usize]])
            .collect();
        Ok((g.scalar(out.loss), gold))
    }

    /// Logits of encoder self-attention in `layer` for a single input, one
    /// matrix per head, computed on the layer-normed input of the first layer
    /// when `layer == 0` (deeper layers use the running representation).
    pub fn encoder_attention_logits(&self, input: &EncodedInput, layer: usize) -> Result<Vec<Array2<f64>>> {
        if layer >= self.config.encoder_layers {
            return Err(Error::Config(format!("no encoder layer {layer}")));
        }
        let mut g = Graph::new(&self.params);
        let ranges = [0..input.len()];
        let mut x = self.embed_graph(&mut g, &input.ids, &input.segments, &input.positions, &ranges)?;
        let seg_rows = {
            let seg = g.param(self.ids.seg);
            let e = g.gather(seg, &input.segments.iter().map(|&s| s as u32).collect::<Vec<_>>());
            g.value(e).clone()
        };
        let layout = AttnLayout::self_attention(&ranges, false);
        let scale = if self.config.flags.segment_aware_attention {
            let e = g.constant(seg_rows.clone());
            Some((e, e))
        } else {
            None
        };
        for l in &self.ids.enc[..layer] {
            let h = self.layer_norm(&mut g, x, l.ln1);
            let a = self.attention_block(&mut g, &l.attn, h, h, scale, layout.clone());
            x = g.add(x, a);
            let h = self.layer_norm(&mut g, x, l.ln2);
            let f = self.feed_forward(&mut g, l, h);
            x = g.add(x, f);
        }
        let l = &self.ids.enc[layer];
        let h = self.layer_norm(&mut g, x, l.ln1);
        let hv = g.value(h).clone();
        let p = &self.params;
        let proj = QkProjection {
            w_q: p.get(l.attn.wq),
            b_q: p.get(l.attn.bq),
            w_k: p.get(l.attn.wk),
            b_k: p.get(l.attn.bk),
        };
        let rows = self.config.flags.segment_aware_attention.then_some((&seg_rows, &seg_rows));
        attention_logits(&hv, &hv, rows, &proj, self.config.n_heads)
    }
}
