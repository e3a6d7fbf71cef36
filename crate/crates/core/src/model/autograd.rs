//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Graph`] records every operation on a tape; [`Graph::backward`] walks the
//! tape in reverse and returns one gradient tensor per parameter. Vectors are
//! stored as `1 x n` matrices.

use std::ops::Range;
use std::rc::Rc;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use super::params::{ParamId, ParamStore};

pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Row blocks that attend to each other: rows `q` of the query matrix see rows
/// `k` of the key/value matrices. Blocks are independent examples.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnBlock {
    pub q: Range<usize>,
    pub k: Range<usize>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttnLayout {
    pub blocks: Vec<AttnBlock>,
    /// Query `i` of a block only sees keys `0..=i` of the same block.
    pub causal: bool,
}

impl AttnLayout {
    pub fn new(blocks: Vec<AttnBlock>, causal: bool) -> Rc<Self> {
        Rc::new(AttnLayout { blocks, causal })
    }

    /// Self-attention over consecutive row ranges.
    pub fn self_attention(ranges: &[Range<usize>], causal: bool) -> Rc<Self> {
        let blocks = ranges
            .iter()
            .map(|r| AttnBlock { q: r.clone(), k: r.clone() })
            .collect();
        Self::new(blocks, causal)
    }
}

enum Op {
    Param(ParamId),
    Const,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gather { table: Var, rows: Vec<u32> },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Array2<f64>, inv_std: Vec<f64> },
    Attention { q: Var, k: Var, v: Var, heads: usize, layout: Rc<AttnLayout>, probs: Vec<Array2<f64>> },
    CrossEntropy { logits: Var, targets: Vec<u32>, log_probs: Array2<f64> },
}

struct Node {
    op: Op,
    value: Option<Array2<f64>>,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
}

/// `q_h k_hᵀ / √d_h`.
pub fn scaled_scores(q: ArrayView2<f64>, k: ArrayView2<f64>) -> Array2<f64> {
    let dh = q.ncols() as f64;
    q.dot(&k.t()) / dh.sqrt()
}

fn softmax_rows(s: &mut Array2<f64>) {
    for mut row in s.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row /= z;
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph { params, nodes: Vec::with_capacity(512) }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, op: Op, value: Option<Array2<f64>>) -> Var {
        self.nodes.push(Node { op, value });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        let node = &self.nodes[v.0];
        match (&node.op, &node.value) {
            (Op::Param(id), _) => self.params.get(*id),
            (_, Some(val)) => val,
            _ => unreachable!("node without value"),
        }
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        self.push(Op::Param(id), None)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(Op::Const, Some(value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(Op::MatMul(a, b), Some(out))
    }

    /// `x + b` with `b` a `1 x d` row broadcast over every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let out = self.value(x) + self.value(b);
        self.push(Op::AddRow(x, b), Some(out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(Op::Add(a, b), Some(out))
    }

    /// Elementwise product of equally shaped matrices.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(Op::Mul(a, b), Some(out))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(Op::Scale(a, c), Some(out))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|v| v.max(0.0));
        self.push(Op::Relu(a), Some(out))
    }

    /// Rows of `table` selected by `rows` (embedding lookup).
    pub fn gather(&mut self, table: Var, rows: &[u32]) -> Var {
        let t = self.value(table);
        let mut out = Array2::zeros((rows.len(), t.ncols()));
        for (k, &r) in rows.iter().enumerate() {
            out.row_mut(k).assign(&t.row(r as usize));
        }
        self.push(Op::Gather { table, rows: rows.to_vec() }, Some(out))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let d = xv.ncols() as f64;
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / d;
            row.mapv_inplace(|v| v - mean);
            let var = row.fold(0.0, |a, &v| a + v * v) / d;
            let is = 1.0 / (var + LN_EPS).sqrt();
            row *= is;
            inv_std.push(is);
        }
        let out = &(&xhat * self.value(gamma)) + self.value(beta);
        self.push(Op::LayerNorm { x, gamma, beta, xhat, inv_std }, Some(out))
    }

    /// Multi-head scaled dot-product attention over the blocks of `layout`.
    /// Rows of `q` not covered by any block produce zeros.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, layout: Rc<AttnLayout>) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.ncols();
        let dh = d / heads;
        let mut out = Array2::zeros((qv.nrows(), d));
        let mut probs = Vec::with_capacity(layout.blocks.len() * heads);
        for b in &layout.blocks {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = qv.slice(s![b.q.clone(), cols.clone()]);
                let kh = kv.slice(s![b.k.clone(), cols.clone()]);
                let vh = vv.slice(s![b.k.clone(), cols.clone()]);
                let mut p = scaled_scores(qh, kh);
                if layout.causal {
                    for (i, mut row) in p.rows_mut().into_iter().enumerate() {
                        row.slice_mut(s![i + 1..]).fill(f64::NEG_INFINITY);
                    }
                }
                softmax_rows(&mut p);
                out.slice_mut(s![b.q.clone(), cols]).assign(&p.dot(&vh));
                probs.push(p);
            }
        }
        self.push(Op::Attention { q, k, v, heads, layout, probs }, Some(out))
    }

    /// Attention probabilities recorded by an attention node, one matrix per
    /// (block, head) in block-major order.
    pub fn attention_probs(&self, v: Var) -> Option<&[Array2<f64>]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean negative log-likelihood of `targets` (one per row) under
    /// `softmax(logits)`; a `1 x 1` node.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[u32]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), targets.len(), "one target per logits row");
        let mut log_probs = lv.clone();
        for mut row in log_probs.rows_mut() {
            let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            let lse = m + row.fold(0.0, |a, &v| a + (v - m).exp()).ln();
            row.mapv_inplace(|v| v - lse);
        }
        let nll: f64 = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| -log_probs[[r, t as usize]])
            .sum();
        let loss = Array2::from_elem((1, 1), nll / targets.len() as f64);
        self.push(Op::CrossEntropy { logits, targets: targets.to_vec(), log_probs }, Some(loss))
    }

    /// Log-softmax rows recorded by a cross-entropy node.
    pub fn log_probs(&self, v: Var) -> Option<&Array2<f64>> {
        match &self.nodes[v.0].op {
            Op::CrossEntropy { log_probs, .. } => Some(log_probs),
            _ => None,
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v)[[0, 0]]
    }

    /// Gradients of the scalar node `loss` with respect to every parameter.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Array2<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));
        let mut out = Gradients::zeros_like(self.params);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            match &self.nodes[idx].op {
                Op::Const => {}
                Op::Param(id) => out.grads[*id] += &g,
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(x, b) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *b, gb);
                    acc(&mut grads, *x, g);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g);
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::Relu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(self.value(*a))
                        .for_each(|d, &x| if x <= 0.0 { *d = 0.0 });
                    acc(&mut grads, *a, ga);
                }
                Op::Gather { table, rows } => {
                    let t = self.value(*table);
                    let mut gt = Array2::zeros(t.raw_dim());
                    for (k, &r) in rows.iter().enumerate() {
                        let mut dst = gt.row_mut(r as usize);
                        dst += &g.row(k);
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let gv = self.value(*gamma);
                    acc(&mut grads, *beta, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *gamma, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let dxhat = &g * gv;
                    let d = xhat.ncols() as f64;
                    let mut gx = Array2::zeros(xhat.raw_dim());
                    for (r, mut row) in gx.rows_mut().into_iter().enumerate() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let mean_d = dh.sum() / d;
                        let mean_dx = dh.dot(&xh) / d;
                        Zip::from(&mut row)
                            .and(&dh)
                            .and(&xh)
                            .for_each(|o, &a, &b| *o = inv_std[r] * (a - mean_d - b * mean_dx));
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::Attention { q, k, v, heads, layout, probs } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let d = qv.ncols();
                    let dh = d / heads;
                    let scale = 1.0 / (dh as f64).sqrt();
                    let mut gq = Array2::zeros(qv.raw_dim());
                    let mut gk = Array2::zeros(kv.raw_dim());
                    let mut gv = Array2::zeros(vv.raw_dim());
                    let mut pi = 0;
                    for b in &layout.blocks {
                        for h in 0..*heads {
                            let cols = h * dh..(h + 1) * dh;
                            let p = &probs[pi];
                            pi += 1;
                            let go = g.slice(s![b.q.clone(), cols.clone()]);
                            let qh = qv.slice(s![b.q.clone(), cols.clone()]);
                            let kh = kv.slice(s![b.k.clone(), cols.clone()]);
                            let vh = vv.slice(s![b.k.clone(), cols.clone()]);
                            let dp = go.dot(&vh.t());
                            let mut gvs = gv.slice_mut(s![b.k.clone(), cols.clone()]);
                            gvs += &p.t().dot(&go);
                            let mut ds = &dp * p;
                            for (r, mut row) in ds.rows_mut().into_iter().enumerate() {
                                let dot = p.row(r).dot(&dp.row(r));
                                Zip::from(&mut row).and(&p.row(r)).for_each(|x, &pr| *x -= pr * dot);
                            }
                            ds *= scale;
                            let mut gqs = gq.slice_mut(s![b.q.clone(), cols.clone()]);
                            gqs += &ds.dot(&kh);
                            let mut gks = gk.slice_mut(s![b.k.clone(), cols]);
                            gks += &ds.t().dot(&qh);
                        }
                    }
                    acc(&mut grads, *q, gq);
                    acc(&mut grads, *k, gk);
                    acc(&mut grads, *v, gv);
                }
                Op::CrossEntropy { logits, targets, log_probs } => {
                    let n = targets.len() as f64;
                    let c = g[[0, 0]] / n;
                    let mut gl = log_probs.mapv(f64::exp);
                    for (r, &t) in targets.iter().enumerate() {
                        gl[[r, t as usize]] -= 1.0;
                    }
                    gl *= c;
                    acc(&mut grads, *logits, gl);
                }
            }
        }
        out
    }
}

fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot => *slot = Some(g),
    }
}

/// One gradient tensor per parameter, in parameter order.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub grads: Vec<Array2<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamStore) -> Self {
        Gradients {
            grads: params.tensors().map(|t| Array2::zeros(t.raw_dim())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &Array2<f64> {
        &self.grads[id]
    }

    pub fn global_norm(&self) -> f64 {
        self.grads
            .iter()
            .map(|g| g.fold(0.0, |a, &v| a + v * v))
            .sum::<f64>()
            .sqrt()
    }

    /// Rescales so the global norm is at most `max_norm`; returns the norm
    /// before clipping.
    pub fn clip(&mut self, max_norm: f64) -> f64 {
        let norm = self.global_norm();
        if norm > max_norm && norm > 0.0 {
            let c = max_norm / norm;
            for g in &mut self.grads {
                *g *= c;
            }
        }
        norm
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.grads.iter().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central differences of `f` with respect to every entry of every
    /// parameter, compared to `backward`.
    fn check(store: &mut ParamStore, f: impl Fn(&mut Graph) -> Var) {
        let g = {
            let mut graph = Graph::new(store);
            let loss = f(&mut graph);
            graph.backward(loss)
        };
        let h = 1e-6;
        for id in 0..store.len() {
            let shape = store.get(id).dim();
            for r in 0..shape.0 {
                for c in 0..shape.1 {
                    let orig = store.get(id)[[r, c]];
                    store.get_mut(id)[[r, c]] = orig + h;
                    let up = {
                        let mut graph = Graph::new(store);
                        let l = f(&mut graph);
                        graph.scalar(l)
                    };
                    store.get_mut(id)[[r, c]] = orig - h;
                    let down = {
                        let mut graph = Graph::new(store);
                        let l = f(&mut graph);
                        graph.scalar(l)
                    };
                    store.get_mut(id)[[r, c]] = orig;
                    let num = (up - down) / (2.0 * h);
                    let ana = g.get(id)[[r, c]];
                    assert!(
                        (num - ana).abs() <= 1e-6 * (1.0 + num.abs().max(ana.abs())),
                        "{} [{r},{c}]: numeric {num} analytic {ana}",
                        store.name(id)
                    );
                }
            }
        }
    }

    #[test]
    fn primitive_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::default();
        let a = store.insert("a", rand_mat(&mut rng, 3, 4));
        let w = store.insert("w", rand_mat(&mut rng, 4, 5));
        let b = store.insert("b", rand_mat(&mut rng, 1, 5));
        let gam = store.insert("gamma", rand_mat(&mut rng, 1, 5));
        let bet = store.insert("beta", rand_mat(&mut rng, 1, 5));
        let m = store.insert("m", rand_mat(&mut rng, 3, 5));
        check(&mut store, |g| {
            let (a, w, b, gam, bet, m) = (g.param(a), g.param(w), g.param(b), g.param(gam), g.param(bet), g.param(m));
            let x = g.matmul(a, w);
            let x = g.add_row(x, b);
            let x = g.layer_norm(x, gam, bet);
            let y = g.mul(x, m);
            let y = g.relu(y);
            let y = g.add(y, x);
            let y = g.scale(y, 0.7);
            g.cross_entropy(y, &[0, 4, 2])
        });
    }

    #[test]
    fn attention_and_gather_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::default();
        let table = store.insert("table", rand_mat(&mut rng, 6, 4));
        let k_in = store.insert("k", rand_mat(&mut rng, 5, 4));
        let v_in = store.insert("v", rand_mat(&mut rng, 5, 4));
        for causal in [false, true] {
            let layout = if causal {
                AttnLayout::self_attention(&[0..2, 2..5], true)
            } else {
                AttnLayout::new(
                    vec![AttnBlock { q: 0..2, k: 0..3 }, AttnBlock { q: 2..5, k: 1..5 }],
                    false,
                )
            };
            check(&mut store, |g| {
                let t = g.param(table);
                let q = g.gather(t, &[1, 3, 1, 0, 5]);
                let (k, v) = (g.param(k_in), g.param(v_in));
                let o = g.attention(q, k, v, 2, layout.clone());
                g.cross_entropy(o, &[0, 1, 2, 3, 0])
            });
        }
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let store = ParamStore::default();
        let mut g = Graph::new(&store);
        let q = g.constant(rand_mat(&mut rng, 4, 6));
        let k = g.constant(rand_mat(&mut rng, 4, 6));
        let o = g.attention(q, k, k, 3, AttnLayout::self_attention(&[0..4], true));
        for p in g.attention_probs(o).unwrap() {
            for (i, row) in p.rows().into_iter().enumerate() {
                assert!((row.sum() - 1.0).abs() < 1e-12);
                assert!(row.iter().skip(i + 1).all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let store = ParamStore::default();
        let mut g = Graph::new(&store);
        let l = g.constant(Array2::zeros((3, 7)));
        let loss = g.cross_entropy(l, &[0, 1, 6]);
        assert!((g.scalar(loss) - 7f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn unused_parameter_gets_zero_gradient() {
        let mut store = ParamStore::default();
        let used = store.insert("used", array![[1.0, 2.0]]);
        let unused = store.insert("unused", array![[3.0, 4.0]]);
        let mut g = Graph::new(&store);
        let u = g.param(used);
        let loss = g.cross_entropy(u, &[1]);
        let grads = g.backward(loss);
        assert!(grads.get(unused).iter().all(|&v| v == 0.0));
        assert!(grads.get(used).iter().any(|&v| v != 0.0));
    }

    #[test]
    fn clipping_never_increases_norm() {
        let mut store = ParamStore::default();
        store.insert("p", array![[3.0, 4.0]]);
        let mut grads = Gradients::zeros_like(&store);
        grads.grads[0] = array![[3.0, 4.0]];
        assert_eq!(grads.clip(1.0), 5.0);
        assert!((grads.global_norm() - 1.0).abs() < 1e-12);
        grads.clip(10.0);
        assert!((grads.global_norm() - 1.0).abs() < 1e-12);
    }
}
