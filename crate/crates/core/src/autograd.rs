//! Reverse-mode differentiation over a small graph of matrix operations.
//!
//! Every value is a 2-D matrix. Batched sequences are stacked row-wise:
//! ops that mix positions (attention, convolution) take the segment length
//! and never look across segment boundaries. Values are computed eagerly
//! as nodes are added; [`Graph::backward`] replays the tape in reverse.

use std::collections::HashMap;

use ndarray::{s, Array2, ArrayView2, Axis, Zip};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type NodeId = usize;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Named trainable matrices, kept in insertion order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<S> {
    names: Vec<String>,
    values: Vec<Array2<S>>,
    index: HashMap<String, usize>,
}

impl<S: Scalar> Default for ParamStore<S> {
    fn default() -> Self {
        Self { names: Vec::new(), values: Vec::new(), index: HashMap::new() }
    }
}

impl<S: Scalar> ParamStore<S> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<S>) -> usize {
        let name = name.into();
        if let Some(&i) = self.index.get(&name) {
            self.values[i] = value;
            return i;
        }
        let i = self.values.len();
        self.index.insert(name.clone(), i);
        self.names.push(name);
        self.values.push(value);
        i
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn get(&self, name: &str) -> Option<&Array2<S>> {
        self.id(name).map(|i| &self.values[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Array2<S>> {
        self.id(name).map(move |i| &mut self.values[i])
    }

    pub fn value(&self, id: usize) -> &Array2<S> {
        &self.values[id]
    }

    pub fn value_mut(&mut self, id: usize) -> &mut Array2<S> {
        &mut self.values[id]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<S>)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }

    pub fn values_mut(&mut self) -> impl Iterator<Item = &mut Array2<S>> {
        self.values.iter_mut()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.values.iter().map(Array2::len).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }

    /// Zeroed matrices with the same shapes, in the same order.
    pub fn zeros_like(&self) -> Vec<Array2<S>> {
        self.values.iter().map(|v| Array2::zeros(v.raw_dim())).collect()
    }
}

/// How attention treats positions within a segment.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttentionSpec {
    pub heads: usize,
    pub seg_len: usize,
    pub causal: bool,
    pub rotary_base: f64,
}

/// One cross-entropy term: softmax over `width` columns of `row` starting
/// at `offset`, scored against `target`, scaled by `weight`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct XentTerm<S> {
    pub row: usize,
    pub offset: usize,
    pub width: usize,
    pub target: usize,
    pub weight: S,
}

/// Counters collected while building a graph.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct GraphStats {
    /// Largest number of query rows in any attention score matrix.
    pub max_attention_rows: usize,
    /// Total attention score entries computed, over all layers and heads.
    pub attention_score_entries: usize,
    pub attention_calls: usize,
}

enum Op<S> {
    Input,
    Param(usize),
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Scale(NodeId, S),
    Silu(NodeId),
    Glu(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, xhat: Array2<S>, inv_std: Vec<S> },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        spec: AttentionSpec,
        rot: Rotary<S>,
        qr: Array2<S>,
        kr: Array2<S>,
        probs: Vec<Array2<S>>,
    },
    DepthwiseConv { x: NodeId, weight: NodeId, bias: NodeId, seg_len: usize, causal: bool },
    EmbedSum { lookups: Vec<(NodeId, Vec<usize>)> },
    ConcatCols(Vec<NodeId>),
    Xent { logits: NodeId, terms: Vec<XentTerm<S>>, probs: Vec<Vec<S>> },
}

struct Node<S> {
    value: Option<Array2<S>>,
    op: Op<S>,
}

/// A define-by-run tape borrowing its parameters.
pub struct Graph<'p, S: Scalar> {
    params: &'p ParamStore<S>,
    nodes: Vec<Node<S>>,
    param_nodes: HashMap<usize, NodeId>,
    stats: GraphStats,
}

/// Gradients of a scalar output.
pub struct Gradients<S> {
    nodes: Vec<Option<Array2<S>>>,
    params: Vec<Array2<S>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient with respect to a node, if it influenced the output.
    pub fn node(&self, id: NodeId) -> Option<&Array2<S>> {
        self.nodes.get(id).and_then(Option::as_ref)
    }

    /// Per-parameter gradients in [`ParamStore`] order.
    pub fn params(&self) -> &[Array2<S>] {
        &self.params
    }

    pub fn into_params(self) -> Vec<Array2<S>> {
        self.params
    }
}

#[derive(Clone)]
struct Rotary<S> {
    cos: Array2<S>,
    sin: Array2<S>,
}

impl<S: Scalar> Rotary<S> {
    fn new(seg_len: usize, head_dim: usize, base: f64) -> Self {
        let half = head_dim / 2;
        let mut cos = Array2::zeros((seg_len, half));
        let mut sin = Array2::zeros((seg_len, half));
        for p in 0..seg_len {
            for k in 0..half {
                let theta = base.powf(-2.0 * k as f64 / head_dim as f64);
                let angle = p as f64 * theta;
                cos[[p, k]] = S::of(angle.cos());
                sin[[p, k]] = S::of(angle.sin());
            }
        }
        Self { cos, sin }
    }

    /// Rotates consecutive pairs within each head; `inverse` applies the
    /// transpose rotation (used to pull gradients back).
    fn apply(&self, x: &Array2<S>, heads: usize, seg_len: usize, inverse: bool) -> Array2<S> {
        let mut out = x.clone();
        let dh = x.ncols() / heads;
        let half = dh / 2;
        for (r, mut row) in out.rows_mut().into_iter().enumerate() {
            let p = r % seg_len;
            for h in 0..heads {
                for k in 0..half {
                    let (c, mut sn) = (self.cos[[p, k]], self.sin[[p, k]]);
                    if inverse {
                        sn = -sn;
                    }
                    let i0 = h * dh + 2 * k;
                    let (a, b) = (row[i0], row[i0 + 1]);
                    row[i0] = a * c - b * sn;
                    row[i0 + 1] = a * sn + b * c;
                }
            }
        }
        out
    }
}

#[inline]
fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let max = row.iter().fold(S::neg_infinity(), |m, &v| m.max(v));
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

impl<'p, S: Scalar> Graph<'p, S> {
    pub fn new(params: &'p ParamStore<S>) -> Self {
        Self { params, nodes: Vec::new(), param_nodes: HashMap::new(), stats: GraphStats::default() }
    }

    pub fn stats(&self) -> GraphStats {
        self.stats
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<S> {
        match (&self.nodes[id].value, &self.nodes[id].op) {
            (Some(v), _) => v,
            (None, Op::Param(p)) => self.params.value(*p),
            (None, _) => unreachable!("non-parameter node without a value"),
        }
    }

    fn push(&mut self, value: Array2<S>, op: Op<S>) -> NodeId {
        self.nodes.push(Node { value: Some(value), op });
        self.nodes.len() - 1
    }

    pub fn input(&mut self, value: Array2<S>) -> NodeId {
        self.push(value, Op::Input)
    }

    /// Node for a named parameter; repeated lookups share one node.
    pub fn param(&mut self, name: &str) -> Result<NodeId> {
        let pid = self
            .params
            .id(name)
            .ok_or_else(|| Error::Invariant(format!("missing parameter {name}")))?;
        if let Some(&n) = self.param_nodes.get(&pid) {
            return Ok(n);
        }
        self.nodes.push(Node { value: None, op: Op::Param(pid) });
        let id = self.nodes.len() - 1;
        self.param_nodes.insert(pid, id);
        Ok(id)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    /// `a` plus a 1×n row broadcast over every row.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let v = self.value(a) + &self.value(bias).row(0);
        self.push(v, Op::AddBias(a, bias))
    }

    /// `x · w + b`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let h = self.matmul(x, w);
        self.add_bias(h, b)
    }

    pub fn scale(&mut self, a: NodeId, k: S) -> NodeId {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn silu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a))
    }

    /// Gated linear unit: splits columns in half and returns `a ⊙ σ(b)`.
    pub fn glu(&mut self, a: NodeId) -> NodeId {
        let x = self.value(a);
        let half = x.ncols() / 2;
        let mut v = x.slice(s![.., ..half]).to_owned();
        Zip::from(&mut v)
            .and(x.slice(s![.., half..]))
            .for_each(|o, &g| *o *= sigmoid(g));
        self.push(v, Op::Glu(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xv = self.value(x);
        let n = S::of(xv.ncols() as f64);
        let eps = S::of(LAYER_NORM_EPS);
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let is = S::one() / (var + eps).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let g = self.value(gamma).row(0);
        let b = self.value(beta).row(0);
        let out = &(&xhat * &g) + &b;
        self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std })
    }

    /// Multi-head scaled dot-product attention with rotary positions.
    pub fn attention(&mut self, q: NodeId, k: NodeId, v: NodeId, spec: AttentionSpec) -> Result<NodeId> {
        let (rows, d) = self.value(q).dim();
        if spec.seg_len == 0 || rows % spec.seg_len != 0 {
            return Err(Error::Shape(format!("{rows} rows do not split into segments of {}", spec.seg_len)));
        }
        if d % spec.heads != 0 || (d / spec.heads) % 2 != 0 {
            return Err(Error::Shape(format!("model dim {d} needs an even head dim over {} heads", spec.heads)));
        }
        let dh = d / spec.heads;
        let t = spec.seg_len;
        let rot = Rotary::new(t, dh, spec.rotary_base);
        let qr = rot.apply(self.value(q), spec.heads, t, false);
        let kr = rot.apply(self.value(k), spec.heads, t, false);
        let vv = self.value(v);
        let scale = S::one() / S::of(dh as f64).sqrt();
        let mut out = Array2::zeros((rows, d));
        let mut probs = Vec::with_capacity(rows / t * spec.heads);
        for seg in 0..rows / t {
            let r = seg * t..(seg + 1) * t;
            for h in 0..spec.heads {
                let c = h * dh..(h + 1) * dh;
                let qh = qr.slice(s![r.clone(), c.clone()]);
                let kh = kr.slice(s![r.clone(), c.clone()]);
                let mut scores = qh.dot(&kh.t()) * scale;
                for (i, mut row) in scores.rows_mut().into_iter().enumerate() {
                    if spec.causal {
                        row.slice_mut(s![i + 1..]).fill(S::neg_infinity());
                    }
                    softmax_in_place(row.as_slice_mut().expect("contiguous row"));
                }
                let oh = scores.dot(&vv.slice(s![r.clone(), c.clone()]));
                out.slice_mut(s![r.clone(), c]).assign(&oh);
                probs.push(scores);
            }
        }
        self.stats.max_attention_rows = self.stats.max_attention_rows.max(t);
        self.stats.attention_score_entries += rows / t * spec.heads * t * t;
        self.stats.attention_calls += 1;
        Ok(self.push(out, Op::Attention { q, k, v, spec, rot, qr, kr, probs }))
    }

    /// Per-channel 1-D convolution along each segment with zero padding.
    /// Centred ("same") unless `causal`, in which case only past frames
    /// contribute.
    pub fn depthwise_conv(&mut self, x: NodeId, weight: NodeId, bias: NodeId, seg_len: usize, causal: bool) -> Result<NodeId> {
        let xv = self.value(x);
        let w = self.value(weight);
        let (rows, d) = xv.dim();
        let ksize = w.nrows();
        if w.ncols() != d || seg_len == 0 || rows % seg_len != 0 {
            return Err(Error::Shape("depthwise conv shape mismatch".into()));
        }
        let off = if causal { ksize - 1 } else { (ksize - 1) / 2 };
        let b = self.value(bias).row(0);
        let mut out = Array2::zeros((rows, d));
        for seg in 0..rows / seg_len {
            let base = seg * seg_len;
            for t in 0..seg_len {
                let mut orow = out.row_mut(base + t);
                orow.assign(&b);
                for j in 0..ksize {
                    let src = t as isize + j as isize - off as isize;
                    if src < 0 || src >= seg_len as isize {
                        continue;
                    }
                    let xr = xv.row(base + src as usize);
                    Zip::from(&mut orow).and(&xr).and(w.row(j)).for_each(|o, &xv, &wv| *o += xv * wv);
                }
            }
        }
        Ok(self.push(out, Op::DepthwiseConv { x, weight, bias, seg_len, causal }))
    }

    /// Row r of the output is `Σ_l table_l[indices_l[r]]`.
    pub fn embed_sum(&mut self, lookups: Vec<(NodeId, Vec<usize>)>) -> Result<NodeId> {
        let rows = lookups.first().map_or(0, |l| l.1.len());
        let d = lookups.first().map_or(0, |l| self.value(l.0).ncols());
        let mut out = Array2::zeros((rows, d));
        for (table, idx) in &lookups {
            let tv = self.value(*table);
            if idx.len() != rows || tv.ncols() != d {
                return Err(Error::Shape("embedding lookups disagree in shape".into()));
            }
            for (r, &i) in idx.iter().enumerate() {
                if i >= tv.nrows() {
                    return Err(Error::Shape(format!("embedding index {i} outside table of {}", tv.nrows())));
                }
                let mut orow = out.row_mut(r);
                orow += &tv.row(i);
            }
        }
        Ok(self.push(out, Op::EmbedSum { lookups }))
    }

    pub fn concat_cols(&mut self, parts: Vec<NodeId>) -> NodeId {
        let views: Vec<ArrayView2<S>> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts agree");
        self.push(v, Op::ConcatCols(parts))
    }

    /// Weighted sum of softmax cross-entropies; a 1×1 node.
    pub fn cross_entropy(&mut self, logits: NodeId, terms: Vec<XentTerm<S>>) -> Result<NodeId> {
        let lv = self.value(logits);
        let mut total = S::zero();
        let mut probs = Vec::with_capacity(terms.len());
        for term in &terms {
            if term.row >= lv.nrows() || term.offset + term.width > lv.ncols() || term.target >= term.width {
                return Err(Error::Shape("cross-entropy term outside logits".into()));
            }
            let mut p: Vec<S> = lv.slice(s![term.row, term.offset..term.offset + term.width]).to_vec();
            softmax_in_place(&mut p);
            total += term.weight * -p[term.target].ln();
            probs.push(p);
        }
        let out = Array2::from_elem((1, 1), total);
        Ok(self.push(out, Op::Xent { logits, terms, probs }))
    }

    /// Gradients of the 1×1 node `output` with respect to every node and
    /// parameter.
    pub fn backward(&self, output: NodeId) -> Gradients<S> {
        let seed = Array2::from_elem(self.value(output).raw_dim(), S::one());
        self.backward_with_seed(output, seed)
    }

    /// Vector-Jacobian product: gradients of `Σ seed ⊙ output`.
    pub fn backward_with_seed(&self, output: NodeId, seed: Array2<S>) -> Gradients<S> {
        assert_eq!(seed.dim(), self.value(output).dim(), "seed shape");
        let mut grads: Vec<Option<Array2<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut param_grads = self.params.zeros_like();
        grads[output] = Some(seed);

        fn acc<S: Scalar>(grads: &mut [Option<Array2<S>>], id: NodeId, g: Array2<S>) {
            match &mut grads[id] {
                Some(existing) => *existing += &g,
                slot @ None => *slot = Some(g),
            }
        }

        for id in (0..=output).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Input => {}
                Op::Param(p) => param_grads[*p] += &g,
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, g.clone());
                    acc(&mut grads, *b, g.clone());
                }
                Op::AddBias(a, b) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *b, gb);
                    acc(&mut grads, *a, g.clone());
                }
                Op::Scale(a, k) => acc(&mut grads, *a, &g * *k),
                Op::Silu(a) => {
                    let mut ga = g.clone();
                    Zip::from(&mut ga).and(self.value(*a)).for_each(|gv, &x| {
                        let sg = sigmoid(x);
                        *gv *= sg * (S::one() + x * (S::one() - sg));
                    });
                    acc(&mut grads, *a, ga);
                }
                Op::Glu(a) => {
                    let x = self.value(*a);
                    let half = x.ncols() / 2;
                    let mut ga = Array2::zeros(x.raw_dim());
                    for r in 0..x.nrows() {
                        for c in 0..half {
                            let (lin, gate) = (x[[r, c]], x[[r, c + half]]);
                            let sg = sigmoid(gate);
                            ga[[r, c]] = g[[r, c]] * sg;
                            ga[[r, c + half]] = g[[r, c]] * lin * sg * (S::one() - sg);
                        }
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                    let gam = self.value(*gamma).row(0);
                    let ggamma = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gbeta = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let n = S::of(xhat.ncols() as f64);
                    let mut gx = &g * &gam;
                    for (r, mut row) in gx.rows_mut().into_iter().enumerate() {
                        let xh = xhat.row(r);
                        let mean_g = row.sum() / n;
                        let mean_gx = row.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<S>() / n;
                        let is = inv_std[r];
                        Zip::from(&mut row).and(&xh).for_each(|v, &h| *v = is * (*v - mean_g - h * mean_gx));
                    }
                    acc(&mut grads, *gamma, ggamma);
                    acc(&mut grads, *beta, gbeta);
                    acc(&mut grads, *x, gx);
                }
                Op::Attention { q, k, v, spec, rot, qr, kr, probs } => {
                    let (rows, d) = g.dim();
                    let dh = d / spec.heads;
                    let t = spec.seg_len;
                    let scale = S::one() / S::of(dh as f64).sqrt();
                    let vv = self.value(*v);
                    let mut gqr = Array2::zeros((rows, d));
                    let mut gkr = Array2::zeros((rows, d));
                    let mut gv = Array2::zeros((rows, d));
                    for seg in 0..rows / t {
                        let r = seg * t..(seg + 1) * t;
                        for h in 0..spec.heads {
                            let c = h * dh..(h + 1) * dh;
                            let p = &probs[seg * spec.heads + h];
                            let go = g.slice(s![r.clone(), c.clone()]);
                            gv.slice_mut(s![r.clone(), c.clone()]).assign(&p.t().dot(&go));
                            let mut ds = go.dot(&vv.slice(s![r.clone(), c.clone()]).t());
                            for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                                let dot = drow.iter().zip(prow.iter()).map(|(&a, &b)| a * b).sum::<S>();
                                Zip::from(&mut drow).and(&prow).for_each(|dv, &pv| *dv = pv * (*dv - dot) * scale);
                            }
                            gqr.slice_mut(s![r.clone(), c.clone()])
                                .assign(&ds.dot(&kr.slice(s![r.clone(), c.clone()])));
                            gkr.slice_mut(s![r.clone(), c.clone()])
                                .assign(&ds.t().dot(&qr.slice(s![r.clone(), c.clone()])));
                        }
                    }
                    acc(&mut grads, *q, rot.apply(&gqr, spec.heads, t, true));
                    acc(&mut grads, *k, rot.apply(&gkr, spec.heads, t, true));
                    acc(&mut grads, *v, gv);
                }
                Op::DepthwiseConv { x, weight, bias, seg_len, causal } => {
                    let xv = self.value(*x);
                    let w = self.value(*weight);
                    let ksize = w.nrows();
                    let off = if *causal { ksize - 1 } else { (ksize - 1) / 2 };
                    let mut gx = Array2::zeros(xv.raw_dim());
                    let mut gw = Array2::zeros(w.raw_dim());
                    for seg in 0..xv.nrows() / seg_len {
                        let base = seg * seg_len;
                        for t in 0..*seg_len {
                            let grow = g.row(base + t);
                            for j in 0..ksize {
                                let src = t as isize + j as isize - off as isize;
                                if src < 0 || src >= *seg_len as isize {
                                    continue;
                                }
                                let src = base + src as usize;
                                Zip::from(gx.row_mut(src)).and(&grow).and(w.row(j)).for_each(|o, &gv, &wv| *o += gv * wv);
                                Zip::from(gw.row_mut(j)).and(&grow).and(xv.row(src)).for_each(|o, &gv, &xv| *o += gv * xv);
                            }
                        }
                    }
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *bias, gb);
                    acc(&mut grads, *weight, gw);
                    acc(&mut grads, *x, gx);
                }
                Op::EmbedSum { lookups } => {
                    for (table, idx) in lookups {
                        let mut gt = Array2::zeros(self.value(*table).raw_dim());
                        for (r, &i) in idx.iter().enumerate() {
                            let mut row = gt.row_mut(i);
                            row += &g.row(r);
                        }
                        acc(&mut grads, *table, gt);
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(&mut grads, p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::Xent { logits, terms, probs } => {
                    let up = g[[0, 0]];
                    let mut gl = Array2::zeros(self.value(*logits).raw_dim());
                    for (term, p) in terms.iter().zip(probs) {
                        for (j, &pj) in p.iter().enumerate() {
                            let ind = if j == term.target { S::one() } else { S::zero() };
                            gl[[term.row, term.offset + j]] += up * term.weight * (pj - ind);
                        }
                    }
                    acc(&mut grads, *logits, gl);
                }
            }
            grads[id] = Some(g);
        }
        Gradients { nodes: grads, params: param_grads }
    }
}
