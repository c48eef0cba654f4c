//! Reverse-mode differentiation over row-major matrices.
//!
//! A [`Graph`] records every operation of one forward pass together with the
//! intermediate values its backward rule needs. Parameters live in a
//! [`ParamStore`] shared read-only between graphs, so independent clips can be
//! differentiated concurrently and their gradients summed afterwards.
//!
//! All kernels are generic over [`Scalar`], which lets the same model code run
//! in 32-bit for training and in 64-bit for finite-difference checks.

use std::collections::HashMap;
use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};
use std::sync::Arc;

use ndarray::{s, Array2, Axis, LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive};

use crate::error::{Error, Result};

pub trait Scalar:
    Float
    + FromPrimitive
    + LinalgScalar
    + ScalarOperand
    + Debug
    + Display
    + Send
    + Sync
    + AddAssign
    + SubAssign
    + MulAssign
    + Sum
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 converts to every float type")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Named, ordered collection of parameter matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamStore<F> {
    names: Vec<String>,
    values: Vec<Array2<F>>,
    index: HashMap<String, ParamId>,
}

impl<F> Default for ParamStore<F> {
    fn default() -> Self {
        Self {
            names: Vec::new(),
            values: Vec::new(),
            index: HashMap::new(),
        }
    }
}

impl<F: Scalar> ParamStore<F> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a parameter. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, value: Array2<F>) -> ParamId {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter name {name}"
        );
        let id = ParamId(self.values.len());
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Array2<F> {
        &self.values[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Array2<F> {
        &mut self.values[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Array2<F>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (ParamId(i), n.as_str(), v))
    }

    /// Total number of scalar entries.
    pub fn num_scalars(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn cast<G: Scalar>(&self) -> ParamStore<G> {
        ParamStore {
            names: self.names.clone(),
            values: self
                .values
                .iter()
                .map(|v| v.mapv(|x| G::from_f64_lossy(x.to_f64().unwrap_or(f64::NAN))))
                .collect(),
            index: self.index.clone(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.iter().all(|x| x.is_finite()))
    }
}

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// One attention neighborhood: each query row attends over the listed key rows.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttentionGroup {
    pub queries: Vec<usize>,
    pub keys: Vec<usize>,
}

/// Which key rows every query row may attend to.
///
/// `Groups` lets one fused kernel express divided space-time attention: each
/// query row must appear in at most one group, and rows in no group produce a
/// zero output row.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AttentionPattern {
    Dense,
    Groups(Arc<Vec<AttentionGroup>>),
}

enum Op<F> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add(Var, Var),
    LayerNorm {
        x: Var,
        gain: Var,
        offset: Var,
        normalized: Array2<F>,
        inv_std: Vec<F>,
    },
    Gelu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: Arc<Vec<AttentionGroup>>,
        /// Row-major probabilities per (group, head).
        probs: Vec<Vec<F>>,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    MeanRows(Var),
    Dropout {
        x: Var,
        mask: Array2<F>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        target: usize,
        probs: Vec<F>,
    },
}

struct Node<F> {
    value: Array2<F>,
    op: Op<F>,
}

pub struct Graph<'p, F: Scalar> {
    params: &'p ParamStore<F>,
    nodes: Vec<Node<F>>,
    param_nodes: HashMap<ParamId, Var>,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl<'p, F: Scalar> Graph<'p, F> {
    pub fn new(params: &'p ParamStore<F>) -> Self {
        Self {
            params,
            nodes: Vec::with_capacity(256),
            param_nodes: HashMap::new(),
        }
    }

    pub fn params(&self) -> &'p ParamStore<F> {
        self.params
    }

    fn push(&mut self, value: Array2<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input; receives a gradient but is not a parameter.
    pub fn input(&mut self, value: Array2<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf bound to a stored parameter. Repeated calls share one node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Leaf);
        self.param_nodes.insert(id, v);
        v
    }

    /// `x @ w + b` with `x: L x i`, `w: i x o`, `b: 1 x o`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let mut out = self.value(x).dot(self.value(w));
        if let Some(b) = b {
            out += self.value(b);
        }
        self.push(out, Op::Linear { x, w, b })
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    /// Row-wise layer normalization with learned gain and offset (`1 x d`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, offset: Var) -> Var {
        let xv = self.value(x);
        let (rows, d) = xv.dim();
        let eps = F::from_f64_lossy(LAYER_NORM_EPS);
        let inv_d = F::one() / F::from_usize(d).unwrap();
        let mut normalized = Array2::<F>::zeros((rows, d));
        let mut inv_std = Vec::with_capacity(rows);
        for (row, mut nrow) in xv.outer_iter().zip(normalized.outer_iter_mut()) {
            let mean = row.sum() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() * inv_d;
            let is = F::one() / (var + eps).sqrt();
            for (n, &v) in nrow.iter_mut().zip(row.iter()) {
                *n = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let out = &normalized * self.value(gain) + self.value(offset);
        self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                offset,
                normalized,
                inv_std,
            },
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).mapv(gelu);
        self.push(out, Op::Gelu(x))
    }

    /// Multi-head scaled dot-product attention on already projected
    /// queries/keys/values; heads split the columns evenly.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        pattern: &AttentionPattern,
    ) -> Result<Var> {
        let (lq, d) = self.shape(q);
        let (lk, dk) = self.shape(k);
        if lk == 0 {
            return Err(Error::Validation("attention needs at least one key".into()));
        }
        if dk != d || self.shape(v) != (lk, d) || heads == 0 || d % heads != 0 {
            return Err(Error::Validation(format!(
                "attention shape mismatch: q {lq}x{d}, k {lk}x{dk}, v {:?}, heads {heads}",
                self.shape(v)
            )));
        }
        let groups = match pattern {
            AttentionPattern::Dense => Arc::new(vec![AttentionGroup {
                queries: (0..lq).collect(),
                keys: (0..lk).collect(),
            }]),
            AttentionPattern::Groups(g) => g.clone(),
        };
        let dh = d / heads;
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let qv = self.value(q).as_standard_layout().into_owned();
        let kv = self.value(k).as_standard_layout().into_owned();
        let vv = self.value(v).as_standard_layout().into_owned();
        let (qs, ks, vs) = (
            qv.as_slice().unwrap(),
            kv.as_slice().unwrap(),
            vv.as_slice().unwrap(),
        );
        let mut out = Array2::<F>::zeros((lq, d));
        let os = out.as_slice_mut().unwrap();
        let mut probs = Vec::with_capacity(groups.len() * heads);
        for group in groups.iter() {
            let nk = group.keys.len();
            if nk == 0 && !group.queries.is_empty() {
                return Err(Error::Validation("attention group without keys".into()));
            }
            for h in 0..heads {
                let c0 = h * dh;
                let mut p = vec![F::zero(); group.queries.len() * nk];
                for (i, &qi) in group.queries.iter().enumerate() {
                    let qrow = &qs[qi * d + c0..qi * d + c0 + dh];
                    let prow = &mut p[i * nk..(i + 1) * nk];
                    let mut max = F::neg_infinity();
                    for (j, &kj) in group.keys.iter().enumerate() {
                        let krow = &ks[kj * d + c0..kj * d + c0 + dh];
                        let s = dot(qrow, krow) * scale;
                        prow[j] = s;
                        if s > max {
                            max = s;
                        }
                    }
                    let mut total = F::zero();
                    for e in prow.iter_mut() {
                        *e = (*e - max).exp();
                        total += *e;
                    }
                    let orow = &mut os[qi * d + c0..qi * d + c0 + dh];
                    for (j, &kj) in group.keys.iter().enumerate() {
                        prow[j] = prow[j] / total;
                        let w = prow[j];
                        let vrow = &vs[kj * d + c0..kj * d + c0 + dh];
                        for (o, &x) in orow.iter_mut().zip(vrow) {
                            *o += w * x;
                        }
                    }
                }
                probs.push(p);
            }
        }
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                groups,
                probs,
            },
        ))
    }

    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let xv = self.value(x);
        if let Some(&bad) = rows.iter().find(|&&r| r >= xv.nrows()) {
            return Err(Error::Validation(format!(
                "row {bad} out of range for {} rows",
                xv.nrows()
            )));
        }
        let out = xv.select(Axis(0), &rows);
        Ok(self.push(out, Op::GatherRows { x, rows }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(0), &views)
            .map_err(|e| Error::Validation(format!("concat_rows: {e}")))?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let out = ndarray::concatenate(Axis(1), &views)
            .map_err(|e| Error::Validation(format!("concat_cols: {e}")))?;
        Ok(self.push(out, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let out = self.value(x).slice(s![start..end, ..]).to_owned();
        self.push(out, Op::SliceRows { x, start })
    }

    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.nrows() == 0 {
            return Err(Error::Validation("cannot pool an empty token set".into()));
        }
        let out = xv.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
        Ok(self.push(out, Op::MeanRows(x)))
    }

    /// Elementwise product with a fixed (already rescaled) keep mask.
    pub fn dropout(&mut self, x: Var, mask: Array2<F>) -> Var {
        let out = self.value(x) * &mask;
        self.push(out, Op::Dropout { x, mask })
    }

    /// Cross-entropy of a single `1 x C` logit row against `target`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let lv = self.value(logits);
        if lv.nrows() != 1 || target >= lv.ncols() {
            return Err(Error::Validation(format!(
                "cross-entropy expects one logit row and target < {} (got {target})",
                lv.ncols()
            )));
        }
        let probs = softmax_slice(lv.row(0).as_slice().unwrap_or(&lv.row(0).to_vec()));
        let max = lv.iter().cloned().fold(F::neg_infinity(), F::max);
        let lse = max + lv.iter().map(|&x| (x - max).exp()).sum::<F>().ln();
        let loss = lse - lv[[0, target]];
        Ok(self.push(
            Array2::from_elem((1, 1), loss),
            Op::SoftmaxCrossEntropy {
                logits,
                target,
                probs,
            },
        ))
    }

    /// Back-propagates from a `1 x 1` node.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        let mut grads: Vec<Option<Array2<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array2::from_elem(self.value(loss).dim(), F::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Gradients {
            grads,
            param_nodes: self.param_nodes.clone(),
            num_params: self.params.len(),
        }
    }

    fn backprop_node(&self, idx: usize, g: &Array2<F>, grads: &mut [Option<Array2<F>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                accumulate(grads, *x, g.dot(&wv.t()));
                accumulate(grads, *w, xv.t().dot(g));
                if let Some(b) = b {
                    accumulate(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::LayerNorm {
                x,
                gain,
                offset,
                normalized,
                inv_std,
            } => {
                let gv = self.value(*gain);
                accumulate(
                    grads,
                    *gain,
                    (g * normalized).sum_axis(Axis(0)).insert_axis(Axis(0)),
                );
                accumulate(grads, *offset, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                let dnorm = g * gv;
                let d = normalized.ncols();
                let inv_d = F::one() / F::from_usize(d).unwrap();
                let mut dx = Array2::<F>::zeros(normalized.dim());
                for r in 0..normalized.nrows() {
                    let dn = dnorm.row(r);
                    let xh = normalized.row(r);
                    let sum_dn = dn.sum();
                    let sum_dn_xh = dn.iter().zip(xh.iter()).map(|(&a, &b)| a * b).sum::<F>();
                    for c in 0..d {
                        dx[[r, c]] =
                            inv_std[r] * (dn[c] - inv_d * sum_dn - xh[c] * inv_d * sum_dn_xh);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let mut dx = g.clone();
                dx.zip_mut_with(xv, |d, &v| *d *= gelu_grad(v));
                accumulate(grads, *x, dx);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                groups,
                probs,
            } => {
                let (dq, dk, dv) = self.attention_backward(*q, *k, *v, *heads, groups, probs, g);
                accumulate(grads, *q, dq);
                accumulate(grads, *k, dk);
                accumulate(grads, *v, dv);
            }
            Op::GatherRows { x, rows } => {
                let mut dx = Array2::<F>::zeros(self.shape(*x));
                for (i, &r) in rows.iter().enumerate() {
                    let mut target = dx.row_mut(r);
                    target += &g.row(i);
                }
                accumulate(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = self.shape(p).0;
                    accumulate(grads, p, g.slice(s![start..start + n, ..]).to_owned());
                    start += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let n = self.shape(p).1;
                    accumulate(grads, p, g.slice(s![.., start..start + n]).to_owned());
                    start += n;
                }
            }
            Op::SliceRows { x, start } => {
                let mut dx = Array2::<F>::zeros(self.shape(*x));
                dx.slice_mut(s![*start..*start + g.nrows(), ..]).assign(g);
                accumulate(grads, *x, dx);
            }
            Op::MeanRows(x) => {
                let (rows, cols) = self.shape(*x);
                let scale = F::one() / F::from_usize(rows).unwrap();
                let row = g.row(0).mapv(|v| v * scale);
                let dx = row.broadcast((rows, cols)).unwrap().to_owned();
                accumulate(grads, *x, dx);
            }
            Op::Dropout { x, mask } => {
                accumulate(grads, *x, g * mask);
            }
            Op::SoftmaxCrossEntropy {
                logits,
                target,
                probs,
            } => {
                let scale = g[[0, 0]];
                let mut dl = Array2::<F>::zeros((1, probs.len()));
                for (c, &p) in probs.iter().enumerate() {
                    let y = if c == *target { F::one() } else { F::zero() };
                    dl[[0, c]] = (p - y) * scale;
                }
                accumulate(grads, *logits, dl);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: &[AttentionGroup],
        probs: &[Vec<F>],
        g: &Array2<F>,
    ) -> (Array2<F>, Array2<F>, Array2<F>) {
        let qv = self.value(q).as_standard_layout().into_owned();
        let kv = self.value(k).as_standard_layout().into_owned();
        let vv = self.value(v).as_standard_layout().into_owned();
        let gv = g.as_standard_layout().into_owned();
        let (lq, d) = qv.dim();
        let lk = kv.nrows();
        let dh = d / heads;
        let scale = F::one() / F::from_usize(dh).unwrap().sqrt();
        let (qs, ks, vs, gs) = (
            qv.as_slice().unwrap(),
            kv.as_slice().unwrap(),
            vv.as_slice().unwrap(),
            gv.as_slice().unwrap(),
        );
        let mut dq = vec![F::zero(); lq * d];
        let mut dk = vec![F::zero(); lk * d];
        let mut dv = vec![F::zero(); lk * d];
        let mut p_iter = probs.iter();
        for group in groups {
            let nk = group.keys.len();
            for h in 0..heads {
                let p = p_iter.next().expect("one probability block per group and head");
                let c0 = h * dh;
                let mut ds = vec![F::zero(); nk];
                for (i, &qi) in group.queries.iter().enumerate() {
                    let prow = &p[i * nk..(i + 1) * nk];
                    let grow = &gs[qi * d + c0..qi * d + c0 + dh];
                    // dP, then dS = P * (dP - <P, dP>)
                    let mut inner = F::zero();
                    for (j, &kj) in group.keys.iter().enumerate() {
                        let vrow = &vs[kj * d + c0..kj * d + c0 + dh];
                        let dp = dot(grow, vrow);
                        ds[j] = dp;
                        inner += prow[j] * dp;
                        let dvrow = &mut dv[kj * d + c0..kj * d + c0 + dh];
                        for (o, &x) in dvrow.iter_mut().zip(grow) {
                            *o += prow[j] * x;
                        }
                    }
                    let qrow = &qs[qi * d + c0..qi * d + c0 + dh];
                    for (j, &kj) in group.keys.iter().enumerate() {
                        let s = prow[j] * (ds[j] - inner) * scale;
                        if s == F::zero() {
                            continue;
                        }
                        let krow = &ks[kj * d + c0..kj * d + c0 + dh];
                        let dqrow = &mut dq[qi * d + c0..qi * d + c0 + dh];
                        for (o, &x) in dqrow.iter_mut().zip(krow) {
                            *o += s * x;
                        }
                        let dkrow = &mut dk[kj * d + c0..kj * d + c0 + dh];
                        for (o, &x) in dkrow.iter_mut().zip(qrow) {
                            *o += s * x;
                        }
                    }
                }
            }
        }
        (
            Array2::from_shape_vec((lq, d), dq).unwrap(),
            Array2::from_shape_vec((lk, d), dk).unwrap(),
            Array2::from_shape_vec((lk, d), dv).unwrap(),
        )
    }
}

fn accumulate<F: Scalar>(grads: &mut [Option<Array2<F>>], v: Var, g: Array2<F>) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

fn dot<F: Scalar>(a: &[F], b: &[F]) -> F {
    a.iter().zip(b).fold(F::zero(), |acc, (&x, &y)| acc + x * y)
}

fn softmax_slice<F: Scalar>(row: &[F]) -> Vec<F> {
    let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
    let exps: Vec<F> = row.iter().map(|&x| (x - max).exp()).collect();
    let total: F = exps.iter().cloned().sum();
    exps.into_iter().map(|e| e / total).collect()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub fn gelu<F: Scalar>(x: F) -> F {
    let c = F::from_f64_lossy(GELU_C);
    let a = F::from_f64_lossy(GELU_A);
    let half = F::from_f64_lossy(0.5);
    half * x * (F::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_grad<F: Scalar>(x: F) -> F {
    let c = F::from_f64_lossy(GELU_C);
    let a = F::from_f64_lossy(GELU_A);
    let half = F::from_f64_lossy(0.5);
    let three = F::from_f64_lossy(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * a * x * x)
}

/// Gradients of one backward pass.
pub struct Gradients<F> {
    grads: Vec<Option<Array2<F>>>,
    param_nodes: HashMap<ParamId, Var>,
    num_params: usize,
}

impl<F: Scalar> Gradients<F> {
    pub fn of(&self, v: Var) -> Option<&Array2<F>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a parameter; `None` when the forward pass never touched it.
    pub fn param(&self, id: ParamId) -> Option<&Array2<F>> {
        self.param_nodes.get(&id).and_then(|v| self.of(*v))
    }

    pub fn into_param_grads(mut self) -> ParamGrads<F> {
        let mut out: Vec<Option<Array2<F>>> = (0..self.num_params).map(|_| None).collect();
        for (id, var) in &self.param_nodes {
            out[id.0] = self.grads[var.0].take();
        }
        ParamGrads(out)
    }
}

/// Per-parameter gradients indexed like the owning [`ParamStore`].
#[derive(Debug, Clone)]
pub struct ParamGrads<F>(pub Vec<Option<Array2<F>>>);

impl<F: Scalar> ParamGrads<F> {
    pub fn zeros_like(store: &ParamStore<F>) -> Self {
        ParamGrads((0..store.len()).map(|_| None).collect())
    }

    pub fn get(&self, id: ParamId) -> Option<&Array2<F>> {
        self.0[id.0].as_ref()
    }

    /// `self += other * weight`, in parameter order.
    pub fn add_scaled(&mut self, other: &ParamGrads<F>, weight: F) {
        for (mine, theirs) in self.0.iter_mut().zip(&other.0) {
            if let Some(t) = theirs {
                match mine {
                    Some(m) => m.scaled_add(weight, t),
                    None => *mine = Some(t.mapv(|x| x * weight)),
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.0
            .iter()
            .flatten()
            .all(|g| g.iter().all(|x| x.is_finite()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric_grad(
        store: &ParamStore<f64>,
        id: ParamId,
        f: &dyn Fn(&ParamStore<f64>) -> f64,
    ) -> Array2<f64> {
        let mut out = Array2::zeros(store.get(id).dim());
        let mut s = store.clone();
        for idx in ndarray::indices(store.get(id).dim()) {
            let base = s.get(id)[idx];
            s.get_mut(id)[idx] = base + 1e-5;
            let up = f(&s);
            s.get_mut(id)[idx] = base - 1e-5;
            let down = f(&s);
            s.get_mut(id)[idx] = base;
            out[idx] = (up - down) / 2e-5;
        }
        out
    }

    fn check(store: &ParamStore<f64>, f: &dyn Fn(&ParamStore<f64>) -> f64, analytic: &ParamGrads<f64>) {
        for id in store.ids() {
            let num = numeric_grad(store, id, f);
            let ana = analytic.get(id).cloned().unwrap_or_else(|| Array2::zeros(num.dim()));
            for (a, n) in ana.iter().zip(num.iter()) {
                let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-8);
                assert!(rel < 1e-5 || (a - n).abs() < 1e-9, "{}: {a} vs {n}", store.name(id));
            }
        }
    }

    #[test]
    fn linear_layer_norm_gelu_ce_gradients() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", array![[0.3, -1.2, 0.5], [1.1, 0.2, -0.4]]);
        let w = store.add("w", array![[0.2, -0.1], [0.4, 0.3], [-0.5, 0.7]]);
        let b = store.add("b", array![[0.05, -0.02]]);
        let gain = store.add("gain", array![[1.2, 0.8]]);
        let off = store.add("off", array![[0.1, -0.1]]);
        let run = |s: &ParamStore<f64>| {
            let mut g = Graph::new(s);
            let (xv, wv, bv) = (g.param(x), g.param(w), g.param(b));
            let h = g.linear(xv, wv, Some(bv));
            let (gv, ov) = (g.param(gain), g.param(off));
            let n = g.layer_norm(h, gv, ov);
            let a = g.gelu(n);
            let m = g.mean_rows(a).unwrap();
            let loss = g.softmax_cross_entropy(m, 1).unwrap();
            let value = g.value(loss)[[0, 0]];
            (value, g.backward(loss).into_param_grads())
        };
        let (_, grads) = run(&store);
        check(&store, &|s| run(s).0, &grads);
    }

    #[test]
    fn grouped_attention_gradients() {
        let mut store = ParamStore::<f64>::new();
        let q = store.add("q", Array2::from_shape_fn((5, 4), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin()));
        let k = store.add("k", Array2::from_shape_fn((5, 4), |(i, j)| ((i + 2 * j) as f64 * 0.71).cos()));
        let v = store.add("v", Array2::from_shape_fn((5, 4), |(i, j)| ((i * j) as f64 * 0.13 + 0.2).sin()));
        let probe = Array2::from_shape_fn((5, 4), |(i, j)| ((i + j) as f64 * 0.9).cos());
        let pattern = AttentionPattern::Groups(Arc::new(vec![
            AttentionGroup { queries: vec![0], keys: vec![0, 1, 2, 3, 4] },
            AttentionGroup { queries: vec![1, 3], keys: vec![0, 1, 3] },
            AttentionGroup { queries: vec![2], keys: vec![2, 4] },
        ]));
        // loss = sum_r <a_r, probe_r>
        let loss_fn = |s: &ParamStore<f64>| {
            let mut g = Graph::new(s);
            let (qv, kv, vv) = (g.param(q), g.param(k), g.param(v));
            let a = g.attention(qv, kv, vv, 2, &pattern).unwrap();
            let mut total = None;
            for r in 0..5 {
                let row = g.slice_rows(a, r, r + 1);
                let w = g.input(probe.row(r).to_owned().insert_axis(Axis(1)));
                let proj = g.linear(row, w, None);
                total = Some(match total {
                    None => proj,
                    Some(t) => g.add(t, proj),
                });
            }
            let loss = total.unwrap();
            (g.value(loss)[[0, 0]], g.backward(loss).into_param_grads())
        };
        let (_, grads) = loss_fn(&store);
        check(&store, &|s| loss_fn(s).0, &grads);
    }

    #[test]
    fn attention_rows_without_group_are_zero() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.input(Array2::from_elem((3, 2), 1.0));
        let pattern = AttentionPattern::Groups(Arc::new(vec![AttentionGroup {
            queries: vec![1],
            keys: vec![0, 2],
        }]));
        let a = g.attention(x, x, x, 1, &pattern).unwrap();
        assert_eq!(g.value(a).row(0).sum(), 0.0);
        assert_eq!(g.value(a).row(1).to_vec(), vec![1.0, 1.0]);
    }

    #[test]
    fn gather_and_concat_route_gradients() {
        let mut store = ParamStore::<f64>::new();
        let x = store.add("x", array![[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]);
        let mut g = Graph::new(&store);
        let xv = g.param(x);
        let picked = g.gather_rows(xv, vec![2, 0, 2]).unwrap();
        let pooled = g.mean_rows(picked).unwrap();
        let w = g.input(array![[1.0], [1.0]]);
        let loss = g.linear(pooled, w, None);
        let grads = g.backward(loss).into_param_grads();
        let gx = grads.get(x).unwrap();
        assert_eq!(gx, &array![[1.0 / 3.0, 1.0 / 3.0], [0.0, 0.0], [2.0 / 3.0, 2.0 / 3.0]]);
        assert!(g.gather_rows(xv, vec![3]).is_err());
    }

    #[test]
    fn gelu_matches_reference_points() {
        assert_eq!(gelu(0.0f64), 0.0);
        assert!((gelu(1.0f64) - 0.841_191_990_607_645_6).abs() < 1e-12);
        let h = 1e-6;
        for x in [-2.0f64, -0.3, 0.0, 0.7, 3.0] {
            let num = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((num - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
