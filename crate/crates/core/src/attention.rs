//! Attention building blocks shared by every encoder in the model.
//!
//! Blocks are pre-normalization residual blocks: `x + MHA(norm(x), norm(kv))`
//! followed by `x + FFN(norm(x))` with a 4x GELU feed-forward. All weight
//! matrices start Gaussian with a small standard deviation and biases at zero.

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{AttentionPattern, Graph, ParamId, ParamStore, Scalar, Var};

pub const FFN_EXPANSION: usize = 4;
pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TokenRole {
    Class,
    Patch,
    Gaze,
    Selected,
}

/// Ordered embedding vectors (one per row) with a role tag per token.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSet<F> {
    pub tokens: Array2<F>,
    pub roles: Vec<TokenRole>,
}

impl<F: Scalar> TokenSet<F> {
    pub fn new(tokens: Array2<F>, roles: Vec<TokenRole>) -> Result<Self> {
        if roles.len() != tokens.nrows() {
            return Err(Error::Validation(format!(
                "{} role tags for {} tokens",
                roles.len(),
                tokens.nrows()
            )));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("token set contains non-finite entries".into()));
        }
        Ok(Self { tokens, roles })
    }

    pub fn uniform(tokens: Array2<F>, role: TokenRole) -> Result<Self> {
        let n = tokens.nrows();
        Self::new(tokens, vec![role; n])
    }

    pub fn len(&self) -> usize {
        self.tokens.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.ncols()
    }
}

/// Draws initial parameter values.
pub struct Initializer<R> {
    rng: R,
    normal: Normal<f64>,
}

impl<R: Rng> Initializer<R> {
    pub fn new(rng: R) -> Self {
        Self {
            rng,
            normal: Normal::new(0.0, INIT_STD).expect("valid std"),
        }
    }

    pub fn gaussian<F: Scalar>(&mut self, rows: usize, cols: usize) -> Array2<F> {
        Array2::from_shape_simple_fn((rows, cols), || {
            F::from_f64_lossy(self.normal.sample(&mut self.rng))
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LinearParams {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl LinearParams {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        init: &mut Initializer<R>,
        prefix: &str,
        inputs: usize,
        outputs: usize,
        zero: bool,
    ) -> Self {
        let weight = if zero {
            Array2::zeros((inputs, outputs))
        } else {
            init.gaussian(inputs, outputs)
        };
        Self {
            weight: store.add(format!("{prefix}.weight"), weight),
            bias: store.add(format!("{prefix}.bias"), Array2::zeros((1, outputs))),
        }
    }

    pub fn apply<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, Some(b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub offset: ParamId,
}

impl LayerNormParams {
    pub fn new<F: Scalar>(store: &mut ParamStore<F>, prefix: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{prefix}.gain"), Array2::ones((1, dim))),
            offset: store.add(format!("{prefix}.offset"), Array2::zeros((1, dim))),
        }
    }

    pub fn apply<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let gain = g.param(self.gain);
        let offset = g.param(self.offset);
        g.layer_norm(x, gain, offset)
    }
}

/// Query/key/value/output projections of one multi-head attention.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProjectionParams {
    pub query: LinearParams,
    pub key: LinearParams,
    pub value: LinearParams,
    pub output: LinearParams,
    pub heads: usize,
}

impl ProjectionParams {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        init: &mut Initializer<R>,
        prefix: &str,
        dim: usize,
        heads: usize,
    ) -> Result<Self> {
        check_heads(dim, heads)?;
        Ok(Self {
            query: LinearParams::new(store, init, &format!("{prefix}.query"), dim, dim, false),
            key: LinearParams::new(store, init, &format!("{prefix}.key"), dim, dim, false),
            value: LinearParams::new(store, init, &format!("{prefix}.value"), dim, dim, false),
            output: LinearParams::new(store, init, &format!("{prefix}.output"), dim, dim, false),
            heads,
        })
    }

    /// Output projection of the concatenated per-head attention results.
    pub fn apply<F: Scalar>(
        &self,
        g: &mut Graph<'_, F>,
        queries: Var,
        keys_values: Var,
        pattern: &AttentionPattern,
    ) -> Result<Var> {
        let q = self.query.apply(g, queries);
        let k = self.key.apply(g, keys_values);
        let v = self.value.apply(g, keys_values);
        let mixed = g.attention(q, k, v, self.heads, pattern)?;
        Ok(self.output.apply(g, mixed))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeedForwardParams {
    pub norm: LayerNormParams,
    pub expand: LinearParams,
    pub contract: LinearParams,
}

impl FeedForwardParams {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        init: &mut Initializer<R>,
        prefix: &str,
        dim: usize,
    ) -> Self {
        let hidden = dim * FFN_EXPANSION;
        Self {
            norm: LayerNormParams::new(store, &format!("{prefix}.norm"), dim),
            expand: LinearParams::new(store, init, &format!("{prefix}.expand"), dim, hidden, false),
            contract: LinearParams::new(
                store,
                init,
                &format!("{prefix}.contract"),
                hidden,
                dim,
                false,
            ),
        }
    }

    /// `x + W2 gelu(W1 norm(x))`
    pub fn residual<F: Scalar>(&self, g: &mut Graph<'_, F>, x: Var) -> Var {
        let n = self.norm.apply(g, x);
        let h = self.expand.apply(g, n);
        let h = g.gelu(h);
        let out = self.contract.apply(g, h);
        g.add(x, out)
    }
}

/// Weights of one attention block (self- or cross-attention).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams {
    pub query_norm: LayerNormParams,
    /// Separate key/value normalization for cross-attention; self-attention
    /// reuses the normalized queries.
    pub context_norm: Option<LayerNormParams>,
    pub projections: ProjectionParams,
    pub feed_forward: FeedForwardParams,
}

impl AttentionParams {
    pub fn new<F: Scalar, R: Rng>(
        store: &mut ParamStore<F>,
        init: &mut Initializer<R>,
        prefix: &str,
        dim: usize,
        heads: usize,
        cross: bool,
    ) -> Result<Self> {
        Ok(Self {
            query_norm: LayerNormParams::new(store, &format!("{prefix}.query_norm"), dim),
            context_norm: cross
                .then(|| LayerNormParams::new(store, &format!("{prefix}.context_norm"), dim)),
            projections: ProjectionParams::new(store, init, &format!("{prefix}.attn"), dim, heads)?,
            feed_forward: FeedForwardParams::new(store, init, &format!("{prefix}.ffn"), dim),
        })
    }

    pub fn heads(&self) -> usize {
        self.projections.heads
    }
}

fn check_heads(dim: usize, heads: usize) -> Result<()> {
    if heads == 0 || !dim.is_multiple_of(heads) {
        return Err(Error::Validation(format!(
            "head count {heads} must divide embedding dimension {dim}"
        )));
    }
    Ok(())
}

/// `q + MHA(norm_q(q), norm_kv(kv))`, then the residual feed-forward.
pub fn cross_attention_block<F: Scalar>(
    g: &mut Graph<'_, F>,
    params: &AttentionParams,
    queries: Var,
    keys_values: Var,
) -> Result<Var> {
    let nq = params.query_norm.apply(g, queries);
    let nkv = match params.context_norm {
        Some(norm) => norm.apply(g, keys_values),
        None => params.query_norm.apply(g, keys_values),
    };
    let attended = params
        .projections
        .apply(g, nq, nkv, &AttentionPattern::Dense)?;
    let x = g.add(queries, attended);
    Ok(params.feed_forward.residual(g, x))
}

/// Self-attention variant of [`cross_attention_block`].
pub fn encoder_block<F: Scalar>(
    g: &mut Graph<'_, F>,
    params: &AttentionParams,
    tokens: Var,
) -> Result<Var> {
    let n = params.query_norm.apply(g, tokens);
    let attended = params.projections.apply(g, n, n, &AttentionPattern::Dense)?;
    let x = g.add(tokens, attended);
    Ok(params.feed_forward.residual(g, x))
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows<F: Scalar>(scores: &Array2<F>) -> Result<Array2<F>> {
    if scores.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("softmax input contains non-finite scores".into()));
    }
    let mut out = scores.clone();
    for mut row in out.outer_iter_mut() {
        let max = row.iter().cloned().fold(F::neg_infinity(), F::max);
        row.mapv_inplace(|v| (v - max).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    Ok(out)
}

fn check_tokens<F: Scalar>(queries: &TokenSet<F>, keys_values: &TokenSet<F>) -> Result<()> {
    if keys_values.is_empty() {
        return Err(Error::Validation("attention needs at least one key token".into()));
    }
    if queries.dim() != keys_values.dim() {
        return Err(Error::Validation(format!(
            "query dimension {} differs from key/value dimension {}",
            queries.dim(),
            keys_values.dim()
        )));
    }
    Ok(())
}

/// Eager multi-head attention (projections only, no normalization or residual).
pub fn multi_head_attention<F: Scalar>(
    store: &ParamStore<F>,
    params: &ProjectionParams,
    queries: &TokenSet<F>,
    keys_values: &TokenSet<F>,
) -> Result<TokenSet<F>> {
    check_tokens(queries, keys_values)?;
    let mut g = Graph::new(store);
    let q = g.input(queries.tokens.clone());
    let kv = g.input(keys_values.tokens.clone());
    let out = params.apply(&mut g, q, kv, &AttentionPattern::Dense)?;
    TokenSet::new(g.value(out).clone(), queries.roles.clone())
}

/// Eager [`cross_attention_block`].
pub fn cross_attention<F: Scalar>(
    store: &ParamStore<F>,
    params: &AttentionParams,
    queries: &TokenSet<F>,
    keys_values: &TokenSet<F>,
) -> Result<TokenSet<F>> {
    check_tokens(queries, keys_values)?;
    let mut g = Graph::new(store);
    let q = g.input(queries.tokens.clone());
    let kv = g.input(keys_values.tokens.clone());
    let out = cross_attention_block(&mut g, params, q, kv)?;
    TokenSet::new(g.value(out).clone(), queries.roles.clone())
}

/// Eager [`encoder_block`].
pub fn encode<F: Scalar>(
    store: &ParamStore<F>,
    params: &AttentionParams,
    tokens: &TokenSet<F>,
) -> Result<TokenSet<F>> {
    check_tokens(tokens, tokens)?;
    let mut g = Graph::new(store);
    let x = g.input(tokens.tokens.clone());
    let out = encoder_block(&mut g, params, x)?;
    TokenSet::new(g.value(out).clone(), tokens.roles.clone())
}

/// Arithmetic mean over tokens.
pub fn mean_pool<F: Scalar>(tokens: &TokenSet<F>) -> Result<Array1<F>> {
    if tokens.is_empty() {
        return Err(Error::Validation("cannot pool an empty token set".into()));
    }
    Ok(tokens
        .tokens
        .mean_axis(ndarray::Axis(0))
        .expect("non-empty token set"))
}
