//! Cross-attention with the plug-in human-centric key path.
//!
//! A cross-attention site projects latent rows to queries `Q` and text
//! embeddings to keys/values `K`, `V`. The HcP layer adds a second key
//! `K_h = φ(C)` produced by a small MLP; its map `M_h` is mixed with the base
//! map `M` as `M̂ = γ·M + (1−γ)·M_h` before multiplying `V`.
//!
//! Maps are stored as `[heads, P, N]`: for each head, one row per latent
//! position and one column per text token.

use ndarray::{s, Array1, Array2, Array3, ArrayView2, ArrayView3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{HcpError, Result};
use crate::tensor::{matmul, matmul_at, matmul_bt, Linear};

/// Width of each hidden MLP block of the HcP layer.
pub const DEFAULT_HCP_WIDTH: usize = 1024;
/// Number of hidden `affine → tanh` blocks in φ.
pub const HCP_HIDDEN_BLOCKS: usize = 3;
/// Standard deviation multiplier of φ's final projection at initialisation.
/// Small enough that the initial `M_h` is close to uniform.
pub const DEFAULT_HCP_INIT_SCALE: f64 = 0.1;
/// Default weight of the base map in the combination.
pub const DEFAULT_GAMMA: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossAttentionConfig {
    /// Projection width `d` of queries and keys (all heads together).
    pub latent_dim: usize,
    pub head_count: usize,
    /// Number of text tokens `N`.
    pub token_count: usize,
    /// Text embedding width `D`.
    pub embed_dim: usize,
    /// Number of latent positions `P = h·w` at this layer's scale.
    pub query_len: usize,
}

impl CrossAttentionConfig {
    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(HcpError::Config("latent_dim must be positive".into()));
        }
        if self.head_count == 0 {
            return Err(HcpError::Config("head_count must be at least 1".into()));
        }
        if self.latent_dim % self.head_count != 0 {
            return Err(HcpError::Config(format!(
                "latent_dim {} is not divisible by head_count {}",
                self.latent_dim, self.head_count
            )));
        }
        if self.token_count == 0 || self.embed_dim == 0 || self.query_len == 0 {
            return Err(HcpError::Config(
                "token_count, embed_dim and query_len must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.latent_dim / self.head_count
    }
}

/// Frozen projection weights of one cross-attention site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionWeights {
    /// `[channels, d]`
    pub w_q: Array2<f64>,
    /// `[D, d]`
    pub w_k: Array2<f64>,
    /// `[D, d]`
    pub w_v: Array2<f64>,
}

/// Trainable parameters of φ: three `affine → tanh` blocks followed by an
/// affine projection to the key width.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HcpLayerParams {
    pub blocks: Vec<Linear>,
    pub trainable: bool,
}

/// Gradients with the same layout as [`HcpLayerParams::blocks`].
#[derive(Debug, Clone, PartialEq)]
pub struct HcpGrads {
    pub blocks: Vec<Linear>,
}

/// Activations kept from φ's forward pass for backpropagation.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input of every affine block; entries `1..` are tanh outputs.
    inputs: Vec<Array2<f64>>,
}

impl HcpLayerParams {
    pub fn new<R: Rng + ?Sized>(
        rng: &mut R,
        embed_dim: usize,
        width: usize,
        key_dim: usize,
        init_scale: f64,
    ) -> Result<Self> {
        if embed_dim == 0 || width == 0 || key_dim == 0 {
            return Err(HcpError::Config(
                "HcP layer dimensions must be positive".into(),
            ));
        }
        let mut blocks = Vec::with_capacity(HCP_HIDDEN_BLOCKS + 1);
        let mut fan_in = embed_dim;
        for _ in 0..HCP_HIDDEN_BLOCKS {
            blocks.push(Linear::random(rng, fan_in, width, 1.0 / (fan_in as f64).sqrt()));
            fan_in = width;
        }
        blocks.push(Linear::random(
            rng,
            width,
            key_dim,
            init_scale / (width as f64).sqrt(),
        ));
        Ok(Self {
            blocks,
            trainable: true,
        })
    }

    /// Placeholder with no weights; any forward call fails.
    pub fn uninitialized() -> Self {
        Self {
            blocks: Vec::new(),
            trainable: true,
        }
    }

    pub fn is_initialized(&self) -> bool {
        self.blocks.len() == HCP_HIDDEN_BLOCKS + 1
    }

    pub fn embed_dim(&self) -> usize {
        self.blocks.first().map_or(0, Linear::input_dim)
    }

    pub fn key_dim(&self) -> usize {
        self.blocks.last().map_or(0, Linear::output_dim)
    }

    pub fn width(&self) -> usize {
        self.blocks.first().map_or(0, Linear::output_dim)
    }

    pub fn param_count(&self) -> usize {
        self.blocks
            .iter()
            .map(|b| b.weight.len() + b.bias.len())
            .sum()
    }

    /// Stable names for each parameter array, in storage order.
    pub fn array_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.blocks.len() * 2);
        for i in 0..self.blocks.len() {
            names.push(format!("block{i}.weight"));
            names.push(format!("block{i}.bias"));
        }
        names
    }

    /// Flattened copies of every parameter array, paired with its shape.
    pub fn flat_arrays(&self) -> Vec<(String, Vec<usize>, Vec<f64>)> {
        let mut out = Vec::with_capacity(self.blocks.len() * 2);
        for (i, b) in self.blocks.iter().enumerate() {
            out.push((
                format!("block{i}.weight"),
                b.weight.shape().to_vec(),
                b.weight.iter().copied().collect(),
            ));
            out.push((
                format!("block{i}.bias"),
                b.bias.shape().to_vec(),
                b.bias.iter().copied().collect(),
            ));
        }
        out
    }

    /// Rebuilds parameters from `(name, shape, data)` triples produced by
    /// [`flat_arrays`](Self::flat_arrays).
    pub fn from_flat_arrays(arrays: &[(String, Vec<usize>, Vec<f64>)]) -> Result<Self> {
        if arrays.len() % 2 != 0 || arrays.is_empty() {
            return Err(HcpError::Validation(
                "HcP parameter arrays must come in weight/bias pairs".into(),
            ));
        }
        let mut blocks = Vec::with_capacity(arrays.len() / 2);
        for (i, pair) in arrays.chunks(2).enumerate() {
            let (wn, ws, wd) = &pair[0];
            let (bn, bs, bd) = &pair[1];
            if wn != &format!("block{i}.weight") || bn != &format!("block{i}.bias") {
                return Err(HcpError::Validation(format!(
                    "unexpected HcP array names `{wn}`, `{bn}` for block {i}"
                )));
            }
            if ws.len() != 2 || bs.len() != 1 || ws[1] != bs[0] {
                return Err(HcpError::Validation(format!(
                    "inconsistent shapes for HcP block {i}: {ws:?}, {bs:?}"
                )));
            }
            let weight = Array2::from_shape_vec((ws[0], ws[1]), wd.clone())
                .map_err(|e| HcpError::Validation(e.to_string()))?;
            let bias = Array1::from_vec(bd.clone());
            blocks.push(Linear { weight, bias });
        }
        let params = Self {
            blocks,
            trainable: true,
        };
        if !params.is_initialized() {
            return Err(HcpError::Validation(format!(
                "expected {} HcP blocks, found {}",
                HCP_HIDDEN_BLOCKS + 1,
                params.blocks.len()
            )));
        }
        Ok(params)
    }

    pub fn forward(&self, c: ArrayView2<f64>) -> Result<(Array2<f64>, MlpCache)> {
        if !self.is_initialized() {
            return Err(HcpError::State("HcP layer parameters are not initialized".into()));
        }
        if c.ncols() != self.embed_dim() {
            return Err(HcpError::shape(
                "hcp_key: embedding vs HcP input",
                c.shape(),
                self.blocks[0].weight.shape(),
            ));
        }
        let last = self.blocks.len() - 1;
        let mut inputs = Vec::with_capacity(self.blocks.len());
        let mut x = c.to_owned();
        for block in &self.blocks[..last] {
            let mut y = block.forward(x.view())?;
            y.mapv_inplace(f64::tanh);
            inputs.push(x);
            x = y;
        }
        let out = self.blocks[last].forward(x.view())?;
        inputs.push(x);
        Ok((out, MlpCache { inputs }))
    }

    /// Backpropagates `d_out = ∂L/∂K_h` through φ.
    pub fn backward(&self, cache: &MlpCache, d_out: ArrayView2<f64>) -> Result<HcpGrads> {
        let n = self.blocks.len();
        let mut grads: Vec<Linear> = Vec::with_capacity(n);
        let mut d = d_out.to_owned();
        for i in (0..n).rev() {
            let x = &cache.inputs[i];
            let gw = matmul_at(x.view(), d.view())?;
            let gb = d.sum_axis(Axis(0));
            if i > 0 {
                let mut dx = matmul_bt(d.view(), self.blocks[i].weight.view())?;
                // x is the tanh output of the previous block
                ndarray::Zip::from(&mut dx)
                    .and(x)
                    .for_each(|g, &a| *g *= 1.0 - a * a);
                d = dx;
            }
            grads.push(Linear {
                weight: gw,
                bias: gb,
            });
        }
        grads.reverse();
        Ok(HcpGrads { blocks: grads })
    }
}

impl HcpGrads {
    pub fn zeros_like(params: &HcpLayerParams) -> Self {
        Self {
            blocks: params
                .blocks
                .iter()
                .map(|b| Linear::zeros(b.input_dim(), b.output_dim()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &HcpGrads) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            a.weight += &b.weight;
            a.bias += &b.bias;
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for b in &mut self.blocks {
            b.weight *= factor;
            b.bias *= factor;
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.blocks
            .iter()
            .map(|b| b.weight.iter().chain(b.bias.iter()).map(|g| g * g).sum::<f64>())
            .sum()
    }

    pub fn is_zero(&self) -> bool {
        self.blocks
            .iter()
            .all(|b| b.weight.iter().chain(b.bias.iter()).all(|&g| g == 0.0))
    }
}

/// Base, human-centric and combined maps of one cross-attention call.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionMaps {
    pub base: Array3<f64>,
    pub human_centric: Array3<f64>,
    pub combined: Array3<f64>,
    pub gamma: f64,
}

impl AttentionMaps {
    /// Checks that every row of all three maps is a probability vector.
    pub fn check_row_stochastic(&self, tol: f64) -> Result<()> {
        for (name, m) in [
            ("base", &self.base),
            ("human_centric", &self.human_centric),
            ("combined", &self.combined),
        ] {
            check_rows(m.view(), tol).map_err(|e| HcpError::Numerical(format!("{name}: {e}")))?;
        }
        Ok(())
    }
}

pub fn check_rows(m: ArrayView3<f64>, tol: f64) -> std::result::Result<(), String> {
    for (h, head) in m.outer_iter().enumerate() {
        for (p, row) in head.outer_iter().enumerate() {
            let sum: f64 = row.sum();
            if (sum - 1.0).abs() > tol {
                return Err(format!("row (head {h}, query {p}) sums to {sum}"));
            }
            if row.iter().any(|&x| !(x >= 0.0)) {
                return Err(format!("row (head {h}, query {p}) has a negative entry"));
            }
        }
    }
    Ok(())
}

/// `Q = z_in · W_q`.
pub fn project_queries(z_in: ArrayView2<f64>, w_q: ArrayView2<f64>) -> Result<Array2<f64>> {
    if z_in.ncols() != w_q.nrows() {
        return Err(HcpError::shape("project_queries: z_in vs W_q", z_in.shape(), w_q.shape()));
    }
    matmul(z_in, w_q)
}

/// `K = C · W_k`, `V = C · W_v`.
pub fn project_text_kv(
    c: ArrayView2<f64>,
    w_k: ArrayView2<f64>,
    w_v: ArrayView2<f64>,
) -> Result<(Array2<f64>, Array2<f64>)> {
    if c.ncols() != w_k.nrows() {
        return Err(HcpError::shape("project_text_kv: C vs W_k", c.shape(), w_k.shape()));
    }
    if c.ncols() != w_v.nrows() {
        return Err(HcpError::shape("project_text_kv: C vs W_v", c.shape(), w_v.shape()));
    }
    Ok((matmul(c, w_k)?, matmul(c, w_v)?))
}

fn softmax_rows(mut logits: Array2<f64>) -> Array2<f64> {
    for mut row in logits.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
        row.mapv_inplace(|x| (x - max).exp());
        let sum = row.sum();
        row /= sum;
    }
    logits
}

/// Single-head map `softmax(Q·Kᵀ/√d)`.
pub fn attention_map(q: ArrayView2<f64>, k: ArrayView2<f64>) -> Result<Array2<f64>> {
    let d = q.ncols();
    if d == 0 {
        return Err(HcpError::Config("attention dimension d must be positive".into()));
    }
    if k.ncols() != d {
        return Err(HcpError::shape("attention_map: Q vs K", q.shape(), k.shape()));
    }
    let mut logits = matmul_bt(q, k)?;
    logits /= (d as f64).sqrt();
    Ok(softmax_rows(logits))
}

/// Per-head maps `[heads, P, N]`; head `h` uses columns
/// `h·d_h .. (h+1)·d_h` of `Q` and `K`.
pub fn multi_head_map(q: ArrayView2<f64>, k: ArrayView2<f64>, heads: usize) -> Result<Array3<f64>> {
    let d = q.ncols();
    if heads == 0 || d == 0 || d % heads != 0 {
        return Err(HcpError::Config(format!(
            "cannot split width {d} into {heads} heads"
        )));
    }
    if k.ncols() != d {
        return Err(HcpError::shape("attention_map: Q vs K", q.shape(), k.shape()));
    }
    let dh = d / heads;
    let (p, n) = (q.nrows(), k.nrows());
    let mut out = Array3::<f64>::zeros((heads, p, n));
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let m = attention_map(q.slice(cols), k.slice(cols))?;
        out.index_axis_mut(Axis(0), h).assign(&m);
    }
    Ok(out)
}

/// `M̂ = γ·M + (1−γ)·M_h`.
pub fn combine_maps(m: ArrayView3<f64>, m_h: ArrayView3<f64>, gamma: f64) -> Result<Array3<f64>> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(HcpError::Validation(format!(
            "combination weight gamma must lie in [0, 1], got {gamma}"
        )));
    }
    if m.shape() != m_h.shape() {
        return Err(HcpError::shape("combine_maps: M vs M_h", m.shape(), m_h.shape()));
    }
    let beta = 1.0 - gamma;
    let mut out = m.to_owned();
    ndarray::Zip::from(&mut out)
        .and(m_h)
        .for_each(|a, &b| *a = gamma * *a + beta * b);
    Ok(out)
}

/// Single-head output `M̂ · V`.
pub fn attention_output(v: ArrayView2<f64>, m_hat: ArrayView2<f64>) -> Result<Array2<f64>> {
    if m_hat.ncols() != v.nrows() {
        return Err(HcpError::shape("attention_output: M̂ vs V", m_hat.shape(), v.shape()));
    }
    matmul(m_hat, v)
}

/// Multi-head output: each head multiplies its own column block of `V`, and
/// the head outputs are concatenated back to width `d`.
pub fn multi_head_output(v: ArrayView2<f64>, m_hat: ArrayView3<f64>) -> Result<Array2<f64>> {
    let (heads, p, n) = m_hat.dim();
    let d = v.ncols();
    if n != v.nrows() || heads == 0 || d % heads != 0 {
        return Err(HcpError::shape("attention_output: M̂ vs V", m_hat.shape(), v.shape()));
    }
    let dh = d / heads;
    let mut out = Array2::<f64>::zeros((p, d));
    for h in 0..heads {
        let cols = s![.., h * dh..(h + 1) * dh];
        let z = attention_output(v.slice(cols), m_hat.index_axis(Axis(0), h))?;
        out.slice_mut(cols).assign(&z);
    }
    Ok(out)
}

/// `K_h = φ(C_h)`.
pub fn hcp_key(c_h: ArrayView2<f64>, params: &HcpLayerParams) -> Result<Array2<f64>> {
    params.forward(c_h).map(|(k, _)| k)
}

fn check_site(
    z_in: ArrayView2<f64>,
    c: ArrayView2<f64>,
    weights: &AttentionWeights,
    config: &CrossAttentionConfig,
) -> Result<()> {
    config.validate()?;
    if z_in.nrows() != config.query_len {
        return Err(HcpError::shape(
            "cross_attention: z_in rows vs query_len",
            z_in.shape(),
            &[config.query_len],
        ));
    }
    if c.nrows() != config.token_count || c.ncols() != config.embed_dim {
        return Err(HcpError::shape(
            "cross_attention: C vs (token_count, embed_dim)",
            c.shape(),
            &[config.token_count, config.embed_dim],
        ));
    }
    if weights.w_q.ncols() != config.latent_dim
        || weights.w_k.ncols() != config.latent_dim
        || weights.w_v.ncols() != config.latent_dim
    {
        return Err(HcpError::shape(
            "cross_attention: projection width vs latent_dim",
            weights.w_q.shape(),
            &[config.latent_dim],
        ));
    }
    Ok(())
}

/// Plain multi-head cross-attention without the HcP path.
pub fn cross_attention(
    z_in: ArrayView2<f64>,
    c: ArrayView2<f64>,
    weights: &AttentionWeights,
    config: &CrossAttentionConfig,
) -> Result<(Array2<f64>, Array3<f64>)> {
    check_site(z_in, c, weights, config)?;
    let q = project_queries(z_in, weights.w_q.view())?;
    let (k, v) = project_text_kv(c, weights.w_k.view(), weights.w_v.view())?;
    let m = multi_head_map(q.view(), k.view(), config.head_count)?;
    let z_out = multi_head_output(v.view(), m.view())?;
    Ok((z_out, m))
}

/// Everything produced by one HcP cross-attention call, kept for the
/// backward pass.
#[derive(Debug, Clone)]
pub struct HcpAttentionForward {
    pub q: Array2<f64>,
    pub v: Array2<f64>,
    pub maps: AttentionMaps,
    pub z_out: Array2<f64>,
    mlp: MlpCache,
}

pub fn hcp_cross_attention_traced(
    z_in: ArrayView2<f64>,
    c: ArrayView2<f64>,
    weights: &AttentionWeights,
    params: &HcpLayerParams,
    gamma: f64,
    config: &CrossAttentionConfig,
) -> Result<HcpAttentionForward> {
    check_site(z_in, c, weights, config)?;
    if !(0.0..=1.0).contains(&gamma) {
        return Err(HcpError::Validation(format!(
            "combination weight gamma must lie in [0, 1], got {gamma}"
        )));
    }
    let q = project_queries(z_in, weights.w_q.view())?;
    let (k, v) = project_text_kv(c, weights.w_k.view(), weights.w_v.view())?;
    let base = multi_head_map(q.view(), k.view(), config.head_count)?;
    let (k_h, mlp) = params.forward(c)?;
    if k_h.ncols() != config.latent_dim {
        return Err(HcpError::shape(
            "hcp_key output vs latent_dim",
            k_h.shape(),
            &[config.latent_dim],
        ));
    }
    let human_centric = multi_head_map(q.view(), k_h.view(), config.head_count)?;
    let combined = combine_maps(base.view(), human_centric.view(), gamma)?;
    let z_out = multi_head_output(v.view(), combined.view())?;
    Ok(HcpAttentionForward {
        q,
        v,
        maps: AttentionMaps {
            base,
            human_centric,
            combined,
            gamma,
        },
        z_out,
        mlp,
    })
}

/// Cross-attention with the HcP key path; returns the output and all maps.
pub fn hcp_cross_attention(
    z_in: ArrayView2<f64>,
    c: ArrayView2<f64>,
    weights: &AttentionWeights,
    params: &HcpLayerParams,
    gamma: f64,
    config: &CrossAttentionConfig,
) -> Result<(Array2<f64>, AttentionMaps)> {
    let fwd = hcp_cross_attention_traced(z_in, c, weights, params, gamma, config)?;
    Ok((fwd.z_out, fwd.maps))
}

/// Gradient sources reaching one HcP attention call.
#[derive(Debug, Clone, Copy, Default)]
pub struct AttentionGradInputs<'a> {
    /// `∂L/∂z_out`, `[P, d]`.
    pub d_z_out: Option<ArrayView2<'a, f64>>,
    /// Direct `∂L/∂M_h`, `[heads, P, N]`.
    pub d_human_centric: Option<ArrayView3<'a, f64>>,
    /// Direct `∂L/∂M̂`, `[heads, P, N]`.
    pub d_combined: Option<ArrayView3<'a, f64>>,
}

/// Backpropagates into φ's parameters. Only the `M_h` branch depends on φ,
/// so gradients through `M̂` are scaled by `1 − γ`.
pub fn hcp_attention_backward(
    fwd: &HcpAttentionForward,
    params: &HcpLayerParams,
    grads: AttentionGradInputs<'_>,
) -> Result<HcpGrads> {
    let (heads, p, n) = fwd.maps.human_centric.dim();
    let d = fwd.q.ncols();
    let dh = d / heads;
    let mut d_combined = Array3::<f64>::zeros((heads, p, n));
    if let Some(dz) = grads.d_z_out {
        if dz.dim() != (p, d) {
            return Err(HcpError::shape("backward: dz_out", dz.shape(), &[p, d]));
        }
        for h in 0..heads {
            let cols = s![.., h * dh..(h + 1) * dh];
            let dm = matmul_bt(dz.slice(cols), fwd.v.slice(cols))?;
            d_combined.index_axis_mut(Axis(0), h).assign(&dm);
        }
    }
    if let Some(extra) = grads.d_combined {
        if extra.dim() != (heads, p, n) {
            return Err(HcpError::shape("backward: dM̂", extra.shape(), &[heads, p, n]));
        }
        d_combined += &extra;
    }
    let mut d_mh = d_combined * (1.0 - fwd.maps.gamma);
    if let Some(extra) = grads.d_human_centric {
        if extra.dim() != (heads, p, n) {
            return Err(HcpError::shape("backward: dM_h", extra.shape(), &[heads, p, n]));
        }
        d_mh += &extra;
    }

    let scale = 1.0 / (dh as f64).sqrt();
    let mut d_kh = Array2::<f64>::zeros((n, d));
    for h in 0..heads {
        let m = fwd.maps.human_centric.index_axis(Axis(0), h);
        let g = d_mh.index_axis(Axis(0), h);
        let mut d_logits = Array2::<f64>::zeros((p, n));
        for row in 0..p {
            let inner: f64 = (0..n).map(|j| g[[row, j]] * m[[row, j]]).sum();
            for j in 0..n {
                d_logits[[row, j]] = m[[row, j]] * (g[[row, j]] - inner) * scale;
            }
        }
        let cols = s![.., h * dh..(h + 1) * dh];
        let dk = matmul_at(d_logits.view(), fwd.q.slice(cols))?;
        d_kh.slice_mut(cols).assign(&dk);
    }
    params.backward(&fwd.mlp, d_kh.view())
}
