//! Prompt conditioners: static prompts (CoOp), a global meta-net offset
//! (CoCoOp) and patch-level attention over the prompt tokens (CoPL), each
//! with a hand-derived backward pass.

use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{axpy, dot, sample_gaussian, softmax, Rng, Tensor};

/// Prompt token count used when nothing else is configured.
pub const DEFAULT_PROMPT_LEN: usize = 4;
/// Standard deviation of the prompt-token initialization.
pub const PROMPT_INIT_STD: f64 = 0.02;

pub const CHECKPOINT_MAGIC: &[u8; 5] = b"COPL1";

/// Names of the six learnable tensors, in checkpoint-independent report order.
pub const GROUP_NAMES: [&str; 6] = ["V", "W_a", "U1", "c1", "U2", "c2"];

pub fn default_meta_hidden(token_dim: usize) -> usize {
    (token_dim / 16).max(4)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Coop,
    Cocoop,
    Copl,
    CoplGlobal,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Coop, Method::Cocoop, Method::Copl, Method::CoplGlobal];

    pub fn name(self) -> &'static str {
        match self {
            Method::Coop => "coop",
            Method::Cocoop => "cocoop",
            Method::Copl => "copl",
            Method::CoplGlobal => "copl_global",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL.into_iter().find(|m| m.name() == s).ok_or_else(|| {
            Error::invalid(format!(
                "unknown method {s:?} (expected coop, cocoop, copl, copl_global)"
            ))
        })
    }
}

/// How per-patch context vectors are folded into the prompt offset.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PatchAggregation {
    #[default]
    Sum,
    Mean,
}

/// The `M × d` learnable context tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptSet {
    pub tokens: Tensor,
}

impl PromptSet {
    pub fn new(tokens: Tensor) -> Result<Self> {
        if tokens.shape().len() != 2 || tokens.rows() == 0 {
            return Err(Error::shape("prompt set must be a non-empty M x d matrix"));
        }
        Ok(Self { tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }

    pub fn token_dim(&self) -> usize {
        self.tokens.cols()
    }

    pub fn token(&self, i: usize) -> &[f64] {
        self.tokens.row(i)
    }
}

/// Two-layer ReLU network `h(s) = U2 · relu(U1 · s + c1) + c2`.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaNet {
    pub u1: Tensor,
    pub c1: Tensor,
    pub u2: Tensor,
    pub c2: Tensor,
}

impl MetaNet {
    pub fn zeros(input_dim: usize, hidden: usize, output_dim: usize) -> Self {
        Self {
            u1: Tensor::zeros(&[hidden, input_dim]),
            c1: Tensor::zeros(&[hidden]),
            u2: Tensor::zeros(&[output_dim, hidden]),
            c2: Tensor::zeros(&[output_dim]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.u1.cols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.c1.len()
    }

    pub fn output_dim(&self) -> usize {
        self.c2.len()
    }

    fn check(&self) -> Result<()> {
        let (h, i, o) = (self.hidden_dim(), self.input_dim(), self.output_dim());
        if self.u1.shape() != [h, i] || self.u2.shape() != [o, h] {
            return Err(Error::shape("meta-net weights inconsistent"));
        }
        Ok(())
    }

    /// Backpropagates `upstream` (one row per input row) into `grads` and
    /// returns the gradient with respect to the inputs.
    pub fn backward(&self, fwd: &MetaForward, upstream: &Tensor, grads: &mut MetaNet) -> Tensor {
        let mut d_input = Tensor::zeros(fwd.input.shape());
        for p in 0..fwd.input.rows() {
            let dout = upstream.row(p);
            let pre = fwd.pre.row(p);
            let act: Vec<f64> = pre.iter().map(|v| v.max(0.0)).collect();
            axpy(grads.c2.data_mut(), 1.0, dout);
            grads.u2.add_outer(1.0, dout, &act);
            let mut dpre = self.u2.matvec_t(dout);
            for (d, z) in dpre.iter_mut().zip(pre) {
                if *z <= 0.0 {
                    *d = 0.0;
                }
            }
            axpy(grads.c1.data_mut(), 1.0, &dpre);
            grads.u1.add_outer(1.0, &dpre, fwd.input.row(p));
            d_input.row_mut(p).copy_from_slice(&self.u1.matvec_t(&dpre));
        }
        d_input
    }
}

/// Activations of a meta-net pass over a batch of rows.
#[derive(Clone, Debug, PartialEq)]
pub struct MetaForward {
    pub input: Tensor,
    pub pre: Tensor,
    pub output: Tensor,
}

/// Applies the meta-net to every row of `patches`.
pub fn meta_transform(net: &MetaNet, patches: &Tensor) -> Result<MetaForward> {
    net.check()?;
    if patches.rows() == 0 {
        return Err(Error::NoPatches);
    }
    if patches.cols() != net.input_dim() {
        return Err(Error::shape(format!(
            "patch width {} != meta-net input {}",
            patches.cols(),
            net.input_dim()
        )));
    }
    let p = patches.rows();
    let mut pre = Vec::with_capacity(p * net.hidden_dim());
    let mut out = Vec::with_capacity(p * net.output_dim());
    for row in patches.iter_rows() {
        let mut z = net.u1.matvec(row);
        axpy(&mut z, 1.0, net.c1.data());
        let act: Vec<f64> = z.iter().map(|v| v.max(0.0)).collect();
        let mut o = net.u2.matvec(&act);
        axpy(&mut o, 1.0, net.c2.data());
        pre.extend(z);
        out.extend(o);
    }
    Ok(MetaForward {
        input: patches.clone(),
        pre: Tensor::matrix(p, net.hidden_dim(), pre)?,
        output: Tensor::matrix(p, net.output_dim(), out)?,
    })
}

/// Weight vector of the content function over `[s_p; v_i]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AlignmentParams {
    pub w_a: Tensor,
}

impl AlignmentParams {
    pub fn zeros(token_dim: usize) -> Self {
        Self {
            w_a: Tensor::zeros(&[2 * token_dim]),
        }
    }

    pub fn new(w_a: Vec<f64>) -> Result<Self> {
        if w_a.is_empty() || !w_a.len().is_multiple_of(2) {
            return Err(Error::shape("alignment weights must have even length 2d"));
        }
        Ok(Self {
            w_a: Tensor::vector(w_a)?,
        })
    }

    pub fn token_dim(&self) -> usize {
        self.w_a.len() / 2
    }

    fn halves(&self) -> (&[f64], &[f64]) {
        self.w_a.data().split_at(self.token_dim())
    }
}

/// `tanh(W_a · [s_p; v_i])`.
pub fn score(s_p: &[f64], v_i: &[f64], params: &AlignmentParams) -> Result<f64> {
    let d = params.token_dim();
    if s_p.len() != d || v_i.len() != d {
        return Err(Error::shape(format!(
            "score inputs of length {} and {} against 2d = {}",
            s_p.len(),
            v_i.len(),
            2 * d
        )));
    }
    let (ws, wv) = params.halves();
    Ok((dot(ws, s_p) + dot(wv, v_i)).tanh())
}

/// Softmax over prompt tokens of the content scores for one patch.
pub fn align(s_p: &[f64], prompts: &PromptSet, params: &AlignmentParams) -> Result<Vec<f64>> {
    let scores = (0..prompts.len())
        .map(|i| score(s_p, prompts.token(i), params))
        .collect::<Result<Vec<_>>>()?;
    softmax(&scores)
}

/// Attention-weighted sum of prompt tokens.
pub fn context(a_p: &[f64], prompts: &PromptSet) -> Result<Vec<f64>> {
    if a_p.len() != prompts.len() {
        return Err(Error::shape(format!(
            "{} attention weights for {} prompts",
            a_p.len(),
            prompts.len()
        )));
    }
    let mut c = vec![0.0; prompts.token_dim()];
    for (i, &a) in a_p.iter().enumerate() {
        axpy(&mut c, a, prompts.token(i));
    }
    Ok(c)
}

/// Plain context optimization: prompts do not depend on the image.
pub fn condition_coop(prompts: &PromptSet) -> Tensor {
    prompts.tokens.clone()
}

#[derive(Clone, Debug)]
pub struct CocoopOutput {
    pub conditioned: Tensor,
    pub meta: MetaForward,
}

/// `v_m(x) = v_m + h(x)` for a single global input vector.
pub fn condition_cocoop(x: &[f64], prompts: &PromptSet, net: &MetaNet) -> Result<CocoopOutput> {
    if net.output_dim() != prompts.token_dim() {
        return Err(Error::shape("meta-net output width differs from prompt width"));
    }
    let input = Tensor::matrix(1, x.len(), x.to_vec())?;
    let meta = meta_transform(net, &input)?;
    let offset = meta.output.row(0);
    let mut conditioned = prompts.tokens.clone();
    for m in 0..prompts.len() {
        axpy(conditioned.row_mut(m), 1.0, offset);
    }
    Ok(CocoopOutput { conditioned, meta })
}

impl CocoopOutput {
    pub fn backward(&self, net: &MetaNet, upstream: &Tensor, grads: &mut PromptParams) -> Result<()> {
        grads.prompts.tokens.add_scaled(1.0, upstream)?;
        let mut offset_grad = vec![0.0; upstream.cols()];
        for row in upstream.iter_rows() {
            axpy(&mut offset_grad, 1.0, row);
        }
        let offset_grad = Tensor::matrix(1, upstream.cols(), offset_grad)?;
        net.backward(&self.meta, &offset_grad, &mut grads.meta);
        Ok(())
    }
}

/// Intermediate values kept for the CoPL backward pass.
#[derive(Clone, Debug)]
pub struct CoplCache {
    pub meta: MetaForward,
    pub scores: Tensor,
    pub aggregation: PatchAggregation,
}

#[derive(Clone, Debug)]
pub struct ConditionerOutput {
    /// `M × d` conditioned prompts.
    pub conditioned: Tensor,
    /// `P × M` attention of each patch over the prompt tokens.
    pub attention: Tensor,
    /// `P × d` context vectors.
    pub context: Tensor,
    pub cache: CoplCache,
}

/// Patch-conditioned prompts: each patch token attends over the prompts and
/// the resulting context vectors are added to every prompt token.
pub fn condition_copl(
    patches: &Tensor,
    prompts: &PromptSet,
    net: &MetaNet,
    params: &AlignmentParams,
    aggregation: PatchAggregation,
) -> Result<ConditionerOutput> {
    let d = prompts.token_dim();
    if net.output_dim() != d || params.token_dim() != d {
        return Err(Error::shape(format!(
            "prompt width {d}, meta-net output {}, alignment half-width {}",
            net.output_dim(),
            params.token_dim()
        )));
    }
    let meta = meta_transform(net, patches)?;
    let p_count = patches.rows();
    let m_count = prompts.len();
    let mut scores = Vec::with_capacity(p_count * m_count);
    let mut attention = Vec::with_capacity(p_count * m_count);
    let mut ctx = Vec::with_capacity(p_count * d);
    for token in meta.output.iter_rows() {
        for i in 0..m_count {
            scores.push(score(token, prompts.token(i), params)?);
        }
        let a_p = align(token, prompts, params)?;
        let c_p = context(&a_p, prompts)?;
        attention.extend(a_p);
        ctx.extend(c_p);
    }
    let context = Tensor::matrix(p_count, d, ctx)?;
    let mut offset = order_free_column_sums(&context);
    if aggregation == PatchAggregation::Mean {
        offset.iter_mut().for_each(|v| *v /= p_count as f64);
    }
    let mut conditioned = prompts.tokens.clone();
    for m in 0..m_count {
        axpy(conditioned.row_mut(m), 1.0, &offset);
    }
    Ok(ConditionerOutput {
        conditioned,
        attention: Tensor::matrix(p_count, m_count, attention)?,
        context,
        cache: CoplCache {
            meta,
            scores: Tensor::matrix(p_count, m_count, scores)?,
            aggregation,
        },
    })
}

/// Column sums taken in sorted order, so permuting rows leaves every bit
/// of the result unchanged.
fn order_free_column_sums(t: &Tensor) -> Vec<f64> {
    let mut column = Vec::with_capacity(t.rows());
    (0..t.cols())
        .map(|k| {
            column.clear();
            column.extend(t.iter_rows().map(|r| r[k]));
            column.sort_unstable_by(f64::total_cmp);
            column.iter().sum()
        })
        .collect()
}

impl ConditionerOutput {
    /// Accumulates gradients of `upstream · conditioned` into `grads`.
    ///
    /// The prompt tokens are reached three ways: the residual term, the
    /// context weighting and the content scores.
    pub fn backward(
        &self,
        prompts: &PromptSet,
        net: &MetaNet,
        params: &AlignmentParams,
        upstream: &Tensor,
        grads: &mut PromptParams,
    ) -> Result<()> {
        if upstream.shape() != self.conditioned.shape() {
            return Err(Error::shape("upstream gradient must match conditioned prompts"));
        }
        let d = prompts.token_dim();
        let m_count = prompts.len();
        let p_count = self.attention.rows();
        grads.prompts.tokens.add_scaled(1.0, upstream)?;

        let mut d_offset = vec![0.0; d];
        for row in upstream.iter_rows() {
            axpy(&mut d_offset, 1.0, row);
        }
        if self.cache.aggregation == PatchAggregation::Mean {
            d_offset.iter_mut().for_each(|v| *v /= p_count as f64);
        }

        let (ws, wv) = params.halves();
        let tokens = &self.cache.meta.output;
        let mut d_tokens = Tensor::zeros(tokens.shape());
        let mut d_wa = vec![0.0; 2 * d];
        for p in 0..p_count {
            let a_p = self.attention.row(p);
            // dc_p = d_offset for every patch
            let da: Vec<f64> = (0..m_count).map(|i| dot(prompts.token(i), &d_offset)).collect();
            let mean_da: f64 = a_p.iter().zip(&da).map(|(a, g)| a * g).sum();
            for i in 0..m_count {
                axpy(grads.prompts.tokens.row_mut(i), a_p[i], &d_offset);
                let dscore = a_p[i] * (da[i] - mean_da);
                let s = self.cache.scores.row(p)[i];
                let de = dscore * (1.0 - s * s);
                if de == 0.0 {
                    continue;
                }
                axpy(&mut d_wa[..d], de, tokens.row(p));
                axpy(&mut d_wa[d..], de, prompts.token(i));
                axpy(d_tokens.row_mut(p), de, ws);
                axpy(grads.prompts.tokens.row_mut(i), de, wv);
            }
        }
        axpy(grads.align.w_a.data_mut(), 1.0, &d_wa);
        net.backward(&self.cache.meta, &d_tokens, &mut grads.meta);
        Ok(())
    }
}

/// Replaces every patch with the mean patch, removing locality while
/// keeping the attention machinery.
pub fn globalize_patches(patches: &Tensor) -> Result<Tensor> {
    if patches.rows() == 0 {
        return Err(Error::NoPatches);
    }
    let mean = patches.mean_rows();
    let rows = vec![mean; patches.rows()];
    Tensor::from_rows(&rows)
}

/// Output of any conditioner with whatever it needs for backward.
#[derive(Clone, Debug)]
pub enum Conditioned {
    Coop(Tensor),
    Cocoop(CocoopOutput),
    Copl(ConditionerOutput),
}

impl Conditioned {
    pub fn prompts(&self) -> &Tensor {
        match self {
            Conditioned::Coop(t) => t,
            Conditioned::Cocoop(o) => &o.conditioned,
            Conditioned::Copl(o) => &o.conditioned,
        }
    }

    pub fn backward(&self, params: &PromptParams, upstream: &Tensor, grads: &mut PromptParams) -> Result<()> {
        match self {
            Conditioned::Coop(_) => grads.prompts.tokens.add_scaled(1.0, upstream),
            Conditioned::Cocoop(o) => o.backward(&params.meta, upstream, grads),
            Conditioned::Copl(o) => o.backward(&params.prompts, &params.meta, &params.align, upstream, grads),
        }
    }
}

/// Runs the conditioner selected by `method` on one image's patches.
pub fn condition(
    method: Method,
    params: &PromptParams,
    patches: &Tensor,
    aggregation: PatchAggregation,
) -> Result<Conditioned> {
    match method {
        Method::Coop => Ok(Conditioned::Coop(condition_coop(&params.prompts))),
        Method::Cocoop => {
            if patches.rows() == 0 {
                return Err(Error::NoPatches);
            }
            let x = patches.mean_rows();
            condition_cocoop(&x, &params.prompts, &params.meta).map(Conditioned::Cocoop)
        }
        Method::Copl => {
            condition_copl(patches, &params.prompts, &params.meta, &params.align, aggregation).map(Conditioned::Copl)
        }
        Method::CoplGlobal => {
            let global = globalize_patches(patches)?;
            condition_copl(&global, &params.prompts, &params.meta, &params.align, aggregation).map(Conditioned::Copl)
        }
    }
}

/// Sizes of the learnable state.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PromptDims {
    pub prompt_len: usize,
    pub token_dim: usize,
    pub image_dim: usize,
    pub meta_hidden: usize,
}

/// Every learnable tensor: prompt tokens, meta-net and alignment weights.
///
/// The same type holds gradients and momentum buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptParams {
    pub prompts: PromptSet,
    pub meta: MetaNet,
    pub align: AlignmentParams,
}

impl PromptParams {
    pub fn zeros(dims: PromptDims) -> Self {
        Self {
            prompts: PromptSet {
                tokens: Tensor::zeros(&[dims.prompt_len, dims.token_dim]),
            },
            meta: MetaNet::zeros(dims.image_dim, dims.meta_hidden, dims.token_dim),
            align: AlignmentParams::zeros(dims.token_dim),
        }
    }

    /// Seeded initialization: prompts `N(0, 0.02²)`, meta-net and alignment
    /// weights `N(0, 1/fan_in)`, biases zero.
    pub fn init(dims: PromptDims, seed: u64) -> Self {
        let mut rng = Rng::derived(seed, 0x7072_6f6d);
        let tokens =
            sample_gaussian(&mut rng, &[dims.prompt_len, dims.token_dim], 0.0, PROMPT_INIT_STD).expect("finite init");
        let mut fan_in = |rows: usize, cols: usize| {
            sample_gaussian(&mut rng, &[rows, cols], 0.0, 1.0 / (cols as f64).sqrt()).expect("finite init")
        };
        let u1 = fan_in(dims.meta_hidden, dims.image_dim);
        let u2 = fan_in(dims.token_dim, dims.meta_hidden);
        let w_a = fan_in(1, 2 * dims.token_dim);
        Self {
            prompts: PromptSet { tokens },
            meta: MetaNet {
                u1,
                c1: Tensor::zeros(&[dims.meta_hidden]),
                u2,
                c2: Tensor::zeros(&[dims.token_dim]),
            },
            align: AlignmentParams {
                w_a: Tensor::vector(w_a.into_data()).expect("finite init"),
            },
        }
    }

    pub fn dims(&self) -> PromptDims {
        PromptDims {
            prompt_len: self.prompts.len(),
            token_dim: self.prompts.token_dim(),
            image_dim: self.meta.input_dim(),
            meta_hidden: self.meta.hidden_dim(),
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.dims())
    }

    /// Tensors in [`GROUP_NAMES`] order.
    pub fn groups(&self) -> [&Tensor; 6] {
        [
            &self.prompts.tokens,
            &self.align.w_a,
            &self.meta.u1,
            &self.meta.c1,
            &self.meta.u2,
            &self.meta.c2,
        ]
    }

    pub fn groups_mut(&mut self) -> [&mut Tensor; 6] {
        [
            &mut self.prompts.tokens,
            &mut self.align.w_a,
            &mut self.meta.u1,
            &mut self.meta.c1,
            &mut self.meta.u2,
            &mut self.meta.c2,
        ]
    }

    pub fn to_groups(&self) -> Vec<Tensor> {
        self.groups().into_iter().cloned().collect()
    }

    pub fn from_groups(groups: &[Tensor]) -> Result<Self> {
        let [v, w_a, u1, c1, u2, c2] = groups else {
            return Err(Error::shape("expected six parameter groups"));
        };
        let out = Self {
            prompts: PromptSet::new(v.clone())?,
            meta: MetaNet {
                u1: u1.clone(),
                c1: c1.clone(),
                u2: u2.clone(),
                c2: c2.clone(),
            },
            align: AlignmentParams { w_a: w_a.clone() },
        };
        out.meta.check()?;
        Ok(out)
    }

    pub fn is_finite(&self) -> bool {
        self.groups().iter().all(|t| t.is_finite())
    }

    /// Serializes as a `COPL1` checkpoint.
    pub fn to_bytes(&self) -> Vec<u8> {
        let dims = self.dims();
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        for dim in [dims.prompt_len, dims.token_dim, dims.image_dim, dims.meta_hidden] {
            out.extend_from_slice(&(dim as u32).to_le_bytes());
        }
        for t in [
            &self.prompts.tokens,
            &self.meta.u1,
            &self.meta.c1,
            &self.meta.u2,
            &self.meta.c2,
            &self.align.w_a,
        ] {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let header = CHECKPOINT_MAGIC.len() + 16;
        if bytes.len() < CHECKPOINT_MAGIC.len() || &bytes[..CHECKPOINT_MAGIC.len()] != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic);
        }
        if bytes.len() < header {
            return Err(Error::Truncated {
                needed: header,
                found: bytes.len(),
            });
        }
        let dim = |i: usize| {
            let at = CHECKPOINT_MAGIC.len() + 4 * i;
            u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize
        };
        let (m, d, d_img, h) = (dim(0), dim(1), dim(2), dim(3));
        if m == 0 || d == 0 || d_img == 0 || h == 0 {
            return Err(Error::DimInconsistent(format!(
                "zero dimension in header (M={m}, d={d}, d_img={d_img}, h_m={h})"
            )));
        }
        let shapes: [Vec<usize>; 6] = [vec![m, d], vec![h, d_img], vec![h], vec![d, h], vec![d], vec![2 * d]];
        let floats: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        let needed = header + 8 * floats;
        if bytes.len() < needed {
            return Err(Error::Truncated {
                needed,
                found: bytes.len(),
            });
        }
        if bytes.len() > needed {
            return Err(Error::DimInconsistent(format!(
                "{} trailing bytes after parameters",
                bytes.len() - needed
            )));
        }
        let mut at = header;
        let mut tensors = Vec::with_capacity(6);
        for shape in shapes {
            let n: usize = shape.iter().product();
            let data = bytes[at..at + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            at += 8 * n;
            tensors.push(Tensor::new(shape, data)?);
        }
        let [v, u1, c1, u2, c2, w_a] = <[Tensor; 6]>::try_from(tensors).expect("six tensors");
        Ok(Self {
            prompts: PromptSet { tokens: v },
            meta: MetaNet { u1, c1, u2, c2 },
            align: AlignmentParams { w_a },
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut file = std::fs::File::create(path)?;
        file.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::reference;
    use crate::numerics::{grad_check, DoubleDouble, Real, Rng};
    use proptest::prelude::*;

    fn dims(m: usize, d: usize, d_img: usize, h: usize) -> PromptDims {
        PromptDims {
            prompt_len: m,
            token_dim: d,
            image_dim: d_img,
            meta_hidden: h,
        }
    }

    fn random_params(seed: u64, dims: PromptDims) -> PromptParams {
        let mut rng = Rng::new(seed);
        let mut p = PromptParams::zeros(dims);
        for t in p.groups_mut() {
            let r = sample_gaussian(&mut rng, t.shape(), 0.0, 0.4).unwrap();
            *t = r;
        }
        p
    }

    fn random_patches(seed: u64, p: usize, d_img: usize) -> Tensor {
        sample_gaussian(&mut Rng::new(seed), &[p, d_img], 0.0, 1.0).unwrap()
    }

    #[test]
    fn meta_transform_zero_net_returns_bias() {
        let mut net = MetaNet::zeros(3, 4, 2);
        net.c2 = Tensor::vector(vec![0.5, -0.25]).unwrap();
        let out = meta_transform(&net, &random_patches(1, 5, 3)).unwrap();
        for row in out.output.iter_rows() {
            assert_eq!(row, &[0.5, -0.25]);
        }
    }

    #[test]
    fn meta_transform_relu_dead_zone() {
        let mut net = MetaNet::zeros(3, 4, 2);
        net.u1 = Tensor::filled(&[4, 3], -1.0);
        net.u2 = Tensor::filled(&[2, 4], 3.0);
        net.c2 = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let patches = Tensor::filled(&[2, 3], 0.4);
        let out = meta_transform(&net, &patches).unwrap();
        for row in out.output.iter_rows() {
            assert_eq!(row, &[1.0, 2.0]);
        }
    }

    #[test]
    fn meta_transform_dimension_mismatch() {
        let net = MetaNet::zeros(3, 4, 2);
        assert!(meta_transform(&net, &random_patches(0, 2, 5)).is_err());
    }

    #[test]
    fn meta_backward_matches_finite_differences() {
        for seed in 0..10 {
            let p = random_params(seed, dims(2, 3, 4, 5));
            let patches = random_patches(50 + seed, 3, 4);
            let upstream = random_patches(90 + seed, 3, 3);
            let fwd = meta_transform(&p.meta, &patches).unwrap();
            let mut g = p.zeros_like();
            let d_patches = p.meta.backward(&fwd, &upstream, &mut g.meta);
            let objective = |t: &[Tensor]| {
                let net = MetaNet {
                    u1: t[0].clone(),
                    c1: t[1].clone(),
                    u2: t[2].clone(),
                    c2: t[3].clone(),
                };
                let out = meta_transform(&net, &t[4]).unwrap();
                dot(out.output.data(), upstream.data())
            };
            let params = [
                p.meta.u1.clone(),
                p.meta.c1.clone(),
                p.meta.u2.clone(),
                p.meta.c2.clone(),
                patches,
            ];
            let analytic = [g.meta.u1, g.meta.c1, g.meta.u2, g.meta.c2, d_patches];
            let r = grad_check(objective, &params, &analytic, 1e-5, 1e-6).unwrap();
            assert!(r.pass, "seed {seed}: {r:?}");
        }
    }

    #[test]
    fn score_examples() {
        let zero = AlignmentParams::zeros(2);
        assert_eq!(score(&[1.0, 2.0], &[3.0, 4.0], &zero).unwrap(), 0.0);
        let ones = AlignmentParams::new(vec![1.0; 4]).unwrap();
        let s = score(&[1.0, 0.0], &[0.0, 1.0], &ones).unwrap();
        assert!((s - 0.964_027_58).abs() < 1e-8);
        let neg = AlignmentParams::new(vec![-1.0; 4]).unwrap();
        assert_eq!(score(&[1.0, 0.0], &[0.0, 1.0], &neg).unwrap(), -s);
        assert!(score(&[1.0], &[0.0, 1.0], &ones).is_err());
    }

    #[test]
    fn align_examples() {
        let prompts = PromptSet::new(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap()).unwrap();
        let a = align(&[0.3, 0.2], &prompts, &AlignmentParams::zeros(2)).unwrap();
        for v in a {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let single = PromptSet::new(Tensor::from_rows(&[[1.0, 2.0]]).unwrap()).unwrap();
        let params = AlignmentParams::new(vec![0.3, -0.1, 0.8, 0.2]).unwrap();
        assert_eq!(align(&[0.5, 0.5], &single, &params).unwrap(), vec![1.0]);

        // scores tanh(±atanh(0.5)) = ±0.5
        let t = 0.5f64.atanh();
        let params = AlignmentParams::new(vec![0.0, 0.0, t, 0.0]).unwrap();
        let two = PromptSet::new(Tensor::from_rows(&[[1.0, 0.0], [-1.0, 0.0]]).unwrap()).unwrap();
        let a = align(&[0.0, 0.0], &two, &params).unwrap();
        assert!((a[0] - 0.731_058_58).abs() < 1e-8);
        assert!((a[1] - 0.268_941_42).abs() < 1e-8);
    }

    #[test]
    fn context_examples() {
        let basis = PromptSet::new(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap()).unwrap();
        assert_eq!(context(&[0.25, 0.75], &basis).unwrap(), vec![0.25, 0.75]);
        assert_eq!(context(&[0.0, 1.0], &basis).unwrap(), vec![0.0, 1.0]);
        let v = PromptSet::new(Tensor::from_rows(&[[2.0, 0.0], [0.0, 4.0]]).unwrap()).unwrap();
        assert_eq!(context(&[0.5, 0.5], &v).unwrap(), vec![1.0, 2.0]);
        assert!(context(&[1.0], &v).is_err());
    }

    #[test]
    fn copl_single_prompt_closed_form() {
        let prompts = PromptSet::new(Tensor::from_rows(&[[1.0, 2.0]]).unwrap()).unwrap();
        let p = random_params(3, dims(1, 2, 3, 4));
        let out = condition_copl(
            &random_patches(4, 2, 3),
            &prompts,
            &p.meta,
            &p.align,
            PatchAggregation::Sum,
        )
        .unwrap();
        assert_eq!(out.conditioned.data(), &[3.0, 6.0]);
    }

    #[test]
    fn copl_uniform_attention_closed_form() {
        let prompts = PromptSet::new(Tensor::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap()).unwrap();
        let p = random_params(5, dims(2, 2, 3, 4));
        let out = condition_copl(
            &random_patches(6, 3, 3),
            &prompts,
            &p.meta,
            &AlignmentParams::zeros(2),
            PatchAggregation::Sum,
        )
        .unwrap();
        let expected = [2.5, 1.5, 1.5, 2.5];
        for (a, b) in out.conditioned.data().iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn copl_mean_aggregation_divides_offset() {
        let prompts = PromptSet::new(Tensor::from_rows(&[[1.0, 2.0]]).unwrap()).unwrap();
        let p = random_params(3, dims(1, 2, 3, 4));
        let out = condition_copl(
            &random_patches(4, 5, 3),
            &prompts,
            &p.meta,
            &p.align,
            PatchAggregation::Mean,
        )
        .unwrap();
        assert_eq!(out.conditioned.data(), &[2.0, 4.0]);
    }

    #[test]
    fn cocoop_examples() {
        let mut net = MetaNet::zeros(3, 4, 2);
        net.c2 = Tensor::vector(vec![0.5, 0.5]).unwrap();
        let prompts = PromptSet::new(Tensor::from_rows(&[[1.0, 0.0]]).unwrap()).unwrap();
        let out = condition_cocoop(&[0.1, 0.2, 0.3], &prompts, &net).unwrap();
        assert_eq!(out.conditioned.data(), &[1.5, 0.5]);

        let zero = MetaNet::zeros(3, 4, 2);
        let v = PromptSet::new(Tensor::from_rows(&[[1.0, -2.0], [0.5, 3.0]]).unwrap()).unwrap();
        assert_eq!(
            condition_cocoop(&[1.0, 2.0, 3.0], &v, &zero).unwrap().conditioned,
            v.tokens
        );
        assert!(condition_cocoop(&[1.0, 2.0], &v, &zero).is_err());
    }

    #[test]
    fn coop_is_identity() {
        let p = random_params(8, dims(3, 4, 4, 4));
        let a = condition(Method::Coop, &p, &random_patches(1, 2, 4), PatchAggregation::Sum).unwrap();
        let b = condition(Method::Coop, &p, &random_patches(2, 2, 4), PatchAggregation::Sum).unwrap();
        assert_eq!(a.prompts(), &p.prompts.tokens);
        assert_eq!(a.prompts(), b.prompts());
        let upstream = random_patches(3, 3, 4);
        let mut g = p.zeros_like();
        a.backward(&p, &upstream, &mut g).unwrap();
        assert_eq!(g.prompts.tokens, upstream);
        assert!(g.meta.u1.data().iter().all(|v| *v == 0.0));
    }

    fn conditioner_objective(
        method: Method,
        patches: &Tensor,
        upstream: &Tensor,
        agg: PatchAggregation,
    ) -> impl Fn(&[Tensor]) -> DoubleDouble {
        let upstream = upstream.clone();
        let patches = patches.clone();
        move |t: &[Tensor]| {
            let rows = reference::conditioned::<DoubleDouble>(method, agg, t, &patches);
            let mut total = DoubleDouble::zero();
            for (row, up) in rows.iter().zip(upstream.iter_rows()) {
                total += reference::dot(row, &reference::lift(up));
            }
            total
        }
    }

    #[test]
    fn reference_conditioner_agrees() {
        for method in Method::ALL {
            for agg in [PatchAggregation::Sum, PatchAggregation::Mean] {
                let p = random_params(3, dims(3, 5, 3, 4));
                let patches = random_patches(4, 4, 3);
                let c = condition(method, &p, &patches, agg).unwrap();
                let r = reference::conditioned::<f64>(method, agg, &p.to_groups(), &patches);
                for (a, b) in c.prompts().data().iter().zip(r.concat()) {
                    assert!((a - b).abs() <= 1e-12, "{method} {agg:?}");
                }
            }
        }
    }

    #[test]
    fn conditioner_backward_matches_finite_differences() {
        for method in [Method::Cocoop, Method::Copl, Method::CoplGlobal] {
            for agg in [PatchAggregation::Sum, PatchAggregation::Mean] {
                for seed in 0..20u64 {
                    let m = 1 + (seed as usize % 4);
                    let pcount = 1 + (seed as usize % 6);
                    let d = 2 + (seed as usize % 7);
                    let p = random_params(seed, dims(m, d, 3, 4));
                    let patches = random_patches(1000 + seed, pcount, 3);
                    let upstream = random_patches(2000 + seed, m, d);
                    let c = condition(method, &p, &patches, agg).unwrap();
                    let mut g = p.zeros_like();
                    c.backward(&p, &upstream, &mut g).unwrap();
                    let r = grad_check(
                        conditioner_objective(method, &patches, &upstream, agg),
                        &p.to_groups(),
                        &g.to_groups(),
                        1e-5,
                        1e-5,
                    )
                    .unwrap();
                    assert!(r.pass, "{method} {agg:?} seed {seed}: {r:?}");
                }
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let p = random_params(1, dims(4, 16, 16, 4));
        let bytes = p.to_bytes();
        assert_eq!(&bytes[..5], b"COPL1");
        let back = PromptParams::from_bytes(&bytes).unwrap();
        assert_eq!(back, p);
        assert_eq!(back.to_bytes(), bytes);

        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(PromptParams::from_bytes(&bad), Err(Error::BadMagic)));
        assert!(matches!(
            PromptParams::from_bytes(&bytes[..bytes.len() - 3]),
            Err(Error::Truncated { .. })
        ));
        let mut long = bytes;
        long.push(0);
        assert!(matches!(
            PromptParams::from_bytes(&long),
            Err(Error::DimInconsistent(_))
        ));
    }

    #[test]
    fn method_names_parse() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("clip".parse::<Method>().is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn attention_rows_on_simplex(seed in any::<u64>(), m in 1usize..6, pcount in 1usize..8, d in 1usize..8) {
            let p = random_params(seed, dims(m, d, 3, 4));
            let patches = random_patches(seed ^ 1, pcount, 3);
            let out = condition_copl(&patches, &p.prompts, &p.meta, &p.align, PatchAggregation::Sum).unwrap();
            for row in out.attention.iter_rows() {
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
                prop_assert!(row.iter().all(|&a| a >= 0.0));
            }
            // convex hull of prompt rows, coordinatewise
            for c in out.context.iter_rows() {
                for (k, &ck) in c.iter().enumerate() {
                    let lo = (0..m).map(|i| p.prompts.token(i)[k]).fold(f64::INFINITY, f64::min);
                    let hi = (0..m).map(|i| p.prompts.token(i)[k]).fold(f64::NEG_INFINITY, f64::max);
                    prop_assert!(ck - lo >= -1e-12 && hi - ck >= -1e-12);
                }
            }
            // equal offset across prompt tokens
            let off0: Vec<f64> = out.conditioned.row(0).iter().zip(p.prompts.token(0)).map(|(a, b)| a - b).collect();
            for i in 1..m {
                for (k, (a, b)) in out.conditioned.row(i).iter().zip(p.prompts.token(i)).enumerate() {
                    prop_assert!(((a - b) - off0[k]).abs() <= 1e-12);
                }
            }
        }

        #[test]
        fn patch_permutation_invariance(seed in any::<u64>(), pcount in 2usize..8) {
            let p = random_params(seed, dims(3, 4, 3, 4));
            let patches = random_patches(seed ^ 7, pcount, 3);
            let mut order: Vec<usize> = (0..pcount).collect();
            Rng::new(seed).shuffle(&mut order);
            let permuted = Tensor::from_rows(&order.iter().map(|&i| patches.row(i).to_vec()).collect::<Vec<_>>()).unwrap();
            let a = condition_copl(&patches, &p.prompts, &p.meta, &p.align, PatchAggregation::Sum).unwrap();
            let b = condition_copl(&permuted, &p.prompts, &p.meta, &p.align, PatchAggregation::Sum).unwrap();
            prop_assert_eq!(a.conditioned.data(), b.conditioned.data());
            for (new_pos, &old) in order.iter().enumerate() {
                prop_assert_eq!(a.attention.row(old), b.attention.row(new_pos));
            }
        }

        #[test]
        fn checkpoint_bytes_round_trip(seed in any::<u64>(), m in 1usize..5, d in 1usize..6, d_img in 1usize..6, h in 1usize..5) {
            let p = random_params(seed, dims(m, d, d_img, h));
            let bytes = p.to_bytes();
            prop_assert_eq!(PromptParams::from_bytes(&bytes).unwrap().to_bytes(), bytes);
        }
    }
}
