//! Temporal memory diffusion head.
//!
//! Each frame gets a memory token from the mean of its tokens, the memory
//! tokens attend to each other across time, each memory token is appended to
//! its frame and diffused into the frame tokens, and the updated tokens are
//! averaged per frame and then over frames.
//!
//! No temporal position embedding is used, so the sequence feature is
//! invariant to frame order.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{ffn, layer_norm, multi_head_attention, AttentionParams, BlockShape, FfnParams, LayerNormParams};
use crate::numerics::{debug_assert_finite, Real, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Clone, Debug)]
pub struct TmdParams {
    /// Bias-free `D×D` projection of the per-frame token mean.
    pub theta: ParamId,
    pub temporal_ln: LayerNormParams,
    pub temporal_attn: AttentionParams,
    pub diffusion_attn: AttentionParams,
    pub diffusion_ffn: FfnParams,
    pub width: usize,
}

impl TmdParams {
    /// `theta` starts at the identity and the diffusion FFN output at zero,
    /// so a fresh head passes tokens through unchanged.
    pub fn init<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        width: usize,
        shape: BlockShape,
        rng: &mut R,
    ) -> Result<Self> {
        let theta = store.add("tmd.theta", Tensor::eye(width));
        let temporal_ln = LayerNormParams::init(store, "tmd.temporal_ln", width);
        let temporal_attn = AttentionParams::init(store, "tmd.temporal_attn", width, shape.heads, true, rng)?;
        // W_o stays random here: with both W_o and W2 at zero the composite
        // FFN(MHSA(x)) would have zero gradient everywhere.
        let diffusion_attn = AttentionParams::init(store, "tmd.diffusion_attn", width, shape.heads, false, rng)?;
        let diffusion_ffn = FfnParams::init(store, "tmd.diffusion_ffn", width, shape.expansion, true, rng)?;
        Ok(TmdParams {
            theta,
            temporal_ln,
            temporal_attn,
            diffusion_attn,
            diffusion_ffn,
            width,
        })
    }
}

fn as_batched<'t, T: Real>(z_all: Var<'t, T>, width: usize) -> Result<Var<'t, T>> {
    let s = z_all.shape();
    match s.len() {
        3 if s[2] == width => z_all.reshape(&[1, s[0], s[1], s[2]]),
        4 if s[3] == width => Ok(z_all),
        _ => Err(Error::contract(format!(
            "expected token grids [T, N, {width}] or [B, T, N, {width}], got {s:?}"
        ))),
    }
}

/// `s_t = θ(mean_i z_{t,i})`: `[B, T, N, D] → [B, T, D]`.
pub fn init_memory_tokens<'t, T: Real>(b: &Bound<'t, T>, p: &TmdParams, z_all: Var<'t, T>) -> Result<Var<'t, T>> {
    let z = as_batched(z_all, p.width)?;
    let s = z.mean_axis(2)?.matmul(b.var(p.theta))?;
    if z_all.shape().len() == 3 {
        s.reshape(&[z_all.shape()[0], p.width])
    } else {
        Ok(s)
    }
}

/// `S′ = MHSA(LN(S)) + S` over the frame axis. No feed-forward sublayer.
pub fn temporal_memory_construct<'t, T: Real>(
    b: &Bound<'t, T>,
    p: &TmdParams,
    memory: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let n = layer_norm(b, &p.temporal_ln, memory)?;
    multi_head_attention(b, &p.temporal_attn, n, n)?.add(memory)
}

/// `[ẑ, ŝ′] = FFN(MHSA([z, s′])) + [z, s′]`, without layer norm or an inner residual.
///
/// `tokens` is `[..., N, D]` and `memory` is `[..., D]` with the same leading axes.
pub fn memory_diffuse<'t, T: Real>(
    b: &Bound<'t, T>,
    p: &TmdParams,
    tokens: Var<'t, T>,
    memory: Var<'t, T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let joint = diffuse_joint(b, p, tokens, memory)?;
    let ax = joint.shape().len() - 2;
    let n = tokens.shape()[ax];
    let ms = memory.shape();
    let z_hat = joint.slice(ax, 0, n)?;
    let s_hat = joint.slice(ax, n, n + 1)?.reshape(&ms)?;
    Ok((z_hat, s_hat))
}

fn diffuse_joint<'t, T: Real>(
    b: &Bound<'t, T>,
    p: &TmdParams,
    tokens: Var<'t, T>,
    memory: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let (ts, ms) = (tokens.shape(), memory.shape());
    if ts.len() < 2 || ts.len() != ms.len() + 1 || ts[..ts.len() - 2] != ms[..ms.len() - 1] || ts.last() != ms.last() {
        return Err(Error::shape("memory_diffuse", &ts, &ms));
    }
    let mut mshape = ms.clone();
    mshape.insert(ms.len() - 1, 1);
    let x = Var::concat(&[tokens, memory.reshape(&mshape)?], ts.len() - 2)?;
    let a = multi_head_attention(b, &p.diffusion_attn, x, x)?;
    ffn(b, &p.diffusion_ffn, a)?.add(x)
}

/// `z̃_t = (Σ_i ẑ_{t,i} + ŝ′_t) / (N + 1)`.
pub fn aggregate_frame<'t, T: Real>(z_hat: Var<'t, T>, s_hat: Var<'t, T>) -> Result<Var<'t, T>> {
    let zs = z_hat.shape();
    let mut mshape = s_hat.shape();
    mshape.insert(mshape.len() - 1, 1);
    Var::concat(&[z_hat, s_hat.reshape(&mshape)?], zs.len() - 2)?.mean_axis(zs.len() - 2)
}

/// Per-frame features `z̃` `[B, T, D]` of the full chain.
pub fn tmd_frame_features<'t, T: Real>(b: &Bound<'t, T>, p: &TmdParams, z_all: Var<'t, T>) -> Result<Var<'t, T>> {
    let z = as_batched(z_all, p.width)?;
    let zs = z.shape();
    let (bs, t, n, d) = (zs[0], zs[1], zs[2], zs[3]);
    let s = init_memory_tokens(b, p, z)?;
    let s_prime = temporal_memory_construct(b, p, s)?;
    let flat_tokens = z.reshape(&[bs * t, n, d])?;
    let flat_mem = s_prime.reshape(&[bs * t, d])?;
    let joint = diffuse_joint(b, p, flat_tokens, flat_mem)?;
    // mean over all N + 1 updated tokens is exactly aggregate_frame
    joint.mean_axis(1)?.reshape(&[bs, t, d])
}

/// Sequence feature `v̂`: `[T, N, D] → [D]` or `[B, T, N, D] → [B, D]`.
pub fn tmd_forward<'t, T: Real>(b: &Bound<'t, T>, p: &TmdParams, z_all: Var<'t, T>) -> Result<Var<'t, T>> {
    let single = z_all.shape().len() == 3;
    let frames = tmd_frame_features(b, p, z_all)?;
    let v_hat = frames.mean_axis(1)?;
    debug_assert_finite(&v_hat, "tmd_forward");
    if single {
        v_hat.reshape(&[p.width])
    } else {
        Ok(v_hat)
    }
}

/// Ablation head: mean over frames of the encoded class tokens, `[B, T, N, D] → [B, D]`.
pub fn tap_fallback<'t, T: Real>(z_all: Var<'t, T>, width: usize) -> Result<Var<'t, T>> {
    let single = z_all.shape().len() == 3;
    let z = as_batched(z_all, width)?;
    let zs = z.shape();
    let cls = z.slice(2, 0, 1)?.reshape(&[zs[0], zs[1], width])?;
    let v = cls.mean_axis(1)?;
    if single {
        v.reshape(&[width])
    } else {
        Ok(v)
    }
}
