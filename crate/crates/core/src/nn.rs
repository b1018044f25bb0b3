//! Attention and feed-forward blocks shared by the encoder, the prompt
//! decoder and the temporal head.
//!
//! All blocks operate on the last axis and accept any number of leading
//! batch axes. There is no masking anywhere.

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{debug_assert_finite, Real, Var, LN_EPS};
use crate::params::{Bound, ParamId, ParamStore};

/// Weight standard deviation for freshly initialized projections.
pub const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Gelu,
    Relu,
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
    pub width: usize,
}

impl AttentionParams {
    /// `zero_out` leaves the output projection at zero.
    pub fn init<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        width: usize,
        heads: usize,
        zero_out: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !width.is_multiple_of(heads) {
            return Err(Error::config(format!(
                "{prefix}: width {width} not divisible by {heads} heads"
            )));
        }
        let s = [width, width];
        let wq = store.normal(format!("{prefix}.wq"), &s, INIT_STD, rng);
        let wk = store.normal(format!("{prefix}.wk"), &s, INIT_STD, rng);
        let wv = store.normal(format!("{prefix}.wv"), &s, INIT_STD, rng);
        let wo = if zero_out {
            store.zeros(format!("{prefix}.wo"), &s)
        } else {
            store.normal(format!("{prefix}.wo"), &s, INIT_STD, rng)
        };
        Ok(AttentionParams {
            wq,
            wk,
            wv,
            wo,
            heads,
            width,
        })
    }
}

#[derive(Clone, Debug)]
pub struct FfnParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    pub activation: Activation,
}

impl FfnParams {
    pub fn init<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        width: usize,
        expansion: usize,
        zero_out: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if expansion == 0 {
            return Err(Error::config("ffn expansion must be at least 1"));
        }
        let hidden = width * expansion;
        let w1 = store.normal(format!("{prefix}.w1"), &[width, hidden], INIT_STD, rng);
        let b1 = store.zeros(format!("{prefix}.b1"), &[hidden]);
        let w2 = if zero_out {
            store.zeros(format!("{prefix}.w2"), &[hidden, width])
        } else {
            store.normal(format!("{prefix}.w2"), &[hidden, width], INIT_STD, rng)
        };
        let b2 = store.zeros(format!("{prefix}.b2"), &[width]);
        Ok(FfnParams {
            w1,
            b1,
            w2,
            b2,
            activation: Activation::Gelu,
        })
    }
}

#[derive(Clone, Debug)]
pub struct LayerNormParams {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNormParams {
    pub fn init<T: Real>(store: &mut ParamStore<T>, prefix: &str, width: usize) -> Self {
        LayerNormParams {
            gamma: store.ones(format!("{prefix}.gamma"), &[width]),
            beta: store.zeros(format!("{prefix}.beta"), &[width]),
        }
    }
}

/// Pre-norm block: attention sublayer then feed-forward sublayer.
///
/// Used for self-attention in the encoder and cross-attention in the
/// prompt decoder.
#[derive(Clone, Debug)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub ffn: FfnParams,
}

/// Model-wide block hyperparameters.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockShape {
    pub heads: usize,
    pub expansion: usize,
}

impl Default for BlockShape {
    fn default() -> Self {
        BlockShape { heads: 4, expansion: 4 }
    }
}

impl BlockParams {
    /// Output projections start at zero, so a fresh block is the identity.
    pub fn init<T: Real, R: Rng>(
        store: &mut ParamStore<T>,
        prefix: &str,
        width: usize,
        shape: BlockShape,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(BlockParams {
            ln1: LayerNormParams::init(store, &format!("{prefix}.ln1"), width),
            attn: AttentionParams::init(store, &format!("{prefix}.attn"), width, shape.heads, true, rng)?,
            ln2: LayerNormParams::init(store, &format!("{prefix}.ln2"), width),
            ffn: FfnParams::init(store, &format!("{prefix}.ffn"), width, shape.expansion, true, rng)?,
        })
    }
}

pub fn layer_norm<'t, T: Real>(b: &Bound<'t, T>, p: &LayerNormParams, x: Var<'t, T>) -> Result<Var<'t, T>> {
    x.layer_norm(b.var(p.gamma), b.var(p.beta), LN_EPS)
}

/// Scaled dot-product attention with `heads` heads.
///
/// `queries` is `[..., n_q, D]`, `keys_values` is `[..., n_kv, D]` with the
/// same leading axes.
pub fn multi_head_attention<'t, T: Real>(
    b: &Bound<'t, T>,
    p: &AttentionParams,
    queries: Var<'t, T>,
    keys_values: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let (qs, ks) = (queries.shape(), keys_values.shape());
    let d = p.width;
    if qs.last() != Some(&d) || ks.last() != Some(&d) || qs.len() != ks.len() {
        return Err(Error::shape("multi_head_attention", &qs, &ks));
    }
    let q = queries.matmul(b.var(p.wq))?;
    let k = keys_values.matmul(b.var(p.wk))?;
    let v = keys_values.matmul(b.var(p.wv))?;
    let last = qs.len() - 1;
    let dh = d / p.heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut heads = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let (lo, hi) = (h * dh, (h + 1) * dh);
        let (qh, kh, vh) = if p.heads == 1 {
            (q, k, v)
        } else {
            (q.slice(last, lo, hi)?, k.slice(last, lo, hi)?, v.slice(last, lo, hi)?)
        };
        let attn = qh.matmul(kh.transpose()?)?.scale(scale).softmax();
        heads.push(attn.matmul(vh)?);
    }
    let merged = if heads.len() == 1 {
        heads[0]
    } else {
        Var::concat(&heads, last)?
    };
    merged.matmul(b.var(p.wo))
}

/// `W2·act(W1·x + b1) + b2` applied per row.
pub fn ffn<'t, T: Real>(b: &Bound<'t, T>, p: &FfnParams, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let h = x.matmul(b.var(p.w1))?.add(b.var(p.b1))?;
    let h = match p.activation {
        Activation::Gelu => h.gelu(),
        Activation::Relu => h.relu(),
    };
    h.matmul(b.var(p.w2))?.add(b.var(p.b2))
}

/// `x ← x + MHSA(LN(x)); x ← x + FFN(LN(x))`.
pub fn encoder_block<'t, T: Real>(b: &Bound<'t, T>, p: &BlockParams, x: Var<'t, T>) -> Result<Var<'t, T>> {
    let n = layer_norm(b, &p.ln1, x)?;
    let x = x.add(multi_head_attention(b, &p.attn, n, n)?)?;
    let n = layer_norm(b, &p.ln2, x)?;
    let y = x.add(ffn(b, &p.ffn, n)?)?;
    debug_assert_finite(&y, "encoder_block");
    Ok(y)
}

/// `q ← q + MHCA(LN(q), kv); q ← q + FFN(LN(q))`, no self-attention sublayer.
///
/// Keys and values are used as given, without normalization.
pub fn decoder_block<'t, T: Real>(
    b: &Bound<'t, T>,
    p: &BlockParams,
    q: Var<'t, T>,
    kv: Var<'t, T>,
) -> Result<Var<'t, T>> {
    let (qs, ks) = (q.shape(), kv.shape());
    if qs.last() != ks.last() {
        return Err(Error::shape("decoder_block", &qs, &ks));
    }
    let n = layer_norm(b, &p.ln1, q)?;
    let q = q.add(multi_head_attention(b, &p.attn, n, kv)?)?;
    let n = layer_norm(b, &p.ln2, q)?;
    let y = q.add(ffn(b, &p.ffn, n)?)?;
    debug_assert_finite(&y, "decoder_block");
    Ok(y)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Tape, Tensor};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), data).unwrap()
    }

    fn single_head(store: &mut ParamStore<f64>, d: usize) -> AttentionParams {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        AttentionParams::init(store, "a", d, 1, false, &mut rng).unwrap()
    }

    #[test]
    fn single_key_takes_all_weight() {
        let mut store = ParamStore::new();
        let p = single_head(&mut store, 2);
        let tape = Tape::new();
        let b = store.bind(&tape, true);
        let q = tape.constant(t(&[3, 2], &[1.0, 0.0, -2.0, 5.0, 0.3, 0.3]));
        let kv = tape.constant(t(&[1, 2], &[0.7, -1.1]));
        let out = multi_head_attention(&b, &p, q, kv).unwrap().to_tensor();
        let expect = kv.matmul(b.var(p.wv)).unwrap().matmul(b.var(p.wo)).unwrap().to_tensor();
        for r in 0..3 {
            for c in 0..2 {
                assert!((out.at(&[r, c]) - expect.at(&[0, c])).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn zero_output_projection_zero_attention() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = AttentionParams::init(&mut store, "a", 4, 2, true, &mut rng).unwrap();
        let tape = Tape::new();
        let b = store.bind(&tape, true);
        let x = tape.constant(Tensor::from_fn(vec![3, 4], |i| i as f64 * 0.1));
        let out = multi_head_attention(&b, &p, x, x).unwrap().to_tensor();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn hand_evaluated_cross_attention() {
        // n_q = 1, n_kv = 2, D = 2, identity projections
        let mut store = ParamStore::new();
        let p = single_head(&mut store, 2);
        for id in [p.wq, p.wk, p.wv, p.wo] {
            *store.get_mut(id) = Tensor::eye(2);
        }
        let tape = Tape::new();
        let b = store.bind(&tape, true);
        let q = tape.constant(t(&[1, 2], &[1.0, 0.0]));
        let kv = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, -1.0]));
        let out = multi_head_attention(&b, &p, q, kv).unwrap().to_tensor();
        // scores = [1, 3] / sqrt(2)
        let s = [1.0 / 2f64.sqrt(), 3.0 / 2f64.sqrt()];
        let z = s[0].exp() + s[1].exp();
        let w = [s[0].exp() / z, s[1].exp() / z];
        let expect = [w[0] * 1.0 + w[1] * 3.0, w[0] * 2.0 + -w[1]];
        assert!((out.data()[0] - expect[0]).abs() < 1e-14);
        assert!((out.data()[1] - expect[1]).abs() < 1e-14);
    }

    #[test]
    fn ffn_cases() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut p = FfnParams::init(&mut store, "f", 2, 1, false, &mut rng).unwrap();
        let tape = Tape::new();
        let x = t(&[2, 2], &[0.5, 1.5, 2.0, 0.0]);

        // all zeros
        let mut zero = store.clone();
        for id in [p.w1, p.w2] {
            *zero.get_mut(id) = Tensor::zeros(vec![2, 2]);
        }
        let b = zero.bind(&tape, true);
        let y = ffn(&b, &p, tape.constant(x.clone())).unwrap().to_tensor();
        assert!(y.data().iter().all(|&v| v == 0.0));

        // identity with relu on nonnegative input
        p.activation = Activation::Relu;
        let mut ident = store.clone();
        for id in [p.w1, p.w2] {
            *ident.get_mut(id) = Tensor::eye(2);
        }
        let b = ident.bind(&tape, true);
        let y = ffn(&b, &p, tape.constant(x.clone())).unwrap().to_tensor();
        assert_eq!(y, x);

        // hand computed 2x2
        let mut hand = store.clone();
        *hand.get_mut(p.w1) = t(&[2, 2], &[1.0, -1.0, 2.0, 0.5]);
        *hand.get_mut(p.b1) = t(&[2], &[0.1, -3.0]);
        *hand.get_mut(p.w2) = t(&[2, 2], &[0.5, 1.0, -1.0, 2.0]);
        *hand.get_mut(p.b2) = t(&[2], &[0.0, 1.0]);
        let b = hand.bind(&tape, true);
        let y = ffn(&b, &p, tape.constant(t(&[1, 2], &[1.0, 2.0]))).unwrap().to_tensor();
        // h = [1+4+0.1, -1+1-3] = [5.1, -3] -> relu [5.1, 0]
        // y = [5.1*0.5, 5.1*1] + [0, 1] = [2.55, 6.1]
        assert!((y.data()[0] - 2.55).abs() < 1e-12);
        assert!((y.data()[1] - 6.1).abs() < 1e-12);
    }

    #[test]
    fn zero_init_blocks_are_identity() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = BlockParams::init(&mut store, "blk", 8, BlockShape::default(), &mut rng).unwrap();
        let tape = Tape::new();
        let b = store.bind(&tape, true);
        let x = tape.constant(Tensor::from_fn(vec![2, 5, 8], |i| (i as f64 * 0.37).sin()));
        assert_eq!(encoder_block(&b, &p, x).unwrap().to_tensor(), x.to_tensor());
        let q = tape.constant(Tensor::from_fn(vec![4, 8], |i| (i as f64 * 0.11).cos()));
        let kv = tape.constant(Tensor::from_fn(vec![16, 8], |i| (i as f64 * 0.23).sin()));
        let y = decoder_block(&b, &p, q, kv).unwrap();
        assert_eq!(y.shape(), vec![4, 8]);
        assert_eq!(y.to_tensor(), q.to_tensor());
    }

    #[test]
    fn decoder_rejects_width_mismatch() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = BlockParams::init(&mut store, "blk", 4, BlockShape::default(), &mut rng).unwrap();
        let tape = Tape::new();
        let b = store.bind(&tape, true);
        let q = tape.constant(Tensor::zeros(vec![2, 4]));
        let kv = tape.constant(Tensor::zeros(vec![2, 8]));
        assert!(decoder_block(&b, &p, q, kv).is_err());
    }

    #[test]
    fn single_token_block_manual() {
        // D = 4, one head, one token: attention weight is 1.
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let shape = BlockShape { heads: 1, expansion: 1 };
        let p = BlockParams::init(&mut store, "blk", 4, shape, &mut rng).unwrap();
        for id in [p.attn.wo, p.ffn.w2] {
            *store.get_mut(id) = Tensor::from_fn(vec![4, 4], |i| ((i * 7 % 5) as f64 - 2.0) * 0.1);
        }
        let x0 = [0.3, -0.2, 1.0, 0.5];
        let tape = Tape::new();
        let b = store.bind(&tape, true);
        let y = encoder_block(&b, &p, tape.constant(t(&[1, 4], &x0)))
            .unwrap()
            .to_tensor();

        let ln = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / 4.0;
            let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 4.0;
            v.iter().map(|x| (x - m) / (var + LN_EPS).sqrt()).collect::<Vec<_>>()
        };
        let mv = |v: &[f64], w: &Tensor<f64>| {
            (0..w.shape()[1])
                .map(|j| (0..v.len()).map(|i| v[i] * w.at(&[i, j])).sum())
                .collect::<Vec<f64>>()
        };
        let gelu = |x: f64| 0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044715 * x.powi(3))).tanh());
        let n1 = ln(&x0);
        let a = mv(&mv(&n1, store.get(p.attn.wv)), store.get(p.attn.wo));
        let x1: Vec<f64> = x0.iter().zip(&a).map(|(x, a)| x + a).collect();
        let h: Vec<f64> = mv(&ln(&x1), store.get(p.ffn.w1)).into_iter().map(gelu).collect();
        let f = mv(&h, store.get(p.ffn.w2));
        for j in 0..4 {
            assert!((y.data()[j] - (x1[j] + f[j])).abs() < 1e-12);
        }
    }
}
