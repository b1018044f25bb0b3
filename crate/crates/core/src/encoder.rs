//! Visual encoder: patch tokenization, transformer stack, visual projection
//! and temporal average pooling.

use rand::Rng;

use crate::error::{Error, Result};
use crate::nn::{encoder_block, layer_norm, BlockParams, BlockShape, LayerNormParams, INIT_STD};
use crate::numerics::{debug_assert_finite, Real, Tensor, Var};
use crate::params::{Bound, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderConfig {
    pub height: usize,
    pub width: usize,
    pub patch: usize,
    /// Token width `D`.
    pub token_width: usize,
    /// Joint embedding width `d`.
    pub joint_width: usize,
    pub depth: usize,
    pub block: BlockShape,
}

impl EncoderConfig {
    pub fn desk() -> Self {
        EncoderConfig {
            height: 32,
            width: 16,
            patch: 8,
            token_width: 64,
            joint_width: 32,
            depth: 4,
            block: BlockShape::default(),
        }
    }

    /// ViT-B/16 geometry at 256×128 input.
    pub fn paper_shape() -> Self {
        EncoderConfig {
            height: 256,
            width: 128,
            patch: 16,
            token_width: 768,
            joint_width: 512,
            depth: 12,
            block: BlockShape {
                heads: 12,
                expansion: 4,
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.patch == 0 || !self.height.is_multiple_of(self.patch) || !self.width.is_multiple_of(self.patch) {
            return Err(Error::config(format!(
                "patch size {} must divide frame height {} and width {}",
                self.patch, self.height, self.width
            )));
        }
        if self.height == 0 || self.width == 0 || self.token_width == 0 || self.joint_width == 0 {
            return Err(Error::config("encoder extents must be positive"));
        }
        if self.joint_width > self.token_width {
            return Err(Error::config(format!(
                "joint width {} exceeds token width {}",
                self.joint_width, self.token_width
            )));
        }
        if self.block.heads == 0 || !self.token_width.is_multiple_of(self.block.heads) {
            return Err(Error::config(format!(
                "token width {} not divisible by {} heads",
                self.token_width, self.block.heads
            )));
        }
        Ok(())
    }

    /// `N_p = (H/P)·(W/P)`.
    pub fn num_patches(&self) -> usize {
        (self.height / self.patch) * (self.width / self.patch)
    }

    /// `N_p + 1` including the class token.
    pub fn num_tokens(&self) -> usize {
        self.num_patches() + 1
    }

    pub fn patch_dim(&self) -> usize {
        3 * self.patch * self.patch
    }
}

#[derive(Clone, Debug)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub patch_proj: ParamId,
    pub cls: ParamId,
    pub pos: ParamId,
    pub blocks: Vec<BlockParams>,
    pub ln_final: LayerNormParams,
    /// Bias-free `D×d` projection into the joint space.
    pub vis_proj: ParamId,
}

impl EncoderParams {
    pub fn init<T: Real, R: Rng>(store: &mut ParamStore<T>, config: EncoderConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.token_width;
        let patch_proj = store.normal("encoder.patch_proj", &[config.patch_dim(), d], INIT_STD, rng);
        let cls = store.normal("encoder.cls", &[d], INIT_STD, rng);
        let pos = store.normal("encoder.pos", &[config.num_tokens(), d], INIT_STD, rng);
        let blocks = (0..config.depth)
            .map(|i| BlockParams::init(store, &format!("encoder.block{i}"), d, config.block, rng))
            .collect::<Result<Vec<_>>>()?;
        let ln_final = LayerNormParams::init(store, "encoder.ln_final", d);
        let vis_proj = store.normal("encoder.vis_proj", &[d, config.joint_width], INIT_STD, rng);
        Ok(EncoderParams {
            config,
            patch_proj,
            cls,
            pos,
            blocks,
            ln_final,
            vis_proj,
        })
    }
}

/// Rearranges frames `[N, H, W, 3]` into non-overlapping patches
/// `[N, N_p, 3P²]`, patches in row-major grid order and pixels as (y, x, c).
pub fn patchify<T: Real>(frames: &Tensor<T>, cfg: &EncoderConfig) -> Result<Tensor<T>> {
    let s = frames.shape();
    if s.len() != 4 || s[1] != cfg.height || s[2] != cfg.width || s[3] != 3 {
        return Err(Error::shape("patchify", s, &[0, cfg.height, cfg.width, 3]));
    }
    let (n, h, w, p) = (s[0], cfg.height, cfg.width, cfg.patch);
    let (gh, gw) = (h / p, w / p);
    let pd = cfg.patch_dim();
    let src = frames.data();
    let mut out = Vec::with_capacity(frames.numel());
    for f in 0..n {
        let base = f * h * w * 3;
        for gy in 0..gh {
            for gx in 0..gw {
                for py in 0..p {
                    let row = base + ((gy * p + py) * w + gx * p) * 3;
                    out.extend_from_slice(&src[row..row + p * 3]);
                }
            }
        }
    }
    Tensor::new(vec![n, gh * gw, pd], out)
}

/// `[CLS; E_embᵀ·patch_1; …] + e_sp` for patches `[N, N_p, 3P²]`.
pub fn tokenize_frames<'t, T: Real>(b: &Bound<'t, T>, p: &EncoderParams, patches: Var<'t, T>) -> Result<Var<'t, T>> {
    let n = patches.shape()[0];
    let d = p.config.token_width;
    let emb = patches.matmul(b.var(p.patch_proj))?;
    let cls = b.var(p.cls).reshape(&[1, 1, d])?.broadcast_to(&[n, 1, d])?;
    Var::concat(&[cls, emb], 1)?.add(b.var(p.pos))
}

/// Runs the block stack followed by the final layer norm.
pub fn encode_frames<'t, T: Real>(b: &Bound<'t, T>, p: &EncoderParams, tokens: Var<'t, T>) -> Result<Var<'t, T>> {
    let mut x = tokens;
    for blk in &p.blocks {
        x = encoder_block(b, blk, x)?;
    }
    let z = layer_norm(b, &p.ln_final, x)?;
    debug_assert_finite(&z, "encode_frames");
    Ok(z)
}

/// Projects the class token of each frame: `[N, N_p+1, D] → [N, d]`.
pub fn project_frames<'t, T: Real>(b: &Bound<'t, T>, p: &EncoderParams, z: Var<'t, T>) -> Result<Var<'t, T>> {
    let n = z.shape()[0];
    let cls = z.slice(1, 0, 1)?.reshape(&[n, p.config.token_width])?;
    cls.matmul(b.var(p.vis_proj))
}

/// Mean over the frame axis: `[T, d] → [d]` or `[B, T, d] → [B, d]`.
pub fn temporal_average<'t, T: Real>(features: Var<'t, T>) -> Result<Var<'t, T>> {
    let s = features.shape();
    match s.len() {
        2 => features.mean_axis(0),
        3 => features.mean_axis(1),
        _ => Err(Error::contract(format!(
            "temporal_average expects [T, d] or [B, T, d], got {s:?}"
        ))),
    }
}

/// Encoder outputs for a batch of `B` sequences of `T` frames.
pub struct EncodedBatch<'t, T> {
    /// Sequence features `[B, d]`.
    pub v: Var<'t, T>,
    /// Per-frame joint features `[B, T, d]`.
    pub frame_features: Var<'t, T>,
    /// Encoded token grids `[B·T, N_p+1, D]`.
    pub tokens: Var<'t, T>,
    pub batch: usize,
    pub frames: usize,
}

/// Encodes frames `[B, T, H, W, 3]`.
pub fn encode_batch<'t, T: Real>(
    b: &Bound<'t, T>,
    p: &EncoderParams,
    frames: &Tensor<T>,
) -> Result<EncodedBatch<'t, T>> {
    let s = frames.shape();
    if s.len() != 5 {
        return Err(Error::contract(format!(
            "encode_batch expects [B, T, H, W, 3], got {s:?}"
        )));
    }
    let (bs, t) = (s[0], s[1]);
    let flat = frames.reshape(vec![bs * t, s[2], s[3], s[4]])?;
    let patches = patchify(&flat, &p.config)?;
    let tape = b.var(p.cls).tape();
    let z_patch = tokenize_frames(b, p, tape.constant(patches))?;
    let tokens = encode_frames(b, p, z_patch)?;
    let f = project_frames(b, p, tokens)?;
    let frame_features = f.reshape(&[bs, t, p.config.joint_width])?;
    let v = temporal_average(frame_features)?;
    Ok(EncodedBatch {
        v,
        frame_features,
        tokens,
        batch: bs,
        frames: t,
    })
}

/// Encodes one sequence `[T, H, W, 3]` into `(v: [d], z_all: [T, N_p+1, D])`.
pub fn encode_sequence<'t, T: Real>(
    b: &Bound<'t, T>,
    p: &EncoderParams,
    frames: &Tensor<T>,
) -> Result<(Var<'t, T>, Var<'t, T>)> {
    let s = frames.shape();
    if s.len() != 4 || s[0] == 0 {
        return Err(Error::contract(format!(
            "encode_sequence expects [T, H, W, 3], got {s:?}"
        )));
    }
    let mut shape = vec![1];
    shape.extend_from_slice(s);
    let out = encode_batch(b, p, &frames.reshape(shape)?)?;
    let d = p.config.joint_width;
    Ok((out.v.reshape(&[d])?, out.tokens))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn micro() -> EncoderConfig {
        EncoderConfig {
            height: 4,
            width: 4,
            patch: 2,
            token_width: 8,
            joint_width: 4,
            depth: 1,
            block: BlockShape { heads: 2, expansion: 2 },
        }
    }

    #[test]
    fn patch_counts() {
        let c = EncoderConfig::desk();
        assert_eq!(c.num_patches(), 8);
        let p = EncoderConfig::paper_shape();
        assert_eq!(p.num_patches(), 128);
        let bad = EncoderConfig {
            height: 30,
            ..EncoderConfig::desk()
        };
        assert!(matches!(bad.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn tokenize_zero_image() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let cfg = EncoderConfig::desk();
        let p = EncoderParams::init(&mut store, cfg, &mut rng).unwrap();
        *store.get_mut(p.pos) = Tensor::zeros(vec![9, 64]);
        let tape = Tape::new();
        let b = store.bind(&tape, true);
        let img = Tensor::zeros(vec![1, 32, 16, 3]);
        let z = tokenize_frames(&b, &p, tape.constant(patchify(&img, &cfg).unwrap())).unwrap();
        let z = z.to_tensor();
        assert_eq!(z.shape(), &[1, 9, 64]);
        assert_eq!(&z.data()[..64], store.get(p.cls).data());
        assert!(z.data()[64..].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn patch_order_is_row_major() {
        let cfg = micro();
        let img = Tensor::<f64>::from_fn(vec![1, 4, 4, 3], |i| i as f64);
        let p = patchify(&img, &cfg).unwrap();
        assert_eq!(p.shape(), &[1, 4, 12]);
        // second patch starts at pixel (0, 2)
        assert_eq!(p.at(&[0, 1, 0]), 6.0);
        // its second row starts at pixel (1, 2)
        assert_eq!(p.at(&[0, 1, 6]), ((4 + 2) * 3) as f64);
        // third patch starts at pixel (2, 0)
        assert_eq!(p.at(&[0, 2, 0]), (8 * 3) as f64);
    }

    #[test]
    fn depth_zero_is_layer_norm() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cfg = EncoderConfig { depth: 0, ..micro() };
        let p = EncoderParams::init(&mut store, cfg, &mut rng).unwrap();
        let tape = Tape::new();
        let b = store.bind(&tape, true);
        let x = tape.constant(Tensor::from_fn(vec![2, 5, 8], |i| (i as f64).sin()));
        let z = encode_frames(&b, &p, x).unwrap().to_tensor();
        let ln = layer_norm(&b, &p.ln_final, x).unwrap().to_tensor();
        assert_eq!(z, ln);
    }

    #[test]
    fn projection_cases() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let cfg = EncoderConfig {
            token_width: 3,
            joint_width: 2,
            block: BlockShape { heads: 1, expansion: 1 },
            ..micro()
        };
        let p = EncoderParams::init(&mut store, cfg, &mut rng).unwrap();
        let w = Tensor::from_f64(vec![3, 2], &[0.5, -1.0, 2.0, 0.0, 1.5, 3.0]).unwrap();
        *store.get_mut(p.vis_proj) = w;
        let tape = Tape::new();
        let b = store.bind(&tape, true);
        let z = tape.constant(Tensor::from_f64(vec![1, 2, 3], &[1.0, 2.0, -1.0, 9.0, 9.0, 9.0]).unwrap());
        let f = project_frames(&b, &p, z).unwrap().to_tensor();
        // [1, 2, -1] · W
        assert_eq!(f.data(), &[0.5 + 4.0 - 1.5, -1.0 + 0.0 - 3.0]);

        *store.get_mut(p.vis_proj) = Tensor::zeros(vec![3, 2]);
        let b = store.bind(&tape, true);
        let f = project_frames(&b, &p, z).unwrap().to_tensor();
        assert!(f.data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn temporal_average_cases() {
        let tape = Tape::<f64>::new();
        let one = tape.constant(Tensor::from_f64(vec![1, 3], &[1.0, 2.0, 3.0]).unwrap());
        assert_eq!(temporal_average(one).unwrap().to_tensor().data(), &[1.0, 2.0, 3.0]);
        let two = tape.constant(Tensor::from_f64(vec![2, 2], &[1.0, 0.0, 0.0, 1.0]).unwrap());
        assert_eq!(temporal_average(two).unwrap().to_tensor().data(), &[0.5, 0.5]);
    }

    #[test]
    fn desk_sequence_shapes() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cfg = EncoderConfig::desk();
        let p = EncoderParams::init(&mut store, cfg, &mut rng).unwrap();
        let tape = Tape::new();
        let b = store.bind(&tape, true);
        let frames = Tensor::from_fn(vec![4, 32, 16, 3], |i| ((i % 17) as f32) / 17.0);
        let (v, z) = encode_sequence(&b, &p, &frames).unwrap();
        assert_eq!(v.shape(), vec![32]);
        assert_eq!(z.shape(), vec![4, 9, 64]);
    }

    #[test]
    fn repeated_frame_gives_frame_feature() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = EncoderParams::init(&mut store, micro(), &mut rng).unwrap();
        let tape = Tape::new();
        let b = store.bind(&tape, true);
        let frame = Tensor::from_fn(vec![1, 4, 4, 3], |i| (i as f64 * 0.13).sin());
        let (v1, _) = encode_sequence(&b, &p, &frame).unwrap();
        let rep = Tensor::stack(&vec![frame.reshape(vec![4, 4, 3]).unwrap(); 3]).unwrap();
        let (v3, _) = encode_sequence(&b, &p, &rep).unwrap();
        assert!(v1.to_tensor().max_abs_diff(&v3.to_tensor()) < 1e-15);
    }
}
