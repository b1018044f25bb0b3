//! Analytic gradients against central differences for every layer and the
//! full objective on a double-precision micro model.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::clip_memory::{ssp_forward, MemoryBank, SspParams};
use crate::encoder::{encode_sequence, EncoderConfig, EncoderParams};
use crate::error::Result;
use crate::losses::{ce_label_smooth, triplet_loss, v2m_loss, LABEL_SMOOTHING};
use crate::model::{Fusion, ModelConfig, TfClip};
use crate::nn::{
    decoder_block, encoder_block, ffn, layer_norm, multi_head_attention, AttentionParams, BlockParams, BlockShape,
    FfnParams, LayerNormParams,
};
use crate::numerics::{finite_diff_grad, relative_error, Tape, Tensor, Var};
use crate::params::{Bound, ParamStore};
use crate::tmd::{tmd_forward, TmdParams};

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;
/// Token width of the micro model.
pub const WIDTH: usize = 8;

#[derive(Clone, Debug, PartialEq)]
pub struct CheckRow {
    pub component: String,
    /// Relative error over the gradient of all parameters and inputs.
    pub max_rel_err: f64,
    /// Scalars compared.
    pub coordinates: usize,
}

impl CheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= TOLERANCE
    }
}

/// Formats rows as an aligned text table.
pub fn table(rows: &[CheckRow]) -> String {
    let mut s = format!("{:<16} {:>12} {:>8}  status\n", "component", "max_rel_err", "coords");
    for r in rows {
        s.push_str(&format!(
            "{:<16} {:>12.3e} {:>8}  {}\n",
            r.component,
            r.max_rel_err,
            r.coordinates,
            if r.passed() { "pass" } else { "FAIL" }
        ));
    }
    s
}

type Probe = dyn for<'t> Fn(&Bound<'t, f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>;

struct Case<'a> {
    name: &'a str,
    store: ParamStore<f64>,
    inputs: Vec<Tensor<f64>>,
    probe: &'a Probe,
}

fn normal_tensor(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = Normal::new(0.0, std).expect("std > 0");
    Tensor::from_fn(shape.to_vec(), |_| n.sample(rng))
}

/// Overwrites every parameter with random values so that no branch is
/// silenced by a zero initialization.
fn randomize(store: &mut ParamStore<f64>, rng: &mut ChaCha8Rng) {
    for t in store.tensors_mut() {
        *t = normal_tensor(t.shape(), 0.5, rng);
    }
}

fn weighted_sum<'t>(out: Var<'t, f64>, weights: &Tensor<f64>) -> Result<Var<'t, f64>> {
    if out.shape().iter().product::<usize>() == 1 {
        return Ok(out.sum());
    }
    Ok(out.mul(out.tape().constant(weights.clone()))?.sum())
}

fn evaluate(case: &Case, store: &ParamStore<f64>, inputs: &[Tensor<f64>], w: &Tensor<f64>) -> f64 {
    let tape = Tape::new();
    let b = store.bind(&tape, true);
    let xs: Vec<_> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let out = (case.probe)(&b, &xs).expect("probe evaluates");
    weighted_sum(out, w).expect("weights fit").item()
}

fn run_case(case: Case, rng: &mut ChaCha8Rng, corrupt: bool) -> Result<CheckRow> {
    // a random projection keeps row-normalized outputs from having a
    // constant sum and thus a vanishing gradient
    let w = {
        let tape = Tape::new();
        let b = case.store.bind(&tape, true);
        let xs: Vec<_> = case.inputs.iter().map(|x| tape.constant(x.clone())).collect();
        let out = (case.probe)(&b, &xs)?;
        let s = out.shape();
        if s.is_empty() {
            Tensor::scalar(1.0)
        } else {
            normal_tensor(&s, 1.0, rng)
        }
    };
    let tape = Tape::new();
    let b = case.store.bind(&tape, false);
    let xs: Vec<_> = case.inputs.iter().map(|x| tape.leaf(x.clone())).collect();
    let loss = weighted_sum((case.probe)(&b, &xs)?, &w)?;
    let mut grads = tape.backward(loss)?;
    let mut analytic_params = b.collect_grads(&mut grads);
    let mut analytic_inputs: Vec<_> = xs.iter().map(|&x| grads.take(x)).collect();
    if corrupt {
        for g in analytic_params.iter_mut().chain(analytic_inputs.iter_mut()).flatten() {
            *g = g.map(|x| x * 1.1);
        }
    }

    let mut analytic = vec![];
    let mut numeric = vec![];
    for (i, a) in analytic_params.iter().enumerate() {
        let p = &case.store.tensors()[i];
        let n = finite_diff_grad(
            |t| {
                let mut s = case.store.clone();
                s.tensors_mut()[i] = t.clone();
                evaluate(&case, &s, &case.inputs, &w)
            },
            p,
            STEP,
        );
        let a = a.clone().unwrap_or_else(|| Tensor::zeros(p.shape().to_vec()));
        log::debug!(
            "{} {}: {:.3e}",
            case.name,
            case.store.name(case.store.ids().nth(i).expect("id")),
            relative_error(&a, &n)
        );
        analytic.extend_from_slice(a.data());
        numeric.extend_from_slice(n.data());
    }
    for (i, a) in analytic_inputs.iter().enumerate() {
        let x = &case.inputs[i];
        let n = finite_diff_grad(
            |t| {
                let mut inputs = case.inputs.clone();
                inputs[i] = t.clone();
                evaluate(&case, &case.store, &inputs, &w)
            },
            x,
            STEP,
        );
        let a = a.clone().unwrap_or_else(|| Tensor::zeros(x.shape().to_vec()));
        log::debug!("{} input{i}: {:.3e}", case.name, relative_error(&a, &n));
        analytic.extend_from_slice(a.data());
        numeric.extend_from_slice(n.data());
    }
    let coords = analytic.len();
    let worst = relative_error(
        &Tensor::new(vec![coords], analytic)?,
        &Tensor::new(vec![coords], numeric)?,
    );
    Ok(CheckRow {
        component: case.name.to_string(),
        max_rel_err: worst,
        coordinates: coords,
    })
}

/// Component names in run order.
pub const COMPONENTS: [&str; 16] = [
    "linear",
    "layer_norm",
    "softmax",
    "log_softmax",
    "mhsa",
    "mhca",
    "ffn",
    "encoder_block",
    "encoder",
    "ssp_block",
    "ssp",
    "tmd_chain",
    "v2m_loss",
    "triplet_loss",
    "ce_loss",
    "total_loss",
];

fn micro_encoder() -> EncoderConfig {
    EncoderConfig {
        height: 4,
        width: 4,
        patch: 2,
        token_width: WIDTH,
        joint_width: 4,
        depth: 1,
        block: BlockShape { heads: 2, expansion: 2 },
    }
}

/// Runs every component; `corrupt` scales the analytic gradient of the named
/// component by 1.1 as a negative control.
pub fn run_gradcheck(seed: u64, corrupt: Option<&str>) -> Result<Vec<CheckRow>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = WIDTH;
    let shape = BlockShape { heads: 2, expansion: 2 };
    let mut rows = Vec::new();
    for &name in &COMPONENTS {
        let mut store = ParamStore::<f64>::new();
        let row = {
            let go = |store: ParamStore<f64>, inputs: Vec<Tensor<f64>>, probe: &Probe, rng: &mut ChaCha8Rng| {
                run_case(
                    Case {
                        name,
                        store,
                        inputs,
                        probe,
                    },
                    rng,
                    corrupt == Some(name),
                )
            };
            match name {
                "linear" => {
                    let w = store.normal("w", &[d, 5], 0.5, &mut rng);
                    let bias = store.normal("b", &[5], 0.5, &mut rng);
                    let x = normal_tensor(&[3, d], 1.0, &mut rng);
                    go(
                        store,
                        vec![x],
                        &move |b, x| x[0].matmul(b.var(w))?.add(b.var(bias)),
                        &mut rng,
                    )?
                }
                "layer_norm" => {
                    let ln = LayerNormParams::init(&mut store, "ln", d);
                    randomize(&mut store, &mut rng);
                    let x = normal_tensor(&[3, d], 1.0, &mut rng);
                    go(store, vec![x], &move |b, x| layer_norm(b, &ln, x[0]), &mut rng)?
                }
                "softmax" | "log_softmax" => {
                    let x = normal_tensor(&[3, d], 1.0, &mut rng);
                    let log = name == "log_softmax";
                    go(
                        store,
                        vec![x],
                        &move |_, x| Ok(if log { x[0].log_softmax() } else { x[0].softmax() }),
                        &mut rng,
                    )?
                }
                "mhsa" | "mhca" => {
                    let p = AttentionParams::init(&mut store, "attn", d, 2, false, &mut rng)?;
                    randomize(&mut store, &mut rng);
                    let q = normal_tensor(&[3, d], 1.0, &mut rng);
                    if name == "mhsa" {
                        go(
                            store,
                            vec![q],
                            &move |b, x| multi_head_attention(b, &p, x[0], x[0]),
                            &mut rng,
                        )?
                    } else {
                        let kv = normal_tensor(&[5, d], 1.0, &mut rng);
                        go(
                            store,
                            vec![q, kv],
                            &move |b, x| multi_head_attention(b, &p, x[0], x[1]),
                            &mut rng,
                        )?
                    }
                }
                "ffn" => {
                    let p = FfnParams::init(&mut store, "ffn", d, 2, false, &mut rng)?;
                    randomize(&mut store, &mut rng);
                    let x = normal_tensor(&[3, d], 1.0, &mut rng);
                    go(store, vec![x], &move |b, x| ffn(b, &p, x[0]), &mut rng)?
                }
                "encoder_block" | "ssp_block" => {
                    let p = BlockParams::init(&mut store, "block", d, shape, &mut rng)?;
                    randomize(&mut store, &mut rng);
                    let x = normal_tensor(&[3, d], 1.0, &mut rng);
                    if name == "encoder_block" {
                        go(store, vec![x], &move |b, x| encoder_block(b, &p, x[0]), &mut rng)?
                    } else {
                        let kv = normal_tensor(&[4, d], 1.0, &mut rng);
                        go(
                            store,
                            vec![x, kv],
                            &move |b, x| decoder_block(b, &p, x[0], x[1]),
                            &mut rng,
                        )?
                    }
                }
                "encoder" => {
                    let cfg = micro_encoder();
                    let p = EncoderParams::init(&mut store, cfg, &mut rng)?;
                    randomize(&mut store, &mut rng);
                    let frames = Tensor::from_fn(vec![2, 4, 4, 3], |_| rng.random::<f64>());
                    go(
                        store,
                        vec![],
                        &move |b, _| {
                            let (v, z) = encode_sequence(b, &p, &frames)?;
                            Var::concat(&[v, z.mean_axis(0)?.mean_axis(0)?], 0)
                        },
                        &mut rng,
                    )?
                }
                "ssp" => {
                    let p = SspParams::init(&mut store, 4, 2, shape, &mut rng)?;
                    randomize(&mut store, &mut rng);
                    let m = normal_tensor(&[2, 4], 1.0, &mut rng);
                    let v = normal_tensor(&[4, 4], 1.0, &mut rng);
                    go(store, vec![m, v], &move |b, x| ssp_forward(b, &p, x[0], x[1]), &mut rng)?
                }
                "tmd_chain" => {
                    let p = TmdParams::init(&mut store, d, shape, &mut rng)?;
                    randomize(&mut store, &mut rng);
                    let z = normal_tensor(&[2, 3, 3, d], 1.0, &mut rng);
                    go(store, vec![z], &move |b, x| tmd_forward(b, &p, x[0]), &mut rng)?
                }
                "v2m_loss" => {
                    let v = normal_tensor(&[4, d], 1.0, &mut rng);
                    let m = normal_tensor(&[2, d], 1.0, &mut rng);
                    go(
                        store,
                        vec![v, m],
                        &|_, x| v2m_loss(x[0], x[1], &[1, 1, 2, 2], &[1, 2]),
                        &mut rng,
                    )?
                }
                "triplet_loss" => {
                    let v = normal_tensor(&[4, d], 1.0, &mut rng);
                    // large margin keeps every hinge active
                    go(
                        store,
                        vec![v],
                        &|_, x| Ok(triplet_loss(x[0], &[1, 1, 2, 2], 10.0)?.0),
                        &mut rng,
                    )?
                }
                "ce_loss" => {
                    let logits = normal_tensor(&[4, 3], 1.0, &mut rng);
                    go(
                        store,
                        vec![logits],
                        &|_, x| ce_label_smooth(x[0], &[0, 2, 1, 0], LABEL_SMOOTHING),
                        &mut rng,
                    )?
                }
                "total_loss" => {
                    let cfg = ModelConfig {
                        ssp_heads: 2,
                        ssp_blocks: 1,
                        fusion: Fusion::Tmd,
                        ..ModelConfig::new(micro_encoder(), 2)
                    };
                    let mut model = TfClip::<f64>::init(cfg, &mut rng)?;
                    randomize(&mut model.store, &mut rng);
                    // distinct per-sequence appearance keeps the prompt
                    // decoder's attention away from the uniform, flat regime
                    let looks = normal_tensor(&[4, 48], 2.0, &mut rng);
                    let frames = Tensor::from_fn(vec![4, 2, 4, 4, 3], |i| {
                        looks.data()[(i / 96) * 48 + i % 48] + rng.random::<f64>()
                    });
                    let rows = normal_tensor(&[2, 4], 1.0, &mut rng);
                    let bank = MemoryBank::from_rows(rows, vec![1, 2], "gradcheck")?;
                    let store = model.store.clone();
                    go(
                        store,
                        vec![],
                        &move |b, _| Ok(model.loss(b, &bank, &frames, &[1, 2], &[1, 1, 2, 2])?.total),
                        &mut rng,
                    )?
                }
                other => unreachable!("unknown component {other}"),
            }
        };
        log::info!("gradcheck {name}: {:.3e}", row.max_rel_err);
        rows.push(row);
    }
    Ok(rows)
}
