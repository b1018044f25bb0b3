//! Independent oracles and end-to-end checks shared by the integration tests
//! and the acceptance runner. Each check returns a one-line summary or the
//! reason it failed.
#![allow(dead_code)]

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use tfclip::checkpoint::Checkpoint;
use tfclip::checks::run_gradcheck;
use tfclip::cli::dry_run;
use tfclip::clip_memory::{BatchMemoryView, MemoryBank};
use tfclip::config::TrainConfig;
use tfclip::data::{synth_generate, SynthSplits};
use tfclip::eval::{cmc_map, evaluate, EvalResult, FeatureMatrix};
use tfclip::losses::v2m_loss;
use tfclip::model::{Fusion, TfClip};
use tfclip::nn::BlockShape;
use tfclip::numerics::{Tape, Tensor};
use tfclip::params::ParamStore;
use tfclip::tmd::{aggregate_frame, init_memory_tokens, tap_fallback, tmd_forward, TmdParams};
use tfclip::train::{params_digest, StepLog, Trainer};

pub type Check = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn lib<T>(r: tfclip::Result<T>) -> Result<T, String> {
    r.map_err(|e| e.to_string())
}

pub fn normal_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---------------------------------------------------------------- gradients

pub fn gradients() -> Check {
    let start = Instant::now();
    let rows = lib(run_gradcheck(0, None))?;
    let elapsed = start.elapsed();
    let worst = rows
        .iter()
        .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
        .expect("rows");
    let failed: Vec<&str> = rows
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.component.as_str())
        .collect();
    ensure!(failed.is_empty(), "failing components: {failed:?}");
    ensure!(elapsed < Duration::from_secs(60), "took {elapsed:.1?}");
    Ok(format!(
        "{} components, worst {} at {:.2e}, {elapsed:.1?}",
        rows.len(),
        worst.component,
        worst.max_rel_err
    ))
}

// ----------------------------------------------------------------- formulas

/// Bank rows against per-identity means summed in plain loops.
pub fn bank_means() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let d = 6;
    let labels: Vec<u32> = (0..23).map(|i| [4, 9, 2, 7][i % 4]).collect();
    let feats: Vec<Tensor<f64>> = labels.iter().map(|_| normal_tensor(vec![d], &mut rng)).collect();
    let bank = lib(MemoryBank::from_features(&labels, &feats, "oracle"))?;
    let mut worst = 0.0f64;
    for &y in &[2u32, 4, 7, 9] {
        let mut acc = vec![0.0; d];
        let mut n = 0.0;
        for (l, f) in labels.iter().zip(&feats) {
            if *l == y {
                for (a, x) in acc.iter_mut().zip(f.data()) {
                    *a += x;
                }
                n += 1.0;
            }
        }
        let row = bank.row_of(y).ok_or(format!("no row for {y}"))?;
        let got = &bank.rows().data()[row * d..(row + 1) * d];
        let want: Vec<f64> = acc.iter().map(|a| a / n).collect();
        worst = worst.max(max_abs(got, &want));
    }
    ensure!(worst <= 1e-15, "bank rows differ from the means by {worst:e}");
    Ok(format!("4 identity means, max diff {worst:e}"))
}

fn micro_config(fusion: Fusion, use_ssp: bool) -> tfclip::model::ModelConfig {
    use tfclip::encoder::EncoderConfig;
    tfclip::model::ModelConfig {
        fusion,
        use_ssp,
        ssp_heads: 2,
        ..tfclip::model::ModelConfig::new(
            EncoderConfig {
                height: 8,
                width: 4,
                patch: 4,
                token_width: 8,
                joint_width: 4,
                depth: 2,
                block: BlockShape { heads: 2, expansion: 2 },
            },
            3,
        )
    }
}

/// With every parameter random except the zero prompt-decoder output
/// projections (and output bias), the updated memory is the memory.
pub fn residual_identity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut model = lib(TfClip::<f64>::init(micro_config(Fusion::Tmd, true), &mut rng))?;
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        let name = model.store.name(id).to_string();
        let zero = name.starts_with("ssp.") && [".wo", ".w2", ".b2"].iter().any(|s| name.ends_with(s));
        let t = model.store.get_mut(id);
        *t = if zero {
            Tensor::zeros(t.shape().to_vec())
        } else {
            normal_tensor(t.shape().to_vec(), &mut rng).map(|x| x * 0.5)
        };
    }
    let frames = Tensor::from_fn(vec![4, 2, 8, 4, 3], |_| rng.random::<f64>());
    let rows: Vec<Tensor<f64>> = (0..3).map(|_| normal_tensor(vec![4], &mut rng)).collect();
    let bank = lib(MemoryBank::from_features(&[1, 2, 3], &rows, "oracle"))?;
    let tape = Tape::new();
    let b = model.store.bind(&tape, false);
    let out = lib(model.forward(&b, &frames))?;
    let ssp = model.ssp.as_ref().ok_or("no decoder")?;
    let view = lib(BatchMemoryView::prompted(&bank, &b, ssp, &[3, 1], out.v))?;
    let (m, m2) = (view.rows.to_tensor(), view.updated.to_tensor());
    let bits = |t: &Tensor<f64>| t.data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
    ensure!(bits(&m) == bits(&m2), "M' differs from M");
    let spread = max_abs(&out.v.to_tensor().data()[0..4], &out.v.to_tensor().data()[4..8]);
    ensure!(spread > 1e-3, "degenerate fixture, sequence features coincide");
    Ok("M' == M bit-wise for 2 rows under a random encoder".into())
}

fn tmd_setup(width: usize, rng: &mut ChaCha8Rng) -> (ParamStore<f64>, TmdParams) {
    let mut store = ParamStore::new();
    let p = TmdParams::init(&mut store, width, BlockShape { heads: 2, expansion: 2 }, rng).expect("init");
    for t in store.tensors_mut() {
        *t = normal_tensor(t.shape().to_vec(), rng).map(|x| x * 0.5);
    }
    (store, p)
}

/// Memory tokens and frame aggregation against direct arithmetic.
pub fn tmd_means() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (t, n, d) = (3, 5, 4);
    let (store, p) = tmd_setup(d, &mut rng);
    let z = normal_tensor(vec![t, n, d], &mut rng);
    let tape = Tape::new();
    let b = store.bind(&tape, true);
    let s = lib(init_memory_tokens(&b, &p, tape.constant(z.clone())))?.to_tensor();
    let theta = store.get(p.theta).data().to_vec();
    let mut worst7 = 0.0f64;
    for f in 0..t {
        let mut mean = vec![0.0; d];
        for i in 0..n {
            for c in 0..d {
                mean[c] += z.data()[(f * n + i) * d + c] / n as f64;
            }
        }
        for c in 0..d {
            let want: f64 = (0..d).map(|r| mean[r] * theta[r * d + c]).sum();
            worst7 = worst7.max((s.data()[f * d + c] - want).abs());
        }
    }
    let z_hat = normal_tensor(vec![t, n, d], &mut rng);
    let s_hat = normal_tensor(vec![t, d], &mut rng);
    let agg = lib(aggregate_frame(
        tape.constant(z_hat.clone()),
        tape.constant(s_hat.clone()),
    ))?
    .to_tensor();
    let mut worst10 = 0.0f64;
    for f in 0..t {
        for c in 0..d {
            let sum: f64 = (0..n).map(|i| z_hat.data()[(f * n + i) * d + c]).sum::<f64>() + s_hat.data()[f * d + c];
            worst10 = worst10.max((agg.data()[f * d + c] - sum / (n + 1) as f64).abs());
        }
    }
    ensure!(
        worst7 <= 1e-12 && worst10 <= 1e-12,
        "memory token {worst7:e}, aggregation {worst10:e}"
    );
    Ok(format!("memory tokens {worst7:.1e}, frame aggregation {worst10:.1e}"))
}

/// Video-to-memory loss on 2 identities x 2 sequences, straight from the formula.
pub fn v2m_direct() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let d = 5;
    let v = normal_tensor(vec![4, d], &mut rng);
    let m = normal_tensor(vec![2, d], &mut rng);
    let labels = [6u32, 6, 2, 2];
    let mem_ids = [2u32, 6];
    let tape = Tape::new();
    let got = lib(v2m_loss(
        tape.constant(v.clone()),
        tape.constant(m.clone()),
        &labels,
        &mem_ids,
    ))?
    .item();

    let row = |t: &Tensor<f64>, i: usize| t.data()[i * d..(i + 1) * d].to_vec();
    let cos = |a: &[f64], b: &[f64]| {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        dot / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
    };
    let mut total = 0.0;
    for (r, &y) in mem_ids.iter().enumerate() {
        let my = row(&m, r);
        let denom: f64 = (0..4).map(|j| cos(&row(&v, j), &my).exp()).sum();
        let pos: Vec<usize> = (0..4).filter(|&j| labels[j] == y).collect();
        let l: f64 = pos.iter().map(|&p| (cos(&row(&v, p), &my).exp() / denom).ln()).sum();
        total += -l / pos.len() as f64;
    }
    let want = total / mem_ids.len() as f64;
    ensure!((got - want).abs() <= 1e-10, "loss {got} vs direct {want}");
    Ok(format!("loss {got:.12} vs direct, diff {:.1e}", (got - want).abs()))
}

// --------------------------------------------------------------- invariants

/// Sequence heads under a frame permutation, to summation rounding.
pub fn permutation_invariance() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (t, n, d) = (5, 4, 8);
    let (store, p) = tmd_setup(d, &mut rng);
    let z = normal_tensor(vec![t, n, d], &mut rng);
    let perm = [3usize, 0, 4, 2, 1];
    let zp = Tensor::from_fn(vec![t, n, d], |i| {
        let (f, rest) = (i / (n * d), i % (n * d));
        z.data()[perm[f] * n * d + rest]
    });
    let tape = Tape::new();
    let b = store.bind(&tape, true);
    let mut worst = [0.0f64; 2];
    for (k, head) in ["tmd", "tap"].iter().enumerate() {
        let run = |x: &Tensor<f64>| -> tfclip::Result<Tensor<f64>> {
            let x = tape.constant(x.clone());
            Ok(if *head == "tmd" {
                tmd_forward(&b, &p, x)?
            } else {
                tap_fallback(x, d)?
            }
            .to_tensor())
        };
        worst[k] = max_abs(lib(run(&z))?.data(), lib(run(&zp))?.data());
    }
    ensure!(
        worst.iter().all(|&w| w <= 1e-12),
        "tmd {:e}, tap {:e}",
        worst[0],
        worst[1]
    );
    Ok(format!("tmd {:.1e}, tap {:.1e}", worst[0], worst[1]))
}

pub fn softmax_rows() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst = 0.0f64;
    for scale in [1e-3, 1.0, 30.0, 300.0] {
        let x: Tensor<f32> = normal_tensor(vec![16, 33], &mut rng).map(|v| v * scale).cast();
        let tape = Tape::new();
        let s = tape.constant(x).softmax().to_tensor();
        for r in s.data().chunks(33) {
            worst = worst.max((r.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs());
        }
    }
    ensure!(worst <= 1e-6, "row sum off by {worst:e}");
    Ok(format!(
        "f32 rows at logit scales up to 300, max |sum - 1| = {worst:.1e}"
    ))
}

pub fn v2m_scale_invariance() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let v = normal_tensor(vec![6, 4], &mut rng);
    let m = normal_tensor(vec![3, 4], &mut rng);
    let labels = [1u32, 1, 2, 2, 3, 3];
    let ids = [1u32, 2, 3];
    let scaled = |t: &Tensor<f64>, rng: &mut ChaCha8Rng| {
        let c: Vec<f64> = (0..t.shape()[0]).map(|_| rng.random_range(0.01..100.0)).collect();
        Tensor::from_fn(t.shape().to_vec(), |i| t.data()[i] * c[i / t.shape()[1]])
    };
    let tape = Tape::new();
    let l =
        |a: Tensor<f64>, b: Tensor<f64>| v2m_loss(tape.constant(a), tape.constant(b), &labels, &ids).map(|x| x.item());
    let base = lib(l(v.clone(), m.clone()))?;
    let other = lib(l(scaled(&v, &mut rng), scaled(&m, &mut rng)))?;
    ensure!((base - other).abs() <= 1e-12, "{base} vs {other}");
    Ok(format!("loss {base:.6} unchanged to {:.1e}", (base - other).abs()))
}

/// No gradient reaches the memory bank, and the triplet and classification
/// terms do not reach the prompt decoder.
pub fn gradient_routing() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let model = lib(TfClip::<f64>::init(micro_config(Fusion::Tmd, true), &mut rng))?;
    let mut store = model.store.clone();
    for t in store.tensors_mut() {
        *t = normal_tensor(t.shape().to_vec(), &mut rng).map(|x| x * 0.5);
    }
    let model = TfClip { store, ..model };
    let frames = Tensor::from_fn(vec![4, 2, 8, 4, 3], |_| rng.random::<f64>());
    let rows: Vec<Tensor<f64>> = (0..3).map(|_| normal_tensor(vec![4], &mut rng)).collect();
    let bank = lib(MemoryBank::from_features(&[1, 2, 3], &rows, "oracle"))?;
    let before = bank.rows().clone();
    let tape = Tape::new();
    let b = model.store.bind(&tape, false);
    let out = lib(model.forward(&b, &frames))?;
    let ssp = model.ssp.as_ref().ok_or("no decoder")?;
    let view = lib(BatchMemoryView::prompted(&bank, &b, ssp, &[1, 2], out.v))?;
    let bundle = lib(model.loss(&b, &bank, &frames, &[1, 2], &[1, 1, 2, 2]))?;

    let mut g = lib(tape.backward(bundle.total))?;
    ensure!(g.get(view.rows).is_none(), "memory rows received a gradient");
    let ssp_grad = |grads: &mut tfclip::numerics::Grads<f64>| {
        let all = b.collect_grads(grads);
        model
            .store
            .ids()
            .zip(all)
            .filter(|(id, _)| model.store.name(*id).starts_with("ssp."))
            .map(|(_, g)| g.map_or(0.0, |t| t.data().iter().map(|x| x.abs()).sum::<f64>()))
            .sum::<f64>()
    };
    let through_all = ssp_grad(&mut g);
    let other = lib(bundle.triplet.add(bundle.ce))?;
    let mut g2 = lib(tape.backward(other))?;
    let through_metric = ssp_grad(&mut g2);
    ensure!(through_all > 0.0, "decoder got no gradient from the full objective");
    ensure!(
        through_metric == 0.0,
        "triplet + CE put {through_metric:e} into the decoder"
    );
    ensure!(bank.rows().data() == before.data(), "bank changed");
    Ok(format!(
        "bank untouched, decoder |grad| {through_all:.2e} from V2M and 0 from triplet + CE"
    ))
}

// ------------------------------------------------------------------ ranking

/// Counts instead of sorting: a positive at distance `t` has precision
/// `#{positives <= t} / #{candidates <= t}`.
pub fn brute_force_metrics(
    dist: &FeatureMatrix,
    q_ids: &[u32],
    g_ids: &[u32],
    q_cams: &[u32],
    g_cams: &[u32],
) -> Option<(Vec<f64>, f64)> {
    let ng = dist.cols;
    let mut firsts = vec![];
    let mut aps = vec![];
    for q in 0..dist.rows {
        let d = dist.row(q);
        let cand: Vec<usize> = (0..ng)
            .filter(|&g| !(g_ids[g] == q_ids[q] && g_cams[g] == q_cams[q]))
            .collect();
        let mut pos: Vec<usize> = cand.iter().copied().filter(|&g| g_ids[g] == q_ids[q]).collect();
        if pos.is_empty() {
            continue;
        }
        pos.sort_by(|&a, &b| d[a].total_cmp(&d[b]));
        let mut sum = 0.0;
        for &p in &pos {
            let hits = pos.iter().filter(|&&o| d[o] <= d[p]).count();
            let seen = cand.iter().filter(|&&o| d[o] <= d[p]).count();
            sum += hits as f64 / seen as f64;
        }
        aps.push(sum / pos.len() as f64);
        firsts.push(cand.iter().filter(|&&o| d[o] < d[pos[0]]).count() + 1);
    }
    if aps.is_empty() {
        return None;
    }
    let cmc = (1..=ng.min(50))
        .map(|k| firsts.iter().filter(|&&f| f <= k).count() as f64 / firsts.len() as f64)
        .collect();
    Some((cmc, aps.iter().sum::<f64>() / aps.len() as f64))
}

pub fn ranking_oracle(instances: usize) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut compared = 0;
    for case in 0..instances {
        let data: Vec<f64> = (0..100).map(|_| rng.random::<f64>()).collect();
        let dist = FeatureMatrix::new(5, 20, data).map_err(|e| e.to_string())?;
        let q_ids: Vec<u32> = (0..5).map(|_| rng.random_range(1..=4)).collect();
        let g_ids: Vec<u32> = (0..20).map(|_| rng.random_range(1..=4)).collect();
        let q_cams: Vec<u32> = (0..5).map(|_| rng.random_range(1..=3)).collect();
        let g_cams: Vec<u32> = (0..20).map(|_| rng.random_range(1..=3)).collect();
        let got = cmc_map(&dist, &q_ids, &g_ids, &q_cams, &g_cams);
        match (brute_force_metrics(&dist, &q_ids, &g_ids, &q_cams, &g_cams), got) {
            (None, Err(_)) => {}
            (Some((cmc, map)), Ok(r)) => {
                ensure!(r.cmc == cmc, "case {case}: cmc {:?} vs {cmc:?}", r.cmc);
                ensure!(r.map == map, "case {case}: mAP {} vs {map}", r.map);
                compared += 1;
            }
            (want, got) => return Err(format!("case {case}: oracle {want:?}, cmc_map {got:?}")),
        }
    }
    Ok(format!(
        "{compared} of {instances} instances compared exactly, {} without a valid query",
        instances - compared
    ))
}

// ----------------------------------------------------------------- training

pub struct Run {
    pub result: EvalResult,
    pub checkpoint: Vec<u8>,
    pub elapsed: Duration,
}

pub fn train_and_eval(config: TrainConfig, splits: &SynthSplits) -> tfclip::Result<Run> {
    let start = Instant::now();
    let mut trainer = Trainer::<f32>::new(config, &splits.train)?;
    while !trainer.is_done() {
        trainer.run_epoch(&splits.train, |_| {})?;
    }
    Ok(Run {
        result: evaluate(&trainer.model, &splits.test, trainer.config.seq_len)?,
        checkpoint: trainer.checkpoint()?.to_bytes(),
        elapsed: start.elapsed(),
    })
}

pub fn seeded(mut c: TrainConfig, seed: u64) -> TrainConfig {
    c.seed = seed;
    c.data.seed = seed;
    c
}

pub fn baseline(mut c: TrainConfig) -> TrainConfig {
    c.model.fusion = Fusion::Tap;
    c.model.use_ssp = false;
    c
}

pub fn hard(mut c: TrainConfig) -> TrainConfig {
    c.data = c.data.hard();
    c
}

pub fn desk_learning(seeds: &[u64]) -> Check {
    let mut parts = vec![];
    let mut bad = vec![];
    for &s in seeds {
        let cfg = seeded(TrainConfig::desk(), s);
        let splits = lib(synth_generate(&cfg.data))?;
        let run = lib(train_and_eval(cfg, &splits))?;
        let (r1, map) = (run.result.rank(1), run.result.map);
        parts.push(format!("seed {s}: r1 {r1:.3} mAP {map:.3} {:.0?}", run.elapsed));
        if r1 < 0.95 || map < 0.90 || run.elapsed > Duration::from_secs(600) {
            bad.push(s);
        }
    }
    ensure!(bad.is_empty(), "seeds {bad:?} missed; {}", parts.join(", "));
    Ok(parts.join(", "))
}

pub fn ablation_direction(seeds: &[u64]) -> Check {
    let mut wins = 0;
    let mut parts = vec![];
    for &s in seeds {
        let full = hard(seeded(TrainConfig::desk(), s));
        let splits = lib(synth_generate(&full.data))?;
        let a = lib(train_and_eval(full.clone(), &splits))?.result.map;
        let b = lib(train_and_eval(baseline(full), &splits))?.result.map;
        wins += (a >= b) as usize;
        parts.push(format!("seed {s}: {a:.3} vs {b:.3}"));
    }
    let msg = format!("full >= baseline on {wins}/{}; {}", seeds.len(), parts.join(", "));
    ensure!(wins * 3 >= seeds.len() * 2, "{msg}");
    Ok(msg)
}

// -------------------------------------------------------------- persistence

fn trajectory(
    trainer: &mut Trainer<f32>,
    train: &tfclip::data::Dataset,
    epochs: usize,
) -> tfclip::Result<Vec<StepLog>> {
    let mut out = vec![];
    for _ in 0..epochs {
        out.extend(trainer.run_epoch(train, |_| {})?);
    }
    Ok(out)
}

pub fn determinism() -> Check {
    let mut cfg = TrainConfig::desk();
    cfg.epochs = 4;
    let splits = lib(synth_generate(&cfg.data))?;
    let a = lib(train_and_eval(cfg.clone(), &splits))?;
    let b = lib(train_and_eval(cfg.clone(), &splits))?;
    ensure!(a.checkpoint == b.checkpoint, "same seed gave different checkpoints");

    let mut straight = lib(Trainer::<f32>::new(cfg.clone(), &splits.train))?;
    let full = lib(trajectory(&mut straight, &splits.train, 4))?;
    let mut first = lib(Trainer::<f32>::new(cfg, &splits.train))?;
    let mut resumed = lib(trajectory(&mut first, &splits.train, 2))?;
    let bytes = lib(first.checkpoint())?.to_bytes();
    let loaded = lib(Checkpoint::from_bytes(&bytes))?;
    ensure!(loaded.to_bytes() == bytes, "load then save changed the bytes");
    let mut second = lib(Trainer::<f32>::from_checkpoint(&loaded))?;
    ensure!(
        lib(second.checkpoint())?.to_bytes() == bytes,
        "restored trainer saves different bytes"
    );
    resumed.extend(lib(trajectory(&mut second, &splits.train, 2))?);
    let same = full.len() == resumed.len()
        && full.iter().zip(&resumed).all(|(x, y)| {
            [x.l_v2m, x.l_tri, x.l_ce, x.total].map(f64::to_bits)
                == [y.l_v2m, y.l_tri, y.l_ce, y.total].map(f64::to_bits)
        });
    ensure!(same, "resumed loss trajectory diverged");
    ensure!(
        params_digest(&straight.model, "") == params_digest(&second.model, ""),
        "resumed parameters differ"
    );
    Ok(format!(
        "{} byte checkpoints identical, {} resumed steps bit-exact, round trip byte-identical",
        a.checkpoint.len(),
        full.len()
    ))
}

// ------------------------------------------------------------ full geometry

pub fn paper_shape() -> Check {
    let r = lib(dry_run(&TrainConfig::paper_shape()))?;
    let got = (r.v, r.v_hat, r.feature, r.patches, r.frames);
    ensure!(
        got == (512, 768, 1280, 128, 8),
        "got v, v_hat, feature, N_p, T = {got:?}"
    );
    Ok(format!(
        "v {} v_hat {} feature {} N_p {} T {}",
        r.v, r.v_hat, r.feature, r.patches, r.frames
    ))
}
