//! The `tfclip` command line tool.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};

use crate::checkpoint::Checkpoint;
use crate::checks::{run_gradcheck, table};
use crate::config::{Profile, TrainConfig};
use crate::data::{synth_generate, Dataset};
use crate::error::{Error, Result};
use crate::eval::{embeddings_csv, evaluate_extracted, extract_features, Extracted};
use crate::model::{Fusion, TfClip};
use crate::numerics::Tensor;
use crate::train::{load_model, StepLog, Trainer};

pub const CHECKPOINT_FILE: &str = "checkpoint.tfck";
pub const LOG_FILE: &str = "train_log.csv";
pub const REPORT_FILE: &str = "eval_report.txt";

#[derive(Debug, Parser)]
#[command(
    name = "tfclip",
    version,
    about = "Video person re-identification on synthetic tracklets"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: Common,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// `key = value` overrides applied on top of the profile.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory (or file for export-embeddings).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for generation and feature extraction.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// `tap` selects the fixed-memory baseline: no prompt decoder, mean pooling.
    #[arg(long, global = true, value_parser = parse_fusion)]
    pub fusion: Option<Fusion>,
    #[arg(long, global = true, default_value = "desk", value_parser = parse_profile)]
    pub profile: Profile,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the synthetic train and test splits.
    MakeData,
    /// Train from a generated dataset, checkpointing every epoch.
    Train {
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Continue from a checkpoint instead of starting fresh.
        #[arg(long)]
        resume: Option<PathBuf>,
        /// Build the model and run one forward pass without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Rank-k and mAP of a checkpoint on the held-out split.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        /// Also write per-query average precision.
        #[arg(long)]
        per_query: bool,
        /// Also write the test embeddings.
        #[arg(long)]
        embeddings: bool,
    },
    /// Compare analytic and finite-difference gradients of every layer.
    Gradcheck {
        #[arg(long, hide = true)]
        corrupt: Option<String>,
    },
    /// Write `[v ‖ v̂]` of every tracklet of a split as CSV.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "data")]
        data: PathBuf,
        #[arg(long, default_value = "test")]
        split: String,
    },
}

fn parse_fusion(s: &str) -> Result<Fusion> {
    s.parse()
}

fn parse_profile(s: &str) -> Result<Profile> {
    s.parse()
}

/// What a command did, for the caller to print or check.
#[derive(Debug)]
pub enum Outcome {
    Done,
    /// A check ran and at least one item failed.
    Failed(String),
}

/// Profile, then config file, then flags.
pub fn resolve_config(common: &Common) -> Result<TrainConfig> {
    let base = TrainConfig::profile(common.profile);
    let mut cfg = match &common.config {
        Some(p) => TrainConfig::load(p, base)?,
        None => base,
    };
    if let Some(seed) = common.seed {
        cfg.seed = seed;
        cfg.data.seed = seed;
    }
    match common.fusion {
        Some(Fusion::Tap) => {
            cfg.model.fusion = Fusion::Tap;
            cfg.model.use_ssp = false;
        }
        Some(Fusion::Tmd) => cfg.model.fusion = Fusion::Tmd,
        None => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Widths produced by one forward pass.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DryRun {
    pub v: usize,
    pub v_hat: usize,
    pub feature: usize,
    pub patches: usize,
    pub frames: usize,
    pub parameters: usize,
}

impl DryRun {
    pub fn report(&self) -> String {
        format!(
            "patches = {}\nframes = {}\nparameters = {}\nv = {}\nv_hat = {}\nfeature = {}\n",
            self.patches, self.frames, self.parameters, self.v, self.v_hat, self.feature
        )
    }
}

/// Initializes the configured model and encodes one random sequence.
pub fn dry_run(cfg: &TrainConfig) -> Result<DryRun> {
    let enc = cfg.model.encoder;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let model = TfClip::<f32>::init(cfg.model.clone(), &mut rng)?;
    let unit = Uniform::new(0.0f32, 1.0).expect("valid range");
    let shape = vec![1, cfg.seq_len, enc.height, enc.width, 3];
    let n = shape.iter().product();
    let frames = Tensor::new(shape, unit.sample_iter(&mut rng).take(n).collect())?;
    let (v, v_hat) = model.embed_parts(&frames)?;
    let feature = model.embed(&frames)?;
    Ok(DryRun {
        v: v.shape()[1],
        v_hat: v_hat.shape()[1],
        feature: feature.shape()[1],
        patches: enc.num_patches(),
        frames: cfg.seq_len,
        parameters: model.store.iter().map(|(_, t)| t.numel()).sum(),
    })
}

fn out_dir(common: &Common, default: &str) -> Result<PathBuf> {
    let dir = common.out.clone().unwrap_or_else(|| PathBuf::from(default));
    fs::create_dir_all(&dir)?;
    Ok(dir)
}

fn load_split(dir: &Path, name: &str) -> Result<Dataset> {
    Dataset::load(dir, name)
}

pub fn make_data(common: &Common) -> Result<Outcome> {
    let cfg = resolve_config(common)?;
    let dir = out_dir(common, "data")?;
    let splits = synth_generate(&cfg.data)?;
    splits.train.save(&dir, "train")?;
    splits.test.save(&dir, "test")?;
    let d = &cfg.data;
    println!(
        "{} identities x {} tracklets x {} frames, {} cameras, {}x{} pixels",
        d.identities, d.tracklets_per_identity, d.frames_per_tracklet, d.cameras, d.height, d.width
    );
    for (name, ds) in [("train", &splits.train), ("test", &splits.test)] {
        println!(
            "{name}: {} tracklets, {} frames -> {}",
            ds.manifest.len(),
            ds.manifest.total_frames(),
            dir.join(name).display()
        );
    }
    Ok(Outcome::Done)
}

pub fn train(common: &Common, data: &Path, resume: Option<&Path>, dry: bool) -> Result<Outcome> {
    let cfg = resolve_config(common)?;
    if dry || common.profile == Profile::PaperShape {
        if !dry {
            log::info!("profile is shape-only, running a dry pass instead of training");
        }
        print!("{}", dry_run(&cfg)?.report());
        return Ok(Outcome::Done);
    }
    let dir = out_dir(common, "run")?;
    let train = load_split(data, "train")?;
    let mut trainer = match resume {
        Some(p) => {
            if common.config.is_some() {
                log::warn!("--config ignored, the checkpoint carries its own configuration");
            }
            Trainer::<f32>::from_checkpoint(&Checkpoint::load(p)?)?
        }
        None => Trainer::<f32>::new(cfg, &train)?,
    };
    let log_path = dir.join(LOG_FILE);
    let mut log_file = if resume.is_some() && log_path.exists() {
        fs::OpenOptions::new().append(true).open(&log_path)?
    } else {
        let mut f = fs::File::create(&log_path)?;
        writeln!(f, "{}", StepLog::CSV_HEADER)?;
        f
    };
    while !trainer.is_done() {
        let mut io = Ok(());
        let logs = trainer.run_epoch(&train, |s| {
            if io.is_ok() {
                io = writeln!(log_file, "{}", s.csv_row());
            }
        })?;
        io?;
        trainer.checkpoint()?.save(&dir.join(CHECKPOINT_FILE))?;
        let mean = logs.iter().map(|l| l.total).sum::<f64>() / logs.len().max(1) as f64;
        println!(
            "epoch {:>3}/{}  lr {:.2e}  loss {mean:.4}",
            trainer.epoch, trainer.config.epochs, logs[0].lr
        );
    }
    println!("checkpoint -> {}", dir.join(CHECKPOINT_FILE).display());
    Ok(Outcome::Done)
}

/// Model from a checkpoint, checked against `--config` when one is given.
fn model_for_eval(common: &Common, checkpoint: &Path) -> Result<(TrainConfig, TfClip<f32>)> {
    let (cfg, model) = load_model::<f32>(&Checkpoint::load(checkpoint)?)?;
    if common.config.is_some() {
        let want = resolve_config(common)?;
        let (a, b) = (&want.model.encoder, &cfg.model.encoder);
        if a != b || want.model.feature_width() != cfg.model.feature_width() {
            return Err(Error::Config(format!(
                "checkpoint encoder is D={} d={} depth={} at {}x{}, config asks for D={} d={} depth={} at {}x{}",
                b.token_width,
                b.joint_width,
                b.depth,
                b.height,
                b.width,
                a.token_width,
                a.joint_width,
                a.depth,
                a.height,
                a.width
            )));
        }
    }
    Ok((cfg, model))
}

fn extract(common: &Common, checkpoint: &Path, data: &Path, split: &str) -> Result<Extracted> {
    let (cfg, model) = model_for_eval(common, checkpoint)?;
    let ds = load_split(data, split)?;
    extract_features(&model, &ds, cfg.seq_len)
}

pub fn eval(common: &Common, checkpoint: &Path, data: &Path, per_query: bool, embeddings: bool) -> Result<Outcome> {
    let x = extract(common, checkpoint, data, "test")?;
    let result = evaluate_extracted(&x)?;
    let report = result.report();
    print!("{report}");
    if let Some(dir) = &common.out {
        fs::create_dir_all(dir)?;
        fs::write(dir.join(REPORT_FILE), &report)?;
        if per_query {
            let (q, _) = crate::eval::cross_camera_split(&x.cams);
            let ids: Vec<u32> = q.iter().map(|&i| x.tracklet_ids[i]).collect();
            fs::write(dir.join("per_query_ap.csv"), result.per_query_csv(&ids))?;
        }
        if embeddings {
            fs::write(
                dir.join("embeddings.csv"),
                embeddings_csv(&x.tracklet_ids, &x.ids, &x.cams, &x.features),
            )?;
        }
    } else if per_query || embeddings {
        log::warn!("--per-query and --embeddings need --out");
    }
    Ok(Outcome::Done)
}

pub fn gradcheck(common: &Common, corrupt: Option<&str>) -> Result<Outcome> {
    let rows = run_gradcheck(common.seed.unwrap_or(0), corrupt)?;
    print!("{}", table(&rows));
    let failed: Vec<&str> = rows
        .iter()
        .filter(|r| !r.passed())
        .map(|r| r.component.as_str())
        .collect();
    if failed.is_empty() {
        Ok(Outcome::Done)
    } else {
        Ok(Outcome::Failed(format!(
            "gradient check failed for: {}",
            failed.join(", ")
        )))
    }
}

pub fn export_embeddings(common: &Common, checkpoint: &Path, data: &Path, split: &str) -> Result<Outcome> {
    if split != "train" && split != "test" {
        return Err(Error::Config(format!("split must be train or test, got {split:?}")));
    }
    let x = extract(common, checkpoint, data, split)?;
    let csv = embeddings_csv(&x.tracklet_ids, &x.ids, &x.cams, &x.features);
    match &common.out {
        Some(p) => {
            let path = if p.is_dir() {
                p.join(format!("{split}_embeddings.csv"))
            } else {
                p.clone()
            };
            fs::write(&path, csv)?;
            println!(
                "{} rows x {} features -> {}",
                x.features.rows,
                x.features.cols,
                path.display()
            );
        }
        None => print!("{csv}"),
    }
    Ok(Outcome::Done)
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    if let Some(n) = cli.common.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    }
    let c = &cli.common;
    match &cli.command {
        Command::MakeData => make_data(c),
        Command::Train { data, resume, dry_run } => train(c, data, resume.as_deref(), *dry_run),
        Command::Eval {
            checkpoint,
            data,
            per_query,
            embeddings,
        } => eval(c, checkpoint, data, *per_query, *embeddings),
        Command::Gradcheck { corrupt } => gradcheck(c, corrupt.as_deref()),
        Command::ExportEmbeddings {
            checkpoint,
            data,
            split,
        } => export_embeddings(c, checkpoint, data, split),
    }
}

/// Parses arguments, runs, and returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(&cli) {
        Ok(Outcome::Done) => 0,
        Ok(Outcome::Failed(msg)) => {
            eprintln!("{msg}");
            1
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn common(args: &[&str]) -> Common {
        let mut v = vec!["tfclip"];
        v.extend_from_slice(args);
        v.push("make-data");
        Cli::try_parse_from(v).unwrap().common
    }

    #[test]
    fn flags_override_profile() {
        let cfg = resolve_config(&common(&["--seed", "9", "--fusion", "tap"])).unwrap();
        assert_eq!((cfg.seed, cfg.data.seed), (9, 9));
        assert_eq!(cfg.model.fusion, Fusion::Tap);
        assert!(!cfg.model.use_ssp);
    }

    #[test]
    fn bad_values_exit_two() {
        assert_eq!(main_with_args(["tfclip", "--profile", "huge", "make-data"]), 2);
        assert_eq!(main_with_args(["tfclip", "--fusion", "conv", "make-data"]), 2);
        assert_eq!(main_with_args(["tfclip", "frobnicate"]), 2);
    }

    #[test]
    fn config_file_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.cfg");
        fs::write(&p, "height = 30\n").unwrap();
        let out = dir.path().join("o");
        let args = [
            "tfclip",
            "--config",
            p.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "make-data",
        ];
        assert_eq!(main_with_args(args), 2);
        assert!(!out.exists(), "validation runs before any output");
        let missing = dir.path().join("missing.cfg");
        assert_eq!(
            main_with_args(["tfclip", "--config", missing.to_str().unwrap(), "make-data"]),
            3
        );
    }
}
