//! Full model against the fixed-memory, mean-pooled baseline on the harder
//! synthetic set (more noise, moving occluders, more clutter).
//!
//! ```text
//! cargo run --release --example ablation -- [seeds]
//! ```

use tfclip::config::TrainConfig;
use tfclip::data::synth_generate;
use tfclip::eval::evaluate;
use tfclip::model::Fusion;
use tfclip::train::Trainer;

fn run(config: TrainConfig) -> tfclip::Result<(f64, f64)> {
    let splits = synth_generate(&config.data)?;
    let mut trainer = Trainer::<f32>::new(config, &splits.train)?;
    while !trainer.is_done() {
        trainer.run_epoch(&splits.train, |_| {})?;
    }
    let r = evaluate(&trainer.model, &splits.test, trainer.config.seq_len)?;
    Ok((r.rank(1), r.map))
}

fn main() -> tfclip::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(3);
    println!("seed  model        rank1     mAP");
    let mut wins = 0;
    for seed in 0..seeds {
        let mut full = TrainConfig::desk();
        full.seed = seed;
        full.data = full.data.hard();
        full.data.seed = seed;
        let mut baseline = full.clone();
        baseline.model.fusion = Fusion::Tap;
        baseline.model.use_ssp = false;

        let (r_full, m_full) = run(full)?;
        let (r_base, m_base) = run(baseline)?;
        println!("{seed:>4}  ssp+tmd    {r_full:>7.3} {m_full:>7.3}");
        println!("{seed:>4}  memory+tap {r_base:>7.3} {m_base:>7.3}");
        wins += (m_full >= m_base) as u32;
    }
    println!("full model mAP >= baseline on {wins} of {seeds} seeds");
    Ok(())
}
