//! Train the desk profile on synthetic tracklets and report held-out accuracy.
//!
//! ```text
//! cargo run --release --example train_desk -- [seed]
//! ```

use std::time::Instant;

use tfclip::config::TrainConfig;
use tfclip::data::synth_generate;
use tfclip::eval::evaluate;
use tfclip::train::Trainer;

fn main() -> tfclip::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TFCLIP_LOG", "info")).init();
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut config = TrainConfig::desk();
    config.seed = seed;
    config.data.seed = seed;

    let start = Instant::now();
    let splits = synth_generate(&config.data)?;
    let mut trainer = Trainer::<f32>::new(config, &splits.train)?;
    while !trainer.is_done() {
        let logs = trainer.run_epoch(&splits.train, |_| {})?;
        let mean = logs.iter().map(|l| l.total).sum::<f64>() / logs.len() as f64;
        log::info!("epoch {:>2}  lr {:.1e}  mean loss {mean:.4}", trainer.epoch, logs[0].lr);
    }
    let result = evaluate(&trainer.model, &splits.test, trainer.config.seq_len)?;
    print!("{}", result.report());
    println!("elapsed = {:.1?}", start.elapsed());
    Ok(())
}
