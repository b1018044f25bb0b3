//! Interrupt training, resume from the saved checkpoint, and compare with an
//! uninterrupted run.
//!
//! ```text
//! cargo run --release --example checkpoint_resume
//! ```

use tfclip::checkpoint::Checkpoint;
use tfclip::config::TrainConfig;
use tfclip::data::synth_generate;
use tfclip::train::Trainer;

fn main() -> tfclip::Result<()> {
    let mut config = TrainConfig::desk();
    config.epochs = 4;
    let splits = synth_generate(&config.data)?;
    let dir = std::env::temp_dir().join("tfclip-resume-example");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("checkpoint.tfck");

    let mut straight = Trainer::<f32>::new(config.clone(), &splits.train)?;
    let mut full = vec![];
    while !straight.is_done() {
        full.extend(straight.run_epoch(&splits.train, |_| {})?);
    }

    let mut first = Trainer::<f32>::new(config, &splits.train)?;
    let mut resumed_log = vec![];
    for _ in 0..2 {
        resumed_log.extend(first.run_epoch(&splits.train, |_| {})?);
    }
    first.checkpoint()?.save(&path)?;
    drop(first);

    let ck = Checkpoint::load(&path)?;
    assert_eq!(ck.to_bytes(), std::fs::read(&path)?, "load then save is byte-identical");
    let mut second = Trainer::<f32>::from_checkpoint(&ck)?;
    while !second.is_done() {
        resumed_log.extend(second.run_epoch(&splits.train, |_| {})?);
    }

    let same = full
        .iter()
        .zip(&resumed_log)
        .all(|(a, b)| a.total.to_bits() == b.total.to_bits());
    let final_same = straight.checkpoint()?.to_bytes() == second.checkpoint()?.to_bytes();
    println!("{} steps, loss trajectories identical: {same}", full.len());
    println!("final checkpoints byte-identical: {final_same}");
    println!(
        "checkpoint of {} bytes at {}",
        std::fs::metadata(&path)?.len(),
        path.display()
    );
    Ok(())
}
