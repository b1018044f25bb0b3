//! Build the identity memory from the frozen initial encoder and look at how
//! the prompt decoder moves the rows of one batch.
//!
//! ```text
//! cargo run --release --example memory_prompt
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tfclip::clip_memory::BatchMemoryView;
use tfclip::config::TrainConfig;
use tfclip::data::{assemble, pk_sample, synth_generate, SampleMode};
use tfclip::numerics::Tape;
use tfclip::train::{build_memory_bank, Trainer};

fn main() -> tfclip::Result<()> {
    let mut config = TrainConfig::desk();
    config.epochs = 3;
    let splits = synth_generate(&config.data)?;
    let train = &splits.train;
    let bank = build_memory_bank(
        &Trainer::<f32>::new(config.clone(), train)?.model,
        train,
        config.seq_len,
    )?;
    // The residual branches start at zero, so under the step-0 snapshot the
    // class token never mixes with the patches and every row is the same.
    println!(
        "bank: {} identities x {} (snapshot {})",
        bank.len(),
        bank.width(),
        bank.snapshot_tag()
    );

    let mut trainer = Trainer::<f32>::new(config, train)?;
    while !trainer.is_done() {
        trainer.run_epoch(train, |_| {})?;
    }
    assert_eq!(trainer.bank.rows().data(), bank.rows().data(), "memory stays frozen");

    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pk = pk_sample(&train.manifest, 4, 2, &mut rng)?;
    let batch = assemble(train, &pk.indices, 4, SampleMode::Eval, &mut rng)?;
    let model = &trainer.model;
    let tape = Tape::new();
    let b = model.store.bind(&tape, true);
    let out = model.forward(&b, &batch.frames)?;
    let ssp = model.ssp.as_ref().expect("desk model has a prompt decoder");
    let view = BatchMemoryView::prompted(&trainer.bank, &b, ssp, &pk.identities, out.v)?;
    let (rows, updated) = (view.rows.to_tensor(), view.updated.to_tensor());
    let w = bank.width();
    for (i, id) in pk.identities.iter().enumerate() {
        let r = &rows.data()[i * w..(i + 1) * w];
        let u = &updated.data()[i * w..(i + 1) * w];
        let shift: f32 = r.iter().zip(u).map(|(a, b)| (a - b) * (a - b)).sum::<f32>().sqrt();
        let norm: f32 = r.iter().map(|a| a * a).sum::<f32>().sqrt();
        println!("identity {id:>2}: |M_y| = {norm:.3}, prompt shift = {shift:.3}");
    }
    Ok(())
}
