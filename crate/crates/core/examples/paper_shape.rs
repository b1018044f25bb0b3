//! Instantiate the full-size geometry and check the widths of one forward
//! pass. Takes about a minute on one core.
//!
//! ```text
//! cargo run --release --example paper_shape
//! ```

use tfclip::cli::dry_run;
use tfclip::config::TrainConfig;

fn main() -> tfclip::Result<()> {
    let config = TrainConfig::paper_shape();
    let enc = config.model.encoder;
    println!(
        "{}x{} frames, patch {}, D = {}, d = {}, depth {}, {} heads",
        enc.height, enc.width, enc.patch, enc.token_width, enc.joint_width, enc.depth, enc.block.heads
    );
    let start = std::time::Instant::now();
    let shapes = dry_run(&config)?;
    print!("{}", shapes.report());
    println!("forward pass in {:.1?}", start.elapsed());
    Ok(())
}
