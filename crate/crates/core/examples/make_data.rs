//! Generate the synthetic splits, write them to disk and read them back.
//!
//! ```text
//! cargo run --release --example make_data -- [out_dir]
//! ```

use std::path::PathBuf;

use tfclip::data::{synth_generate, Dataset, SynthConfig};

fn main() -> tfclip::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "data".into()));
    std::fs::create_dir_all(&dir)?;
    let config = SynthConfig::default();
    let splits = synth_generate(&config)?;
    splits.train.save(&dir, "train")?;
    splits.test.save(&dir, "test")?;

    let back = Dataset::load(&dir, "test")?;
    assert_eq!(back.manifest, splits.test.manifest);
    assert_eq!(back.frames.pixels(), splits.test.frames.pixels());

    for (i, r) in back.manifest.records.iter().enumerate().take(6) {
        let first = back.frame(i, 0);
        let mean = first.iter().sum::<f32>() / first.len() as f32;
        println!(
            "tracklet {:>3}  identity {:>2}  camera {}  {} frames  mean pixel {mean:.3}",
            r.tracklet_id, r.identity, r.camera, r.frame_count
        );
    }
    println!(
        "{} tracklets per split written to {}",
        back.manifest.len(),
        dir.display()
    );
    Ok(())
}
