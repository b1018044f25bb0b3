//! Finite-difference check of every layer's backward pass in f64.
//!
//! ```text
//! cargo run --release --example gradcheck -- [seed]
//! ```

use tfclip::checks::{run_gradcheck, table};

fn main() -> tfclip::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let start = std::time::Instant::now();
    let rows = run_gradcheck(seed, None)?;
    print!("{}", table(&rows));
    let failed = rows.iter().filter(|r| !r.passed()).count();
    println!("{} components, {failed} failed, {:.1?}", rows.len(), start.elapsed());
    if failed > 0 {
        std::process::exit(1);
    }
    Ok(())
}
