//! Runs every acceptance criterion and prints one line per criterion.
//! Exits nonzero if any criterion fails.

mod common;

use std::time::Instant;

use common::Check;

type Part = (&'static str, fn() -> Check);
type Criterion = (&'static str, Box<dyn Fn() -> Check>);

fn all_of(parts: &[Part]) -> Check {
    let mut ok = vec![];
    for (name, f) in parts {
        match f() {
            Ok(msg) => ok.push(format!("{name}: {msg}")),
            Err(msg) => return Err(format!("{name}: {msg}")),
        }
    }
    Ok(ok.join("; "))
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("TFCLIP_LOG", "warn")).init();
    let criteria: [Criterion; 8] = [
        ("1 gradient soundness", Box::new(common::gradients)),
        (
            "2 formula oracles",
            Box::new(|| {
                all_of(&[
                    ("bank means", common::bank_means),
                    ("residual identity", common::residual_identity),
                    ("memory token and aggregation means", common::tmd_means),
                    ("v2m direct", common::v2m_direct),
                ])
            }),
        ),
        (
            "3 structural invariants",
            Box::new(|| {
                all_of(&[
                    ("frame permutation", common::permutation_invariance),
                    ("softmax rows", common::softmax_rows),
                    ("v2m rescaling", common::v2m_scale_invariance),
                    ("gradient routing", common::gradient_routing),
                ])
            }),
        ),
        ("4 ranking metric oracle", Box::new(|| common::ranking_oracle(200))),
        ("5 end-to-end learning", Box::new(|| common::desk_learning(&[0, 1, 2]))),
        (
            "6 ablation direction",
            Box::new(|| common::ablation_direction(&[0, 1, 2])),
        ),
        ("7 determinism and persistence", Box::new(common::determinism)),
        ("8 paper-shape dry run", Box::new(common::paper_shape)),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        let start = Instant::now();
        let outcome = check();
        let t = start.elapsed();
        match outcome {
            Ok(msg) => println!("PASS  {name} ({t:.1?}): {msg}"),
            Err(msg) => {
                failed += 1;
                println!("FAIL  {name} ({t:.1?}): {msg}");
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
