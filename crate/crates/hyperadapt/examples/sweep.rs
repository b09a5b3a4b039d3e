//! Greedy sequential hyperparameter search: axes are tuned one at a time in
//! a fixed order, each axis keeping the other undecided axes at their first
//! value and the decided ones at their winners. Cost is the sum of the grid
//! sizes instead of their product (16 runs here instead of 4^4 = 256).
//!
//! The objective below is a mock with a known separable optimum, so the
//! sweep's choice can be checked against exhaustive search.
//!
//! Run with: cargo run --example sweep

use std::collections::BTreeMap;

use hyperadapt::training::{greedy_sweep, stage2_axes, SweepAxis, STAGE2_LR_GRID_DESK};

fn score(c: &BTreeMap<String, f64>) -> f64 {
    // Separable bowl with per-axis optima: width 16, lr 3e-4, batches 8/16.
    let term = |x: f64, opt: f64| -((x.ln() - opt.ln()).powi(2));
    term(c["adapter_width"], 16.0)
        + term(c["lr"], 3e-4)
        + term(c["task_batch"], 8.0)
        + term(c["example_batch"], 16.0)
}

fn main() {
    let axes: Vec<SweepAxis> = stage2_axes(&STAGE2_LR_GRID_DESK);
    println!("axes in search order:");
    for ax in &axes {
        println!("  {:14} {:?}", ax.name, ax.values);
    }
    let budget: usize = axes.iter().map(|a| a.values.len()).sum();

    let mut evals = 0usize;
    let (best, trace) = greedy_sweep(&axes, |c| {
        evals += 1;
        Ok::<f64, String>(score(c))
    })
    .unwrap();

    println!("\ntrace ({evals} evaluations, budget {budget}):");
    for e in &trace {
        println!("  score {:+.4}  {}", e.score, serde_json::to_string(&e.config).unwrap());
    }
    assert_eq!(evals, budget, "greedy search costs the sum of the axis sizes");

    println!("\nchosen: {}", serde_json::to_string(&best).unwrap());

    // Exhaustive search over the full product grid for comparison.
    let mut exhaustive = None;
    for &w in &axes[0].values {
        for &lr in &axes[1].values {
            for &tb in &axes[2].values {
                for &eb in &axes[3].values {
                    let c: BTreeMap<String, f64> = [
                        ("adapter_width".to_string(), w),
                        ("lr".to_string(), lr),
                        ("task_batch".to_string(), tb),
                        ("example_batch".to_string(), eb),
                    ]
                    .into_iter()
                    .collect();
                    let s = score(&c);
                    if exhaustive.as_ref().map_or(true, |(bs, _)| s > *bs) {
                        exhaustive = Some((s, c));
                    }
                }
            }
        }
    }
    let (ex_score, ex_best) = exhaustive.unwrap();
    println!(
        "exhaustive (256 evaluations) agrees: {} (score {ex_score:+.4})",
        serde_json::to_string(&ex_best).unwrap()
    );
    assert_eq!(best, ex_best, "separable objective: greedy matches exhaustive");
}
