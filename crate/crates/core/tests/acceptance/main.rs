//! Acceptance criteria, one PASS/FAIL line each.
//!
//! `cargo test -p vocalis-core --test acceptance -- 3 8` runs a subset by number.

mod ascent;
mod contracts;
mod gradients;
mod oracles;
mod toy;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::Instant;

type Check = fn() -> anyhow::Result<String>;

const CRITERIA: [(u32, &str, Check); 10] = [
    (1, "finite-difference gradients", gradients::run),
    (2, "oracle equivalence", oracles::run),
    (3, "F-measure arithmetic", contracts::f_measure),
    (4, "mixing at target SNR", contracts::mixing),
    (5, "transfer contracts", contracts::transfer),
    (6, "toy source task", toy::source_task),
    (7, "transfer vs scratch on toy songs", toy::transfer_vs_scratch),
    (8, "conv stack shapes", contracts::stack_shapes),
    (9, "monotone filter-pattern ascent", ascent::run),
    (10, "end-to-end determinism", toy::determinism),
];

fn main() -> ExitCode {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, check) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let outcome = match catch_unwind(AssertUnwindSafe(check)) {
            Ok(Ok(detail)) => Ok(detail),
            Ok(Err(e)) => Err(format!("{e:#}")),
            Err(p) => Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into())),
        };
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS {id:>2} {name} ({secs:.1} s): {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL {id:>2} {name} ({secs:.1} s): {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
