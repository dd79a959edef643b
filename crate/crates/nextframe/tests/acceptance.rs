//! One PASS/FAIL line per acceptance criterion.
//!
//! Criteria 1-5, 8, 11a and 12 always run. The trained-model criteria
//! (3 on trained weights, 6, 7, 9, 10, 11b) need `tau0.bfun`, `tau1.bfun`,
//! `tau2.bfun` and `data.vseq` in the directory named by
//! `NEXTFRAME_TRAINED_DIR`; without it they are reported as skipped.

use std::process::{Command, ExitCode};
use std::time::Instant;

use nextframe::checks::{self, Check, Trained};
use nextframe_core::net::{DenoiserModel, ModelArch};
use nextframe_core::rng;

const SEED: u64 = 0;

fn selftest_binary() -> Check {
    let scratch = tempfile::tempdir().expect("tempdir");
    let t0 = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_nextframe"))
        .args(["--quiet", "selftest", "--seed", "0", "--scratch"])
        .arg(scratch.path().join("st"))
        .output();
    let secs = t0.elapsed().as_secs_f64();
    let (passed, detail) = match out {
        Ok(o) => {
            let stdout = String::from_utf8_lossy(&o.stdout);
            let summary = stdout.lines().last().unwrap_or("").to_string();
            (
                o.status.success() && secs < 600.0,
                format!("`nextframe selftest` exit {:?} in {secs:.1}s: {summary}", o.status.code()),
            )
        }
        Err(e) => (false, format!("could not run selftest: {e}")),
    };
    Check {
        id: "12".into(),
        passed,
        detail,
        seconds: secs,
    }
}

fn main() -> ExitCode {
    // `cargo test -- --list` enumerates targets without running them
    if std::env::args().skip(1).any(|a| a == "--list") {
        println!("acceptance: test");
        return ExitCode::SUCCESS;
    }
    let scratch = tempfile::tempdir().expect("tempdir");
    let untrained: Vec<DenoiserModel> = (0..3)
        .map(|t| DenoiserModel::new(ModelArch::new(t, 8), &mut rng::stream(SEED, 30 + t as u64)).unwrap())
        .collect();
    let named: Vec<(&str, &DenoiserModel)> = ["tau0", "tau1", "tau2"].into_iter().zip(&untrained).collect();

    let mut results = vec![
        checks::miyasawa(SEED, 1000),
        checks::autodiff(SEED, 3),
        checks::homogeneity(&named, SEED),
        checks::dataset_invariants(SEED, 1000),
        checks::sampling_1d(SEED, 2000),
        checks::sampler_algebra(SEED),
        checks::partition_identity(SEED),
        checks::round_trips(SEED, scratch.path()),
        selftest_binary(),
    ];
    // runtime bounds stated with the criteria
    for (id, limit) in [("1", 1.0), ("2", 30.0)] {
        if let Some(c) = results.iter_mut().find(|c| c.id == id) {
            if c.seconds >= limit {
                c.passed = false;
                c.detail += &format!("; runtime {:.1}s exceeds {limit}s", c.seconds);
            }
        }
    }
    results[2].id = "3".into();
    results[2].detail = format!("untrained {}", results[2].detail);
    results[7].detail = format!("{}; see selftest line below", results[7].detail);

    let mut skipped = Vec::new();
    match std::env::var_os("NEXTFRAME_TRAINED_DIR") {
        Some(dir) => match Trained::load(dir.as_ref()) {
            Ok(t) => {
                let named: Vec<(&str, &DenoiserModel)> = ["tau0", "tau1", "tau2"].into_iter().zip(t.models.iter()).collect();
                let mut h = checks::homogeneity(&named, SEED);
                h.detail = format!("trained {}", h.detail);
                results.push(h);
                results.push(checks::conditioning_gain(&t, SEED));
                results.push(checks::unconditional_slope(&t, SEED));
                results.push(checks::occlusion_decisions(&t, SEED, 64).0);
                results.push(checks::rollout_coherence(&t, SEED));
                results.push(checks::cue_crossing_order(&t, SEED));
            }
            Err(e) => {
                for id in ["3", "6", "7", "9", "10", "11b"] {
                    results.push(Check {
                        id: id.into(),
                        passed: false,
                        detail: format!("trained models unavailable: {e:#}"),
                        seconds: 0.0,
                    });
                }
            }
        },
        None => skipped.extend(["3 (trained)", "6", "7", "9", "10", "11b"]),
    }

    let order = |id: &str| -> (u32, String) {
        let n: String = id.chars().take_while(|c| c.is_ascii_digit()).collect();
        (n.parse().unwrap_or(99), id.to_string())
    };
    results.sort_by_key(|c| order(&c.id));
    println!();
    for c in &results {
        println!("{}", c.line());
    }
    for s in &skipped {
        println!("criterion {s:<4} SKIPPED (set NEXTFRAME_TRAINED_DIR to a directory with tau0/1/2.bfun and data.vseq)");
    }
    let failed: Vec<&str> = results.iter().filter(|c| !c.passed).map(|c| c.id.as_str()).collect();
    println!(
        "acceptance: {} passed, {} failed {:?}, {} skipped",
        results.len() - failed.len(),
        failed.len(),
        failed,
        skipped.len()
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
