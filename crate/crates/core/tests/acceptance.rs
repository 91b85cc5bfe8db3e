//! Acceptance suite: eleven criteria, one PASS/FAIL line each. Runs without
//! the libtest harness so every line is printed; exits non-zero on failure.

use std::time::Instant;

use prosody_flow::corpus::{generate_utterances, N_SPEAKERS};
use prosody_flow::model::{ModelConfig, ProsodyModel};
use prosody_flow::phrasing::DEFAULT_MIN_GAP_FRAMES;
use prosody_flow::selftest::{self, all_of, Check};
use prosody_flow::training::ModelSize;

const SEED: u64 = 0;
const OVERFIT_STEPS: u64 = 500;

fn corpus_is_reproducible() -> Check {
    let a = generate_utterances(8, 12, 1);
    let b = generate_utterances(8, 12, 1);
    let same = matches!((&a, &b), (Ok(x), Ok(y)) if x.utterances == y.utterances && x.lexicon == y.lexicon);
    Check::new("corpus_generation", same, format!("two generations identical: {same}"))
}

fn main() {
    let start = Instant::now();
    let toy = generate_utterances(8, 12, 1).expect("toy corpus");
    let wide = generate_utterances(100, 24, 2).expect("wide corpus");
    let toy_model = ProsodyModel::new(
        ModelConfig::toy(toy.lexicon.n_phones(), N_SPEAKERS),
        &toy.lexicon.words(),
        SEED,
    )
    .expect("toy model");

    // The overfit run is shared by criteria 5 and 10.
    let overfit = selftest::overfit_run(&toy, OVERFIT_STEPS);

    let criteria: Vec<(usize, Check)> = vec![
        (1, selftest::mas_oracle(100, SEED)),
        (2, selftest::alignment_laws(1000, SEED)),
        (3, all_of("gradient_checks", &selftest::gradient_checks(SEED))),
        (4, selftest::flow_identities(SEED)),
        (
            5,
            match &overfit {
                Ok((_, reports)) => selftest::overfit_convergence(reports),
                Err(e) => Check::new("overfit_convergence", false, format!("training failed: {e}")),
            },
        ),
        (6, selftest::detach_contracts(&toy, ModelSize::Toy)),
        (7, selftest::metric_oracles(200, SEED)),
        (
            8,
            all_of(
                "break_pipeline",
                &[
                    selftest::break_pipeline(&toy.utterances, DEFAULT_MIN_GAP_FRAMES),
                    selftest::break_pipeline(&wide.utterances, DEFAULT_MIN_GAP_FRAMES),
                ],
            ),
        ),
        (9, selftest::pitch_invariance(&toy_model, 100, SEED)),
        (
            10,
            match &overfit {
                Ok((state, _)) => selftest::control_monotonicity(&state.model, &toy),
                Err(e) => Check::new("control_monotonicity", false, format!("training failed: {e}")),
            },
        ),
        (
            11,
            all_of(
                "determinism_resume",
                &[
                    corpus_is_reproducible(),
                    selftest::determinism_and_resume(&toy, ModelSize::Toy, 3),
                ],
            ),
        ),
    ];

    let mut failed = 0;
    for (n, c) in &criteria {
        println!("criterion {n:>2} {}", c);
        failed += usize::from(!c.passed);
    }
    println!(
        "{} criteria, {failed} failed ({:.0} s)",
        criteria.len(),
        start.elapsed().as_secs_f64()
    );
    if failed > 0 {
        std::process::exit(1);
    }
}
