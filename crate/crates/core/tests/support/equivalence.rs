//! Every metric against the brute-force oracle on randomized synthetic logs.

use std::collections::BTreeSet;

use aba_core::analytics::{
    category_error_summary, completion_stats, engagement, error_rate, objective_report, ratio_to_f64,
    TimeWindow,
};
use aba_core::export::export_dataset;
use aba_core::session::{events_to_jsonl, SessionEvent};
use aba_core::synth::{generate_sessions, CategoryBehavior, InterArrival, LadderConfig, SyntheticProfile};
use aba_core::{CategoryId, PatientId, Timestamp};
use aba_oracle as oracle;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CATS: [&str; 3] = ["tact", "listener", "vp_mts"];

pub fn random_corpus(seed: u64) -> (Vec<Vec<SessionEvent>>, usize) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let profile = SyntheticProfile {
        patients: rng.random_range(1..5),
        first_patient_id: rng.random_range(1..1000),
        categories: CATS
            .iter()
            .filter_map(|c| {
                rng.random_bool(0.8).then(|| CategoryBehavior {
                    category: (*c).into(),
                    p_err: rng.random_range(0.0..0.8),
                    p_no_response: rng.random_range(0.0..1.0),
                    objectives: rng.random_range(0..5),
                })
            })
            .collect(),
        inter_arrival: InterArrival { mean_ms: rng.random_range(500..20_000), jitter_ms: rng.random_range(0..500) },
        max_answers_per_session: rng.random_range(1..25),
        max_answers_per_objective: 400,
        session_gap_ms: rng.random_range(3_600_000..400_000_000),
        start_at: Timestamp(1_700_000_000_000 + rng.random_range(0..10_000_000)),
        seed: rng.random(),
    };
    let ladder = LadderConfig { required_correct: rng.random_range(1..7), pool_extra: 1, distractors: 3 };
    let data = generate_sessions(&profile, &ladder).unwrap();
    let n = data.logs.len();
    (data.logs, n)
}

/// Float metrics may differ from the oracle by at most this much.
pub const TOLERANCE: f64 = 1e-9;

pub fn close(a: f64, b: f64) -> bool {
    (a - b).abs() <= TOLERANCE
}

/// Compares every metric with the oracle over random corpora until at least
/// `min_sessions` sessions were covered. Returns (sessions, comparisons).
pub fn compare_with_oracle(min_sessions: usize) -> (usize, u64) {
    let mut sessions = 0;
    let mut checked = 0u64;
    let mut seed = 0;
    while sessions < min_sessions {
        seed += 1;
        let (logs, n) = random_corpus(seed);
        sessions += n;
        let texts: Vec<String> = logs.iter().map(|l| events_to_jsonl(l)).collect();
        let t = oracle::Tables::from_jsonl(&texts);

        // export round trip gives the same rows
        let export = export_dataset(&logs, TimeWindow::ALL, None);
        let csv = export.to_csv();
        let from_csv = oracle::Tables::from_csv(&csv[0].1, &csv[1].1, &csv[2].1);
        assert_eq!(from_csv, t, "seed {seed}");

        // ψ per objective, exact
        let scopes: BTreeSet<(u64, String, u64)> =
            t.answers.iter().map(|a| (a.patient, a.category.clone(), a.level)).collect();
        for (p, c, l) in &scopes {
            let ours = error_rate(&logs, PatientId(*p), &c.as_str().into(), *l as u8).unwrap();
            let (e, r) = oracle::errors_at(&t, *p, c, *l).unwrap();
            assert_eq!((ours.errors, ours.required), (e, r));
            let (num, den) = oracle::reduce(u128::from(e), u128::from(r));
            assert_eq!((u128::from(*ours.psi.numer()), u128::from(*ours.psi.denom())), (num, den));
            checked += 1;
        }

        // engagement
        for log in &logs {
            let ours = engagement(log);
            let theirs = oracle::engagement_ms(&t, log[0].session_id.as_str());
            assert_eq!(ours.present, theirs.is_some());
            assert_eq!(ours.duration_ms, theirs.unwrap_or(0));
            checked += 1;
        }

        // completion counts in random windows
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xABCD);
        let patients: BTreeSet<u64> = t.patients();
        let cats: BTreeSet<String> = CATS.iter().map(|c| c.to_string()).collect();
        for _ in 0..4 {
            let a = 1_700_000_000_000 + rng.random_range(-10_000_000i64..2_000_000_000);
            let b = a + rng.random_range(0..3_000_000_000);
            let ours = completion_stats(
                &logs,
                &patients.iter().map(|p| PatientId(*p)).collect(),
                TimeWindow::new(Timestamp(a), Timestamp(b)).unwrap(),
                &cats.iter().map(|c| CategoryId::from(c.as_str())).collect(),
            );
            let theirs = oracle::completion_counts(&t, &patients, a, b, &cats);
            let totals: Vec<f64> = theirs.values().map(|m| m.values().sum::<u64>() as f64).collect();
            for (p, m) in &theirs {
                for (c, count) in m {
                    assert_eq!(u64::from(ours.per_patient[&PatientId(*p)][&CategoryId::from(c.as_str())]), *count);
                }
            }
            if let Some(s) = oracle::summarize(&totals) {
                assert!(close(ours.summary.mean, s.mean) && close(ours.summary.sem, s.sem));
                assert_eq!((ours.summary.min, ours.summary.max), (s.min, s.max));
                assert!(close(ours.summary.mean * s.n as f64, f64::from(ours.total)));
            }
            checked += 1;
        }

        // category ψ summaries
        for c in CATS {
            let theirs = oracle::patient_psi(&t, c);
            match category_error_summary(&logs, &c.into()) {
                Ok(ours) => {
                    assert_eq!(ours.per_patient.len(), theirs.len());
                    for (p, exact) in &theirs {
                        assert!(close(ours.per_patient[&PatientId(*p)], oracle::to_f64(*exact)));
                    }
                    let s = oracle::category_summary(&t, c).unwrap();
                    assert!(close(ours.summary.mean, s.mean), "{} vs {}", ours.summary.mean, s.mean);
                    assert!(close(ours.summary.sem, s.sem));
                    assert!(close(ours.summary.min, s.min) && close(ours.summary.max, s.max));
                }
                Err(_) => assert!(theirs.is_empty()),
            }
            checked += 1;
        }

        // report responses for every completion
        for done in &t.completions {
            let ours = objective_report(&logs, PatientId(done.patient), &done.category.as_str().into(), done.level as u8)
                .unwrap();
            let theirs = oracle::report_responses(&t, done.patient, &done.category, done.level).unwrap();
            let listed: Vec<(String, i64)> =
                ours.correct_responses.iter().map(|r| (r.stimulus_label.clone(), r.answered_at.millis())).collect();
            assert_eq!(listed, theirs);
            assert_eq!(listed.len() as u32, ours.required_correct);
            let (e, r) = oracle::errors_at(&t, done.patient, &done.category, done.level).unwrap();
            assert!(close(ratio_to_f64(aba_core::analytics::psi(e, r)), e as f64 / r as f64));
            checked += 1;
        }
    }
    (sessions, checked)
}
