//! Randomized operation sequences against a reference model.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use aba_core::domain::LevelState;
use aba_core::session::{
    replay, EventPayload, LiveSession, Outcome, SessionEvent, SessionId, TherapistId, TrialId, TrialOptions,
};
use aba_core::synth::{synthetic_curriculum, LadderConfig};
use aba_core::{Curriculum, PatientId, PatientProgress, StimulusId, Timestamp};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const CATS: [&str; 5] = ["tact", "listener", "vp_mts", "mand", "cooking"];

/// What the engine must answer, computed without the engine.
#[derive(Default)]
pub struct Model {
    active: bool,
    last: i64,
    presented: BTreeMap<String, (String, u8, StimulusId, BTreeSet<StimulusId>)>,
    answered: BTreeSet<String>,
    level: HashMap<String, u8>,
    count: HashMap<String, u32>,
}

impl Model {
    fn level(&self, cat: &str) -> u8 {
        self.level.get(cat).copied().unwrap_or(1)
    }
}

pub fn check_invariants(log: &[SessionEvent]) {
    assert!(matches!(log[0].payload, EventPayload::SessionStarted { .. }));
    let mut trials = BTreeSet::new();
    let mut answered = BTreeSet::new();
    let mut ended = false;
    for (i, e) in log.iter().enumerate() {
        assert_eq!(e.seq, i as u64);
        assert_eq!(e.session_id, log[0].session_id);
        if i > 0 {
            assert!(e.timestamp >= log[i - 1].timestamp);
            assert!(!matches!(e.payload, EventPayload::SessionStarted { .. }));
        }
        assert!(!ended, "event after SESSION_ENDED");
        match &e.payload {
            EventPayload::TrialPresented(t) => {
                assert!(trials.insert(t.trial_id.clone()));
                assert!(!t.distractors.iter().any(|d| d.id == t.target.id));
                let ids: BTreeSet<_> = t.distractors.iter().map(|d| &d.id).collect();
                assert_eq!(ids.len(), t.distractors.len());
            }
            EventPayload::AnswerRecorded(a) => {
                assert!(trials.contains(&a.trial_id), "dangling answer");
                assert!(answered.insert(a.trial_id.clone()), "answered twice");
            }
            EventPayload::SessionEnded { .. } => ended = true,
            _ => {}
        }
    }
}

pub struct Run {
    pub ops: usize,
    pub logs: Vec<Vec<SessionEvent>>,
}

pub fn run(seed: u64, curriculum: &Curriculum, required: u32) -> Run {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let patient = PatientId(seed);
    let mut progress = PatientProgress::new(patient);
    let mut model = Model::default();
    let mut logs = Vec::new();
    let mut ops = 0;
    let mut t = 1_000i64;
    for s in 0..rng.random_range(1..5) {
        let mut live = LiveSession::start(
            SessionId::new(format!("ses-{seed}-{s}")),
            TherapistId::new("th"),
            progress.clone(),
            Timestamp(t),
        );
        model.active = true;
        model.last = t;
        model.presented.clear();
        model.answered.clear();
        for _ in 0..rng.random_range(50..700) {
            ops += 1;
            let before = live.clone();
            let at = model.last + rng.random_range(-50..400);
            let roll = rng.random_range(0..100);
            if roll < 45 {
                let cat = CATS[rng.random_range(0..CATS.len())];
                let expected = if !model.active {
                    Some("SESSION_NOT_ACTIVE")
                } else if cat == "cooking" {
                    Some("UNKNOWN_CATEGORY")
                } else if cat == "mand" {
                    Some("UNSUPPORTED_CATEGORY")
                } else if model.level(cat) > 15 {
                    Some("CATEGORY_COMPLETE")
                } else if at < model.last {
                    Some("TIMESTAMP_REGRESSION")
                } else {
                    None
                };
                let options = TrialOptions { seed: Some(rng.random()), interests: BTreeSet::new() };
                match live.present_trial(curriculum, &cat.into(), &options, Timestamp(at)) {
                    Ok(spec) => {
                        assert_eq!(expected, None, "present {cat} should fail");
                        // strict ladder order
                        assert_eq!(spec.objective.level, model.level(cat));
                        assert_eq!(spec.distractors.len(), if cat == "tact" { 0 } else { 3 });
                        let shown = spec.distractors.iter().map(|d| d.id.clone()).collect();
                        model.presented.insert(
                            spec.trial_id.to_string(),
                            (cat.to_owned(), spec.objective.level, spec.target.id.clone(), shown),
                        );
                        model.last = at;
                    }
                    Err(e) => {
                        assert_eq!(Some(e.code()), expected);
                        assert_eq!(live, before, "rejected op changed state");
                    }
                }
            } else if roll < 95 {
                let known: Vec<String> = model.presented.keys().cloned().collect();
                let id = if known.is_empty() || rng.random_bool(0.05) {
                    format!("t{}", rng.random_range(0..10_000))
                } else {
                    known[rng.random_range(0..known.len())].clone()
                };
                let outcome = [Outcome::Correct, Outcome::Incorrect, Outcome::NoResponse][rng.random_range(0..3)];
                let slot = model.presented.get(&id).cloned();
                let selected = match (&slot, rng.random_range(0..4)) {
                    (_, 0) => None,
                    (Some((_, _, target, _)), 1) => Some(target.clone()),
                    (Some((_, _, _, shown)), 2) if !shown.is_empty() => shown.iter().next().cloned(),
                    _ => Some(StimulusId::new("not-a-card")),
                };
                let expected = if !model.active {
                    Some("SESSION_NOT_ACTIVE")
                } else if slot.is_none() {
                    Some("UNKNOWN_TRIAL")
                } else if model.answered.contains(&id) {
                    Some("DUPLICATE_ANSWER")
                } else if at < model.last {
                    Some("TIMESTAMP_REGRESSION")
                } else if selected.as_ref().is_some_and(|s| {
                    let (_, _, target, shown) = slot.as_ref().unwrap();
                    s != target && !shown.contains(s)
                }) {
                    Some("INVALID_SELECTION")
                } else {
                    None
                };
                match live.record_answer(&TrialId::new(id.clone()), outcome, selected, Timestamp(at)) {
                    Ok(r) => {
                        assert_eq!(expected, None);
                        model.answered.insert(id.clone());
                        model.last = at;
                        let (cat, level, _, _) = slot.unwrap();
                        let mut completed = false;
                        if outcome == Outcome::Correct && model.level(&cat) == level {
                            let c = model.count.entry(cat.clone()).or_default();
                            *c += 1;
                            if *c == required {
                                *c = 0;
                                *model.level.entry(cat.clone()).or_insert(1) += 1;
                                completed = true;
                            }
                        }
                        assert_eq!(r.objective_completed, completed);
                        assert!(!r.objective_completed || outcome == Outcome::Correct);
                        let c = &cat.as_str().into();
                        assert_eq!(live.progress().category(c).correct_count_at_level, model.count.get(&cat).copied().unwrap_or(0));
                        let level_state = match model.level(&cat) {
                            16 => LevelState::Complete,
                            l => LevelState::Level(l),
                        };
                        assert_eq!(live.progress().current_level(c), level_state);
                    }
                    Err(e) => {
                        assert_eq!(Some(e.code()), expected);
                        assert_eq!(live, before);
                    }
                }
            } else {
                let expected = if !model.active {
                    Some("SESSION_NOT_ACTIVE")
                } else if at < model.last {
                    Some("TIMESTAMP_REGRESSION")
                } else {
                    None
                };
                match live.end(Timestamp(at), false) {
                    Ok(_) => {
                        assert_eq!(expected, None);
                        model.active = false;
                        model.last = at;
                    }
                    Err(e) => {
                        assert_eq!(Some(e.code()), expected);
                        assert_eq!(live, before);
                    }
                }
            }
        }
        if model.active {
            live.end(Timestamp(model.last + 1), false).unwrap();
            model.active = false;
        }
        let replayed = replay(live.events(), &progress).unwrap();
        assert_eq!(replayed.canonical_state(), live.canonical_state(), "replay diverged, seed {seed}");
        check_invariants(live.events());
        let (_, next, events) = live.into_parts();
        progress = next;
        t = model.last + 3_600_000;
        logs.push(events);
    }
    Run { ops, logs }
}

/// Runs seeded sessions until at least `min_ops` operations were checked,
/// then checks exactly-once completion and ladder order over each patient's
/// logs. Returns the number of operations.
pub fn random_operations(min_ops: usize) -> usize {
    let mut ops = 0;
    let mut seed = 0;
    let curricula: Vec<(u32, Curriculum)> = [1, 2, 4]
        .into_iter()
        .map(|r| (r, synthetic_curriculum(&LadderConfig { required_correct: r, pool_extra: 1, distractors: 3 })))
        .collect();
    while ops < min_ops {
        seed += 1;
        let (required, c) = &curricula[seed as usize % curricula.len()];
        let run = run(seed, c, *required);
        ops += run.ops;

        let mut done = BTreeSet::new();
        for log in &run.logs {
            for e in log {
                if let EventPayload::ObjectiveCompleted(c) = &e.payload {
                    assert!(done.insert(c.objective.clone()), "completed twice: {:?}", c.objective);
                }
                if let EventPayload::TrialPresented(t) = &e.payload {
                    for lower in 1..t.objective.level {
                        let o = aba_core::session::ObjectiveRef { category: t.objective.category.clone(), level: lower };
                        assert!(done.contains(&o), "level {} presented before {lower}", t.objective.level);
                    }
                }
            }
        }
    }
    ops
}

/// Cuts each log of at least `min_sessions` sessions after every event,
/// replays the prefix, ends it if still open and replays again. Returns
/// (sessions, cuts).
pub fn every_truncation(min_sessions: usize) -> (usize, usize) {
    let c = synthetic_curriculum(&LadderConfig { required_correct: 2, pool_extra: 1, distractors: 3 });
    let mut sessions = 0;
    let mut cuts = 0;
    let mut seed = 10_000;
    while sessions < min_sessions {
        seed += 1;
        let run = run(seed, &c, 2);
        let mut base = PatientProgress::new(PatientId(seed));
        for log in &run.logs {
            sessions += 1;
            for cut in 1..=log.len() {
                cuts += 1;
                let mut live = replay(&log[..cut], &base)
                    .unwrap_or_else(|e| panic!("seed {seed} cut {cut}: {e}"));
                if live.session().is_active() {
                    // the recovered session keeps working and stays replayable
                    let at = live.last_timestamp();
                    live.end(at, true).unwrap();
                    check_invariants(live.events());
                    replay(live.events(), &base).unwrap();
                }
            }
            base = replay(log, &base).unwrap().progress().clone();
        }
    }
    (sessions, cuts)
}
