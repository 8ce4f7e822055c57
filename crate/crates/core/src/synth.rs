//! Seeded synthetic session generation for tests and fixtures.
//!
//! Logs are produced by driving real [`LiveSession`]s, so every generated log
//! satisfies the event invariants and replays cleanly. Output is a pure
//! function of the profile (or plan) and its seed; each patient draws from
//! its own RNG stream derived from the master seed.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::analytics::TimeWindow;
use crate::domain::{
    vbmapp_categories, CategoryId, Curriculum, GameType, Objective, ObjectiveLadder, PatientId,
    PatientProgress, Stimulus, StimulusId, DEFAULT_DISTRACTORS, DEFAULT_REQUIRED_CORRECT,
    LADDER_LEVELS,
};
use crate::session::{
    events_to_jsonl, LiveSession, Outcome, SessionEvent, SessionId, TherapistId, TrialOptions,
};
use crate::time::Timestamp;

const OBJECTS: [&str; 24] = [
    "ball", "car", "cup", "dog", "apple", "shoe", "spoon", "book", "chair", "cat", "bus", "hat",
    "banana", "train", "brush", "bed", "duck", "key", "boat", "bird", "sock", "plate", "clock",
    "bike",
];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct LadderConfig {
    pub required_correct: u32,
    /// Cards per level beyond `required_correct`.
    pub pool_extra: u32,
    pub distractors: u32,
}

impl Default for LadderConfig {
    fn default() -> Self {
        LadderConfig {
            required_correct: DEFAULT_REQUIRED_CORRECT,
            pool_extra: 2,
            distractors: DEFAULT_DISTRACTORS,
        }
    }
}

/// The 18 VB-MAPP categories with generated ladders and cards for the three
/// supported ones. Every level draws from its own cards.
pub fn synthetic_curriculum(config: &LadderConfig) -> Curriculum {
    let categories = vbmapp_categories();
    let mut ladders = Vec::new();
    let mut stimuli = Vec::new();
    for category in categories.iter().filter(|c| c.game_type.is_supported()) {
        let pool_size = config.required_correct.max(1) + config.pool_extra;
        let objectives = (1..=LADDER_LEVELS)
            .map(|level| {
                let pool: BTreeSet<StimulusId> = (0..pool_size)
                    .map(|i| {
                        let id = StimulusId::new(format!("{}-l{level:02}-c{i:03}", category.id));
                        let object = OBJECTS[(usize::from(level) * 7 + i as usize) % OBJECTS.len()];
                        stimuli.push(Stimulus {
                            id: id.clone(),
                            label: format!("{object} {level}.{i}"),
                            image_ref: format!("cards/{}/l{level:02}-c{i:03}.png", category.id),
                            interest_tags: if ["car", "bus", "train", "boat", "bike"].contains(&object) {
                                ["vehicles".to_owned()].into()
                            } else {
                                BTreeSet::new()
                            },
                        });
                        id
                    })
                    .collect();
                Objective {
                    level,
                    required_correct: config.required_correct.max(1),
                    stimulus_pool: pool,
                    distractors: Some(config.distractors),
                }
            })
            .collect();
        ladders.push(ObjectiveLadder { category: category.id.clone(), objectives });
    }
    Curriculum::new(categories, ladders, stimuli).expect("generated curriculum is well formed")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryBehavior {
    pub category: CategoryId,
    /// Probability that an answer is not correct.
    pub p_err: f64,
    /// Share of non-correct answers that are NO_RESPONSE.
    #[serde(default)]
    pub p_no_response: f64,
    /// Levels to complete.
    pub objectives: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterArrival {
    pub mean_ms: u64,
    pub jitter_ms: u64,
}

impl Default for InterArrival {
    fn default() -> Self {
        InterArrival { mean_ms: 8_000, jitter_ms: 4_000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticProfile {
    pub patients: u32,
    #[serde(default = "default_first_patient")]
    pub first_patient_id: u64,
    pub categories: Vec<CategoryBehavior>,
    #[serde(default)]
    pub inter_arrival: InterArrival,
    #[serde(default = "default_session_answers")]
    pub max_answers_per_session: u32,
    /// Stops a category whose current level has taken this many answers.
    #[serde(default = "default_objective_answers")]
    pub max_answers_per_objective: u32,
    #[serde(default = "default_session_gap")]
    pub session_gap_ms: i64,
    #[serde(default = "default_start")]
    pub start_at: Timestamp,
    pub seed: u64,
}

fn default_first_patient() -> u64 {
    1
}
fn default_session_answers() -> u32 {
    200
}
fn default_objective_answers() -> u32 {
    5_000
}
fn default_session_gap() -> i64 {
    2 * 24 * 3_600_000
}
fn default_start() -> Timestamp {
    // 2024-01-08T09:00:00Z
    Timestamp(1_704_704_400_000)
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProfileError {
    #[error("{field} = {value} is outside [0, 1]")]
    Propensity { field: String, value: f64 },
    #[error("category {0} has no ladder to practise")]
    UnknownCategory(CategoryId),
    #[error("category {category}: {objectives} objectives exceed the {LADDER_LEVELS}-level ladder")]
    TooManyObjectives { category: CategoryId, objectives: u32 },
    #[error("{0} must be positive")]
    NotPositive(&'static str),
    #[error("plan does not fit: {0}")]
    Plan(String),
}

impl SyntheticProfile {
    pub fn validate(&self, curriculum: &Curriculum) -> Result<(), ProfileError> {
        if self.max_answers_per_session == 0 {
            return Err(ProfileError::NotPositive("max_answers_per_session"));
        }
        if self.max_answers_per_objective == 0 {
            return Err(ProfileError::NotPositive("max_answers_per_objective"));
        }
        for c in &self.categories {
            for (field, value) in [("p_err", c.p_err), ("p_no_response", c.p_no_response)] {
                if !(0.0..=1.0).contains(&value) {
                    return Err(ProfileError::Propensity { field: format!("{}.{field}", c.category), value });
                }
            }
            let supported = curriculum
                .category(&c.category)
                .is_ok_and(|cat| cat.game_type.is_supported())
                && curriculum.ladder(&c.category).is_ok();
            if !supported {
                return Err(ProfileError::UnknownCategory(c.category.clone()));
            }
            if c.objectives > u32::from(LADDER_LEVELS) {
                return Err(ProfileError::TooManyObjectives {
                    category: c.category.clone(),
                    objectives: c.objectives,
                });
            }
        }
        Ok(())
    }
}

/// Generated curriculum plus one log per session, ordered by patient then
/// session start.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub curriculum: Curriculum,
    pub logs: Vec<Vec<SessionEvent>>,
}

impl SyntheticDataset {
    pub fn jsonl(&self) -> String {
        self.logs.iter().map(|l| events_to_jsonl(l)).collect()
    }

    /// SHA-256 over every log's JSON lines, in order.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for log in &self.logs {
            h.update(events_to_jsonl(log).as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Writes `curriculum.json` and `sessions/<session id>.jsonl`.
    pub fn write_to(&self, dir: &Path) -> io::Result<()> {
        let sessions = dir.join("sessions");
        fs::create_dir_all(&sessions)?;
        let curriculum = serde_json::to_string_pretty(&self.curriculum).map_err(io::Error::other)?;
        fs::write(dir.join("curriculum.json"), curriculum)?;
        for log in &self.logs {
            if let Some(first) = log.first() {
                fs::write(sessions.join(format!("{}.jsonl", first.session_id)), events_to_jsonl(log))?;
            }
        }
        Ok(())
    }
}

/// SplitMix64 step; gives each patient an independent stream.
pub fn derive_seed(master: u64, stream: u64) -> u64 {
    let mut z = master ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn latency(rng: &mut ChaCha8Rng, ia: InterArrival) -> i64 {
    let low = ia.mean_ms.saturating_sub(ia.jitter_ms);
    let high = ia.mean_ms + ia.jitter_ms;
    rng.random_range(low..=high).max(1) as i64
}

struct PatientSim<'c> {
    curriculum: &'c Curriculum,
    progress: PatientProgress,
    rng: ChaCha8Rng,
    logs: Vec<Vec<SessionEvent>>,
    inter_arrival: InterArrival,
}

impl<'c> PatientSim<'c> {
    fn new(curriculum: &'c Curriculum, patient: PatientId, seed: u64, inter_arrival: InterArrival) -> Self {
        PatientSim {
            curriculum,
            progress: PatientProgress::new(patient),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(seed, patient.0)),
            logs: Vec::new(),
            inter_arrival,
        }
    }

    fn open(&self, at: Timestamp) -> LiveSession {
        let id = SessionId::new(format!("syn-p{:04}-s{:03}", self.progress.patient_id.0, self.logs.len() + 1));
        LiveSession::start(id, TherapistId::from("th-synthetic"), self.progress.clone(), at)
    }

    /// Presents one trial and answers it; returns whether it completed the level.
    fn trial(&mut self, live: &mut LiveSession, category: &CategoryId, outcome: Outcome, t: &mut Timestamp) -> bool {
        let options = TrialOptions { seed: Some(self.rng.next_u64()), interests: BTreeSet::new() };
        let spec = live
            .present_trial(self.curriculum, category, &options, *t)
            .expect("simulation only presents practisable objectives");
        *t = t.plus_millis(latency(&mut self.rng, self.inter_arrival));
        let selected = match (outcome, spec.game_type) {
            (_, GameType::Tact) | (Outcome::NoResponse, _) => None,
            (Outcome::Correct, _) => Some(spec.target.id.clone()),
            (Outcome::Incorrect, _) => spec
                .distractors
                .get(self.rng.random_range(0..spec.distractors.len().max(1)))
                .map(|c| c.id.clone()),
        };
        live.record_answer(&spec.trial_id, outcome, selected, *t)
            .expect("answers are recorded in order")
            .objective_completed
    }

    fn close(&mut self, mut live: LiveSession, at: Timestamp) {
        live.end(at, false).expect("session is active");
        let (_, progress, events) = live.into_parts();
        self.progress = progress;
        self.logs.push(events);
    }
}

/// Random sessions driven by per-category error propensities.
///
/// With error probability `p`, a level needing `r` correct answers collects
/// on average `r·p/(1−p)` errors, so measured ψ converges to `p/(1−p)`.
pub fn generate_sessions(profile: &SyntheticProfile, ladder: &LadderConfig) -> Result<SyntheticDataset, ProfileError> {
    let curriculum = synthetic_curriculum(ladder);
    profile.validate(&curriculum)?;
    let mut logs = Vec::new();
    for index in 0..u64::from(profile.patients) {
        let patient = PatientId(profile.first_patient_id + index);
        let mut sim = PatientSim::new(&curriculum, patient, profile.seed, profile.inter_arrival);
        // (behavior, objectives left, answers on current level)
        let mut work: Vec<(&CategoryBehavior, u32, u32)> =
            profile.categories.iter().map(|c| (c, c.objectives, 0)).collect();
        let mut session_start = profile.start_at.plus_millis(index as i64 * 15 * 60_000);
        while work.iter().any(|w| w.1 > 0) {
            let mut t = session_start;
            let mut live = sim.open(t);
            let mut turn = 0usize;
            for _ in 0..profile.max_answers_per_session {
                let open: Vec<usize> = (0..work.len()).filter(|i| work[*i].1 > 0).collect();
                if open.is_empty() {
                    break;
                }
                let slot = open[turn % open.len()];
                turn += 1;
                let behavior = work[slot].0;
                let outcome = if sim.rng.random::<f64>() < behavior.p_err {
                    if sim.rng.random::<f64>() < behavior.p_no_response {
                        Outcome::NoResponse
                    } else {
                        Outcome::Incorrect
                    }
                } else {
                    Outcome::Correct
                };
                let w = &mut work[slot];
                if sim.trial(&mut live, &behavior.category, outcome, &mut t) {
                    w.1 -= 1;
                    w.2 = 0;
                } else {
                    w.2 += 1;
                    if w.2 >= profile.max_answers_per_objective {
                        w.1 = 0;
                    }
                }
            }
            sim.close(live, t.plus_millis(1_000));
            session_start = session_start.plus_millis(profile.session_gap_ms);
        }
        logs.append(&mut sim.logs);
    }
    Ok(SyntheticDataset { curriculum, logs })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlannedObjective {
    pub category: CategoryId,
    /// Index into [`CohortPlan::windows`].
    pub window: usize,
    pub errors: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientPlan {
    pub patient_id: PatientId,
    pub objectives: Vec<PlannedObjective>,
}

/// Exact per-objective script for a cohort: which levels complete in which
/// window and how many errors each collects on the way.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortPlan {
    pub seed: u64,
    pub required_correct: u32,
    /// Share of errors recorded as NO_RESPONSE.
    pub p_no_response: f64,
    pub inter_arrival: InterArrival,
    pub windows: Vec<TimeWindow>,
    pub patients: Vec<PatientPlan>,
}

/// Generates one session per planned objective. Each session answers the
/// level's required correct responses plus the planned errors, interleaved
/// at random, and ends on the completing answer.
pub fn generate_cohort(plan: &CohortPlan) -> Result<SyntheticDataset, ProfileError> {
    if !(0.0..=1.0).contains(&plan.p_no_response) {
        return Err(ProfileError::Propensity { field: "p_no_response".into(), value: plan.p_no_response });
    }
    if plan.required_correct == 0 {
        return Err(ProfileError::NotPositive("required_correct"));
    }
    let ladder = LadderConfig { required_correct: plan.required_correct, ..LadderConfig::default() };
    let curriculum = synthetic_curriculum(&ladder);
    let mut logs = Vec::new();
    for patient in &plan.patients {
        let mut sim = PatientSim::new(&curriculum, patient.patient_id, plan.seed, plan.inter_arrival);
        let mut per_category: BTreeMap<&CategoryId, u32> = BTreeMap::new();
        let mut last_end = Timestamp(i64::MIN);
        for (w, window) in plan.windows.iter().enumerate() {
            let due: Vec<&PlannedObjective> = patient.objectives.iter().filter(|o| o.window == w).collect();
            let span = window.to.millis() - window.from.millis();
            for (k, objective) in due.iter().enumerate() {
                if curriculum.ladder(&objective.category).is_err() {
                    return Err(ProfileError::UnknownCategory(objective.category.clone()));
                }
                let used = per_category.entry(&objective.category).or_default();
                *used += 1;
                if *used > u32::from(LADDER_LEVELS) {
                    return Err(ProfileError::TooManyObjectives {
                        category: objective.category.clone(),
                        objectives: *used,
                    });
                }
                let slot = window.from.plus_millis(span / (due.len() as i64 + 1) * (k as i64 + 1));
                let mut t = slot.max(last_end.plus_millis(3_600_000));
                let mut live = sim.open(t);
                let mut outcomes: Vec<Outcome> = (0..objective.errors)
                    .map(|_| {
                        if sim.rng.random::<f64>() < plan.p_no_response {
                            Outcome::NoResponse
                        } else {
                            Outcome::Incorrect
                        }
                    })
                    .chain((1..plan.required_correct).map(|_| Outcome::Correct))
                    .collect();
                outcomes.shuffle(&mut sim.rng);
                outcomes.push(Outcome::Correct);
                let mut completed = false;
                for outcome in outcomes {
                    completed = sim.trial(&mut live, &objective.category, outcome, &mut t);
                }
                debug_assert!(completed);
                if !window.contains(t) {
                    return Err(ProfileError::Plan(format!(
                        "patient {} objective {k} of window {w} completes outside the window",
                        patient.patient_id
                    )));
                }
                last_end = t.plus_millis(1_000);
                sim.close(live, last_end);
            }
        }
        logs.append(&mut sim.logs);
    }
    Ok(SyntheticDataset { curriculum, logs })
}

/// Aggregate targets a cohort plan is solved for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CohortTargets {
    pub patients: u32,
    pub first_patient_id: u64,
    /// Each window with the total completions wanted inside it.
    pub windows: Vec<(TimeWindow, u32)>,
    /// Wanted mean over patients of per-patient mean ψ, per category.
    pub category_psi: Vec<(CategoryId, f64)>,
    pub required_correct: u32,
    pub p_no_response: f64,
    pub inter_arrival: InterArrival,
    pub seed: u64,
}

/// Solves for a plan meeting the targets: completions are spread unevenly
/// over patients and categories, and each patient gets one error count per
/// category chosen so the cohort mean ψ lands on target (within
/// `0.5 / (required · patients in category)`).
pub fn solve_cohort(targets: &CohortTargets) -> Result<CohortPlan, ProfileError> {
    let n = targets.patients as usize;
    if n == 0 {
        return Err(ProfileError::NotPositive("patients"));
    }
    if targets.category_psi.is_empty() {
        return Err(ProfileError::Plan("no categories".into()));
    }
    let capacity = targets.category_psi.len() * usize::from(LADDER_LEVELS);
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(targets.seed, u64::MAX));
    let mut plans: Vec<PatientPlan> = (0..n)
        .map(|i| PatientPlan { patient_id: PatientId(targets.first_patient_id + i as u64), objectives: Vec::new() })
        .collect();
    let mut used: Vec<BTreeMap<usize, usize>> = vec![BTreeMap::new(); n];

    for (w, (_, total)) in targets.windows.iter().enumerate() {
        let total = *total as usize;
        let mut counts = vec![total / n; n];
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        for i in order.iter().take(total % n) {
            counts[*i] += 1;
        }
        // uneven spread, same total
        for _ in 0..total {
            let from = rng.random_range(0..n);
            let to = rng.random_range(0..n);
            if counts[from] > 1 {
                counts[from] -= 1;
                counts[to] += 1;
            }
        }
        for (p, count) in counts.into_iter().enumerate() {
            for _ in 0..count {
                let open: Vec<usize> = (0..targets.category_psi.len())
                    .filter(|c| used[p].get(c).copied().unwrap_or(0) < usize::from(LADDER_LEVELS))
                    .collect();
                if open.is_empty() {
                    return Err(ProfileError::Plan(format!(
                        "patient {} needs more than {capacity} objectives",
                        plans[p].patient_id
                    )));
                }
                let c = open[rng.random_range(0..open.len())];
                *used[p].entry(c).or_default() += 1;
                plans[p].objectives.push(PlannedObjective {
                    category: targets.category_psi[c].0.clone(),
                    window: w,
                    errors: 0,
                });
            }
        }
    }

    let required = f64::from(targets.required_correct);
    for (c, (category, psi)) in targets.category_psi.iter().enumerate() {
        let members: Vec<usize> = (0..n).filter(|p| used[*p].contains_key(&c)).collect();
        if members.is_empty() {
            continue;
        }
        let base = psi * required;
        let spread = (base * 0.35).round() as i64;
        let mut errors: Vec<i64> = members
            .iter()
            .map(|_| (base.round() as i64 + rng.random_range(-spread..=spread)).max(0))
            .collect();
        let wanted = (base * members.len() as f64).round() as i64;
        let mut diff = wanted - errors.iter().sum::<i64>();
        let len = errors.len();
        let mut i = 0;
        while diff != 0 {
            let step = diff.signum();
            if errors[i % len] + step >= 0 {
                errors[i % len] += step;
                diff -= step;
            }
            i += 1;
        }
        for (p, e) in members.iter().zip(errors) {
            for o in plans[*p].objectives.iter_mut().filter(|o| o.category == *category) {
                o.errors = e as u32;
            }
        }
    }

    Ok(CohortPlan {
        seed: targets.seed,
        required_correct: targets.required_correct,
        p_no_response: targets.p_no_response,
        inter_arrival: targets.inter_arrival,
        windows: targets.windows.iter().map(|(w, _)| *w).collect(),
        patients: plans,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::session::replay;

    fn profile(p_err: f64, objectives: u32, seed: u64) -> SyntheticProfile {
        SyntheticProfile {
            patients: 2,
            first_patient_id: 1,
            categories: vec![CategoryBehavior {
                category: "listener".into(),
                p_err,
                p_no_response: 0.25,
                objectives,
            }],
            inter_arrival: InterArrival::default(),
            max_answers_per_session: 60,
            max_answers_per_objective: 5_000,
            session_gap_ms: default_session_gap(),
            start_at: default_start(),
            seed,
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let ladder = LadderConfig { required_correct: 5, ..Default::default() };
        let a = generate_sessions(&profile(0.4, 3, 42), &ladder).unwrap();
        let b = generate_sessions(&profile(0.4, 3, 42), &ladder).unwrap();
        assert_eq!(a.jsonl(), b.jsonl());
        let c = generate_sessions(&profile(0.4, 3, 43), &ladder).unwrap();
        assert_ne!(a.digest(), c.digest());
    }

    #[test]
    fn generated_logs_replay() {
        let ladder = LadderConfig { required_correct: 4, ..Default::default() };
        let data = generate_sessions(&profile(0.5, 4, 7), &ladder).unwrap();
        let mut progress: BTreeMap<PatientId, PatientProgress> = BTreeMap::new();
        for log in &data.logs {
            let live = replay(log, &PatientProgress::new(PatientId(0))).err();
            // wrong base patient is rejected; the right one replays
            assert!(live.is_some());
            let pid = match &log[0].payload {
                crate::session::EventPayload::SessionStarted { patient_id, .. } => *patient_id,
                _ => unreachable!(),
            };
            let base = progress.remove(&pid).unwrap_or_else(|| PatientProgress::new(pid));
            let live = replay(log, &base).unwrap();
            progress.insert(pid, live.progress().clone());
        }
    }

    #[test]
    fn invalid_propensity_rejected() {
        let p = profile(1.5, 1, 1);
        assert!(matches!(
            generate_sessions(&p, &LadderConfig::default()),
            Err(ProfileError::Propensity { .. })
        ));
        let mut p = profile(0.1, 16, 1);
        p.categories[0].p_err = 0.1;
        assert!(matches!(
            generate_sessions(&p, &LadderConfig::default()),
            Err(ProfileError::TooManyObjectives { .. })
        ));
    }

    #[test]
    fn solver_hits_totals() {
        let day = 86_400_000;
        let targets = CohortTargets {
            patients: 5,
            first_patient_id: 1,
            windows: vec![(TimeWindow { from: Timestamp(0), to: Timestamp(30 * day) }, 12)],
            category_psi: vec![("tact".into(), 1.0), ("listener".into(), 0.5)],
            required_correct: 4,
            p_no_response: 0.2,
            inter_arrival: InterArrival::default(),
            seed: 3,
        };
        let plan = solve_cohort(&targets).unwrap();
        let total: usize = plan.patients.iter().map(|p| p.objectives.len()).sum();
        assert_eq!(total, 12);
    }
}
