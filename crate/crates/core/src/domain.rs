//! VB-MAPP domain model: categories, 15-level objective ladders, stimulus
//! decks and per-patient progress, plus the pure ordering and eligibility
//! rules the session engine builds on.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::time::Timestamp;

/// Number of objectives in every category ladder.
pub const LADDER_LEVELS: u8 = 15;
/// Shipped default for `required_correct` on every level.
pub const DEFAULT_REQUIRED_CORRECT: u32 = 50;
/// Distractor cards shown next to the target for LISTENER and VP_MTS trials.
pub const DEFAULT_DISTRACTORS: u32 = 3;

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn new(s: impl Into<String>) -> Self {
                $name(s.into())
            }

            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                $name(s.to_owned())
            }
        }
    };
}

string_id!(CategoryId);
string_id!(StimulusId);

/// Anonymous numeric patient identifier. Carries no personal information.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PatientId(pub u64);

impl fmt::Display for PatientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum GameType {
    Tact,
    Listener,
    VpMts,
    Unsupported,
}

impl GameType {
    pub fn is_supported(self) -> bool {
        !matches!(self, GameType::Unsupported)
    }

    /// Whether trials of this game show comparison cards next to the target.
    /// Tact is show-and-name: the child does not operate the tablet.
    pub fn uses_distractors(self) -> bool {
        matches!(self, GameType::Listener | GameType::VpMts)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Category {
    pub id: CategoryId,
    pub name: String,
    pub game_type: GameType,
}

/// The 18 VB-MAPP categories tracked by the platform. Tact, Listener and
/// VP-MTS ship with game types; the rest are storable and reportable only.
pub fn vbmapp_categories() -> Vec<Category> {
    const ALL: [(&str, &str, GameType); 18] = [
        ("mand", "Mand", GameType::Unsupported),
        ("tact", "Tact", GameType::Tact),
        ("listener", "Listener", GameType::Listener),
        ("vp_mts", "VP-MTS", GameType::VpMts),
        ("independent_play", "Independent Play", GameType::Unsupported),
        ("social_behavior", "Social Behavior", GameType::Unsupported),
        ("social_play", "Social Play", GameType::Unsupported),
        ("motor_imitation", "Motor Imitation", GameType::Unsupported),
        ("echoic", "Echoic", GameType::Unsupported),
        ("spontaneous_vocal", "Spontaneous Vocal Behavior", GameType::Unsupported),
        ("lrffc", "Listener Responding by Function, Feature and Class", GameType::Unsupported),
        ("intraverbal", "Intraverbal", GameType::Unsupported),
        ("classroom_routines", "Classroom Routines", GameType::Unsupported),
        ("group_skills", "Group Skills", GameType::Unsupported),
        ("linguistic_structure", "Linguistic Structure", GameType::Unsupported),
        ("reading", "Reading", GameType::Unsupported),
        ("writing", "Writing", GameType::Unsupported),
        ("math", "Math", GameType::Unsupported),
    ];
    ALL.iter()
        .map(|(id, name, game_type)| Category {
            id: CategoryId::from(*id),
            name: (*name).to_owned(),
            game_type: *game_type,
        })
        .collect()
}

/// One digital card.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stimulus {
    pub id: StimulusId,
    pub label: String,
    pub image_ref: String,
    #[serde(default)]
    pub interest_tags: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Objective {
    pub level: u8,
    pub required_correct: u32,
    pub stimulus_pool: BTreeSet<StimulusId>,
    /// Overrides [`DEFAULT_DISTRACTORS`] for this level.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distractors: Option<u32>,
}

impl Objective {
    pub fn distractor_count(&self, game_type: GameType) -> usize {
        if game_type.uses_distractors() {
            self.distractors.unwrap_or(DEFAULT_DISTRACTORS) as usize
        } else {
            0
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectiveLadder {
    pub category: CategoryId,
    pub objectives: Vec<Objective>,
}

impl ObjectiveLadder {
    pub fn objective(&self, level: u8) -> Option<&Objective> {
        self.objectives.iter().find(|o| o.level == level)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum LadderViolation {
    Length { found: usize },
    LevelOutOfPlace { index: usize, found: u8, expected: u8 },
    ZeroRequired { level: u8 },
    PoolTooSmall { level: u8, pool: usize, required: u32 },
}

impl fmt::Display for LadderViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LadderViolation::Length { found } => write!(f, "length {found} ≠ {LADDER_LEVELS}"),
            LadderViolation::LevelOutOfPlace { index, found, expected } => {
                write!(f, "level {found} at position {index}, expected level {expected}")
            }
            LadderViolation::ZeroRequired { level } => {
                write!(f, "level {level}: required_correct = 0")
            }
            LadderViolation::PoolTooSmall { level, pool, required } => write!(
                f,
                "level {level}: stimulus pool of {pool} is smaller than required_correct {required}"
            ),
        }
    }
}

/// Checks every structural rule of a ladder and reports all violations.
pub fn validate_ladder(ladder: &ObjectiveLadder) -> Result<(), Vec<LadderViolation>> {
    let mut violations = Vec::new();
    if ladder.objectives.len() != LADDER_LEVELS as usize {
        violations.push(LadderViolation::Length { found: ladder.objectives.len() });
    }
    for (index, objective) in ladder.objectives.iter().enumerate() {
        let expected = index as u64 + 1;
        if u64::from(objective.level) != expected {
            violations.push(LadderViolation::LevelOutOfPlace {
                index,
                found: objective.level,
                expected: expected.min(u64::from(u8::MAX)) as u8,
            });
        }
        if objective.required_correct == 0 {
            violations.push(LadderViolation::ZeroRequired { level: objective.level });
        }
        if objective.stimulus_pool.len() < objective.required_correct as usize {
            violations.push(LadderViolation::PoolTooSmall {
                level: objective.level,
                pool: objective.stimulus_pool.len(),
                required: objective.required_correct,
            });
        }
    }
    if violations.is_empty() {
        Ok(())
    } else {
        Err(violations)
    }
}

/// Position on a ladder: the level being worked on, or every level done.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LevelState {
    Level(u8),
    Complete,
}

impl LevelState {
    pub fn completed_levels(self) -> u8 {
        match self {
            LevelState::Level(l) => l - 1,
            LevelState::Complete => LADDER_LEVELS,
        }
    }

    pub fn after_completing(level: u8) -> Self {
        if level >= LADDER_LEVELS {
            LevelState::Complete
        } else {
            LevelState::Level(level + 1)
        }
    }
}

impl Serialize for LevelState {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            LevelState::Level(l) => serializer.serialize_u8(*l),
            LevelState::Complete => serializer.serialize_str("COMPLETE"),
        }
    }
}

impl<'de> Deserialize<'de> for LevelState {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Level(u8),
            Word(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Level(l) if (1..=LADDER_LEVELS).contains(&l) => Ok(LevelState::Level(l)),
            Raw::Word(w) if w == "COMPLETE" => Ok(LevelState::Complete),
            Raw::Level(l) => Err(serde::de::Error::custom(format!("level {l} out of range"))),
            Raw::Word(w) => Err(serde::de::Error::custom(format!("unknown level state {w:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CategoryProgress {
    pub current_level: LevelState,
    pub correct_count_at_level: u32,
    /// Grows only. Mastery time is the completion of the objective that
    /// counted the stimulus.
    pub mastered_stimuli: BTreeMap<StimulusId, Timestamp>,
    /// Distinct targets answered correctly on the current level; they become
    /// mastered when the level completes.
    #[serde(default, skip_serializing_if = "BTreeSet::is_empty")]
    pub level_correct_targets: BTreeSet<StimulusId>,
}

impl Default for CategoryProgress {
    fn default() -> Self {
        CategoryProgress {
            current_level: LevelState::Level(1),
            correct_count_at_level: 0,
            mastered_stimuli: BTreeMap::new(),
            level_correct_targets: BTreeSet::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatientProgress {
    pub patient_id: PatientId,
    pub per_category: BTreeMap<CategoryId, CategoryProgress>,
}

impl PatientProgress {
    pub fn new(patient_id: PatientId) -> Self {
        PatientProgress { patient_id, per_category: BTreeMap::new() }
    }

    /// Progress for a category, level 1 if never touched.
    pub fn category(&self, category: &CategoryId) -> CategoryProgress {
        self.per_category.get(category).cloned().unwrap_or_default()
    }

    pub fn category_mut(&mut self, category: &CategoryId) -> &mut CategoryProgress {
        self.per_category.entry(category.clone()).or_default()
    }

    pub fn current_level(&self, category: &CategoryId) -> LevelState {
        self.per_category
            .get(category)
            .map_or(LevelState::Level(1), |p| p.current_level)
    }

    pub fn is_mastered(&self, category: &CategoryId, stimulus: &StimulusId) -> bool {
        self.per_category
            .get(category)
            .is_some_and(|p| p.mastered_stimuli.contains_key(stimulus))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DomainError {
    #[error("unknown category {0}")]
    UnknownCategory(CategoryId),
    #[error("category {0} has no objective ladder")]
    NoLadder(CategoryId),
    #[error("category {0} has no game type")]
    UnsupportedCategory(CategoryId),
    #[error("no eligible stimuli left for {category} level {level}; extend the deck")]
    PoolExhausted { category: CategoryId, level: u8 },
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CurriculumError {
    #[error("duplicate category id {0}")]
    DuplicateCategoryId(CategoryId),
    #[error("duplicate category name {0:?}")]
    DuplicateCategoryName(String),
    #[error("duplicate stimulus id {0}")]
    DuplicateStimulus(StimulusId),
    #[error("ladder for unregistered category {0}")]
    LadderWithoutCategory(CategoryId),
    #[error("two ladders for category {0}")]
    DuplicateLadder(CategoryId),
    #[error("ladder {category} is malformed: {}", violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    InvalidLadder { category: CategoryId, violations: Vec<LadderViolation> },
    #[error("ladder {category} level {level} references unknown stimulus {stimulus}")]
    UnknownStimulus { category: CategoryId, level: u8, stimulus: StimulusId },
    #[error("category {category} deck has {deck} cards; level {level} needs target plus {distractors} distractors")]
    DeckTooSmall { category: CategoryId, level: u8, deck: usize, distractors: usize },
}

/// Registered categories, their ladders and every known card.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "CurriculumParts", into = "CurriculumParts")]
pub struct Curriculum {
    categories: BTreeMap<CategoryId, Category>,
    ladders: BTreeMap<CategoryId, ObjectiveLadder>,
    stimuli: BTreeMap<StimulusId, Stimulus>,
    decks: BTreeMap<CategoryId, BTreeSet<StimulusId>>,
}

/// Serialized form of a [`Curriculum`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurriculumParts {
    pub categories: Vec<Category>,
    pub ladders: Vec<ObjectiveLadder>,
    pub stimuli: Vec<Stimulus>,
}

impl TryFrom<CurriculumParts> for Curriculum {
    type Error = CurriculumError;

    fn try_from(parts: CurriculumParts) -> Result<Self, Self::Error> {
        Curriculum::new(parts.categories, parts.ladders, parts.stimuli)
    }
}

impl From<Curriculum> for CurriculumParts {
    fn from(c: Curriculum) -> Self {
        CurriculumParts {
            categories: c.categories.into_values().collect(),
            ladders: c.ladders.into_values().collect(),
            stimuli: c.stimuli.into_values().collect(),
        }
    }
}

impl Curriculum {
    pub fn new(
        categories: Vec<Category>,
        ladders: Vec<ObjectiveLadder>,
        stimuli: Vec<Stimulus>,
    ) -> Result<Self, CurriculumError> {
        let mut by_id = BTreeMap::new();
        let mut names = BTreeSet::new();
        for category in categories {
            if !names.insert(category.name.clone()) {
                return Err(CurriculumError::DuplicateCategoryName(category.name));
            }
            if by_id.contains_key(&category.id) {
                return Err(CurriculumError::DuplicateCategoryId(category.id));
            }
            by_id.insert(category.id.clone(), category);
        }

        let mut cards = BTreeMap::new();
        for stimulus in stimuli {
            if cards.contains_key(&stimulus.id) {
                return Err(CurriculumError::DuplicateStimulus(stimulus.id));
            }
            cards.insert(stimulus.id.clone(), stimulus);
        }

        let mut ladder_map = BTreeMap::new();
        let mut decks = BTreeMap::new();
        for ladder in ladders {
            let Some(category) = by_id.get(&ladder.category) else {
                return Err(CurriculumError::LadderWithoutCategory(ladder.category));
            };
            if ladder_map.contains_key(&ladder.category) {
                return Err(CurriculumError::DuplicateLadder(ladder.category));
            }
            validate_ladder(&ladder).map_err(|violations| CurriculumError::InvalidLadder {
                category: ladder.category.clone(),
                violations,
            })?;
            let mut deck = BTreeSet::new();
            for objective in &ladder.objectives {
                for id in &objective.stimulus_pool {
                    if !cards.contains_key(id) {
                        return Err(CurriculumError::UnknownStimulus {
                            category: ladder.category.clone(),
                            level: objective.level,
                            stimulus: id.clone(),
                        });
                    }
                    deck.insert(id.clone());
                }
            }
            for objective in &ladder.objectives {
                let distractors = objective.distractor_count(category.game_type);
                if deck.len() < distractors + 1 {
                    return Err(CurriculumError::DeckTooSmall {
                        category: ladder.category.clone(),
                        level: objective.level,
                        deck: deck.len(),
                        distractors,
                    });
                }
            }
            decks.insert(ladder.category.clone(), deck);
            ladder_map.insert(ladder.category.clone(), ladder);
        }

        Ok(Curriculum { categories: by_id, ladders: ladder_map, stimuli: cards, decks })
    }

    pub fn category(&self, id: &CategoryId) -> Result<&Category, DomainError> {
        self.categories
            .get(id)
            .ok_or_else(|| DomainError::UnknownCategory(id.clone()))
    }

    pub fn categories(&self) -> impl Iterator<Item = &Category> {
        self.categories.values()
    }

    pub fn ladder(&self, id: &CategoryId) -> Result<&ObjectiveLadder, DomainError> {
        self.category(id)?;
        self.ladders.get(id).ok_or_else(|| DomainError::NoLadder(id.clone()))
    }

    pub fn ladders(&self) -> impl Iterator<Item = &ObjectiveLadder> {
        self.ladders.values()
    }

    pub fn stimulus(&self, id: &StimulusId) -> Option<&Stimulus> {
        self.stimuli.get(id)
    }

    pub fn stimuli(&self) -> impl Iterator<Item = &Stimulus> {
        self.stimuli.values()
    }

    /// Every card used anywhere on the category's ladder.
    pub fn category_deck(&self, id: &CategoryId) -> Result<&BTreeSet<StimulusId>, DomainError> {
        self.category(id)?;
        self.decks.get(id).ok_or_else(|| DomainError::NoLadder(id.clone()))
    }

    /// Adds cards that ladders may reference later. Existing ids are kept.
    pub fn register_stimuli(&mut self, stimuli: impl IntoIterator<Item = Stimulus>) -> usize {
        let mut added = 0;
        for s in stimuli {
            if !self.stimuli.contains_key(&s.id) {
                self.stimuli.insert(s.id.clone(), s);
                added += 1;
            }
        }
        added
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NextObjective<'a> {
    Objective(&'a Objective),
    CategoryComplete,
}

impl<'a> NextObjective<'a> {
    pub fn objective(self) -> Option<&'a Objective> {
        match self {
            NextObjective::Objective(o) => Some(o),
            NextObjective::CategoryComplete => None,
        }
    }
}

/// The lowest incomplete objective of a category for this patient.
pub fn next_objective<'c>(
    curriculum: &'c Curriculum,
    progress: &PatientProgress,
    category: &CategoryId,
) -> Result<NextObjective<'c>, DomainError> {
    let ladder = curriculum.ladder(category)?;
    match progress.current_level(category) {
        LevelState::Complete => Ok(NextObjective::CategoryComplete),
        LevelState::Level(level) => ladder
            .objective(level)
            .map(NextObjective::Objective)
            .ok_or_else(|| DomainError::NoLadder(category.clone())),
    }
}

/// Pool of the objective minus the cards the patient already mastered in
/// this category.
pub fn eligible_stimuli(
    objective: &Objective,
    category: &CategoryId,
    progress: &PatientProgress,
) -> Result<BTreeSet<StimulusId>, DomainError> {
    let state = progress.per_category.get(category);
    let eligible: BTreeSet<StimulusId> = objective
        .stimulus_pool
        .iter()
        .filter(|id| !state.is_some_and(|p| p.mastered_stimuli.contains_key(*id)))
        .cloned()
        .collect();
    let incomplete = match progress.current_level(category) {
        LevelState::Level(l) => l <= objective.level,
        LevelState::Complete => false,
    };
    if eligible.is_empty() && incomplete {
        return Err(DomainError::PoolExhausted { category: category.clone(), level: objective.level });
    }
    Ok(eligible)
}

/// Orders eligible cards so those matching the patient's interests come
/// first. Membership is unchanged.
pub fn order_by_interest(
    curriculum: &Curriculum,
    eligible: &BTreeSet<StimulusId>,
    interests: &BTreeSet<String>,
) -> Vec<StimulusId> {
    let (mut preferred, rest): (Vec<_>, Vec<_>) = eligible.iter().cloned().partition(|id| {
        curriculum
            .stimulus(id)
            .is_some_and(|s| !s.interest_tags.is_disjoint(interests))
    });
    preferred.extend(rest);
    preferred
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pool(ids: &[&str]) -> BTreeSet<StimulusId> {
        ids.iter().map(|s| StimulusId::from(*s)).collect()
    }

    fn ladder(category: &str, required: u32, pool_size: usize) -> (ObjectiveLadder, Vec<Stimulus>) {
        let mut stimuli = Vec::new();
        let objectives = (1..=LADDER_LEVELS)
            .map(|level| {
                let ids: BTreeSet<StimulusId> = (0..pool_size)
                    .map(|i| {
                        let id = StimulusId::new(format!("{category}-{level}-{i}"));
                        stimuli.push(Stimulus {
                            id: id.clone(),
                            label: format!("card {level}/{i}"),
                            image_ref: format!("img/{level}-{i}.png"),
                            interest_tags: BTreeSet::new(),
                        });
                        id
                    })
                    .collect();
                Objective { level, required_correct: required, stimulus_pool: ids, distractors: None }
            })
            .collect();
        (ObjectiveLadder { category: CategoryId::from(category), objectives }, stimuli)
    }

    fn curriculum() -> Curriculum {
        let (ladder, stimuli) = ladder("listener", 2, 4);
        Curriculum::new(vbmapp_categories(), vec![ladder], stimuli).unwrap()
    }

    #[test]
    fn exactly_three_categories_ship_with_games() {
        let cats = vbmapp_categories();
        assert_eq!(cats.len(), 18);
        let supported: Vec<_> = cats.iter().filter(|c| c.game_type.is_supported()).collect();
        assert_eq!(supported.len(), 3);
        let names: BTreeSet<_> = cats.iter().map(|c| c.name.as_str()).collect();
        assert_eq!(names.len(), 18);
    }

    #[test]
    fn next_objective_fresh_patient_is_level_one() {
        let c = curriculum();
        let p = PatientProgress::new(PatientId(1));
        let next = next_objective(&c, &p, &"listener".into()).unwrap();
        assert_eq!(next.objective().unwrap().level, 1);
    }

    #[test]
    fn next_objective_after_three_levels_is_four() {
        let c = curriculum();
        let mut p = PatientProgress::new(PatientId(1));
        p.category_mut(&"listener".into()).current_level = LevelState::Level(4);
        let next = next_objective(&c, &p, &"listener".into()).unwrap();
        assert_eq!(next.objective().unwrap().level, 4);
    }

    #[test]
    fn next_objective_all_done() {
        let c = curriculum();
        let mut p = PatientProgress::new(PatientId(1));
        p.category_mut(&"listener".into()).current_level = LevelState::Complete;
        assert_eq!(next_objective(&c, &p, &"listener".into()), Ok(NextObjective::CategoryComplete));
    }

    #[test]
    fn next_objective_unknown_category() {
        let c = curriculum();
        let p = PatientProgress::new(PatientId(1));
        assert_eq!(
            next_objective(&c, &p, &"juggling".into()),
            Err(DomainError::UnknownCategory("juggling".into()))
        );
        assert_eq!(next_objective(&c, &p, &"mand".into()), Err(DomainError::NoLadder("mand".into())));
    }

    #[test]
    fn eligible_is_pool_minus_mastered() {
        let cat = CategoryId::from("listener");
        let objective = Objective {
            level: 1,
            required_correct: 1,
            stimulus_pool: pool(&["A", "B", "C"]),
            distractors: None,
        };
        let mut p = PatientProgress::new(PatientId(3));
        assert_eq!(eligible_stimuli(&objective, &cat, &p).unwrap(), pool(&["A", "B", "C"]));
        p.category_mut(&cat).mastered_stimuli.insert("B".into(), Timestamp(5));
        assert_eq!(eligible_stimuli(&objective, &cat, &p).unwrap(), pool(&["A", "C"]));
    }

    #[test]
    fn eligible_exhausted_pool() {
        let cat = CategoryId::from("listener");
        let objective =
            Objective { level: 1, required_correct: 1, stimulus_pool: pool(&["A"]), distractors: None };
        let mut p = PatientProgress::new(PatientId(3));
        p.category_mut(&cat).mastered_stimuli.insert("A".into(), Timestamp(5));
        assert_eq!(
            eligible_stimuli(&objective, &cat, &p),
            Err(DomainError::PoolExhausted { category: cat.clone(), level: 1 })
        );
        // once the level is behind the patient an empty set is not an error
        p.category_mut(&cat).current_level = LevelState::Level(2);
        assert_eq!(eligible_stimuli(&objective, &cat, &p), Ok(BTreeSet::new()));
    }

    #[test]
    fn validate_ladder_reports_length_and_zero_required() {
        let (mut ladder, _) = ladder("tact", 1, 1);
        assert!(validate_ladder(&ladder).is_ok());
        ladder.objectives[6].required_correct = 0;
        let v = validate_ladder(&ladder).unwrap_err();
        assert_eq!(v, vec![LadderViolation::ZeroRequired { level: 7 }]);

        ladder.objectives.pop();
        let v = validate_ladder(&ladder).unwrap_err();
        assert_eq!(v[0].to_string(), "length 14 ≠ 15");
    }

    #[test]
    fn interest_ordering_keeps_membership() {
        let mut c = curriculum();
        let mut car = c.stimulus(&"listener-1-2".into()).unwrap().clone();
        car.id = "car".into();
        car.interest_tags.insert("vehicles".into());
        c.register_stimuli([car]);
        let eligible = pool(&["listener-1-0", "car", "listener-1-1"]);
        let ordered = order_by_interest(&c, &eligible, &["vehicles".to_owned()].into());
        assert_eq!(ordered[0], StimulusId::from("car"));
        assert_eq!(ordered.iter().cloned().collect::<BTreeSet<_>>(), eligible);
    }

    #[test]
    fn level_state_serde() {
        assert_eq!(serde_json::to_string(&LevelState::Level(4)).unwrap(), "4");
        assert_eq!(serde_json::to_string(&LevelState::Complete).unwrap(), "\"COMPLETE\"");
        assert_eq!(serde_json::from_str::<LevelState>("\"COMPLETE\"").unwrap(), LevelState::Complete);
        assert!(serde_json::from_str::<LevelState>("16").is_err());
    }

    #[test]
    fn curriculum_rejects_small_distractor_deck() {
        let (ladder, stimuli) = ladder("listener", 1, 1);
        // 15 levels x 1 card = 15 cards, plenty for 3 distractors
        assert!(Curriculum::new(vbmapp_categories(), vec![ladder.clone()], stimuli.clone()).is_ok());
        let mut tiny = ladder;
        for o in &mut tiny.objectives {
            o.stimulus_pool = pool(&["listener-1-0"]);
        }
        assert!(matches!(
            Curriculum::new(vbmapp_categories(), vec![tiny], stimuli),
            Err(CurriculumError::DeckTooSmall { .. })
        ));
    }
}
