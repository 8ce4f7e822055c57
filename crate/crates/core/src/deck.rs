//! Deck manifests: one JSON document per deck listing its cards.
//!
//! ```json
//! {
//!   "format_version": 1,
//!   "deck_id": "everyday-objects",
//!   "categories": ["tact", "listener"],
//!   "entries": [
//!     {"id": "car", "label": "Car", "image": "images/car.png", "interest_tags": ["vehicles"]}
//!   ]
//! }
//! ```
//!
//! Image paths are relative to the manifest's directory.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::fs;
use std::io::{self, Read};
use std::path::{Component, Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::domain::{CategoryId, Curriculum, Stimulus, StimulusId};

pub const DECK_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeckEntry {
    pub id: StimulusId,
    pub label: String,
    pub image: String,
    #[serde(default)]
    pub interest_tags: BTreeSet<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeckManifest {
    pub format_version: u32,
    pub deck_id: String,
    #[serde(default)]
    pub categories: Vec<CategoryId>,
    pub entries: Vec<DeckEntry>,
}

impl DeckManifest {
    pub fn stimuli(&self) -> Vec<Stimulus> {
        self.entries
            .iter()
            .map(|e| Stimulus {
                id: e.id.clone(),
                label: e.label.clone(),
                image_ref: e.image.clone(),
                interest_tags: e.interest_tags.clone(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "violation", rename_all = "snake_case")]
pub enum DeckViolation {
    UnsupportedVersion { found: u32 },
    BadDeckId { deck_id: String },
    DuplicateId { id: StimulusId, first: usize, second: usize },
    EmptyLabel { index: usize },
    BadImagePath { index: usize, path: String },
    MissingImage { index: usize, path: String },
    NotRaster { index: usize, path: String },
    UnknownCategory { category: CategoryId },
}

impl fmt::Display for DeckViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DeckViolation::UnsupportedVersion { found } => {
                write!(f, "format_version {found} not supported (expected {DECK_FORMAT_VERSION})")
            }
            DeckViolation::BadDeckId { deck_id } => write!(f, "deck_id {deck_id:?} is not a plain identifier"),
            DeckViolation::DuplicateId { id, first, second } => {
                write!(f, "entries {first} and {second} share stimulus id {id}")
            }
            DeckViolation::EmptyLabel { index } => write!(f, "entry {index}: empty label"),
            DeckViolation::BadImagePath { index, path } => {
                write!(f, "entry {index}: image path {path} must be relative and stay inside the deck directory")
            }
            DeckViolation::MissingImage { index, path } => write!(f, "entry {index}: image {path} not found"),
            DeckViolation::NotRaster { index, path } => {
                write!(f, "entry {index}: {path} is not a PNG, JPEG, GIF, BMP or WebP image")
            }
            DeckViolation::UnknownCategory { category } => write!(f, "unknown category {category}"),
        }
    }
}

#[derive(Debug, Error)]
pub enum DeckError {
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
    #[error("{path}: not a deck manifest: {source}")]
    Parse { path: PathBuf, source: serde_json::Error },
    #[error("deck has {} violation(s)", .0.len())]
    Invalid(Vec<DeckViolation>),
}

/// Recognizes raster images by their magic bytes.
pub fn is_raster(header: &[u8]) -> bool {
    header.starts_with(b"\x89PNG\r\n\x1a\n")
        || header.starts_with(&[0xFF, 0xD8, 0xFF])
        || header.starts_with(b"GIF87a")
        || header.starts_with(b"GIF89a")
        || header.starts_with(b"BM")
        || (header.len() >= 12 && &header[..4] == b"RIFF" && &header[8..12] == b"WEBP")
}

fn plain_relative(path: &str) -> bool {
    let p = Path::new(path);
    !path.is_empty() && p.components().all(|c| matches!(c, Component::Normal(_) | Component::CurDir))
}

pub fn plain_identifier(s: &str) -> bool {
    !s.is_empty()
        && s.len() <= 64
        && s.bytes().all(|b| b.is_ascii_alphanumeric() || b == b'-' || b == b'_')
}

/// Checks every manifest rule; images are resolved against `base_dir`.
/// Category bindings are checked when a curriculum is given.
pub fn validate_manifest(
    manifest: &DeckManifest,
    base_dir: &Path,
    curriculum: Option<&Curriculum>,
) -> Vec<DeckViolation> {
    let mut violations = Vec::new();
    if manifest.format_version != DECK_FORMAT_VERSION {
        violations.push(DeckViolation::UnsupportedVersion { found: manifest.format_version });
    }
    if !plain_identifier(&manifest.deck_id) {
        violations.push(DeckViolation::BadDeckId { deck_id: manifest.deck_id.clone() });
    }
    if let Some(c) = curriculum {
        for category in &manifest.categories {
            if c.category(category).is_err() {
                violations.push(DeckViolation::UnknownCategory { category: category.clone() });
            }
        }
    }
    let mut seen: HashMap<&StimulusId, usize> = HashMap::new();
    for (index, entry) in manifest.entries.iter().enumerate() {
        if let Some(first) = seen.get(&entry.id) {
            violations.push(DeckViolation::DuplicateId { id: entry.id.clone(), first: *first, second: index });
        } else {
            seen.insert(&entry.id, index);
        }
        if entry.label.trim().is_empty() {
            violations.push(DeckViolation::EmptyLabel { index });
        }
        if !plain_relative(&entry.image) {
            violations.push(DeckViolation::BadImagePath { index, path: entry.image.clone() });
            continue;
        }
        let path = base_dir.join(&entry.image);
        let mut header = [0u8; 16];
        match fs::File::open(&path) {
            Err(_) => violations.push(DeckViolation::MissingImage { index, path: entry.image.clone() }),
            Ok(mut f) => {
                let n = f.read(&mut header).unwrap_or(0);
                if !is_raster(&header[..n]) {
                    violations.push(DeckViolation::NotRaster { index, path: entry.image.clone() });
                }
            }
        }
    }
    violations
}

pub fn load_manifest(path: &Path) -> Result<DeckManifest, DeckError> {
    let text = fs::read_to_string(path).map_err(|source| DeckError::Io { path: path.to_path_buf(), source })?;
    serde_json::from_str(&text).map_err(|source| DeckError::Parse { path: path.to_path_buf(), source })
}

/// Registered decks, persisted as one manifest file per deck.
#[derive(Debug, Clone)]
pub struct DeckStore {
    dir: PathBuf,
}

impl DeckStore {
    pub fn open(dir: impl Into<PathBuf>) -> Result<Self, DeckError> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|source| DeckError::Io { path: dir.clone(), source })?;
        Ok(DeckStore { dir })
    }

    pub fn register(&self, manifest: &DeckManifest) -> Result<String, DeckError> {
        if !plain_identifier(&manifest.deck_id) {
            return Err(DeckError::Invalid(vec![DeckViolation::BadDeckId {
                deck_id: manifest.deck_id.clone(),
            }]));
        }
        let path = self.dir.join(format!("{}.json", manifest.deck_id));
        let body = serde_json::to_string_pretty(manifest).expect("manifests serialize");
        fs::write(&path, body).map_err(|source| DeckError::Io { path, source })?;
        Ok(manifest.deck_id.clone())
    }

    pub fn list(&self) -> Result<Vec<DeckManifest>, DeckError> {
        let mut out = Vec::new();
        let entries = fs::read_dir(&self.dir).map_err(|source| DeckError::Io { path: self.dir.clone(), source })?;
        for entry in entries {
            let path = entry.map_err(|source| DeckError::Io { path: self.dir.clone(), source })?.path();
            if path.extension().is_some_and(|e| e == "json") {
                out.push(load_manifest(&path)?);
            }
        }
        out.sort_by(|a, b| a.deck_id.cmp(&b.deck_id));
        Ok(out)
    }
}

/// Validates the manifest at `path` and registers it.
pub fn import_deck(
    path: &Path,
    store: &DeckStore,
    curriculum: Option<&Curriculum>,
) -> Result<String, DeckError> {
    let manifest = load_manifest(path)?;
    let base = path.parent().unwrap_or(Path::new("."));
    let violations = validate_manifest(&manifest, base, curriculum);
    if !violations.is_empty() {
        return Err(DeckError::Invalid(violations));
    }
    store.register(&manifest)
}
