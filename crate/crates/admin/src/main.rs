//! Administrative tool: decks, synthetic data, dataset export, accounts.
//!
//! Exit codes: 0 ok, 1 validation failure, 2 I/O failure, 3 authorization failure.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use aba_core::access::{authorize, AccountConfig, Action, CredentialStore, PrincipalKind, Target};
use aba_core::analytics::TimeWindow;
use aba_core::deck::{load_manifest, validate_manifest, DeckError, DeckStore};
use aba_core::export::{export_dataset, write_export};
use aba_core::session::{replay, SessionEvent};
use aba_core::store::EventStore;
use aba_core::synth::{
    generate_cohort, generate_sessions, solve_cohort, CohortPlan, CohortTargets, LadderConfig, SyntheticDataset,
    SyntheticProfile,
};
use aba_core::time::SystemClock;
use aba_core::{Curriculum, PatientId, PatientProgress, Timestamp};
use clap::{Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

#[derive(Parser)]
#[command(name = "aba-admin", version, about)]
struct Cli {
    /// Print results as JSON.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Deck manifests.
    #[command(subcommand)]
    Deck(DeckCommand),
    /// Synthetic session logs.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Writes sessions, answers and completions tables for a time window.
    Export(ExportArgs),
    /// Replays every stored log and reports corrupt ones.
    Verify {
        #[arg(long, env = "ABA_DATA_DIR")]
        data_dir: PathBuf,
    },
    /// Account entries for the server configuration.
    #[command(subcommand)]
    Account(AccountCommand),
}

#[derive(Subcommand)]
enum DeckCommand {
    /// Checks a manifest and its images without registering it.
    Validate {
        manifest: PathBuf,
        /// Curriculum JSON used to check category bindings.
        #[arg(long)]
        curriculum: Option<PathBuf>,
    },
    /// Validates, copies images into `<data-dir>/assets` and registers the deck.
    Import {
        manifest: PathBuf,
        #[arg(long, env = "ABA_DATA_DIR")]
        data_dir: PathBuf,
        #[arg(long)]
        curriculum: Option<PathBuf>,
    },
    /// Lists registered decks.
    List {
        #[arg(long, env = "ABA_DATA_DIR")]
        data_dir: PathBuf,
    },
}

#[derive(Subcommand)]
enum SynthCommand {
    /// Simulates patients from a behaviour profile.
    Generate {
        #[arg(long)]
        profile: PathBuf,
        /// Ladder shape as JSON; 50 correct answers per level when omitted.
        #[arg(long)]
        ladder: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Solves cohort targets into a plan of per-objective error counts.
    Solve {
        #[arg(long)]
        targets: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generates the logs a cohort plan describes.
    Cohort {
        #[arg(long)]
        plan: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum ExportFormat {
    Csv,
    Json,
}

#[derive(clap::Args)]
struct ExportArgs {
    #[arg(long, env = "ABA_DATA_DIR")]
    data_dir: PathBuf,
    /// Server configuration holding the accounts and pepper.
    #[arg(long, env = "ABA_CONFIG")]
    config: PathBuf,
    #[arg(long)]
    subject: String,
    #[arg(long, env = "ABA_SECRET", hide_env_values = true)]
    secret: String,
    #[arg(long)]
    out: PathBuf,
    /// Inclusive start, ISO-8601.
    #[arg(long)]
    from: Option<String>,
    /// Exclusive end, ISO-8601.
    #[arg(long)]
    to: Option<String>,
    /// Comma-separated patient ids; the whole permitted set when omitted.
    #[arg(long, value_delimiter = ',')]
    patients: Vec<u64>,
    #[arg(long, value_enum, default_value = "csv")]
    format: ExportFormat,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Therapist,
    Admin,
}

#[derive(Subcommand)]
enum AccountCommand {
    /// Prints a `[[accounts]]` entry; the secret goes to stderr once.
    New {
        #[arg(long)]
        subject: String,
        #[arg(long, value_enum)]
        kind: Kind,
        #[arg(long, value_delimiter = ',')]
        caseload: Vec<u64>,
        #[arg(long, env = "ABA_PEPPER", hide_env_values = true)]
        pepper: String,
    },
}

#[derive(Debug)]
enum Failure {
    Invalid(String),
    Io(String),
    Denied(String),
}

impl Failure {
    fn exit_code(&self) -> u8 {
        match self {
            Failure::Invalid(_) => 1,
            Failure::Io(_) => 2,
            Failure::Denied(_) => 3,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Invalid(m) | Failure::Io(m) | Failure::Denied(m) => f.write_str(m),
        }
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn io_err(path: &Path, e: impl fmt::Display) -> Failure {
    Failure::Io(format!("{}: {e}", path.display()))
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).expect("values serialize") + "\n";
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn deck_failure(e: DeckError) -> Failure {
    match e {
        DeckError::Io { .. } => Failure::Io(e.to_string()),
        DeckError::Parse { .. } => Failure::Invalid(e.to_string()),
        DeckError::Invalid(v) => Failure::Invalid(v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("\n")),
    }
}

/// What a command reports on success.
struct Report {
    text: String,
    json: serde_json::Value,
}

fn deck(cmd: DeckCommand) -> Result<Report> {
    match cmd {
        DeckCommand::Validate { manifest, curriculum } => {
            let curriculum: Option<Curriculum> = curriculum.as_deref().map(read_json).transpose()?;
            let m = load_manifest(&manifest).map_err(deck_failure)?;
            let base = manifest.parent().unwrap_or(Path::new("."));
            let violations = validate_manifest(&m, base, curriculum.as_ref());
            if !violations.is_empty() {
                return Err(deck_failure(DeckError::Invalid(violations)));
            }
            Ok(Report {
                text: format!("deck {} is valid ({} entries)", m.deck_id, m.entries.len()),
                json: serde_json::json!({"deck_id": m.deck_id, "entries": m.entries.len(), "valid": true}),
            })
        }
        DeckCommand::Import { manifest, data_dir, curriculum } => {
            let curriculum: Option<Curriculum> = curriculum.as_deref().map(read_json).transpose()?;
            let m = load_manifest(&manifest).map_err(deck_failure)?;
            let base = manifest.parent().unwrap_or(Path::new("."));
            let violations = validate_manifest(&m, base, curriculum.as_ref());
            if !violations.is_empty() {
                return Err(deck_failure(DeckError::Invalid(violations)));
            }
            let assets = data_dir.join("assets");
            for entry in &m.entries {
                let target = assets.join(&entry.image);
                if let Some(parent) = target.parent() {
                    fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
                }
                fs::copy(base.join(&entry.image), &target).map_err(|e| io_err(&target, e))?;
            }
            let store = DeckStore::open(data_dir.join("decks")).map_err(deck_failure)?;
            let id = store.register(&m).map_err(deck_failure)?;
            Ok(Report {
                text: format!("registered deck {id} ({} entries)", m.entries.len()),
                json: serde_json::json!({"deck_id": id, "entries": m.entries.len()}),
            })
        }
        DeckCommand::List { data_dir } => {
            let decks = DeckStore::open(data_dir.join("decks")).and_then(|s| s.list()).map_err(deck_failure)?;
            let text = decks.iter().map(|d| format!("{}\t{} entries", d.deck_id, d.entries.len())).collect::<Vec<_>>();
            Ok(Report { text: text.join("\n"), json: serde_json::to_value(&decks).expect("decks serialize") })
        }
    }
}

fn dataset_report(data: &SyntheticDataset, out: &Path) -> Result<Report> {
    data.write_to(out).map_err(|e| io_err(out, e))?;
    let events: usize = data.logs.iter().map(Vec::len).sum();
    let digest = data.digest();
    Ok(Report {
        text: format!("wrote {} sessions ({events} events) to {}\nsha256 {digest}", data.logs.len(), out.display()),
        json: serde_json::json!({"sessions": data.logs.len(), "events": events, "sha256": digest}),
    })
}

fn synth(cmd: SynthCommand) -> Result<Report> {
    let invalid = |e: aba_core::synth::ProfileError| Failure::Invalid(e.to_string());
    match cmd {
        SynthCommand::Generate { profile, ladder, out } => {
            let profile: SyntheticProfile = read_json(&profile)?;
            let ladder: LadderConfig = ladder.as_deref().map(read_json).transpose()?.unwrap_or_default();
            dataset_report(&generate_sessions(&profile, &ladder).map_err(invalid)?, &out)
        }
        SynthCommand::Solve { targets, out } => {
            let targets: CohortTargets = read_json(&targets)?;
            let plan = solve_cohort(&targets).map_err(invalid)?;
            write_json(&out, &plan)?;
            let objectives: usize = plan.patients.iter().map(|p| p.objectives.len()).sum();
            Ok(Report {
                text: format!("plan with {objectives} objectives for {} patients written to {}", plan.patients.len(), out.display()),
                json: serde_json::json!({"patients": plan.patients.len(), "objectives": objectives}),
            })
        }
        SynthCommand::Cohort { plan, out } => {
            let plan: CohortPlan = read_json(&plan)?;
            dataset_report(&generate_cohort(&plan).map_err(invalid)?, &out)
        }
    }
}

/// The parts of the server configuration the tool needs.
#[derive(Deserialize)]
struct ServerConfig {
    #[serde(default)]
    pepper: String,
    #[serde(default)]
    accounts: Vec<AccountConfig>,
}

fn parse_time(s: &Option<String>, default: Timestamp) -> Result<Timestamp> {
    match s {
        None => Ok(default),
        Some(v) => Timestamp::parse_iso8601(v).ok_or_else(|| Failure::Invalid(format!("{v:?} is not an ISO-8601 time"))),
    }
}

fn read_logs(data_dir: &Path) -> Result<Vec<(aba_core::SessionId, Vec<SessionEvent>)>> {
    let dir = data_dir.join("sessions");
    if !dir.is_dir() {
        return Err(io_err(&dir, "no such directory"));
    }
    let store = EventStore::open(&dir).map_err(|e| io_err(&dir, e))?;
    store.read_all().map_err(|e| match e {
        aba_core::store::StoreError::Io { .. } => Failure::Io(e.to_string()),
        _ => Failure::Invalid(e.to_string()),
    })
}

fn export(args: ExportArgs) -> Result<Report> {
    let text = fs::read_to_string(&args.config).map_err(|e| io_err(&args.config, e))?;
    let mut config: ServerConfig =
        toml::from_str(&text).map_err(|e| Failure::Invalid(format!("{}: {e}", args.config.display())))?;
    if let Ok(p) = std::env::var("ABA_PEPPER") {
        config.pepper = p;
    }
    let creds = CredentialStore::new(config.pepper.as_bytes(), config.accounts, Arc::new(SystemClock));
    let (_, principal) = creds
        .login(&args.subject, &args.secret, 60_000)
        .map_err(|_| Failure::Denied("invalid credential".into()))?;

    let window = TimeWindow::new(parse_time(&args.from, TimeWindow::ALL.from)?, parse_time(&args.to, TimeWindow::ALL.to)?)
        .map_err(|e| Failure::Invalid(e.to_string()))?;
    let logs: Vec<Vec<SessionEvent>> = read_logs(&args.data_dir)?.into_iter().map(|(_, l)| l).collect();
    let stored: BTreeSet<PatientId> = logs.iter().filter_map(|l| patient_of(l)).collect();
    let requested: BTreeSet<PatientId> = if args.patients.is_empty() {
        match principal.kind {
            PrincipalKind::Therapist => principal.caseload.clone(),
            _ => stored,
        }
    } else {
        args.patients.iter().copied().map(PatientId).collect()
    };
    let refused: Vec<String> = requested
        .iter()
        .filter(|p| !authorize(&principal, Target::Patient { patient: **p, session: None }, Action::Export).allowed())
        .map(|p| p.to_string())
        .collect();
    if !refused.is_empty() {
        return Err(Failure::Denied(format!("{} may not export patients {}", args.subject, refused.join(","))));
    }
    let data = export_dataset(&logs, window, Some(&requested));
    fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    match args.format {
        ExportFormat::Csv => write_export(&data, &args.out).map_err(|e| io_err(&args.out, e))?,
        ExportFormat::Json => write_json(&args.out.join("dataset.json"), &data)?,
    }
    Ok(Report {
        text: format!(
            "exported {} sessions, {} answers, {} completions to {}",
            data.sessions.len(),
            data.answers.len(),
            data.completions.len(),
            args.out.display()
        ),
        json: serde_json::json!({
            "sessions": data.sessions.len(),
            "answers": data.answers.len(),
            "completions": data.completions.len(),
        }),
    })
}

fn patient_of(log: &[SessionEvent]) -> Option<PatientId> {
    match &log.first()?.payload {
        aba_core::session::EventPayload::SessionStarted { patient_id, .. } => Some(*patient_id),
        _ => None,
    }
}

fn verify(data_dir: &Path) -> Result<Report> {
    let mut logs = read_logs(data_dir)?;
    logs.retain(|(_, l)| !l.is_empty());
    logs.sort_by(|(a_id, a), (b_id, b)| (a[0].timestamp, a_id).cmp(&(b[0].timestamp, b_id)));
    let mut progress: BTreeMap<PatientId, PatientProgress> = BTreeMap::new();
    let mut problems = Vec::new();
    for (id, log) in &logs {
        let Some(patient) = patient_of(log) else {
            problems.push(format!("{id}: does not start with SESSION_STARTED"));
            continue;
        };
        let base = progress.entry(patient).or_insert_with(|| PatientProgress::new(patient));
        match replay(log, base) {
            Ok(live) => *base = live.progress().clone(),
            Err(e) => problems.push(format!("{id}: {e}")),
        }
    }
    if !problems.is_empty() {
        return Err(Failure::Invalid(problems.join("\n")));
    }
    Ok(Report {
        text: format!("{} logs replay cleanly for {} patients", logs.len(), progress.len()),
        json: serde_json::json!({"logs": logs.len(), "patients": progress.len()}),
    })
}

fn account(cmd: AccountCommand) -> Result<Report> {
    let AccountCommand::New { subject, kind, caseload, pepper } = cmd;
    if !aba_core::deck::plain_identifier(&subject) {
        return Err(Failure::Invalid(format!("subject {subject:?} must be a plain identifier")));
    }
    let kind = match kind {
        Kind::Therapist => PrincipalKind::Therapist,
        Kind::Admin => PrincipalKind::Admin,
    };
    let (config, secret) = AccountConfig::generate(&subject, kind, caseload.into_iter().map(PatientId).collect(), pepper.as_bytes());
    #[derive(Serialize)]
    struct Wrapper<'a> {
        accounts: [&'a AccountConfig; 1],
    }
    let entry = toml::to_string(&Wrapper { accounts: [&config] }).expect("accounts serialize");
    eprintln!("secret for {subject} (shown once): {secret}");
    Ok(Report { text: entry.trim_end().to_owned(), json: serde_json::to_value(&config).expect("accounts serialize") })
}

fn run(cli: Cli) -> Result<Report> {
    match cli.command {
        Command::Deck(c) => deck(c),
        Command::Synth(c) => synth(c),
        Command::Export(a) => export(a),
        Command::Verify { data_dir } => verify(&data_dir),
        Command::Account(c) => account(c),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let json = cli.json;
    match run(cli) {
        Ok(report) => {
            if json {
                println!("{}", report.json);
            } else if !report.text.is_empty() {
                println!("{}", report.text);
            }
            ExitCode::SUCCESS
        }
        Err(f) => {
            if json {
                let kind = match f {
                    Failure::Invalid(_) => "VALIDATION",
                    Failure::Io(_) => "IO",
                    Failure::Denied(_) => "AUTHORIZATION",
                };
                println!("{}", serde_json::json!({"error": kind, "message": f.to_string()}));
            }
            eprintln!("aba-admin: {f}");
            ExitCode::from(f.exit_code())
        }
    }
}
