"""Smoke test for the aba_therapy extension module.

Build and install first:

    CARGO_NET_OFFLINE=true pip install --no-build-isolation -e crates/py

then run `python3 python/smoke_test.py`.
"""

import csv
import io
import json
import sys
import tempfile
from fractions import Fraction
from pathlib import Path

import aba_therapy as aba

T0 = 1_709_539_200_000
FIXTURES = Path(__file__).resolve().parent.parent / "fixtures"


def check(cond, what):
    if not cond:
        raise AssertionError(what)
    print(f"ok  {what}")


def run_session(hub, patient, category, required):
    sid = hub.start_session(patient, "th-smoke")["session_id"]
    for outcome in ["INCORRECT", "NO_RESPONSE", "INCORRECT"]:
        trial = hub.present_trial(sid, category, seed=1)
        hub.advance(5_000)
        hub.record_answer(sid, trial["trial_id"], outcome)
    completed = False
    for _ in range(required):
        trial = hub.present_trial(sid, category)
        hub.advance(4_000)
        result = hub.record_answer(sid, trial["trial_id"], "correct", trial["target"]["id"])
        completed = completed or result["objective_completed"]
    summary = hub.end_session(sid)
    return sid, completed, summary


def main():
    check(aba.psi(3, 2) == (3, 2), "psi is exact")
    check(aba.psi(4, 6) == (2, 3), "psi reduces")
    s = aba.summarize([1.0, 2.0, 3.0])
    check(abs(s["mean"] - 2.0) < 1e-12 and abs(s["sem"] - (1 / 3) ** 0.5) < 1e-12, "summary mean and SEM")
    check(aba.summarize([]) is None, "empty summary is None")

    required = 4
    curriculum = aba.Curriculum.synthetic(required_correct=required)
    categories = [c["id"] for c in curriculum.categories()]
    check(len(categories) == 18, "18 categories")
    ladder = curriculum.ladder("tact")
    check(len(ladder["objectives"]) == 15, "ladder has 15 levels")
    check(json.loads(curriculum.to_json()) == json.loads(aba.Curriculum.from_json(curriculum.to_json()).to_json()),
          "curriculum JSON round-trips")

    with tempfile.TemporaryDirectory() as tmp:
        hub = aba.SessionHub(curriculum, data_dir=tmp, clock_ms=T0, id_seed=7)
        sid, completed, summary = run_session(hub, 5, "tact", required)
        check(completed, "objective completes after the required correct answers")
        check(summary["errors"] == 3 and summary["correct"] == required, "session summary counts")
        check(hub.progress(5)["per_category"]["tact"]["current_level"] == 2, "ladder advances to level 2")
        try:
            hub.record_answer(sid, "trl-missing", "CORRECT")
            check(False, "answer to ended session raises")
        except aba.SessionError as e:
            check(e.code in ("SESSION_NOT_ACTIVE", "UNKNOWN_TRIAL"), f"ended session rejects answers ({e.code})")

        logs = hub.logs()
        on_disk = [p.read_text() for p in sorted(Path(tmp, "sessions").glob("*.jsonl"))]
        check(logs == on_disk, "stored logs equal the in-memory logs")
        reopened = aba.SessionHub(curriculum, data_dir=tmp, clock_ms=T0)
        check(reopened.progress(5) == hub.progress(5), "recovery restores progress")
        check(aba.replay_logs(logs)[0] == hub.progress(5), "replay matches live progress")

    rate = aba.error_rate(logs, 5, "tact", 1)
    check(Fraction(rate["psi"]) == Fraction(3, required), "error rate psi = errors / required")
    metrics = aba.patient_metrics(logs, 5, ["tact", "listener"])
    check(metrics["completions"]["tact"] == 1, "metrics count the completion")
    check(abs(metrics["completion_percent"]["tact"] - 100 / 15) < 1e-9, "completion percent over 15 levels")
    eng = aba.engagement(logs[0])
    check(eng["duration_seconds"] == (2 * 5_000 + required * 4_000) / 1000, "engagement runs first to last answer")

    report = aba.objective_report(logs, 5, "tact", 1)
    rows = list(csv.reader(io.StringIO(report)))
    check(len(rows) == 1 + required, "CSV report has one row per counted answer")
    html = aba.objective_report(logs, 5, "tact", 1, format="html")
    check(html.lstrip().lower().startswith("<!doctype html"), "HTML report renders")
    try:
        aba.objective_report(logs, 5, "tact", 2)
        check(False, "uncompleted objective raises")
    except aba.AnalyticsError as e:
        check(e.code == "NOT_COMPLETED", "uncompleted objective is refused")

    tables = aba.export_csv(logs)
    check(set(tables) == {"sessions.csv", "answers.csv", "completions.csv"}, "export produces three tables")
    check(len(list(csv.DictReader(io.StringIO(tables["answers.csv"])))) == 3 + required, "answers table rows")

    profile = {
        "patients": 2,
        "categories": [{"category": "tact", "p_err": 0.25, "objectives": 2}],
        "seed": 42,
    }
    a = aba.generate_sessions(profile, {"required_correct": 3, "pool_extra": 1, "distractors": 2})
    b = aba.generate_sessions(json.dumps(profile), {"required_correct": 3, "pool_extra": 1, "distractors": 2})
    check(a["sha256"] == b["sha256"] and a["logs"] == b["logs"], "synthetic generation is deterministic")
    stats = aba.completion_stats(a["logs"], [1, 2], ["tact"])
    check(stats["total"] == 4, "each synthetic patient completes two levels")

    targets = json.loads((FIXTURES / "cohort_targets.json").read_text())
    plan = aba.solve_cohort(targets)
    check(plan == json.loads((FIXTURES / "cohort_plan.json").read_text()), "solver reproduces the committed plan")
    cohort = aba.generate_cohort(plan)
    check(cohort["sha256"] == (FIXTURES / "cohort_logs.sha256").read_text().strip(), "cohort digest matches")
    psi = aba.category_error_summary(cohort["logs"], "tact")["summary"]["mean"]
    check(abs(psi - 2.05) <= 0.01, f"cohort tact mean psi {psi:.3f}")
    print("all smoke checks passed")


if __name__ == "__main__":
    try:
        main()
    except AssertionError as e:
        print(f"FAIL {e}")
        sys.exit(1)
