"""Reader-study service: blinded randomized case presentation, parallel 1-5
scoring, independent error checklists over the six-error taxonomy and six
finding groups, append-only event-log persistence, and aggregation with
seeded bootstrap confidence intervals.

Report provenance lives only in server-side state and the event log; no
client-visible payload ever names which report is generated or reference.
"""

from __future__ import annotations

import json
import os
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

FINDING_GROUPS = ("Pneumothorax", "PleuralEffusion", "Edema",
                  "ConsolidationOrPneumonia", "Atelectasis", "NoFinding")
GROUP_FLAGS = ("FalsePositive", "FalseNegative", "PositionalError",
               "InaccurateDescription")
NO_FINDING_FLAGS = ("FalsePositive", "FalseNegative")
CASE_FLAGS = ("NonexistentComparison", "NonexistentLateral")

ERROR_COUNT_FLAGS = ("FalsePositive", "PositionalError", "InaccurateDescription")


class StudyError(ValueError):
    pass


class EmptyStudy(StudyError):
    pass


class ScoreOutOfRange(StudyError):
    pass


class InvalidFlag(StudyError):
    pass


class UnknownCase(StudyError):
    pass


class UnknownRater(StudyError):
    pass


class NoJudgments(StudyError):
    pass


@dataclass(frozen=True)
class StudyCase:
    case_id: str
    image_id: str
    reference: str
    generated: str
    overlays: dict = field(default_factory=dict)  # {"boxes": {...}, "contours": {...}}

    def __post_init__(self):
        if not self.reference or not self.generated:
            raise StudyError(f"case {self.case_id}: both reports must be non-empty")


def validate_parallel(score_a, score_b):
    for score in (score_a, score_b):
        if not isinstance(score, int) or not 1 <= score <= 5:
            raise ScoreOutOfRange(f"score {score!r} outside 1..5")


def validate_independent(groups: dict, extra_flags=()):
    for group, flags in groups.items():
        if group not in FINDING_GROUPS:
            raise InvalidFlag(f"unknown finding group {group!r}")
        allowed = NO_FINDING_FLAGS if group == "NoFinding" else GROUP_FLAGS
        for flag in flags:
            if flag not in allowed:
                raise InvalidFlag(f"flag {flag!r} not allowed for group {group!r}")
    for flag in extra_flags:
        if flag not in CASE_FLAGS:
            raise InvalidFlag(f"unknown case-level flag {flag!r}")


@dataclass
class Aggregate:
    n_cases: int
    n_parallel: int
    n_independent: int
    preference_rate: float | None = None
    strict_preference_rate: float | None = None
    mean_score_generated: float | None = None
    mean_score_reference: float | None = None
    preference_ci: tuple | None = None
    omission_rate: float | None = None
    omission_fraction: float | None = None
    omission_ci: tuple | None = None
    error_rate: float | None = None
    error_fraction: float | None = None
    error_ci: tuple | None = None
    comparison_rate: float | None = None
    lateral_rate: float | None = None

    def to_json(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v)
                for k, v in self.__dict__.items()}


def _bootstrap_ci(per_case_values: dict, point: float, seed: int,
                  resamples: int = 1000) -> tuple:
    """Percentile bootstrap over cases (clusters); clamped to bracket the
    point estimate."""
    case_ids = sorted(per_case_values)
    rng = np.random.default_rng(seed)
    stats = np.empty(resamples)
    values = [np.asarray(per_case_values[c], dtype=float) for c in case_ids]
    for b in range(resamples):
        idx = rng.integers(0, len(values), size=len(values))
        pooled = np.concatenate([values[i] for i in idx])
        stats[b] = pooled.mean()
    lo, hi = np.percentile(stats, [2.5, 97.5])
    return (min(float(lo), point), max(float(hi), point))


class StudySession:
    """One reader study: cases, raters, randomized per-rater order, blinded
    A/B arms, and an append-only event log."""

    def __init__(self, session_id: str, log_path: str | None = None):
        self.session_id = session_id
        self.log_path = log_path
        self.cases: dict[str, StudyCase] = {}
        self.case_order: list[str] = []
        self.raters: list[str] = []
        self.arms: dict[str, str] = {}      # case_id -> arm holding the generated report
        self.rater_order: dict[str, list[str]] = {}
        self.seed = 0
        self._events: list[dict] = []
        self._seq = 0
        self._lock = threading.Lock()

    # ---- construction -----------------------------------------------------

    @classmethod
    def create(cls, session_id: str, cases, raters, seed: int,
               log_path: str | None = None) -> "StudySession":
        cases = list(cases)
        raters = list(raters)
        if not cases or not raters:
            raise EmptyStudy("need at least one case and one rater")
        session = cls(session_id, log_path)
        event = {
            "type": "created", "session_id": session_id, "seed": seed,
            "raters": raters,
            "cases": [{"case_id": c.case_id, "image_id": c.image_id,
                       "reference": c.reference, "generated": c.generated,
                       "overlays": c.overlays} for c in cases],
        }
        session._apply(event)
        session._persist(event)
        return session

    def _apply(self, event: dict) -> None:
        kind = event["type"]
        if kind == "created":
            self.seed = event["seed"]
            self.raters = list(event["raters"])
            for payload in event["cases"]:
                case = StudyCase(**payload)
                if case.case_id in self.cases:
                    raise StudyError(f"duplicate case id {case.case_id}")
                self.cases[case.case_id] = case
                self.case_order.append(case.case_id)
            rng = np.random.default_rng(self.seed)
            arms = rng.integers(0, 2, size=len(self.case_order))
            self.arms = {cid: ("a" if arm == 0 else "b")
                         for cid, arm in zip(self.case_order, arms)}
            for rater in self.raters:
                perm = rng.permutation(len(self.case_order))
                self.rater_order[rater] = [self.case_order[i] for i in perm]
        elif kind in ("parallel", "independent"):
            self._seq = max(self._seq, event["seq"])
        else:
            raise StudyError(f"unknown event type {kind!r}")
        self._events.append(event)

    def _persist(self, event: dict) -> None:
        if self.log_path:
            with open(self.log_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(event, sort_keys=True) + "\n")

    @classmethod
    def replay(cls, events, log_path: str | None = None) -> "StudySession":
        events = list(events)
        if not events or events[0]["type"] != "created":
            raise StudyError("event log must start with a created event")
        session = cls(events[0]["session_id"], log_path=None)
        for event in events:
            session._apply(event)
        session.log_path = log_path
        return session

    @classmethod
    def replay_file(cls, path) -> "StudySession":
        with open(path, encoding="utf-8") as fh:
            events = [json.loads(line) for line in fh if line.strip()]
        return cls.replay(events, log_path=str(path))

    # ---- client payloads (blinded) -----------------------------------------

    def _check(self, rater_id: str, case_id: str):
        if case_id not in self.cases:
            raise UnknownCase(f"unknown case {case_id!r}")
        if rater_id not in self.rater_order:
            raise UnknownRater(f"unknown rater {rater_id!r}")

    def parallel_payload(self, case_id: str) -> dict:
        case = self.cases[case_id]
        arm = self.arms[case_id]
        report_a = case.generated if arm == "a" else case.reference
        report_b = case.reference if arm == "a" else case.generated
        return {"case_id": case.case_id, "image_id": case.image_id,
                "report_a": report_a, "report_b": report_b,
                "overlays": case.overlays}

    def independent_payload(self, case_id: str) -> dict:
        case = self.cases[case_id]
        return {"case_id": case.case_id, "image_id": case.image_id,
                "report": case.generated, "overlays": case.overlays,
                "finding_groups": list(FINDING_GROUPS)}

    def next_case(self, rater_id: str, protocol: str = "parallel") -> dict | None:
        if rater_id not in self.rater_order:
            raise UnknownRater(f"unknown rater {rater_id!r}")
        done = {e["case_id"] for e in self._events
                if e["type"] == protocol and e["rater_id"] == rater_id}
        for case_id in self.rater_order[rater_id]:
            if case_id not in done:
                if protocol == "parallel":
                    return self.parallel_payload(case_id)
                return self.independent_payload(case_id)
        return None

    # ---- judgments ----------------------------------------------------------

    def submit_parallel(self, rater_id: str, case_id: str,
                        score_a: int, score_b: int) -> dict:
        validate_parallel(score_a, score_b)
        with self._lock:
            self._check(rater_id, case_id)
            replaced = any(e["type"] == "parallel" and e["rater_id"] == rater_id
                           and e["case_id"] == case_id for e in self._events)
            self._seq += 1
            event = {"type": "parallel", "seq": self._seq, "rater_id": rater_id,
                     "case_id": case_id, "score_a": score_a, "score_b": score_b,
                     "submitted_at": time.time()}
            self._apply(event)
            self._persist(event)
        return {"status": "ok", "replaced": replaced}

    def submit_independent(self, rater_id: str, case_id: str, groups: dict,
                           nonexistent_comparison: bool = False,
                           nonexistent_lateral: bool = False) -> dict:
        groups = {g: sorted(set(flags)) for g, flags in groups.items()}
        validate_independent(groups)
        with self._lock:
            self._check(rater_id, case_id)
            replaced = any(e["type"] == "independent" and e["rater_id"] == rater_id
                           and e["case_id"] == case_id for e in self._events)
            self._seq += 1
            event = {"type": "independent", "seq": self._seq, "rater_id": rater_id,
                     "case_id": case_id, "groups": groups,
                     "nonexistent_comparison": bool(nonexistent_comparison),
                     "nonexistent_lateral": bool(nonexistent_lateral),
                     "submitted_at": time.time()}
            self._apply(event)
            self._persist(event)
        return {"status": "ok", "replaced": replaced}

    # ---- aggregation ---------------------------------------------------------

    def _latest(self, kind: str) -> dict:
        latest = {}
        for event in self._events:
            if event["type"] == kind:
                latest[(event["rater_id"], event["case_id"])] = event
        return latest

    def aggregate(self, bootstrap_resamples: int = 1000) -> Aggregate:
        with self._lock:
            parallel = self._latest("parallel")
            independent = self._latest("independent")
        if not parallel and not independent:
            raise NoJudgments("no judgments submitted")
        agg = Aggregate(n_cases=len(self.cases), n_parallel=len(parallel),
                        n_independent=len(independent))
        if parallel:
            by_case: dict[str, list] = {}
            strict: list = []
            gen_scores, ref_scores = [], []
            for (rater, case_id), e in sorted(parallel.items()):
                arm = self.arms[case_id]
                gen = e["score_a"] if arm == "a" else e["score_b"]
                ref = e["score_b"] if arm == "a" else e["score_a"]
                by_case.setdefault(case_id, []).append(1.0 if gen >= ref else 0.0)
                strict.append(1.0 if gen > ref else 0.0)
                gen_scores.append(gen)
                ref_scores.append(ref)
            flat = [v for vals in by_case.values() for v in vals]
            agg.preference_rate = float(np.mean(flat))
            agg.strict_preference_rate = float(np.mean(strict))
            agg.mean_score_generated = float(np.mean(gen_scores))
            agg.mean_score_reference = float(np.mean(ref_scores))
            agg.preference_ci = _bootstrap_ci(by_case, agg.preference_rate,
                                              self.seed, bootstrap_resamples)
        if independent:
            fn_by_case: dict[str, list] = {}
            err_by_case: dict[str, list] = {}
            comparison, lateral = [], []
            for (rater, case_id), e in sorted(independent.items()):
                fn = sum(flags.count("FalseNegative") for flags in e["groups"].values())
                err = sum(sum(flags.count(f) for f in ERROR_COUNT_FLAGS)
                          for flags in e["groups"].values())
                fn_by_case.setdefault(case_id, []).append(float(fn))
                err_by_case.setdefault(case_id, []).append(float(err))
                comparison.append(1.0 if e["nonexistent_comparison"] else 0.0)
                lateral.append(1.0 if e["nonexistent_lateral"] else 0.0)
            fn_flat = [v for vals in fn_by_case.values() for v in vals]
            err_flat = [v for vals in err_by_case.values() for v in vals]
            agg.omission_rate = float(np.mean(fn_flat))
            agg.omission_fraction = float(np.mean([v > 0 for v in fn_flat]))
            agg.omission_ci = _bootstrap_ci(fn_by_case, agg.omission_rate,
                                            self.seed + 1, bootstrap_resamples)
            agg.error_rate = float(np.mean(err_flat))
            agg.error_fraction = float(np.mean([v > 0 for v in err_flat]))
            agg.error_ci = _bootstrap_ci(err_by_case, agg.error_rate,
                                         self.seed + 2, bootstrap_resamples)
            agg.comparison_rate = float(np.mean(comparison))
            agg.lateral_rate = float(np.mean(lateral))
        return agg

    @property
    def events(self) -> list[dict]:
        return list(self._events)


class StudyService:
    """Registry of sessions plus image/overlay lookups for the HTTP layer."""

    def __init__(self, log_dir: str | None = None, images: dict | None = None):
        self.log_dir = log_dir
        self.images = images or {}
        self.sessions: dict[str, StudySession] = {}
        self._lock = threading.Lock()
        self._counter = 0
        if log_dir:
            os.makedirs(log_dir, exist_ok=True)
            for name in sorted(os.listdir(log_dir)):
                if name.endswith(".jsonl"):
                    session = StudySession.replay_file(os.path.join(log_dir, name))
                    self.sessions[session.session_id] = session

    def create_session(self, cases, raters, seed: int) -> StudySession:
        with self._lock:
            self._counter += 1
            session_id = f"session-{self._counter:04d}"
            log_path = (os.path.join(self.log_dir, f"{session_id}.jsonl")
                        if self.log_dir else None)
            session = StudySession.create(session_id, cases, raters, seed, log_path)
            self.sessions[session_id] = session
            return session

    def get(self, session_id: str) -> StudySession:
        if session_id not in self.sessions:
            raise UnknownCase(f"unknown session {session_id!r}")
        return self.sessions[session_id]

    def find_case(self, case_id: str):
        for session in self.sessions.values():
            if case_id in session.cases:
                return session, session.cases[case_id]
        raise UnknownCase(f"unknown case {case_id!r}")


def encode_png(gray: np.ndarray) -> bytes:
    """Minimal 8-bit grayscale PNG encoder (zlib + stdlib only)."""
    arr = np.asarray(gray)
    if arr.dtype != np.uint8:
        arr = np.clip(np.round(arr * 255.0), 0, 255).astype(np.uint8)
    height, width = arr.shape

    def chunk(tag: bytes, payload: bytes) -> bytes:
        return (struct.pack(">I", len(payload)) + tag + payload
                + struct.pack(">I", zlib.crc32(tag + payload) & 0xFFFFFFFF))

    ihdr = struct.pack(">IIBBBBB", width, height, 8, 0, 0, 0, 0)
    raw = b"".join(b"\x00" + row.tobytes() for row in arr)
    return (b"\x89PNG\r\n\x1a\n" + chunk(b"IHDR", ihdr)
            + chunk(b"IDAT", zlib.compress(raw, 9)) + chunk(b"IEND", b""))
