import json
import threading

import numpy as np
import pytest
import requests

from drforge.httpd import make_server
from drforge.study import (
    EmptyStudy,
    InvalidFlag,
    NoJudgments,
    ScoreOutOfRange,
    StudyCase,
    StudyService,
    StudySession,
    UnknownCase,
    encode_png,
    validate_independent,
)

CASES = [
    StudyCase("c1", "img1", reference="no acute findings.",
              generated="clear lungs without focal consolidation."),
    StudyCase("c2", "img2", reference="small left effusion.",
              generated="mild left base effusion is seen."),
    StudyCase("c3", "img3", reference="mild cardiomegaly.",
              generated="the heart is mildly enlarged."),
    StudyCase("c4", "img4", reference="right apical pneumothorax.",
              generated="small right apical pneumothorax."),
]
RATERS = ["r1", "r2", "r3"]

# (case, rater) -> (score for the generated arm, score for the reference arm)
PARALLEL_SCORES = {
    ("c1", "r1"): (5, 3), ("c1", "r2"): (5, 3), ("c1", "r3"): (5, 3),
    ("c2", "r1"): (2, 4), ("c2", "r2"): (4, 4), ("c2", "r3"): (1, 5),
    ("c3", "r1"): (4, 2), ("c3", "r2"): (3, 3), ("c3", "r3"): (2, 3),
    ("c4", "r1"): (5, 5), ("c4", "r2"): (3, 4), ("c4", "r3"): (4, 1),
}
# hand tallies: preferred (gen >= ref) = 8/12, strict = 5/12,
# mean generated = 43/12, mean reference = 40/12

INDEPENDENT = {
    ("c1", "r1"): {"groups": {"Pneumothorax": ["FalseNegative"]}},                 # fn1 err0
    ("c2", "r1"): {"groups": {"PleuralEffusion": ["FalsePositive", "InaccurateDescription"]},
                   "nonexistent_comparison": True},                                # fn0 err2
    ("c3", "r1"): {"groups": {}},                                                  # fn0 err0
    ("c4", "r1"): {"groups": {"Edema": ["PositionalError"],
                              "Atelectasis": ["FalseNegative"]}},                  # fn1 err1
    ("c1", "r2"): {"groups": {"NoFinding": ["FalsePositive"]}},                    # fn0 err1
    ("c2", "r2"): {"groups": {"ConsolidationOrPneumonia": ["FalseNegative"]},
                   "nonexistent_lateral": True},                                   # fn1 err0
    ("c3", "r2"): {"groups": {"Pneumothorax": ["FalsePositive", "PositionalError"]}},  # fn0 err2
    ("c4", "r2"): {"groups": {}},                                                  # fn0 err0
}
# hand tallies over 8 reports: omission_rate 3/8, error_rate 6/8,
# omission_fraction 3/8, error_fraction 4/8, comparison 1/8, lateral 1/8


def submit_fixture(session):
    """Submit the 20-judgment fixture through the blinded payloads."""
    for (case_id, rater), (gen, ref) in sorted(PARALLEL_SCORES.items()):
        payload = session.parallel_payload(case_id)
        case = session.cases[case_id]
        if payload["report_a"] == case.generated:
            session.submit_parallel(rater, case_id, score_a=gen, score_b=ref)
        else:
            session.submit_parallel(rater, case_id, score_a=ref, score_b=gen)
    for (case_id, rater), body in sorted(INDEPENDENT.items()):
        session.submit_independent(rater, case_id, body.get("groups", {}),
                                   body.get("nonexistent_comparison", False),
                                   body.get("nonexistent_lateral", False))


@pytest.fixture()
def session(tmp_path):
    log = tmp_path / "session.jsonl"
    return StudySession.create("sess-t", CASES, RATERS, seed=99, log_path=str(log))


class TestSessionSetup:
    def test_same_seed_same_presentation(self):
        a = StudySession.create("a", CASES, RATERS, seed=7)
        b = StudySession.create("b", CASES, RATERS, seed=7)
        assert a.rater_order == b.rater_order
        assert a.arms == b.arms

    def test_raters_get_independent_orders(self):
        many = [StudyCase(f"k{i}", f"img{i}", reference="ref text.",
                          generated="gen text.") for i in range(12)]
        session = StudySession.create("x", many, [f"r{i}" for i in range(6)], seed=3)
        orders = {tuple(v) for v in session.rater_order.values()}
        assert len(orders) > 1

    def test_empty_study_rejected(self):
        with pytest.raises(EmptyStudy):
            StudySession.create("x", [], RATERS, seed=1)
        with pytest.raises(EmptyStudy):
            StudySession.create("x", CASES, [], seed=1)

    def test_blinding_no_source_strings_in_payloads(self, session):
        blobs = []
        for rater in RATERS:
            for case_id in session.case_order:
                blobs.append(json.dumps(session.parallel_payload(case_id)))
                blobs.append(json.dumps(session.independent_payload(case_id)))
            nxt = session.next_case(rater, "parallel")
            blobs.append(json.dumps(nxt))
        for blob in blobs:
            low = blob.lower()
            assert '"generated"' not in low and '"reference"' not in low
            assert "arm" not in json.loads(blob)

    def test_both_reports_served_blind(self, session):
        payload = session.parallel_payload("c2")
        case = session.cases["c2"]
        assert {payload["report_a"], payload["report_b"]} == \
            {case.reference, case.generated}


class TestJudgments:
    def test_score_out_of_range(self, session):
        with pytest.raises(ScoreOutOfRange):
            session.submit_parallel("r1", "c1", 6, 3)
        with pytest.raises(ScoreOutOfRange):
            session.submit_parallel("r1", "c1", 0, 3)

    def test_unknown_case(self, session):
        with pytest.raises(UnknownCase):
            session.submit_parallel("r1", "nope", 3, 3)

    def test_submit_then_fetch_identical(self, session):
        session.submit_parallel("r1", "c1", 4, 2)
        event = [e for e in session.events if e["type"] == "parallel"][-1]
        assert (event["score_a"], event["score_b"]) == (4, 2)

    def test_resubmission_replaces_with_audit(self, session):
        session.submit_parallel("r1", "c1", 2, 5)
        ack = session.submit_parallel("r1", "c1", 5, 2)
        assert ack["replaced"]
        # both submissions stay in the log; aggregation uses the latest
        events = [e for e in session.events if e["type"] == "parallel"]
        assert len(events) == 2
        agg = session.aggregate(bootstrap_resamples=10)
        arm = session.arms["c1"]
        expected = 1.0 if (5 if arm == "a" else 2) >= (2 if arm == "a" else 5) else 0.0
        assert agg.preference_rate == expected

    def test_invalid_flag_combinations(self, session):
        with pytest.raises(InvalidFlag):
            session.submit_independent("r1", "c1", {"NoFinding": ["PositionalError"]})
        with pytest.raises(InvalidFlag):
            session.submit_independent("r1", "c1", {"Lungs": ["FalsePositive"]})
        with pytest.raises(InvalidFlag):
            validate_independent({"Edema": ["NotAFlag"]})

    def test_independent_round_trip(self, session):
        groups = {"Pneumothorax": ["FalseNegative"],
                  "Edema": ["FalsePositive", "PositionalError"]}
        session.submit_independent("r2", "c3", groups, nonexistent_lateral=True)
        event = [e for e in session.events if e["type"] == "independent"][-1]
        assert event["groups"]["Pneumothorax"] == ["FalseNegative"]
        assert sorted(event["groups"]["Edema"]) == ["FalsePositive", "PositionalError"]
        assert event["nonexistent_lateral"] is True

    def test_next_case_advances(self, session):
        first = session.next_case("r1", "parallel")
        session.submit_parallel("r1", first["case_id"], 3, 3)
        second = session.next_case("r1", "parallel")
        assert second["case_id"] != first["case_id"]

    def test_no_judgments_raises(self, session):
        with pytest.raises(NoJudgments):
            session.aggregate()


class TestAggregate:
    def test_hand_computed_rates(self, session):
        submit_fixture(session)
        agg = session.aggregate()
        assert agg.n_parallel == 12 and agg.n_independent == 8
        assert agg.preference_rate == pytest.approx(8 / 12, abs=1e-12)
        assert agg.strict_preference_rate == pytest.approx(5 / 12, abs=1e-12)
        assert agg.mean_score_generated == pytest.approx(43 / 12, abs=1e-12)
        assert agg.mean_score_reference == pytest.approx(40 / 12, abs=1e-12)
        assert agg.omission_rate == pytest.approx(3 / 8, abs=1e-12)
        assert agg.error_rate == pytest.approx(6 / 8, abs=1e-12)
        assert agg.omission_fraction == pytest.approx(3 / 8, abs=1e-12)
        assert agg.error_fraction == pytest.approx(4 / 8, abs=1e-12)
        assert agg.comparison_rate == pytest.approx(1 / 8, abs=1e-12)
        assert agg.lateral_rate == pytest.approx(1 / 8, abs=1e-12)

    def test_all_equal_scores_prefer_generated(self, session):
        for rater in RATERS:
            for case_id in session.case_order:
                session.submit_parallel(rater, case_id, 3, 3)
        agg = session.aggregate(bootstrap_resamples=10)
        assert agg.preference_rate == 1.0  # >= convention, documented
        assert agg.strict_preference_rate == 0.0

    def test_one_fn_across_four_reports(self, session):
        session.submit_independent("r1", "c1", {"Pneumothorax": ["FalseNegative"]})
        for case_id in ("c2", "c3", "c4"):
            session.submit_independent("r1", case_id, {})
        agg = session.aggregate(bootstrap_resamples=10)
        assert agg.omission_rate == pytest.approx(0.25, abs=1e-12)

    def test_bootstrap_matches_independent_resampler(self, session):
        submit_fixture(session)
        agg = session.aggregate()

        def duplicate_ci(per_case, point, seed, resamples=1000):
            ids = sorted(per_case)
            rng = np.random.default_rng(seed)
            stats = np.empty(resamples)
            vals = [np.asarray(per_case[c], dtype=float) for c in ids]
            for b in range(resamples):
                idx = rng.integers(0, len(vals), size=len(vals))
                stats[b] = np.concatenate([vals[i] for i in idx]).mean()
            lo, hi = np.percentile(stats, [2.5, 97.5])
            return (min(float(lo), point), max(float(hi), point))

        pref_by_case = {}
        for (case_id, rater), (gen, ref) in PARALLEL_SCORES.items():
            pref_by_case.setdefault(case_id, []).append(1.0 if gen >= ref else 0.0)
        # session iterates (rater, case) sorted; per-case value order must match
        ordered = {}
        for (rater, case_id) in sorted((r, c) for (c, r) in PARALLEL_SCORES):
            gen, ref = PARALLEL_SCORES[(case_id, rater)]
            ordered.setdefault(case_id, []).append(1.0 if gen >= ref else 0.0)
        want = duplicate_ci(ordered, agg.preference_rate, session.seed)
        assert agg.preference_ci[0] == pytest.approx(want[0], abs=1e-12)
        assert agg.preference_ci[1] == pytest.approx(want[1], abs=1e-12)

    def test_ci_brackets_point(self, session):
        submit_fixture(session)
        agg = session.aggregate()
        assert agg.preference_ci[0] <= agg.preference_rate <= agg.preference_ci[1]
        assert agg.omission_ci[0] <= agg.omission_rate <= agg.omission_ci[1]
        assert agg.error_ci[0] <= agg.error_rate <= agg.error_ci[1]

    def test_submission_order_invariance(self, tmp_path):
        a = StudySession.create("a", CASES, RATERS, seed=99)
        b = StudySession.create("b", CASES, RATERS, seed=99)
        submit_fixture(a)
        # reversed submission order for b
        for (case_id, rater), (gen, ref) in sorted(PARALLEL_SCORES.items(), reverse=True):
            arm = b.arms[case_id]
            sa, sb = (gen, ref) if arm == "a" else (ref, gen)
            b.submit_parallel(rater, case_id, sa, sb)
        for (case_id, rater), body in sorted(INDEPENDENT.items(), reverse=True):
            b.submit_independent(rater, case_id, body.get("groups", {}),
                                 body.get("nonexistent_comparison", False),
                                 body.get("nonexistent_lateral", False))
        assert a.aggregate().to_json() == b.aggregate().to_json()

    def test_event_log_replay_bit_exact(self, session, tmp_path):
        submit_fixture(session)
        replayed = StudySession.replay_file(session.log_path)
        assert replayed.aggregate().to_json() == session.aggregate().to_json()


class TestPng:
    def test_png_signature_and_size(self):
        img = np.linspace(0, 1, 64 * 64).reshape(64, 64)
        blob = encode_png(img)
        assert blob[:8] == b"\x89PNG\r\n\x1a\n"
        assert b"IHDR" in blob and b"IEND" in blob


@pytest.fixture()
def live_server(tmp_path):
    images = {f"img{i}": np.full((32, 32), i / 10) for i in range(1, 5)}
    service = StudyService(log_dir=str(tmp_path / "logs"), images=images)
    server = make_server(service, port=0)
    thread = threading.Thread(target=server.serve_forever, daemon=True)
    thread.start()
    base = f"http://127.0.0.1:{server.server_port}"
    yield base, service
    server.shutdown()


class TestHttp:
    def _create(self, base):
        body = {"cases": [{"case_id": c.case_id, "image_id": c.image_id,
                           "reference": c.reference, "generated": c.generated,
                           "overlays": {"boxes": {"pneumonia": "[0.1, 0.2, 0.3, 0.4]"}}}
                          for c in CASES],
                "raters": RATERS, "seed": 5}
        r = requests.post(f"{base}/v1/sessions", json=body, timeout=5)
        assert r.status_code == 200
        return r.json()["session_id"]

    def test_full_flow(self, live_server):
        base, _ = live_server
        sid = self._create(base)
        nxt = requests.get(f"{base}/v1/sessions/{sid}/next",
                           params={"rater": "r1"}, timeout=5).json()
        assert "report_a" in nxt and "report_b" in nxt
        low = json.dumps(nxt).lower()
        assert '"generated"' not in low and '"reference"' not in low
        ack = requests.post(f"{base}/v1/judgments/parallel", timeout=5,
                            json={"session_id": sid, "rater_id": "r1",
                                  "case_id": nxt["case_id"],
                                  "score_a": 4, "score_b": 2}).json()
        assert ack["status"] == "ok"
        ind = requests.get(f"{base}/v1/sessions/{sid}/next",
                           params={"rater": "r1", "protocol": "independent"},
                           timeout=5).json()
        assert "report" in ind and "report_a" not in ind
        requests.post(f"{base}/v1/judgments/independent", timeout=5,
                      json={"session_id": sid, "rater_id": "r1",
                            "case_id": ind["case_id"],
                            "groups": {"Pneumothorax": ["FalseNegative"]}})
        agg = requests.get(f"{base}/v1/sessions/{sid}/aggregate", timeout=5).json()
        assert agg["n_parallel"] == 1 and agg["n_independent"] == 1
        assert agg["omission_rate"] == 1.0

    def test_image_and_overlays(self, live_server):
        base, _ = live_server
        self._create(base)
        img = requests.get(f"{base}/v1/cases/c1/image", timeout=5)
        assert img.status_code == 200
        assert img.content[:8] == b"\x89PNG\r\n\x1a\n"
        ov = requests.get(f"{base}/v1/cases/c1/overlays", timeout=5).json()
        assert ov["boxes"]["pneumonia"] == "[0.1, 0.2, 0.3, 0.4]"

    def test_error_shapes(self, live_server):
        base, _ = live_server
        sid = self._create(base)
        r = requests.post(f"{base}/v1/judgments/parallel", timeout=5,
                          json={"session_id": sid, "rater_id": "r1",
                                "case_id": "c1", "score_a": 6, "score_b": 2})
        assert r.status_code == 400
        assert r.json()["code"] == "ScoreOutOfRange"
        r = requests.post(f"{base}/v1/judgments/parallel", timeout=5,
                          json={"session_id": sid, "rater_id": "r1",
                                "case_id": "missing", "score_a": 3, "score_b": 2})
        assert r.status_code == 404
        assert r.json()["code"] == "UnknownCase"

    def test_service_restart_replays_logs(self, live_server, tmp_path):
        base, service = live_server
        sid = self._create(base)
        requests.post(f"{base}/v1/judgments/parallel", timeout=5,
                      json={"session_id": sid, "rater_id": "r1",
                            "case_id": "c1", "score_a": 5, "score_b": 1})
        fresh = StudyService(log_dir=service.log_dir)
        agg_a = service.get(sid).aggregate(bootstrap_resamples=10).to_json()
        agg_b = fresh.get(sid).aggregate(bootstrap_resamples=10).to_json()
        assert agg_a == agg_b
