"""
Tests for triage.py:
route(), zone_action(), decide(), zone_distribution(), session_summary(),
ReferralRegistry (register, confirm_attendance, record_result, replay, followup_due),
register_case(), followup_due().
"""

import json
import threading
from datetime import date, timedelta
from decimal import Decimal

import numpy as np
import pytest

from dermatriage.modules import triage
from dermatriage.modules.triage import (
    CascadeContractError,
    CascadeResult,
    GreenZoneNotRegistrable,
    ProbabilityOutOfRange,
    ReferralRegistry,
    RegistryCorrupt,
    RegistryEntry,
    UnknownCase,
    Urgency,
    Zone,
)

DAY0 = date(2025, 6, 7)


### FIXTURES ###

@pytest.fixture
def registry(tmp_path):
    reg = ReferralRegistry(tmp_path / "registry.jsonl")
    yield reg
    reg.close()


def entry(case_id, zone=Zone.RED, decision_date=DAY0, urgency=None):
    return RegistryEntry(case_id=case_id, zone=zone, decision_date=decision_date, urgency=urgency)


# Test route
@pytest.mark.parametrize("p, zone", [
    (0.0, Zone.GREEN), (0.1499999, Zone.GREEN), (0.15, Zone.YELLOW), (0.3, Zone.YELLOW),
    (0.4999999, Zone.YELLOW), (0.50, Zone.RED), (0.71, Zone.RED), (1.0, Zone.RED),
])
def test_route_boundaries(p, zone):
    assert triage.route(p) is zone


@pytest.mark.parametrize("p", [-0.01, 1.01, float("nan"), "0.5"])
def test_route_rejects_invalid_probability(p):
    with pytest.raises(ProbabilityOutOfRange):
        triage.route(p)


def test_route_custom_thresholds():
    assert triage.route(0.2, green_threshold=0.25, red_threshold=0.6) is Zone.GREEN
    assert triage.route(0.6, green_threshold=0.25, red_threshold=0.6) is Zone.RED


def test_route_is_monotone():
    """A higher probability never lands in a lower zone."""
    grid = np.linspace(0.0, 1.0, 1001)
    ranks = [triage.route(float(p)).rank for p in grid]
    assert ranks == sorted(ranks)


# Test zone_action / decide
def test_red_mel_is_urgent_oncologist_within_three_days():
    decision = triage.zone_action(Zone.RED, "MEL")
    assert decision.urgency is Urgency.URGENT_ONCOLOGIST_3D
    assert decision.action.max_working_days == 3
    assert decision.action.biopsy_or_excision
    assert decision.audit_flag is None


@pytest.mark.parametrize("stage2, urgency", [
    ("SCC", Urgency.ONCO_DERMATOLOGIST), ("BCC", Urgency.SCHEDULED_DERMATOLOGIST),
])
def test_red_urgency_by_stage2_class(stage2, urgency):
    assert triage.zone_action(Zone.RED, stage2).urgency is urgency


def test_red_without_stage2_is_flagged(monkeypatch):
    warnings = []
    monkeypatch.setattr(triage.logger, "warning", lambda msg: warnings.append(msg))

    decision = triage.zone_action(Zone.RED, None)

    assert decision.urgency is None
    assert decision.audit_flag == triage.MISSING_STAGE2_FLAG
    assert decision.action.referral
    assert warnings


def test_yellow_and_green_actions():
    yellow = triage.zone_action(Zone.YELLOW)
    green = triage.zone_action(Zone.GREEN)
    assert yellow.action.repeat_dermoscopy and yellow.action.biopsy_on_repeat
    assert yellow.action.referral == "dermatologist"
    assert green.action.recheck_months == (6, 12)
    assert green.action.referral is None
    assert "inform patient" in green.action.describe()


def test_decide_routes_cascade_result():
    decision = triage.decide(CascadeResult(0.71, "MEL"))
    assert decision.zone is Zone.RED
    assert decision.urgency is Urgency.URGENT_ONCOLOGIST_3D


def test_cascade_result_enforces_contract():
    with pytest.raises(CascadeContractError):
        CascadeResult(0.3, "MEL")
    with pytest.raises(ProbabilityOutOfRange):
        CascadeResult(1.5)


# Test zone_distribution
def test_zone_distribution_validation_counts():
    cases = ([CascadeResult(0.05)] * 121 + [CascadeResult(0.3)] * 30 + [CascadeResult(0.8, "BCC")] * 25)

    distribution = triage.zone_distribution(cases)

    assert distribution.counts == {Zone.GREEN: 121, Zone.YELLOW: 30, Zone.RED: 25}
    assert distribution.percentages == {
        Zone.GREEN: Decimal("68.8"), Zone.YELLOW: Decimal("17.0"), Zone.RED: Decimal("14.2"),
    }
    assert distribution.total == 176


def test_zone_distribution_empty_has_no_percentages():
    distribution = triage.zone_distribution([])
    assert distribution.total == 0
    assert distribution.percentages is None


# Test session_summary
def test_session_summary_counts_per_session():
    rows = [
        {"session": "6", "zone": Zone.RED, "reference_label": "benign", "nosology_reference": "DN"},
        {"session": "6", "zone": Zone.GREEN, "reference_label": "benign", "nosology_reference": "NV"},
        {"session": "8", "zone": Zone.RED, "reference_label": "malignant", "nosology_reference": "MEL"},
    ]

    summary = triage.session_summary(rows)

    assert summary["session"].tolist() == ["6", "8", "Total"]
    assert summary["patients"].tolist() == [2, 1, 3]
    assert summary["red"].tolist() == [1, 1, 2]
    assert summary["oncological_or_premalignant"].tolist() == [1, 1, 2]
    assert summary["MEL"].tolist() == [0, 1, 1]


# Test registry
def test_register_sets_control_date(registry):
    stored = registry.register(entry("c1", urgency=Urgency.URGENT_ONCOLOGIST_3D))
    assert stored.control_date == DAY0 + timedelta(days=28)
    assert stored.urgency is Urgency.URGENT_ONCOLOGIST_3D
    assert stored.recurrence == 1


def test_register_rejects_green(registry):
    with pytest.raises(GreenZoneNotRegistrable):
        registry.register(entry("c1", zone=Zone.GREEN))
    assert not registry.log_path.exists()


def test_reregistration_replaces_entry_and_keeps_audit(registry):
    registry.register(entry("c1", zone=Zone.YELLOW))
    registry.confirm_attendance("c1", DAY0 + timedelta(days=3))
    later = DAY0 + timedelta(days=120)

    stored = registry.register(entry("c1", zone=Zone.YELLOW, decision_date=later))

    assert len(registry.live_entries()) == 1
    assert stored.decision_date == later
    assert stored.recurrence == 2
    assert stored.biopsy_recommended
    assert not stored.attendance_confirmed
    audit = registry.audit_records()
    assert len(audit) == 1
    assert audit[0].previous_attendance_confirmed
    assert audit[0].previous_decision_date == DAY0


def test_same_session_registration_is_idempotent(registry):
    registry.register(entry("c1", zone=Zone.YELLOW))
    lines_before = registry.log_path.read_text()

    stored = registry.register(entry("c1", zone=Zone.YELLOW))

    assert stored.recurrence == 1
    assert not stored.biopsy_recommended
    assert registry.audit_records() == []
    assert registry.log_path.read_text() == lines_before


def test_replayed_duplicate_register_event_counts_once(tmp_path):
    event = {"event": "register", "case_id": "c1", "zone": "Yellow", "decision_date": DAY0.isoformat()}
    log = tmp_path / "registry.jsonl"
    log.write_text(json.dumps(event) + "\n" + json.dumps(event) + "\n")

    reg = ReferralRegistry(log)
    stored = reg.get("c1")
    reg.close()

    assert stored.recurrence == 1
    assert not stored.biopsy_recommended


def test_red_after_yellow_does_not_recommend_biopsy_by_repeat(registry):
    registry.register(entry("c1", zone=Zone.YELLOW))
    stored = registry.register(entry("c1", zone=Zone.RED, urgency=Urgency.SCHEDULED_DERMATOLOGIST))
    assert not stored.biopsy_recommended
    assert stored.zone is Zone.RED


def test_confirm_unknown_case(registry):
    with pytest.raises(UnknownCase):
        registry.confirm_attendance("ghost", DAY0)
    assert not registry.log_path.exists()


def test_record_result(registry):
    registry.register(entry("c1"))
    registry.record_result("c1", "melanoma confirmed by histology")
    assert registry.get("c1").result_text == "melanoma confirmed by histology"


def test_log_lines_are_sorted_json(registry):
    registry.register(entry("c1", urgency=Urgency.ONCO_DERMATOLOGIST))
    line = registry.log_path.read_text().splitlines()[0]
    event = json.loads(line)
    assert list(event) == sorted(event)
    assert event["event"] == "register"


def test_replay_rebuilds_state(tmp_path):
    log = tmp_path / "registry.jsonl"
    first = ReferralRegistry(log)
    first.register(entry("a", zone=Zone.YELLOW))
    first.register(entry("b", urgency=Urgency.URGENT_ONCOLOGIST_3D))
    first.confirm_attendance("b", DAY0 + timedelta(days=2))
    first.register(entry("a", zone=Zone.YELLOW, decision_date=DAY0 + timedelta(days=40)))
    expected = first.live_entries()
    first.close()

    second = ReferralRegistry(log)

    assert second.live_entries() == expected
    assert len(second.audit_records()) == 1
    second.close()


def test_replay_of_corrupt_log(tmp_path):
    log = tmp_path / "registry.jsonl"
    log.write_text('{"event": "register", "case_id": "a"\n')
    with pytest.raises(RegistryCorrupt):
        ReferralRegistry(log)


def test_replay_of_confirm_before_register(tmp_path):
    log = tmp_path / "registry.jsonl"
    log.write_text(json.dumps({"event": "confirm_attendance", "case_id": "a", "date": "2025-06-07"}) + "\n")
    with pytest.raises(RegistryCorrupt):
        ReferralRegistry(log)


def test_followup_due_orders_by_control_date(registry):
    triage.register_case(registry, entry("b", decision_date=DAY0))
    triage.register_case(registry, entry("a", decision_date=DAY0))
    triage.register_case(registry, entry("c", decision_date=DAY0 - timedelta(days=10)))
    triage.register_case(registry, entry("d", decision_date=DAY0 + timedelta(days=1)))
    registry.confirm_attendance("a", DAY0 + timedelta(days=5))

    due = triage.followup_due(registry, DAY0 + timedelta(days=28))

    assert [e.case_id for e in due] == ["c", "b"]


def test_concurrent_registrations_all_land(registry):
    def worker(start):
        for i in range(start, start + 10):
            registry.register(entry(f"case-{i:03d}", zone=Zone.YELLOW))

    threads = [threading.Thread(target=worker, args=(n * 10,)) for n in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()

    assert len(registry.live_entries()) == 40
    assert len(registry.log_path.read_text().splitlines()) == 40


def test_registry_random_event_sequences(tmp_path):
    """
    Random register/confirm sequences checked against a dict model:
    one live entry per case, control = decision + 28 days, followup_due equals a brute-force filter.
    """
    rng = np.random.default_rng(29)
    for trial in range(1000):
        registry = ReferralRegistry(tmp_path / f"registry-{trial}.jsonl")
        model = {}
        for _ in range(int(rng.integers(1, 7))):
            case_id = f"c{int(rng.integers(0, 4))}"
            day = DAY0 + timedelta(days=int(rng.integers(0, 60)))
            if rng.random() < 0.6:
                zone = Zone.YELLOW if rng.random() < 0.5 else Zone.RED
                registry.register(entry(case_id, zone=zone, decision_date=day))
                model[case_id] = {"decision": day, "confirmed": False}
            elif case_id in model:
                registry.confirm_attendance(case_id, day)
                model[case_id]["confirmed"] = True
            else:
                with pytest.raises(UnknownCase):
                    registry.confirm_attendance(case_id, day)

        live = registry.live_entries()
        assert [e.case_id for e in live] == sorted(model)
        for e in live:
            assert e.control_date == e.decision_date + timedelta(days=28)
            assert e.decision_date == model[e.case_id]["decision"]

        today = DAY0 + timedelta(days=int(rng.integers(0, 100)))
        expected = sorted(
            (state["decision"] + timedelta(days=28), case_id)
            for case_id, state in model.items()
            if state["decision"] + timedelta(days=28) <= today and not state["confirmed"]
        )
        assert [(e.control_date, e.case_id) for e in registry.followup_due(today)] == expected
        registry.close()
