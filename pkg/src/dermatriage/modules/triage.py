"""
triage.py

Three-zone routing of cascade malignancy probabilities and the referral
registry for Yellow and Red cases.

Routing:
    Green  P < 0.15         record, inform patient, re-examine in 6-12 months
    Yellow 0.15 <= P < 0.50 dermatologist referral, repeat dermoscopy, biopsy on repeat
    Red    P >= 0.50        urgent referral; Stage-2 class sets the urgency

Registry:
    Append-only JSON-lines event log (register, confirm_attendance, record_result).
    Live state is rebuilt by replaying the log into the SQLAlchemy view in db.py.
    Writes go through a single lock; every live entry has control date = decision + 28 days.
"""

import json
import threading
from dataclasses import dataclass
from datetime import date, timedelta
from enum import StrEnum
from pathlib import Path

import pandas as pd
from sqlalchemy import select

from dermatriage.logger import logger
from dermatriage.modules.db import count_rows, create_db_engine, get_session_factory, reset_tables
from dermatriage.modules.models import AuditRecord, RegistryRecord
from dermatriage.utils.data_checks import check_cascade_contract, check_probability
from dermatriage.utils.rendering import percent_half_up

GREEN_THRESHOLD = 0.15
RED_THRESHOLD = 0.50
CONTROL_INTERVAL = timedelta(days=28)
MEL_MAX_WORKING_DAYS = 3


class ProbabilityOutOfRange(Exception):
    """Raised when a malignancy probability is not a finite value in [0, 1]."""
    pass


class CascadeContractError(Exception):
    """Raised when a Stage-2 class accompanies a probability below the Stage-2 trigger."""
    pass


class GreenZoneNotRegistrable(Exception):
    """Raised when a Green-zone case is offered to the referral registry."""
    pass


class UnknownCase(Exception):
    """Raised when a registry event names a case with no live entry."""
    pass


class RegistryCorrupt(Exception):
    """Raised when the registry log cannot be replayed."""
    pass


class Zone(StrEnum):
    GREEN = "Green"
    YELLOW = "Yellow"
    RED = "Red"

    @property
    def rank(self):
        return ("Green", "Yellow", "Red").index(self.value)


class Urgency(StrEnum):
    URGENT_ONCOLOGIST_3D = "UrgentOncologist3d"
    ONCO_DERMATOLOGIST = "OncoDermatologist"
    SCHEDULED_DERMATOLOGIST = "ScheduledDermatologist"


RED_URGENCY = {
    "MEL": Urgency.URGENT_ONCOLOGIST_3D,
    "SCC": Urgency.ONCO_DERMATOLOGIST,
    "BCC": Urgency.SCHEDULED_DERMATOLOGIST,
}

MISSING_STAGE2_FLAG = "MissingStage2ForRed"


@dataclass(frozen=True)
class CascadeResult:
    probability: float
    stage2_class: str | None = None

    def __post_init__(self):
        problem = check_probability(self.probability)
        if problem:
            raise ProbabilityOutOfRange(problem)
        problem = check_cascade_contract(self.probability, self.stage2_class)
        if problem:
            raise CascadeContractError(problem)


@dataclass(frozen=True)
class RoutingAction:
    """What staff do for a zone."""
    steps: tuple
    referral: str | None = None
    recheck_months: tuple | None = None
    repeat_dermoscopy: bool = False
    biopsy_on_repeat: bool = False
    biopsy_or_excision: bool = False
    max_working_days: int | None = None  # metadata only, no holiday calendar applied

    def describe(self):
        return "; ".join(self.steps)


@dataclass(frozen=True)
class RoutingDecision:
    zone: Zone
    action: RoutingAction
    urgency: Urgency | None = None
    audit_flag: str | None = None


@dataclass(frozen=True)
class RegistryEntry:
    case_id: str
    zone: Zone
    decision_date: date
    referral_issued: bool = True
    attendance_confirmed: bool = False
    urgency: Urgency | None = None
    recurrence: int = 1
    biopsy_recommended: bool = False
    result_text: str | None = None

    @property
    def control_date(self):
        return self.decision_date + CONTROL_INTERVAL


@dataclass(frozen=True)
class ZoneDistribution:
    counts: dict
    percentages: dict | None  # None for an empty input (no 0/0 percentages)

    @property
    def total(self):
        return sum(self.counts.values())


# --- Routing ---

def route(p, green_threshold=GREEN_THRESHOLD, red_threshold=RED_THRESHOLD):
    """Map a malignancy probability to its zone; 0.15 is Yellow and 0.50 is Red."""
    problem = check_probability(p)
    if problem:
        raise ProbabilityOutOfRange(problem)
    if p < green_threshold:
        return Zone.GREEN
    if p < red_threshold:
        return Zone.YELLOW
    return Zone.RED


GREEN_ACTION = RoutingAction(
    steps=("record in medical record", "inform patient", "repeat examination in 6-12 months"),
    recheck_months=(6, 12),
)

YELLOW_ACTION = RoutingAction(
    steps=("refer to dermatologist", "repeat dermoscopy", "biopsy if the case falls in this zone again"),
    referral="dermatologist",
    repeat_dermoscopy=True,
    biopsy_on_repeat=True,
)

RED_ACTIONS = {
    Urgency.URGENT_ONCOLOGIST_3D: RoutingAction(
        steps=("urgent referral to oncologist within 3 working days", "priority appointment",
               "biopsy or excision"),
        referral="oncologist",
        biopsy_or_excision=True,
        max_working_days=MEL_MAX_WORKING_DAYS,
    ),
    Urgency.ONCO_DERMATOLOGIST: RoutingAction(
        steps=("referral to onco-dermatologist", "priority appointment", "biopsy or excision"),
        referral="onco-dermatologist",
        biopsy_or_excision=True,
    ),
    Urgency.SCHEDULED_DERMATOLOGIST: RoutingAction(
        steps=("scheduled dermatologist consultation", "biopsy"),
        referral="dermatologist",
        biopsy_or_excision=True,
    ),
    None: RoutingAction(
        steps=("urgent referral to oncologist or onco-dermatologist", "priority appointment",
               "biopsy or excision"),
        referral="oncologist or onco-dermatologist",
        biopsy_or_excision=True,
    ),
}


def zone_action(zone, stage2_class=None):
    """
    Staff action for a zone; in the Red zone the Stage-2 class sets the urgency.

    A Red case without a Stage-2 class still gets an urgent referral, with
    urgency absent and the MissingStage2ForRed audit flag.
    """
    zone = Zone(zone)
    if zone is Zone.GREEN:
        return RoutingDecision(zone, GREEN_ACTION)
    if zone is Zone.YELLOW:
        return RoutingDecision(zone, YELLOW_ACTION)

    if stage2_class is None:
        logger.warning("Red-zone decision without a Stage-2 class; urgency left unset")
        return RoutingDecision(zone, RED_ACTIONS[None], None, MISSING_STAGE2_FLAG)
    urgency = RED_URGENCY[stage2_class]
    return RoutingDecision(zone, RED_ACTIONS[urgency], urgency)


def decide(cascade, green_threshold=GREEN_THRESHOLD, red_threshold=RED_THRESHOLD):
    """Route a CascadeResult and attach its action."""
    zone = route(cascade.probability, green_threshold, red_threshold)
    return zone_action(zone, cascade.stage2_class)


def zone_distribution(cases, green_threshold=GREEN_THRESHOLD, red_threshold=RED_THRESHOLD):
    """Zone counts and half-up one-decimal percentages for a list of CascadeResult."""
    counts = {zone: 0 for zone in Zone}
    for cascade in cases:
        counts[route(cascade.probability, green_threshold, red_threshold)] += 1
    total = sum(counts.values())
    if total == 0:
        return ZoneDistribution(counts, None)
    return ZoneDistribution(counts, {zone: percent_half_up(n, total) for zone, n in counts.items()})


def session_summary(rows):
    """
    Per-session patient counts by zone and by detected lesion class.

    Parameters:
    rows: iterable of dicts with keys session, zone, reference_label, nosology_reference.

    Returns:
    pd.DataFrame sorted by session with a final 'Total' row.
    """
    columns = ["session", "patients", "green", "yellow", "red", "malignant", "MEL", "BCC", "SCC", "DN",
               "oncological_or_premalignant"]
    frame = pd.DataFrame(list(rows), columns=["session", "zone", "reference_label", "nosology_reference"])
    if frame.empty:
        return pd.DataFrame(columns=columns)

    summary = []
    groups = list(frame.groupby("session", sort=True))
    for session, group in groups + [("Total", frame)]:
        nosology = group["nosology_reference"]
        summary.append({
            "session": session,
            "patients": len(group),
            "green": int((group["zone"] == Zone.GREEN).sum()),
            "yellow": int((group["zone"] == Zone.YELLOW).sum()),
            "red": int((group["zone"] == Zone.RED).sum()),
            "malignant": int((group["reference_label"] == "malignant").sum()),
            "MEL": int((nosology == "MEL").sum()),
            "BCC": int((nosology == "BCC").sum()),
            "SCC": int((nosology == "SCC").sum()),
            "DN": int((nosology == "DN").sum()),
            "oncological_or_premalignant": int(nosology.isin(["MEL", "BCC", "SCC", "DN"]).sum()),
        })
    return pd.DataFrame(summary, columns=columns)


# --- Registry ---

def _same_placement(record, zone, decision_date):
    """True when the live entry already holds this zone for this decision date."""
    return record.zone == zone.value and record.decision_date == decision_date


def _entry_from_record(record):
    return RegistryEntry(
        case_id=record.case_id,
        zone=Zone(record.zone),
        decision_date=record.decision_date,
        referral_issued=record.referral_issued,
        attendance_confirmed=record.attendance_confirmed,
        urgency=Urgency(record.urgency) if record.urgency else None,
        recurrence=record.recurrence,
        biopsy_recommended=record.biopsy_recommended,
        result_text=record.result_text,
    )


class ReferralRegistry:
    """
    Referral registry for Yellow and Red cases.

    Parameters:
    log_path (str | Path): JSON-lines event log, created on first write.
    db_path (str | Path | None): optional SQLite file for the replayed view.
    """

    def __init__(self, log_path, db_path=None):
        self.log_path = Path(log_path)
        self.engine = create_db_engine(db_path)
        self.Session = get_session_factory(self.engine)
        self._lock = threading.Lock()
        self.replay()

    # Event handling

    def replay(self):
        """Rebuild the live view from the event log."""
        reset_tables(self.engine)
        if not self.log_path.exists():
            return
        with self._lock, self.Session() as session:
            with open(self.log_path, encoding="utf-8") as f:
                for line_no, line in enumerate(f, start=1):
                    if not line.strip():
                        continue
                    try:
                        event = json.loads(line)
                        self._apply(session, event)
                    except (json.JSONDecodeError, KeyError, ValueError, UnknownCase) as e:
                        raise RegistryCorrupt(f"{self.log_path}:{line_no}: {e}") from e
            session.commit()
            counts = count_rows(session)
        logger.info(f"Replayed registry log {self.log_path.name}: {counts['registry_entries']} live entries, "
                    f"{counts['registry_audit']} audit records")

    def _append(self, event):
        self.log_path.parent.mkdir(parents=True, exist_ok=True)
        with open(self.log_path, "a", encoding="utf-8", newline="\n") as f:
            f.write(json.dumps(event, sort_keys=True) + "\n")

    def _record(self, event):
        """Apply one event to the view and, once it succeeded, append it to the log."""
        with self._lock, self.Session() as session:
            self._apply(session, event)
            session.commit()
            self._append(event)

    def _apply(self, session, event):
        kind = event["event"]
        if kind == "register":
            self._apply_register(session, event)
        elif kind == "confirm_attendance":
            record = self._live(session, event["case_id"])
            record.attendance_confirmed = True
            record.attendance_date = date.fromisoformat(event["date"])
        elif kind == "record_result":
            record = self._live(session, event["case_id"])
            record.result_text = event["result"]
        else:
            raise ValueError(f"unknown registry event '{kind}'")
        session.flush()

    @staticmethod
    def _live(session, case_id):
        record = session.get(RegistryRecord, case_id)
        if record is None:
            raise UnknownCase(f"case '{case_id}' has no live registry entry")
        return record

    @staticmethod
    def _apply_register(session, event):
        zone = Zone(event["zone"])
        decision_date = date.fromisoformat(event["decision_date"])
        record = session.get(RegistryRecord, event["case_id"])

        if record is None:
            record = RegistryRecord(case_id=event["case_id"], recurrence=0, yellow_visits=0)
            session.add(record)
        elif _same_placement(record, zone, decision_date):
            # Same session placed again: nothing new to count
            return
        else:
            session.add(AuditRecord(
                case_id=record.case_id,
                event="replaced",
                previous_zone=record.zone,
                previous_decision_date=record.decision_date,
                previous_attendance_confirmed=record.attendance_confirmed,
                previous_result_text=record.result_text,
                replaced_on=decision_date,
            ))
            logger.info(f"Registry entry for '{record.case_id}' replaced; previous state kept in audit trail")

        record.zone = zone.value
        record.urgency = event.get("urgency")
        record.decision_date = decision_date
        record.control_date = decision_date + CONTROL_INTERVAL
        record.referral_issued = bool(event.get("referral_issued", True))
        record.attendance_confirmed = bool(event.get("attendance_confirmed", False))
        record.attendance_date = None
        record.result_text = None
        record.recurrence += 1
        if zone is Zone.YELLOW:
            record.yellow_visits += 1
        # A second Yellow placement for the same case calls for biopsy
        record.biopsy_recommended = zone is Zone.YELLOW and record.yellow_visits >= 2

    # Public operations

    def register(self, entry):
        """
        Register a Yellow or Red entry; a repeated case_id replaces the live entry.
        The same zone on the same decision date again leaves the registry unchanged.
        """
        zone = Zone(entry.zone)
        if zone is Zone.GREEN:
            raise GreenZoneNotRegistrable(f"case '{entry.case_id}' is Green and stays out of the registry")
        with self._lock, self.Session() as session:
            live = session.get(RegistryRecord, entry.case_id)
            repeat = live is not None and _same_placement(live, zone, entry.decision_date)
        if repeat:
            logger.debug(f"'{entry.case_id}' already registered {zone} on {entry.decision_date}; entry kept")
            return self.get(entry.case_id)
        self._record({
            "event": "register",
            "case_id": entry.case_id,
            "zone": zone.value,
            "decision_date": entry.decision_date.isoformat(),
            "referral_issued": entry.referral_issued,
            "attendance_confirmed": entry.attendance_confirmed,
            "urgency": entry.urgency.value if entry.urgency else None,
        })
        logger.debug(f"Registered '{entry.case_id}' ({zone}) with control date {entry.control_date}")
        return self.get(entry.case_id)

    def confirm_attendance(self, case_id, on_date):
        self._record({"event": "confirm_attendance", "case_id": case_id, "date": on_date.isoformat()})

    def record_result(self, case_id, result_text):
        """Attach a free-text outcome (e.g. histology) to a live entry."""
        self._record({"event": "record_result", "case_id": case_id, "result": str(result_text)})

    def get(self, case_id):
        with self._lock, self.Session() as session:
            record = session.get(RegistryRecord, case_id)
            return _entry_from_record(record) if record else None

    def live_entries(self):
        with self._lock, self.Session() as session:
            records = session.scalars(select(RegistryRecord).order_by(RegistryRecord.case_id)).all()
            return [_entry_from_record(r) for r in records]

    def audit_records(self):
        with self._lock, self.Session() as session:
            return session.scalars(select(AuditRecord).order_by(AuditRecord.id)).all()

    def followup_due(self, today):
        """Unconfirmed entries whose control date is on or before today, earliest first."""
        stmt = (
            select(RegistryRecord)
            .where(RegistryRecord.control_date <= today)
            .where(RegistryRecord.attendance_confirmed.is_(False))
            .order_by(RegistryRecord.control_date, RegistryRecord.case_id)
        )
        with self._lock, self.Session() as session:
            return [_entry_from_record(r) for r in session.scalars(stmt).all()]

    def close(self):
        self.engine.dispose()


def register_case(registry, entry):
    """Register an entry and return the registry."""
    registry.register(entry)
    return registry


def followup_due(registry, today):
    return registry.followup_due(today)
