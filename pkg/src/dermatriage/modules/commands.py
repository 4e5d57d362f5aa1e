"""
commands.py

Batch commands behind the command-line interface.

Contains the following functions:
    cmd_saliency() - Saliency map per case plus saliency_index.csv.
    cmd_evaluate() - IoU per case against expert annotations plus the grouped IoU table.
    cmd_triage() - Zone routing, zone distribution, session summary and registry updates.
    cmd_metrics() - Confusion matrix, accuracy metrics with exact CIs, optional McNemar test.
    read_paired() - Per-case correctness flags from a paired-assessment CSV.
    cmd_fixtures() - Writes the bundled fixtures.

Each command returns a CommandResult; per-case failures are collected into
errors.csv and never stop the batch. Cases may run on a thread pool, but every
output is assembled in manifest order (or sorted group order), so the files do
not depend on the number of workers.
"""

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import pandas as pd

from dermatriage.logger import logger
from dermatriage.modules.relevance import OVERALL, aggregate_iou, evaluate_case
from dermatriage.modules.saliency import (
    MissingInput,
    SaliencyMethod,
    read_saliency_map,
    saliency_pipeline,
    write_pgm,
    write_saliency_map,
)
from dermatriage.modules.stats import (
    DegenerateDenominator,
    NoDiscordantPairs,
    clopper_pearson,
    confusion,
    mcnemar_chi2,
    mcnemar_exact,
    metric_counts,
    paired_from_assessments,
    ppv_at_prevalence,
)
from dermatriage.modules.tensor_io import ParseError, load_annotations, read_manifest_cases
from dermatriage.modules.triage import (
    CascadeResult,
    ReferralRegistry,
    RegistryEntry,
    Zone,
    decide,
    session_summary,
    zone_distribution,
)
from dermatriage.utils.fixtures import INDEX_COLUMNS, build_all
from dermatriage.utils.rendering import (
    empty_frame,
    format_iou,
    format_percent,
    fraction_percent,
    markdown_table,
    percent_half_up,
    real_percent,
    write_csv,
    write_text,
)

ERROR_COLUMNS = ["command", "case_id", "error", "message"]
PAIRED_COLUMNS = ("case_id", "correct_without", "correct_with")
PAIRED_TRUE = {"1", "true"}
PAIRED_FALSE = {"0", "false"}
RELEVANCE_COLUMNS = ["case_id", "architecture", "class", "iou", "band", "model_area", "expert_area",
                     "intersection_area"]
SUMMARY_COLUMNS = ["architecture", "class", "n", "mean", "sd", "macro_mean"]
ROUTING_COLUMNS = ["case_id", "probability", "zone", "stage2_class", "urgency", "action", "audit_flag"]
FOLLOWUP_COLUMNS = ["case_id", "zone", "urgency", "decision_date", "control_date", "recurrence",
                    "biopsy_recommended"]
METRICS_COLUMNS = ["metric", "numerator", "denominator", "value_pct", "ci_lower_pct", "ci_upper_pct"]
MCNEMAR_COLUMNS = ["n", "b", "c", "n_concordant", "correct_without_pct", "correct_with_pct",
                   "p_exact", "chi2_statistic", "p_chi2"]

# Report order for the IoU table; anything else follows alphabetically
ARCHITECTURE_ORDER = ("ViT-B/16", "Swin-T", "ConvNeXt-B", "EfficientNetV2")
CLASS_ORDER = ("MEL", "BCC", "DN", "NV")
MALIGNANT_SUBGROUPS = ("MEL", "BCC")
DETECTED_CLASSES = ("MEL", "BCC", "SCC", "DN")
UNLABELLED = "unlabelled"


class MissingReferenceLabels(Exception):
    """Raised when accuracy metrics are requested for cases without a reference label."""
    pass


@dataclass
class CommandResult:
    command: str
    outputs: dict = field(default_factory=dict)
    errors: list = field(default_factory=list)

    @property
    def exit_code(self):
        """0 when no case failed, 1 otherwise."""
        return 1 if self.errors else 0


# --- Batch plumbing ---

def _error_row(command, case_id, exc):
    logger.error(f"{command}: case '{case_id}' failed with {type(exc).__name__}: {exc}")
    return {"command": command, "case_id": case_id, "error": type(exc).__name__, "message": str(exc)}


def _load_cases(config, result, case_ids=None):
    """Manifest cases in order; rejected entries become error rows."""
    cases, violations = read_manifest_cases(config.manifest)
    result.errors.extend(_error_row(result.command, v.case_id, v) for v in violations)
    if case_ids:
        wanted = set(case_ids)
        missing = wanted - {case.case_id for case in cases}
        if missing:
            logger.warning(f"Case filter names unknown cases: {', '.join(sorted(missing))}")
        cases = [case for case in cases if case.case_id in wanted]
    return cases


def _run_cases(func, cases, config, result):
    """
    Apply func to every case, isolating failures.

    Returns:
    list of (case, value) for the cases that succeeded, in manifest order.
    """
    def attempt(case):
        try:
            return case, func(case), None
        except Exception as e:
            return case, None, e

    if config.jobs == 1:
        outcomes = [attempt(case) for case in cases]
    else:
        # map() yields in submission order whatever the completion order
        with ThreadPoolExecutor(max_workers=config.jobs) as pool:
            outcomes = list(pool.map(attempt, cases))

    succeeded = []
    for case, value, exc in outcomes:
        if exc is None:
            succeeded.append((case, value))
        else:
            result.errors.append(_error_row(result.command, case.case_id, exc))
    logger.info(f"{result.command}: {len(succeeded)} of {len(cases)} cases processed")
    return succeeded


def _write_errors(config, result):
    path = Path(config.out_dir) / "errors.csv"
    if result.errors:
        write_csv(pd.DataFrame(result.errors, columns=ERROR_COLUMNS), path)
        result.outputs["errors"] = path
        logger.warning(f"{result.command}: {len(result.errors)} case errors written to {path}")
    elif path.exists():
        path.unlink()


def _frame(rows, columns):
    return pd.DataFrame(rows, columns=columns) if rows else empty_frame(columns)


def _map_filename(case_id):
    return case_id.replace("/", "_").replace("\\", "_") + ".tnsr"


# --- Saliency ---

def cmd_saliency(config, case_ids=None):
    """Compute and store the normalised saliency map of every case."""
    result = CommandResult("saliency")
    out_dir = Path(config.out_dir)
    maps_dir = out_dir / "saliency"
    maps_dir.mkdir(parents=True, exist_ok=True)
    cases = _load_cases(config, result, case_ids)

    def run(case):
        saliency_map = saliency_pipeline(case, config.residual_weight, config.rollout_target)
        map_path = maps_dir / _map_filename(case.case_id)
        write_saliency_map(saliency_map, map_path)
        if config.write_pgm:
            write_pgm(saliency_map, map_path.with_suffix(".pgm"))
        return [case.case_id, case.architecture, str(saliency_map.method), saliency_map.width,
                saliency_map.height, map_path.relative_to(out_dir).as_posix()]

    rows = [row for _, row in _run_cases(run, cases, config, result)]
    index_path = out_dir / "saliency_index.csv"
    write_csv(_frame(rows, INDEX_COLUMNS), index_path)
    result.outputs["saliency_index"] = index_path
    _write_errors(config, result)
    return result


# --- Relevance ---

def _read_map_index(maps_dir):
    """case_id -> (method, absolute map path) from a saliency output folder."""
    index = pd.read_csv(Path(maps_dir) / "saliency_index.csv", dtype={"case_id": str})
    return {
        row.case_id: (SaliencyMethod(row.method), Path(maps_dir) / row.map_path)
        for row in index.itertuples(index=False)
    }


def _ordered(values, preferred):
    present = list(dict.fromkeys(values))
    head = [v for v in preferred if v in present]
    return head + sorted(v for v in present if v not in preferred)


def iou_table(summaries):
    """Markdown IoU table: one row per architecture, mean ± SD per class, pooled and class-mean columns."""
    by_key = {(s.architecture, s.nosology_class): s for s in summaries}
    architectures = _ordered((s.architecture for s in summaries), ARCHITECTURE_ORDER)
    classes = _ordered((s.nosology_class for s in summaries if s.nosology_class != OVERALL), CLASS_ORDER)

    def cell(summary):
        if summary is None:
            return ""
        if summary.sd is None:
            return format_iou(summary.mean)
        return f"{format_iou(summary.mean)} ± {format_iou(summary.sd)}"

    rows = []
    for architecture in architectures:
        overall = by_key[(architecture, OVERALL)]
        rows.append(
            [architecture]
            + [cell(by_key.get((architecture, c))) for c in classes]
            + [cell(overall), format_iou(overall.macro_mean)]
        )
    return markdown_table(["Architecture", *classes, "Mean", "Mean of classes"], rows)


def cmd_evaluate(config, case_ids=None):
    """
    Score each case's saliency map against its expert annotations.

    Maps come from a cmd_saliency output folder when config.maps_dir is set,
    otherwise they are recomputed from the tensors.
    """
    result = CommandResult("evaluate")
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cases = _load_cases(config, result, case_ids)
    map_index = _read_map_index(config.maps_dir) if config.maps_dir else None

    def run(case):
        if case.annotation_path is None:
            raise MissingInput(f"case '{case.case_id}' has no annotation file")
        if map_index is None:
            saliency_map = saliency_pipeline(case, config.residual_weight, config.rollout_target)
        elif case.case_id in map_index:
            method, map_path = map_index[case.case_id]
            saliency_map = read_saliency_map(map_path, method, case.architecture)
        else:
            raise MissingInput(f"case '{case.case_id}' has no stored map in {config.maps_dir}")
        return evaluate_case(saliency_map, load_annotations(case.annotation_path), config.tau)

    scored = _run_cases(run, cases, config, result)

    rows, grouped = [], []
    for case, relevance in scored:
        nosology = case.nosology_reference or UNLABELLED
        rows.append([case.case_id, case.architecture, nosology, format_iou(relevance.iou), str(relevance.band),
                     relevance.model_area, relevance.expert_area, relevance.intersection_area])
        if relevance.iou is not None:
            grouped.append((case.architecture, nosology, relevance.iou))

    summaries = aggregate_iou(grouped)
    summary_rows = [
        [s.architecture, s.nosology_class, s.n, format_iou(s.mean), format_iou(s.sd), format_iou(s.macro_mean)]
        for s in summaries
    ]

    outputs = {
        "relevance": out_dir / "relevance.csv",
        "iou_summary": out_dir / "iou_summary.csv",
        "iou_table": out_dir / "iou_table.md",
    }
    write_csv(_frame(rows, RELEVANCE_COLUMNS), outputs["relevance"])
    write_csv(_frame(summary_rows, SUMMARY_COLUMNS), outputs["iou_summary"])
    write_text(iou_table(summaries), outputs["iou_table"])
    result.outputs.update(outputs)
    _write_errors(config, result)
    return result


# --- Triage ---

def cmd_triage(config, case_ids=None):
    """Route every case, summarise zones and sessions, and register Yellow/Red cases."""
    result = CommandResult("triage")
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cases = _load_cases(config, result, case_ids)

    def run(case):
        cascade = CascadeResult(case.probability, case.stage2_class)
        return cascade, decide(cascade, config.green_threshold, config.red_threshold)

    decided = _run_cases(run, cases, config, result)

    routing_rows, session_rows = [], []
    for case, (cascade, decision) in decided:
        routing_rows.append([
            case.case_id, case.probability, str(decision.zone), case.stage2_class or "",
            str(decision.urgency) if decision.urgency else "", decision.action.describe(),
            decision.audit_flag or "",
        ])
        session_rows.append({
            "session": case.session,
            "zone": decision.zone,
            "reference_label": case.reference_label,
            "nosology_reference": case.nosology_reference,
        })

    distribution = zone_distribution([cascade for _, (cascade, _) in decided],
                                     config.green_threshold, config.red_threshold)
    zone_rows = [
        [str(zone), count, format_percent(distribution.percentages[zone]) if distribution.percentages else ""]
        for zone, count in distribution.counts.items()
    ]

    # Registry writes stay on this thread, in manifest order
    registry = ReferralRegistry(config.registry_log)
    try:
        for case, (_, decision) in decided:
            if decision.zone is Zone.GREEN:
                continue
            registry.register(RegistryEntry(
                case_id=case.case_id,
                zone=decision.zone,
                decision_date=config.decision_date,
                urgency=decision.urgency,
            ))
        due = registry.followup_due(config.review_date)
    finally:
        registry.close()
    followup_rows = [
        [e.case_id, str(e.zone), str(e.urgency) if e.urgency else "", e.decision_date.isoformat(),
         e.control_date.isoformat(), e.recurrence, e.biopsy_recommended]
        for e in due
    ]

    outputs = {
        "routing": out_dir / "routing.csv",
        "zones": out_dir / "zones.csv",
        "zones_table": out_dir / "zones.md",
        "sessions": out_dir / "sessions.csv",
        "followup_due": out_dir / "followup_due.csv",
    }
    write_csv(_frame(routing_rows, ROUTING_COLUMNS), outputs["routing"])
    write_csv(_frame(zone_rows, ["zone", "count", "percent"]), outputs["zones"])
    write_text(markdown_table(["Zone", "Patients", "%"], zone_rows), outputs["zones_table"])
    write_csv(session_summary(session_rows), outputs["sessions"])
    write_csv(_frame(followup_rows, FOLLOWUP_COLUMNS), outputs["followup_due"])
    result.outputs.update(outputs)
    result.outputs["registry"] = config.registry_log
    _write_errors(config, result)
    return result


# --- Metrics ---

def _ci_row(metric, numerator, denominator, confidence):
    """One metrics.csv row with its Clopper-Pearson interval; blank values for an empty denominator."""
    if denominator == 0:
        return [metric, numerator, denominator, "", "", ""]
    ci = clopper_pearson(numerator, denominator, confidence)
    return [
        metric, numerator, denominator,
        format_percent(percent_half_up(numerator, denominator)),
        format_percent(real_percent(ci.lower)),
        format_percent(real_percent(ci.upper)),
    ]


def confusion_table(cm):
    """Confusion matrix in system-by-expert layout with totals."""
    return pd.DataFrame(
        [
            ["malignant", cm.tp, cm.fp, cm.tp + cm.fp],
            ["benign", cm.fn, cm.tn, cm.fn + cm.tn],
            ["total", cm.tp + cm.fn, cm.fp + cm.tn, cm.total],
        ],
        columns=["system", "expert_malignant", "expert_benign", "total"],
    )


def _paired_flag(value, column, row_no):
    token = value.strip().lower()
    if token in PAIRED_TRUE:
        return True
    if token in PAIRED_FALSE:
        return False
    raise ParseError(f"paired file row {row_no}: {column} must be 0/1 or true/false, got '{value}'")


def read_paired(path):
    """
    (correct_without, correct_with) flags per row of a paired-assessment CSV.

    Raises:
    ParseError: a required column is missing or a flag is not 0/1/true/false.
    """
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    missing = [column for column in PAIRED_COLUMNS if column not in frame.columns]
    if missing:
        raise ParseError(f"paired file {path} lacks column(s): {', '.join(missing)}")
    return [
        (_paired_flag(row.correct_without, "correct_without", row_no),
         _paired_flag(row.correct_with, "correct_with", row_no))
        for row_no, row in enumerate(frame.itertuples(index=False), start=2)
    ]


def _paired_block(config, out_dir):
    """McNemar outputs from the paired-assessment file; returns (path, markdown)."""
    flags = read_paired(config.paired_path)
    without = [w for w, _ in flags]
    with_system = [s for _, s in flags]
    paired = paired_from_assessments(flags)
    n = len(flags)

    try:
        p_exact = mcnemar_exact(paired)
        statistic, p_chi2 = mcnemar_chi2(paired)
    except NoDiscordantPairs as e:
        logger.warning(f"McNemar test skipped: {e}")
        p_exact = statistic = p_chi2 = None

    row = [n, paired.b, paired.c, paired.n_concordant,
           format_percent(percent_half_up(sum(without), n)),
           format_percent(percent_half_up(sum(with_system), n)),
           "" if p_exact is None else f"{p_exact:.6g}",
           "" if statistic is None else f"{statistic:.6g}",
           "" if p_chi2 is None else f"{p_chi2:.6g}"]
    path = out_dir / "mcnemar.csv"
    write_csv(pd.DataFrame([row], columns=MCNEMAR_COLUMNS), path)
    return path, "\n## Paired assessment\n\n" + markdown_table(MCNEMAR_COLUMNS, [row])


def cmd_metrics(config, case_ids=None):
    """
    Diagnostic accuracy of the Stage-1 decision (malignant iff P >= red threshold).

    Raises:
    MissingReferenceLabels: a case has no reference label.
    """
    result = CommandResult("metrics")
    out_dir = Path(config.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cases = _load_cases(config, result, case_ids)

    unlabelled = [case.case_id for case in cases if case.reference_label is None]
    if unlabelled:
        raise MissingReferenceLabels(f"{len(unlabelled)} cases lack a reference label: {', '.join(unlabelled[:5])}")

    def predicted(case):
        return "malignant" if case.probability >= config.red_threshold else "benign"

    cm = confusion((predicted(case), case.reference_label) for case in cases)
    rows = [
        _ci_row(name, num, den, config.confidence)
        for name, (num, den) in metric_counts(cm).items()
    ]
    for nosology in MALIGNANT_SUBGROUPS:
        subgroup = [case for case in cases
                    if case.nosology_reference == nosology and case.reference_label == "malignant"]
        detected = sum(predicted(case) == "malignant" for case in subgroup)
        rows.append(_ci_row(f"sensitivity_{nosology}", detected, len(subgroup), config.confidence))

    rows.append(_ci_row("prevalence", cm.positives, cm.total, config.confidence))
    detected = sum(case.nosology_reference in DETECTED_CLASSES for case in cases)
    rows.append(_ci_row("detection_rate", detected, len(cases), config.confidence))

    counts = metric_counts(cm)
    sens_num, sens_den = counts["sensitivity"]
    spec_num, spec_den = counts["specificity"]
    bayes = None
    if sens_den and spec_den and cm.total:
        try:
            bayes = ppv_at_prevalence(Fraction(sens_num, sens_den), Fraction(spec_num, spec_den),
                                      Fraction(cm.positives, cm.total))
        except DegenerateDenominator as e:
            logger.warning(f"PPV at prevalence not reported: {e}")
    rows.append(["ppv_at_prevalence", "", "", format_percent(fraction_percent(bayes)), "", ""])

    outputs = {
        "confusion": out_dir / "confusion.csv",
        "metrics": out_dir / "metrics.csv",
        "metrics_table": out_dir / "metrics.md",
    }
    table = confusion_table(cm)
    write_csv(table, outputs["confusion"])
    write_csv(pd.DataFrame(rows, columns=METRICS_COLUMNS), outputs["metrics"])

    report = (
        "## Confusion matrix\n\n"
        + markdown_table(list(table.columns), table.astype(str).values.tolist())
        + f"\n## Metrics ({format_percent(fraction_percent(Fraction(str(config.confidence))))} % CI, Clopper-Pearson)\n\n"
        + markdown_table(METRICS_COLUMNS, [[str(cell) for cell in row] for row in rows])
    )
    if config.paired_path:
        outputs["mcnemar"], paired_report = _paired_block(config, out_dir)
        report += paired_report
    write_text(report, outputs["metrics_table"])

    result.outputs.update(outputs)
    _write_errors(config, result)
    return result


# --- Fixtures ---

def cmd_fixtures(out_dir):
    """Write the bundled validation, IoU and tensor fixtures under out_dir."""
    result = CommandResult("fixtures")
    result.outputs.update(build_all(out_dir))
    return result
