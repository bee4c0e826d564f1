"""Report rendering: static matplotlib figures plus a delimited verification
summary, written side by side into an output directory.

Step reports draw the position track (raw devices faint, fused consensus
bold, violations marked) and each scalar kind against its policy band.
Journey reports draw the lineage graph and the verification history.
"""

from __future__ import annotations

import csv
import os
from typing import Optional

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from . import rules
from .ingest import KIND_GPS, SCALAR_KINDS, format_rfc3339
from .model import Policy, StateStore, Step, VerificationRecord
from .verify import UnknownSubject, VerificationManager, VerificationRequest

CSV_NAME = "report.csv"

CSV_COLUMNS = [
    "verificationId",
    "verifiedAt",
    "subject",
    "subjectType",
    "outcome",
    "trigger",
    "ruleName",
    "verdict",
    "violationCount",
    "firstDetail",
]

_VERDICT_COLORS = {rules.OKAY: "#2a9d2a", rules.WARNING: "#e0a500", rules.ALERT: "#cc2f2f"}


def _history_rows(records: list[VerificationRecord]) -> list[dict]:
    rows = []
    for record in records:
        base = {
            "verificationId": record.verification_id,
            "verifiedAt": format_rfc3339(record.verified_at) if record.verified_at else "",
            "subject": record.subject,
            "subjectType": record.subject_type,
            "outcome": record.outcome,
            "trigger": record.trigger,
        }
        if not record.rule_results:
            rows.append({**base, "ruleName": "", "verdict": "", "violationCount": 0, "firstDetail": ""})
        for result in record.rule_results:
            rows.append(
                {
                    **base,
                    "ruleName": result.rule_name,
                    "verdict": result.verdict,
                    "violationCount": len(result.violations),
                    "firstDetail": result.violations[0].detail if result.violations else "",
                }
            )
    return rows


def _write_csv(path: str, rows: list[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def _latest_or_fresh(
    store: StateStore, manager: VerificationManager, subject: str, subject_type: str
) -> VerificationRecord:
    latest = store.latest_verification(subject)
    if latest is not None:
        return latest
    request = VerificationRequest(subject=subject, subject_type=subject_type, trigger="manual")
    if subject_type == "journey":
        return manager.verify_journey(request)
    return manager.verify_step(request)


def _plot_step_track(
    manager: VerificationManager,
    step: Step,
    policy: Optional[Policy],
    record: VerificationRecord,
    path: str,
) -> bool:
    pipeline = manager.preprocess_step(step, policy)
    gps = pipeline.for_kind(KIND_GPS)
    if not gps or not any(p.raw for p in gps):
        return False
    fig, ax = plt.subplots(figsize=(8, 6))
    for kind_pipeline in gps:
        for device, samples in sorted(kind_pipeline.raw.items()):
            if not samples:
                continue
            lats = [v[0] for _, v in samples]
            lons = [v[1] for _, v in samples]
            ax.plot(lons, lats, linewidth=0.8, alpha=0.45, label=f"raw {device}")
        if kind_pipeline.fused:
            lats = [v[0] for _, v in kind_pipeline.fused]
            lons = [v[1] for _, v in kind_pipeline.fused]
            label = "fused" + (f" ({kind_pipeline.topic})" if kind_pipeline.topic else "")
            ax.plot(lons, lats, linewidth=2.2, color="#1f4e9c", label=label)
    if policy is not None:
        for spec in policy.rules_named("geofence"):
            ring = rules.normalize_ring(spec.params["polygon"])
            closed = list(ring) + [ring[0]]
            ax.plot(
                [p[1] for p in closed],
                [p[0] for p in closed],
                linestyle="--",
                color="#777777",
                linewidth=1.0,
                label="geofence",
            )
    flagged = [
        result for result in record.rule_results if result.verdict != rules.OKAY
    ]
    if flagged:
        fused_all = [s for p in gps for s in p.fused]
        if fused_all:
            ax.scatter(
                [fused_all[-1][1][1]],
                [fused_all[-1][1][0]],
                marker="x",
                s=60,
                color=_VERDICT_COLORS.get(record.outcome, "#cc2f2f"),
                label=f"outcome: {record.outcome}",
            )
    ax.set_xlabel("longitude")
    ax.set_ylabel("latitude")
    ax.set_title(f"{step.phase} step {step.step_id[:8]} track")
    ax.legend(loc="best", fontsize=8)
    ax.set_aspect("equal", adjustable="datalim")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return True


def _plot_step_scalars(
    manager: VerificationManager,
    step: Step,
    policy: Optional[Policy],
    path_template: str,
) -> list[str]:
    pipeline = manager.preprocess_step(step, policy)
    written = []
    for kind in SCALAR_KINDS:
        kind_pipelines = pipeline.for_kind(kind)
        if not kind_pipelines or not any(p.raw for p in kind_pipelines):
            continue
        fig, ax = plt.subplots(figsize=(8, 4))
        for kind_pipeline in kind_pipelines:
            for device, samples in sorted(kind_pipeline.raw.items()):
                ax.plot(
                    [t for t, _ in samples],
                    [v[0] for _, v in samples],
                    linewidth=0.8,
                    alpha=0.45,
                    label=f"raw {device}",
                )
            if kind_pipeline.fused:
                label = "fused" + (f" ({kind_pipeline.topic})" if kind_pipeline.topic else "")
                ax.plot(
                    [t for t, _ in kind_pipeline.fused],
                    [v[0] for _, v in kind_pipeline.fused],
                    linewidth=2.0,
                    color="#1f4e9c",
                    label=label,
                )
        if policy is not None:
            for spec in policy.rules_named("threshold"):
                if spec.params.get("kind", "temperature") != kind:
                    continue
                if spec.params.get("tMax") is not None:
                    ax.axhline(spec.params["tMax"], linestyle="--", color="#cc2f2f", linewidth=1.0)
                if spec.params.get("tMin") is not None:
                    ax.axhline(spec.params["tMin"], linestyle="--", color="#2f66cc", linewidth=1.0)
        ax.set_xlabel("time")
        ax.set_ylabel(kind)
        ax.set_title(f"{step.phase} step {step.step_id[:8]} {kind}")
        ax.legend(loc="best", fontsize=8)
        fig.autofmt_xdate()
        fig.tight_layout()
        target = path_template.format(kind=kind)
        fig.savefig(target, dpi=120)
        plt.close(fig)
        written.append(target)
    return written


def _plot_lineage(store: StateStore, journey_id: str, path: str) -> bool:
    try:
        up = store.lineage(journey_id, "up")
        down = store.lineage(journey_id, "down")
    except Exception:
        return False
    nodes = {**up["nodes"], **down["nodes"]}
    edges = [tuple(e) for e in up["edges"]] + [tuple(reversed(e)) for e in down["edges"]]
    if not nodes:
        return False
    # Depth layout: parents above, children below the root.
    depth: dict[str, int] = {journey_id: 0}
    changed = True
    while changed:
        changed = False
        for parent, child in edges:
            if parent in depth and child not in depth:
                depth[child] = depth[parent] + 1
                changed = True
            if child in depth and parent not in depth:
                depth[parent] = depth[child] - 1
                changed = True
    levels: dict[int, list[str]] = {}
    for node in nodes:
        levels.setdefault(depth.get(node, 0), []).append(node)
    positions: dict[str, tuple[float, float]] = {}
    for level, members in sorted(levels.items()):
        for i, node in enumerate(sorted(members)):
            positions[node] = (i - (len(members) - 1) / 2.0, -level)
    fig, ax = plt.subplots(figsize=(8, 5))
    for parent, child in edges:
        if parent in positions and child in positions:
            x0, y0 = positions[parent]
            x1, y1 = positions[child]
            ax.annotate(
                "",
                xy=(x1, y1),
                xytext=(x0, y0),
                arrowprops={"arrowstyle": "->", "color": "#888888", "linewidth": 1.0},
            )
    for node, (x, y) in positions.items():
        color = "#1f4e9c" if node == journey_id else "#555555"
        ax.scatter([x], [y], s=220, color="white", edgecolors=color, zorder=3)
        ax.annotate(
            node if len(node) <= 18 else node[:15] + "...",
            (x, y),
            textcoords="offset points",
            xytext=(0, 14),
            ha="center",
            fontsize=8,
            color=color,
        )
    ax.set_title(f"lineage of {journey_id}")
    ax.axis("off")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return True


def _plot_history(records: list[VerificationRecord], subject: str, path: str) -> bool:
    if not records:
        return False
    fig, ax = plt.subplots(figsize=(8, 3))
    stamps = [r.verified_at for r in records]
    levels = [rules.VERDICT_ORDER[r.outcome] for r in records]
    colors = [_VERDICT_COLORS[r.outcome] for r in records]
    ax.scatter(stamps, levels, c=colors, s=60, zorder=3)
    ax.step(stamps, levels, where="post", color="#aaaaaa", linewidth=1.0)
    ax.set_yticks([0, 1, 2])
    ax.set_yticklabels([rules.OKAY, rules.WARNING, rules.ALERT])
    ax.set_ylim(-0.5, 2.5)
    ax.set_title(f"verification history of {subject}")
    fig.autofmt_xdate()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return True


def build_report(
    store: StateStore,
    manager: VerificationManager,
    subject: str,
    out_dir: str,
) -> dict:
    """Render a subject's report: figures plus report.csv in out_dir.

    Returns a manifest {"csv": path, "figures": [paths], "outcome": latest}.
    """
    os.makedirs(out_dir, exist_ok=True)
    figures: list[str] = []

    step = store.find_step(subject)
    if step is not None:
        journey = store.get_journey(step.journey_id)
        policy = store.policy_for(journey.product_type if journey else None, step.phase)
        record = _latest_or_fresh(store, manager, subject, "step")
        track_path = os.path.join(out_dir, "track.png")
        if _plot_step_track(manager, step, policy, record, track_path):
            figures.append(track_path)
        figures.extend(
            _plot_step_scalars(
                manager, step, policy, os.path.join(out_dir, "series_{kind}.png")
            )
        )
        records = store.verifications_for(subject)
    elif store.get_journey(subject) is not None:
        _latest_or_fresh(store, manager, subject, "journey")
        lineage_path = os.path.join(out_dir, "lineage.png")
        if _plot_lineage(store, subject, lineage_path):
            figures.append(lineage_path)
        records = store.verifications_for(subject)
        history_path = os.path.join(out_dir, "history.png")
        if _plot_history(records, subject, history_path):
            figures.append(history_path)
    else:
        raise UnknownSubject(subject)

    csv_path = os.path.join(out_dir, CSV_NAME)
    _write_csv(csv_path, _history_rows(records))
    outcome = records[-1].outcome if records else rules.OKAY
    return {"csv": csv_path, "figures": figures, "outcome": outcome}
