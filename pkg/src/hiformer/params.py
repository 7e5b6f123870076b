"""Parameter counting and the audit against the published totals.

Counts cover learnable tensors only; batch-norm running statistics are
buffers and excluded. The audit rebuilds each named model at its
configured resolution and compares against the published totals within
a relative tolerance. The tolerance absorbs what the reference leaves
unstated: backbone truncation depth, 1x1 skip projections, bias tables
and decoder widths.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .model import HiFormer
from .config import build_config

# Published totals (millions of parameters) for the three named models
# at 224x224.
REFERENCE_TOTALS = {
    "hiformer-s": 23_250_000,
    "hiformer-b": 25_510_000,
    "hiformer-l": 29_520_000,
}

AUDIT_TOLERANCE = 0.15


@dataclass
class ParamReport:
    total: int
    per_module: list  # (module name, count) in registration order

    def breakdown(self):
        return dict(self.per_module)


@dataclass
class AuditRow:
    name: str
    measured: int
    reference: int
    rel_dev: float
    within: bool
    largest_module: str
    report: ParamReport = field(repr=False)


def count_parameters(model):
    """Group counts by top-level child; total is their sum."""
    groups = {}
    for name, p in model.named_parameters():
        head = name.split(".", 1)[0]
        groups[head] = groups.get(head, 0) + p.data.size
    per_module = list(groups.items())
    return ParamReport(total=sum(groups.values()), per_module=per_module)


def count_config(name, **overrides):
    """Count without initializing: construction alone fixes every shape."""
    cfg = build_config(name, **overrides)
    return count_parameters(HiFormer(cfg))


def audit(names=None, tolerance=AUDIT_TOLERANCE):
    """Compare every named model against its published total.

    Each row carries the module with the largest parameter count; a
    failing row's diagnostic names it as the dominant contributor since
    the reference publishes no per-module split.
    """
    rows = []
    for name in names or sorted(REFERENCE_TOTALS):
        report = count_config(name)
        ref = REFERENCE_TOTALS[name]
        dev = (report.total - ref) / ref
        largest = max(report.per_module, key=lambda kv: kv[1])[0]
        rows.append(AuditRow(
            name=name,
            measured=report.total,
            reference=ref,
            rel_dev=dev,
            within=abs(dev) <= tolerance,
            largest_module=largest,
            report=report,
        ))
    return rows


def format_param_report(name, report):
    lines = [f"model: {name}"]
    for mod, count in report.per_module:
        lines.append(f"  {mod:<10s} {count:>12,d}")
    lines.append(f"  {'total':<10s} {report.total:>12,d}")
    return "\n".join(lines)


def format_audit(rows):
    lines = []
    for r in rows:
        status = "ok" if r.within else "FAIL"
        lines.append(
            f"{r.name:<12s} measured {r.measured:>12,d}  "
            f"reference {r.reference:>12,d}  dev {r.rel_dev:+.2%}  {status}"
        )
        for mod, count in r.report.per_module:
            lines.append(f"    {mod:<10s} {count:>12,d}")
        if not r.within:
            lines.append(
                f"    divergence beyond tolerance; largest module: "
                f"{r.largest_module} "
                f"({dict(r.report.per_module)[r.largest_module]:,d} params)"
            )
    return "\n".join(lines)
