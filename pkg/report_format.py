"""
Compact formatters for metrics reports and parameter accounting.

Usage:
    from report_format import comparable_report, compact_report

    summary = compact_report(report)           # what the CLI prints
    assert comparable_report(a) == comparable_report(b)  # reruns agree
"""

from typing import Any, Dict, List, Optional

# Fields that legitimately differ between otherwise identical runs
VOLATILE_FIELDS = ("wall_clock_s",)

# Fields kept in the one-screen summary
COMPACT_FIELDS = ["param_counts", "best_epoch", "test"]


def comparable_report(report: Dict[str, Any]) -> Dict[str, Any]:
    """Copy of ``report`` without the volatile fields."""
    return {k: v for k, v in report.items() if k not in VOLATILE_FIELDS}


def compact_report(report: Dict[str, Any]) -> Dict[str, Any]:
    """Summary with parameter counts, best epoch, test metrics and the final epoch record."""
    result = {k: report[k] for k in COMPACT_FIELDS if k in report}
    variant = report.get("config", {}).get("model", {}).get("variant")
    if variant is not None:
        result = {"variant": variant, **result}
    epochs = report.get("epochs") or []
    if epochs:
        result["final_epoch"] = epochs[-1]
    return result


def _fmt(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def format_epoch(record: Dict[str, Any]) -> str:
    return (f"epoch {record['epoch']}: loss {_fmt(record.get('train_loss'))}, "
            f"train acc {_fmt(record.get('train_acc'))}, val acc {_fmt(record.get('val_acc'))}, "
            f"val auc {_fmt(record.get('val_auc'))}")


def format_param_table(accounting: Dict[str, Any]) -> str:
    """Fixed-width table of total/trainable/frozen counts per top-level module."""
    header = ("module", "total", "trainable", "frozen")
    rows: List[tuple] = [(name, c["total"], c["trainable"], c["frozen"])
                         for name, c in accounting["per_module"].items()]
    rows.append(("TOTAL", accounting["total"], accounting["trainable"], accounting["frozen"]))
    width = max(len(header[0]), max(len(str(r[0])) for r in rows))
    nums = [max(len(header[i]), max(len(f"{r[i]:,}") for r in rows)) for i in (1, 2, 3)]

    def line(cells) -> str:
        first = str(cells[0]).ljust(width)
        rest = [(f"{c:,}" if isinstance(c, int) else str(c)).rjust(n) for c, n in zip(cells[1:], nums)]
        return "  ".join([first] + rest)

    out = [f"variant: {accounting['variant']}", line(header),
           "  ".join(["-" * width] + ["-" * n for n in nums])]
    out += [line(r) for r in rows[:-1]]
    out.append("  ".join(["-" * width] + ["-" * n for n in nums]))
    out.append(line(rows[-1]))
    return "\n".join(out)
