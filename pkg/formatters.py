#!/usr/bin/env python3
"""
SCSA Engine - Formatters Module

Formatting logic for the CLI, kept apart from computation and I/O:
- Pure formatting functions that return List[str] (easy to test)
- Output writers for the console and for files

CSV output (bench, ablate) is produced through the csv module so quoting
is always correct; human-readable reports are fixed-width text.
"""

import csv
import io
from typing import Dict, List, Protocol, Sequence

import numpy as np

from config import BENCH_CSV_HEADER
from gradcheck_suite import SuiteReport
from models import FlopBreakdown
from tensor import Tensor
from trainer import TrainingResult

__version__ = "1.0.0"

ABLATION_CSV_HEADER = ("preset", "shape_ok", "gradcheck_max_rel_err", "gradcheck_passed",
                       "flops", "params", "val_acc")


# ============================================================================
# PURE FORMATTING FUNCTIONS
# ============================================================================

def format_csv(header: Sequence[str], rows: Sequence[Sequence[str]]) -> List[str]:
    """
    Render a header and rows as CSV lines.

    Examples:
        >>> format_csv(("a", "b"), [["1", "x,y"]])
        ['a,b', '1,"x,y"']
    """
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue().splitlines()


def format_bench_csv(rows: Sequence) -> List[str]:
    """CSV lines for bench rows (header preset,C,H,W,median_ms,flops)."""
    return format_csv(BENCH_CSV_HEADER, [row.csv_fields() for row in rows])


def format_ablation_csv(rows: Sequence) -> List[str]:
    return format_csv(ABLATION_CSV_HEADER, [row.csv_fields() for row in rows])


def format_suite_report(report: SuiteReport) -> List[str]:
    """
    Fixed-width gradient-check report, one line per check.

    Args:
        report: Suite outcome

    Returns:
        List of lines ending with a PASSED/FAILED summary
    """
    lines = ["=" * 70, "GRADIENT CHECKS", "=" * 70]
    width = max([len(r.name) for r in report.results] + [10])
    for result in report.results:
        status = "ok" if result.passed else "FAIL"
        lines.append(f"{result.name:<{width}}  {result.max_rel_error:10.3e}  tol {result.tol:<8g} {status}")
    if report.missing_ops:
        lines.append(f"{'coverage':<{width}}  missing checks for: {', '.join(report.missing_ops)}")
    lines.append("-" * 70)
    passed = len(report.results) - len(report.failures)
    verdict = "PASSED" if report.passed else "FAILED"
    lines.append(f"{verdict}: {passed}/{len(report.results)} checks within tolerance")
    return lines


def format_flop_breakdown(flops: FlopBreakdown, channels: int, height: int, width: int) -> List[str]:
    lines = [f"FLOP model for C={channels}, H={height}, W={width} (multiply-accumulates):"]
    for key, value in flops.to_dict().items():
        lines.append(f"  {key:<18} {value:>14,}")
    return lines


def format_training_summary(label: str, result: TrainingResult) -> List[str]:
    """Short per-run summary: final loss, accuracy and loss trend."""
    if not result.records:
        return [f"{label}: no epochs recorded"]
    first, last = result.records[0], result.records[-1]
    return [
        f"{label}: {len(result.records)} epochs",
        f"  train loss {first.train_loss:.4f} -> {last.train_loss:.4f} "
        f"(decreased in {result.decreasing_epochs()}/{len(result.records) - 1} epochs)",
        f"  final val accuracy {last.val_acc:.4f}",
    ]


def format_checkpoint_summary(state: Dict[str, Tensor]) -> List[str]:
    """
    One line per tensor: name, shape and summary statistics.

    Examples:
        >>> format_checkpoint_summary({"pcsa.q.weight": Tensor(np.ones(8))})[1]
        'pcsa.q.weight   [8]   mean=1 std=0 min=1 max=1'
    """
    lines = [f"{len(state)} tensors"]
    if not state:
        return lines
    width = max(len(name) for name in state)
    for name, tensor in state.items():
        data = tensor.data
        shape = "[" + ",".join(str(s) for s in tensor.shape) + "]"
        lines.append(
            f"{name:<{width}}   {shape}   mean={np.mean(data):.6g} std={np.std(data):.6g} "
            f"min={np.min(data):.6g} max={np.max(data):.6g}"
        )
    return lines


# ============================================================================
# OUTPUT WRITER PROTOCOLS
# ============================================================================

class OutputWriter(Protocol):
    """Anything with write(content) can receive formatted output."""

    def write(self, content: str) -> None:
        ...


class ConsoleWriter:
    """Prints formatted lines to stdout."""

    def write(self, content: str) -> None:
        print(content)

    def write_lines(self, lines: List[str]) -> None:
        for line in lines:
            print(line)


class FileWriter:
    """
    Writes formatted lines to a file, replacing its contents.

    Attributes:
        file_path: Destination path
    """

    def __init__(self, file_path: str):
        self.file_path = file_path

    def write(self, content: str) -> None:
        with open(self.file_path, "w", encoding="utf-8") as f:
            f.write(content)

    def write_lines(self, lines: List[str]) -> None:
        self.write(self.lines_to_content(lines))

    @staticmethod
    def lines_to_content(lines: List[str]) -> str:
        return "\n".join(lines) + ("\n" if lines else "")
