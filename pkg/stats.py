"""
Progress and report formatting.

Console progress lines for training and fine-tuning, plus the aligned-column
text tables used by the compression, benchmark and evaluation reports.
"""

from typing import Any, Dict, List, Sequence

from utils import format_time


def print_epoch_progress(record, total_epochs: int, seconds: float, label: str = "Epoch") -> None:
    """
    Print progress update for a single epoch.

    Args:
        record: EpochRecord with epoch, loss, accuracy and samples
        total_epochs: Total number of epochs in the run
        seconds: Wall-clock time of the epoch
        label: Prefix for the line ("Epoch" or "Finetune")
    """
    progress_pct = (record.epoch / total_epochs) * 100 if total_epochs else 100.0
    print(f"  [{label} {record.epoch}/{total_epochs}] ({progress_pct:.0f}%) "
          f"loss {record.loss:.6f}  acc {record.accuracy:.4f}  "
          f"({record.samples:,} samples, {format_time(seconds)})")


def format_table(headers: Sequence[str], rows: List[Sequence[Any]]) -> List[str]:
    """
    Lay out rows as aligned columns.

    The first column is left-aligned, the others right-aligned.

    Args:
        headers: Column titles
        rows: Cell values (converted with str)

    Returns:
        Lines including the header and a dashed rule
    """
    cells = [[str(h) for h in headers]] + [[str(c) for c in row] for row in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(headers))]

    def render(row: List[str]) -> str:
        parts = [row[0].ljust(widths[0])] + [c.rjust(w) for c, w in zip(row[1:], widths[1:])]
        return "  ".join(parts).rstrip()

    lines = [render(cells[0]), "-" * (sum(widths) + 2 * (len(widths) - 1))]
    lines.extend(render(row) for row in cells[1:])
    return lines


def format_report(title: str, sections: List[List[str]], width: int = 60) -> str:
    """
    Frame report sections between '=' rules, separated by '-' rules.

    Args:
        title: Report title (upper-cased)
        sections: Lists of already formatted lines
        width: Rule width

    Returns:
        Formatted report string
    """
    lines = ["\n" + "=" * width, title.upper(), "=" * width]
    for i, section in enumerate(sections):
        if i:
            lines.append("-" * width)
        lines.extend(section)
    lines.append("=" * width + "\n")
    return "\n".join(lines)


def format_key_values(items: Dict[str, Any]) -> List[str]:
    """Format 'key: value' lines with the values aligned."""
    if not items:
        return []
    width = max(len(k) for k in items) + 1
    return [f"{(key + ':').ljust(width)} {value}" for key, value in items.items()]


def print_training_summary(log, seconds: float) -> None:
    """
    Print the final line of a training run.

    Args:
        log: TrainingLog
        seconds: Total wall-clock time
    """
    if not log.epochs:
        print("  No epochs run")
        return
    first, last = log.epochs[0], log.epochs[-1]
    print(f"  Loss {first.loss:.6f} -> {last.loss:.6f}, "
          f"accuracy {first.accuracy:.4f} -> {last.accuracy:.4f} "
          f"over {len(log.epochs)} epoch(s) in {format_time(seconds)}")
