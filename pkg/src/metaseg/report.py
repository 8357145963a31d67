"""Render result records into a CSV, per-style markdown tables, and plots."""

from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .errors import ReportError
from .experiment import records_to_csv


def _fold_means(records):
    """(style, method, backbone, shots, sparsity) -> list of per-fold mean IoU."""
    groups = defaultdict(list)
    for r in records:
        groups[(r.style, r.method, r.backbone, r.shots, r.sparsity)].append(r.mean_iou)
    return groups


def _style_table(style, groups) -> str:
    lines = [
        f"# Results: {style} annotations",
        "",
        "| method | backbone | shots | sparsity | mean IoU | folds |",
        "| --- | --- | --- | --- | --- | --- |",
    ]
    for key in sorted(groups):
        st, method, backbone, shots, sparsity = key
        if st != style:
            continue
        vals = np.asarray(groups[key])
        lines.append(
            f"| {method} | {backbone} | {shots} | {sparsity} "
            f"| {vals.mean():.3f} ± {vals.std():.3f} | {len(vals)} |"
        )
    return "\n".join(lines) + "\n"


def _style_plot(style, records, groups, path):
    # x positions follow first appearance so the sparsity sweep keeps its order
    labels = []
    for r in records:
        if r.style == style and r.sparsity not in labels:
            labels.append(r.sparsity)
    series = defaultdict(dict)
    for (st, method, backbone, shots, sparsity), vals in groups.items():
        if st == style:
            series[f"{method}/{backbone} {shots}-shot"][sparsity] = float(np.mean(vals))
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = np.arange(len(labels))
    for name in sorted(series):
        ys = [series[name].get(lab, np.nan) for lab in labels]
        ax.plot(xs, ys, marker="o", label=name)
    ax.set_xticks(xs)
    ax.set_xticklabels(labels, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("mean IoU over folds")
    ax.set_xlabel("sparsity")
    ax.set_title(f"{style} annotations")
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def emit_report(records, out_dir) -> list:
    if not records:
        raise ReportError("no records to report")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    csv_path = out / "results.csv"
    csv_path.write_text(records_to_csv(records))
    written.append(csv_path)
    groups = _fold_means(records)
    for style in sorted({r.style for r in records}):
        table_path = out / f"table_{style}.md"
        table_path.write_text(_style_table(style, groups))
        written.append(table_path)
        plot_path = out / f"plot_{style}.png"
        _style_plot(style, records, groups, plot_path)
        written.append(plot_path)
    return written
