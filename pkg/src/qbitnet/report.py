"""Report rendering: the tab-separated tables stay byte-stable for
diffing; figures are written next to them as PNG files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .schedule import SizeReport


def size_report_table(rep: SizeReport) -> str:
    """Deterministic TSV table (no timestamps) for the size report."""
    lines = ["layer\tquant\tk_w\tparams\tbits\tbytes"]
    for row in rep.layers:
        lines.append(f"{row.name}\t{'yes' if row.quantized else 'no'}\t"
                     f"{row.k_w}\t{row.params}\t{row.bits}\t{row.bytes}")
    lines.append("")
    lines.append(f"quantized_params\t{rep.total_params}")
    lines.append(f"quantized_bits\t{rep.total_bits}")
    lines.append(f"quantized_bytes\t{rep.total_bytes}")
    lines.append(f"average_bitwidth\t{rep.average_bitwidth:.6f}")
    lines.append(f"average_bitwidth_rounded\t{rep.average_bitwidth_rounded:.2f}")
    lines.append(f"baseline_k\t{rep.baseline_k}")
    lines.append(f"baseline_bits\t{rep.baseline_bits}")
    lines.append(f"baseline_bytes\t{rep.baseline_bytes}")
    lines.append(f"savings_vs_baseline\t{rep.savings * 100:.2f}%")
    for warning in rep.warnings:
        lines.append(f"warning\t{warning}")
    return "\n".join(lines) + "\n"


def render_size_report(rep: SizeReport, out_path) -> Path:
    """Per-layer bit cost of the mixed schedule against the homogeneous
    baseline, plus the headline average/savings numbers."""
    quantized = [row for row in rep.layers if row.quantized]
    names = [row.name for row in quantized]
    mixed_bits = [row.bits / 8e6 for row in quantized]
    base_bits = [rep.baseline_k * row.params / 8e6 for row in quantized]
    x = range(len(names))
    fig, ax = plt.subplots(figsize=(max(5.0, 0.9 * len(names) + 2), 3.6))
    ax.bar([i - 0.2 for i in x], base_bits, width=0.4,
           label=f"homogeneous {rep.baseline_k}-bit", color="#bbbbbb")
    ax.bar([i + 0.2 for i in x], mixed_bits, width=0.4,
           label="mixed schedule", color="#2f6fb0")
    ax.set_xticks(list(x))
    ax.set_xticklabels(names, rotation=30, ha="right")
    ax.set_ylabel("weight storage (MB)")
    ax.set_title(f"avg bitwidth {rep.average_bitwidth_rounded:.2f}, "
                 f"savings {rep.savings * 100:.1f}% vs {rep.baseline_k}-bit")
    ax.legend(frameon=False)
    ax.spines["right"].set_visible(False)
    ax.spines["top"].set_visible(False)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def render_training_curves(metrics, out_path, title="") -> Path:
    """Train/validation accuracy and loss curves from the epoch metrics."""
    epochs = [m.epoch for m in metrics]
    fig, (ax_acc, ax_loss) = plt.subplots(1, 2, figsize=(9, 3.4))
    ax_acc.plot(epochs, [m.train_acc * 100 for m in metrics], label="train",
                color="#2f6fb0")
    ax_acc.plot(epochs, [m.val_acc * 100 for m in metrics], label="validation",
                color="#c05020")
    ax_acc.set_xlabel("epoch")
    ax_acc.set_ylabel("accuracy (%)")
    ax_acc.legend(frameon=False)
    ax_loss.plot(epochs, [m.train_loss for m in metrics], color="#2f6fb0")
    ax_loss.set_xlabel("epoch")
    ax_loss.set_ylabel("train loss")
    for ax in (ax_acc, ax_loss):
        ax.spines["right"].set_visible(False)
        ax.spines["top"].set_visible(False)
    if title:
        fig.suptitle(title)
    fig.tight_layout()
    out_path = Path(out_path)
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path
