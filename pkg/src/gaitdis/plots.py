"""Static SVG charts with byte-stable output (fixed ids, no timestamps)."""
from __future__ import annotations

from pathlib import Path
from typing import Dict, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .mocap import AXES  # noqa: E402

_STYLE = {"svg.hashsalt": "gaitdis", "svg.fonttype": "none", "font.size": 8}


def _save(fig, path) -> Path:
    path = Path(path)
    with matplotlib.rc_context(_STYLE):
        fig.savefig(path, format="svg", metadata={"Date": None, "Creator": "gaitdis"})
    plt.close(fig)
    return path


def attribution_bars(report, path) -> Path:
    """Per-class joint contribution bars (all samples, plus correct/incorrect outlines)."""
    with matplotlib.rc_context(_STYLE):
        n = len(report.classes)
        fig, axes = plt.subplots(n, 1, figsize=(7, 1.8 * n), sharex=True, squeeze=False)
        x = np.arange(len(report.joints))
        for c, ax in enumerate(axes[:, 0]):
            ax.bar(x - 0.2, report.percentages["correct"][c], 0.4, color="tab:green", label="correct")
            ax.bar(x + 0.2, report.percentages["incorrect"][c], 0.4, color="tab:red", label="incorrect")
            ax.plot(x, report.percentages["all"][c], "k.", label="all")
            ax.set_ylabel(f"{report.classes[c]} %")
        axes[-1, 0].set_xticks(x)
        axes[-1, 0].set_xticklabels(report.joints, rotation=60)
        axes[0, 0].legend(loc="upper right", ncol=3)
        fig.tight_layout()
    return _save(fig, path)


def bodypart_curves(report, path) -> Path:
    """Mean normalized attribution over the cycle for retained body-part axes."""
    with matplotlib.rc_context(_STYLE):
        n = len(report.classes)
        fig, axes = plt.subplots(n, len(report.groups), figsize=(8, 1.8 * n), sharex=True, squeeze=False)
        for c in range(n):
            for g, group in enumerate(report.groups):
                ax = axes[c, g]
                for a, axis in enumerate(AXES):
                    if report.retained[c, g, a]:
                        ax.plot(report.curves["all"][c, g, a], label=axis)
                ax.set_title(f"{report.classes[c]} / {group}")
                ax.legend(loc="upper right")
        for ax in axes[-1]:
            ax.set_xlabel("gait phase (frame)")
        fig.tight_layout()
    return _save(fig, path)


def accuracy_bars(values: Dict[str, float], errors: Dict[str, float], path, title: str,
                  reference: float = None) -> Path:
    """One bar per model with its fold standard deviation."""
    with matplotlib.rc_context(_STYLE):
        names: Sequence[str] = list(values)
        fig, ax = plt.subplots(figsize=(5, 3))
        ax.bar(names, [values[k] for k in names], yerr=[errors[k] for k in names], color="tab:blue")
        if reference is not None:
            ax.axhline(reference, color="k", linestyle="--", label="chance")
            ax.legend()
        ax.set_ylabel("accuracy (%)")
        ax.set_ylim(0, 100)
        ax.set_title(title)
        fig.tight_layout()
    return _save(fig, path)
