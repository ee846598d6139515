"""Forgetting curves: per-domain metric trajectories across training stages."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from lifelong_ps.evalkit import forgetting_report  # noqa: E402

_LABELS = {"recall": "detection recall", "ap": "detection AP", "map": "re-ID mAP", "top1": "re-ID top-1"}
# lifelong runs solid, everything else dashed
_STYLES = {"lps": "-", "finetune": "--", "joint": ":"}


def plot_forgetting(histories: Mapping[str, list[dict]], metric: str, path: str | Path, title: str | None = None) -> Path:
    """One line per (run, evaluated domain); x axis is the training stage.

    ``histories`` maps a run label to its stage history. The run's mode picks
    the line style and the evaluated domain picks the color.
    """
    path = Path(path)
    fig, ax = plt.subplots(figsize=(5.5, 3.6))
    colors = plt.rcParams["axes.prop_cycle"].by_key()["color"]
    max_stages = 1
    tick_labels: list[str] = []
    for label, history in histories.items():
        rep = forgetting_report(history)
        stages = [str(s) for s in rep["stages"]]
        if len(stages) > max_stages or not tick_labels:
            max_stages, tick_labels = max(max_stages, len(stages)), stages
        style = _STYLES.get(history[-1]["mode"], "-.")
        for k, (dom, values) in enumerate(rep["trajectories"][metric].items()):
            xs = [i for i, v in enumerate(values) if v is not None]
            ys = [100.0 * values[i] for i in xs]
            ax.plot(xs, ys, style, marker="o", ms=3, color=colors[k % len(colors)], label=f"{label} / domain {dom}")
    ax.set_xlabel("after training on domain")
    ax.set_ylabel(_LABELS.get(metric, metric) + " (%)")
    ax.set_xticks(range(len(tick_labels)), tick_labels)
    ax.set_ylim(0, 100)
    ax.grid(alpha=0.3)
    ax.legend(fontsize=6, ncol=2)
    if title:
        ax.set_title(title)
    fig.tight_layout()
    path.parent.mkdir(parents=True, exist_ok=True)
    # fixed metadata so repeated reports produce identical bytes
    fig.savefig(path, dpi=110, metadata={"Software": None})
    plt.close(fig)
    return path
