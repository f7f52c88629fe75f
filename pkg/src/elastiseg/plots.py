"""SVG figure rendering for search and training reports.

Output is deterministic: a fixed svg.hashsalt and a suppressed Date field
make reruns byte-identical, and files go through temp-and-rename like
every other artifact.
"""

from __future__ import annotations

import os
import tempfile
from typing import Optional, Sequence

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

_HASHSALT = "elastiseg"
_ROLE_COLORS = {"max": "#2c6fbb", "min": "#c23b22", "random": "#6a9a58"}


def _save(fig, path: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=".svg")
    os.close(fd)
    try:
        fig.savefig(tmp, format="svg", metadata={"Date": None})
        os.replace(tmp, path)
    finally:
        plt.close(fig)
        if os.path.exists(tmp):
            os.unlink(tmp)


def pareto_scatter(records: Sequence, frontier: Sequence, path: str,
                   title: Optional[str] = None) -> None:
    """All evaluated subnets as a scatter with the frontier drawn on top."""
    plt.rcParams["svg.hashsalt"] = _HASHSALT
    fig, ax = plt.subplots(figsize=(6.4, 4.2), dpi=100)
    ax.scatter([r.params / 1e3 for r in records], [r.miou for r in records],
               s=18, color="#9aa3ad", alpha=0.75, linewidths=0, label="evaluated")
    if frontier:
        ax.plot([r.params / 1e3 for r in frontier], [r.miou for r in frontier],
                marker="o", ms=5, lw=1.6, color="#c23b22", label="pareto frontier")
    ax.set_xlabel("active parameters (thousands)")
    ax.set_ylabel("mIoU")
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3, linewidth=0.5)
    ax.legend(loc="lower right", fontsize=8)
    fig.tight_layout()
    _save(fig, path)


def training_curves(train_rows: Sequence[dict], eval_rows: Sequence[dict],
                    path: str) -> None:
    """Loss per role over steps, next to eval mIoU per role."""
    plt.rcParams["svg.hashsalt"] = _HASHSALT
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10.0, 4.0), dpi=100)
    roles = []
    for row in train_rows:
        if row["role"] not in roles:
            roles.append(row["role"])
    for role in roles:
        steps = [r["step"] for r in train_rows if r["role"] == role]
        losses = [r["loss"] for r in train_rows if r["role"] == role]
        ax1.plot(steps, losses, lw=0.9, color=_ROLE_COLORS.get(role, "#555555"),
                 label=role)
    ax1.set_xlabel("step")
    ax1.set_ylabel("dice loss")
    ax1.grid(alpha=0.3, linewidth=0.5)
    if roles:
        ax1.legend(fontsize=8)
    eval_roles = []
    for row in eval_rows:
        if row["role"] not in eval_roles:
            eval_roles.append(row["role"])
    for role in eval_roles:
        steps = [r["step"] for r in eval_rows if r["role"] == role]
        mious = [r["miou"] for r in eval_rows if r["role"] == role]
        ax2.plot(steps, mious, marker="o", ms=3, lw=1.2,
                 color=_ROLE_COLORS.get(role, "#555555"), label=role)
    ax2.set_xlabel("step")
    ax2.set_ylabel("mIoU")
    ax2.set_ylim(0.0, 1.0)
    ax2.grid(alpha=0.3, linewidth=0.5)
    if eval_roles:
        ax2.legend(fontsize=8)
    fig.tight_layout()
    _save(fig, path)
