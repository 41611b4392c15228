"""Report figures: loss curves and a contact timeline (PNG, Agg backend)."""
from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from matplotlib.colors import ListedColormap  # noqa: E402

from .evaluation import event_grid  # noqa: E402
from .optimizer import trace_losses  # noqa: E402

_TOTALS = ("L_anc", "L_retarget")
# neither / source only / target only / both
_TIMELINE_COLORS = ListedColormap(["#f4f4f4", "#d95f02", "#7570b3", "#1b9e77"])


def plot_loss_curves(result, path, dpi=120):
    """Every loss term per step on a log axis; the two weighted totals on
    their own panel. ``result`` is a RetargetResult or a trace list."""
    cols, rows = trace_losses(result)
    data = np.asarray(rows, dtype=np.float64).reshape(-1, len(cols))
    steps = np.arange(1, len(data) + 1)
    fig, (ax_t, ax_s) = plt.subplots(1, 2, figsize=(11, 4), constrained_layout=True)
    for name in cols:
        y = data[:, cols.index(name)]
        ax = ax_s if name in _TOTALS else ax_t
        if np.any(y > 0):
            ax.plot(steps, np.where(y > 0, y, np.nan), label=name, lw=1.2)
    for ax, title in ((ax_t, "unweighted terms"), (ax_s, "weighted totals")):
        ax.set_yscale("log")
        ax.set_xlabel("step")
        ax.set_title(title)
        ax.grid(alpha=0.3, which="both")
        if ax.lines:
            ax.legend(fontsize=7, ncol=2)
    fig.savefig(path, dpi=dpi)
    plt.close(fig)
    return path


def contact_timeline(source_events, target_events, pairs=None):
    """``(pairs, codes)`` with ``codes[p, t]`` = source + 2 * target presence.
    Without ``pairs``, every pair in contact in either motion is kept."""
    _, sp, sg = event_grid(source_events)
    _, tp, tg = event_grid(target_events)
    if sp != tp or sg.shape != tg.shape:
        raise ValueError("source and target events cover different frames or pairs")
    codes = (sg.astype(int) + 2 * tg.astype(int)).T
    if pairs is None:
        keep = np.flatnonzero(codes.any(1))
    else:
        keep = [sp.index(tuple(sorted(p))) for p in pairs]
    return [sp[k] for k in keep], codes[keep]


def plot_contact_timeline(source_events, target_events, path, pairs=None, dpi=120):
    names, codes = contact_timeline(source_events, target_events, pairs)
    n_frames = codes.shape[1] if codes.size else len({e.frame for e in source_events})
    fig, ax = plt.subplots(figsize=(max(6, 0.12 * n_frames + 3), 1 + 0.35 * max(len(names), 1)),
                           constrained_layout=True)
    if len(names):
        ax.imshow(codes, aspect="auto", interpolation="nearest", cmap=_TIMELINE_COLORS, vmin=0, vmax=3)
        ax.set_yticks(range(len(names)), [f"{a} / {b}" for a, b in names], fontsize=8)
    else:
        ax.text(0.5, 0.5, "no contacts", ha="center", va="center", transform=ax.transAxes)
        ax.set_yticks([])
    ax.set_xlabel("frame")
    handles = [plt.Rectangle((0, 0), 1, 1, color=_TIMELINE_COLORS(i)) for i in (1, 2, 3)]
    ax.legend(handles, ["source only", "target only", "both"], fontsize=7, loc="upper left",
              bbox_to_anchor=(1.0, 1.0))
    fig.savefig(path, dpi=dpi)
    plt.close(fig)
    return path

