"""SVG figures: class-mean GRF curves with a relevance-coloured SD band, and
the total-relevance panel.

Figures are built with the object-oriented matplotlib API (no pyplot state)
and saved with a fixed hash salt and no date stamp so repeated runs write
identical bytes.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib
import numpy as np
from matplotlib.collections import PolyCollection
from matplotlib.colors import LinearSegmentedColormap, Normalize, to_rgba
from matplotlib.cm import ScalarMappable
from matplotlib.figure import Figure

FAVOR_COLOR = "#f2c80f"  # yellow: relevance in favour of the true class
AGAINST_COLOR = "#2166ac"  # blue: relevance against it
NEUTRAL_COLOR = "#e6e6e6"

SIDE_TITLES = {"L": "left", "R": "right", "avg": "both sides"}

_RC = {
    "svg.hashsalt": "gaitlrp",
    "svg.fonttype": "path",
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
}
_SAVE = {"format": "svg", "metadata": {"Date": None, "Creator": "gaitlrp"}}

RELEVANCE_CMAP = LinearSegmentedColormap.from_list(
    "relevance", [AGAINST_COLOR, NEUTRAL_COLOR, FAVOR_COLOR])


def scale_relevance(relevance) -> np.ndarray:
    """Map relevance to [-1, 1] with zero fixed at 0.

    Positive and negative values are scaled separately by their own extreme,
    so the largest positive value lands on +1 and the most negative on -1.
    """
    r = np.asarray(relevance, dtype=np.float64)
    out = np.zeros_like(r)
    pos_max = r.max(initial=0.0)
    neg_min = r.min(initial=0.0)
    if pos_max > 0:
        out = np.where(r > 0, r / pos_max, out)
    if neg_min < 0:
        out = np.where(r < 0, r / -neg_min, out)
    return out


def relevance_colors(relevance) -> np.ndarray:
    """RGBA per point, linearly interpolated neutral->favour or neutral->against."""
    u = scale_relevance(relevance)[..., None]
    neutral = np.array(to_rgba(NEUTRAL_COLOR))
    favor = np.array(to_rgba(FAVOR_COLOR))
    against = np.array(to_rgba(AGAINST_COLOR))
    a = np.abs(u)
    # (1 - a) * start + a * end hits both endpoints exactly
    return np.where(u >= 0, (1 - a) * neutral + a * favor, (1 - a) * neutral + a * against)


def _band_polygons(mean, sd):
    """One quad per sample, spanning half a step either side of it."""
    T = len(mean)
    t = np.arange(T, dtype=np.float64)
    lo, hi = mean - sd, mean + sd
    polys = []
    for i in range(T):
        a, b = max(i - 0.5, 0.0), min(i + 0.5, T - 1.0)
        la, lb = np.interp([a, b], t, lo)
        ha, hb = np.interp([a, b], t, hi)
        polys.append([(a, la), (b, lb), (b, hb), (a, ha)])
    return polys


def _stance_axis(ax, T):
    ticks = np.linspace(0, T - 1, 5)
    ax.set_xticks(ticks)
    ax.set_xticklabels([f"{p:.0f}" for p in np.linspace(0, 100, 5)])
    ax.set_xlim(0, T - 1)
    ax.set_xlabel("stance phase [%]")


def plot_class_channel(profile, channel: int, path) -> Path:
    """Mean signal of one class/channel with its +-1 SD band coloured by relevance."""
    mean = profile.mean_signal[channel]
    sd = profile.sd_signal[channel]
    rel = profile.mean_relevance[channel]
    side, comp = profile.channels[channel]
    with matplotlib.rc_context(_RC):
        fig = Figure(figsize=(5.0, 3.0))
        ax = fig.add_subplot()
        band = PolyCollection(_band_polygons(mean, sd), facecolors=relevance_colors(rel),
                              edgecolors="none", antialiaseds=False)
        band.set_gid("relevance-band")
        ax.add_collection(band)
        ax.plot(np.arange(len(mean)), mean, color="black", lw=1.0)
        _stance_axis(ax, len(mean))
        ax.set_ylim(float((mean - sd).min()) - 0.05, float((mean + sd).max()) + 0.05)
        ax.set_ylabel("normalized force")
        ax.set_title(f"{profile.group.name}: GRF {comp} ({SIDE_TITLES.get(side, side)})")
        cbar = fig.colorbar(ScalarMappable(Normalize(-1, 1), RELEVANCE_CMAP), ax=ax,
                            ticks=[-1, 0, 1])
        cbar.ax.set_yticklabels(["against", "0", "in favour"])
        fig.tight_layout()
        fig.savefig(path, **_SAVE)
    return Path(path)


def plot_total_relevance(total, channels, path) -> Path:
    """One small panel per channel showing summed absolute relevance."""
    total = np.asarray(total, dtype=np.float64)
    sides = list(dict.fromkeys(s for s, _ in channels))
    comps = list(dict.fromkeys(c for _, c in channels))
    with matplotlib.rc_context(_RC):
        fig = Figure(figsize=(3.0 * len(comps), 2.2 * len(sides)))
        axes = fig.subplots(len(sides), len(comps), squeeze=False, sharey=True)
        for ci, (side, comp) in enumerate(channels):
            ax = axes[sides.index(side), comps.index(comp)]
            t = np.arange(total.shape[1])
            ax.fill_between(t, 0, total[ci], color=FAVOR_COLOR, alpha=0.6, lw=0)
            ax.plot(t, total[ci], color="black", lw=0.8)
            _stance_axis(ax, total.shape[1])
            ax.set_title(f"GRF {comp} ({SIDE_TITLES.get(side, side)})")
        for row in axes:
            row[0].set_ylabel("total relevance")
        fig.tight_layout()
        fig.savefig(path, **_SAVE)
    return Path(path)


def render_figures(profiles, total, out_dir) -> list[Path]:
    """Write every class/channel figure plus ``total_relevance.svg`` if given."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for group in sorted(profiles):
        p = profiles[group]
        for ci, (side, comp) in enumerate(p.channels):
            paths.append(plot_class_channel(p, ci, out_dir / f"class_{group.name}_{side}_{comp}.svg"))
    if total is not None:
        channels = next(iter(profiles.values())).channels
        paths.append(plot_total_relevance(total, channels, out_dir / "total_relevance.svg"))
    return paths
