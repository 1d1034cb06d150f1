"""Report figures: a top-down ground-truth vs. predicted root-trajectory
SVG, loss-curve figures, and a raster companion for quick inspection.

The trajectory SVG is written directly (exactly two polylines plus "gt" and
"pred" legend labels) so downstream tooling can rely on its structure; the
matplotlib figures are for humans.
"""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import matplotlib

matplotlib.use("Agg")
# fixed hash salt + stripped dates keep re-rendered SVG bytes identical
matplotlib.rcParams["svg.hashsalt"] = "diffopt"
import matplotlib.pyplot as plt
import numpy as np

SVG_SIZE = (480, 480)
MARGIN = 40.0

GT_COLOR = "#444444"
PRED_COLOR = "#d62728"


def _fit_points(gt_xz: np.ndarray, pred_xz: np.ndarray):
    """Map world xz onto SVG pixel coordinates with a shared scale."""
    allpts = np.concatenate((gt_xz, pred_xz), axis=0)
    lo = allpts.min(axis=0)
    hi = allpts.max(axis=0)
    span = np.maximum(hi - lo, 1e-6)
    scale = min((SVG_SIZE[0] - 2 * MARGIN) / span[0], (SVG_SIZE[1] - 2 * MARGIN) / span[1])

    def to_px(p):
        x = MARGIN + (p[:, 0] - lo[0]) * scale
        # world +z is drawn upward
        y = SVG_SIZE[1] - MARGIN - (p[:, 1] - lo[1]) * scale
        return np.stack((x, y), axis=-1)

    return to_px(gt_xz), to_px(pred_xz)


def _polyline(points: np.ndarray, color: str) -> str:
    pts = " ".join(f"{p[0]:.2f},{p[1]:.2f}" for p in points)
    return f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{pts}"/>'


def trajectory_svg(gt_x_seq: np.ndarray, pred_x_seq: np.ndarray, path, title: str = ""):
    """Top-down (x, z) root trajectories: exactly two polylines + legend."""
    gt_px, pred_px = _fit_points(gt_x_seq[:, [0, 2]], pred_x_seq[:, [0, 2]])
    w, h = SVG_SIZE
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">',
        f'<rect width="{w}" height="{h}" fill="white"/>',
        _polyline(gt_px, GT_COLOR),
        _polyline(pred_px, PRED_COLOR),
        f'<text x="{w - 110}" y="24" fill="{GT_COLOR}" font-family="sans-serif" font-size="14">gt</text>',
        f'<text x="{w - 110}" y="44" fill="{PRED_COLOR}" font-family="sans-serif" font-size="14">pred</text>',
    ]
    if title:
        parts.append(
            f'<text x="{MARGIN}" y="24" fill="#222222" font-family="sans-serif" font-size="14">'
            f"{escape(title)}</text>"
        )
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))


def trajectory_png(gt_x_seq: np.ndarray, pred_x_seq: np.ndarray, path, title: str = ""):
    fig, ax = plt.subplots(figsize=(5, 5))
    ax.plot(gt_x_seq[:, 0], gt_x_seq[:, 2], color=GT_COLOR, label="gt")
    ax.plot(pred_x_seq[:, 0], pred_x_seq[:, 2], color=PRED_COLOR, label="pred")
    ax.scatter([gt_x_seq[0, 0]], [gt_x_seq[0, 2]], color=GT_COLOR, marker="o", s=20)
    ax.set_xlabel("x [m]")
    ax.set_ylabel("z [m]")
    ax.set_aspect("equal")
    ax.legend(loc="best")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def loss_curve_svg(curve, path, title: str = ""):
    fig, ax = plt.subplots(figsize=(5, 3.2))
    ax.plot(np.arange(len(curve)), curve, color=PRED_COLOR, lw=1.0)
    ax.set_xlabel("iteration")
    ax.set_ylabel("loss")
    if len(curve) > 1 and min(curve) > 0 and max(curve) / max(min(curve), 1e-30) > 50:
        ax.set_yscale("log")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    # strip the creation date so re-running is byte-identical
    fig.savefig(path, metadata={"Date": None})
    plt.close(fig)
