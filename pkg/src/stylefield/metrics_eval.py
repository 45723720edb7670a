"""Warped-consistency metrics over rendered novel-view sequences.

Short-range scores warp frame t onto frame t+1, long-range onto frame t+7,
using flows that follow the package convention (flow on the later frame's
grid, mapping back to frame t).  The masked RMSE normalization matches the
consistency loss, so ablations on the consistency weight read directly in
this metric.  The optional perceptual distance uses the project feature
extractor and is not comparable to published LPIPS numbers.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .errors import ValidationError
from .flowwarp import warp
from .scene_io import VisibilityMask, load_png, read_flo

SHORT_OFFSET = 1
LONG_OFFSET = 7


def check_flow_sources(train_source: str, eval_source: str) -> None:
    """Evaluation flow must come from a different source than training flow."""
    if train_source == eval_source:
        raise ValidationError(
            f"evaluation flow source {eval_source!r} must differ from the "
            f"training flow source"
        )


def _perceptual(a, b, phi) -> float:
    total = 0.0
    taps_a = phi.taps(a)
    taps_b = phi.taps(b)
    for ta, tb in zip(taps_a, taps_b):
        total += float(((ta - tb) ** 2).mean())
    return total / len(taps_a)


def consistency_scores(frames, flows, masks, offset: int, phi=None):
    """Masked warped RMSE (and optional perceptual distance) over a sequence.

    ``flows[t]`` maps frame ``t + offset`` pixels back to frame ``t``
    coordinates, so ``warp(frames[t], flows[t])`` lands on frame
    ``t + offset``'s grid.  All-masked pairs are excluded; zero valid pairs
    is an error.
    """
    if offset < 1 or len(frames) <= offset:
        raise ValidationError("need more frames than the offset")
    n_pairs = len(frames) - offset
    if len(flows) != n_pairs or len(masks) != n_pairs:
        raise ValidationError(
            f"expected {n_pairs} flows and masks for {len(frames)} frames at "
            f"offset {offset}"
        )
    rmses = []
    perceptuals = []
    for t in range(n_pairs):
        target = np.asarray(frames[t + offset], dtype=np.float64)
        warped = warp(np.asarray(frames[t], dtype=np.float64), flows[t])
        m = masks[t].mask if isinstance(masks[t], VisibilityMask) else np.asarray(masks[t], bool)
        count = int(m.sum())
        if count == 0:
            continue
        diff = (target - warped)[m]
        rmses.append(float(np.sqrt((diff ** 2).sum() / (count * 3))))
        if phi is not None:
            perceptuals.append(_perceptual(target * m[..., None],
                                           warped * m[..., None], phi))
    if not rmses:
        raise ValidationError("no valid frame pairs (all masks empty)")
    rmse = float(np.mean(rmses))
    perceptual = float(np.mean(perceptuals)) if perceptuals else None
    return rmse, perceptual


# ---------------------------------------------------------------------------
# Report over a run directory
# ---------------------------------------------------------------------------
#
# Layout expected under run_dir:
#   renders/<sequence>/NNN.png          rendered frames in order
#   flows/<sequence>/o<offset>_t<TTT>.flo        flow for (t -> t+offset)
#   flows/<sequence>/o<offset>_t<TTT>_mask.png   mask (white = visible)

def _load_sequence(seq_dir: Path):
    frames = [load_png(p) for p in sorted(seq_dir.glob("*.png"))]
    if len(frames) < 2:
        raise ValidationError(f"sequence {seq_dir} has fewer than 2 frames")
    return frames


def _load_flows(flow_dir: Path, offset: int, n_pairs: int):
    flows = []
    masks = []
    for t in range(n_pairs):
        fpath = flow_dir / f"o{offset}_t{t:03d}.flo"
        mpath = flow_dir / f"o{offset}_t{t:03d}_mask.png"
        if not fpath.exists():
            return None
        flows.append(read_flo(fpath))
        if mpath.exists():
            masks.append(VisibilityMask(mask=load_png(mpath)[..., 0] > 0.5))
        else:
            masks.append(VisibilityMask(mask=np.ones(flows[-1].shape, dtype=bool)))
    return flows, masks


def eval_report(run_dir, offsets=(SHORT_OFFSET, LONG_OFFSET), phi=None):
    """Evaluate every rendered sequence in a run directory.

    Writes ``reports/report.jsonl`` (one record per sequence and offset) and
    ``reports/summary.txt``; returns the record list.
    """
    run_dir = Path(run_dir)
    render_root = run_dir / "renders"
    seq_dirs = sorted(p for p in render_root.glob("*") if p.is_dir()) \
        if render_root.exists() else []
    if not seq_dirs:
        raise ValidationError(f"no rendered sequences under {render_root}")

    rows = []
    for seq_dir in seq_dirs:
        frames = _load_sequence(seq_dir)
        for offset in offsets:
            n_pairs = len(frames) - offset
            if n_pairs < 1:
                continue
            loaded = _load_flows(run_dir / "flows" / seq_dir.name, offset, n_pairs)
            if loaded is None:
                continue
            flows, masks = loaded
            rmse, perceptual = consistency_scores(frames, flows, masks, offset, phi=phi)
            rows.append({
                "sequence": seq_dir.name,
                "offset": offset,
                "n_frames": len(frames),
                "rmse": rmse,
                "perceptual": perceptual,
            })
    if not rows:
        raise ValidationError("no sequence had flows for the requested offsets")

    report_dir = run_dir / "reports"
    report_dir.mkdir(parents=True, exist_ok=True)
    with open(report_dir / "report.jsonl", "w") as f:
        for row in rows:
            f.write(json.dumps(row) + "\n")
    with open(report_dir / "summary.txt", "w") as f:
        f.write(f"{'sequence':<32} {'offset':>6} {'rmse':>10} {'perceptual':>12}\n")
        for row in rows:
            perc = "-" if row["perceptual"] is None else f"{row['perceptual']:.6f}"
            f.write(f"{row['sequence']:<32} {row['offset']:>6} "
                    f"{row['rmse']:>10.6f} {perc:>12}\n")
    return rows
