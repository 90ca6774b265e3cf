"""Imitation quality metrics: joint position error, acceleration error, success.

Positions are planar, so errors are 2D Euclidean distances reported in millimetres.
"""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from morphsim.physics import DimensionError

COLUMNS = ("S_succ", "E_mpjpe", "E_mpjpe_g", "E_acc")
FAILURE_REASONS = ("deviation", "fallen", "unstable")


def _pair(sim, ref) -> tuple[np.ndarray, np.ndarray]:
    sim = np.asarray(sim, dtype=float)
    ref = np.asarray(ref, dtype=float)
    if sim.shape != ref.shape or sim.ndim != 3:
        raise DimensionError(f"expected matching (frames, joints, dims) arrays, got {sim.shape} and {ref.shape}")
    return sim, ref


def mpjpe(sim, ref, root_relative: bool = True) -> float:
    """Mean per-joint position error in mm. Joint 0 is the root."""
    sim, ref = _pair(sim, ref)
    if root_relative:
        sim = sim - sim[:, :1]
        ref = ref - ref[:, :1]
    return float(np.mean(np.linalg.norm(sim - ref, axis=-1)) * 1000.0)


def accel_error(sim, ref, frame_rate: float = 30.0) -> float:
    """Mean joint acceleration error in mm per frame squared (second differences)."""
    sim, ref = _pair(sim, ref)
    if sim.shape[0] < 3:
        raise ValueError("acceleration error needs at least three frames")
    if not frame_rate > 0:
        raise ValueError("frame_rate must be positive")
    acc = lambda x: x[2:] - 2 * x[1:-1] + x[:-2]
    return float(np.mean(np.linalg.norm(acc(sim) - acc(ref), axis=-1)) * 1000.0)


def success(terminations) -> bool:
    """True when no fall or deviation was recorded anywhere in the clip."""
    return not any(t in FAILURE_REASONS for t in terminations)


@dataclass
class EvalReport:
    rows: dict[str, dict[str, float]] = field(default_factory=dict)

    def add(self, clip_id: str, s_succ: float, e_mpjpe: float, e_mpjpe_g: float, e_acc: float) -> None:
        if not 0 <= s_succ <= 1 or min(e_mpjpe, e_mpjpe_g, e_acc) < 0:
            raise ValueError("success must lie in [0, 1] and errors must be non-negative")
        self.rows[clip_id] = dict(zip(COLUMNS, map(float, (s_succ, e_mpjpe, e_mpjpe_g, e_acc))))

    def aggregate(self) -> dict[str, float]:
        if not self.rows:
            return {c: float("nan") for c in COLUMNS}
        ids = sorted(self.rows)
        return {c: float(np.mean([self.rows[i][c] for i in ids])) for c in COLUMNS}

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("clip",) + COLUMNS)
        for cid in sorted(self.rows):
            w.writerow([cid] + [repr(self.rows[cid][c]) for c in COLUMNS])
        w.writerow(["mean"] + [repr(v) for v in self.aggregate().values()])
        text = buf.getvalue()
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text)
        return text

    def to_text(self) -> str:
        width = max([len("clip"), len("mean")] + [len(c) for c in self.rows])
        head = f"{'clip':<{width}}  {'S_succ':>7}  {'E_mpjpe':>9}  {'E_mpjpe_g':>9}  {'E_acc':>7}"
        lines = [head, "-" * len(head)]

        def fmt(name, r):
            return (f"{name:<{width}}  {100 * r['S_succ']:>6.1f}%  {r['E_mpjpe']:>9.1f}  "
                    f"{r['E_mpjpe_g']:>9.1f}  {r['E_acc']:>7.2f}")

        lines += [fmt(cid, self.rows[cid]) for cid in sorted(self.rows)]
        lines.append(fmt("mean", self.aggregate()))
        return "\n".join(lines) + "\n"
