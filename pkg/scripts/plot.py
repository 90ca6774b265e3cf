"""Render training curves and pose overlays to SVG.

    python scripts/plot.py curve run/train/training_curve.csv -o curve.svg
    python scripts/plot.py poses run/rollout/trajectory.csv --clip corpus/walk_0.json -o poses.svg

Needs matplotlib (``pip install artifact[plot]``).
"""
import argparse
import csv

import matplotlib

matplotlib.use("svg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from morphsim.character import CharacterDesign, build  # noqa: E402
from morphsim.motion import MotionClip  # noqa: E402
from morphsim.physics import default_character, link_frames  # noqa: E402


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def plot_curve(path, out, columns):
    rows = read_rows(path)
    x = [int(r["iteration"]) for r in rows]
    fig, axes = plt.subplots(len(columns), 1, figsize=(6, 2.2 * len(columns)), sharex=True, squeeze=False)
    for ax, col in zip(axes[:, 0], columns):
        ax.plot(x, [float(r[col]) if r.get(col) else np.nan for r in rows], lw=1.2)
        ax.set_ylabel(col)
        ax.grid(alpha=0.3)
    axes[-1, 0].set_xlabel("iteration")
    fig.tight_layout()
    fig.savefig(out)


def _draw(ax, model, q, **style):
    _, _, start, tip = link_frames(model, q)
    for s, t in zip(start, tip):
        ax.plot([s[0], t[0]], [s[1], t[1]], **style)


def plot_poses(path, out, clip_path=None, design_path=None, every=10):
    model = default_character()
    if design_path:
        model = build(CharacterDesign.load(design_path), model)
    rows = read_rows(path)
    nd = model.n_dof
    sim = np.array([[float(r[f"q{i}"]) for i in range(nd)] for r in rows])
    frames = [int(r["frame"]) for r in rows]
    ref = MotionClip.load(clip_path).frames if clip_path else None
    ref_model = default_character()
    fig, ax = plt.subplots(figsize=(10, 3))
    for k in range(0, len(rows), every):
        _draw(ax, model, sim[k], color="tab:blue", lw=1.5)
        if ref is not None and frames[k] < len(ref):
            _draw(ax, ref_model, ref[frames[k]], color="tab:orange", lw=1.0, alpha=0.6)
    ax.axhline(0.0, color="k", lw=0.8)
    ax.set_aspect("equal")
    ax.set_title("simulated (blue) and reference (orange)")
    fig.tight_layout()
    fig.savefig(out)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="what", required=True)
    c = sub.add_parser("curve")
    c.add_argument("csv")
    c.add_argument("-o", "--out", default="curve.svg")
    c.add_argument("--columns", nargs="+", default=["mean_reward", "success_rate", "value_loss"])
    s = sub.add_parser("poses")
    s.add_argument("csv")
    s.add_argument("--clip", help="reference clip drawn underneath")
    s.add_argument("--design", help="design the rollout was simulated with")
    s.add_argument("--every", type=int, default=10)
    s.add_argument("-o", "--out", default="poses.svg")
    args = p.parse_args(argv)
    if args.what == "curve":
        plot_curve(args.csv, args.out, args.columns)
    else:
        plot_poses(args.csv, args.out, args.clip, args.design, args.every)


if __name__ == "__main__":
    main()
