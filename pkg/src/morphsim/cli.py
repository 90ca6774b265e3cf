"""``morphsim`` command line: corpus generation, training, design search, evaluation, rollouts."""
from __future__ import annotations

import argparse
import hashlib
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from morphsim import __version__
from morphsim.character import CharacterDesign
from morphsim.design_opt import DesignOptConfig, DesignSpace, evaluate_design, optimize
from morphsim.imitation import ImitationConfig, RewardWeights, rollout
from morphsim.learn import PpoConfig, load_checkpoint, policy_hash, save_checkpoint
from morphsim.motion import KINDS, DEFAULT_PARAMS, MotionClip, generate_clip, load_corpus
from morphsim.physics import CharacterModel, SimConfig, default_character
from morphsim.trainer import TrainConfig, init_controller, train_controller

MANIFEST_SCHEMA = "morphsim.manifest/1"
CONFIG_SCHEMA = "morphsim.config/1"

DEFAULTS = {
    "seed": None,
    "character": None,
    "design": None,
    "corpus": [{"kind": k, "params": {}, "duration": 4.0} for k in ("walk", "hop", "crawl")],
    "ppo": asdict(PpoConfig()),
    "train": {"iterations": 100, "n_envs": 16, "hidden": [256, 256], "value_hidden": [128, 128],
              "log_std": math.log(0.1), "temperature": 0.2},
    "reward_weights": asdict(RewardWeights()),
    "imitation": {"termination_threshold": 0.5, "max_episode": 300},
    "sim": asdict(SimConfig()),
    "design_opt": {"iterations": 100, "episodes_per_iter": 8, "log_std": math.log(0.05), "eval_every": 10,
                   "lr": 3e-4, "space": "full"},
}


class CliError(Exception):
    def __init__(self, kind: str, message: str):
        super().__init__(message)
        self.kind = kind


def _merge(base: dict, over: dict) -> dict:
    out = dict(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = v
    return out


def load_config(path: str | None, overrides: dict) -> dict:
    """Defaults, then the config file, then command-line flags."""
    cfg = json.loads(json.dumps(DEFAULTS))
    if path:
        p = Path(path)
        if not p.exists():
            raise CliError("missing_file", f"config file {path} does not exist")
        data = json.loads(p.read_text())
        if data.pop("schema", CONFIG_SCHEMA) != CONFIG_SCHEMA:
            raise CliError("schema", f"{path}: unsupported config schema")
        unknown = set(data) - set(DEFAULTS)
        if unknown:
            raise CliError("schema", f"{path}: unknown config keys {sorted(unknown)}")
        cfg = _merge(cfg, data)
    cfg = _merge(cfg, {k: v for k, v in overrides.items() if v is not None})
    if cfg["seed"] is None:
        cfg["seed"] = int(os.environ.get("MORPHSIM_SEED", "0"))
    return cfg


def _sim(cfg) -> SimConfig:
    return SimConfig(**cfg["sim"])


def _imitation(cfg) -> ImitationConfig:
    return ImitationConfig(weights=RewardWeights(**cfg["reward_weights"]),
                           termination_threshold=cfg["imitation"]["termination_threshold"],
                           max_episode=cfg["imitation"]["max_episode"], sim=_sim(cfg))


def _base(cfg) -> CharacterModel:
    if cfg["character"]:
        if not Path(cfg["character"]).exists():
            raise CliError("missing_file", f"character file {cfg['character']} does not exist")
        return CharacterModel.load(cfg["character"])
    return default_character()


def _design(cfg, base: CharacterModel) -> CharacterDesign:
    if cfg["design"]:
        if not Path(cfg["design"]).exists():
            raise CliError("missing_file", f"design file {cfg['design']} does not exist")
        d = CharacterDesign.load(cfg["design"])
        if d.n_links != base.n_links or d.n_joints != base.n_joints:
            raise CliError("topology", "design does not match the character topology")
        return d
    return CharacterDesign.identity(base)


def _clips(path) -> list[MotionClip]:
    p = Path(path)
    if not p.exists():
        raise CliError("missing_file", f"{path} does not exist")
    clips = [MotionClip.load(p)] if p.is_file() else load_corpus(p)
    if not clips:
        raise CliError("empty_corpus", f"empty corpus: no clips in {path}")
    return clips


def _controller(path, base: CharacterModel):
    if not Path(path).exists():
        raise CliError("missing_file", f"controller checkpoint {path} does not exist")
    policy, value_fn, meta = load_checkpoint(path)
    from morphsim.imitation import obs_dim, action_dim
    if policy.obs_dim != obs_dim(base) or policy.act_dim != action_dim(base):
        raise CliError("topology", "controller does not match the character topology")
    return policy, value_fn, meta


def _sha(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def write_manifest(out: Path, command: str, cfg: dict, outputs: list[Path]) -> None:
    manifest = {"schema": MANIFEST_SCHEMA, "command": command, "version": __version__, "seed": cfg["seed"],
                "config": cfg, "outputs": {p.name: _sha(p) for p in outputs}}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _out(path) -> Path:
    p = Path(path)
    p.mkdir(parents=True, exist_ok=True)
    return p


# ---------------------------------------------------------------- commands

def cmd_gen_corpus(args, cfg) -> int:
    out = _out(args.out)
    base = _base(cfg)
    written = []
    for k, entry in enumerate(cfg["corpus"]):
        kind = entry["kind"]
        if kind not in KINDS:
            raise CliError("schema", f"unknown clip kind {kind!r}")
        cid = entry.get("id") or f"{kind}_{k}"
        clip = generate_clip(kind, entry.get("params") or {}, float(entry.get("duration", 4.0)), clip_id=cid,
                             model=base)
        path = out / f"{cid}.json"
        clip.save(path)
        written.append(path)
    write_manifest(out, "gen-corpus", cfg, written)
    print(f"wrote {len(written)} clips to {out}")
    return 0


def _train_config(cfg) -> TrainConfig:
    t = cfg["train"]
    return TrainConfig(iterations=int(t["iterations"]), n_envs=int(t["n_envs"]), seed=int(cfg["seed"]),
                       hidden=tuple(t["hidden"]), value_hidden=tuple(t["value_hidden"]), log_std=float(t["log_std"]),
                       ppo=PpoConfig(**cfg["ppo"]), imitation=_imitation(cfg), temperature=float(t["temperature"]))


def cmd_train(args, cfg) -> int:
    out = _out(args.out)
    base = _base(cfg)
    clips = _clips(args.corpus)
    tcfg = _train_config(cfg)
    policy = value_fn = None
    if args.resume:
        policy, value_fn, _ = _controller(args.resume, base)

    def log(row):
        if not args.quiet:
            print(f"iter {row['iteration']:4d}  reward {row['mean_reward']:.3f}  "
                  f"success {row['success_rate']:.2f}  kl {row['kl']:.4f}", flush=True)

    if tcfg.iterations == 0 and policy is None:
        policy, value_fn = init_controller(base, tcfg)
        history = []
    else:
        res = train_controller(clips, tcfg, base, _design(cfg, base), policy, value_fn, log=log)
        policy, value_fn, history = res.policy, res.value_fn, res.history
    ckpt = out / "controller.ckpt"
    save_checkpoint(ckpt, policy, value_fn, {"seed": cfg["seed"], "iterations": tcfg.iterations,
                                             "clips": [c.id for c in clips]})
    curve = out / "training_curve.csv"
    _write_rows(curve, history, ["iteration", "mean_reward", "success_rate", "policy_loss", "value_loss"])
    write_manifest(out, "train", cfg, [ckpt, curve])
    print(f"controller {policy_hash(policy)[:16]} saved to {ckpt}")
    return 0


def _write_rows(path: Path, rows: list[dict], default_keys: list[str]) -> None:
    import csv
    # rows may carry extra columns (evaluation iterations); keep first-seen order
    keys = list(dict.fromkeys(k for r in rows for k in r)) if rows else default_keys
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=keys, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def cmd_optimize_design(args, cfg) -> int:
    out = _out(args.out)
    base = _base(cfg)
    clips = _clips(args.clips)
    controller, _, _ = _controller(args.controller, base)
    d = cfg["design_opt"]
    start = _design(cfg, base)
    space_name = args.space or d["space"]
    if space_name == "full":
        space = DesignSpace.full(start)
    elif space_name == "legs":
        space = DesignSpace.leg_length(start)
    else:
        raise CliError("schema", f"unknown design space {space_name!r}")
    ocfg = DesignOptConfig(iterations=int(d["iterations"]), episodes_per_iter=int(d["episodes_per_iter"]),
                           seed=int(cfg["seed"]), log_std=float(d["log_std"]), eval_every=int(d["eval_every"]),
                           ppo=replace(DesignOptConfig().ppo, lr=float(d["lr"])), imitation=_imitation(cfg))
    res = optimize(controller, clips, ocfg, space, base,
                   log=None if args.quiet else lambda r: print(f"iter {r['iteration']:4d}  "
                                                               f"best {r['best_reward']:.4f}", flush=True))
    design_path = Path(args.design_out) if args.design_out else out / "design.json"
    res.best_design.save(design_path)
    hist = out / "design_history.csv"
    _write_rows(hist, res.history, ["iteration"])
    metrics_csv, metrics_txt = out / "metrics.csv", out / "metrics.txt"
    res.best_eval.report.to_csv(metrics_csv)
    metrics_txt.write_text(res.best_eval.report.to_text())
    outputs = [hist, metrics_csv, metrics_txt] + ([design_path] if design_path.parent == out else [])
    write_manifest(out, "optimize-design", cfg, outputs)
    print(res.best_eval.report.to_text(), end="")
    print(f"discarded episodes: {res.discarded}")
    return 0


def _eval_one(payload):
    ckpt, design_dict, clip_dict, cfg = payload
    base = _base(cfg)
    policy, _, _ = load_checkpoint(ckpt)
    return evaluate_design(policy, CharacterDesign.from_dict(design_dict), [MotionClip.from_dict(clip_dict)],
                           _imitation(cfg), base).report.rows


def cmd_evaluate(args, cfg) -> int:
    out = _out(args.out)
    base = _base(cfg)
    clips = _clips(args.clips)
    controller, _, _ = _controller(args.controller, base)
    design = _design(cfg, base)
    from morphsim.metrics import EvalReport
    if args.workers > 1:
        report = EvalReport()
        jobs = [(args.controller, design.to_dict(), c.to_dict(), cfg) for c in clips]
        with ProcessPoolExecutor(args.workers) as pool:
            for rows in pool.map(_eval_one, jobs):
                report.rows.update(rows)
    else:
        report = evaluate_design(controller, design, clips, _imitation(cfg), base).report
    metrics_csv, metrics_txt = out / "metrics.csv", out / "metrics.txt"
    report.to_csv(metrics_csv)
    metrics_txt.write_text(report.to_text())
    write_manifest(out, "evaluate", cfg, [metrics_csv, metrics_txt])
    print(report.to_text(), end="")
    return 0


def cmd_rollout(args, cfg) -> int:
    out = _out(args.out)
    base = _base(cfg)
    clips = _clips(args.clip)
    controller, _, _ = _controller(args.controller, base)
    design = _design(cfg, base)
    from morphsim.character import build
    model = build(design, base)
    clip = clips[0]
    traj = rollout(controller, design, clip, "deterministic", cfg=_imitation(cfg), base=base)
    csv_path, summary = out / "trajectory.csv", out / "summary.json"
    traj.to_csv(csv_path, model)
    traj.write_summary(summary)
    write_manifest(out, "rollout", cfg, [csv_path, summary])
    print(f"{len(traj)} frames written to {csv_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="morphsim", description=__doc__)
    p.add_argument("--version", action="version", version=f"morphsim {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp):
        sp.add_argument("--config", help="JSON run configuration")
        sp.add_argument("--seed", type=int, help="overrides the config seed and MORPHSIM_SEED")
        sp.add_argument("--character", help="base character JSON (default: built-in character)")
        sp.add_argument("--workers", type=int, default=1, help="parallel worker processes")
        sp.add_argument("--quiet", action="store_true")
        sp.add_argument("--out", required=True, help="output directory")

    sp = sub.add_parser("gen-corpus", help="write procedural reference clips")
    common(sp)
    sp.set_defaults(func=cmd_gen_corpus)

    sp = sub.add_parser("train", help="train the imitation controller")
    common(sp)
    sp.add_argument("--corpus", required=True)
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--design", help="design of the training base character")
    sp.add_argument("--resume", help="continue from a controller checkpoint")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("optimize-design", help="search a character design with a frozen controller")
    common(sp)
    sp.add_argument("--controller", required=True)
    sp.add_argument("--clips", required=True)
    sp.add_argument("--design", help="starting design")
    sp.add_argument("--design-out", help="path of the resulting design file")
    sp.add_argument("--space", choices=("full", "legs"))
    sp.add_argument("--iterations", type=int)
    sp.set_defaults(func=cmd_optimize_design)

    sp = sub.add_parser("evaluate", help="imitation metrics for a design over clips")
    common(sp)
    sp.add_argument("--controller", required=True)
    sp.add_argument("--clips", required=True)
    sp.add_argument("--design")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("rollout", help="dump one deterministic rollout as CSV")
    common(sp)
    sp.add_argument("--controller", required=True)
    sp.add_argument("--clip", required=True)
    sp.add_argument("--design")
    sp.set_defaults(func=cmd_rollout)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {"seed": args.seed, "character": args.character, "design": getattr(args, "design", None)}
    iters = getattr(args, "iterations", None)
    if iters is not None:
        key = "train" if args.command == "train" else "design_opt"
        overrides[key] = {"iterations": iters}
    try:
        if args.workers < 1:
            raise CliError("usage", "--workers must be at least 1")
        cfg = load_config(args.config, overrides)
        return args.func(args, cfg)
    except CliError as e:
        print(json.dumps({"error": e.kind, "message": str(e)}), file=sys.stderr)
        return 2
    except (ValueError, KeyError, OSError) as e:
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
