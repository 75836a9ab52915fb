"""Command-line interface: ``bimaug <subcommand> [options]``.

Exit codes: 0 success, 2 usage or configuration error, 3 runtime or data error.
Global options (``--seed``, ``--workers``, ``--log-level``, ``--config``) are
accepted by every subcommand. ``--config`` names a JSON file whose values are
overridden by explicit flags; the ``BIMAUG_LOG`` environment variable
overrides ``--log-level``.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .contact import LabelConfig, Phase, label_trajectory
from .dataset.augment import AugmentConfig, augment_dataset, merge
from .dataset.io import atomic_write, dumps_json, read_dataset, write_dataset
from .dataset.model import ARMS, Dataset
from .errors import BimaugError, CorruptFrame
from .sampler import PerturbationSampler

log = logging.getLogger("bimaug")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3

# config-file sections accepted per subcommand (besides the global keys)
GLOBAL_KEYS = {"seed", "workers", "log_level"}
SECTIONS = {"gen-demos": "gen_demos", "label-contacts": "label", "augment": "augment",
            "train-denoiser": "train", "validate": "validate", "stats": "stats"}


class UsageError(Exception):
    """Bad flags or configuration (exit code 2)."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# --- helpers ------------------------------------------------------------------

def _load_config(path) -> dict:
    if path is None:
        return {}
    try:
        cfg = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(cfg, dict):
        raise UsageError("config file must hold a JSON object")
    extra = set(cfg) - GLOBAL_KEYS - set(SECTIONS.values())
    if extra:
        raise UsageError(f"unknown config keys: {sorted(extra)}")
    return cfg


def _pick(flag, section: dict, key: str, default):
    """Flag beats config file beats built-in default."""
    if flag is not None:
        return flag
    return section.get(key, default)


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write(path, text.encode())


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    atomic_write(path, dumps_json(obj))


def _csv_text(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def _read(path) -> Dataset:
    return read_dataset(path)


def label_file(i: int) -> str:
    return f"episode_{i:05d}.labels"


def read_labels(path, n_episodes: int) -> list:
    from .contact import ContactLabel

    path = Path(path)
    out = []
    for i in range(n_episodes):
        f = path / label_file(i)
        if not f.is_file():
            raise BimaugError(f"missing label file {f}")
        out.append(ContactLabel.from_bytes(f.read_bytes()))
    return out


# --- subcommands --------------------------------------------------------------

def cmd_gen_demos(args, cfg: dict) -> int:
    from .sim.scenario import SpawnRegion, Task, generate_dataset

    sec = cfg.get("gen_demos", {})
    task = _pick(args.task, sec, "task", "lift-ball")
    n = _pick(args.n, sec, "n", 10)
    size = _pick(args.size, sec, "size", 128)
    region = SpawnRegion(**sec.get("region", {})) if "region" in sec else SpawnRegion()
    try:
        Task(task)
    except ValueError:
        raise UsageError(f"unknown task {task!r}; choose from {[t.value for t in Task]}")
    if n < 0 or size < 16:
        raise UsageError("--n must be >= 0 and --size >= 16")
    path = generate_dataset(task, n, args.seed, args.out, region, size, args.workers)
    print(f"wrote {n} episodes to {path}")
    return EXIT_OK


def cmd_label_contacts(args, cfg: dict) -> int:
    sec = cfg.get("label", {})
    method = _pick(args.method, sec, "method", "auto")
    window = _pick(args.window, sec, "smoothing_window", 5)
    if method not in ("auto", "depth", "ssim"):
        raise UsageError(f"unknown method {method!r}")
    ds = _read(args.dataset)
    if method == "depth" and any(not t.has_depth for t in ds):
        raise UsageError("method 'depth' requested but the dataset has episodes without depth")
    lcfg = LabelConfig(method=method, smoothing_window=window)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    episodes, failures = [], []
    for i, traj in enumerate(ds):
        try:
            lab = label_trajectory(traj, lcfg)
        except BimaugError as exc:
            log.error("episode %d: %s", i, exc)
            failures.append({"episode": i, "error": str(exc)})
            continue
        atomic_write(out / label_file(i), lab.to_bytes())
        entry = {"episode": i, "file": label_file(i), "method": "depth" if method == "auto" and traj.has_depth
                 else ("ssim" if method == "auto" else method), **lab.summary()}
        gt = traj.metadata.get("gt_contact")
        if gt is not None:
            gt_idx = np.flatnonzero(np.asarray(gt, bool))
            entry["gt_onset_index"] = int(gt_idx[0]) if gt_idx.size else None
            if entry["gt_onset_index"] is not None and lab.onset_index is not None:
                entry["onset_error"] = lab.onset_index - entry["gt_onset_index"]
        episodes.append(entry)
    _write_json(out / "summary.json", {"episodes": episodes, "failures": failures})
    print(f"labeled {len(episodes)} episodes, {len(failures)} failures -> {out}")
    return EXIT_RUNTIME if failures else EXIT_OK


def _make_synth(name: str, ds: Dataset, model_path):
    if name == "reproject":
        from .synth.reprojection import ReprojectionSynthesizer

        intr = ds[0].intrinsics if len(ds) else None
        if any({n: t.intrinsics[n].to_dict() for n in ARMS} != {n: intr[n].to_dict() for n in ARMS} for t in ds):
            raise UsageError("reprojection needs every episode to share camera intrinsics")
        return ReprojectionSynthesizer(intr)
    from .synth.diffusion import DiffusionSynthesizer, load_model

    if model_path is None:
        raise UsageError("--synth diffusion needs --model")
    return DiffusionSynthesizer(load_model(model_path))


def cmd_augment(args, cfg: dict) -> int:
    sec = dict(cfg.get("augment", {}))
    if args.seed_given or "run_seed" not in sec:
        sec["run_seed"] = args.seed
    if args.k is not None:
        sec["k"] = args.k
    if args.offset is not None:
        sec["offset"] = args.offset
    if args.synth is not None:
        sec["synth"] = args.synth
    try:
        acfg = AugmentConfig.from_dict(sec)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad augment config: {exc}") from exc
    ds = _read(args.dataset)
    if args.labels is not None:
        labels = read_labels(args.labels, len(ds))
    else:
        labels = [label_trajectory(t) for t in ds]
    if acfg.synth == "reproject" and any(not t.has_depth for t in ds):
        raise UsageError("reprojection needs depth; use --synth diffusion for depth-free data")
    synth = _make_synth(acfg.synth, ds, args.model)
    sampler = PerturbationSampler(acfg.sampler)
    aug, report = augment_dataset(ds, labels, acfg, sampler, synth, workers=args.workers)
    out = Path(args.out)
    write_dataset(aug, out / "augmented")
    write_dataset(merge(ds, aug), out / "merged")
    rep = {"config": acfg.to_dict(), **report.to_dict()}
    _write_json(out / "report.json", rep)
    _write_text(out / "report.csv", _csv_text(["key", "count"], report.rows()))
    print(f"augmented {report.episodes} episodes: {report.attempts} attempts, {report.replaced} replaced, "
          f"{report.kept_total} kept -> {out}")
    return EXIT_OK


def cmd_train_denoiser(args, cfg: dict) -> int:
    from .synth.diffusion import DenoiserModel, TrainConfig, save_model, train

    sec = cfg.get("train", {})
    extra = set(sec) - {"steps", "lr", "momentum", "batch", "gap", "hidden"}
    if extra:
        raise UsageError(f"unknown train config keys: {sorted(extra)}")
    tcfg = TrainConfig(steps=_pick(args.steps, sec, "steps", 500), lr=_pick(args.lr, sec, "lr", 1e-3),
                       momentum=sec.get("momentum", 0.9), batch=_pick(args.batch, sec, "batch", 16),
                       gap=tuple(sec.get("gap", (5, 15))), seed=args.seed)
    if tcfg.steps < 1 or tcfg.batch < 1 or tcfg.lr <= 0:
        raise UsageError("steps and batch must be >= 1 and lr > 0")
    ds = _read(args.dataset)
    if len(ds) == 0:
        raise BimaugError("cannot train on an empty dataset")
    h, w = ds[0].image_shape
    model = DenoiserModel(latent_shape=(h // 16, w // 16, 4), hidden=sec.get("hidden", 256), seed=args.seed)
    res = train(model, list(ds), tcfg)
    out = Path(args.out_model)
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(res.model, out)
    _write_text(out.with_suffix(".loss.csv"), res.loss_csv())
    print(f"trained {tcfg.steps} steps, loss {res.losses[0]:.4g} -> {res.losses[-1]:.4g}; model at {out}")
    return EXIT_OK


def validate_dataset(ds: Dataset) -> list[dict]:
    """Machine-readable list of invariant violations (empty if valid)."""
    bad = []
    for i, traj in enumerate(ds):
        if len(traj) == 0:
            bad.append({"episode": i, "check": "length", "detail": "empty trajectory"})
        if traj.metadata.get("calibrated", True):
            for t, arm, err in traj.hand_eye_violations():
                bad.append({"episode": i, "step": t, "arm": arm, "check": "hand_eye", "detail": err})
        h, w = traj.image_shape
        for name in ARMS:
            k = traj.intrinsics[name]
            if (k.height, k.width) != (h, w):
                bad.append({"episode": i, "arm": name, "check": "intrinsics", "detail": "size differs from images"})
        for t, step in enumerate(traj.steps):
            for name in ARMS:
                obs = step.arm(name)
                for label, pose in (("camera", obs.camera), ("eef", obs.eef)):
                    R = pose.rotation
                    err = float(np.max(np.abs(R.T @ R - np.eye(3))))
                    if err > 1e-6 or np.linalg.det(R) <= 0 or not np.all(np.isfinite(pose.translation)):
                        bad.append({"episode": i, "step": t, "arm": name, "check": f"{label}_pose", "detail": err})
                if not (np.all(np.isfinite(obs.joints)) and np.all(np.isfinite(obs.action))):
                    bad.append({"episode": i, "step": t, "arm": name, "check": "joints", "detail": "non-finite"})
                if not 0.0 <= obs.gripper <= 1.0:
                    bad.append({"episode": i, "step": t, "arm": name, "check": "gripper", "detail": obs.gripper})
    return bad


def cmd_validate(args, cfg: dict) -> int:
    try:
        ds = _read(args.dataset)
    except CorruptFrame as exc:
        print(json.dumps({"valid": False, "violations": [{"check": "format", "frame": exc.index,
                                                          "detail": str(exc)}]}, indent=2))
        return EXIT_RUNTIME
    bad = validate_dataset(ds)
    print(json.dumps({"valid": not bad, "episodes": len(ds), "violations": bad}, indent=2))
    return EXIT_RUNTIME if bad else EXIT_OK


def _histogram(values, bins) -> list[tuple]:
    counts, edges = np.histogram(np.asarray(values, dtype=np.float64), bins=bins)
    return [(f"{edges[j]:.6g}", f"{edges[j + 1]:.6g}", int(c)) for j, c in enumerate(counts)]


def cmd_stats(args, cfg: dict) -> int:
    sec = cfg.get("stats", {})
    n_bins = _pick(args.bins, sec, "bins", 10)
    ds = _read(args.dataset)
    labels = read_labels(args.labels, len(ds)) if args.labels is not None else None
    rows, mags, angles = [], [], []
    for i, traj in enumerate(ds):
        aug = traj.metadata.get("augmentation", {})
        steps = aug.get("steps", [])
        replaced = sum(s["status"] == "replaced" for s in steps)
        if labels is not None:
            lab = labels[i].labels
            contact = int(np.sum(lab == Phase.CONTACT_RICH))
            onset = labels[i].onset_index
        else:
            contact, onset = "", ""
        rows.append((i, traj.metadata.get("provenance", ""), len(traj),
                     "" if labels is None else len(traj) - contact, contact,
                     "" if onset is None else onset, len(steps), replaced,
                     f"{replaced / len(steps):.6g}" if steps else ""))
        for s in steps:
            if s["status"] != "replaced":
                continue
            for name in ARMS:
                m = np.asarray(s["perturbation"][name])
                mags.append(float(np.linalg.norm(m[:3, 3])))
                c = np.clip((np.trace(m[:3, :3]) - 1.0) / 2.0, -1.0, 1.0)
                angles.append(float(np.degrees(np.arccos(c))))
    out = Path(args.out)
    header = ["episode", "provenance", "length", "contactless_steps", "contact_steps", "onset_index",
              "attempts", "replaced", "replacement_rate"]
    _write_text(out / "episodes.csv", _csv_text(header, rows))
    hist_rows = []
    if mags:
        hist_rows += [("translation_m", *r) for r in _histogram(mags, n_bins)]
        hist_rows += [("rotation_deg", *r) for r in _histogram(angles, n_bins)]
    _write_text(out / "perturbations.csv", _csv_text(["quantity", "lo", "hi", "count"], hist_rows))
    print(f"stats for {len(ds)} episodes -> {out}")
    return EXIT_OK


COMMANDS = {"gen-demos": cmd_gen_demos, "label-contacts": cmd_label_contacts, "augment": cmd_augment,
            "train-denoiser": cmd_train_denoiser, "validate": cmd_validate, "stats": cmd_stats}


# --- parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="run seed (default 0)")
    common.add_argument("--workers", type=int, default=None, help="worker processes (default: CPU count)")
    common.add_argument("--log-level", default=None, choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    common.add_argument("--config", default=None, help="JSON config file; flags take precedence")

    p = _Parser(prog="bimaug", description="Bimanual wrist-camera data augmentation toolkit.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-demos", parents=[common], help="generate simulator demonstrations")
    g.add_argument("--task", default=None, help="lift-ball | push-block")
    g.add_argument("--n", type=int, default=None, help="number of demos (default 10)")
    g.add_argument("--size", type=int, default=None, help="image side in pixels (default 128)")
    g.add_argument("--out", required=True)

    lc = sub.add_parser("label-contacts", parents=[common], help="label contact phases")
    lc.add_argument("--dataset", required=True)
    lc.add_argument("--method", default=None, help="auto | depth | ssim")
    lc.add_argument("--window", type=int, default=None, help="majority-filter window (default 5)")
    lc.add_argument("--out", required=True)

    a = sub.add_parser("augment", parents=[common], help="augment a dataset and merge with the original")
    a.add_argument("--dataset", required=True)
    a.add_argument("--labels", default=None, help="label directory (default: label on the fly)")
    a.add_argument("--synth", default=None, choices=["reproject", "diffusion"])
    a.add_argument("--model", default=None, help="denoiser model file for --synth diffusion")
    a.add_argument("--k", type=int, default=None, help="replacement interval (default 6)")
    a.add_argument("--offset", type=int, default=None, help="first replaced index (default 0)")
    a.add_argument("--out", required=True)

    t = sub.add_parser("train-denoiser", parents=[common], help="train the pose-conditioned denoiser")
    t.add_argument("--dataset", required=True)
    t.add_argument("--steps", type=int, default=None)
    t.add_argument("--lr", type=float, default=None)
    t.add_argument("--batch", type=int, default=None)
    t.add_argument("--out-model", required=True)

    v = sub.add_parser("validate", parents=[common], help="check format and invariants")
    v.add_argument("--dataset", required=True)

    s = sub.add_parser("stats", parents=[common], help="phase lengths, replacement rates, perturbation histograms")
    s.add_argument("--dataset", required=True)
    s.add_argument("--labels", default=None)
    s.add_argument("--bins", type=int, default=None)
    s.add_argument("--out", required=True)
    return p


def _setup_logging(level: str) -> None:
    level = os.environ.get("BIMAUG_LOG", level).upper()
    if level not in ("DEBUG", "INFO", "WARNING", "ERROR"):
        raise UsageError(f"unknown log level {level!r}")
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        cfg = _load_config(args.config)
        args.seed_given = args.seed is not None
        args.seed = _pick(args.seed, cfg, "seed", 0)
        args.workers = _pick(args.workers, cfg, "workers", os.cpu_count() or 1)
        if args.workers < 1:
            raise UsageError("--workers must be >= 1")
        _setup_logging(_pick(args.log_level, cfg, "log_level", "WARNING"))
        return COMMANDS[args.command](args, cfg)
    except UsageError as exc:
        print(f"bimaug: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (BimaugError, OSError, ValueError) as exc:
        print(f"bimaug: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
