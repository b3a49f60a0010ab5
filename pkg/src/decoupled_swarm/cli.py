"""Command-line driver: ``gen-data``, ``train``, ``eval``, ``report``, ``selftest``.

Exit codes: 0 ok, 1 invalid config or inputs, 2 runtime failure, 3 self-test failure.
Every command resolves and validates its configuration before touching the
filesystem.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from collections import defaultdict
from pathlib import Path

import numpy as np
import yaml

from . import checks, nets
from .config import ConfigError, ExperimentConfig, config_from_dict, dump_config, load_config
from .evaluation import config_digest, evaluate, latent_noise, predict_global, predict_local, to_mask
from .swarm import (CenterState, ProtocolError, TrainingError, build_centers, method_spec, run_swarm)
from .synthdata import (CenterData, CenterSpec, FederationData, build_federation_data, load_dataset, save_dataset,
                        write_pgm)
from .tensor import NonFiniteError, ParameterSet

log = logging.getLogger("decoupled_swarm")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME, EXIT_SELFTEST = 0, 1, 2, 3


class InputError(Exception):
    """Missing or inconsistent inputs discovered before any output is written."""


# ---------------------------------------------------------------------------
# helpers

def _resolve(args) -> ExperimentConfig:
    overrides = {
        "seed": getattr(args, "seed", None),
        "method": getattr(args, "method", None),
        "schedule.rounds": getattr(args, "rounds", None),
        "jobs": getattr(args, "jobs", None),
        "log_messages": True if getattr(args, "log_messages", False) else None,
    }
    return load_config(args.config, overrides)


def data_dir(cfg: ExperimentConfig, given: str | None) -> Path:
    return Path(given) if given else Path(cfg.out_dir) / "data"


def run_dir(cfg: ExperimentConfig, given: str | None) -> Path:
    return Path(given) if given else Path(cfg.out_dir) / f"{cfg.method}_seed{cfg.seed}"


def _check_writable(path: Path) -> None:
    if path.exists() and not path.is_dir():
        raise InputError(f"output path {path} exists and is not a directory")


def _global_path(root: Path, cid: int) -> Path:
    return root / f"center{cid}_global.pset"


def _personal_path(root: Path, cid: int) -> Path:
    return root / f"center{cid}_personal.pset"


def save_checkpoints(centers: list[CenterState], root: Path) -> None:
    for c in centers:
        nets.save_params(c.global_part(), _global_path(root, c.center_id))
        if c.theta_p is not None:
            nets.save_params(c.theta_p, _personal_path(root, c.center_id))


def _split_global(ps: ParameterSet) -> dict[str, ParameterSet]:
    parts: dict[str, ParameterSet] = {}
    for name, t in ps.items():
        key, _, rest = name.partition(".")
        parts.setdefault(key, ParameterSet())[rest] = t
    return parts


def load_checkpoints(cfg: ExperimentConfig, root: Path, center_ids: list[int]) -> list[CenterState]:
    """Rebuild center states from checkpoint files, checking them against the config's schema."""
    spec = method_spec(cfg.method)
    missing = [p for cid in center_ids
               for p in [_global_path(root, cid)] + ([_personal_path(root, cid)] if spec.adaptive else [])
               if not p.is_file()]
    if missing:
        raise InputError(f"missing checkpoint {missing[0]}")
    refs = build_centers(cfg, _layout_only(center_ids), spec)
    out = []
    for cid, ref in zip(sorted(center_ids), refs):
        try:
            glob = nets.load_params(_global_path(root, cid))
            personal = nets.load_params(_personal_path(root, cid)) if spec.adaptive else None
        except (ValueError, KeyError) as err:
            raise InputError(f"unreadable checkpoint for center {cid}: {err}") from None
        if glob.schema() != ref.global_part().schema():
            raise InputError(f"{_global_path(root, cid)}: parameter schema does not match the config")
        if personal is not None and personal.schema() != ref.theta_p.schema():
            raise InputError(f"{_personal_path(root, cid)}: parameter schema does not match the config")
        parts = _split_global(glob)
        out.append(CenterState(cid, 0, [], [], parts["seg"], parts.get("prior"), parts.get("post"),
                               personal, spec.da_mode))
    return out


def _layout_only(ids) -> FederationData:
    """Case-free federation, enough to rebuild the parameter layout of each center."""
    return FederationData([CenterData(CenterSpec(cid), [], []) for cid in ids], [])


def _check_dataset(cfg: ExperimentConfig, root: Path):
    if not (root / "manifest.json").is_file():
        raise InputError(f"no dataset at {root} (missing {root / 'manifest.json'})")
    data = load_dataset(root)
    have = sorted((c.spec for c in data.centers), key=lambda s: s.center_id)
    want = sorted(cfg.centers, key=lambda s: s.center_id)
    if have != want:
        raise InputError(f"dataset {root} was generated with different center specs than the config")
    if data.geom != cfg.geom or len(data.generic) != cfg.n_generic:
        raise InputError(f"dataset {root} was generated with a different geometry or generic-set size")
    return data


# ---------------------------------------------------------------------------
# commands

def cmd_gen_data(cfg: ExperimentConfig, out: Path) -> Path:
    _check_writable(out)
    data = build_federation_data(cfg.centers, cfg.seed, cfg.n_generic, cfg.geom)
    manifest = save_dataset(data, out)
    (out / "config.yaml").write_text(dump_config(cfg))
    return manifest


def cmd_train(cfg: ExperimentConfig, data_root: Path, out: Path):
    _check_writable(out)
    data = _check_dataset(cfg, data_root)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.yaml").write_text(dump_config(cfg))
    t0 = time.time()
    hist = run_swarm(cfg, data, cfg.method, out / "messages" if cfg.log_messages else None)
    save_checkpoints(hist.centers, out)
    (out / "history.csv").write_text(hist.to_csv())
    log.info("trained %s seed %d in %.1fs -> %s", cfg.method, cfg.seed, time.time() - t0, out)
    return hist


def _dump_pgms(cfg, centers, data, out: Path) -> None:
    def gray(probs):
        return np.round(255 * probs[..., 1, :, :]).astype(np.uint8)

    def image8(img):
        lo, hi = img.min(), img.max()
        return np.round(255 * (img - lo) / (hi - lo if hi > lo else 1)).astype(np.uint8)

    dim = cfg.net.latent_dim
    c0 = centers[0]
    sets = [("generic", c0, data.generic)] + [(f"center{c.center_id}", c, data.centers[i].test)
                                               for i, c in enumerate(centers)]
    for name, c, samples in sets:
        folder = out / "pgm" / name
        folder.mkdir(parents=True, exist_ok=True)
        images = np.stack([s.image for s in samples])
        noise = latent_noise(cfg.seed, [s.case_id for s in samples], cfg.eval_samples, dim)
        g = predict_global(c.theta_s, c.psi, images, cfg.eval_samples, noise, cfg.eval_latent)
        loc = predict_local(c.theta_s, c.psi, c.theta_p, c.da_mode, images, cfg.eval_samples, noise,
                            cfg.eval_latent)
        for s, gp, lp in zip(samples, g, loc):
            stem = folder / f"case{s.case_id:05d}"
            write_pgm(Path(f"{stem}_image.pgm"), image8(s.image[0]))
            write_pgm(Path(f"{stem}_gt.pgm"), s.label * 255)
            write_pgm(Path(f"{stem}_global.pgm"), to_mask(gp) * 255)
            write_pgm(Path(f"{stem}_local.pgm"), to_mask(lp) * 255)
            write_pgm(Path(f"{stem}_global_prob.pgm"), gray(gp))


def cmd_eval(cfg: ExperimentConfig, run_root: Path, data_root: Path, out: Path, dump_pgm: bool = False):
    _check_writable(out)
    data = _check_dataset(cfg, data_root)
    ids = [c.spec.center_id for c in data.centers]
    centers = load_checkpoints(cfg, run_root, ids)
    report = evaluate(cfg.method, centers, data, cfg.eval_samples, cfg.eval_latent, cfg.seed, config_digest(cfg))
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.csv").write_text(report.to_csv())
    (out / "report.json").write_text(report.to_json())
    if dump_pgm:
        _dump_pgms(cfg, centers, data, out)
    return report


def _history_series(path: Path):
    loss = defaultdict(lambda: defaultdict(list))
    dice = defaultdict(list)
    with path.open() as fh:
        for row in csv.DictReader(fh):
            rnd, center = int(row["round"]), row["center"]
            if row["phase"] == "eval":
                dice[f"local c{center}"].append((rnd, float(row["local_dice"])))
                dice[f"generic c{center}"].append((rnd, float(row["generic_dice"])))
            elif row["loss"]:
                loss[f"c{center}"][rnd].append(float(row["loss"]))
    loss_series = {k: sorted((r, float(np.mean(v))) for r, v in d.items()) for k, d in sorted(loss.items())}
    return loss_series, dict(sorted(dice.items()))


def cmd_report(run_root: Path, out: Path) -> Path:
    from .svgplot import line_charts

    hist = run_root / "history.csv"
    if not hist.is_file():
        raise InputError(f"missing history {hist}")
    _check_writable(out)
    loss, dice = _history_series(hist)
    svg = line_charts([("mean training loss per center", loss), ("Dice (mean latent)", dice)])
    out.mkdir(parents=True, exist_ok=True)
    target = out / "history.svg"
    target.write_text(svg)
    return target


def cmd_selftest(seed: int = 0) -> bool:
    t0 = time.time()
    ok = True
    for r in checks.run_all(seed):
        print(r.line(), flush=True)
        ok &= r.passed
    print(f"{'all checks passed' if ok else 'SELFTEST FAILED'} in {time.time() - t0:.1f}s")
    return ok


# ---------------------------------------------------------------------------
# argument parsing

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="decoupled-swarm", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--config", help="YAML config file (defaults apply for missing keys)")
        sp.add_argument("--seed", type=int, help="override the config seed")
        sp.add_argument("--out", help=out_help)

    sp = sub.add_parser("gen-data", help="write the synthetic multi-center dataset")
    common(sp, "dataset directory (default: <out_dir>/data)")

    sp = sub.add_parser("train", help="train one method over the simulated swarm")
    common(sp, "run directory (default: <out_dir>/<method>_seed<seed>)")
    sp.add_argument("--method", help="ours | swarm_plain | single | fixed_adapt | img_adapt")
    sp.add_argument("--rounds", type=int, help="override schedule.rounds")
    sp.add_argument("--jobs", type=int, help="parallel center training processes")
    sp.add_argument("--log-messages", action="store_true", help="write every round message to <run>/messages")
    sp.add_argument("--data", help="dataset directory (default: <out_dir>/data)")

    sp = sub.add_parser("eval", help="score saved checkpoints on Task1 and Task2")
    sp.add_argument("--run", required=True, help="run directory holding config.yaml and checkpoints")
    sp.add_argument("--data", help="dataset directory (default: <out_dir>/data)")
    sp.add_argument("--out", help="report directory (default: the run directory)")
    sp.add_argument("--samples", type=int, help="prior samples per prediction")
    sp.add_argument("--latent", choices=("sample", "mean"), help="prior sampling or mean latent")
    sp.add_argument("--dump-pgm", action="store_true", help="also write image/gt/prediction PGMs per case")

    sp = sub.add_parser("report", help="SVG chart of a run's history.csv")
    sp.add_argument("--run", required=True)
    sp.add_argument("--out", help="output directory (default: the run directory)")

    sp = sub.add_parser("selftest", help="gradient, KL, loss-limit, aggregation and morphology checks")
    sp.add_argument("--seed", type=int, default=0)
    return p


def _eval_config(args) -> ExperimentConfig:
    run_root = Path(args.run)
    cfg_path = run_root / "config.yaml"
    if not cfg_path.is_file():
        raise InputError(f"missing run config {cfg_path}")
    try:
        raw = yaml.safe_load(cfg_path.read_text()) or {}
    except yaml.YAMLError as err:
        raise ConfigError(f"{cfg_path}: {err}") from None
    if args.samples is not None:
        raw["eval_samples"] = args.samples
    if args.latent is not None:
        raw["eval_latent"] = args.latent
    return config_from_dict(raw)


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        if args.command == "selftest":
            return EXIT_OK if cmd_selftest(args.seed) else EXIT_SELFTEST
        if args.command == "report":
            target = cmd_report(Path(args.run), Path(args.out or args.run))
            print(target)
            return EXIT_OK
        if args.command == "eval":
            cfg = _eval_config(args)
            report = cmd_eval(cfg, Path(args.run), data_dir(cfg, args.data), Path(args.out or args.run),
                              args.dump_pgm)
            sys.stdout.write(report.to_csv())
            return EXIT_OK
        cfg = _resolve(args)
        if args.command == "gen-data":
            print(cmd_gen_data(cfg, data_dir(cfg, args.out)))
        elif args.command == "train":
            out = run_dir(cfg, args.out)
            cmd_train(cfg, data_dir(cfg, args.data), out)
            print(out)
        return EXIT_OK
    except (ConfigError, InputError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except (TrainingError, ProtocolError, NonFiniteError, OSError) as err:
        print(f"runtime error: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
