"""Command-line experiment runner: ``crisp <command> --config cfg.json ...``.

Exit codes: 0 success, 1 numerical failure (also flagged per row), 2 config error.
"""

from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import sdf
from .certification import CertificateConfig, degeneracy_report, oc_certificate
from .corrector import CorrectorConfig, bcd_correct, lsq_correct
from .geometry import DegenerateConfiguration, adds_auc, arun_fit
from .selftrain import BiasedOracleEstimator, self_train_epoch
from .shapes import basis_from_config, build_F_matrix, decoder_from_dict
from .simulator import (
    PerturbationModel,
    SceneConfig,
    evaluate_pose_code,
    load_scene,
    make_scene,
    save_scene,
    synth_estimates,
)

log = logging.getLogger("crisp")

EXIT_OK, EXIT_NUMERIC, EXIT_CONFIG = 0, 1, 2


class ConfigError(ValueError):
    pass


DEFAULTS: dict = {
    "scene": asdict(SceneConfig()),
    "n_objects": 10,
    "basis": {"kind": "asymmetric", "K": 4},
    "decoder": {"kind": "linear"},
    "perturbation": asdict(PerturbationModel()),
    "corrector": asdict(CorrectorConfig()),
    "certificate": asdict(CertificateConfig()),
    "selftrain": {
        "corrector": "bcd",
        "bias_rot_deg": 5.0,
        "bias_trans": 0.0,
        "bias_code": 0.15,
        "noise_sigma": 0.0,
        "lr_z": 3e-4,
        "lr_h": 3e-4,
        "accumulate_labels": False,
    },
    "report": {"timing": True},
    "degeneracy": {"restrict": "simplex", "threshold": None},
}


FREE_FORM = {"basis", "decoder"}


def _merge(defaults: dict, given: dict, path: str = "") -> dict:
    out = copy.deepcopy(defaults)
    for key, val in given.items():
        where = f"{path}{key}"
        if key not in defaults:
            raise ConfigError(f"unknown config key '{where}'")
        if isinstance(defaults[key], dict) and defaults[key] and key not in FREE_FORM:
            if not isinstance(val, dict):
                raise ConfigError(f"'{where}' must be an object")
            out[key] = _merge(defaults[key], val, where + ".")
        else:
            out[key] = val
    for key in defaults:
        if key not in given:
            log.info("config: '%s%s' missing, using default", path, key)
    return out


def load_config(path: str | None) -> dict:
    """Parse a JSON config, rejecting unknown keys and filling defaults."""
    if path is None:
        return copy.deepcopy(DEFAULTS)
    try:
        given = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(given, dict):
        raise ConfigError("config root must be a JSON object")
    return _merge(DEFAULTS, given)


def config_hash(cfg: dict, seed: int | None = None) -> str:
    blob = json.dumps({"config": cfg, "seed": seed}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _build(cls, block: dict, what: str):
    try:
        return cls(**block)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid '{what}' block: {exc}") from exc


def write_csv(path, header: list[str], rows: list[list], chash: str) -> None:
    buf = io.StringIO()
    buf.write(f"# config-hash: {chash}\r\n")
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(header)
    w.writerows(rows)
    Path(path).write_text(buf.getvalue(), newline="")


def _fmt(v) -> str:
    if isinstance(v, bool):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_gen_scene(cfg: dict, out: str, seed: int | None) -> int:
    scene_block = dict(cfg["scene"])
    if seed is not None:
        scene_block["seed"] = seed
    sc = _build(SceneConfig, scene_block, "scene")
    _build(PerturbationModel, cfg["perturbation"], "perturbation")
    try:
        basis = basis_from_config(cfg["basis"])
        decoder = decoder_from_dict(cfg["decoder"], basis)
    except (KeyError, ValueError, TypeError) as exc:
        raise ConfigError(f"invalid basis/decoder block: {exc}") from exc
    n_obj = int(cfg["n_objects"])
    if n_obj < 1:
        raise ConfigError("n_objects must be >= 1")
    try:
        objects = [make_scene(basis, decoder, sc, i) for i in range(n_obj)]
    except sdf.SurfaceNotFound as exc:
        log.error("scene generation failed: %s", exc)
        return EXIT_NUMERIC
    save_scene(out, objects, basis, decoder, sc, {"perturbation": cfg["perturbation"], "basis_config": cfg["basis"]})
    log.info("wrote %d objects to %s", n_obj, out)
    return EXIT_OK


RESULT_COLUMNS = [
    "object_id",
    "n_views",
    "status",
    "adds",
    "adds_init",
    "chamfer_l1",
    "chamfer_l2",
    "code_error",
    "rot_err_deg",
    "trans_err",
    "certified",
    "wall_time",
]


def _correct_object(args):
    frames, basis, decoder, solver, corr, cert, pm, timing = args
    oid = frames[0].object_id
    try:
        ests = [synth_estimates(f, pm) for f in frames]
        h_est = ests[0][1]
        buf = [(f.X, Z) for f, (Z, _) in zip(frames, ests)]
        init_pose = arun_fit(frames[0].X, ests[0][0])
        init = evaluate_pose_code(init_pose, h_est, frames[0], decoder)
        if solver == "bcd":
            res = bcd_correct(buf, h_est, decoder, corr)
        else:
            res = lsq_correct(buf, h_est, basis, decoder, corr)
        m = evaluate_pose_code(res.poses[0], res.code, frames[0], decoder)
        ok = oc_certificate(res.Z_hat, res.code, decoder, cert)
        if not np.all(np.isfinite(res.code)) or not np.isfinite(m.adds):
            raise FloatingPointError("non-finite corrector output")
    except (DegenerateConfiguration, sdf.SurfaceNotFound, FloatingPointError, np.linalg.LinAlgError) as exc:
        log.warning("object %d failed: %s", oid, exc)
        return [oid, len(frames), "failed"] + [""] * (len(RESULT_COLUMNS) - 3), False
    row = [oid, len(frames), "ok", m.adds, init.adds, m.chamfer_l1, m.chamfer_l2, m.code_error, m.rot_err_deg, m.trans_err, ok]
    row.append(res.wall_time if timing else "")
    return row, True


def _map(fn, items, jobs: int):
    if jobs <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def cmd_correct(cfg: dict, scene: str, solver: str, out: str, jobs: int = 1) -> int:
    corr = _build(CorrectorConfig, cfg["corrector"], "corrector")
    cert = _build(CertificateConfig, cfg["certificate"], "certificate")
    try:
        objects, basis, decoder, doc = load_scene(scene)
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot load scene '{scene}': {exc}") from exc
    pm = _build(PerturbationModel, doc.get("perturbation", cfg["perturbation"]), "perturbation")
    items = [(frames, basis, decoder, solver, corr, cert, pm, bool(cfg["report"]["timing"])) for frames in objects]
    results = _map(_correct_object, items, jobs)
    rows = [[_fmt(v) for v in r] for r, _ in results]
    write_csv(out, RESULT_COLUMNS, rows, config_hash(cfg, doc["config"]["seed"]))
    n_fail = sum(not ok for _, ok in results)
    log.info("%s: %d objects, %d failed", solver, len(results), n_fail)
    adds = [float(r[3]) for r, ok in results if ok]
    if adds:
        log.info("ADD-S AUC@0.1: corrected %.4f", adds_auc(adds, 0.1))
    return EXIT_NUMERIC if n_fail else EXIT_OK


def cmd_selftrain(cfg: dict, scene: str, epochs: int, out: str, seed: int | None) -> int:
    st = cfg["selftrain"]
    unknown = set(st) - set(DEFAULTS["selftrain"])
    if unknown:
        raise ConfigError(f"unknown selftrain keys {sorted(unknown)}")
    if st["corrector"] not in ("bcd", "lsq", "none"):
        raise ConfigError("selftrain.corrector must be bcd, lsq or none")
    if epochs < 1:
        raise ConfigError("--epochs must be >= 1")
    corr = _build(CorrectorConfig, cfg["corrector"], "corrector")
    cert = _build(CertificateConfig, cfg["certificate"], "certificate")
    try:
        objects, basis, decoder, doc = load_scene(scene)
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot load scene '{scene}': {exc}") from exc
    s = doc["config"]["seed"] if seed is None else seed
    rng = np.random.default_rng([s, 7])
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    tdir = rng.normal(size=3)
    tdir /= np.linalg.norm(tdir)
    b = rng.normal(size=basis.K)
    b -= b.mean()
    nb = np.linalg.norm(b)
    b = st["bias_code"] * b / nb if nb > 0 else b
    est = BiasedOracleEstimator(
        np.radians(st["bias_rot_deg"]) * axis, st["bias_trans"] * tdir, b, noise_sigma=st["noise_sigma"], seed=s
    )
    pool = {} if st["accumulate_labels"] else None
    rows = []
    try:
        for e in range(1, epochs + 1):
            stats = self_train_epoch(
                est, objects, st["corrector"], decoder, basis, cert, st["lr_z"], st["lr_h"], corr, epoch=e, label_pool=pool
            )
            rows.append([stats.epoch, stats.certified_fraction, stats.mean_Lh, stats.mean_Lz, stats.bias_norm])
            log.info("epoch %d: certified %.3f bias %.4g", e, stats.certified_fraction, stats.bias_norm)
    except (DegenerateConfiguration, sdf.SurfaceNotFound, np.linalg.LinAlgError) as exc:
        log.error("self-training failed: %s", exc)
        return EXIT_NUMERIC
    header = ["epoch", "certified_fraction", "mean_Lh", "mean_Lz", "bias_norm"]
    write_csv(out, header, [[_fmt(v) for v in r] for r in rows], config_hash(cfg, s))
    return EXIT_OK


def cmd_degeneracy_sweep(cfg: dict, scene: str, out: str) -> int:
    """Smallest Gram eigenvalue of the basis columns as views accumulate.

    By default the Gram matrix is restricted to the simplex tangent space so
    that the value measures uniqueness of the recovered coefficients.
    """
    try:
        objects, basis, decoder, doc = load_scene(scene)
    except (OSError, KeyError, ValueError) as exc:
        raise ConfigError(f"cannot load scene '{scene}': {exc}") from exc
    block = cfg["degeneracy"]
    threshold, restrict = block["threshold"], block["restrict"]
    if restrict not in ("none", "simplex"):
        raise ConfigError("degeneracy.restrict must be 'none' or 'simplex'")
    rows = []
    for frames in objects:
        Zs = []
        for f in frames:
            Zs.append(f.gt_Z[f.inlier_mask])
            rep = degeneracy_report(build_F_matrix(np.concatenate(Zs), basis), threshold, restrict)
            rows.append([frames[0].object_id, len(Zs), rep.lambda_min, rep.gram_condition, rep.is_degenerate])
    header = ["object_id", "n_frames", "lambda_min", "condition", "degenerate"]
    write_csv(out, header, [[_fmt(v) for v in r] for r in rows], config_hash(cfg, doc["config"]["seed"]))
    return EXIT_OK


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="crisp", description="Pose and shape correction experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-scene", help="generate a synthetic scene directory")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int)

    c = sub.add_parser("correct", help="correct every object of a scene, write results.csv")
    c.add_argument("--scene", required=True)
    c.add_argument("--solver", choices=["bcd", "lsq"], default="bcd")
    c.add_argument("--config")
    c.add_argument("--out")
    c.add_argument("--jobs", type=int, default=1)

    s = sub.add_parser("selftrain", help="run correct-and-certify self-training")
    s.add_argument("--scene", required=True)
    s.add_argument("--epochs", type=int, default=5)
    s.add_argument("--config")
    s.add_argument("--out")
    s.add_argument("--seed", type=int)

    d = sub.add_parser("degeneracy-sweep", help="smallest Gram eigenvalue versus number of views")
    d.add_argument("--scene", required=True)
    d.add_argument("--config")
    d.add_argument("--out")
    return p


def _setup_logging() -> None:
    level = os.environ.get("CRISP_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    logging.basicConfig(level=levels.get(level, logging.ERROR), format="%(levelname)s %(name)s: %(message)s")


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        cfg = load_config(args.config)
        if args.command == "gen-scene":
            return cmd_gen_scene(cfg, args.out, args.seed)
        default_out = {"correct": "results.csv", "selftrain": "epoch_stats.csv", "degeneracy-sweep": "degeneracy.csv"}
        out = args.out or str(Path(args.scene) / default_out[args.command])
        if args.command == "correct":
            return cmd_correct(cfg, args.scene, args.solver, out, args.jobs)
        if args.command == "selftrain":
            return cmd_selftrain(cfg, args.scene, args.epochs, out, args.seed)
        return cmd_degeneracy_sweep(cfg, args.scene, out)
    except ConfigError as exc:
        print(f"crisp: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
