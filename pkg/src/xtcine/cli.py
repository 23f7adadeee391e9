"""Command-line driver: data generation, training, reconstruction,
homology curves and the rotation / limited-data experiments.

Every artefact is written below ``--out``; identical configs and seeds
give bit-identical files. Timings go to the log only.
"""
from __future__ import annotations

import argparse
import logging
import math
import sys
import time
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import io
from .experiments import Profile, get_profile, make_subject
from .homology import MANIFOLDS, averaged_betti_curve, r_grid
from .metrics import MetricReport, evaluate_volume, frames, st_slices
from .nn import load_checkpoint, save_checkpoint
from .phantom import save_spec
from .radial import save_kspace, save_trajectory
from .slicing import MODES, DatasetSpec, build_dataset, expected_count, save_dataset
from .training import (DOMAINS, LossTrace, TrainConfig, default_train_config, predict_volume,
                       select_labels, train)

log = logging.getLogger("xtcine")

EXIT_CONFIG, EXIT_NUMERIC = 2, 3
DEFAULT_ANGLES = (0.0, 33.0, -33.0, 66.0, -66.0)
COMPOSITES = (0.0, 90.0, -90.0, 180.0)


class ConfigError(ValueError):
    pass


def _as_floats(text) -> tuple[float, ...]:
    return tuple(float(v) for v in str(text).split(",") if v.strip())


def _as_ints(text) -> tuple[int, ...]:
    return tuple(int(v) for v in str(text).split(",") if v.strip())


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a subcommand needs. Subjects ``0 .. n_subjects - 1`` are
    for training, the next ``n_test`` are held out."""
    profile: str = "desk"
    seed: int = 0
    n_subjects: int = 4
    n_slices: int = 1
    n_test: int = 1
    train: TrainConfig = field(default_factory=TrainConfig)
    repeats: int = 10
    angles: tuple[float, ...] = DEFAULT_ANGLES
    n_list: tuple[int, ...] = (1, 2, 4)
    checkpoint_every: int = 0
    out: Path = Path("out")

    def __post_init__(self):
        get_profile(self.profile)
        if self.n_subjects < 1 or self.n_slices < 1 or self.n_test < 0:
            raise ConfigError("need n_subjects >= 1, n_slices >= 1, n_test >= 0")
        if self.repeats < 1:
            raise ConfigError("repeats must be >= 1")
        if any(n < 1 for n in self.n_list):
            raise ConfigError("n_list entries must be >= 1")

    @property
    def geometry(self) -> Profile:
        return get_profile(self.profile)

    @property
    def subjects(self) -> range:
        return range(self.n_subjects + self.n_test)

    def to_kv(self) -> dict[str, str]:
        kv = {"profile": self.profile, "seed": str(self.seed), "subjects": str(self.n_subjects),
              "slices": str(self.n_slices), "test_subjects": str(self.n_test),
              "repeats": str(self.repeats), "angles": ",".join(map(repr, self.angles)),
              "n_list": ",".join(map(str, self.n_list)), "checkpoint_every": str(self.checkpoint_every)}
        kv.update(self.train.to_kv())
        return kv


_EXPERIMENT_KEYS = {"profile": str, "seed": int, "subjects": int, "slices": int, "test_subjects": int,
                    "repeats": int, "angles": _as_floats, "n_list": _as_ints, "checkpoint_every": int}
_RENAMED = {"subjects": "n_subjects", "slices": "n_slices", "test_subjects": "n_test"}


def build_config(values: dict[str, str], out, profile: str | None = None, seed: int | None = None) -> ExperimentConfig:
    """Combine a flat key-value mapping with command-line overrides.

    Training keys not given fall back to the per-domain defaults of the
    chosen profile.
    """
    train_types = {f.name: type(f.default) for f in fields(TrainConfig)}
    unknown = set(values) - set(_EXPERIMENT_KEYS) - set(train_types)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    try:
        exp = {_RENAMED.get(k, k): conv(values[k]) for k, conv in _EXPERIMENT_KEYS.items() if k in values}
        if profile is not None:
            exp["profile"] = profile
        if seed is not None:
            exp["seed"] = seed
        tr = {k: train_types[k](v) for k, v in values.items() if k in train_types}
        tr["seed"] = exp.get("seed", 0)
        domain = tr.pop("domain", "xt-yt")
        target = tr.pop("target", "image-learning")
        if domain not in DOMAINS:
            raise ConfigError(f"unknown domain {domain!r}")
        full = exp.get("profile", "desk") == "full"
        tcfg = default_train_config(domain, target, "full" if full else "desk", **tr)
        return ExperimentConfig(train=tcfg, out=Path(out), **exp)
    except ConfigError:
        raise
    except (ValueError, TypeError) as err:
        raise ConfigError(str(err)) from err


# -- on-disk layout ---------------------------------------------------------------

def _subject_dir(root: Path, subject: int, slice_: int) -> Path:
    return root / "subjects" / f"s{subject:03d}_z{slice_:02d}"


def _write_frame_pgm(path, volume, t=0, vmax=None):
    io.write_pgm16(path, volume[:, :, t], vmax)


def _read_data(data: Path):
    if not (data / "manifest.csv").is_file():
        raise ConfigError(f"{data}: no manifest.csv; run 'generate' first")
    return io.read_csv(data / "manifest.csv")


def load_volumes(data: Path, subjects) -> list[tuple[np.ndarray, np.ndarray]]:
    """(x_in, x) pairs for the given subjects, all slices, in manifest order."""
    wanted = set(subjects)
    pairs = []
    for row in _read_data(data):
        if int(row["subject"]) in wanted:
            d = data / row["path"]
            pairs.append((io.read_array(d / "x_in.xta"), io.read_array(d / "x.xta")))
    missing = wanted - {int(r["subject"]) for r in _read_data(data)}
    if missing:
        raise ConfigError(f"{data}: subjects {sorted(missing)} not generated")
    return pairs


# -- subcommands --------------------------------------------------------------------

def cmd_generate(cfg: ExperimentConfig) -> Path:
    """Simulate every subject/slice and write ground truth, k-space, the
    gridding reconstruction and the residual, plus a dataset export for the
    configured domain and a table of dataset sizes per mode."""
    out, prof = cfg.out, cfg.geometry
    out.mkdir(parents=True, exist_ok=True)
    rows, train_pairs = [], []
    for s in cfg.subjects:
        for z in range(cfg.n_slices):
            t0 = time.perf_counter()
            acq = make_subject(cfg.seed, s, z, prof)
            d = _subject_dir(out, s, z)
            d.mkdir(parents=True, exist_ok=True)
            save_spec(acq.spec, d / "phantom.cfg")
            io.write_array(d / "x.xta", acq.x)
            io.write_array(d / "x_in.xta", acq.x_in)
            io.write_array(d / "residual.xta", acq.residual)
            save_trajectory(acq.kspace.trajectory, d / "trajectory.xta")
            save_kspace(acq.kspace, d / "kspace.xta")
            vmax = float(acq.x.max())
            _write_frame_pgm(d / "x_t00.pgm", acq.x, vmax=vmax)
            _write_frame_pgm(d / "x_in_t00.pgm", acq.x_in, vmax=vmax)
            role = "train" if s < cfg.n_subjects else "test"
            rows.append((s, z, role, d.relative_to(out).as_posix()))
            if role == "train":
                train_pairs.append((acq.x_in, acq.x))
            log.info("generated subject %d slice %d in %.2f s", s, z, time.perf_counter() - t0)
    io.write_csv(out / "manifest.csv", ("subject", "slice", "role", "path"), rows)

    w, nt = prof.window, prof.n_phases
    spec = DatasetSpec(cfg.train.domain, crop=prof.crop, label_mode=select_labels(cfg.train))
    samples = build_dataset(train_pairs, spec,
                            [(s, z) for s in range(cfg.n_subjects) for z in range(cfg.n_slices)])
    save_dataset(samples, out / "dataset")
    counts = []
    for mode in MODES:
        c = expected_count(mode, cfg.n_subjects, cfg.n_slices, w, w, nt)
        counts.append((mode, cfg.n_subjects, cfg.n_slices, w, w, nt, c,
                       len(samples) if mode == cfg.train.domain else ""))
    io.write_csv(out / "counts.csv", ("mode", "n", "nz", "nx", "ny", "nt", "expected", "exported"), counts)
    io.write_kv(out / "experiment.cfg", cfg.to_kv())
    return out


def _trace_until(trace: LossTrace, step: int) -> LossTrace:
    keep = [i for i, s in enumerate(trace.steps) if s < step]
    vkeep = [i for i, s in enumerate(trace.val_steps) if s < step]
    return LossTrace([trace.steps[i] for i in keep], [trace.lrs[i] for i in keep],
                     [trace.train[i] for i in keep], [trace.val_steps[i] for i in vkeep],
                     [trace.val[i] for i in vkeep])


def _save_model(net, tcfg: TrainConfig, path: Path, step: int):
    save_checkpoint(net, path, {"step": float(step)})
    io.write_kv(path.with_suffix(".cfg"), tcfg.to_kv())


def load_model(path: Path):
    path = Path(path)
    side = path.with_suffix(".cfg")
    if not path.is_file() or not side.is_file():
        raise ConfigError(f"{path}: checkpoint or its .cfg sidecar is missing")
    tcfg = TrainConfig.from_kv(io.read_kv(side))
    net, extra = load_checkpoint(path, np.dtype(tcfg.dtype))
    return net, tcfg, int(extra.get("step", tcfg.total_backprops))


def cmd_train(cfg: ExperimentConfig, data: Path, resume: Path | None = None) -> Path:
    """Train on subjects ``0 .. n_subjects - 1`` (validation on the held-out
    ones) and write ``checkpoint.xtcn``, its ``.cfg`` sidecar and
    ``loss.csv``. ``resume`` continues from a stored step, schedule included."""
    prof, out = cfg.geometry, cfg.out
    pairs = load_volumes(data, range(cfg.n_subjects))
    tcfg = replace(cfg.train, n_phases=pairs[0][0].shape[2])
    spec = DatasetSpec(tcfg.domain, crop=prof.crop, label_mode=select_labels(tcfg))
    dataset = build_dataset(pairs, spec)
    val_pairs = load_volumes(data, range(cfg.n_subjects, cfg.n_subjects + cfg.n_test)) if cfg.n_test else []
    val = build_dataset(val_pairs, spec) if val_pairs else None

    net, trace, step = None, LossTrace(), 0
    if resume is not None:
        net, stored, step = load_model(resume)
        if stored.to_kv() != tcfg.to_kv():
            raise ConfigError(f"{resume}: stored training config differs from the requested one")
        loss_csv = Path(resume).parent / "loss.csv"
        trace = _trace_until(LossTrace.from_csv(loss_csv), step) if loss_csv.is_file() else LossTrace()
        log.info("resuming at step %d (lr %.3g)", step, trace.lrs[-1] if trace.lrs else tcfg.lr_start)

    out.mkdir(parents=True, exist_ok=True)
    every = cfg.checkpoint_every or tcfg.total_backprops
    t0 = time.perf_counter()
    while step < tcfg.total_backprops:
        stop = min(tcfg.total_backprops, (step // every + 1) * every)
        net, trace = train(dataset, val, tcfg, net, step, trace, stop_step=stop)
        step = stop
        if step < tcfg.total_backprops:
            _save_model(net, tcfg, out / f"checkpoint_step{step:06d}.xtcn", step)
            trace.to_csv(out / "loss.csv")
        log.info("step %d/%d, %.1f s", step, tcfg.total_backprops, time.perf_counter() - t0)
    path = out / "checkpoint.xtcn"
    _save_model(net, tcfg, path, step)
    trace.to_csv(out / "loss.csv")
    return path


def _report_rows(label, report: MetricReport):
    return [(label,) + tuple(repr(v) for v in report.row())]


def reconstruct_volume(net, tcfg: TrainConfig, x_in: np.ndarray, prof: Profile):
    t0 = time.perf_counter()
    est, coverage = predict_volume(net, x_in, tcfg, prof.window, prof.stride, return_coverage=True)
    log.info("reconstructed %s volume: %.3f s per slice", "x".join(map(str, x_in.shape)),
             time.perf_counter() - t0)
    return est, coverage


def cmd_reconstruct(cfg: ExperimentConfig, checkpoint: Path, volume: Path):
    """Estimate the clean volume for ``volume`` (a subject directory written
    by ``generate``) and score it against the stored ground truth."""
    prof, out = cfg.geometry, cfg.out
    net, tcfg, _ = load_model(checkpoint)
    if not (Path(volume) / "x_in.xta").is_file():
        raise ConfigError(f"{volume}: no x_in.xta")
    x_in = io.read_array(Path(volume) / "x_in.xta")
    est, coverage = reconstruct_volume(net, tcfg, x_in, prof)
    if not np.all(np.isfinite(est)):
        raise FloatingPointError("non-finite values in the reconstruction")
    out.mkdir(parents=True, exist_ok=True)
    io.write_array(out / "estimate.xta", est)
    io.write_array(out / "coverage.xta", coverage.astype(float))
    report = None
    truth = Path(volume) / "x.xta"
    vmax = float(x_in.max())
    if truth.is_file():
        x = io.read_array(truth)
        vmax = float(x.max())
        roi = (prof.roi, prof.roi)
        report = evaluate_volume(x, est, roi)
        rows = _report_rows("input", evaluate_volume(x, x_in, roi)) + _report_rows("estimate", report)
        io.write_csv(out / "metrics.csv", ("volume",) + MetricReport.HEADER, rows)
    _write_frame_pgm(out / "estimate_t00.pgm", est, vmax=vmax)
    return out / "estimate.xta", report


def homology_images(pairs):
    """Image and residual 2D slices per domain from (x_in, x) pairs."""
    imgs = {m: [] for m in MANIFOLDS}
    for x_in, x in pairs:
        r = x_in - x
        imgs["M_xy_img"] += frames(x)
        imgs["M_xy_res"] += frames(r)
        imgs["M_xtyt_img"] += st_slices(x)
        imgs["M_xtyt_res"] += st_slices(r)
    return imgs


def homology_curves(pairs, prof: Profile, repeats: int, seed: int, manifolds=MANIFOLDS):
    radii = r_grid()
    imgs = homology_images(pairs)
    curves = {}
    for i, m in enumerate(manifolds):
        if m not in imgs:
            raise ConfigError(f"unknown manifold {m!r}; choose from {MANIFOLDS}")
        curves[m] = averaged_betti_curve(imgs[m], repeats, prof.patch_count, prof.patch_size, radii,
                                         seed=int(np.random.SeedSequence([seed, i]).generate_state(1)[0]))
    return radii, curves


def cmd_homology(cfg: ExperimentConfig, data: Path, manifolds=MANIFOLDS) -> Path:
    """Averaged beta_0 curves of image and residual patch clouds in the xy
    and xt/yt domains, one CSV column per manifold."""
    pairs = load_volumes(data, range(cfg.n_subjects))
    radii, curves = homology_curves(pairs, cfg.geometry, cfg.repeats, cfg.seed, manifolds)
    cfg.out.mkdir(parents=True, exist_ok=True)
    path = cfg.out / "betti0.csv"
    rows = [(repr(float(r)),) + tuple(repr(float(curves[m][i])) for m in manifolds) for i, r in enumerate(radii)]
    io.write_csv(path, ("r",) + tuple(manifolds), rows)
    return path


def rotation_angles(angles) -> list[float]:
    """Each base angle combined with the 0, +-90 and 180 degree composites,
    without repeats, in a fixed order."""
    seen = []
    for phi in COMPOSITES:
        for theta in angles:
            a = theta + phi
            a = (a + 180.0) % 360.0 - 180.0 if a != 180.0 else a
            if a not in seen:
                seen.append(a)
    return seen


def cmd_rotation_experiment(cfg: ExperimentConfig, checkpoints, angles=None) -> Path:
    """Regenerate the first held-out subject under rotated scene and
    trajectory, reconstruct with each checkpoint and record metrics per angle."""
    if cfg.n_test < 1:
        raise ConfigError("the rotation experiment needs a held-out subject (test_subjects >= 1)")
    prof = cfg.geometry
    models = [(Path(c).parent.name or str(c),) + load_model(c)[:2] for c in checkpoints]
    subject = cfg.n_subjects
    rows = []
    for deg in rotation_angles(cfg.angles if angles is None else angles):
        acq = make_subject(cfg.seed, subject, 0, prof, math.radians(deg))
        roi = (prof.roi, prof.roi)
        base = evaluate_volume(acq.x, acq.x_in, roi)
        rows.append(("input", repr(deg)) + tuple(repr(v) for v in base.row()))
        for name, net, tcfg in models:
            est, _ = reconstruct_volume(net, tcfg, acq.x_in, prof)
            rep = evaluate_volume(acq.x, est, roi)
            rows.append((name, repr(deg)) + tuple(repr(v) for v in rep.row()))
    cfg.out.mkdir(parents=True, exist_ok=True)
    path = cfg.out / "rotation.csv"
    io.write_csv(path, ("model", "angle_deg") + MetricReport.HEADER, rows)
    return path


def cmd_limited_data(cfg: ExperimentConfig, data: Path, n_list=None) -> Path:
    """Train one model per subject count and score each on the first
    held-out subject."""
    if cfg.n_test < 1:
        raise ConfigError("the limited-data experiment needs a held-out subject (test_subjects >= 1)")
    n_list = tuple(cfg.n_list if n_list is None else n_list)
    if max(n_list) > cfg.n_subjects:
        raise ConfigError(f"n_list {n_list} exceeds the {cfg.n_subjects} training subjects")
    test_dir = data / _subject_dir(Path(), cfg.n_subjects, 0)
    rows = []
    for n in n_list:
        sub = replace(cfg, n_subjects=n, n_test=0, out=cfg.out / f"n{n:02d}")
        ckpt = cmd_train(sub, data)
        _, report = cmd_reconstruct(sub, ckpt, test_dir)
        rows.append((n,) + tuple(repr(v) for v in report.row()))
        io.write_csv(cfg.out / "limited_data.csv", ("n",) + MetricReport.HEADER, rows)
    return cfg.out / "limited_data.csv"


# -- argument parsing -----------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat key = value experiment config")
    common.add_argument("--profile", choices=("desk", "full"))
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, required=True)
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="xtcine", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("generate", parents=[common], help="simulate phantoms, k-space and reconstructions")
    t = sub.add_parser("train", parents=[common], help="train a U-net on generated data")
    t.add_argument("--data", type=Path, required=True)
    t.add_argument("--resume", type=Path)
    r = sub.add_parser("reconstruct", parents=[common], help="apply a checkpoint to one volume")
    r.add_argument("--checkpoint", type=Path, required=True)
    r.add_argument("--volume", type=Path, required=True, help="subject directory written by generate")
    h = sub.add_parser("homology", parents=[common], help="beta_0 curves of patch manifolds")
    h.add_argument("--data", type=Path, required=True)
    h.add_argument("--manifolds", default=",".join(MANIFOLDS))
    ro = sub.add_parser("rotation", parents=[common], help="metrics versus rotation angle")
    ro.add_argument("--checkpoints", type=Path, nargs="+", required=True)
    ro.add_argument("--angles", help="comma-separated base angles in degrees")
    ld = sub.add_parser("limited-data", parents=[common], help="metrics versus training subject count")
    ld.add_argument("--data", type=Path, required=True)
    ld.add_argument("--n-list", help="comma-separated subject counts")
    return p


def _require_inputs(*inputs):
    for path in inputs:
        if path is not None and not Path(path).exists():
            raise ConfigError(f"{path} does not exist")


def run(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            _dispatch(args)
    except (FloatingPointError, np.linalg.LinAlgError) as err:
        log.error("numerical failure: %s", err)
        return EXIT_NUMERIC
    except (ConfigError, ValueError, FileNotFoundError, KeyError) as err:
        log.error("configuration error: %s", err)
        return EXIT_CONFIG
    return 0


def _dispatch(args):
    values = io.read_kv(args.config) if args.config else {}
    cfg = build_config(values, args.out, args.profile, args.seed)
    if args.command == "generate":
        cmd_generate(cfg)
    elif args.command == "train":
        _require_inputs(args.data, args.resume)
        cmd_train(cfg, args.data, args.resume)
    elif args.command == "reconstruct":
        _require_inputs(args.checkpoint, args.volume)
        _, report = cmd_reconstruct(cfg, args.checkpoint, args.volume)
        if report is not None:
            print(" ".join(f"{k}={v:.4f}" for k, v in zip(MetricReport.HEADER, report.row())))
    elif args.command == "homology":
        _require_inputs(args.data)
        cmd_homology(cfg, args.data, tuple(m for m in args.manifolds.split(",") if m))
    elif args.command == "rotation":
        _require_inputs(*args.checkpoints)
        cmd_rotation_experiment(cfg, args.checkpoints, _as_floats(args.angles) if args.angles else None)
    elif args.command == "limited-data":
        _require_inputs(args.data)
        cmd_limited_data(cfg, args.data, _as_ints(args.n_list) if args.n_list else None)


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
