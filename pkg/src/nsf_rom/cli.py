"""Command line entry point: ``nsf-rom <command> ...``.

Commands: ``simulate``, ``generate``, ``train``, ``deploy``, ``eval`` and
``bench``. Exit status is 0 on success, 1 on usage or input errors and 2 on
numerical failures.
"""
from __future__ import annotations

import argparse
import json
import logging
import shutil
import sys
from pathlib import Path

from . import checkpoint as ckpt
from .dataset import dataset_bytes, read_dataset
from .exceptions import (
    DependencyError,
    FormatError,
    NSFError,
    NumericError,
    OutOfDomainError,
    TrainingDivergedError,
    UndefinedMetricError,
)
from .fields import NeuralAffineField, NeuralDeformationField, NeuralStressField
from .metrics import benchmark, relative_error
from .rom import InversionConfig, NeuralFields, OracleFields, bootstrap, min_samples, rollout, select_sample_particles
from .scenes import SceneConfig, build_scene, simulate

log = logging.getLogger("nsf_rom")

EXIT_USAGE = 1
EXIT_NUMERIC = 2
NUMERIC_ERRORS = (NumericError, TrainingDivergedError, OutOfDomainError, UndefinedMetricError, FloatingPointError)

TRAIN_DEFAULTS = dict(
    latent_dim=4,
    g_width=24,
    h_width=36,
    l_width=36,
    encoder_hidden=32,
    hidden_layers=5,
    epoch_scale=1.0,
    frame_stride=1,
    batch_frames=32,
    mu_conditioning=False,
    seed=0,
)
DEPLOY_DEFAULTS = dict(samples=50, dt_mult=1.0, sample_seed=0)


class UsageError(NSFError):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _write(path, data: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(data)


def _dataset_name(cfg: SceneConfig, mu) -> str:
    return f"{cfg.name}_mu{mu:g}.nsfd"


# --- manifest ------------------------------------------------------------------------


def load_manifest(directory):
    path = Path(directory) / "manifest.json"
    if not path.exists():
        raise DependencyError(f"{path} not found; run `generate` first")
    man = json.loads(path.read_text())
    train = {e["mu"] for e in man["train"]}
    test = {e["mu"] for e in man["test"]}
    if train & test:
        raise FormatError(f"manifest train and test sets overlap: {sorted(train & test)}")
    return man


# --- commands ------------------------------------------------------------------------


def cmd_simulate(args):
    cfg = SceneConfig.load(args.scene)
    ds = simulate(cfg, args.mu, frames=args.frames)
    _write(args.out, dataset_bytes(ds))
    print(f"wrote {ds.n_frames} frames of {ds.n_points} particles to {args.out}")


def cmd_generate(args):
    cfg = SceneConfig.load(args.scene)
    train, test = cfg.split()
    if not train:
        raise UsageError("scene sweep lists no training values")
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    entries = {"train": [], "test": []}
    try:
        for split, values in (("train", train), ("test", test)):
            for mu in values:
                ds = simulate(cfg, mu, frames=args.frames)
                name = _dataset_name(cfg, mu)
                _write(out / name, dataset_bytes(ds))
                written.append(out / name)
                entries[split].append({"mu": mu, "file": name})
                print(f"{split}: {cfg.parameter}={mu:g} -> {name}")
    except Exception:
        for path in written:
            path.unlink(missing_ok=True)
        raise
    shutil.copyfile(args.scene, out / "scene.toml")
    manifest = {"scene": "scene.toml", "parameter": cfg.parameter, **entries}
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")


def _train_settings(cfg: SceneConfig, args):
    s = {**TRAIN_DEFAULTS, **cfg.train}
    for key in ("latent_dim", "epoch_scale", "frame_stride", "seed"):
        v = getattr(args, key, None)
        if v is not None:
            s[key] = v
    return s


def _load_deformation(ckdir):
    g_path, e_path = Path(ckdir) / ckpt.FIELD_FILES["g"], Path(ckdir) / ckpt.FIELD_FILES["e"]
    if not (g_path.exists() and e_path.exists()):
        raise DependencyError(f"deformation field checkpoints (g.nsf, e.nsf) missing in {ckdir}; train --field g first")
    return ckpt.deformation_from_records(ckpt.parse_record(g_path.read_bytes()), ckpt.parse_record(e_path.read_bytes()))


def cmd_train(args):
    data_dir = Path(args.dataset_dir)
    man = load_manifest(data_dir)
    cfg = SceneConfig.load(data_dir / man["scene"])
    s = _train_settings(cfg, args)
    out = Path(args.out)
    fields = ["g", "h", "l"] if args.field == "all" else [args.field]
    if fields[0] != "g":
        g = _load_deformation(out)
    datasets = [read_dataset(data_dir / e["file"]) for e in man["train"]]
    common = dict(
        latent_dim=s["latent_dim"],
        hidden_layers=s["hidden_layers"],
        epoch_scale=s["epoch_scale"],
        frame_stride=s["frame_stride"],
        batch_frames=s["batch_frames"],
        seed=s["seed"],
        verbose=args.verbose,
    )
    out.mkdir(parents=True, exist_ok=True)
    if "g" in fields:
        g = NeuralDeformationField(width=s["g_width"], encoder_hidden=s["encoder_hidden"], **common).fit(datasets)
        g_rec, e_rec = ckpt.deformation_records(g)
        _write(out / ckpt.FIELD_FILES["g"], ckpt.record_bytes(g_rec))
        _write(out / ckpt.FIELD_FILES["e"], ckpt.record_bytes(e_rec))
        print(f"deformation field: train mse {g.train_mse_:.3e}")
    latents = [g.encode(ds.positions) for ds in datasets]
    for kind, cls, width in (("h", NeuralStressField, s["h_width"]), ("l", NeuralAffineField, s["l_width"])):
        if kind in fields:
            est = cls(width=width, mu_conditioning=s["mu_conditioning"], **common).fit(datasets, latents)
            _write(out / ckpt.FIELD_FILES[kind], ckpt.record_bytes(ckpt.regressor_record(est)))
            print(f"{est._label} field: train mse {est.train_mse_:.3e}")
    shutil.copyfile(data_dir / man["scene"], out / "scene.toml")


def load_fields(ckdir, mu=None):
    ckdir = Path(ckdir)
    g = _load_deformation(ckdir)
    regs = {}
    for kind in ("h", "l"):
        path = ckdir / ckpt.FIELD_FILES[kind]
        if not path.exists():
            raise DependencyError(f"{path} missing; train --field {kind} first")
        regs[kind] = ckpt.regressor_from_record(ckpt.parse_record(path.read_bytes()))
    return g, regs["h"], regs["l"]


def _deploy_setup(args):
    ckdir = Path(args.ckpt)
    cfg = SceneConfig.load(ckdir / "scene.toml")
    d = {**DEPLOY_DEFAULTS, **cfg.deploy}
    samples = args.samples if args.samples is not None else d["samples"]
    dt_mult = args.dt_mult if args.dt_mult is not None else d["dt_mult"]
    g, h, l = load_fields(ckdir)
    if samples < min_samples(g.latent_dim):
        raise UsageError(
            f"--samples {samples} is below ceil(r/3) = {min_samples(g.latent_dim)} for r = {g.latent_dim}; the latent cannot be recovered"
        )
    ps, grid, sim = build_scene(cfg, args.mu)
    sim.dt *= dt_mult
    fields = NeuralFields(g, h, l, mu=(args.mu,)).with_reference(ps.X)
    S = select_sample_particles(len(ps), samples, seed=args.seed if args.seed is not None else d["sample_seed"], latent_dim=g.latent_dim)
    z0, zp = bootstrap(fields, ps.x, ps.v, S, sim.dt)
    n_params = g.theta_.size + h.theta_.size + l.theta_.size
    return cfg, ps, grid, sim, fields, S, z0, zp, n_params


def cmd_deploy(args):
    cfg, ps, grid, sim, fields, S, z0, zp, _ = _deploy_setup(args)
    steps = args.steps if args.steps is not None else cfg.frames - 1
    res = rollout(fields, ps, grid, sim, steps, S, z0, zp)
    n_flag = int(res.flags.sum())
    if n_flag:
        log.warning("%d of %d inversions stopped above tolerance (max residual %.2e)", n_flag, steps, res.residuals.max())
    ds = res.to_dataset(fields, mu=(args.mu,), dt=sim.dt, dx=grid.dx)
    _write(args.out, dataset_bytes(ds))
    if args.latents:
        _write(args.latents, ckpt.latents_bytes(res.latents))
    print(f"rollout: {steps} steps, |S|={len(S)}, mean |N|={res.n_integration.mean():.1f}, {res.timings['total']:.2f}s")


def cmd_eval(args):
    pred, truth = read_dataset(args.pred), read_dataset(args.truth)
    if pred.n_points != truth.n_points:
        raise UsageError(f"particle counts differ: {pred.n_points} vs {truth.n_points}")
    n = min(pred.n_frames, truth.n_frames)
    if pred.n_frames != truth.n_frames:
        log.warning("frame counts differ (%d vs %d); comparing the first %d", pred.n_frames, truth.n_frames, n)
    first = 1 if n > 1 else 0
    delta = relative_error(pred.positions[first:n], truth.positions[first:n])
    print(f"delta={delta:.6e}")


def cmd_bench(args):
    if args.oracle:
        truth = read_dataset(args.oracle)
        cfg = SceneConfig.load(args.scene)
        ps, grid, sim = build_scene(cfg, truth.mu[0] if truth.mu else None)
        fields = OracleFields(truth, initial_velocity=ps.v, dt=sim.dt)
        S = select_sample_particles(len(ps), args.samples or 10, seed=args.seed or 0)
        z0, zp = bootstrap(fields, ps.x, ps.v, S, sim.dt)
        n_params = 0
        truth_frames = truth.positions
    else:
        if args.mu is None:
            raise UsageError("bench needs --mu with --ckpt")
        cfg, ps, grid, sim, fields, S, z0, zp, n_params = _deploy_setup(args)
        truth_frames = read_dataset(args.truth).positions if args.truth else None
    steps = args.steps
    if truth_frames is not None:
        steps = min(steps, truth_frames.shape[0] - 1)
    report = benchmark(fields, ps, grid, sim, S, z0, zp, steps, args.trials, truth_frames, InversionConfig(), n_params)
    text = report.to_text()
    print(text, end="")
    if args.report:
        _write(args.report, text.encode())
    if args.kv:
        _write(args.kv, report.to_keyvalue().encode())


# --- parser ---------------------------------------------------------------------------


def build_parser():
    p = Parser(prog="nsf-rom", description="Neural-field reduced-order elastoplastic simulation")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    s = sub.add_parser("simulate", help="run the full-order solver for one parameter value")
    s.add_argument("--scene", required=True)
    s.add_argument("--mu", type=float, required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--frames", type=int)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("generate", help="simulate every train/test value and write a manifest")
    s.add_argument("--scene", required=True)
    s.add_argument("--out-dir", required=True)
    s.add_argument("--frames", type=int)
    s.set_defaults(func=cmd_generate)

    s = sub.add_parser("train", help="fit neural fields on a generated dataset directory")
    s.add_argument("--dataset-dir", required=True)
    s.add_argument("--field", choices=["g", "h", "l", "all"], default="all")
    s.add_argument("--out", required=True)
    s.add_argument("--latent-dim", type=int)
    s.add_argument("--epoch-scale", type=float)
    s.add_argument("--frame-stride", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    def rom_args(s):
        s.add_argument("--ckpt")
        s.add_argument("--mu", type=float)
        s.add_argument("--samples", type=int)
        s.add_argument("--steps", type=int)
        s.add_argument("--dt-mult", type=float)
        s.add_argument("--seed", type=int)

    s = sub.add_parser("deploy", help="roll out the reduced model")
    rom_args(s)
    s.add_argument("--out", required=True)
    s.add_argument("--latents")
    s.set_defaults(func=cmd_deploy)

    s = sub.add_parser("eval", help="print the relative deformation error of a rollout")
    s.add_argument("--pred", required=True)
    s.add_argument("--truth", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("bench", help="time full-order against reduced stepping")
    rom_args(s)
    s.add_argument("--truth")
    s.add_argument("--oracle", help="benchmark with stored frames instead of networks")
    s.add_argument("--scene", help="scene file for --oracle")
    s.add_argument("--trials", type=int, default=10)
    s.add_argument("--report")
    s.add_argument("--kv")
    s.set_defaults(func=cmd_bench, steps=None)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if args.command in ("deploy", "bench"):
        if args.command == "deploy" and (args.ckpt is None or args.mu is None):
            parser.error("deploy requires --ckpt and --mu")
        if args.command == "bench":
            if args.steps is None:
                args.steps = 100
            if args.oracle is None and args.ckpt is None:
                parser.error("bench requires --ckpt or --oracle")
            if args.oracle is not None and args.scene is None:
                parser.error("--oracle requires --scene")
    try:
        args.func(args)
    except NUMERIC_ERRORS as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (NSFError, ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    return 0


if __name__ == "__main__":
    sys.exit(main())
