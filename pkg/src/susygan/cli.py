"""Command-line entry point: ``susygan synth|train|report|validate``.

Every command resolves a :class:`RunConfig` (defaults, then ``--config`` file,
then flags) and echoes it to ``<out>/config.txt`` so a run can be repeated with
``--config <out>/config.txt``.
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from dataclasses import dataclass, fields
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import analysis, dataset, gan
from .errors import (ConfigError, ContractError, FormatError, IllConditioned, InvalidArgument, NumericFault,
                     SusyGanError)
from .field_grid import BoxDomain, ComplexGrid, scalar_potential
from .nn import load_checkpoint, save_checkpoint

log = logging.getLogger("susygan")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_FORMAT = 5


def _tuple_of(kind):
    def parse(text):
        text = str(text).strip()
        return tuple(kind(t) for t in text.split(",")) if text else ()
    return parse


def _bool(text):
    t = str(text).strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class RunConfig:
    # data
    degree: int = 2
    coeff_range: float = 1.0
    box: float = 2.0
    grid: int = 64
    count: int = 10_000
    seed: int = 0
    # training
    batch: int = 256
    steps: int = 20_000
    lr: float = 2e-4
    decay: float = 6e-8
    noise_dim: int = 100
    snapshots: tuple = (100, 1000, 20_000)
    eval_noises: int = 16
    eval_every: int = 100
    disc_steps_per_gen_step: Fraction = Fraction(1)
    gen_lr_multiplier: float = 1.0
    disc_dropout_in_gen_step: bool = True
    disc_widths: tuple = (8, 16, 32, 64)
    gen_base_channels: int = 256
    gen_widths: tuple = (128, 64, 32)
    # analysis and output
    degrees: tuple = (2, 3, 5)
    prominence: float = analysis.DEFAULT_PROMINENCE
    report_count: int = 1000
    export_images: bool = False
    image_count: int = 4
    out: str = "run"

    def data_spec(self) -> dataset.PolynomialSpec:
        return dataset.PolynomialSpec(self.degree, self.coeff_range, BoxDomain(self.box, self.grid),
                                      self.count, self.seed)

    def train_config(self) -> gan.TrainConfig:
        return gan.TrainConfig(
            batch_size=self.batch, total_steps=self.steps, lr0=self.lr, decay=self.decay,
            noise_dim=self.noise_dim, snapshot_steps=self.snapshots, eval_noise_count=self.eval_noises,
            eval_every=self.eval_every, disc_steps_per_gen_step=self.disc_steps_per_gen_step,
            gen_lr_multiplier=self.gen_lr_multiplier, disc_dropout_in_gen_step=self.disc_dropout_in_gen_step,
            seed=self.seed, disc_widths=self.disc_widths, gen_base_channels=self.gen_base_channels,
            gen_widths=self.gen_widths)

    def validate(self) -> None:
        try:
            self.data_spec()
            self.train_config()
        except (InvalidArgument, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        if self.grid % 4:
            raise ConfigError("grid must be a multiple of 4 (the generator upsamples twice)")
        if self.report_count < 1 or self.image_count < 0 or self.prominence < 0 or not self.degrees:
            raise ConfigError("report_count >= 1, image_count >= 0, prominence >= 0 and degrees non-empty required")

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in fields(self))

    @classmethod
    def parse_value(cls, key: str, text: str):
        if key not in _PARSERS:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            return _PARSERS[key](text)
        except (TypeError, ValueError, ZeroDivisionError) as exc:
            raise ConfigError(f"bad value for {key}: {text!r} ({exc})") from exc

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        values = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {lineno}: expected key = value")
            key, val = (p.strip() for p in line.split("=", 1))
            values[key] = cls.parse_value(key, val)
        return (base or cls()).replace(**values)

    def replace(self, **changes) -> "RunConfig":
        d = {f.name: getattr(self, f.name) for f in fields(self)}
        d.update(changes)
        return RunConfig(**d)


_PARSERS = {
    f.name: {int: int, float: float, str: str, bool: _bool, Fraction: Fraction}.get(type(f.default))
    for f in fields(RunConfig)
}
_PARSERS.update(snapshots=_tuple_of(int), disc_widths=_tuple_of(int), gen_widths=_tuple_of(int),
                degrees=_tuple_of(int))


# --- helpers -------------------------------------------------------------------

def _out_dir(cfg: RunConfig) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(cfg.to_text())
    return out


def _load_training(cfg: RunConfig, path) -> dataset.Dataset:
    ds = dataset.load_dataset(path)
    box = ds.spec.box
    if (box.n, box.half_width) != (cfg.grid, cfg.box):
        raise ContractError(f"{path}: dataset box ({box.half_width}, {box.n}) does not match the config "
                            f"({cfg.box}, {cfg.grid})")
    return ds


def _print(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _step_name(step: int) -> str:
    return f"step_{step:06d}"


# --- commands ------------------------------------------------------------------

def cmd_synth(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    ds = dataset.synthesize(cfg.data_spec())
    path = Path(args.data) if args.data else out / "dataset.hgrd"
    dataset.save_dataset(ds, path)
    _print({"dataset": str(path), **dataset.residual_summary(ds)})
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    data_path = Path(args.data) if args.data else out / "dataset.hgrd"
    ds = _load_training(cfg, data_path)
    if args.resume:
        state = gan.restore(args.resume)
        wanted = cfg.train_config()
        # only the step budget may change on resume
        if state.config.to_dict() | {"total_steps": 0} != wanted.to_dict() | {"total_steps": 0} \
                or state.domain != ds.spec.box:
            raise ContractError(f"{args.resume}: snapshot was written with a different configuration")
        state.config = wanted
    else:
        state = gan.init_state(cfg.train_config(), ds.spec.box)
    for sub in ("snapshots", "samples"):
        (out / sub).mkdir(exist_ok=True)
    data = ds.values.astype(np.float32)

    def on_snapshot(s):
        name = _step_name(s.step)
        gan.snapshot(s, out / "snapshots" / f"{name}.hsnp")
        samples = gan.generate(s.gen_net, s.gen, s.eval_noise)
        dataset.save_samples(samples, s.domain, out / "samples" / f"{name}.hsmp")
        log.info("snapshot at step %d", s.step)

    def on_eval(s):
        row = s.history[-1]
        log.info("step %d  mean|W| %.4g  p95 e1 %.4g  e2 %.4g  d %.4f  g %.4f", row["step"], row["mean_abs_w"],
                 row["p95_e1"], row["p95_e2"], row["d_loss"], row["g_loss"])

    gan.run(state, data, cfg.steps, on_snapshot=on_snapshot, on_eval=on_eval)
    gan.write_metrics(state.history, out / "metrics.csv")
    gan.snapshot(state, out / "final.hsnp")
    save_checkpoint(state.gen_net, state.gen, out / "generator.hprm")
    save_checkpoint(state.disc_net, state.disc, out / "discriminator.hprm")
    _print({"steps": state.step, "metrics": str(out / "metrics.csv"), "last": state.history[-1]})
    return EXIT_OK


def _write_pgm(path: Path, image: np.ndarray) -> tuple[float, float]:
    lo, hi = float(image.min()), float(image.max())
    span = hi - lo
    pixels = np.zeros(image.shape, np.uint8) if span == 0 else np.round(255 * (image - lo) / span).astype(np.uint8)
    h, w = image.shape
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode() + pixels.tobytes())
    return lo, hi


def export_images(values: np.ndarray, domain: BoxDomain, out: Path, count: int) -> list[Path]:
    """P5 graymaps for u, v and V of the first ``count`` grids, min/max in a sidecar."""
    out.mkdir(parents=True, exist_ok=True)
    written, lines = [], []
    for i in range(min(count, len(values))):
        grid = ComplexGrid(domain, values[i, ..., 0], values[i, ..., 1])
        for tag, image in (("u", grid.u), ("v", grid.v), ("V", scalar_potential(grid))):
            path = out / f"sample_{i:04d}_{tag}.pgm"
            lo, hi = _write_pgm(path, image)
            lines.append(f"{path.name} min={lo!r} max={hi!r}\n")
            written.append(path)
    (out / "ranges.txt").write_text("".join(lines))
    return written


def cmd_report(cfg: RunConfig, args) -> int:
    out = _out_dir(cfg)
    ds = _load_training(cfg, args.data or out / "dataset.hgrd")
    _, gen_net = cfg.train_config().networks(cfg.grid)
    ckpt = args.checkpoint or out / "generator.hprm"
    _, store = load_checkpoint(ckpt, expect=gen_net)
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 1]))
    noise = gan.sample_noise(cfg.report_count, cfg.noise_dim, rng)
    samples = gan.generate(gen_net, store, noise)
    rep = analysis.novelty_report(ds, samples, cfg.degrees, cfg.prominence)
    paths = analysis.write_report(rep, out / "report", extra={"checkpoint": str(ckpt),
                                                              "report_count": cfg.report_count})
    dataset.save_samples(samples, ds.spec.box, out / "report" / "samples.hsmp")
    if cfg.export_images:
        export_images(samples, ds.spec.box, out / "report" / "images", cfg.image_count)
    s = rep.summary()
    _print({"report": str(paths["json"]), "generated_mean_fit_costs": s["generated"]["mean_fit_costs"],
            "training_mean_fit_costs": s["training"]["mean_fit_costs"],
            "generated_multi_minima_fraction": s["generated_multi_minima_fraction"]})
    return EXIT_OK


def cmd_validate(cfg: RunConfig, args) -> int:
    path = Path(args.path)
    with open(path, "rb") as fh:
        magic = fh.read(4)
    if magic == dataset.MAGIC:
        ds = dataset.load_dataset(path)
        domain, values = ds.spec.box, ds.values
    elif magic == dataset.SAMPLE_MAGIC:
        domain, values = dataset.load_samples(path)
    else:
        raise FormatError(f"{path}: neither a dataset nor a sample file")
    stats = gan.evaluate_grids(values, domain)
    costs = analysis.fit_costs(values, domain, cfg.degrees).mean(axis=0)
    minima = analysis.minima_counts(values, domain, cfg.prominence)
    _print({"file": str(path), "count": len(values), "n": domain.n, "half_width": domain.half_width,
            "residuals": {"mean_abs_w": stats.mean_abs_w, "mean_e1": stats.mean_e1, "mean_e2": stats.mean_e2,
                          "p95_e1": stats.p95_e1, "p95_e2": stats.p95_e2, "ratio": stats.ratio},
            "mean_fit_costs": {str(d): float(c) for d, c in zip(cfg.degrees, costs)},
            "multi_minima_fraction": float(np.mean(minima >= 2))})
    return EXIT_OK


# --- argument parsing ----------------------------------------------------------

_FLAGS = {
    "degree": "--degree", "coeff_range": "--coeff-range", "box": "--box", "grid": "--grid",
    "count": "--count", "seed": "--seed", "batch": "--batch", "steps": "--steps", "lr": "--lr",
    "decay": "--decay", "noise_dim": "--noise-dim", "snapshots": "--snapshots",
    "eval_noises": "--eval-noises", "eval_every": "--eval-every",
    "disc_steps_per_gen_step": "--disc-steps-per-gen-step", "gen_lr_multiplier": "--gen-lr-multiplier",
    "disc_dropout_in_gen_step": "--disc-dropout-in-gen-step", "disc_widths": "--disc-widths",
    "gen_base_channels": "--gen-base-channels", "gen_widths": "--gen-widths", "degrees": "--degrees",
    "prominence": "--prominence", "report_count": "--report-count", "export_images": "--export-images",
    "image_count": "--image-count", "out": "--out",
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key = value file; flags override it")
    common.add_argument("-v", "--verbose", action="store_true")
    for key, flag in _FLAGS.items():
        common.add_argument(flag, dest=key, metavar=key.upper(), default=None,
                            help=f"default: {_fmt(getattr(RunConfig, key))}")

    parser = argparse.ArgumentParser(prog="susygan", description="GAN for holomorphic superpotential grids.")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("synth", parents=[common], help="synthesize a training set")
    p.add_argument("--data", help="dataset path (default <out>/dataset.hgrd)")
    p = sub.add_parser("train", parents=[common], help="train the GAN on a dataset")
    p.add_argument("--data", help="dataset path (default <out>/dataset.hgrd)")
    p.add_argument("--resume", help="continue from a training snapshot")
    p = sub.add_parser("report", parents=[common], help="novelty report for a trained generator")
    p.add_argument("--data", help="training dataset (default <out>/dataset.hgrd)")
    p.add_argument("--checkpoint", help="generator checkpoint (default <out>/generator.hprm)")
    p = sub.add_parser("validate", parents=[common], help="residual and fit checks on a dataset or sample file")
    p.add_argument("path")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig()
    if args.config:
        cfg = RunConfig.from_text(Path(args.config).read_text())
    overrides = {k: RunConfig.parse_value(k, getattr(args, k)) for k in _FLAGS if getattr(args, k) is not None}
    cfg = cfg.replace(**overrides)
    cfg.validate()
    return cfg


@contextlib.contextmanager
def _thread_limit():
    limit = os.environ.get("HOLO_THREADS")
    if not limit:
        yield
        return
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:
        log.warning("HOLO_THREADS set but threadpoolctl is not installed; ignoring")
        yield
        return
    with threadpool_limits(limits=int(limit)):
        yield


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "report": cmd_report, "validate": cmd_validate}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    cfg = None
    try:
        cfg = resolve_config(args)
        with _thread_limit():
            return COMMANDS[args.command](cfg, args)
    except (ConfigError, IllConditioned) as exc:
        code, exc_ = EXIT_CONFIG, exc
    except (FormatError, ContractError) as exc:
        code, exc_ = EXIT_FORMAT, exc
    except NumericFault as exc:
        code, exc_ = EXIT_NUMERIC, exc
        blob = getattr(exc, "diagnostic", None)
        if blob is not None and cfg is not None:
            with contextlib.suppress(OSError):
                path = Path(cfg.out) / "fault.hsnp"
                path.write_bytes(blob)
                print(f"susygan {args.command}: diagnostic snapshot written to {path}", file=sys.stderr)
    except OSError as exc:
        code, exc_ = EXIT_IO, exc
    except (SusyGanError, ValueError) as exc:
        code, exc_ = EXIT_CONFIG, exc
    print(f"susygan {args.command}: {exc_}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
