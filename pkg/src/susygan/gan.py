"""The two networks, adversarial training, metric tracking and training snapshots."""
from __future__ import annotations

import contextlib
import csv
import json
import logging
import struct
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import BadMagic, ContractError, FormatError, InvalidArgument, NumericFault, VersionMismatch
from .field_grid import BoxDomain, ResidualStats, residual_stat_arrays
from .nn import (BatchNorm, Conv2D, Dense, Dropout, Flatten, Input, LeakyReLU, ReLU, Reshape, Sigmoid,
                 Tanh, UpSample2x, NetworkSpec, ParamStore, backward, binary_crossentropy, forward,
                 init_params, rmsprop_step)
from .nn.checkpoint import Reader, checkpoint_bytes, pack_text, read_checkpoint

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("step", "mean_abs_w", "mean_e1", "mean_e2", "p95_e1", "p95_e2",
                  "d_loss", "g_loss", "diversity")


def build_discriminator(grid: int = 64, widths=(8, 16, 32, 64), kernel: int = 2,
                        dropout: float = 0.4, slope: float = 0.2) -> NetworkSpec:
    layers = [Input((grid, grid, 2))]
    for f in widths:
        layers += [Conv2D(f, kernel), LeakyReLU(slope), Dropout(dropout)]
    layers += [Flatten(), Dense(1), Sigmoid()]
    return NetworkSpec("discriminator", tuple(layers))


def build_generator(grid: int = 64, noise_dim: int = 100, base_channels: int = 256,
                    widths=(128, 64, 32), kernels=(3, 3, 2), out_kernel: int = 2,
                    dropout: float = 0.4, momentum: float = 0.9) -> NetworkSpec:
    """Dense seed at grid/4 resolution, two 2x upsampling stages, one refinement conv, tanh head."""
    if grid % 4:
        raise InvalidArgument(f"generator grid size must be divisible by 4, got {grid}")
    base = grid // 4
    layers = [Input((noise_dim,)), Dense(base * base * base_channels), BatchNorm(momentum), ReLU(),
              Reshape((base, base, base_channels)), Dropout(dropout)]
    for i, (f, k) in enumerate(zip(widths, kernels)):
        if i < 2:
            layers.append(UpSample2x())
        layers += [Conv2D(f, k), BatchNorm(momentum), ReLU()]
    layers += [Conv2D(2, out_kernel), Tanh()]
    return NetworkSpec("generator", tuple(layers))


def _as_fraction(value) -> Fraction:
    return value if isinstance(value, Fraction) else Fraction(str(value))


@dataclass
class TrainConfig:
    batch_size: int = 256
    total_steps: int = 20_000
    lr0: float = 2e-4
    decay: float = 6e-8
    noise_dim: int = 100
    snapshot_steps: tuple = (100, 1000, 20_000)
    eval_noise_count: int = 16
    eval_every: int = 100
    disc_steps_per_gen_step: Fraction = Fraction(1)
    gen_lr_multiplier: float = 1.0
    disc_dropout_in_gen_step: bool = True
    seed: int = 0
    disc_widths: tuple = (8, 16, 32, 64)
    gen_base_channels: int = 256
    gen_widths: tuple = (128, 64, 32)

    def __post_init__(self):
        self.snapshot_steps = tuple(int(s) for s in self.snapshot_steps)
        self.disc_widths = tuple(int(w) for w in self.disc_widths)
        self.gen_widths = tuple(int(w) for w in self.gen_widths)
        self.disc_steps_per_gen_step = _as_fraction(self.disc_steps_per_gen_step)
        if self.batch_size < 1 or self.noise_dim < 1 or self.eval_noise_count < 1:
            raise InvalidArgument("batch_size, noise_dim and eval_noise_count must be >= 1")
        if list(self.snapshot_steps) != sorted(self.snapshot_steps):
            raise InvalidArgument("snapshot_steps must be sorted ascending")
        if self.eval_every < 1 or self.disc_steps_per_gen_step < 0:
            raise InvalidArgument("eval_every must be >= 1 and the disc/gen ratio non-negative")
        if len(self.gen_widths) != 3:
            raise InvalidArgument("gen_widths needs three entries")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["disc_steps_per_gen_step"] = str(self.disc_steps_per_gen_step)
        for k in ("snapshot_steps", "disc_widths", "gen_widths"):
            d[k] = list(d[k])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in known})

    def networks(self, grid: int) -> tuple[NetworkSpec, NetworkSpec]:
        return (build_discriminator(grid, self.disc_widths),
                build_generator(grid, self.noise_dim, self.gen_base_channels, self.gen_widths))


def sample_noise(count: int, noise_dim: int, rng: np.random.Generator) -> np.ndarray:
    if count < 1:
        raise InvalidArgument("noise count must be >= 1")
    return rng.uniform(-1.0, 1.0, size=(count, noise_dim)).astype(np.float32)


@dataclass(eq=False)
class TrainState:
    config: TrainConfig
    domain: BoxDomain
    disc_net: NetworkSpec
    gen_net: NetworkSpec
    disc: ParamStore
    gen: ParamStore
    rng: np.random.Generator
    eval_noise: np.ndarray
    step: int = 0
    order: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    cursor: int = 0
    disc_credit: Fraction = Fraction(0)
    d_loss: float = float("nan")
    g_loss: float = float("nan")
    history: list = field(default_factory=list)


def init_state(config: TrainConfig, domain: BoxDomain) -> TrainState:
    disc_net, gen_net = config.networks(domain.n)
    seeds = np.random.SeedSequence(config.seed).spawn(4)
    disc = init_params(disc_net, seeds[0])
    gen = init_params(gen_net, seeds[1])
    eval_noise = sample_noise(config.eval_noise_count, config.noise_dim, np.random.default_rng(seeds[2]))
    eval_noise.setflags(write=False)
    return TrainState(config, domain, disc_net, gen_net, disc, gen,
                      np.random.default_rng(seeds[3]), eval_noise)


def next_batch(state: TrainState, data: np.ndarray) -> np.ndarray:
    """Next real batch from shuffled epochs; ``data`` is (count, n, n, 2) float32."""
    b = state.config.batch_size
    if len(data) < b:
        raise InvalidArgument(f"dataset of {len(data)} samples is smaller than the batch size {b}")
    if len(state.order) != len(data) or state.cursor + b > len(data):
        state.order = state.rng.permutation(len(data))
        state.cursor = 0
    idx = state.order[state.cursor:state.cursor + b]
    state.cursor += b
    return data[idx]


def _check_loss(value: float, which: str, state: TrainState):
    if not np.isfinite(value):
        raise NumericFault(f"non-finite {which} loss at step {state.step}")


@contextlib.contextmanager
def _diagnosed(state: TrainState):
    """Attach a snapshot of both networks to any numeric fault raised inside."""
    try:
        yield
    except NumericFault as fault:
        if getattr(fault, "diagnostic", None) is None:
            fault.diagnostic = snapshot_bytes(state)
        raise


def discriminator_step(state: TrainState, real_batch: np.ndarray) -> float:
    cfg = state.config
    noise = sample_noise(len(real_batch), cfg.noise_dim, state.rng)
    fake, _ = forward(state.gen_net, state.gen, noise, train=False)
    x = np.concatenate([real_batch.astype(np.float32, copy=False), fake])
    labels = np.concatenate([np.ones((len(real_batch), 1), np.float32),
                             np.zeros((len(fake), 1), np.float32)])
    p, caches = forward(state.disc_net, state.disc, x, train=True, rng=state.rng)
    loss, dlogit = binary_crossentropy(p, labels)
    _check_loss(loss, "discriminator", state)
    grads, _ = backward(state.disc_net, state.disc, caches, dlogit, top=len(state.disc_net.layers) - 1)
    rmsprop_step(state.disc, grads, cfg.lr0, cfg.decay)
    state.d_loss = loss
    return loss


def generator_step(state: TrainState) -> float:
    """Update the generator through a frozen discriminator with 'real' labels."""
    cfg = state.config
    noise = sample_noise(cfg.batch_size, cfg.noise_dim, state.rng)
    fake, gcache = forward(state.gen_net, state.gen, noise, train=True, rng=state.rng)
    p, dcache = forward(state.disc_net, state.disc, fake, train=cfg.disc_dropout_in_gen_step,
                        rng=state.rng)
    loss, dlogit = binary_crossentropy(p, 1.0)
    _check_loss(loss, "generator", state)
    _, dfake = backward(state.disc_net, state.disc, dcache, dlogit, param_grads=False,
                        top=len(state.disc_net.layers) - 1)
    grads, _ = backward(state.gen_net, state.gen, gcache, dfake)
    rmsprop_step(state.gen, grads, cfg.lr0 * cfg.gen_lr_multiplier, cfg.decay)
    state.g_loss = loss
    return loss


def train_step(state: TrainState, real_batch: np.ndarray) -> tuple[float, float]:
    """One discriminator update followed by one generator update."""
    with _diagnosed(state):
        d_loss = discriminator_step(state, real_batch)
        g_loss = generator_step(state)
    state.step += 1
    return d_loss, g_loss


def advance(state: TrainState, data: np.ndarray) -> None:
    """One generator step preceded by as many discriminator steps as the ratio has accrued."""
    state.disc_credit += state.config.disc_steps_per_gen_step
    with _diagnosed(state):
        while state.disc_credit >= 1:
            discriminator_step(state, next_batch(state, data))
            state.disc_credit -= 1
        generator_step(state)
    state.step += 1


def generate(net: NetworkSpec, store: ParamStore, noise: np.ndarray, chunk: int = 64) -> np.ndarray:
    """Inference-mode generator outputs, (count, n, n, 2) float32."""
    return np.concatenate([forward(net, store, noise[i:i + chunk], train=False)[0]
                           for i in range(0, len(noise), chunk)])


def diversity(samples: np.ndarray) -> float:
    """Mean pairwise L2 distance between samples; near zero signals mode collapse."""
    flat = samples.reshape(len(samples), -1).astype(np.float64)
    if len(flat) < 2:
        return 0.0
    sq = np.sum(flat * flat, axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2 * flat @ flat.T, 0.0)
    iu = np.triu_indices(len(flat), k=1)
    return float(np.mean(np.sqrt(d2[iu])))


def evaluate_grids(samples: np.ndarray, domain: BoxDomain) -> ResidualStats:
    """Residual statistics averaged component-wise over a (count, n, n, 2) block."""
    s = samples.astype(np.float64)
    stats = residual_stat_arrays(s[..., 0], s[..., 1], domain.spacing)
    return ResidualStats(**{k: float(np.mean(v)) for k, v in stats.items()})


def evaluate(state: TrainState) -> ResidualStats:
    samples = generate(state.gen_net, state.gen, state.eval_noise)
    stats = evaluate_grids(samples, state.domain)
    row = {"step": state.step, **asdict(stats), "d_loss": state.d_loss, "g_loss": state.g_loss,
           "diversity": diversity(samples)}
    state.history.append(row)
    return stats


def run(state: TrainState, data: np.ndarray, until: int, on_snapshot=None, on_eval=None) -> TrainState:
    """Train up to generator step ``until``.

    Evaluates at step 0 (if nothing was recorded yet), every ``eval_every``
    steps and at every snapshot step; ``on_snapshot(state)`` fires after the
    evaluation at each snapshot step.
    """
    cfg = state.config
    data = np.asarray(data, dtype=np.float32)
    if data.shape[1:] != (state.domain.n, state.domain.n, 2):
        raise ContractError(f"data grids {data.shape[1:]} do not match the {state.domain.n}x{state.domain.n} networks")
    if not state.history:
        evaluate(state)
    snaps = set(cfg.snapshot_steps)
    while state.step < until:
        advance(state, data)
        if state.step % cfg.eval_every == 0 or state.step in snaps:
            evaluate(state)
            if on_eval is not None:
                on_eval(state)
        if state.step in snaps and on_snapshot is not None:
            on_snapshot(state)
    return state


# --- snapshots -----------------------------------------------------------------

SNAP_MAGIC = b"HSNP"
SNAP_VERSION = 1


def snapshot_bytes(state: TrainState) -> bytes:
    meta = {
        "config": state.config.to_dict(),
        "domain": [state.domain.half_width, state.domain.n],
        "step": state.step,
        "cursor": state.cursor,
        "disc_credit": str(state.disc_credit),
        "d_loss": state.d_loss,
        "g_loss": state.g_loss,
        "rng": state.rng.bit_generator.state,
        "order_len": len(state.order),
        "history_rows": len(state.history),
    }
    disc = checkpoint_bytes(state.disc_net, state.disc)
    gen = checkpoint_bytes(state.gen_net, state.gen)
    hist = np.array([[row[c] for c in METRIC_COLUMNS] for row in state.history],
                    dtype="<f8").reshape(-1, len(METRIC_COLUMNS))
    return b"".join([
        SNAP_MAGIC, struct.pack("<I", SNAP_VERSION), pack_text(json.dumps(meta, sort_keys=True)),
        struct.pack("<Q", len(disc)), disc, struct.pack("<Q", len(gen)), gen,
        np.ascontiguousarray(state.eval_noise, dtype="<f4").tobytes(),
        np.ascontiguousarray(state.order, dtype="<i8").tobytes(),
        hist.tobytes(),
    ])


def snapshot(state: TrainState, path) -> None:
    Path(path).write_bytes(snapshot_bytes(state))


def restore(path) -> TrainState:
    raw = Path(path).read_bytes()
    r = Reader(raw, what=str(path))
    if r.take(4) != SNAP_MAGIC:
        raise BadMagic(f"{path}: not a training snapshot")
    version = r.u32()
    if version != SNAP_VERSION:
        raise VersionMismatch(f"{path}: snapshot version {version}, expected {SNAP_VERSION}")
    try:
        meta = json.loads(r.text())
        config = TrainConfig.from_dict(meta["config"])
        domain = BoxDomain(*meta["domain"])
        disc_blob = Reader(r.take(r.u64()), what=f"{path}[discriminator]")
        disc_net, disc = read_checkpoint(disc_blob)
        gen_blob = Reader(r.take(r.u64()), what=f"{path}[generator]")
        gen_net, gen = read_checkpoint(gen_blob)
        eval_noise = r.array((config.eval_noise_count, config.noise_dim)).astype(np.float32)
        order = r.array((meta["order_len"],), "<i8").astype(np.int64)
        hist = r.array((meta["history_rows"], len(METRIC_COLUMNS)), "<f8").astype(np.float64)
        rng = np.random.default_rng()
        rng.bit_generator.state = meta["rng"]
    except (KeyError, TypeError, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: corrupt snapshot ({exc})") from exc
    if r.pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - r.pos} trailing bytes")
    if (disc_net, gen_net) != config.networks(domain.n):
        raise FormatError(f"{path}: stored networks disagree with the stored config")
    eval_noise.setflags(write=False)
    history = [{c: (int(v) if c == "step" else float(v)) for c, v in zip(METRIC_COLUMNS, row)}
               for row in hist]
    return TrainState(config, domain, disc_net, gen_net, disc, gen, rng, eval_noise,
                      step=meta["step"], order=order, cursor=meta["cursor"],
                      disc_credit=Fraction(meta["disc_credit"]), d_loss=float(meta["d_loss"]),
                      g_loss=float(meta["g_loss"]), history=history)


def write_metrics(history, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        for row in history:
            w.writerow([row["step"]] + [repr(float(row[c])) for c in METRIC_COLUMNS[1:]])


def read_metrics(path) -> list[dict]:
    with open(path, newline="") as fh:
        return [{c: (int(row[c]) if c == "step" else float(row[c])) for c in METRIC_COLUMNS}
                for row in csv.DictReader(fh)]
