"""Training: patch sampling, L1 loss, Adam with step-halving learning rate.

Every step draws its randomness from ``default_rng([seed, step])``.  A run
therefore depends only on (config, data, starting state), and a resumed run
continues exactly where the uninterrupted one would have been.
"""
from __future__ import annotations

import csv
import io
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import checkpoint
from .arch import Network, NetworkSpec, ParamStore, build
from .imaging import bicubic_resize, check_image, mod_crop

log = logging.getLogger(__name__)


class DataError(ValueError):
    pass


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, layer: str | None):
        self.step = step
        self.layer = layer
        where = f"first non-finite layer: {layer}" if layer else "all layer outputs finite; check inputs/targets"
        super().__init__(f"loss became NaN/Inf at step {step} ({where})")


@dataclass(frozen=True)
class TrainConfig:
    patch_size_lr: int = 64
    batch_size: int = 64
    lr0: float = 1e-4
    halve_every: int = 400_000
    total_steps: int = 600_000
    betas: tuple = (0.9, 0.999)
    epsilon: float = 1e-8
    scales: tuple = (2, 3, 4)
    seed: int = 0
    augment: bool = True
    checkpoint_every: int = 0

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(sorted({int(s) for s in self.scales})))
        for name in ("patch_size_lr", "batch_size", "halve_every", "total_steps"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr0 <= 0 or self.epsilon <= 0:
            raise ValueError("lr0 and epsilon must be positive")
        b1, b2 = self.betas
        if not (0 < b1 < 1 and 0 < b2 < 1):
            raise ValueError("betas must lie in (0, 1)")
        if not self.scales or not set(self.scales) <= {2, 3, 4}:
            raise ValueError(f"scales must be a non-empty subset of {{2, 3, 4}}, got {self.scales}")
        if self.checkpoint_every < 0:
            raise ValueError("checkpoint_every must be >= 0")


# ---------------------------------------------------------------------------
# Data
# ---------------------------------------------------------------------------


class PairedDataset:
    """HR images with their bicubic LR counterparts per scale, as float CHW arrays in [0, 1]."""

    def __init__(self, hr_images, scales, dtype=np.float32):
        hr_images = [check_image(im) for im in hr_images]
        if not hr_images:
            raise DataError("dataset is empty")
        self.scales = tuple(scales)
        self.pairs = {}
        for s in self.scales:
            pairs = []
            for hr in hr_images:
                hr = mod_crop(hr, s)
                lr = bicubic_resize(hr, hr.shape[1] // s, hr.shape[0] // s)
                pairs.append((_chw(lr, dtype), _chw(hr, dtype)))
            self.pairs[s] = pairs

    def __len__(self):
        return len(next(iter(self.pairs.values())))


def _chw(img, dtype):
    return np.ascontiguousarray((img.astype(np.float64) / 255.0).transpose(2, 0, 1)).astype(dtype)


def sample_batch(dataset: PairedDataset, scale: int, cfg: TrainConfig, rng: np.random.Generator):
    """Random aligned LR/HR patches with shared flip/rotation augmentation.

    LR patch corner ``(y, x)`` maps to HR corner ``(y * scale, x * scale)``.
    """
    if scale not in dataset.pairs:
        raise DataError(f"dataset has no pairs for scale {scale}")
    p, hp = cfg.patch_size_lr, cfg.patch_size_lr * scale
    lrs, hrs = [], []
    for _ in range(cfg.batch_size):
        lr, hr = dataset.pairs[scale][int(rng.integers(len(dataset)))]
        _, h, w = lr.shape
        if h < p or w < p:
            raise DataError(f"LR image {w}x{h} smaller than patch {p}x{p}")
        y, x = int(rng.integers(h - p + 1)), int(rng.integers(w - p + 1))
        lp = lr[:, y:y + p, x:x + p]
        hpatch = hr[:, y * scale:y * scale + hp, x * scale:x * scale + hp]
        if cfg.augment:
            flip, rot = int(rng.integers(2)), int(rng.integers(4))
            lp, hpatch = augment(lp, flip, rot), augment(hpatch, flip, rot)
        lrs.append(lp)
        hrs.append(hpatch)
    return np.ascontiguousarray(np.stack(lrs)), np.ascontiguousarray(np.stack(hrs))


def augment(chw: np.ndarray, flip: int, rot: int) -> np.ndarray:
    """Horizontal flip (if ``flip``) then ``rot`` quarter turns."""
    if flip:
        chw = chw[:, :, ::-1]
    return np.rot90(chw, k=rot, axes=(1, 2))


# ---------------------------------------------------------------------------
# Loss and optimizer
# ---------------------------------------------------------------------------


def l1_loss(pred: np.ndarray, target: np.ndarray):
    """Mean absolute error and its gradient ``sign(pred - target) / count`` (sign(0) = 0)."""
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    n = diff.size
    loss = float(np.abs(diff).astype(np.float64).sum() / n)
    grad = (np.sign(diff) / n).astype(pred.dtype)
    return loss, grad


def learning_rate(step: int, cfg: TrainConfig) -> float:
    """Rate used by update number ``step + 1``: ``lr0`` halved every ``halve_every`` updates."""
    return cfg.lr0 * 0.5 ** (step // cfg.halve_every)


@dataclass
class AdamState:
    """Moments per canonical parameter.

    ``t`` counts optimizer steps and drives the schedule; ``steps`` counts the
    updates each parameter actually received, which drives bias correction
    (an upsampling head only sees batches of its own scale).
    """

    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    steps: dict = field(default_factory=dict)
    t: int = 0

    def to_entries(self) -> dict:
        out = {"t": np.array([self.t], dtype=np.float32)}
        for name in self.m:
            out[f"m/{name}"] = self.m[name]
            out[f"v/{name}"] = self.v[name]
            out[f"steps/{name}"] = np.array([self.steps[name]], dtype=np.float32)
        return out

    @classmethod
    def from_entries(cls, entries: dict) -> "AdamState":
        state = cls(t=int(entries["t"][0]))
        for key, arr in entries.items():
            kind, _, name = key.partition("/")
            if kind == "m":
                state.m[name] = arr.copy()
            elif kind == "v":
                state.v[name] = arr.copy()
            elif kind == "steps":
                state.steps[name] = int(arr[0])
        return state


def adam_step(store: ParamStore, grads: ParamStore, state: AdamState, cfg: TrainConfig) -> float:
    """Bias-corrected Adam update of every parameter that has a gradient.

    Returns the learning rate that was applied.
    """
    lr = learning_rate(state.t, cfg)
    state.t += 1
    b1, b2 = cfg.betas
    for name, g in grads.items():
        key = store.resolve(name)
        param = store.entries[key]
        if g.shape != param.shape:
            raise ValueError(f"gradient shape {g.shape} does not match {key} {param.shape}")
        if key not in state.m:
            state.m[key] = np.zeros_like(param)
            state.v[key] = np.zeros_like(param)
            state.steps[key] = 0
        state.steps[key] += 1
        k = state.steps[key]
        m, v = state.m[key], state.v[key]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        m_hat = m / (1 - b1 ** k)
        v_hat = v / (1 - b2 ** k)
        param -= (lr * m_hat / (np.sqrt(v_hat) + cfg.epsilon)).astype(param.dtype)
    return lr


# ---------------------------------------------------------------------------
# Training loop
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LogRow:
    step: int
    scale: int
    loss: float
    lr: float
    seconds: float


def log_to_csv(rows, include_seconds: bool = True) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    header = ["step", "scale", "loss", "lr"] + (["seconds"] if include_seconds else [])
    writer.writerow(header)
    for r in rows:
        row = [r.step, r.scale, repr(r.loss), repr(r.lr)]
        if include_seconds:
            row.append(f"{r.seconds:.3f}")
        writer.writerow(row)
    return buf.getvalue()


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng([seed, step])


def train_step(net: Network, dataset: PairedDataset, state: AdamState, cfg: TrainConfig):
    """One optimizer step; returns ``(scale, loss, lr)``."""
    step = state.t
    rng = step_rng(cfg.seed, step)
    scale = cfg.scales[int(rng.integers(len(cfg.scales)))]
    lr_batch, hr_batch = sample_batch(dataset, scale, cfg, rng)
    dtype = next(iter(net.params.entries.values())).dtype
    lr_batch, hr_batch = lr_batch.astype(dtype, copy=False), hr_batch.astype(dtype, copy=False)
    pred, trace = net.forward_train(lr_batch, scale)
    loss, grad = l1_loss(pred, hr_batch)
    if not np.isfinite(loss):
        raise TrainingDiverged(step + 1, net.first_nonfinite_layer(lr_batch, scale))
    grads = net.backward(trace, grad)
    lr = adam_step(net.params, grads, state, cfg)
    return scale, loss, lr


def train(spec: NetworkSpec, dataset: PairedDataset, cfg: TrainConfig, *,
          store: ParamStore | None = None, state: AdamState | None = None,
          on_checkpoint=None, dtype=np.float32):
    """Run ``cfg.total_steps`` steps (continuing from ``state.t`` if given).

    ``on_checkpoint(step, store, state)`` is called every
    ``cfg.checkpoint_every`` steps.  Returns ``(store, state, log rows)``.
    """
    if not set(cfg.scales) <= set(spec.scales):
        raise ValueError(f"training scales {cfg.scales} not supported by network scales {spec.scales}")
    if not set(cfg.scales) <= set(dataset.scales):
        raise DataError(f"dataset lacks pairs for some of {cfg.scales}")
    for s in cfg.scales:
        for lr, _ in dataset.pairs[s]:
            if min(lr.shape[1:]) < cfg.patch_size_lr:
                raise DataError(f"x{s} LR image {lr.shape[2]}x{lr.shape[1]} smaller than patch {cfg.patch_size_lr}")
    if store is None:
        net, store = build(spec, cfg.seed, dtype)
    else:
        net = Network(spec, params=store)
    state = state or AdamState()
    rows = []
    start = time.perf_counter()
    while state.t < cfg.total_steps:
        scale, loss, lr = train_step(net, dataset, state, cfg)
        rows.append(LogRow(state.t, scale, loss, lr, time.perf_counter() - start))
        if state.t % 100 == 0:
            log.info("step %d x%d loss %.5f lr %.2e", state.t, scale, loss, lr)
        if on_checkpoint and cfg.checkpoint_every and state.t % cfg.checkpoint_every == 0:
            on_checkpoint(state.t, store, state)
    return store, state, rows


def save_state(state: AdamState, path) -> None:
    checkpoint.save_entries(state.to_entries(), path)


def load_state(path) -> AdamState:
    return AdamState.from_entries(checkpoint.load_entries(path))
