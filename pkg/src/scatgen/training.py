"""L1 inversion of the fixed embedding with Adam, plus checkpoint persistence."""

from __future__ import annotations

import dataclasses
import hashlib
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import binio
from .embedding import WhiteningParams, embed_images
from .errors import FormatError, InvalidParameterError, NonFiniteError, ShapeMismatchError
from .tensor_nn import (
    GeneratorParams,
    backward,
    forward,
    forward_trace,
    init_generator,
    param_shapes,
    zeros_like_params,
)
from .wavelet_bank import FilterBank

log = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SCGN"
CHECKPOINT_VERSION = 1
METRICS_HEADER = ("epoch", "mean_l1", "train_psnr", "seconds")
METRICS_TAIL = 10
PSNR_SUBSET = 64


@dataclass
class TrainConfig:
    epochs: int = 60
    batch_size: int = 16
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    deterministic: bool = True
    d: int = 64
    J: int = 3
    Q: int = 4
    side: int = 32
    U: int = 3
    c0: int = 128

    def __post_init__(self):
        if self.batch_size < 1:
            raise InvalidParameterError("batch_size must be >= 1")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise InvalidParameterError("beta1 and beta2 must lie in (0, 1)")
        if self.learning_rate <= 0 or self.adam_eps <= 0:
            raise InvalidParameterError("learning_rate and adam_eps must be positive")
        if self.epochs < 0:
            raise InvalidParameterError("epochs must be >= 0")
        if 4 * 2**self.U != self.side:
            raise InvalidParameterError(f"side {self.side} != 4 * 2**U with U={self.U}")

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise InvalidParameterError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class AdamState:
    m: GeneratorParams
    v: GeneratorParams
    t: int = 0

    @classmethod
    def zeros(cls, params: GeneratorParams) -> "AdamState":
        return cls(zeros_like_params(params), zeros_like_params(params), 0)


@dataclass
class Checkpoint:
    config: TrainConfig
    params: GeneratorParams
    adam: AdamState
    epoch: int = 0
    rng: dict = field(default_factory=dict)
    metrics: list = field(default_factory=list)
    version: int = CHECKPOINT_VERSION


# --- loss / optimizer ----------------------------------------------------


def l1_loss(x_hat: np.ndarray, x: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean absolute error and its subgradient ``sign(x_hat - x) / N`` (sign(0) = 0)."""
    x_hat = np.asarray(x_hat)
    x = np.asarray(x)
    if x_hat.shape != x.shape:
        raise ShapeMismatchError(f"prediction {x_hat.shape} vs target {x.shape}")
    diff = x_hat - x.astype(x_hat.dtype, copy=False)
    n = diff.size
    return float(np.mean(np.abs(diff), dtype=np.float64)), (np.sign(diff) / n).astype(x_hat.dtype)


def adam_step(params: GeneratorParams, grads: GeneratorParams, state: AdamState, cfg: TrainConfig):
    """One bias-corrected Adam update, applied in place; returns ``(params, state)``."""
    for name, g in grads.arrays.items():
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient in parameter block {name} at step {state.t + 1}")
        if g.shape != params.arrays[name].shape:
            raise ShapeMismatchError(f"gradient {name} shape {g.shape} != {params.arrays[name].shape}")
    state.t += 1
    b1, b2 = cfg.beta1, cfg.beta2
    bc1 = 1.0 - b1**state.t
    bc2 = 1.0 - b2**state.t
    for name, g in grads.arrays.items():
        m, v = state.m.arrays[name], state.v.arrays[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        params.arrays[name] -= cfg.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)
    return params, state


# --- metrics -------------------------------------------------------------


def psnr(x_hat: np.ndarray, x: np.ndarray) -> float:
    """PSNR in dB with peak 1.0 on outputs clamped to [0, 1]; ``inf`` for an exact match."""
    mse = float(np.mean((np.clip(np.asarray(x_hat, dtype=np.float64), 0.0, 1.0) - np.asarray(x, dtype=np.float64)) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def psnr_per_image(x_hat: np.ndarray, x: np.ndarray) -> np.ndarray:
    return np.array([psnr(a, b) for a, b in zip(x_hat, x)])


def generate(params: GeneratorParams, z: np.ndarray, batch: int = 64) -> np.ndarray:
    z = np.asarray(z)
    out = np.empty((len(z), params.side, params.side, 3), dtype=params.dtype)
    for i in range(0, len(z), batch):
        out[i : i + batch] = forward(params, z[i : i + batch])
    return out


# --- training loop -------------------------------------------------------


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    """Minibatch order for an epoch; a pure function of ``(seed, epoch)``."""
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, epoch])))
    return rng.permutation(n)


def array_digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def new_checkpoint(cfg: TrainConfig) -> Checkpoint:
    params = init_generator(cfg.d, cfg.c0, cfg.U, cfg.seed, dtype=np.float32)
    return Checkpoint(cfg, params, AdamState.zeros(params), 0, _rng_record(cfg))


def _rng_record(cfg: TrainConfig) -> dict:
    return {"generator": "PCG64", "init_seed": cfg.seed, "shuffle": "SeedSequence([seed, epoch])"}


def train(
    images: np.ndarray,
    bank: FilterBank | None,
    whitening: WhiteningParams | None,
    cfg: TrainConfig,
    resume: Checkpoint | None = None,
    embeddings: np.ndarray | None = None,
    on_epoch=None,
) -> tuple[Checkpoint, list[dict]]:
    """Fit the generator so that ``G(Phi(x_i))`` reproduces ``x_i`` in L1.

    Embeddings are computed once (or taken from ``embeddings``) and never
    modified. ``resume`` continues a previous run up to ``cfg.epochs``.
    Returns the final checkpoint and one metrics row per epoch run.
    """
    images = np.asarray(images)
    if len(images) == 0:
        raise InvalidParameterError("training set is empty")
    if embeddings is None:
        embeddings = embed_images(images, bank, whitening)
    z_all = np.array(embeddings, dtype=np.float32)
    if z_all.shape != (len(images), cfg.d):
        raise ShapeMismatchError(f"embeddings {z_all.shape} do not match {len(images)} images x d={cfg.d}")
    z_all.flags.writeable = False
    targets = np.array(images, dtype=np.float32)
    targets.flags.writeable = False
    frozen = array_digest(z_all, targets)

    ckpt = resume if resume is not None else new_checkpoint(cfg)
    ckpt.config = cfg
    params, state = ckpt.params, ckpt.adam
    n = len(images)
    subset = slice(0, min(n, PSNR_SUBSET))
    rows = []
    for epoch in range(ckpt.epoch, cfg.epochs):
        t0 = time.perf_counter()
        order = epoch_order(cfg.seed, epoch, n)
        total = 0.0
        for step, start in enumerate(range(0, n, cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            out, trace = forward_trace(params, z_all[idx])
            loss, grad = l1_loss(out, targets[idx])
            if not np.isfinite(loss):
                raise NonFiniteError(f"non-finite loss at epoch {epoch + 1}, step {step + 1}")
            grads, _ = backward(params, z_all[idx], grad, trace)
            try:
                adam_step(params, grads, state, cfg)
            except NonFiniteError as exc:
                raise NonFiniteError(f"epoch {epoch + 1}, step {step + 1}: {exc}") from exc
            total += loss * len(idx)
        recon = generate(params, z_all[subset])
        row = {
            "epoch": epoch + 1,
            "mean_l1": total / n,
            "train_psnr": float(np.mean(psnr_per_image(recon, targets[subset]))),
            "seconds": time.perf_counter() - t0,
        }
        rows.append(row)
        ckpt.epoch = epoch + 1
        ckpt.metrics = (ckpt.metrics + [row])[-METRICS_TAIL:]
        log.info("epoch %d  l1 %.5f  psnr %.2f  %.1fs", row["epoch"], row["mean_l1"], row["train_psnr"], row["seconds"])
        if on_epoch is not None:
            on_epoch(ckpt, row)
    if array_digest(z_all, targets) != frozen:
        raise RuntimeError("embeddings or targets changed during training")
    return ckpt, rows


# --- persistence ---------------------------------------------------------


def save_checkpoint(ckpt: Checkpoint, path) -> None:
    names = ckpt.params.names()
    header = {
        "architecture": {"d_in": ckpt.params.d_in, "c0": ckpt.params.c0, "U": ckpt.params.U, "side": ckpt.params.side},
        "config": ckpt.config.to_dict(),
        "epoch": ckpt.epoch,
        "adam_t": ckpt.adam.t,
        "rng": ckpt.rng,
        "metrics_tail": ckpt.metrics,
        "blocks": [[k, list(ckpt.params.arrays[k].shape)] for k in names],
        "blob_order": ["params", "adam_m", "adam_v"],
    }
    blobs = [ckpt.params.arrays[k] for k in names]
    blobs += [ckpt.adam.m.arrays[k] for k in names]
    blobs += [ckpt.adam.v.arrays[k] for k in names]
    data = binio.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, header, blobs, with_checksum=True)
    tmp = Path(str(path) + ".tmp")
    tmp.write_bytes(data)
    tmp.replace(path)


def load_checkpoint(path) -> Checkpoint:
    header, body = binio.unpack(binio.read_bytes(path), CHECKPOINT_MAGIC, CHECKPOINT_VERSION, with_checksum=True)
    arch = header["architecture"]
    expect = param_shapes(arch["d_in"], arch["c0"], arch["U"])
    blocks = [(k, tuple(s)) for k, s in header["blocks"]]
    if blocks != list(expect.items()):
        raise FormatError("checkpoint parameter blocks do not match its architecture")
    off = 0
    groups = []
    for _ in header["blob_order"]:
        arrays = {}
        for k, shape in blocks:
            arrays[k], off = binio.take(body, off, shape)
        groups.append(GeneratorParams(arch["d_in"], arch["c0"], arch["U"], arrays))
    if off != body.size:
        raise FormatError("trailing bytes after checkpoint payload")
    params, m, v = groups
    return Checkpoint(
        TrainConfig.from_dict(header["config"]),
        params,
        AdamState(m, v, header["adam_t"]),
        header["epoch"],
        header["rng"],
        header["metrics_tail"],
        CHECKPOINT_VERSION,
    )


# --- embedding cache -----------------------------------------------------


def cached_embeddings(images: np.ndarray, bank: FilterBank, w: WhiteningParams, cache_dir, tag: str) -> np.ndarray:
    """Embeddings stored as ``.npy`` keyed by (J, Q, d, grid, whitening hash)."""
    cache_dir = Path(cache_dir)
    cache_dir.mkdir(parents=True, exist_ok=True)
    key = f"emb_{tag}_J{bank.J}_Q{bank.Q}_d{w.d}_g{bank.grid_size}_{w.digest()}.npy"
    path = cache_dir / key
    if path.exists():
        z = np.load(path)
        if z.shape == (len(images), w.d):
            return z
    z = embed_images(images, bank, w)
    np.save(path, z)
    return z
