"""Joint two-branch loss, Adam with plateau learning-rate decay, the
training loop, and binary checkpoint persistence.
"""

import struct
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .tensor import Tensor, Tape, ShapeError, backward, record_op
from .model import CpdModel, ModelConfig, SaliencyOutputs, cpd_forward


class NumericalError(RuntimeError):
    """Non-finite loss encountered during training."""


class CheckpointError(RuntimeError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointTruncatedError(CheckpointError):
    pass


class UnknownParameterError(CheckpointError):
    pass


# ---------------------------------------------------------------------------
# losses


def bce_with_logits(logits: Tensor, mask: Tensor) -> Tensor:
    """Mean sigmoid cross entropy over all pixels, computed in the stable
    form max(x,0) - x*z + log(1 + exp(-|x|)).  Masks must be exactly binary."""
    if logits.shape != mask.shape:
        raise ShapeError(f"logits shape {logits.shape} != mask shape {mask.shape}")
    z = mask.data
    if not np.all((z == 0) | (z == 1)):
        raise ValueError("mask values must be exactly 0 or 1")
    x = logits.data
    n = x.size
    per_pixel = np.maximum(x, 0) - x * z + np.log1p(np.exp(-np.abs(x)))
    out = np.array(per_pixel.mean(dtype=np.float64), dtype=x.dtype).reshape(1, 1, 1, 1)

    def bwd(g: np.ndarray) -> tuple:
        e = np.exp(-np.abs(x))
        sig = np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
        gl = (g.reshape(-1)[0] * (sig - z) / n).astype(x.dtype)
        return gl, None

    return record_op(out, (logits, mask), bwd)


def total_loss(out: SaliencyOutputs, mask: Tensor) -> Tensor:
    """Unweighted sum of both branch losses on the full-resolution logits;
    the full-decoder ablation contributes its single branch only."""
    loss_d = bce_with_logits(out.logits_d, mask)
    if out.logits_i is None:
        return loss_d
    from .tensor import add
    return add(bce_with_logits(out.logits_i, mask), loss_d)


# ---------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    """First/second moment buffers per parameter plus the shared step count."""
    m: dict
    v: dict
    t: int = 0

    @classmethod
    def init(cls, params: dict) -> "AdamState":
        return cls(m={k: np.zeros_like(p.data) for k, p in params.items()},
                   v={k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(params: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """One bias-corrected Adam update; every parameter must carry a gradient."""
    state.t += 1
    t = state.t
    c1 = 1.0 - beta1 ** t
    c2 = 1.0 - beta2 ** t
    for name, p in params.items():
        if p.grad is None:
            raise ValueError(f"parameter {name!r} has no gradient")
        g = p.grad
        m = state.m[name]
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= (lr / c1) * m / (np.sqrt(v / c2) + eps)


class PlateauScheduler:
    """Decay lr by ``factor`` whenever ``window`` consecutive epochs fail to
    improve the best seen loss by at least ``min_improvement`` (relative)."""

    def __init__(self, lr: float, window: int = 5, min_improvement: float = 0.01,
                 factor: float = 0.9):
        self.lr = lr
        self.window = window
        self.min_improvement = min_improvement
        self.factor = factor
        self.best = float("inf")
        self.stale = 0

    def step(self, epoch_loss: float) -> float:
        if epoch_loss <= (1.0 - self.min_improvement) * self.best:
            self.best = epoch_loss
            self.stale = 0
        else:
            self.stale += 1
            if self.stale >= self.window:
                self.lr *= self.factor
                self.stale = 0
        return self.lr


# ---------------------------------------------------------------------------
# training loop


@dataclass
class TrainConfig:
    batch_size: int = 4
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 20
    plateau_window: int = 5
    plateau_min_improvement: float = 0.01
    plateau_decay: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float


def _stack_batch(samples: Sequence) -> tuple[Tensor, Tensor]:
    imgs = np.concatenate([s.image.data for s in samples], axis=0)
    masks = np.concatenate([s.mask.data for s in samples], axis=0)
    return Tensor(imgs), Tensor(masks)


def fit(model: CpdModel, samples: Sequence, cfg: TrainConfig,
        keep_adam: bool = False) -> tuple[list, "Checkpoint"]:
    """Train in seeded shuffled mini-batches; returns the per-epoch log and a
    final in-memory checkpoint.  Raises NumericalError on a non-finite loss."""
    if not samples:
        raise ValueError("training dataset is empty")
    rng = np.random.default_rng(cfg.seed)
    params = model.named_parameters()
    state = AdamState.init(params)
    sched = PlateauScheduler(cfg.lr, cfg.plateau_window,
                             cfg.plateau_min_improvement, cfg.plateau_decay)
    log: list[EpochRecord] = []
    n = len(samples)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n)
        lr = sched.lr
        seen = 0
        acc = 0.0
        for start in range(0, n, cfg.batch_size):
            batch = [samples[i] for i in order[start:start + cfg.batch_size]]
            images, masks = _stack_batch(batch)
            model.zero_grad()
            with Tape() as tape:
                out = cpd_forward(model, images)
                loss = total_loss(out, masks)
            val = loss.item()
            if not np.isfinite(val):
                raise NumericalError(f"non-finite loss at epoch {epoch}")
            backward(loss, tape)
            adam_step(params, state, lr, cfg.beta1, cfg.beta2, cfg.eps)
            acc += val * len(batch)
            seen += len(batch)
        epoch_loss = acc / seen
        log.append(EpochRecord(epoch=epoch, loss=epoch_loss, lr=lr))
        sched.step(epoch_loss)
    ckpt = snapshot(model, state if keep_adam else None)
    return log, ckpt


def log_to_tsv(log: Sequence[EpochRecord]) -> str:
    lines = ["epoch\tloss\tlr"]
    lines += [f"{r.epoch}\t{r.loss:.6f}\t{r.lr:.8g}" for r in log]
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# persistence
#
# File layout: magic "CPDCKPT1"; u32 LE config length + UTF-8 config JSON;
# u32 LE parameter count; per parameter: u16 LE name length, name UTF-8,
# u8 rank, u32 LE per dim, raw float32 LE data.  An optional Adam section
# follows with the same blob layout (entries adam.t / adam.m.* / adam.v.*).

MAGIC = b"CPDCKPT1"


@dataclass
class Checkpoint:
    config_json: str
    params: dict
    adam: Optional[dict] = None

    @property
    def config(self) -> ModelConfig:
        return ModelConfig.from_json(self.config_json)


def snapshot(model: CpdModel, state: Optional[AdamState] = None) -> Checkpoint:
    params = {k: p.data.astype(np.float32).copy() for k, p in model.named_parameters().items()}
    adam = None
    if state is not None:
        adam = {"adam.t": np.array([state.t], dtype=np.float32)}
        for k, m in state.m.items():
            adam[f"adam.m.{k}"] = m.astype(np.float32).copy()
        for k, v in state.v.items():
            adam[f"adam.v.{k}"] = v.astype(np.float32).copy()
    return Checkpoint(config_json=model.config.to_json(), params=params, adam=adam)


def _write_blobs(fh, blobs: dict) -> None:
    fh.write(struct.pack("<I", len(blobs)))
    for name, arr in blobs.items():
        encoded = name.encode("utf-8")
        fh.write(struct.pack("<H", len(encoded)))
        fh.write(encoded)
        arr32 = np.ascontiguousarray(arr, dtype=np.float32)
        fh.write(struct.pack("<B", arr32.ndim))
        for d in arr32.shape:
            fh.write(struct.pack("<I", d))
        fh.write(arr32.tobytes())


def save_checkpoint(path, model: CpdModel, state: Optional[AdamState] = None) -> Checkpoint:
    ckpt = snapshot(model, state)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        cfg = ckpt.config_json.encode("utf-8")
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        _write_blobs(fh, ckpt.params)
        if ckpt.adam is not None:
            _write_blobs(fh, ckpt.adam)
    return ckpt


def _read_exact(fh, count: int, what: str) -> bytes:
    data = fh.read(count)
    if len(data) != count:
        raise CheckpointTruncatedError(f"checkpoint truncated while reading {what}")
    return data


def _read_blobs(fh) -> dict:
    (count,) = struct.unpack("<I", _read_exact(fh, 4, "blob count"))
    blobs = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", _read_exact(fh, 2, "name length"))
        name = _read_exact(fh, name_len, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", _read_exact(fh, 1, f"rank of {name!r}"))
        dims = [struct.unpack("<I", _read_exact(fh, 4, f"dims of {name!r}"))[0]
                for _ in range(rank)]
        n_bytes = 4 * int(np.prod(dims, dtype=np.int64)) if dims else 4
        raw = _read_exact(fh, n_bytes, f"data of parameter {name!r}")
        blobs[name] = np.frombuffer(raw, dtype="<f4").reshape(dims).copy()
    return blobs


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointMagicError(f"bad checkpoint magic {magic!r}")
        (cfg_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        config_json = _read_exact(fh, cfg_len, "config").decode("utf-8")
        params = _read_blobs(fh)
        adam = None
        if fh.read(1):
            fh.seek(-1, 1)
            adam = _read_blobs(fh)
    return Checkpoint(config_json=config_json, params=params, adam=adam)


def restore_into(model: CpdModel, ckpt: Checkpoint) -> None:
    target = model.named_parameters()
    for name, arr in ckpt.params.items():
        if name not in target:
            raise UnknownParameterError(f"checkpoint parameter {name!r} not in model")
        if target[name].data.shape != arr.shape:
            raise CheckpointError(f"parameter {name!r} shape {arr.shape} != "
                                  f"model shape {target[name].data.shape}")
        target[name].data = arr.astype(target[name].dtype).copy()
    missing = set(target) - set(ckpt.params)
    if missing:
        raise UnknownParameterError(f"checkpoint is missing parameters: {sorted(missing)[:4]}...")


def model_from_checkpoint(ckpt: Checkpoint) -> CpdModel:
    model = CpdModel(ckpt.config, seed=0)
    restore_into(model, ckpt)
    return model


def adam_state_from_checkpoint(ckpt: Checkpoint, model: CpdModel) -> Optional[AdamState]:
    if ckpt.adam is None:
        return None
    params = model.named_parameters()
    state = AdamState.init(params)
    state.t = int(ckpt.adam["adam.t"][0])
    for name in params:
        state.m[name] = ckpt.adam[f"adam.m.{name}"].astype(np.float32).copy()
        state.v[name] = ckpt.adam[f"adam.v.{name}"].astype(np.float32).copy()
    return state
