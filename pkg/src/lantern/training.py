"""Adam training loop, ablation variants and the binary checkpoint container."""

from __future__ import annotations

import json
import logging
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import autodiff as ad
from . import model as M
from .autodiff import ShapeError, Tensor
from .model import DEFAULT_HOOKS, Hooks, LanternConfig, LanternParams
from .synth import DatasetManifest, UserRecord, stack

log = logging.getLogger(__name__)

VARIANTS = ("fused", "survey_only", "external_only")


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.99
    epsilon: float = 1e-8
    batch_size: int = 32
    epochs: int = 10
    steps_per_epoch: int = 50
    validation_steps: int = 10
    val_fraction: float = 0.1
    seed: int = 0
    variant: str = "fused"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        for name in ("learning_rate", "epsilon", "batch_size", "epochs", "steps_per_epoch", "validation_steps"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("beta1", "beta2", "val_fraction"):
            if not 0.0 < getattr(self, name) < 1.0:
                raise ValueError(f"{name} must lie in (0, 1), got {getattr(self, name)}")


# ---------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros(cls, params: LanternParams) -> "AdamState":
        return cls({k: np.zeros_like(p.data) for k, p in params.items()},
                   {k: np.zeros_like(p.data) for k, p in params.items()})


def adam_step(
    params: LanternParams,
    grads: dict[str, np.ndarray],
    state: AdamState,
    cfg: TrainConfig,
) -> tuple[LanternParams, AdamState]:
    """One bias-corrected Adam update; returns fresh parameter tensors and state."""
    t = state.t + 1
    b1, b2 = cfg.beta1, cfg.beta2
    new_params: LanternParams = {}
    new_m, new_v = {}, {}
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise ShapeError(f"gradient/moment shape for {name} does not match parameter {p.shape}")
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * (g * g)
        m_hat = m / (1.0 - b1**t)
        v_hat = v / (1.0 - b2**t)
        data = p.data - cfg.learning_rate * m_hat / (np.sqrt(v_hat) + cfg.epsilon)
        new_params[name] = Tensor(data.astype(p.dtype), requires_grad=True, name=name)
        new_m[name], new_v[name] = m, v
    return new_params, AdamState(new_m, new_v, t)


# ---------------------------------------------------------------------------
# variants


_VARIANT_PREFIXES = {
    "survey_only": ("survey_enc.", "fusion_norm.", "head."),
    "external_only": ("external_enc.", "fusion_norm.", "head."),
}


@dataclass(frozen=True)
class ModelAssembly:
    """One of the three ablation setups over a shared parameter layout."""

    variant: str
    cfg: LanternConfig

    def param_names(self) -> list[str]:
        names = list(M.param_shapes(self.cfg))
        if self.variant == "fused":
            return names
        return [n for n in names if n.startswith(_VARIANT_PREFIXES[self.variant])]

    def param_count(self) -> int:
        shapes = M.param_shapes(self.cfg)
        return M.count_params({n: shapes[n] for n in self.param_names()})

    def init_params(self, seed: int = 0, dtype=np.float64) -> LanternParams:
        full = M.init_params(self.cfg, seed, dtype)
        return {n: full[n] for n in self.param_names()}

    def forward(self, x_s, x_e, params: LanternParams, training: bool = False, rng=None,
                hooks: Hooks = DEFAULT_HOOKS) -> tuple[Tensor, Optional[Tensor]]:
        if self.variant == "fused":
            return M.forward(x_s, x_e, params, self.cfg, training, rng, hooks)
        branch, x = ("survey", x_s) if self.variant == "survey_only" else ("external", x_e)
        dtype = params["head.w"].dtype
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=dtype))
        h = M.encode(branch, x, params)
        h = M.regularize(h, params, self.cfg, training, rng, hooks)
        return M.output_head(h, params), None

    def predict(self, x_s: np.ndarray, x_e: np.ndarray, params: LanternParams, batch_size: int = 1024) -> np.ndarray:
        """Eval-mode probabilities for a whole array, batched."""
        out = []
        for start in range(0, len(x_s), batch_size):
            y, _ = self.forward(x_s[start:start + batch_size], x_e[start:start + batch_size], params)
            out.append(y.data)
        return np.concatenate(out) if out else np.zeros((0, self.cfg.n_keys))


def build_variant(variant: str, cfg: LanternConfig) -> ModelAssembly:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return ModelAssembly(variant, cfg)


def model_config_for(manifest: DatasetManifest, **overrides) -> LanternConfig:
    return LanternConfig(manifest.survey_dim, manifest.external_dim, manifest.n_keys, **overrides)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class Batch:
    x_s: np.ndarray
    x_e: np.ndarray
    mask: np.ndarray


def train_step(
    batch: Batch,
    params: LanternParams,
    state: AdamState,
    assembly: ModelAssembly,
    cfg: TrainConfig,
    rng: np.random.Generator,
) -> tuple[float, LanternParams, AdamState]:
    """Training-mode forward, masked loss, backward and one Adam update.

    A batch without any asked key carries no signal and leaves the
    parameters and optimizer state untouched.
    """
    for p in params.values():
        p.grad = None
    with ad.Tape() as tape:
        y_hat, _ = assembly.forward(batch.x_s, batch.x_e, params, training=True, rng=rng)
        loss = M.masked_bce_loss(y_hat, batch.mask)
    if not np.any(batch.mask):
        return float(loss.data), params, state
    ad.backward(loss, tape, wrt=params.values())
    grads = {name: p.grad for name, p in params.items()}
    params, state = adam_step(params, grads, state, cfg)
    return float(loss.data), params, state


class BatchStream:
    """Endless shuffled stream of index batches; reshuffles on every pass."""

    def __init__(self, indices: np.ndarray, batch_size: int, rng: np.random.Generator):
        if len(indices) == 0:
            raise ValueError("cannot stream batches from an empty index set")
        self.indices = np.asarray(indices)
        self.batch_size = batch_size
        self.rng = rng
        self._order = self.rng.permutation(self.indices)
        self._pos = 0

    def __iter__(self):
        return self

    def __next__(self) -> np.ndarray:
        parts = []
        need = self.batch_size
        while need:
            if self._pos == len(self._order):
                self._order = self.rng.permutation(self.indices)
                self._pos = 0
            take = min(need, len(self._order) - self._pos)
            parts.append(self._order[self._pos:self._pos + take])
            self._pos += take
            need -= take
        return np.concatenate(parts)


def split_users(n_users: int, val_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic train/validation split of user indices."""
    perm = np.random.default_rng([seed, 1]).permutation(n_users)
    n_val = int(round(val_fraction * n_users))
    if n_users > 1:
        n_val = min(max(n_val, 1), n_users - 1)
    else:
        n_val = 0
    return np.sort(perm[n_val:]), np.sort(perm[:n_val])


@dataclass
class EpochLog:
    epoch: int
    train_loss: float
    val_loss: float


@dataclass
class TrainResult:
    assembly: ModelAssembly
    params: LanternParams
    state: AdamState
    log: list[EpochLog]
    train_idx: np.ndarray
    val_idx: np.ndarray

    def log_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss"]
        lines += [f"{e.epoch},{e.train_loss!r},{e.val_loss!r}" for e in self.log]
        return "\n".join(lines) + "\n"


def _arrays(dataset) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if isinstance(dataset, tuple) and len(dataset) == 2 and isinstance(dataset[0], DatasetManifest):
        dataset = dataset[1]
    if isinstance(dataset, tuple) and len(dataset) == 3:
        return dataset
    if not dataset:
        raise ValueError("cannot train on an empty dataset")
    return stack(dataset)


def train(
    dataset,
    train_cfg: TrainConfig,
    model_cfg: LanternConfig,
    dtype=np.float64,
) -> TrainResult:
    """Train ``train_cfg.variant`` on ``dataset``.

    ``dataset`` is ``(manifest, records)``, a record list, or an
    ``(X_s, X_e, M)`` array triple.  Everything random derives from
    ``train_cfg.seed``.
    """
    x_s, x_e, masks = _arrays(dataset)
    if len(x_s) == 0:
        raise ValueError("cannot train on an empty dataset")
    x_s, x_e = x_s.astype(dtype), x_e.astype(dtype)
    assembly = build_variant(train_cfg.variant, model_cfg)
    seed = train_cfg.seed
    params = assembly.init_params(seed, dtype)
    state = AdamState.zeros(params)
    train_idx, val_idx = split_users(len(x_s), train_cfg.val_fraction, seed)
    train_stream = BatchStream(train_idx, train_cfg.batch_size, np.random.default_rng([seed, 2]))
    val_stream = BatchStream(val_idx if len(val_idx) else train_idx, train_cfg.batch_size,
                             np.random.default_rng([seed, 3]))
    noise_rng = np.random.default_rng([seed, 4])

    history: list[EpochLog] = []
    for epoch in range(1, train_cfg.epochs + 1):
        losses = []
        for _ in range(train_cfg.steps_per_epoch):
            idx = next(train_stream)
            batch = Batch(x_s[idx], x_e[idx], masks[idx])
            loss, params, state = train_step(batch, params, state, assembly, train_cfg, noise_rng)
            losses.append(loss)
        val_losses = []
        for _ in range(train_cfg.validation_steps):
            idx = next(val_stream)
            y_hat, _ = assembly.forward(x_s[idx], x_e[idx], params)
            val_losses.append(float(M.masked_bce_loss(y_hat, masks[idx]).data))
        entry = EpochLog(epoch, float(np.mean(losses)), float(np.mean(val_losses)))
        log.debug("%s epoch %d train %.5f val %.5f", train_cfg.variant, epoch, entry.train_loss, entry.val_loss)
        history.append(entry)
    return TrainResult(assembly, params, state, history, train_idx, val_idx)


# ---------------------------------------------------------------------------
# checkpoints

MAGIC = b"LNTN"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}
_CONFIG_ENTRY = "__configs__"


class CheckpointError(ValueError):
    """The checkpoint container is unreadable; the message names the defect."""


@dataclass
class Checkpoint:
    params: LanternParams
    state: Optional[AdamState] = None
    configs: dict = field(default_factory=dict)


def _entries(params: LanternParams, state: Optional[AdamState], configs: dict):
    for name, p in params.items():
        yield name, p.data
    if state is not None:
        yield "adam/t", np.array(state.t, dtype=np.int64)
        for name in params:
            yield f"adam/m/{name}", state.m[name]
            yield f"adam/v/{name}", state.v[name]
    if configs:
        blob = json.dumps(configs, sort_keys=True).encode("utf-8")
        yield _CONFIG_ENTRY, np.frombuffer(blob, dtype=np.uint8)


def save_checkpoint(path, params: LanternParams, state: Optional[AdamState] = None, configs: Optional[dict] = None) -> None:
    """Write ``LNTN`` magic, format version, then named little-endian tensors."""
    entries = list(_entries(params, state, configs or {}))
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(entries))]
    for name, arr in entries:
        arr = np.asarray(arr)
        dt = arr.dtype.newbyteorder("<") if arr.dtype.kind == "f" or arr.dtype.kind == "i" else arr.dtype
        if dt not in _DTYPE_CODES:
            raise TypeError(f"unsupported dtype {arr.dtype} for checkpoint entry {name}")
        raw = np.ascontiguousarray(arr, dtype=dt).tobytes()
        encoded = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(encoded)) + encoded)
        chunks.append(struct.pack("<BB", _DTYPE_CODES[dt], arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(struct.pack("<Q", len(raw)) + raw)
    Path(path).write_bytes(b"".join(chunks))


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointError(f"checkpoint truncated while reading {what} at byte {self.pos}")
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def load_checkpoint(path) -> Checkpoint:
    buf = Path(path).read_bytes()
    r = _Reader(buf)
    if r.take(4, "magic") != MAGIC:
        raise CheckpointError(f"bad magic bytes in {path}: expected {MAGIC!r}")
    version, n = r.unpack("<II", "header")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})")
    raw_entries: dict[str, np.ndarray] = {}
    for _ in range(n):
        (name_len,) = r.unpack("<H", "entry name length")
        name = r.take(name_len, "entry name").decode("utf-8")
        code, ndim = r.unpack("<BB", f"header of {name}")
        if code not in _DTYPES:
            raise CheckpointError(f"unknown dtype code {code} for entry {name}")
        shape = r.unpack(f"<{ndim}Q", f"shape of {name}")
        (nbytes,) = r.unpack("<Q", f"size of {name}")
        dt = _DTYPES[code]
        expected = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        if nbytes != expected:
            raise CheckpointError(f"entry {name} declares {nbytes} bytes but its shape needs {expected}")
        data = r.take(nbytes, f"data of {name}")
        raw_entries[name] = np.frombuffer(data, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != len(buf):
        raise CheckpointError(f"{len(buf) - r.pos} trailing bytes after the last entry")

    configs = {}
    if _CONFIG_ENTRY in raw_entries:
        configs = json.loads(raw_entries.pop(_CONFIG_ENTRY).tobytes().decode("utf-8"))
    state = None
    if "adam/t" in raw_entries:
        t = int(raw_entries.pop("adam/t"))
        m = {k[len("adam/m/"):]: v for k, v in raw_entries.items() if k.startswith("adam/m/")}
        v = {k[len("adam/v/"):]: a for k, a in raw_entries.items() if k.startswith("adam/v/")}
        state = AdamState(m, v, t)
    params = {
        name: Tensor(arr, requires_grad=True, name=name)
        for name, arr in raw_entries.items()
        if not name.startswith("adam/")
    }
    return Checkpoint(params, state, configs)
