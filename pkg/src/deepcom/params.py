"""Named parameter storage, Gaussian initialization, and checkpoint files.

A checkpoint is a little-endian binary container: the magic string
``DEEPCOM1`` followed by one record per tensor -- u64 name length, UTF-8
name, u64 rank, u64 dims, then float64 values.  Optimizer accumulators
are stored under an ``opt/`` name prefix and scalar bookkeeping (training
phase, step) under ``meta/``.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .numerics import Tensor

CHECKPOINT_MAGIC = b"DEEPCOM1"

# default weight init: zero-mean Gaussian with variance 0.01 (std 0.1);
# the tighter std-0.01 alternative leaves per-position representations so
# close together at desk scale that the span heads never differentiate
INIT_STD = 0.1


class CheckpointError(RuntimeError):
    """Checkpoint file is missing, truncated, or has the wrong version."""


@dataclass
class ModelDims:
    """Width and length settings shared by all networks."""

    d1: int = 256
    d2: int = 128
    hidden: int = 512
    vocab: int = 30004
    len_title: int = 30
    len_body: int = 600
    len_comment: int = 50

    @property
    def pos_word_table(self) -> int:
        # in-sentence positions are clipped to 99 before lookup
        return min(100, self.len_body)

    @property
    def pos_sent_table(self) -> int:
        # sentence indices are clipped to 49
        return min(50, self.len_body)


class ParamStore:
    """Associative map from dotted parameter names to tensors.

    Names are unique and shapes immutable after creation.  Each entry may
    carry one optimizer accumulator array, created lazily by AdaGrad.
    Insertion order is preserved and defines the checkpoint record order.
    """

    def __init__(self):
        self._entries: dict[str, Tensor] = {}
        self.acc: dict[str, np.ndarray] = {}

    def create(
        self,
        name: str,
        shape: tuple[int, ...],
        rng: np.random.Generator | None = None,
        std: float = 0.01,
    ) -> Tensor:
        """Add a parameter, Gaussian-initialized unless ``rng`` is None (zeros)."""
        if name in self._entries:
            raise ValueError(f"duplicate parameter name: {name}")
        if rng is None:
            data = np.zeros(shape, dtype=np.float64)
        else:
            data = rng.normal(0.0, std, size=shape)
        t = Tensor(data)
        self._entries[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def names(self) -> list[str]:
        return list(self._entries)

    def items(self):
        return self._entries.items()

    def tensors(self) -> dict[str, Tensor]:
        return dict(self._entries)

    def group(self, prefix: str) -> dict[str, Tensor]:
        """All parameters under ``prefix.``, keyed by the trailing segment."""
        start = prefix + "."
        return {
            name[len(start):]: t for name, t in self._entries.items() if name.startswith(start)
        }

    def set_values(self, name: str, data: np.ndarray) -> None:
        t = self._entries[name]
        if t.data.shape != data.shape:
            raise ValueError(
                f"shape change for {name}: {t.data.shape} -> {data.shape}"
            )
        t.data = data.astype(np.float64)

    def total_size(self) -> int:
        return sum(t.size for t in self._entries.values())


def _write_record(fh, name: str, data: np.ndarray) -> None:
    raw = name.encode("utf-8")
    fh.write(struct.pack("<Q", len(raw)))
    fh.write(raw)
    fh.write(struct.pack("<Q", data.ndim))
    for d in data.shape:
        fh.write(struct.pack("<Q", d))
    fh.write(np.ascontiguousarray(data, dtype="<f8").tobytes())


def _read_exact(fh, n: int) -> bytes:
    buf = fh.read(n)
    if len(buf) != n:
        raise CheckpointError("truncated checkpoint record")
    return buf


def save_checkpoint(path, stores, meta: dict[str, float] | None = None) -> None:
    """Write one or more stores to a single container file."""
    if isinstance(stores, ParamStore):
        stores = [stores]
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        for store in stores:
            for name, t in store.items():
                _write_record(fh, name, t.data)
        for store in stores:
            for name in sorted(store.acc):
                _write_record(fh, "opt/" + name, store.acc[name])
        for key in sorted(meta or {}):
            _write_record(fh, "meta/" + key, np.asarray(float(meta[key])))


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict[str, np.ndarray], dict[str, float]]:
    """Read a checkpoint into (parameters, optimizer accumulators, meta)."""
    params: dict[str, np.ndarray] = {}
    acc: dict[str, np.ndarray] = {}
    meta: dict[str, float] = {}
    try:
        fh = open(path, "rb")
    except OSError as e:
        raise CheckpointError(f"cannot open checkpoint {path}: {e}") from e
    with fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise CheckpointError(
                f"bad checkpoint magic {magic!r} in {path} (expected {CHECKPOINT_MAGIC!r})"
            )
        while True:
            head = fh.read(8)
            if not head:
                break
            (name_len,) = struct.unpack("<Q", head)
            name = _read_exact(fh, name_len).decode("utf-8")
            (rank,) = struct.unpack("<Q", _read_exact(fh, 8))
            shape = tuple(
                struct.unpack("<Q", _read_exact(fh, 8))[0] for _ in range(rank)
            )
            count = int(np.prod(shape)) if shape else 1
            data = np.frombuffer(_read_exact(fh, 8 * count), dtype="<f8").reshape(shape)
            data = data.astype(np.float64)
            if name.startswith("opt/"):
                acc[name[4:]] = data
            elif name.startswith("meta/"):
                meta[name[5:]] = float(data.reshape(-1)[0])
            else:
                params[name] = data
    return params, acc, meta


def restore_stores(stores, path, allow_extra: bool = False) -> dict[str, float]:
    """Load checkpoint values into already-built stores; returns meta.

    Records are routed to stores by name; with ``allow_extra`` a file may
    carry parameter groups (for example the baseline network) that none of
    the given stores declare.
    """
    if isinstance(stores, ParamStore):
        stores = [stores]
    params, acc, meta = load_checkpoint(path)
    declared = set()
    for store in stores:
        declared.update(store.names())
    missing = declared - set(params)
    extra = set(params) - declared
    if missing or (extra and not allow_extra):
        raise CheckpointError(
            f"checkpoint does not match model: missing={sorted(missing)[:5]} "
            f"extra={sorted(extra)[:5]}"
        )
    for store in stores:
        for name in store.names():
            store.set_values(name, params[name])
        store.acc = {k: v.copy() for k, v in acc.items() if k in store}
    return meta


@dataclass
class OptimizerState:
    """AdaGrad or plain SGD over one parameter store."""

    store: ParamStore
    mode: str = "adagrad"
    lr: float = 0.15
    acc0: float = 0.1


def adagrad_update(opt: OptimizerState, grads: dict[str, np.ndarray]) -> None:
    """acc += g^2; theta -= lr * g / sqrt(acc), with acc starting at acc0."""
    for name, g in grads.items():
        t = opt.store[name]
        if g.shape != t.data.shape:
            raise ValueError(f"gradient shape {g.shape} vs param {t.data.shape} for {name}")
        acc = opt.store.acc.get(name)
        if acc is None:
            acc = np.full_like(t.data, opt.acc0)
            opt.store.acc[name] = acc
        acc += g * g
        t.data = t.data - opt.lr * g / np.sqrt(acc)


def sgd_update(opt: OptimizerState, grads: dict[str, np.ndarray]) -> None:
    for name, g in grads.items():
        t = opt.store[name]
        if g.shape != t.data.shape:
            raise ValueError(f"gradient shape {g.shape} vs param {t.data.shape} for {name}")
        t.data = t.data - opt.lr * g
