"""Shared-encoder, dual-head MLP with part-wise freezing and an EMA shadow."""
from __future__ import annotations

import copy
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import DimensionError, Tensor

PARTS = ("encoder", "head1", "head2")


class ModelStateError(RuntimeError):
    pass


class ModelConfigError(ValueError):
    pass


@dataclass
class EncoderConfig:
    input_dim: int
    num_classes: int
    hidden_dims: list[int] = field(default_factory=lambda: [64, 64])
    activation: str = "relu"

    def __post_init__(self):
        self.hidden_dims = [int(h) for h in self.hidden_dims]
        if self.input_dim < 1 or self.num_classes < 1:
            raise ModelConfigError("input_dim and num_classes must be >= 1")
        if not self.hidden_dims or any(h < 1 for h in self.hidden_dims):
            raise ModelConfigError(f"hidden_dims must be a nonempty list of positive ints, got {self.hidden_dims}")
        if self.activation != "relu":
            raise ModelConfigError(f"unsupported activation {self.activation!r}")

    @property
    def repr_dim(self) -> int:
        return self.hidden_dims[-1]


def _uniform_layer(rng: np.random.Generator, fan_in: int, fan_out: int) -> tuple[Tensor, Tensor]:
    bound = np.sqrt(6.0 / fan_in)
    w = Tensor(rng.uniform(-bound, bound, size=(fan_in, fan_out)), requires_grad=True)
    b = Tensor(np.zeros((1, fan_out)), requires_grad=True)
    return w, b


class DualHeadModel:
    """Encoder g (relu MLP) feeding two linear heads f1 and f2.

    Parameters live in ``self.params`` keyed ``encoder.{i}.weight`` etc.; the
    part a parameter belongs to is the prefix before the first dot.
    """

    def __init__(self, cfg: EncoderConfig, params: dict[str, Tensor]):
        self.cfg = cfg
        self.params = params
        self.frozen = {part: False for part in PARTS}

    @classmethod
    def init(cls, cfg: EncoderConfig, seed: int) -> "DualHeadModel":
        rng = np.random.default_rng(seed)
        params: dict[str, Tensor] = {}
        widths = [cfg.input_dim, *cfg.hidden_dims]
        for i, (fan_in, fan_out) in enumerate(zip(widths[:-1], widths[1:])):
            params[f"encoder.{i}.weight"], params[f"encoder.{i}.bias"] = _uniform_layer(rng, fan_in, fan_out)
        for head in ("head1", "head2"):
            params[f"{head}.weight"], params[f"{head}.bias"] = _uniform_layer(rng, cfg.repr_dim, cfg.num_classes)
        return cls(cfg, params)

    def part_of(self, name: str) -> str:
        return name.split(".", 1)[0]

    def part_params(self, part: str) -> list[Tensor]:
        return [p for n, p in self.params.items() if self.part_of(n) == part]

    def set_frozen(self, part: str, frozen: bool) -> None:
        if part not in self.frozen:
            raise KeyError(f"unknown part {part!r}; expected one of {PARTS}")
        self.frozen[part] = bool(frozen)

    def unfreeze_all(self) -> None:
        for part in PARTS:
            self.frozen[part] = False

    def trainable_parameters(self) -> list[Tensor]:
        return [p for n, p in self.params.items() if not self.frozen[self.part_of(n)]]

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def encode(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.cfg.input_dim:
            raise DimensionError(f"expected input of width {self.cfg.input_dim}, got shape {x.shape}")
        h = x
        for i in range(len(self.cfg.hidden_dims)):
            h = T.relu(T.matmul(h, self.params[f"encoder.{i}.weight"]) + self.params[f"encoder.{i}.bias"])
        return h

    def head(self, which: int, z: Tensor) -> Tensor:
        key = f"head{which}"
        return T.matmul(z, self.params[f"{key}.weight"]) + self.params[f"{key}.bias"]

    def forward(self, x) -> tuple[Tensor, Tensor, Tensor]:
        z = self.encode(x)
        return z, self.head(1, z), self.head(2, z)

    __call__ = forward

    def state(self) -> dict[str, np.ndarray]:
        return {n: p.values.copy() for n, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for n, p in self.params.items():
            if state[n].shape != p.shape:
                raise ModelStateError(f"shape mismatch for {n}: {state[n].shape} vs {p.shape}")
            p.values = state[n].copy()

    def snapshot(self) -> "DualHeadModel":
        """Detached deep copy (frozen flags included)."""
        clone = DualHeadModel(copy.deepcopy(self.cfg),
                              {n: Tensor(p.values.copy(), requires_grad=True) for n, p in self.params.items()})
        clone.frozen = dict(self.frozen)
        return clone

    def logits1(self, x: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return self.head(1, self.encode(x)).values

    def predict(self, x: np.ndarray) -> np.ndarray:
        # np.argmax returns the first maximum, i.e. lowest class index on ties
        return np.argmax(self.logits1(x), axis=1)


def init_model(cfg: EncoderConfig, seed: int) -> DualHeadModel:
    return DualHeadModel.init(cfg, seed)


def set_frozen(m: DualHeadModel, part: str, frozen: bool) -> None:
    m.set_frozen(part, frozen)


class EmaModel:
    """Stochastically-updated exponential moving average of a DualHeadModel."""

    def __init__(self, model: DualHeadModel, decay: float = 0.999, update_prob: float = 0.05):
        if not 0.0 <= decay < 1.0:
            raise ModelConfigError(f"decay must lie in [0, 1), got {decay}")
        if not 0.0 < update_prob <= 1.0:
            raise ModelConfigError(f"update_prob must lie in (0, 1], got {update_prob}")
        self.decay = decay
        self.update_prob = update_prob
        self.shadow = model.snapshot()
        self.shadow.frozen = {part: True for part in PARTS}

    def apply_update(self, model: DualHeadModel) -> None:
        for name, p in model.params.items():
            s = self.shadow.params.get(name)
            if s is None or s.shape != p.shape:
                raise ModelStateError(f"EMA shadow does not mirror working parameter {name}")
            s.values = self.decay * s.values + (1.0 - self.decay) * p.values

    def maybe_update(self, model: DualHeadModel, rng: np.random.Generator) -> bool:
        if set(model.params) != set(self.shadow.params):
            raise ModelStateError("EMA shadow parameter names do not match working model")
        if self.update_prob < 1.0 and rng.random() >= self.update_prob:
            return False
        self.apply_update(model)
        return True


def ema_maybe_update(ema: EmaModel, m: DualHeadModel, rng: np.random.Generator) -> bool:
    return ema.maybe_update(m, rng)


def predict(m: DualHeadModel, x, use_ema: bool = False, ema: EmaModel | None = None) -> np.ndarray:
    if use_ema:
        if ema is None:
            raise ModelConfigError("use_ema requested but no EMA model supplied")
        return ema.shadow.predict(np.asarray(x, dtype=np.float64))
    return m.predict(np.asarray(x, dtype=np.float64))


# Checkpoint layout (little-endian):
#   magic b"DBCK", u32 version, u32 header_len, header_len bytes of UTF-8 JSON
#   (encoder config), u32 tensor count, then per tensor:
#   u32 name_len, name bytes, u32 ndim, ndim x u32 extents, prod(extents) x f64.
CKPT_MAGIC = b"DBCK"
CKPT_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_checkpoint(m: DualHeadModel, path) -> None:
    header = json.dumps(asdict(m.cfg), sort_keys=True).encode()
    chunks = [CKPT_MAGIC, struct.pack("<II", CKPT_VERSION, len(header)), header,
              struct.pack("<I", len(m.params))]
    for name, p in m.params.items():
        raw = name.encode()
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{p.ndim}I", p.ndim, *p.shape))
        chunks.append(np.ascontiguousarray(p.values, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path) -> DualHeadModel:
    data = Path(path).read_bytes()
    try:
        if data[:4] != CKPT_MAGIC:
            raise CheckpointError("bad checkpoint magic")
        version, hlen = struct.unpack_from("<II", data, 4)
        if version != CKPT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        off = 12
        cfg = EncoderConfig(**json.loads(data[off:off + hlen].decode()))
        off += hlen
        (count,) = struct.unpack_from("<I", data, off)
        off += 4
        params = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", data, off)
            off += 4
            name = data[off:off + nlen].decode()
            off += nlen
            (ndim,) = struct.unpack_from("<I", data, off)
            off += 4
            shape = struct.unpack_from(f"<{ndim}I", data, off)
            off += 4 * ndim
            n = int(np.prod(shape))
            if off + 8 * n > len(data):
                raise CheckpointError(f"truncated tensor {name}")
            values = np.frombuffer(data, dtype="<f8", count=n, offset=off).reshape(shape).astype(np.float64)
            off += 8 * n
            params[name] = Tensor(values, requires_grad=True)
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from exc
    return DualHeadModel(cfg, params)
