"""The dual attentive transformer and its ablation variants.

Per second, a spatial-spectral encoder layer runs over the ``(channels,
bands)`` feature map. Its output is flattened, embedded to ``d_model``,
prefixed with a trainable CLS vector, position-encoded and passed through a
temporal encoder layer. The CLS output feeds a linear classifier and, behind
a gradient reversal layer, a small domain discriminator.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from .attention import (
    AttentionConfig,
    ConfigError,
    EncoderLayer,
    Linear,
    Module,
    positional_encoding,
)
from .numerics import (
    DimensionError,
    Tensor,
    UsageError,
    broadcast_to,
    concat,
    grad_reverse,
    relu,
    scatter_rows,
    sigmoid,
)

VARIANTS = ("full", "temp_only", "spat_temp", "spec_temp", "spat_spec_no_temp", "no_positional_encoding")

_SS_POLICY = {
    "full": "alternate_spatial_spectral",
    "spat_temp": "none",
    "spec_temp": "spectral_only",
    "spat_spec_no_temp": "alternate_spatial_spectral",
    "no_positional_encoding": "alternate_spatial_spectral",
}


@dataclass(frozen=True)
class DuAConfig:
    """Dimensions and variant of a model instance.

    Defaults are the full-size configuration: 63 channels x 10 bands, six
    spatial-spectral heads of width 10 with a 10-40-10 FFN, a 630 -> 128
    embedding and a three-head temporal layer (head width 128, 128-512-128
    FFN).
    """

    n_channels: int = 63
    n_bands: int = 10
    n_classes: int = 2
    variant: str = "full"
    ss_heads: int = 6
    ss_head_dim: int = 10
    ss_ffn: int = 40
    ss_layers: int = 1
    d_model: int = 128
    t_heads: int = 3
    t_head_dim: int = 128
    t_ffn: int = 512
    t_layers: int = 1
    disc_hidden: int = 64
    residual: str = "literal"
    max_len: int = 10000
    ln_eps: float = 1e-5
    cls_init: float = 0.02

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}; choose from {VARIANTS}")
        if self.n_classes < 2:
            raise ConfigError("n_classes must be >= 2")
        if self.d_model % 2:
            raise ConfigError("d_model must be even for positional encoding")

    @property
    def flat_dim(self) -> int:
        return self.n_channels * self.n_bands

    @property
    def uses_spatial_spectral(self) -> bool:
        return self.variant != "temp_only"

    @property
    def uses_temporal(self) -> bool:
        return self.variant != "spat_spec_no_temp"

    @property
    def uses_positional_encoding(self) -> bool:
        return self.variant not in ("no_positional_encoding", "spat_spec_no_temp")

    def spatial_spectral_config(self) -> AttentionConfig:
        return AttentionConfig(
            d_model=self.n_bands,
            n_heads=self.ss_heads,
            d_head=self.ss_head_dim,
            ffn_hidden=self.ss_ffn,
            transposed_head_policy=_SS_POLICY.get(self.variant, "none"),
            residual=self.residual,
            ln_eps=self.ln_eps,
        )

    def temporal_config(self) -> AttentionConfig:
        return AttentionConfig(
            d_model=self.d_model,
            n_heads=self.t_heads,
            d_head=self.t_head_dim,
            ffn_hidden=self.t_ffn,
            transposed_head_policy="none",
            residual=self.residual,
            ln_eps=self.ln_eps,
        )


@dataclass
class GrlState:
    """Strength of the gradient reversal; ``lam >= 0``."""

    lam: float = 0.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("GRL lambda must be non-negative")


def grl(z: Tensor, state: GrlState) -> Tensor:
    return grad_reverse(z, state.lam)


@dataclass
class ModelOutput:
    class_logits: Tensor
    domain_prob: Tensor
    features: Tensor


class Stack(Module):
    """Sequential encoder layers sharing one configuration."""

    def __init__(self, cfg: AttentionConfig, depth: int, rng, dtype):
        self.depth = depth
        for i in range(depth):
            setattr(self, f"layer{i}", EncoderLayer(cfg, rng, dtype))

    def __call__(self, x, mask=None):
        for i in range(self.depth):
            x = getattr(self, f"layer{i}")(x, mask)
        return x


class Discriminator(Module):
    def __init__(self, d_in: int, hidden: int, rng, dtype):
        self.hidden = Linear(d_in, hidden, rng, dtype)
        self.out = Linear(hidden, 1, rng, dtype)

    def __call__(self, z: Tensor) -> Tensor:
        return sigmoid(self.out(relu(self.hidden(z)))).reshape(-1)


class DuAModel(Module):
    """Trainable model; ``forward`` consumes padded ``(b, t, c, f)`` batches."""

    def __init__(self, cfg: DuAConfig | None = None, seed: int = 0, dtype=np.float32):
        cfg = cfg or DuAConfig()
        self.cfg = cfg
        self.dtype = np.dtype(dtype)
        rng = np.random.default_rng(seed)
        if cfg.uses_spatial_spectral:
            self.spatial_spectral = Stack(cfg.spatial_spectral_config(), cfg.ss_layers, rng, dtype)
        else:
            self.spatial_spectral = None
        self.embedding = Linear(cfg.flat_dim, cfg.d_model, rng, dtype)
        if cfg.uses_temporal:
            self.cls = Tensor(rng.uniform(-cfg.cls_init, cfg.cls_init, size=cfg.d_model).astype(dtype),
                              requires_grad=True)
            self.temporal = Stack(cfg.temporal_config(), cfg.t_layers, rng, dtype)
        else:
            self.cls = None
            self.temporal = None
        self.classifier = Linear(cfg.d_model, cfg.n_classes, rng, dtype)
        self.discriminator = Discriminator(cfg.d_model, cfg.disc_hidden, rng, dtype)
        self._pe = None

    # -- pieces ------------------------------------------------------------
    def spatial_spectral_forward(self, x_sec) -> Tensor:
        """``(..., c, f) -> (..., c, f)``; the identity for ``temp_only``."""
        x = x_sec if isinstance(x_sec, Tensor) else Tensor(np.asarray(x_sec, dtype=self.dtype))
        if x.shape[-2:] != (self.cfg.n_channels, self.cfg.n_bands):
            raise DimensionError(
                f"expected per-second shape ({self.cfg.n_channels}, {self.cfg.n_bands}), got {x.shape[-2:]}"
            )
        if self.spatial_spectral is None:
            return x
        return self.spatial_spectral(x)

    def positional_table(self, length: int) -> np.ndarray:
        if length > self.cfg.max_len:
            raise UsageError(f"sequence of {length} positions exceeds max_len {self.cfg.max_len}")
        if self._pe is None or self._pe.shape[0] < length:
            size = min(self.cfg.max_len, max(length, 1024))
            self._pe = positional_encoding(size, self.cfg.d_model, self.dtype)
        return self._pe[:length]

    def temporal_forward(self, seq: Tensor, mask) -> Tensor:
        """Embedded sequences ``(b, t, d)`` with validity ``(b, t)`` -> CLS output ``(b, d)``.

        Without a temporal network the masked mean of the embedded seconds
        stands in for the CLS output.
        """
        mask = np.asarray(mask, dtype=bool)
        b, t, d = seq.shape
        if t == 0 or not mask.any(axis=1).all():
            raise UsageError("every trial needs at least one second")
        if self.temporal is None:
            counts = mask.sum(axis=1, keepdims=True).astype(self.dtype)
            return (seq * mask[..., None].astype(self.dtype)).sum(axis=1) / Tensor(counts)
        cls = broadcast_to(self.cls.reshape(1, 1, d), (b, 1, d))
        x = concat([cls, seq], axis=1)
        if self.cfg.uses_positional_encoding:
            x = x + Tensor(self.positional_table(t + 1))
        full_mask = np.concatenate([np.ones((b, 1), dtype=bool), mask], axis=1)
        h = self.temporal(x, full_mask)
        return h[:, 0, :]

    def embed_seconds(self, features: np.ndarray, lengths) -> tuple[Tensor, np.ndarray]:
        """Spatial-spectral + embedding on the valid seconds only, re-padded to ``(b, t, d)``."""
        features = np.asarray(features, dtype=self.dtype)
        if features.ndim != 4:
            raise DimensionError(f"expected (b, t, c, f) features, got shape {features.shape}")
        b, t, c, f = features.shape
        lengths = np.asarray(lengths, dtype=np.int64)
        if lengths.shape != (b,) or (lengths < 1).any() or (lengths > t).any():
            raise UsageError("lengths must be in [1, t] for every row")
        mask = np.arange(t)[None, :] < lengths[:, None]
        rows = np.flatnonzero(mask.reshape(-1))
        # (b, t, c, f) -> (b*t, c, f), valid seconds only
        per_second = Tensor(features.reshape(b * t, c, f)[rows])
        L = self.spatial_spectral_forward(per_second)
        L = self.embedding(L.reshape(len(rows), c * f))
        seq = scatter_rows(L, rows, b * t).reshape(b, t, self.cfg.d_model)
        return seq, mask

    def forward(self, features, lengths, grl_lambda: float = 0.0) -> ModelOutput:
        seq, mask = self.embed_seconds(features, lengths)
        z = self.temporal_forward(seq, mask)
        logits = self.classifier(z)
        prob = self.discriminator(grad_reverse(z, grl_lambda))
        return ModelOutput(logits, prob, z)

    __call__ = forward

    def predict_logits(self, features, lengths) -> np.ndarray:
        seq, mask = self.embed_seconds(features, lengths)
        return self.classifier(self.temporal_forward(seq, mask)).data

    # -- bookkeeping ---------------------------------------------------------
    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.data for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: checkpoint shape {arr.shape} != model shape {p.shape}")
            p.data = arr.astype(self.dtype, copy=True)

    def copy(self) -> "DuAModel":
        clone = DuAModel(self.cfg, dtype=self.dtype)
        clone.load_state_dict(self.state_dict())
        return clone


SUBMODULES = ("spatial_spectral", "embedding", "cls", "temporal", "classifier", "discriminator")


def count_params(model: DuAModel) -> dict[str, int]:
    """Exact trainable parameter count per submodule plus ``total``."""
    counts = {}
    for name in SUBMODULES:
        part = getattr(model, name)
        if part is None:
            counts[name] = 0
        elif isinstance(part, Tensor):
            counts[name] = part.size
        else:
            counts[name] = part.num_parameters()
    counts["total"] = sum(counts.values())
    return counts


def format_summary(model: DuAModel) -> str:
    counts = count_params(model)
    lines = [f"variant: {model.cfg.variant}"]
    for name, n in counts.items():
        lines.append(f"  {name:<16} {n:>10,d}  ({n / 1000:.2f}K)")
    return "\n".join(lines)


# -- checkpoints ---------------------------------------------------------------

CKPT_MAGIC = b"DUACKPT\x00"
CKPT_VERSION = 1


class CheckpointError(IOError):
    pass


def save_checkpoint(model: DuAModel, path, extra: dict | None = None) -> None:
    """Write header JSON then each parameter as ``name, ndim, shape, <f4 data``."""
    header = json.dumps({"config": asdict(model.cfg), "extra": extra or {}}, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    buf.write(struct.pack("<II", CKPT_VERSION, len(header)))
    buf.write(header)
    params = list(model.named_parameters())
    buf.write(struct.pack("<I", len(params)))
    for name, p in params:
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", p.ndim))
        buf.write(struct.pack(f"<{p.ndim}I", *p.shape))
        buf.write(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path, dtype=np.float32) -> tuple[DuAModel, dict]:
    blob = Path(path).read_bytes()
    if blob[:8] != CKPT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    version, hlen = struct.unpack_from("<II", blob, 8)
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    pos = 16
    header = json.loads(blob[pos:pos + hlen])
    pos += hlen
    cfg = DuAConfig(**header["config"])
    (count,) = struct.unpack_from("<I", blob, pos)
    pos += 4
    state = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", blob, pos)
        pos += 2
        name = blob[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", blob, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", blob, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        state[name] = np.frombuffer(blob, dtype="<f4", count=n, offset=pos).reshape(shape)
        pos += 4 * n
    model = DuAModel(cfg, dtype=dtype)
    model.load_state_dict(state)
    return model, header.get("extra", {})


def with_variant(cfg: DuAConfig, variant: str) -> DuAConfig:
    return replace(cfg, variant=variant)
