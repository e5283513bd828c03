"""TIM-Net assembled from the differentiable core.

Two stacks of temporal-aware blocks (TABs) run over the feature sequence and
its time reversal. Block ``j`` (1-based) uses dilation ``2**(j-1)``; its two
conv sub-blocks produce a sigmoid attention map that gates the block input.
Pooled per-block features from both directions are fused with trainable
weights and classified by one dense layer.
"""
from __future__ import annotations

import io
import struct
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .diffcore import BatchNormState, DiffValue, RngStream

VARIANTS = ("full", "tcn_baseline", "no_bd", "no_ms", "no_df")
VARIANT_ALIASES = {"tcn": "tcn_baseline", "no-bd": "no_bd", "no-ms": "no_ms", "no-df": "no_df"}


def normalize_variant(name: str) -> str:
    name = VARIANT_ALIASES.get(name, name)
    if name not in VARIANTS:
        raise ValueError(f"unknown variant {name!r}; choose from {', '.join(VARIANTS)}")
    return name


@dataclass(frozen=True)
class ModelConfig:
    n_classes: int
    input_T: int
    n_tabs: int = 8
    kernel_size: int = 2
    channels: int = 39
    n_features: int = 39
    dropout: float = 0.1
    variant: str = "full"
    bn_momentum: float = 0.99
    bn_eps: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "variant", normalize_variant(self.variant))
        if self.n_tabs < 1:
            raise ValueError("n_tabs must be >= 1")
        if self.kernel_size < 1:
            raise ValueError("kernel_size must be >= 1")
        if self.channels < 1 or self.n_features < 1:
            raise ValueError("channel counts must be positive")
        if self.n_classes < 2:
            raise ValueError("need at least 2 classes")
        if self.input_T < 1:
            raise ValueError("input_T must be >= 1")
        if not 0 <= self.dropout < 1:
            raise ValueError("dropout must be in [0, 1)")

    def dilation(self, j: int) -> int:
        return 2 ** (j - 1)

    @property
    def directions(self) -> tuple[str, ...]:
        return ("fwd",) if self.variant == "no_bd" else ("fwd", "bwd")

    def to_text(self) -> str:
        return "".join(f"{k}={v}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str) -> "ModelConfig":
        types = {f.name: f.type for f in fields(cls)}
        kwargs = {}
        for line in text.splitlines():
            if not line.strip():
                continue
            key, _, raw = line.partition("=")
            if key not in types:
                raise ValueError(f"unknown model config key {key!r}")
            kind = types[key]
            kwargs[key] = int(raw) if kind == "int" else float(raw) if kind == "float" else raw
        return cls(**kwargs)


def receptive_field(n: int, kernel_size: int = 2) -> int:
    """Frames seen by one output of an n-block stack (two convs per block)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return 1 + 2 * (kernel_size - 1) * (2 ** n - 1)


# ---------------------------------------------------------------------------
# parameters


@dataclass
class TabParams:
    index: int
    conv1: DiffValue
    bn1: BatchNormState
    conv2: DiffValue
    bn2: BatchNormState


@dataclass
class TimNetParams:
    entry_w: dict
    entry_b: dict
    tabs: dict
    w_drf: DiffValue
    head_w: DiffValue
    head_b: DiffValue
    cfg: ModelConfig
    labels: list = field(default_factory=list)

    def named_parameters(self) -> dict[str, DiffValue]:
        out = {}
        for d in self.entry_w:
            out[f"{d}.entry.w"] = self.entry_w[d]
            out[f"{d}.entry.b"] = self.entry_b[d]
            for tab in self.tabs[d]:
                p = f"{d}.tab{tab.index}"
                out[f"{p}.conv1.w"] = tab.conv1
                out[f"{p}.bn1.gamma"] = tab.bn1.gamma
                out[f"{p}.bn1.beta"] = tab.bn1.beta
                out[f"{p}.conv2.w"] = tab.conv2
                out[f"{p}.bn2.gamma"] = tab.bn2.gamma
                out[f"{p}.bn2.beta"] = tab.bn2.beta
        out["fusion.w"] = self.w_drf
        out["head.w"] = self.head_w
        out["head.b"] = self.head_b
        return out

    def trainable(self, cfg: ModelConfig) -> dict[str, DiffValue]:
        """Parameters the optimizer updates; fusion weights are frozen or unused in some variants."""
        named = self.named_parameters()
        if cfg.variant in ("no_df", "no_ms"):
            named.pop("fusion.w")
        return named

    def bn_states(self) -> dict[str, BatchNormState]:
        out = {}
        for d, tabs in self.tabs.items():
            for tab in tabs:
                out[f"{d}.tab{tab.index}.bn1"] = tab.bn1
                out[f"{d}.tab{tab.index}.bn2"] = tab.bn2
        return out

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Every stored array, trainable or not, keyed by a stable name."""
        arrays = {k: v.value for k, v in self.named_parameters().items()}
        for name, bn in self.bn_states().items():
            arrays[f"{name}.running_mean"] = bn.running_mean
            arrays[f"{name}.running_var"] = bn.running_var
        return arrays

    def load_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        params = self.named_parameters()
        bns = self.bn_states()
        expected = set(self.state_arrays())
        missing, extra = expected - set(arrays), set(arrays) - expected
        if missing or extra:
            raise ValueError(f"parameter set mismatch: missing {sorted(missing)[:3]}, unexpected {sorted(extra)[:3]}")
        for name, arr in arrays.items():
            if name in params:
                target = params[name].value
            else:
                bn_name, _, stat = name.rpartition(".")
                target = getattr(bns[bn_name], stat)
            if target.shape != arr.shape:
                raise ValueError(f"shape mismatch for {name}: checkpoint {arr.shape}, model {target.shape}")
            target[...] = arr

    def copy(self) -> "TimNetParams":
        twin = _build_params(self.cfg, rng=None)
        twin.load_arrays({k: v.copy() for k, v in self.state_arrays().items()})
        twin.labels = list(self.labels)
        return twin


def _glorot(rng: RngStream | None, shape, fan_in, fan_out):
    if rng is None:
        return np.zeros(shape)
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.generator().uniform(-limit, limit, size=shape)


def _build_params(cfg: ModelConfig, rng: RngStream | None) -> TimNetParams:
    # Each array draws from a stream keyed by its name, so every variant sees
    # the same values for the parameters it shares with the full model.
    def draw(name, shape, fan_in, fan_out):
        return dc.parameter(_glorot(rng.split(name) if rng else None, shape, fan_in, fan_out), name=name)

    k, C, F = cfg.kernel_size, cfg.channels, cfg.n_features
    entry_w, entry_b, tabs = {}, {}, {}
    for d in cfg.directions:
        entry_w[d] = draw(f"{d}.entry.w", (1, F, C), F, C)
        entry_b[d] = dc.parameter(np.zeros(C), name=f"{d}.entry.b")
        blocks = []
        for j in range(1, cfg.n_tabs + 1):
            p = f"{d}.tab{j}"
            blocks.append(
                TabParams(
                    j,
                    draw(f"{p}.conv1.w", (k, C, C), k * C, k * C),
                    BatchNormState.fresh(C, cfg.bn_momentum, cfg.bn_eps, prefix=f"{p}.bn1."),
                    draw(f"{p}.conv2.w", (k, C, C), k * C, k * C),
                    BatchNormState.fresh(C, cfg.bn_momentum, cfg.bn_eps, prefix=f"{p}.bn2."),
                )
            )
        tabs[d] = blocks
    params = TimNetParams(
        entry_w,
        entry_b,
        tabs,
        dc.parameter(np.full(cfg.n_tabs, 1.0 / cfg.n_tabs), name="fusion.w"),
        draw("head.w", (C, cfg.n_classes), C, cfg.n_classes),
        dc.parameter(np.zeros(cfg.n_classes), name="head.b"),
        cfg,
    )
    return params


def init_timnet(cfg: ModelConfig, rng: RngStream) -> TimNetParams:
    """Glorot-uniform conv and dense weights, zero biases, unit BN scale, fusion weights 1/n."""
    return _build_params(cfg, rng)


def parameter_count(cfg: ModelConfig) -> int:
    """Closed-form count of trainable scalars (running statistics excluded)."""
    k, C, F, n, K = cfg.kernel_size, cfg.channels, cfg.n_features, cfg.n_tabs, cfg.n_classes
    entry = F * C + C
    tab = 2 * (k * C * C + 2 * C)
    per_direction = entry + n * tab
    fusion = n if cfg.variant not in ("no_df", "no_ms") else 0
    return len(cfg.directions) * per_direction + fusion + C * K + K


# ---------------------------------------------------------------------------
# forward pass


@dataclass
class ForwardTrace:
    pooled: list
    fused: DiffValue
    logits: DiffValue
    probs: DiffValue
    attention: dict
    states: dict
    bn_updates: dict


def _sub_block(x, w, bn, dilation, cfg, training, rng, updates, name):
    h = dc.dilated_causal_conv1d(x, w, None, dilation)
    h, upd = dc.batch_norm(h, bn, training)
    if upd is not None:
        updates[name] = upd
    h = dc.relu(h)
    return dc.spatial_dropout(h, cfg.dropout, rng, training)


def tab_forward(F: DiffValue, p: TabParams, cfg: ModelConfig, training: bool = False,
                rng: RngStream | None = None, updates: dict | None = None, prefix: str = ""):
    """One temporal-aware block. Returns ``(F_next, A)``.

    For the ``tcn_baseline`` variant the gating is replaced by a residual
    connection, ``relu(subblocks(F) + F)``, and ``A`` is ``None``.
    """
    if F.value.ndim != 3 or F.shape[2] != cfg.channels:
        raise ValueError(f"TAB input must be B x T x {cfg.channels}, got {F.shape}")
    updates = {} if updates is None else updates
    d = cfg.dilation(p.index)
    s = _sub_block(F, p.conv1, p.bn1, d, cfg, training, rng, updates, f"{prefix}bn1")
    s = _sub_block(s, p.conv2, p.bn2, d, cfg, training, rng, updates, f"{prefix}bn2")
    if cfg.variant == "tcn_baseline":
        return dc.relu(dc.add(s, F)), None
    A = dc.sigmoid(s)
    return dc.mul(A, F), A


def dynamic_fusion(g_list, w_drf: DiffValue) -> DiffValue:
    """Weighted sum of per-scale pooled vectors."""
    if len(g_list) != w_drf.shape[0]:
        raise ValueError(f"{len(g_list)} pooled vectors but {w_drf.shape[0]} fusion weights")
    return dc.weighted_sum(g_list, w_drf)


def forward(features, params: TimNetParams, cfg: ModelConfig, training: bool = False,
            rng: RngStream | None = None) -> ForwardTrace:
    """Run the network on a B x T x n_features batch."""
    x = dc.as_value(features)
    if x.value.ndim == 2:
        x = DiffValue(x.value[None])
    if x.value.ndim != 3 or x.shape[1] != cfg.input_T or x.shape[2] != cfg.n_features:
        raise ValueError(f"expected input B x {cfg.input_T} x {cfg.n_features}, got {x.shape}")

    updates, attention, states = {}, {}, {}
    for d in cfg.directions:
        inp = x if d == "fwd" else dc.reverse_time(x)
        F = dc.dilated_causal_conv1d(inp, params.entry_w[d], params.entry_b[d], 1)
        seq = [F]
        maps = []
        drop_rng = rng.split(d) if rng is not None else None
        for tab in params.tabs[d]:
            F, A = tab_forward(F, tab, cfg, training, drop_rng, updates, f"{d}.tab{tab.index}.")
            seq.append(F)
            maps.append(A)
        states[d] = seq
        attention[d] = maps

    pooled = []
    for j in range(1, cfg.n_tabs + 1):
        if len(cfg.directions) == 2:
            combined = dc.add(states["fwd"][j], states["bwd"][j])
        else:
            combined = states["fwd"][j]
        pooled.append(dc.temporal_mean(combined))

    if cfg.variant == "no_ms":
        fused = pooled[-1]
    elif cfg.variant == "no_df":
        fused = dynamic_fusion(pooled, DiffValue(np.full(cfg.n_tabs, 1.0 / cfg.n_tabs)))
    else:
        fused = dynamic_fusion(pooled, params.w_drf)
    logits = dc.dense(fused, params.head_w, params.head_b)
    probs = dc.softmax(logits)
    return ForwardTrace(pooled, fused, logits, probs, attention, states, updates)


def apply_bn_updates(params: TimNetParams, updates: dict) -> None:
    bns = params.bn_states()
    for name, (mean, var) in updates.items():
        bns[name].running_mean[...] = mean
        bns[name].running_var[...] = var


def predict_proba(params: TimNetParams, cfg: ModelConfig, features: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    for start in range(0, len(features), batch_size):
        out.append(forward(features[start:start + batch_size], params, cfg).probs.value)
    return np.concatenate(out) if out else np.zeros((0, cfg.n_classes))


def embed(params: TimNetParams, cfg: ModelConfig, features: np.ndarray, batch_size: int = 256) -> np.ndarray:
    out = []
    for start in range(0, len(features), batch_size):
        out.append(forward(features[start:start + batch_size], params, cfg).fused.value)
    return np.concatenate(out) if out else np.zeros((0, cfg.channels))


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MAGIC = b"TIMC"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ShapeMismatchError(CheckpointError):
    pass


def checkpoint_save(params: TimNetParams, cfg: ModelConfig, path) -> None:
    meta = cfg.to_text() + "".join(f"label={lab}\n" for lab in params.labels)
    meta_bytes = meta.encode("utf-8")
    buf = io.BytesIO()
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<II", CHECKPOINT_VERSION, len(meta_bytes)))
    buf.write(meta_bytes)
    arrays = params.state_arrays()
    buf.write(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        nb = name.encode("utf-8")
        buf.write(struct.pack("<I", len(nb)))
        buf.write(nb)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


class _Reader:
    def __init__(self, data: bytes, path):
        self.data, self.pos, self.path = data, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"{self.path}: corrupt checkpoint (truncated at byte {self.pos})")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def u32(self, count=1):
        vals = struct.unpack(f"<{count}I", self.take(4 * count))
        return vals[0] if count == 1 else vals


def checkpoint_load(path, expected: ModelConfig | None = None) -> tuple[TimNetParams, ModelConfig]:
    """Read a checkpoint; with ``expected`` the stored architecture must match it."""
    r = _Reader(Path(path).read_bytes(), path)
    if r.take(4) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a TIM-Net checkpoint")
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, this build reads {CHECKPOINT_VERSION}")
    try:
        meta = r.take(r.u32()).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint metadata") from exc
    cfg_lines = [ln for ln in meta.splitlines() if not ln.startswith("label=")]
    labels = [ln[len("label="):] for ln in meta.splitlines() if ln.startswith("label=")]
    try:
        cfg = ModelConfig.from_text("\n".join(cfg_lines))
    except (TypeError, ValueError) as exc:
        raise CheckpointError(f"{path}: corrupt checkpoint metadata ({exc})") from exc

    arrays = {}
    for _ in range(r.u32()):
        name = r.take(r.u32()).decode("utf-8")
        rank = r.u32()
        dims = (r.u32(rank),) if rank == 1 else r.u32(rank) if rank else ()
        dims = tuple(dims)
        count = int(np.prod(dims)) if dims else 1
        arrays[name] = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(dims).copy()
    if r.pos != len(r.data):
        raise CheckpointError(f"{path}: corrupt checkpoint ({len(r.data) - r.pos} trailing bytes)")

    params = _build_params(expected or cfg, rng=None)
    try:
        params.load_arrays(arrays)
    except ValueError as exc:
        kind = ShapeMismatchError if expected is not None else CheckpointError
        raise kind(f"{path}: {exc}") from exc
    if expected is not None and expected != cfg:
        raise ShapeMismatchError(f"{path}: stored config differs from the requested one")
    params.labels = labels
    return params, cfg
