"""Equivariant DenseNet patch classifier and its planar baseline.

Layout (no zero padding anywhere)::

    stem      lifting 3x3 conv, 3 -> growth group channels
    block b   dense:      BN -> ReLU -> 3x3 group conv (growth channels),
                          concatenated with the 1-pixel centre-cropped input
              transition: BN -> ReLU -> 1x1 group conv (width kept) -> 2x2 avg pool
    head      group pooling -> 1x1 conv + bias -> sigmoid

With five blocks a 96x96 patch maps to a single output pixel and every
pooled map has even size, so the D4/C4 models are exactly invariant to the
group acting on the input.  The trivial group gives the plain CNN baseline.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from eqdense import io
from eqdense import tensor as T
from eqdense.errors import BuildError, ConfigurationError, FormatError
from eqdense.groups import GROUP_SIZES, canonical_kind
from eqdense.layers import (
    BatchNormState,
    GFeatureMap,
    GFilterBank,
    gconv,
    group_batchnorm,
    group_pool,
    lift_conv,
)
from eqdense.tensor import Tensor


@dataclass(frozen=True)
class ModelConfig:
    group_kind: str = "D4"
    growth_channels: int = 8
    num_blocks: int = 5
    kernel: int = 3
    input_size: tuple = (96, 96)
    seed: int = 0
    in_channels: int = 3

    def __post_init__(self):
        object.__setattr__(self, "group_kind", canonical_kind(self.group_kind))
        object.__setattr__(self, "input_size", tuple(int(s) for s in self.input_size))
        if self.growth_channels < 1:
            raise ConfigurationError("growth_channels must be >= 1")
        if self.num_blocks < 1:
            raise ConfigurationError("num_blocks must be >= 1")
        if self.kernel % 2 == 0:
            raise ConfigurationError("kernel must be odd")

    @property
    def group_size(self) -> int:
        return GROUP_SIZES[self.group_kind]

    @property
    def planar_growth(self) -> int:
        """Planar (Z2) maps added per dense layer."""
        return self.growth_channels * self.group_size

    def to_items(self) -> dict:
        d = asdict(self)
        d["input_size"] = "x".join(str(s) for s in self.input_size)
        return d

    @classmethod
    def from_items(cls, items: dict) -> "ModelConfig":
        try:
            return cls(
                group_kind=items["group_kind"],
                growth_channels=int(items["growth_channels"]),
                num_blocks=int(items.get("num_blocks", 5)),
                kernel=int(items.get("kernel", 3)),
                input_size=tuple(int(s) for s in str(items.get("input_size", "96x96")).split("x")),
                seed=int(items.get("seed", 0)),
                in_channels=int(items.get("in_channels", 3)),
            )
        except (KeyError, ValueError) as exc:
            raise ConfigurationError(f"bad model config field: {exc}") from None


PRESETS = {
    "pcam-p4m": ModelConfig("D4", 8),
    "pcam-p4": ModelConfig("C4", 12),
    "pcam-baseline": ModelConfig("trivial", 24),
    "pcam-baseline-matched": ModelConfig("trivial", 64),
    "desk-p4m": ModelConfig("D4", 2),
    "desk-baseline": ModelConfig("trivial", 6),
}


@dataclass
class ParamStore:
    params: dict = field(default_factory=dict)
    bn: dict = field(default_factory=dict)
    seed: int = 0

    def copy(self) -> "ParamStore":
        bn = {
            k: BatchNormState(
                None if s.running_mean is None else s.running_mean.copy(),
                None if s.running_var is None else s.running_var.copy(),
                s.momentum, s.eps, s.steps,
            )
            for k, s in self.bn.items()
        }
        return ParamStore({k: v.copy() for k, v in self.params.items()}, bn, self.seed)

    def tensors(self, requires_grad: bool = False) -> dict:
        return {k: Tensor(v, requires_grad=requires_grad, name=k) for k, v in self.params.items()}


def param_count(store: ParamStore) -> int:
    return int(sum(v.size for v in store.params.values()))


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def match_baseline_growth(config: ModelConfig) -> ModelConfig:
    """Planar baseline whose growth is the group growth times sqrt(|S|)."""
    if config.group_kind == "trivial":
        raise ConfigurationError("matching needs an equivariant (C4/D4) config")
    growth = round_half_up(config.growth_channels * math.sqrt(config.group_size))
    return replace(config, group_kind="trivial", growth_channels=growth)


class DenseNet:
    """Callable model; parameters live in a separate :class:`ParamStore`."""

    def __init__(self, config: ModelConfig):
        self.config = config
        self.kind = config.group_kind
        self.S = config.group_size
        g, k = config.growth_channels, config.kernel
        shapes: dict[str, tuple] = {"stem.conv": (g, config.in_channels, 1, k, k)}
        c = g
        for b in range(1, config.num_blocks + 1):
            shapes[f"block{b}.dense.bn.gamma"] = (c,)
            shapes[f"block{b}.dense.bn.beta"] = (c,)
            shapes[f"block{b}.dense.conv"] = (g, c, self.S, k, k)
            c += g
            shapes[f"block{b}.trans.bn.gamma"] = (c,)
            shapes[f"block{b}.trans.bn.beta"] = (c,)
            shapes[f"block{b}.trans.conv"] = (c, c, self.S, 1, 1)
        shapes["head.conv"] = (1, c)
        shapes["head.bias"] = (1,)
        self.param_shapes = shapes
        self.out_channels = c
        self.bn_names = [
            f"block{b}.{part}.bn" for b in range(1, config.num_blocks + 1) for part in ("dense", "trans")
        ]

    # -- shapes ---------------------------------------------------------------

    def trace_shapes(self, size=None) -> list[tuple[str, tuple]]:
        """Per-layer ``(name, (C, S, H, W))``; raises :class:`BuildError` on an illegal layer."""
        H, W = size if size is not None else self.config.input_size
        k, g, S = self.config.kernel, self.config.growth_channels, self.S
        trace = [("input", (self.config.in_channels, 1, H, W))]

        def conv(name, H, W, kk):
            if H < kk or W < kk:
                raise BuildError(f"layer {name}: {kk}x{kk} kernel does not fit a {H}x{W} map")
            return H - kk + 1, W - kk + 1

        H, W = conv("stem.conv", H, W, k)
        c = g
        trace.append(("stem.conv", (c, S, H, W)))
        for b in range(1, self.config.num_blocks + 1):
            H, W = conv(f"block{b}.dense.conv", H, W, k)
            c += g
            trace.append((f"block{b}.dense", (c, S, H, W)))
            name = f"block{b}.trans.pool"
            if H < 2 or W < 2:
                raise BuildError(f"layer {name}: cannot pool a {H}x{W} map")
            if H % 2 or W % 2:
                raise BuildError(
                    f"layer {name}: {H}x{W} map is odd-sized; 2x2 pooling would break "
                    "rotation equivariance (see DenseNet.input_size_for_output)"
                )
            H, W = H // 2, W // 2
            trace.append((f"block{b}.trans", (c, S, H, W)))
        trace.append(("head", (1, 1, H, W)))
        return trace

    def output_size(self, size) -> tuple:
        return self.trace_shapes(size)[-1][1][2:]

    def input_size_for_output(self, m: int) -> int:
        """Smallest legal input side giving an ``m x m`` output map."""
        k = self.config.kernel
        size = m
        for _ in range(self.config.num_blocks):
            size = 2 * size + (k - 1)
        return size + (k - 1)

    def heatmap_geometry(self) -> tuple[int, float]:
        """``(stride, offset)``: output pixel ``j`` is centred on input coordinate
        ``stride * j + offset`` (pixel ``i`` spans ``[i, i + 1)``)."""
        return 2 ** self.config.num_blocks, self.input_size_for_output(1) / 2

    # -- parameters -----------------------------------------------------------

    def init_params(self, seed: int | None = None) -> ParamStore:
        seed = self.config.seed if seed is None else seed
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in self.param_shapes.items():
            if name.endswith(".gamma"):
                params[name] = np.ones(shape, np.float32)
            elif name.endswith(".beta") or name == "head.bias":
                params[name] = np.zeros(shape, np.float32)
            else:
                fan_in = int(np.prod(shape[1:]))
                params[name] = (rng.standard_normal(shape) * math.sqrt(2.0 / fan_in)).astype(np.float32)
        return ParamStore(params, {n: BatchNormState() for n in self.bn_names}, seed)

    # -- forward --------------------------------------------------------------

    def forward(self, store: ParamStore, x, *, train: bool = False, params: dict | None = None,
                update_stats: bool = True, taps: dict | None = None) -> Tensor:
        """Tumour probability map ``[N, 1, h, w]`` for planar input ``[N, C, H, W]``.

        ``taps``, when given, receives the output array of every stage
        (stem, dense and transition layers, head) keyed by layer name.
        """
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 4:
            raise BuildError(f"input must be [N,C,H,W], got {x.shape}")
        self.trace_shapes(x.shape[2:])
        p = params if params is not None else store.tensors()
        if p["stem.conv"].dtype != x.dtype:
            x = Tensor(x.data.astype(p["stem.conv"].dtype))
        mode = "train" if train else "eval"
        margin = (self.config.kernel - 1) // 2

        def bn_relu(h: GFeatureMap, name: str) -> GFeatureMap:
            h = group_batchnorm(h, p[f"{name}.gamma"], p[f"{name}.beta"], store.bn[name],
                                mode, update_state=update_stats)
            return h.with_tensor(T.relu(h.tensor))

        def tap(name, t):
            if taps is not None:
                taps[name] = t.data

        h = lift_conv(x, GFilterBank(p["stem.conv"], self.kind))
        tap("stem.conv", h.tensor)
        for b in range(1, self.config.num_blocks + 1):
            y = gconv(bn_relu(h, f"block{b}.dense.bn"), GFilterBank(p[f"block{b}.dense.conv"], self.kind))
            h = h.with_tensor(T.concat([T.crop_center(h.tensor, margin), y.tensor], axis=1))
            tap(f"block{b}.dense", h.tensor)
            y = gconv(bn_relu(h, f"block{b}.trans.bn"), GFilterBank(p[f"block{b}.trans.conv"], self.kind))
            h = y.with_tensor(T.avg_pool2(y.tensor))
            tap(f"block{b}.trans", h.tensor)
        if self.S > 1:
            z = group_pool(h)
        else:
            N, C, _, Hh, Wh = h.shape
            z = T.reshape(h.tensor, (N, C, Hh, Wh))
        w = T.reshape(p["head.conv"], (1, self.out_channels, 1, 1))
        logits = T.add_channel_bias(T.conv2d_valid(z, w), p["head.bias"])
        out = T.sigmoid(logits)
        tap("head", out)
        return out

    __call__ = forward


def build_model(config: ModelConfig) -> tuple[DenseNet, ParamStore]:
    """Build the network and its deterministic initial parameters."""
    model = DenseNet(config)
    model.trace_shapes()
    return model, model.init_params()


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_FORMAT = "eqdense-checkpoint-1"


def save_checkpoint(path, config: ModelConfig, store: ParamStore, epoch: int | None = None,
                    val_loss: float | None = None) -> None:
    """Directory with ``manifest.txt`` and one EQT1 blob per tensor; files written atomically."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    names = []
    for name, value in store.params.items():
        io.save_tensor(path / "params" / f"{name}.eqt", value)
        names.append(name)
    bn_steps = []
    for name, state in store.bn.items():
        if state.running_mean is not None:
            io.save_tensor(path / "buffers" / f"{name}.running_mean.eqt", state.running_mean)
            io.save_tensor(path / "buffers" / f"{name}.running_var.eqt", state.running_var)
        bn_steps.append(f"{name}:{state.steps}")
    items = {"format": CHECKPOINT_FORMAT, **config.to_items(), "init_seed": store.seed}
    items["epoch"] = "" if epoch is None else epoch
    items["val_loss"] = "" if val_loss is None else repr(float(val_loss))
    items["params"] = ",".join(names)
    items["bn_steps"] = ",".join(bn_steps)
    io.atomic_write_text(path / "manifest.txt", io.format_key_values(items))


def load_checkpoint(path) -> tuple[ModelConfig, ParamStore, dict]:
    path = Path(path)
    manifest = path / "manifest.txt"
    if not manifest.exists():
        raise FileNotFoundError(f"no checkpoint manifest at {manifest}")
    items = io.read_key_values(manifest)
    if items.get("format") != CHECKPOINT_FORMAT:
        raise FormatError(f"{manifest}: unknown checkpoint format {items.get('format')!r}")
    config = ModelConfig.from_items(items)
    model = DenseNet(config)
    params = {}
    for name in filter(None, items["params"].split(",")):
        arr = io.load_tensor(path / "params" / f"{name}.eqt")
        if name not in model.param_shapes or arr.shape != model.param_shapes[name]:
            raise FormatError(f"{path}: parameter {name} does not match the config")
        params[name] = arr
    missing = set(model.param_shapes) - set(params)
    if missing:
        raise FormatError(f"{path}: missing parameters {sorted(missing)}")
    bn = {}
    for entry in filter(None, items.get("bn_steps", "").split(",")):
        name, steps = entry.rsplit(":", 1)
        state = BatchNormState(steps=int(steps))
        mean_file = path / "buffers" / f"{name}.running_mean.eqt"
        if mean_file.exists():
            state.running_mean = io.load_tensor(mean_file)
            state.running_var = io.load_tensor(path / "buffers" / f"{name}.running_var.eqt")
        bn[name] = state
    store = ParamStore({k: params[k] for k in model.param_shapes}, bn, int(items.get("init_seed", 0)))
    meta = {
        "epoch": int(items["epoch"]) if items.get("epoch") else None,
        "val_loss": float(items["val_loss"]) if items.get("val_loss") else None,
    }
    return config, store, meta
