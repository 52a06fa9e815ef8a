"""Tiny U-Net built from pointwise (or 3x3x3) conv blocks with Group Shift inserts."""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from enum import Enum
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import layers as L
from .errors import ConfigError, FormatError, ShapeError, StateError
from .group_shift import (
    GroupShiftConfig,
    PermutationTable,
    apply_permutation,
    build_permutation,
    invert_permutation,
)
from .tensor import as_volume, decode_volume, encode_volume


class Insert(str, Enum):
    NONE = "none"
    CSC = "csc"
    CCS = "ccs"
    CSCS = "cscs"
    CSCS_UPSHIFT = "cscs_upshift"


class Placement(str, Enum):
    ENCODER = "encoder"
    DECODER = "decoder"
    BOTH = "both"


class ConvKind(str, Enum):
    POINTWISE = "pointwise"
    CONV3 = "conv3"


# unit sequence inside one conv block; "C" = conv -> norm -> relu, "S" = group shift
BLOCK_LAYOUT = {
    Insert.NONE: "CC",
    Insert.CSC: "CSC",
    Insert.CCS: "CCS",
    Insert.CSCS: "CSCS",
    Insert.CSCS_UPSHIFT: "CSCS",
}

PRESETS = {
    "prosgv1": [(2, 2, 2), (2, 2, 2), (2, 4, 4), (1, 8, 8), (1, 8, 8)],
    "prosgv2": [(1, 2, 2), (1, 4, 4), (2, 4, 4), (1, 8, 8), (1, 8, 8)],
    "prosgv3": [(2, 2, 2), (1, 4, 4), (1, 4, 4), (1, 8, 8), (1, 8, 8)],
    "prosgv4": [(1, 2, 2), (2, 2, 2), (2, 4, 4), (1, 8, 8), (1, 8, 8)],
    "bratsv1": [(2, 2, 2), (2, 2, 2), (2, 2, 2), (4, 4, 4), (5, 5, 5)],
}
PRESET_ALIASES = {"brats": "bratsv1"}

# (D, H, W) crop sizes the presets were designed for; depth is the short axis
PRESET_INPUT = {
    "prosgv1": (16, 128, 128),
    "prosgv2": (16, 128, 128),
    "prosgv3": (16, 128, 128),
    "prosgv4": (16, 128, 128),
    "bratsv1": (64, 128, 128),
}

DEFAULT_CHANNELS = (16, 32, 64, 128, 256)


def preset_spatial_groups(name: str) -> list[tuple[int, int, int]]:
    key = PRESET_ALIASES.get(name.lower(), name.lower())
    if key not in PRESETS:
        raise ConfigError(f"unknown spatial-group preset {name!r}; choose from {sorted(PRESETS)}")
    return list(PRESETS[key])


@dataclass(frozen=True)
class StageSpec:
    channels: int
    groups: tuple[int, int, int] = (1, 1, 1)
    conv: ConvKind = ConvKind.POINTWISE

    def __post_init__(self):
        object.__setattr__(self, "groups", tuple(int(g) for g in self.groups))
        object.__setattr__(self, "conv", ConvKind(self.conv))
        if self.channels < 1:
            raise ConfigError(f"stage channels must be >= 1, got {self.channels}")
        if len(self.groups) != 3 or min(self.groups) < 1:
            raise ConfigError(f"stage groups must be three positive ints, got {self.groups}")


@dataclass(frozen=True)
class NetworkSpec:
    in_channels: int
    num_classes: int
    stages: tuple[StageSpec, ...]
    insert: Insert = Insert.NONE
    placement: Placement = Placement.BOTH
    shift_fraction: Fraction = Fraction(1, 2)
    norm: bool = True

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(self.stages))
        object.__setattr__(self, "insert", Insert(self.insert))
        object.__setattr__(self, "placement", Placement(self.placement))
        object.__setattr__(self, "shift_fraction", Fraction(self.shift_fraction).limit_denominator(10**6))
        if self.in_channels < 1 or self.num_classes < 1:
            raise ConfigError("in_channels and num_classes must be >= 1")
        if not self.stages:
            raise ConfigError("a network needs at least one stage")
        if not 0 <= self.shift_fraction <= 1:
            raise ConfigError(f"shift_fraction must lie in [0, 1], got {self.shift_fraction}")

    @property
    def depth(self) -> int:
        return len(self.stages)

    def with_(self, **changes) -> "NetworkSpec":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        frac = self.shift_fraction
        return {
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "stages": [
                {"channels": s.channels, "groups": list(s.groups), "conv": s.conv.value} for s in self.stages
            ],
            "insert": self.insert.value,
            "placement": self.placement.value,
            "shift_fraction": float(frac) if frac.denominator in (1, 2, 4, 8) else str(frac),
            "norm": self.norm,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        try:
            stages = [StageSpec(int(s["channels"]), tuple(s.get("groups", (1, 1, 1))), s.get("conv", "pointwise")) for s in d["stages"]]
            return cls(
                in_channels=int(d["in_channels"]),
                num_classes=int(d["num_classes"]),
                stages=stages,
                insert=d.get("insert", "none"),
                placement=d.get("placement", "both"),
                shift_fraction=Fraction(str(d.get("shift_fraction", "1/2"))),
                norm=bool(d.get("norm", True)),
            )
        except (KeyError, TypeError, ValueError) as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"invalid network spec: {exc}") from exc

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "NetworkSpec":
        return cls.from_dict(json.loads(text))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "NetworkSpec":
        return cls.from_json(Path(path).read_text())


def make_spec(
    in_channels: int = 1,
    num_classes: int = 2,
    preset: str | None = None,
    groups=None,
    channels=DEFAULT_CHANNELS,
    conv=ConvKind.POINTWISE,
    insert=Insert.NONE,
    placement=Placement.BOTH,
    shift_fraction=Fraction(1, 2),
    norm: bool = True,
) -> NetworkSpec:
    """Convenience constructor: one conv kind everywhere, groups from a preset or list."""
    if preset is not None and groups is not None:
        raise ConfigError("give either a preset or explicit groups, not both")
    if preset is not None:
        groups = preset_spatial_groups(preset)
    if groups is None:
        groups = [(1, 1, 1)] * len(channels)
    if len(groups) != len(channels):
        raise ConfigError(f"{len(groups)} group settings for {len(channels)} stages")
    stages = [StageSpec(c, tuple(g), conv) for c, g in zip(channels, groups)]
    return NetworkSpec(in_channels, num_classes, stages, insert, placement, shift_fraction, norm)


# ops -------------------------------------------------------------------------
#
# Each op is stateless: forward(x, params) -> (y, cache) and
# backward(cache, grad_y, params, grads) -> grad_x, accumulating into ``grads``.


class _Conv:
    param_kind = "conv"

    def __init__(self, name: str, kind: ConvKind, c_in: int, c_out: int):
        self.name, self.kind, self.c_in, self.c_out = name, kind, c_in, c_out

    def _p(self, params):
        cls = L.PointwiseConvParams if self.kind is ConvKind.POINTWISE else L.Conv3Params
        return cls(params[self.name + ".weight"], params[self.name + ".bias"])

    def init(self, rng) -> dict:
        init = L.init_pointwise if self.kind is ConvKind.POINTWISE else L.init_conv3
        p = init(rng, self.c_in, self.c_out)
        return {self.name + ".weight": p.weight, self.name + ".bias": p.bias}

    def forward(self, x, params):
        if self.kind is ConvKind.POINTWISE:
            return L.pointwise_forward(x, self._p(params)), x
        return L.conv3_forward(x, self._p(params)), x

    def backward(self, x, g, params, grads):
        bwd = L.pointwise_backward if self.kind is ConvKind.POINTWISE else L.conv3_backward
        gx, gw, gb = bwd(x, self._p(params), g)
        grads[self.name + ".weight"] += gw
        grads[self.name + ".bias"] += gb
        return gx


class _Norm:
    param_kind = "norm"

    def __init__(self, name: str, channels: int):
        self.name, self.channels = name, channels

    def _p(self, params):
        return L.NormParams(params[self.name + ".scale"], params[self.name + ".shift"])

    def init(self, rng) -> dict:
        p = L.init_norm(self.channels)
        return {self.name + ".scale": p.scale, self.name + ".shift": p.shift}

    def forward(self, x, params):
        return L.norm_forward(x, self._p(params), return_stats=True)

    def backward(self, stats, g, params, grads):
        gx, gs, gb = L.norm_backward(g, self._p(params), g, stats)
        grads[self.name + ".scale"] += gs
        grads[self.name + ".shift"] += gb
        return gx


class _Relu:
    param_kind = None

    def __init__(self, name: str):
        self.name = name

    def forward(self, x, params):
        y = L.relu_forward(x)
        return y, y

    def backward(self, x, g, params, grads):
        return L.relu_backward(x, g)


class _Shift:
    param_kind = None

    def __init__(self, name: str, cfg: GroupShiftConfig, table: PermutationTable, inverse: PermutationTable):
        self.name, self.cfg, self.table, self.inverse = name, cfg, table, inverse

    def forward(self, x, params):
        if self.table is None:
            raise StateError(f"{self.name}: network was built without shift tables (analysis only)")
        return apply_permutation(x, self.table), None

    def backward(self, x, g, params, grads):
        return apply_permutation(g, self.inverse)


class _Pool:
    param_kind = None

    def __init__(self, name: str):
        self.name = name

    def forward(self, x, params):
        return L.avgpool2_forward(x), x.shape

    def backward(self, shape, g, params, grads):
        return L.avgpool2_backward(shape, g)


class _Up:
    param_kind = None

    def __init__(self, name: str):
        self.name = name

    def forward(self, x, params):
        return L.upsample2_forward(x), None

    def backward(self, x, g, params, grads):
        return L.upsample2_backward(g)


@dataclass
class LayerInfo:
    """Static description of one op, used by the profiler."""

    name: str
    kind: str  # pointwise | conv3 | norm | relu | gs | pool | upsample
    in_dims: tuple[int, int, int, int]  # (D, H, W, C) per sample
    out_dims: tuple[int, int, int, int]
    c_in: int = 0
    c_out: int = 0
    gs: GroupShiftConfig | None = None


@dataclass
class _Stage:
    ops: list = field(default_factory=list)


class Network:
    """A built U-Net: topology, parameter store and cached shift tables."""

    def __init__(self, spec: NetworkSpec, input_dims, seed: int = 0, tables: bool = True):
        self.spec = spec
        self.input_dims = _spatial(input_dims)
        self.with_tables = tables
        self._tables: dict = {}
        self.info: list[LayerInfo] = []
        self._build()
        self.params: dict[str, np.ndarray] = {}
        self.reset_parameters(seed)
        self._tape = None
        self.input_grad = None

    # construction --------------------------------------------------------

    def _table(self, cfg: GroupShiftConfig, dims):
        key = (tuple(dims), cfg)
        if key not in self._tables:
            table = build_permutation(cfg, dims)
            self._tables[key] = (table, invert_permutation(table))
        return self._tables[key]

    def _gs_op(self, name, stage_idx, dims, channels, where):
        spec = self.spec
        groups = spec.stages[stage_idx].groups
        try:
            cfg = GroupShiftConfig.from_fraction(groups, channels, spec.shift_fraction)
            cfg.bind(*dims, channels)
        except ConfigError as exc:
            raise ConfigError(
                f"stage {stage_idx + 1} ({where}), dims {dims}x{channels}, groups {groups}: {exc}"
            ) from None
        if cfg.c_s == 0:
            return None
        table, inv = self._table(cfg, (*dims, channels)) if self.with_tables else (None, None)
        self.info.append(LayerInfo(name, "gs", (*dims, channels), (*dims, channels), channels, channels, cfg))
        return _Shift(name, cfg, table, inv)

    def _conv_unit(self, ops, name, kind, c_in, c_out, dims):
        conv = _Conv(name, kind, c_in, c_out)
        ops.append(conv)
        self.info.append(LayerInfo(name, kind.value, (*dims, c_in), (*dims, c_out), c_in, c_out))
        if self.spec.norm:
            ops.append(_Norm(name + ".norm", c_out))
            self.info.append(LayerInfo(name + ".norm", "norm", (*dims, c_out), (*dims, c_out), c_out, c_out))
        ops.append(_Relu(name + ".relu"))
        self.info.append(LayerInfo(name + ".relu", "relu", (*dims, c_out), (*dims, c_out), c_out, c_out))

    def _block(self, prefix, stage_idx, c_in, dims, gs_on, where):
        st = self.spec.stages[stage_idx]
        layout = BLOCK_LAYOUT[self.spec.insert] if gs_on else "CC"
        ops, c, n_conv, n_gs = [], c_in, 0, 0
        for unit in layout:
            if unit == "C":
                n_conv += 1
                self._conv_unit(ops, f"{prefix}.conv{n_conv}", st.conv, c, st.channels, dims)
                c = st.channels
            else:
                n_gs += 1
                op = self._gs_op(f"{prefix}.gs{n_gs}", stage_idx, dims, c, where)
                if op is not None:
                    ops.append(op)
        return ops

    def _build(self):
        spec = self.spec
        n = spec.depth
        D, H, W = self.input_dims
        f = 2 ** (n - 1)
        if D % f or H % f or W % f:
            raise ConfigError(
                f"input spatial dims {self.input_dims} must be divisible by {f} for {n - 1} poolings"
            )
        enc_gs = spec.insert is not Insert.NONE and spec.placement in (Placement.ENCODER, Placement.BOTH)
        dec_gs = spec.insert is not Insert.NONE and spec.placement in (Placement.DECODER, Placement.BOTH)
        self.stage_dims = [(D >> s, H >> s, W >> s) for s in range(n)]
        self.encoder: list[list] = []
        self.pools: list = []
        c = spec.in_channels
        for s in range(n):
            dims = self.stage_dims[s]
            self.encoder.append(self._block(f"enc{s + 1}", s, c, dims, enc_gs, "encoder"))
            c = spec.stages[s].channels
            if s < n - 1:
                self.pools.append(_Pool(f"pool{s + 1}"))
                self.info.append(LayerInfo(f"pool{s + 1}", "pool", (*dims, c), (*self.stage_dims[s + 1], c), c, c))
        self.decoder: list[tuple[list, list]] = []  # (upsample ops, block ops), deepest first
        for s in range(n - 2, -1, -1):
            dims = self.stage_dims[s]
            up = [_Up(f"up{s + 1}")]
            self.info.append(LayerInfo(f"up{s + 1}", "upsample", (*self.stage_dims[s + 1], c), (*dims, c), c, c))
            if dec_gs and spec.insert is Insert.CSCS_UPSHIFT:
                op = self._gs_op(f"up{s + 1}.gs", s, dims, c, "decoder upsampling")
                if op is not None:
                    up.append(op)
            c_skip = spec.stages[s].channels
            block = self._block(f"dec{s + 1}", s, c_skip + c, dims, dec_gs, "decoder")
            self.decoder.append((up, block))
            c = spec.stages[s].channels
        self.head = _Conv("head", ConvKind.POINTWISE, c, spec.num_classes)
        self.info.append(LayerInfo("head", "pointwise", (D, H, W, c), (D, H, W, spec.num_classes), c, spec.num_classes))

    def _all_ops(self):
        for ops in self.encoder:
            yield from ops
        for up, block in self.decoder:
            yield from up
            yield from block
        yield self.head

    def reset_parameters(self, seed: int = 0) -> None:
        rng = np.random.default_rng(seed)
        self.params = {}
        for op in self._all_ops():
            if op.param_kind is not None:
                self.params.update(op.init(rng))

    @property
    def gs_layers(self) -> list[_Shift]:
        return [op for op in self._all_ops() if isinstance(op, _Shift)]

    def num_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    def zero_grads(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    # execution -------------------------------------------------------------

    def _run(self, ops, h, tape):
        for op in ops:
            h, cache = op.forward(h, self.params)
            if tape is not None:
                tape.append(("op", op, cache))
        return h

    def forward(self, F, retain: bool = True) -> np.ndarray:
        """Logits of shape (N, D, H, W, num_classes).

        With ``retain`` the layer inputs are kept for a following
        :meth:`backward`; pass ``retain=False`` for read-only inference.
        """
        F = as_volume(F)
        expected = (*self.input_dims, self.spec.in_channels)
        if F.shape[1:] != expected:
            raise ShapeError(f"network expects per-sample dims {expected}, got {F.shape[1:]}")
        tape = [] if retain else None
        skips = []
        h = F
        n = self.spec.depth
        for s in range(n):
            h = self._run(self.encoder[s], h, tape)
            if s < n - 1:
                skips.append(h)
                if tape is not None:
                    tape.append(("save", s, None))
                h = self._run([self.pools[s]], h, tape)
        for (up, block), s in zip(self.decoder, range(n - 2, -1, -1)):
            h = self._run(up, h, tape)
            skip = skips[s]
            if tape is not None:
                tape.append(("concat", s, skip.shape[-1]))
            h = np.concatenate([skip, h], axis=-1)
            h = self._run(block, h, tape)
        h = self._run([self.head], h, tape)
        self._tape = tape
        return h

    __call__ = forward

    def backward(self, grad_logits) -> dict[str, np.ndarray]:
        """Parameter gradients for the retained forward pass.

        The gradient with respect to the network input is left in
        ``self.input_grad``.
        """
        if self._tape is None:
            raise StateError("backward() needs a preceding forward(retain=True)")
        grads = self.zero_grads()
        g = np.asarray(grad_logits, dtype=np.float64)
        skip_grads = {}
        for kind, a, b in reversed(self._tape):
            if kind == "op":
                g = a.backward(b, g, self.params, grads)
            elif kind == "concat":
                skip_grads[a] = g[..., :b]
                g = g[..., b:]
            else:  # save: the skip branch rejoins the main path
                g = g + skip_grads.pop(a)
        self._tape = None
        self.input_grad = g
        return grads


def _spatial(dims) -> tuple[int, int, int]:
    dims = tuple(int(v) for v in dims)
    if len(dims) == 5:
        dims = dims[1:4]
    elif len(dims) == 4:
        dims = dims[:3]
    if len(dims) != 3 or min(dims) < 1:
        raise ShapeError(f"expected spatial dims (D, H, W), got {dims}")
    return dims


def build_network(spec: NetworkSpec, input_dims, seed: int = 0, tables: bool = True) -> Network:
    """Build and initialise a network for per-sample spatial dims ``input_dims``.

    ``tables=False`` skips permutation-table construction; such a network can
    be profiled but not run.
    """
    return Network(spec, input_dims, seed, tables)


def effective_rf_support(net: Network, F, voxel, threshold: float = 1e-12) -> set[tuple[int, int, int]]:
    """Input positions whose gradient of the summed logits at ``voxel`` exceeds ``threshold``."""
    F = as_volume(F)
    if F.shape[0] != 1:
        raise ShapeError("effective_rf_support needs a single-sample input")
    logits = net.forward(F)
    g = np.zeros_like(logits)
    x, y, z = voxel
    g[0, x, y, z, :] = 1.0
    net.backward(g)
    mag = np.abs(net.input_grad[0]).max(axis=-1)
    return {tuple(int(v) for v in p) for p in np.argwhere(mag > threshold)}


# checkpoints -----------------------------------------------------------------

CKPT_MAGIC = b"GSCKPT1\0"


def save_checkpoint(net: Network, path) -> None:
    """Header JSON (spec, input dims, parameter names/shapes), then one
    length-prefixed GSV1 blob per parameter, flattened to (1, 1, 1, 1, size)."""
    names = list(net.params)
    header = {
        "spec": net.spec.to_dict(),
        "input_dims": list(net.input_dims),
        "params": [{"name": k, "shape": list(net.params[k].shape)} for k in names],
    }
    hbytes = json.dumps(header).encode()
    with open(path, "wb") as f:
        f.write(CKPT_MAGIC + struct.pack("<I", len(hbytes)) + hbytes)
        for k in names:
            blob = encode_volume(net.params[k].reshape(1, 1, 1, 1, -1))
            f.write(struct.pack("<Q", len(blob)) + blob)


def load_checkpoint(path, spec: NetworkSpec | None = None) -> Network:
    """Rebuild the network stored at ``path``.

    If ``spec`` is given it must match the stored spec exactly.
    """
    buf = Path(path).read_bytes()
    if buf[:8] != CKPT_MAGIC:
        raise FormatError(f"{path}: not a gsconv checkpoint")
    (hlen,) = struct.unpack("<I", buf[8:12])
    header = json.loads(buf[12 : 12 + hlen])
    stored = NetworkSpec.from_dict(header["spec"])
    if spec is not None and spec.to_dict() != stored.to_dict():
        raise ConfigError("network spec does not match the checkpoint's spec")
    net = Network(stored, header["input_dims"])
    pos = 12 + hlen
    for item in header["params"]:
        (n,) = struct.unpack("<Q", buf[pos : pos + 8])
        arr = decode_volume(buf[pos + 8 : pos + 8 + n]).reshape(item["shape"])
        pos += 8 + n
        name = item["name"]
        if name not in net.params or net.params[name].shape != arr.shape:
            raise ConfigError(f"checkpoint parameter {name} {arr.shape} does not fit the network")
        net.params[name] = arr.copy()
    if set(net.params) != {p["name"] for p in header["params"]}:
        raise ConfigError("checkpoint is missing parameters for this network")
    return net
