"""Group Shift: a parameter-free permutation of a volume's shifted channels.

The spatial volume is cut into ``g_d * g_h * g_w`` equal blocks (spatial
groups) and the first ``C_s`` channels are cut into the same number of runs of
``C_g`` channels (channel groups). Channel group ``k`` of every spatial group is
moved ``k`` spatial groups forward (cyclically); the remaining ``C - C_s``
channels stay put. A voxel keeps its offset inside its spatial group and its
channel index.

Two routes compute the same thing:

* :func:`map_coordinate` / :func:`apply_group_shift_naive` evaluate the
  coordinate formulas one element at a time (the oracle);
* :func:`build_permutation` vectorises the formulas into a gather table that
  :func:`apply_permutation` applies with a single ``take``.
"""
from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import NamedTuple

import numpy as np

from .errors import ConfigError, ShapeError
from .tensor import as_volume


class Binding(NamedTuple):
    """A config resolved against concrete (D, H, W, C)."""

    D: int
    H: int
    W: int
    C: int
    d: int
    h: int
    w: int
    c_k: int


@dataclass(frozen=True)
class GroupShiftConfig:
    g_d: int
    g_h: int
    g_w: int
    c_g: int
    c_s: int | None = None

    def __post_init__(self):
        for name in ("g_d", "g_h", "g_w"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.c_g < 0:
            raise ConfigError(f"c_g must be >= 0, got {self.c_g}")
        expected = self.G * self.c_g
        if self.c_s is None:
            object.__setattr__(self, "c_s", expected)
        elif self.c_s != expected:
            raise ConfigError(
                f"c_s must equal g_d*g_h*g_w*c_g = {self.G}*{self.c_g} = {expected}, got {self.c_s}"
            )

    @property
    def G(self) -> int:
        return self.g_d * self.g_h * self.g_w

    @property
    def groups(self) -> tuple[int, int, int]:
        return (self.g_d, self.g_h, self.g_w)

    @classmethod
    def from_fraction(cls, groups, channels: int, fraction=Fraction(1, 2), strict: bool = True):
        """Config shifting ``fraction`` of ``channels``, rounded down to a multiple of G.

        ``strict`` rejects a nonzero fraction that rounds to zero channels per
        group instead of silently disabling the shift.
        """
        g_d, g_h, g_w = (int(v) for v in groups)
        G = g_d * g_h * g_w
        frac = Fraction(fraction).limit_denominator(10**6)
        if not 0 <= frac <= 1:
            raise ConfigError(f"shift fraction must lie in [0, 1], got {fraction}")
        wanted = frac * channels
        c_g = int(wanted // G)
        if strict and frac > 0 and c_g == 0:
            raise ConfigError(
                f"shift fraction {frac} of {channels} channels gives {float(wanted):g} shifted "
                f"channels, fewer than one per group for G={G}"
            )
        return cls(g_d, g_h, g_w, c_g)

    def bind(self, D: int, H: int, W: int, C: int) -> Binding:
        for axis, size, g in (("D", D, self.g_d), ("H", H, self.g_h), ("W", W, self.g_w)):
            if size % g:
                raise ConfigError(f"axis {axis}: size {size} is not divisible by group count {g}")
        if self.c_s > C:
            raise ConfigError(f"c_s={self.c_s} exceeds channel count C={C}")
        return Binding(D, H, W, C, D // self.g_d, H // self.g_h, W // self.g_w, C - self.c_s)


def _shift_one(x: int, y: int, z: int, c: int, cfg: GroupShiftConfig, b: Binding):
    if c >= cfg.c_s:
        return (x, y, z, c)
    g_d, g_h = cfg.g_d, cfg.g_h
    cur_ind = x // b.d + (y // b.h) * g_d + (z // b.w) * g_d * g_h
    sft_step = c // cfg.c_g
    sfted_ind = (cur_ind + sft_step) % cfg.G
    x2 = (sfted_ind % g_d) * b.d + x % b.d
    y2 = ((sfted_ind % (g_d * g_h)) // g_d) * b.h + y % b.h
    z2 = (sfted_ind // (g_d * g_h)) * b.w + z % b.w
    return (x2, y2, z2, c)


def map_coordinate(src, cfg: GroupShiftConfig, dims):
    """Destination (x', y', z', c') of the input element at ``src = (x, y, z, c)``.

    ``dims`` is (D, H, W, C).
    """
    b = cfg.bind(*dims)
    x, y, z, c = (int(v) for v in src)
    if not (0 <= x < b.D and 0 <= y < b.H and 0 <= z < b.W and 0 <= c < b.C):
        raise ConfigError(f"source coordinate {tuple(src)} outside dims {tuple(dims)}")
    return _shift_one(x, y, z, c, cfg, b)


def apply_group_shift_naive(F, cfg: GroupShiftConfig) -> np.ndarray:
    """Element-by-element scatter ``out[map(src)] = F[src]``. Slow; use for checking."""
    F = as_volume(F)
    _, D, H, W, C = F.shape
    b = cfg.bind(D, H, W, C)
    out = np.empty_like(F)
    for x in range(D):
        for y in range(H):
            for z in range(W):
                for c in range(C):
                    x2, y2, z2, c2 = _shift_one(x, y, z, c, cfg, b)
                    out[:, x2, y2, z2, c2] = F[:, x, y, z, c]
    return out


@dataclass(frozen=True, eq=False)
class PermutationTable:
    """Gather table for one sample: ``out_flat[dst] = in_flat[map[dst]]``."""

    dims: tuple[int, int, int, int]
    map: np.ndarray

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    def is_identity(self) -> bool:
        return bool(np.array_equal(self.map, np.arange(self.size)))


def check_bijection(idx: np.ndarray, size: int) -> bool:
    if idx.shape != (size,):
        return False
    if size == 0:
        return True
    if idx.min() < 0 or idx.max() >= size:
        return False
    return bool(np.all(np.bincount(idx, minlength=size) == 1))


def _destination_index(cfg: GroupShiftConfig, b: Binding) -> np.ndarray:
    """Flat destination index of every source element, in source order."""
    x, y, z, c = np.meshgrid(
        np.arange(b.D), np.arange(b.H), np.arange(b.W), np.arange(b.C), indexing="ij"
    )
    shifted = c < cfg.c_s
    if cfg.c_g:
        cur = x // b.d + (y // b.h) * cfg.g_d + (z // b.w) * cfg.g_d * cfg.g_h
        sfted = (cur + c // cfg.c_g) % cfg.G
        x2 = np.where(shifted, (sfted % cfg.g_d) * b.d + x % b.d, x)
        y2 = np.where(shifted, ((sfted % (cfg.g_d * cfg.g_h)) // cfg.g_d) * b.h + y % b.h, y)
        z2 = np.where(shifted, (sfted // (cfg.g_d * cfg.g_h)) * b.w + z % b.w, z)
    else:
        x2, y2, z2 = x, y, z
    return (c + b.C * (z2 + b.W * (y2 + b.H * x2))).ravel().astype(np.int64)


def build_permutation(cfg: GroupShiftConfig, dims) -> PermutationTable:
    """Precompute the gather table for ``dims = (D, H, W, C)``."""
    dims = tuple(int(v) for v in dims)
    if len(dims) != 4:
        raise ShapeError(f"permutation dims must be (D, H, W, C), got {dims}")
    b = cfg.bind(*dims)
    dst_of_src = _destination_index(cfg, b)
    size = dst_of_src.size
    assert check_bijection(dst_of_src, size), "group shift map is not a bijection"
    gather = np.empty(size, dtype=np.int64)
    gather[dst_of_src] = np.arange(size, dtype=np.int64)
    return PermutationTable(dims, gather)


def identity_table(dims) -> PermutationTable:
    dims = tuple(int(v) for v in dims)
    return PermutationTable(dims, np.arange(int(np.prod(dims)), dtype=np.int64))


def apply_permutation(F, table: PermutationTable) -> np.ndarray:
    F = as_volume(F)
    if F.shape[1:] != table.dims:
        raise ShapeError(f"table built for per-sample dims {table.dims}, volume has {F.shape[1:]}")
    flat = F.reshape(F.shape[0], -1)
    return np.take(flat, table.map, axis=1).reshape(F.shape)


def invert_permutation(table: PermutationTable) -> PermutationTable:
    if not check_bijection(table.map, table.size):
        raise ShapeError("cannot invert: table is not a bijection")
    inv = np.empty_like(table.map)
    inv[table.map] = np.arange(table.size, dtype=table.map.dtype)
    return PermutationTable(table.dims, inv)


def compose(first: PermutationTable, second: PermutationTable) -> PermutationTable:
    """Table equivalent to applying ``first`` then ``second``."""
    if first.dims != second.dims:
        raise ShapeError(f"cannot compose tables for {first.dims} and {second.dims}")
    return PermutationTable(first.dims, first.map[second.map])


def group_shift_backward(grad_out, table: PermutationTable, inverse: PermutationTable | None = None):
    """Adjoint of :func:`apply_permutation`: gather with the inverse table."""
    if inverse is None:
        inverse = invert_permutation(table)
    return apply_permutation(grad_out, inverse)


def origin_groups(cfg: GroupShiftConfig, dims) -> np.ndarray:
    """Decode where each (destination group, channel group) pair came from.

    Shifts a volume whose shifted channels hold their own spatial-group index
    and reads the value back at each destination group. Returns a (G, G) int
    array ``origin[j, k]``.
    """
    D, H, W, C = dims
    b = cfg.bind(*dims)
    x, y, z = np.meshgrid(np.arange(D), np.arange(H), np.arange(W), indexing="ij")
    gid = x // b.d + (y // b.h) * cfg.g_d + (z // b.w) * cfg.g_d * cfg.g_h
    vol = np.zeros((1, D, H, W, C))
    vol[0, ..., : cfg.c_s] = gid[..., None]
    out = apply_permutation(vol, build_permutation(cfg, dims))[0]
    origin = np.full((cfg.G, cfg.G), -1, dtype=np.int64)
    for j in range(cfg.G):
        sel = gid == j
        for k in range(cfg.G):
            vals = np.unique(out[sel][:, k * cfg.c_g : (k + 1) * cfg.c_g])
            if vals.size == 1:
                origin[j, k] = int(vals[0])
    return origin


def factorizations(G: int, dims3) -> list[tuple[int, int, int]]:
    """All (g_d, g_h, g_w) with product G that divide the spatial dims."""
    D, H, W = dims3
    out = []
    for a in range(1, G + 1):
        if G % a or D % a:
            continue
        for b in range(1, G // a + 1):
            if (G // a) % b or H % b:
                continue
            c = G // (a * b)
            if W % c == 0:
                out.append((a, b, c))
    return out


def check_suite(cfg: GroupShiftConfig, dims, seed: int = 0, corrupt=None) -> dict[str, bool]:
    """Run the equivalence / bijection / inverse / coverage checks on one case.

    ``dims`` is (N, D, H, W, C). ``corrupt``, if given, is applied to the built
    table before checking (used to prove the checks can fail).
    """
    N, D, H, W, C = dims
    rng = np.random.default_rng(seed)
    F = rng.standard_normal((N, D, H, W, C))
    table = build_permutation(cfg, (D, H, W, C))
    if corrupt is not None:
        table = corrupt(table)
    fast = apply_permutation(F, table)
    results = {
        "oracle": bool(np.array_equal(fast, apply_group_shift_naive(F, cfg))),
        "bijective": check_bijection(table.map, table.size),
        "multiset": bool(np.array_equal(np.sort(fast, axis=None), np.sort(F, axis=None))),
    }
    if results["bijective"]:
        inv = invert_permutation(table)
        results["inverse"] = bool(
            compose(table, inv).is_identity() and np.array_equal(apply_permutation(fast, inv), F)
        )
    else:
        results["inverse"] = False
    if cfg.c_g > 0 and corrupt is None:
        origin = origin_groups(cfg, (D, H, W, C))
        j, k = np.meshgrid(np.arange(cfg.G), np.arange(cfg.G), indexing="ij")
        results["all_groups"] = bool(
            np.array_equal(origin, (j - k) % cfg.G)
            and all(sorted(row) == list(range(cfg.G)) for row in origin.tolist())
        )
    return results
