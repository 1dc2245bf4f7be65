"""Rotation-equivariant encoder over the discrete cyclic group C_N.

Feature fields use the regular representation: every channel carries one copy
per group element (the orientation axis). A rotation by element ``r`` acts on a
field by rotating the spatial grid and cyclically shifting the orientation axis
by ``r``. Filters are generated from a single learnable base kernel per layer,
so rotated copies add no parameters.

For N=4 (the default) every rotation is an exact pixel permutation. Other
orders are accepted; rotations that are not multiples of 90 degrees are
realized with bilinear resampling and are only approximately equivariant.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from scipy import ndimage

from . import numerics as nx
from .errors import DimensionError, DomainError, GeometryError
from .numerics import Tensor


@dataclass(frozen=True)
class GroupSpec:
    order: int = 4

    def __post_init__(self):
        if self.order < 1:
            raise DomainError(f"group order must be >= 1, got {self.order}")

    def angle(self, r: int) -> float:
        """Rotation angle in degrees of element ``r``."""
        return 360.0 * r / self.order

    def quarter_turns(self, r: int) -> int | None:
        """Number of exact 90-degree turns for element ``r``, or None if inexact."""
        num = 4 * (r % self.order)
        return num // self.order if num % self.order == 0 else None

    @property
    def exact(self) -> bool:
        return all(self.quarter_turns(r) is not None for r in range(self.order))


@dataclass
class FeatureField:
    """Batched feature field laid out as (batch, channels, orientations, H, W)."""

    data: Tensor
    group: GroupSpec = field(default_factory=GroupSpec)

    def __post_init__(self):
        if self.data.ndim != 5:
            raise DimensionError(f"feature field data must be rank 5 (B, C, O, H, W), got {self.data.shape}")
        if self.orientations not in (1, self.group.order):
            raise DimensionError(
                f"orientation axis {self.orientations} must be 1 or the group order {self.group.order}")

    @classmethod
    def from_image(cls, image, group: GroupSpec | None = None) -> "FeatureField":
        """Wrap (C, H, W) or (B, C, H, W) planar data as an orientation-free field."""
        t = image if isinstance(image, Tensor) else Tensor(image)
        if t.ndim == 3:
            t = nx.reshape(t, (1,) + t.shape)
        if t.ndim != 4:
            raise DimensionError(f"image must be (C, H, W) or (B, C, H, W), got {t.shape}")
        B, C, H, W = t.shape
        return cls(nx.reshape(t, (B, C, 1, H, W)), group or GroupSpec())

    @property
    def batch(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[1]

    @property
    def orientations(self) -> int:
        return self.data.shape[2]

    @property
    def height(self) -> int:
        return self.data.shape[3]

    @property
    def width(self) -> int:
        return self.data.shape[4]

    @property
    def square(self) -> bool:
        return self.height == self.width

    def planar(self) -> Tensor:
        """Orientation-free view as (B, C, H, W); only valid with one orientation."""
        if self.orientations != 1:
            raise DimensionError("planar() requires an orientation-free field")
        return nx.reshape(self.data, (self.batch, self.channels, self.height, self.width))


# --- rotation primitives --------------------------------------------------

@lru_cache(maxsize=None)
def rotation_matrix(side: int, degrees: float) -> np.ndarray:
    """Bilinear resampling operator (side^2 x side^2) for rotating a square stencil.

    Follows the same orientation convention as ``np.rot90`` so that a 90 degree
    request reproduces it exactly.
    """
    theta = np.deg2rad(degrees)
    c, s = np.cos(theta), np.sin(theta)
    center = (side - 1) / 2.0
    M = np.zeros((side * side, side * side))
    for i in range(side):
        for j in range(side):
            y, x = i - center, j - center
            sy = y * c + x * s + center
            sx = -y * s + x * c + center
            y0, x0 = int(np.floor(sy + 1e-9)), int(np.floor(sx + 1e-9))
            fy, fx = sy - y0, sx - x0
            for dy, wy in ((0, 1 - fy), (1, fy)):
                for dx, wx in ((0, 1 - fx), (1, fx)):
                    yy, xx = y0 + dy, x0 + dx
                    w = wy * wx
                    if abs(w) > 1e-12 and 0 <= yy < side and 0 <= xx < side:
                        M[i * side + j, yy * side + xx] += w
    return M


def rotate_spatial(x: Tensor, r: int, group: GroupSpec) -> Tensor:
    """Rotate the last two (square) axes of ``x`` by group element ``r``."""
    turns = group.quarter_turns(r)
    if turns is not None:
        return nx.rot90(x, turns)
    side = x.shape[-1]
    M = rotation_matrix(side, group.angle(r)).astype(x.dtype)
    flat = nx.reshape(x, x.shape[:-2] + (side * side, 1))
    out = nx.matmul(Tensor(M), flat)
    return nx.reshape(out, x.shape)


def _rotate_plane_numpy(a: np.ndarray, r: int, group: GroupSpec) -> np.ndarray:
    turns = group.quarter_turns(r)
    if turns is not None:
        return np.ascontiguousarray(np.rot90(a, turns, axes=(-2, -1)))
    return ndimage.rotate(a, group.angle(r), axes=(-1, -2), reshape=False, order=1, mode="constant")


# Test hook for the self-check mutation run; never set in normal use.
_FAULTS: set[str] = set()


def rotate_field(field_: FeatureField, r: int) -> FeatureField:
    """Act on a field with group element ``r``: spatial rotation + orientation shift."""
    n = field_.group.order
    if not 0 <= r < n:
        raise DomainError(f"group element {r} outside [0, {n})")
    turns = field_.group.quarter_turns(r)
    if turns is not None:
        data = nx.rot90(field_.data, turns)
    else:
        data = Tensor(_rotate_plane_numpy(field_.data.data, r, field_.group))
    if field_.orientations > 1 and "rotation" not in _FAULTS:
        data = nx.roll(data, r, axis=2)
    return FeatureField(data, field_.group)


def rotate_image(image: np.ndarray, k: int) -> np.ndarray:
    """Quarter-turn rotation of a (..., H, W) array; the shared exact primitive."""
    return np.ascontiguousarray(np.rot90(image, k % 4, axes=(-2, -1)))


# --- layers ---------------------------------------------------------------

@dataclass
class GroupKernel:
    """Learnable base filter plus the rule that realizes its rotated copies.

    Lifting kernels have base shape (out, in, k, k); group kernels have
    (out, in, N, k, k) with the third axis indexing input orientation.
    """

    base: Tensor
    group: GroupSpec
    lifting: bool

    @property
    def out_channels(self) -> int:
        return self.base.shape[0]

    @property
    def in_channels(self) -> int:
        return self.base.shape[1]

    @property
    def size(self) -> int:
        return self.base.shape[-1]

    def realize(self) -> Tensor:
        """Stacked filter bank for a single conv2d call.

        Lifting: (out*N, in, k, k). Group: (out*N, in*N, k, k). Output channel
        ``o*N + r`` holds the filter for output orientation ``r``.
        """
        n = self.group.order
        copies = []
        for r in range(n):
            w = self.base if self.lifting else nx.roll(self.base, r, axis=2)
            copies.append(rotate_spatial(w, r, self.group))
        bank = nx.stack(copies, axis=1)
        k = self.size
        if self.lifting:
            return nx.reshape(bank, (self.out_channels * n, self.in_channels, k, k))
        return nx.reshape(bank, (self.out_channels * n, self.in_channels * n, k, k))


def lift_conv(image: FeatureField, kernel: GroupKernel, strict: bool = True) -> FeatureField:
    """Plane -> group correlation. Output orientation ``r`` sees the base rotated by ``r``."""
    if image.orientations != 1:
        raise DimensionError(f"lift_conv expects an orientation-free field, got {image.orientations}")
    if strict and not image.square:
        raise GeometryError(f"lift_conv requires a square input, got {image.height}x{image.width}")
    if not kernel.lifting:
        raise DimensionError("lift_conv needs a lifting kernel")
    if kernel.in_channels != image.channels:
        raise DimensionError(f"kernel expects {kernel.in_channels} channels, image has {image.channels}")
    n = kernel.group.order
    out = nx.conv2d(image.planar(), kernel.realize())
    B, _, H, W = out.shape
    return FeatureField(nx.reshape(out, (B, kernel.out_channels, n, H, W)), kernel.group)


def group_conv(field_: FeatureField, kernel: GroupKernel) -> FeatureField:
    """Group -> group correlation with the regular-representation filter bank."""
    n = kernel.group.order
    if field_.orientations != n:
        raise DimensionError(f"group_conv expects {n} orientations, field has {field_.orientations}")
    if kernel.lifting:
        raise DimensionError("group_conv needs a group kernel")
    if kernel.in_channels != field_.channels:
        raise DimensionError(f"kernel expects {kernel.in_channels} channels, field has {field_.channels}")
    B, C, _, H, W = field_.data.shape
    flat = nx.reshape(field_.data, (B, C * n, H, W))
    out = nx.conv2d(flat, kernel.realize())
    return FeatureField(nx.reshape(out, (B, kernel.out_channels, n, H, W)), kernel.group)


def invariant_pool(field_: FeatureField) -> FeatureField:
    """Mean over the orientation axis; the result is rotation-invariant per pixel fiber."""
    if field_.orientations != field_.group.order:
        raise DimensionError("invariant_pool expects a lifted field")
    return FeatureField(nx.mean(field_.data, axis=2, keepdims=True), field_.group)


def add_bias(field_: FeatureField, bias: Tensor) -> FeatureField:
    # One bias per channel, shared over orientations so the group action is untouched.
    b = nx.reshape(bias, (1, bias.shape[0], 1, 1, 1))
    return FeatureField(nx.add(field_.data, b), field_.group)


def downsample(field_: FeatureField, factor: int) -> FeatureField:
    return FeatureField(nx.avg_pool2d(field_.data, factor), field_.group)


@dataclass
class BackboneConfig:
    group: GroupSpec = field(default_factory=GroupSpec)
    in_channels: int = 3
    widths: tuple[int, ...] = (8, 16, 16)
    kernel_size: int = 3
    downsample: tuple[int, ...] = (2, 2, 2)

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.downsample = tuple(self.downsample)
        if self.kernel_size % 2 == 0 or self.kernel_size < 1:
            raise GeometryError(f"kernel size must be odd, got {self.kernel_size}")
        if len(self.widths) == 0:
            raise DomainError("backbone needs at least one layer")
        if len(self.downsample) != len(self.widths):
            raise DomainError("one downsampling factor per stage is required")
        if any(f < 1 for f in self.downsample):
            raise DomainError("downsampling factors must be >= 1")

    @property
    def reduction(self) -> int:
        return int(np.prod(self.downsample))

    @property
    def out_channels(self) -> int:
        return self.widths[-1]


class Backbone:
    """Lift -> (group conv, relu, pool)* -> orientation pooling.

    Parameters are named ``backbone.layer{i}.base`` / ``backbone.layer{i}.bias``.
    """

    def __init__(self, config: BackboneConfig, seed: int = 0):
        self.config = config
        rng = np.random.default_rng(seed)
        g, k = config.group, config.kernel_size
        self.kernels: list[GroupKernel] = []
        self.biases: list[Tensor] = []
        cin = config.in_channels
        for i, cout in enumerate(config.widths):
            lifting = i == 0
            shape = (cout, cin, k, k) if lifting else (cout, cin, g.order, k, k)
            fan_in = int(np.prod(shape[1:]))
            bound = np.sqrt(6.0 / fan_in)
            base = Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True,
                          name=f"backbone.layer{i}.base")
            bias = Tensor(np.zeros(cout), requires_grad=True, name=f"backbone.layer{i}.bias")
            self.kernels.append(GroupKernel(base, g, lifting))
            self.biases.append(bias)
            cin = cout

    def parameters(self) -> dict[str, Tensor]:
        named = {}
        for kernel, bias in zip(self.kernels, self.biases):
            named[kernel.base.name] = kernel.base
            named[bias.name] = bias
        return named

    def lifted(self, image: FeatureField) -> FeatureField:
        """Run every layer but stop before orientation pooling."""
        side = image.height
        if not image.square:
            raise GeometryError(f"encoder input must be square, got {image.height}x{image.width}")
        if side % self.config.reduction:
            raise GeometryError(
                f"input side {side} not divisible by total downsampling {self.config.reduction}")
        f = image
        for i, (kernel, bias, factor) in enumerate(zip(self.kernels, self.biases, self.config.downsample)):
            f = lift_conv(f, kernel) if i == 0 else group_conv(f, kernel)
            f = add_bias(f, bias)
            f = FeatureField(nx.relu(f.data), f.group)
            f = downsample(f, factor)
        return f

    def __call__(self, image: FeatureField) -> FeatureField:
        return invariant_pool(self.lifted(image))


def encode(image: FeatureField, backbone: Backbone) -> FeatureField:
    """Invariant spatial map handed to the patch stage."""
    return backbone(image)
