"""Uniform integer quantization grids with per-row, per-group scaling.

A grid maps real weights onto a small signed integer range. Scales (and
zero points, for asymmetric grids) are fitted per output row and per
contiguous group of input channels. ``rtn_quantize`` is the baseline that
rounds every element independently; the compensation engines reuse the
same fitting and rounding rules column by column.

Rounding is round-half-to-even throughout, so symmetric grids are exactly
sign-equivariant and long compensation chains pick up no rounding bias.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import NumericalError

__all__ = [
    "QuantGrid",
    "GroupScale",
    "QuantizedLayer",
    "fit_scales",
    "quantize_values",
    "dequantize_codes",
    "rtn_quantize",
]


@dataclass(frozen=True)
class QuantGrid:
    """Integer code range for a given bit width.

    ``group_size=None`` means one scale group per row (the whole row shares
    a scale). Symmetric grids use the balanced range [-(2^(b-1)-1), 2^(b-1)-1]
    so that code 0 represents 0.0 exactly and negation maps codes to their
    negatives; asymmetric grids use [0, 2^b - 1] with a zero point.
    """

    bits: int
    group_size: int | None = None
    symmetric: bool = True

    def __post_init__(self):
        if not 2 <= self.bits <= 8:
            raise ValueError(f"bits must be in [2, 8], got {self.bits}")
        if self.group_size is not None and self.group_size < 1:
            raise ValueError(f"group_size must be >= 1 or None, got {self.group_size}")

    @property
    def q_min(self) -> int:
        return -(2 ** (self.bits - 1) - 1) if self.symmetric else 0

    @property
    def q_max(self) -> int:
        return 2 ** (self.bits - 1) - 1 if self.symmetric else 2**self.bits - 1

    def resolved_group_size(self, d_in: int) -> int:
        return d_in if self.group_size is None else self.group_size

    def n_groups(self, d_in: int) -> int:
        if d_in == 0:
            return 0
        return math.ceil(d_in / self.resolved_group_size(d_in))


@dataclass
class GroupScale:
    """Fitted scale (always > 0) and integer zero point for one or more groups.

    Arrays broadcast against the values being quantized; fitting a 1-D group
    yields 0-d arrays, fitting a (rows x width) slab yields per-row entries.
    """

    scale: np.ndarray
    zero_point: np.ndarray


def fit_scales(values: np.ndarray, grid: QuantGrid) -> GroupScale:
    """Fit scale/zero-point over the last axis of ``values``.

    Symmetric: scale = max(|w|) / q_max. Asymmetric: scale spans the value
    range and zero_point = round(-min / scale). Groups whose computed scale
    is zero (all-zero or constant) fall back to scale 1 so the function is
    total and scales stay strictly positive.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.shape[-1] == 0:
        raise ValueError("cannot fit scales on an empty group")
    if grid.symmetric:
        scale = np.abs(values).max(axis=-1) / grid.q_max
        scale = np.where(scale == 0.0, 1.0, scale)
        zero_point = np.zeros_like(scale, dtype=np.int64)
    else:
        lo = values.min(axis=-1)
        hi = values.max(axis=-1)
        scale = (hi - lo) / (grid.q_max - grid.q_min)
        scale = np.where(scale == 0.0, 1.0, scale)
        zero_point = np.round(-lo / scale).astype(np.int64)
    return GroupScale(scale=np.asarray(scale, dtype=np.float64), zero_point=zero_point)


def quantize_values(
    values: np.ndarray, gs: GroupScale, grid: QuantGrid
) -> tuple[np.ndarray, np.ndarray]:
    """Quantize values elementwise: returns (integer codes, dequantized values).

    ``gs.scale`` must broadcast against ``values``. Codes are clamped to the
    grid range; dequantization is (code - zero_point) * scale, exact given
    the stored codes and scales.
    """
    values = np.asarray(values, dtype=np.float64)
    codes = np.round(values / gs.scale) + gs.zero_point
    codes = np.clip(codes, grid.q_min, grid.q_max).astype(np.int64)
    deq = (codes - gs.zero_point) * gs.scale
    return codes, deq


def dequantize_codes(codes: np.ndarray, gs: GroupScale, grid: QuantGrid) -> np.ndarray:
    """Map integer codes back to real values. Depends only on codes/scale/zero."""
    return (np.asarray(codes, dtype=np.int64) - gs.zero_point) * gs.scale


@dataclass
class QuantizedLayer:
    """One quantized weight matrix: codes plus per-(row, group) scaling.

    ``codes`` is (d_out x d_in) int32, ``scales`` (d_out x n_groups) float64,
    ``zero_points`` (d_out x n_groups) int32 (all zero for symmetric grids).
    The engine fields record how the artifact was produced.
    """

    codes: np.ndarray
    scales: np.ndarray
    zero_points: np.ndarray
    bits: int
    group_size: int
    symmetric: bool
    engine: str = "rtn"
    beta: float = 0.0
    damp_ratio: float = 0.0
    block_size: int = 0
    first_order_sign: str = "minus"
    extra: dict = field(default_factory=dict)

    @property
    def d_out(self) -> int:
        return self.codes.shape[0]

    @property
    def d_in(self) -> int:
        return self.codes.shape[1]

    @property
    def n_groups(self) -> int:
        return self.scales.shape[1]

    def grid(self) -> QuantGrid:
        return QuantGrid(self.bits, self.group_size, self.symmetric)

    def validate(self) -> None:
        """Check internal consistency; raises NumericalError on violation."""
        grid = self.grid()
        d_out, d_in = self.codes.shape
        expected_groups = grid.n_groups(d_in)
        if self.scales.shape != (d_out, expected_groups):
            raise NumericalError(
                f"scales shape {self.scales.shape} does not match "
                f"(d_out={d_out}, n_groups={expected_groups})"
            )
        if self.zero_points.shape != self.scales.shape:
            raise NumericalError("zero_points shape must match scales shape")
        if self.codes.size and (
            self.codes.min() < grid.q_min or self.codes.max() > grid.q_max
        ):
            raise NumericalError(
                f"codes outside grid range [{grid.q_min}, {grid.q_max}] "
                f"for {self.bits}-bit {'symmetric' if self.symmetric else 'asymmetric'} grid"
            )
        if self.scales.size and not (self.scales > 0).all():
            raise NumericalError("all scales must be strictly positive")
        if self.symmetric and self.zero_points.size and np.any(self.zero_points != 0):
            raise NumericalError("symmetric layers must have all-zero zero_points")

    def group_index(self) -> np.ndarray:
        """Group index of each input column."""
        return np.arange(self.d_in) // self.group_size

    def dequantize(self) -> np.ndarray:
        """Reconstruct the real-valued weight matrix from codes and scales."""
        if self.codes.size == 0:
            return np.zeros(self.codes.shape, dtype=np.float64)
        g = self.group_index()
        return (self.codes.astype(np.float64) - self.zero_points[:, g]) * self.scales[:, g]


class ScaleBook:
    """Per-(row, group) scales fitted lazily during an engine pass.

    Each group is fitted exactly once, from the weight slab handed in at the
    moment the group's first column is reached. Engines choose whether that
    slab comes from the live latent weights or from the frozen originals.
    """

    def __init__(self, grid: QuantGrid, d_out: int, d_in: int):
        self.grid = grid
        self.d_in = d_in
        self.group_size = max(1, grid.resolved_group_size(d_in))
        n_groups = grid.n_groups(d_in)
        self.scales = np.empty((d_out, n_groups), dtype=np.float64)
        self.zero_points = np.zeros((d_out, n_groups), dtype=np.int64)
        self._fitted = np.zeros(n_groups, dtype=bool)

    def group_of(self, col: int) -> int:
        return col // self.group_size

    def ensure_group(self, col: int, source: np.ndarray) -> None:
        """Fit the group containing ``col`` from ``source`` if not already fit."""
        g = self.group_of(col)
        if self._fitted[g]:
            return
        lo = g * self.group_size
        hi = min(lo + self.group_size, self.d_in)
        gs = fit_scales(source[:, lo:hi], self.grid)
        self.scales[:, g] = gs.scale
        self.zero_points[:, g] = gs.zero_point
        self._fitted[g] = True

    def column_params(self, col: int) -> GroupScale:
        g = self.group_of(col)
        if not self._fitted[g]:
            raise NumericalError(f"group {g} used before being fitted")
        return GroupScale(self.scales[:, g], self.zero_points[:, g])


def rtn_quantize(weights: np.ndarray, grid: QuantGrid, **artifact_fields) -> QuantizedLayer:
    """Round-to-nearest baseline: independent per-element quantization.

    No cross-column compensation; every element is fitted and rounded within
    its own (row, group). Rejects non-finite weights.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 2:
        raise ValueError("weights must be a 2-D matrix")
    if weights.size and not np.isfinite(weights).all():
        raise NumericalError("weights contain non-finite values")
    d_out, d_in = weights.shape
    book = ScaleBook(grid, d_out, d_in)
    codes = np.zeros((d_out, d_in), dtype=np.int64)
    for g in range(grid.n_groups(d_in)):
        lo = g * book.group_size
        hi = min(lo + book.group_size, d_in)
        book.ensure_group(lo, weights)
        gs = book.column_params(lo)
        c, _ = quantize_values(weights[:, lo:hi], GroupScale(gs.scale[:, None], gs.zero_point[:, None]), grid)
        codes[:, lo:hi] = c
    fields = dict(
        engine="rtn",
        beta=0.0,
        damp_ratio=0.0,
        block_size=0,
    )
    fields.update(artifact_fields)
    return QuantizedLayer(
        codes=codes.astype(np.int32),
        scales=book.scales,
        zero_points=book.zero_points.astype(np.int32),
        bits=grid.bits,
        group_size=book.group_size,
        symmetric=grid.symmetric,
        **fields,
    )
