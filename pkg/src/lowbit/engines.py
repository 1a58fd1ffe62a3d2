"""Column-wise quantization engines with error compensation.

Five engines share one contract (``run_engine``): quantize a weight matrix
column by column, left to right, compensating not-yet-quantized columns for
the rounding error already committed.

* ``rtn`` - round-to-nearest, no compensation; the baseline.
* ``obs_oracle`` - dense reference: keeps the inverse of the damped Hessian
  explicitly and shrinks it one coordinate at a time with the rank-one
  removal rule. Quadratic-memory, used to validate the factor route.
* ``gptq`` - the production route: one upper-triangular factor T of the
  inverse (T^T T = H^(-1)) drives all compensation; updates inside a block
  are applied eagerly, updates past the block boundary are batched.
* ``foem`` - gptq plus a first-order correction: compensation drags the
  latent weights away from the originals, so a drift-proportional gradient
  estimate beta * (W - W_orig) is folded into each update through the
  trailing inverse recovered from T. The sign of the correction is
  configurable ("minus" descends the modeled loss and is the default;
  "plus" is the additive variant kept for ablation).
* ``foem_plus`` - foem plus an input-covariance cross term
  outer(w_col, H[col, col+1:] @ trailing_inverse) added to the remaining
  columns at every step. Applied eagerly (no lazy batching); experimental.

Engines own their LayerBundle exclusively while running. Rows are
independent given the factor, so all per-column updates are whole-matrix
row-vectorized; column order is strictly sequential.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import ConfigError, NumericalError
from .linalg import HessianState, InvCholFactor, inverse_cholesky, iterative_inverse_update
from .quantizer import (
    QuantGrid,
    QuantizedLayer,
    ScaleBook,
    quantize_values,
    rtn_quantize,
)
from .report import LayerReport, proxy_loss

__all__ = [
    "ENGINES",
    "FIRST_ORDER_SIGNS",
    "SCALE_SOURCES",
    "LayerBundle",
    "EngineConfig",
    "ColumnStepResult",
    "obs_prune_step",
    "obc_quant_step",
    "first_order_quant_step",
    "gptq_column_step",
    "foem_column_step",
    "foem_block_boundary",
    "foem_plus_term",
    "run_engine",
]

ENGINES = ("rtn", "obs_oracle", "gptq", "foem", "foem_plus")
FIRST_ORDER_SIGNS = ("minus", "plus")
SCALE_SOURCES = ("latent", "original")


class LayerBundle:
    """Latent weights being calibrated plus the frozen originals.

    ``weights`` is mutated in place by the engines; ``original`` is the
    full-precision snapshot taken at construction and never changes.
    """

    def __init__(self, weights: np.ndarray):
        weights = np.array(weights, dtype=np.float64, copy=True)
        if weights.ndim != 2:
            raise NumericalError(f"weights must be 2-D, got shape {weights.shape}")
        self.weights = weights
        self.original = weights.copy()
        self.original.setflags(write=False)

    @property
    def d_out(self) -> int:
        return self.weights.shape[0]

    @property
    def d_in(self) -> int:
        return self.weights.shape[1]

    def drift(self) -> np.ndarray:
        """Current deviation of the latent weights from the originals."""
        return self.weights - self.original


@dataclass(frozen=True)
class EngineConfig:
    """Everything an engine run depends on besides the data itself.

    ``beta`` scales latent drift into gradient space for the first-order
    engines; ``block_size`` bounds how many columns receive eager updates
    before the batched boundary update fires. Fields that do not apply to
    the selected engine are ignored.
    """

    engine: str = "gptq"
    bits: int = 4
    group_size: int | None = 128
    symmetric: bool = True
    block_size: int = 128
    beta: float = 3e-4
    damp_ratio: float = 0.01
    first_order_sign: str = "minus"
    scale_source: str = "latent"

    def validate(self) -> None:
        if self.engine not in ENGINES:
            raise ConfigError(f"unknown engine {self.engine!r}; expected one of {ENGINES}")
        if not 2 <= self.bits <= 8:
            raise ConfigError(f"bits must be in [2, 8], got {self.bits}")
        if self.group_size is not None and self.group_size < 1:
            raise ConfigError(f"group_size must be >= 1 or None, got {self.group_size}")
        if self.block_size < 1:
            raise ConfigError(f"block_size must be >= 1, got {self.block_size}")
        if self.beta < 0:
            raise ConfigError(f"beta must be non-negative, got {self.beta}")
        if self.damp_ratio < 0:
            raise ConfigError(f"damp_ratio must be non-negative, got {self.damp_ratio}")
        if self.first_order_sign not in FIRST_ORDER_SIGNS:
            raise ConfigError(
                f"first_order_sign must be one of {FIRST_ORDER_SIGNS}, "
                f"got {self.first_order_sign!r}"
            )
        if self.scale_source not in SCALE_SOURCES:
            raise ConfigError(
                f"scale_source must be one of {SCALE_SOURCES}, got {self.scale_source!r}"
            )

    def grid(self) -> QuantGrid:
        return QuantGrid(self.bits, self.group_size, self.symmetric)

    def sign_factor(self) -> float:
        return -1.0 if self.first_order_sign == "minus" else 1.0

    def to_dict(self) -> dict:
        return {
            "engine": self.engine,
            "bits": self.bits,
            "group_size": self.group_size,
            "symmetric": self.symmetric,
            "block_size": self.block_size,
            "beta": self.beta,
            "damp_ratio": self.damp_ratio,
            "first_order_sign": self.first_order_sign,
            "scale_source": self.scale_source,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "EngineConfig":
        known = {k: data[k] for k in cls.__dataclass_fields__ if k in data}
        cfg = cls(**known)
        cfg.validate()
        return cfg


@dataclass
class ColumnStepResult:
    """Outcome of quantizing one column: codes, dequantized values, and the
    compensation update applied to the still-latent columns."""

    q_col: np.ndarray
    deq_col: np.ndarray
    delta_w: np.ndarray


def obs_prune_step(w_row: np.ndarray, hinv: np.ndarray, q: int) -> np.ndarray:
    """Compensation for zeroing coordinate ``q`` of a row: the constrained
    minimizer of 0.5 * dw H dw^T subject to dw_q + w_q = 0.

    Returns the full update row -(w_q / hinv[q, q]) * hinv[q, :].
    """
    hinv = np.asarray(hinv, dtype=np.float64)
    d = hinv[q, q]
    if d <= 0:
        raise NumericalError(f"hinv[{q}, {q}] = {d} is not positive; matrix not SPD")
    return -(np.asarray(w_row, dtype=np.float64)[q] / d) * hinv[q, :]


def obc_quant_step(
    w_row: np.ndarray, hinv: np.ndarray, q: int, quantized: float
) -> np.ndarray:
    """Quantization variant of the pruning step: the constraint pins
    coordinate ``q`` to its quantized value instead of zero.

    Returns -((w_q - quantized) / hinv[q, q]) * hinv[q, :].
    """
    hinv = np.asarray(hinv, dtype=np.float64)
    d = hinv[q, q]
    if d <= 0:
        raise NumericalError(f"hinv[{q}, {q}] = {d} is not positive; matrix not SPD")
    err = np.asarray(w_row, dtype=np.float64)[q] - quantized
    return -(err / d) * hinv[q, :]


def first_order_quant_step(
    err: float,
    gradient: np.ndarray,
    hinv: np.ndarray,
    q: int,
    exact_multiplier: bool = True,
) -> np.ndarray:
    """Analytic update for the gradient-aware constrained step.

    Minimizes g dw^T + 0.5 dw H dw^T subject to dw_q + err = 0. With
    ``exact_multiplier`` the Lagrange multiplier absorbs the gradient's
    pull on the constrained coordinate,

        lam = (err - (g Hinv)_q) / Hinv_qq,
        dw  = -g Hinv - lam * Hinv[q, :],

    which is the exact constrained minimizer (matches a dense KKT solve to
    machine precision). With ``exact_multiplier=False`` the multiplier
    drops the (g Hinv)_q correction, which is the simplification the
    production engines inherit; the resulting direction deviates from the
    exact minimizer by exactly ((g Hinv)_q / Hinv_qq) * Hinv[q, :].
    """
    hinv = np.asarray(hinv, dtype=np.float64)
    gradient = np.asarray(gradient, dtype=np.float64)
    d = hinv[q, q]
    if d <= 0:
        raise NumericalError(f"hinv[{q}, {q}] = {d} is not positive; matrix not SPD")
    g_hinv = gradient @ hinv
    lam = (err - g_hinv[q]) / d if exact_multiplier else err / d
    return -g_hinv - lam * hinv[q, :]


def gptq_column_step(
    bundle: LayerBundle,
    factor: InvCholFactor,
    grid: QuantGrid,
    col: int,
    book: ScaleBook,
    scale_source: str = "latent",
) -> ColumnStepResult:
    """Reference (unblocked) factor-route step for one column.

    Quantizes column ``col`` for every row, writes the dequantized values
    into the latent column, and propagates -err * T[col, col+1:] into all
    remaining columns. The blocked driver applies the same arithmetic with
    block-local slices; this form exists for oracle tests and diagnostics.
    """
    T = factor.matrix
    source = bundle.weights if scale_source == "latent" else bundle.original
    book.ensure_group(col, source)
    gs = book.column_params(col)
    w = bundle.weights[:, col]
    codes, deq = quantize_values(w, gs, grid)
    err = (w - deq) / T[col, col]
    delta = -np.outer(err, T[col, col + 1 :])
    bundle.weights[:, col] = deq
    bundle.weights[:, col + 1 :] += delta
    return ColumnStepResult(q_col=codes, deq_col=deq, delta_w=delta)


def foem_column_step(
    bundle: LayerBundle,
    factor: InvCholFactor,
    grid: QuantGrid,
    col: int,
    block_end: int,
    book: ScaleBook,
    beta: float,
    sign: float = -1.0,
    scale_source: str = "latent",
) -> ColumnStepResult:
    """One in-block column step of the first-order engine.

    One combined update of the block slice [col, block_end): the
    factor-route error propagation plus the drift correction
    sign * beta * (W - W_orig)[:, slice] @ (T_s^T T_s), with
    T_s = T[col:block_end, col:block_end]. Both terms are evaluated from
    the latent state at the start of the step (the drift seen by column 0
    of an untouched layer is therefore exactly zero); the drift still
    reflects every previous column's update, it is never cached across
    steps. With beta = 0 this is exactly the blocked gptq step.
    """
    T = factor.matrix
    source = bundle.weights if scale_source == "latent" else bundle.original
    book.ensure_group(col, source)
    gs = book.column_params(col)
    w = bundle.weights[:, col].copy()
    codes, deq = quantize_values(w, gs, grid)
    err = (w - deq) / T[col, col]
    sl = slice(col, block_end)
    before = bundle.weights[:, sl].copy()
    if beta != 0.0:
        t_sub = T[sl, sl]
        m_sub = t_sub.T @ t_sub
        drift = bundle.weights[:, sl] - bundle.original[:, sl]
        bundle.weights[:, sl] += (sign * beta) * (drift @ m_sub)
    bundle.weights[:, sl] -= err[:, None] * T[col, sl][None, :]
    delta = bundle.weights[:, sl] - before
    return ColumnStepResult(q_col=codes, deq_col=deq, delta_w=delta)


def foem_block_boundary(
    bundle: LayerBundle,
    factor: InvCholFactor,
    errs: np.ndarray,
    block_start: int,
    block_end: int,
    beta: float,
    sign: float = -1.0,
) -> None:
    """Batched update of all columns past ``block_end``.

    One combined update: the factor-route cross-block term
    -errs @ T[block, trailing] plus (for beta > 0) the drift correction
    against the trailing inverse T_t^T T_t, both evaluated from the latent
    state before this boundary fires. The trailing correction runs as two
    back-to-back products so the trailing inverse is never materialized.
    """
    T = factor.matrix
    d_in = bundle.d_in
    if block_end >= d_in:
        return
    t = slice(block_end, d_in)
    if beta != 0.0:
        t_trail = np.ascontiguousarray(T[t, t])
        drift = bundle.weights[:, t] - bundle.original[:, t]
        correction = (sign * beta) * ((drift @ t_trail.T) @ t_trail)
        bundle.weights[:, t] -= errs @ T[block_start:block_end, t]
        bundle.weights[:, t] += correction
    else:
        bundle.weights[:, t] -= errs @ T[block_start:block_end, t]


def foem_plus_term(
    bundle: LayerBundle,
    hessian: HessianState | np.ndarray,
    factor: InvCholFactor,
    col: int,
) -> np.ndarray:
    """Input-covariance cross term for the remaining columns.

    Returns outer(W[:, col], H[col, col+1:] @ trailing_inverse) where the
    trailing inverse is T[col+1:, col+1:]^T T[col+1:, col+1:], evaluated as
    two row-vector products. The covariance row excludes the diagonal, so
    damping does not affect it; a diagonal H makes the term vanish.
    """
    H = hessian.matrix if isinstance(hessian, HessianState) else np.asarray(hessian)
    T = factor.matrix
    sub = T[col + 1 :, col + 1 :]
    row = (H[col, col + 1 :] @ sub.T) @ sub
    return np.outer(bundle.weights[:, col], row)


def _run_blocked(
    bundle: LayerBundle,
    factor: InvCholFactor,
    grid: QuantGrid,
    config: EngineConfig,
    plus_hessian: np.ndarray | None,
) -> tuple[np.ndarray, ScaleBook]:
    """Blocked driver shared by gptq, foem, and foem_plus."""
    T = factor.matrix
    d_out, d_in = bundle.weights.shape
    first_order = config.engine in ("foem", "foem_plus")
    beta = config.beta if first_order else 0.0
    sign = config.sign_factor()
    source = bundle.weights if config.scale_source == "latent" else bundle.original
    book = ScaleBook(grid, d_out, d_in)
    codes = np.zeros((d_out, d_in), dtype=np.int64)
    B = config.block_size
    W = bundle.weights
    for i in range(0, d_in, B):
        e = min(i + B, d_in)
        errs = np.empty((d_out, e - i), dtype=np.float64)
        for j in range(i, e):
            book.ensure_group(j, source)
            gs = book.column_params(j)
            w = W[:, j]
            if plus_hessian is not None and j < d_in - 1:
                cross = foem_plus_term(bundle, plus_hessian, factor, j)
            else:
                cross = None
            col_codes, deq = quantize_values(w, gs, grid)
            err = (w - deq) / T[j, j]
            # combined update: drift correction and error propagation are
            # both evaluated from the latent state at the start of the step
            if beta != 0.0:
                t_sub = T[j:e, j:e]
                m_sub = t_sub.T @ t_sub
                drift = W[:, j:e] - bundle.original[:, j:e]
                W[:, j:e] += (sign * beta) * (drift @ m_sub)
            W[:, j:e] -= err[:, None] * T[j, j:e][None, :]
            if cross is not None:
                W[:, j + 1 :] += cross
            errs[:, j - i] = err
            codes[:, j] = col_codes
        foem_block_boundary(bundle, factor, errs, i, e, beta, sign)
    return codes, book


def _run_oracle(
    bundle: LayerBundle,
    damped: HessianState,
    grid: QuantGrid,
    config: EngineConfig,
) -> tuple[np.ndarray, ScaleBook]:
    """Dense reference driver: explicit inverse, shrunk column by column."""
    d_out, d_in = bundle.weights.shape
    source = bundle.weights if config.scale_source == "latent" else bundle.original
    book = ScaleBook(grid, d_out, d_in)
    codes = np.zeros((d_out, d_in), dtype=np.int64)
    H = damped.matrix
    hinv = cho_solve(cho_factor(H, lower=True), np.eye(d_in))
    W = bundle.weights
    for j in range(d_in):
        book.ensure_group(j, source)
        gs = book.column_params(j)
        w = W[:, j]
        col_codes, deq = quantize_values(w, gs, grid)
        err = (w - deq) / hinv[0, 0]
        W[:, j:] -= err[:, None] * hinv[0, :][None, :]
        codes[:, j] = col_codes
        if j < d_in - 1:
            hinv = iterative_inverse_update(hinv, 0)
    return codes, book


def run_engine(
    bundle: LayerBundle,
    hessian: HessianState,
    config: EngineConfig,
    layer_name: str = "layer",
) -> tuple[QuantizedLayer, LayerReport]:
    """Quantize one layer with the configured engine.

    ``hessian`` must be the accumulated (undamped) state: damping is applied
    internally for factorization while the undamped matrix prices the proxy
    loss in the report. The bundle's latent weights are consumed in place.
    """
    config.validate()
    if not np.isfinite(bundle.weights).all():
        raise NumericalError("layer weights contain non-finite values")
    if hessian.dim != bundle.d_in:
        raise NumericalError(
            f"Hessian dim {hessian.dim} does not match layer d_in {bundle.d_in}"
        )
    if hessian.damped:
        raise NumericalError("run_engine expects the undamped Hessian state")
    grid = config.grid()

    t0 = time.perf_counter()
    if config.engine == "rtn":
        quantized = rtn_quantize(
            bundle.weights,
            grid,
            engine="rtn",
            beta=0.0,
            damp_ratio=0.0,
            block_size=0,
            first_order_sign=config.first_order_sign,
        )
    else:
        damped = hessian.dampen(config.damp_ratio)
        if config.engine == "obs_oracle":
            codes, book = _run_oracle(bundle, damped, grid, config)
        else:
            factor = inverse_cholesky(damped)
            plus_H = damped.matrix if config.engine == "foem_plus" else None
            codes, book = _run_blocked(bundle, factor, grid, config, plus_H)
        first_order = config.engine in ("foem", "foem_plus")
        quantized = QuantizedLayer(
            codes=codes.astype(np.int32),
            scales=book.scales,
            zero_points=book.zero_points.astype(np.int32),
            bits=grid.bits,
            group_size=book.group_size,
            symmetric=grid.symmetric,
            engine=config.engine,
            beta=config.beta if first_order else 0.0,
            damp_ratio=config.damp_ratio,
            block_size=config.block_size if config.engine != "obs_oracle" else 0,
            first_order_sign=config.first_order_sign,
        )
    wall = time.perf_counter() - t0
    quantized.extra["layer"] = layer_name
    quantized.extra["config"] = config.to_dict()

    deq = quantized.dequantize()
    loss = proxy_loss(deq, bundle.original, hessian)
    baseline = rtn_quantize(np.asarray(bundle.original), grid)
    loss_rtn = proxy_loss(baseline.dequantize(), bundle.original, hessian)
    if loss_rtn > 0:
        rtn_relative = loss / loss_rtn
    else:
        rtn_relative = 1.0 if loss == loss_rtn else float("inf")
    drift = np.abs(bundle.drift())
    report = LayerReport(
        layer=layer_name,
        engine=config.engine,
        bits=grid.bits,
        group_size=quantized.group_size,
        beta=quantized.beta,
        block_size=quantized.block_size,
        proxy_loss=loss,
        rtn_relative=rtn_relative,
        wall_time_s=wall,
        drift_max=float(drift.max()) if drift.size else 0.0,
        drift_mean=float(drift.mean()) if drift.size else 0.0,
    )
    return quantized, report
