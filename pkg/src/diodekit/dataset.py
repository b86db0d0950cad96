"""I-V datasets: loading, synthesis, and the voltage/current scalings.

The current scaling maps the many decades of a diode's I-V curve onto a
compact range (roughly [-8, 8] with the default constants) so that a plain
mean-square loss can resolve reverse leakage and forward conduction at the
same time.  Both the scaling and its exact inverse are implemented here,
together with their derivatives, since downstream models differentiate
through them.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

LN10 = math.log(10.0)

#: Recognised training/transform spaces.  "raw" leaves data untouched,
#: "V" scales voltage only, "I" scales current only, "VI" scales both.
TRANSFORM_MODES = ("raw", "V", "I", "VI")


class DatasetError(ValueError):
    """Malformed, non-finite, or undersized I-V data."""


@dataclass(frozen=True)
class TransformParams:
    """Constants of the voltage scaling T_V and current scaling T_I.

    T_V divides positive voltages by ``v_plus`` and negative ones by
    ``v_minus``.  T_I is logarithmic outside the band
    (-10**p_minus_min, 10**p_plus_min) and linear inside it, with the
    constants chosen so the three branches join continuously.
    """

    v_plus: float = 0.1
    v_minus: float = 15.625
    p_plus_min: float = -10.0
    p_plus_max: float = -1.0
    p_minus_min: float = -10.0
    p_minus_max: float = -5.0

    def __post_init__(self):
        if not (self.v_plus > 0 and self.v_minus > 0):
            raise DatasetError("v_plus and v_minus must be positive")
        if not (self.p_plus_max > self.p_plus_min
                and self.p_minus_max > self.p_minus_min):
            raise DatasetError("p_max must exceed p_min on both branches")
        # continuity of T_I where the linear band meets the log branches
        for edge in (self.cap_plus_min, -self.cap_minus_min):
            gap = abs(t_i(edge, self) - t_i(edge * (1 - 1e-13), self))
            if gap > 1e-9:
                raise DatasetError("current scaling is discontinuous at "
                                   f"i={edge:g} (gap {gap:g})")

    @property
    def cap_plus_min(self) -> float:
        return 10.0 ** self.p_plus_min

    @property
    def cap_minus_min(self) -> float:
        return 10.0 ** self.p_minus_min

    @property
    def a_plus(self) -> float:
        return (self.p_plus_max - self.p_plus_min) / 7.0

    @property
    def a_minus(self) -> float:
        return (self.p_minus_max - self.p_minus_min) / 7.0

    @property
    def b_plus(self) -> float:
        return self.p_plus_min - self.a_plus

    @property
    def b_minus(self) -> float:
        return self.p_minus_min - self.a_minus

    @property
    def slope_linear(self) -> float:
        return 2.0 / (self.cap_plus_min + self.cap_minus_min)


@dataclass(frozen=True)
class Breakdown:
    """Soft exponential knee added to the synthetic curve at deep reverse bias."""

    v_bd: float = -79.0
    i_bd_scale: float = 1e-7
    v_bd_slope: float = 10.0

    def __post_init__(self):
        if not self.v_bd < 0:
            raise DatasetError("breakdown voltage must be negative")
        if not (self.i_bd_scale > 0 and self.v_bd_slope > 0):
            raise DatasetError("breakdown scale and slope must be positive")


@dataclass(frozen=True)
class ShockleyParams:
    """Ideal-diode parameters, optionally with a reverse-breakdown knee."""

    i_s: float = 1e-9
    v_t: float = 0.02585
    q: float = 1.8
    breakdown: Optional[Breakdown] = Breakdown()

    def __post_init__(self):
        if not (self.i_s > 0 and self.v_t > 0):
            raise DatasetError("i_s and v_t must be positive")
        if not self.q >= 1:
            raise DatasetError("quality factor must be >= 1")


class IVSample(tuple):
    """A single (voltage, current) row."""

    __slots__ = ()

    def __new__(cls, v, i):
        if not (math.isfinite(v) and math.isfinite(i)):
            raise DatasetError(f"non-finite sample ({v}, {i})")
        return super().__new__(cls, (float(v), float(i)))

    @property
    def v(self):
        return self[0]

    @property
    def i(self):
        return self[1]


class IVDataset:
    """Sorted table of (v, i) samples with strictly increasing voltages."""

    def __init__(self, v, i):
        v = np.array(v, dtype=float)
        i = np.array(i, dtype=float)
        if v.ndim != 1 or v.shape != i.shape:
            raise DatasetError("v and i must be 1-d arrays of equal length")
        if v.size < 4:
            raise DatasetError(f"dataset too small: {v.size} rows, need >= 4")
        if not (np.all(np.isfinite(v)) and np.all(np.isfinite(i))):
            raise DatasetError("dataset contains non-finite values")
        if not np.all(np.diff(v) > 0):
            raise DatasetError("voltages must be strictly increasing "
                               "(canonicalize first)")
        self.v = v
        self.i = i
        self.v.flags.writeable = False
        self.i.flags.writeable = False

    @property
    def m(self) -> int:
        return self.v.size

    def __len__(self):
        return self.m

    def __getitem__(self, k) -> IVSample:
        return IVSample(self.v[k], self.i[k])

    def __eq__(self, other):
        return (isinstance(other, IVDataset)
                and np.array_equal(self.v, other.v)
                and np.array_equal(self.i, other.i))

    def __repr__(self):
        return (f"IVDataset(m={self.m}, v in [{self.v[0]:g}, {self.v[-1]:g}], "
                f"i in [{self.i.min():g}, {self.i.max():g}])")


def canonicalize(v, i):
    """Sort by voltage and collapse duplicate voltages by averaging currents.

    Returns ``(dataset, n_collapsed)`` where ``n_collapsed`` counts the rows
    removed by duplicate merging; callers are expected to warn when nonzero.
    """
    v = np.asarray(v, dtype=float)
    i = np.asarray(i, dtype=float)
    if not (np.all(np.isfinite(v)) and np.all(np.isfinite(i))):
        raise DatasetError("non-finite values in input data")
    order = np.argsort(v, kind="stable")
    v = v[order]
    i = i[order]
    uniq, start, counts = np.unique(v, return_index=True, return_counts=True)
    if uniq.size != v.size:
        sums = np.add.reduceat(i, start)
        i = sums / counts
        v = uniq
    n_collapsed = int(counts.sum() - uniq.size)
    return IVDataset(v, i), n_collapsed


def load_csv(path):
    """Read a two-column ``v_volts,i_amps`` CSV into a canonical dataset.

    Returns ``(dataset, n_collapsed)``.  A header row is required; rows must
    contain exactly two numeric fields, scientific notation accepted.
    """
    vs, cs = [], []
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline()
        if not header:
            raise DatasetError(f"{path}: empty file")
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 2:
                raise DatasetError(f"{path}:{lineno}: expected 2 fields, "
                                   f"got {len(parts)}")
            try:
                vs.append(float(parts[0]))
                cs.append(float(parts[1]))
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
    if len(vs) < 4:
        raise DatasetError(f"{path}: dataset too small ({len(vs)} rows)")
    return canonicalize(vs, cs)


def save_csv(ds: IVDataset, path):
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("v_volts,i_amps\n")
        for v, i in zip(ds.v, ds.i):
            fh.write(f"{v!r},{i!r}\n")


def shockley_eval(params: ShockleyParams, v):
    """Current and dI/dV of the analytic curve at voltage(s) ``v``."""
    v = np.asarray(v, dtype=float)
    a = params.q * params.v_t
    # clip the exponent so wild Newton iterates do not overflow to inf
    e = np.exp(np.minimum(v / a, 700.0))
    i = params.i_s * (e - 1.0)
    g = params.i_s / a * e
    bd = params.breakdown
    if bd is not None:
        eb = np.exp(np.minimum((bd.v_bd - v) / bd.v_bd_slope, 700.0))
        i = i - bd.i_bd_scale * eb
        g = g + bd.i_bd_scale / bd.v_bd_slope * eb
    return i, g


def generate_shockley(params: ShockleyParams, v_min, v_max, n) -> IVDataset:
    """Sample the analytic curve at ``n`` uniformly spaced voltages."""
    if not v_min < v_max:
        raise DatasetError(f"v_min ({v_min}) must be below v_max ({v_max})")
    if n < 4:
        raise DatasetError(f"need at least 4 samples, got {n}")
    v = np.linspace(v_min, v_max, int(n))
    i, _ = shockley_eval(params, v)
    return IVDataset(v, i)


def sample_at(params: ShockleyParams, v) -> IVDataset:
    """Sample the analytic curve on an explicit voltage grid."""
    v = np.asarray(v, dtype=float)
    i, _ = shockley_eval(params, v)
    return IVDataset(v, i)


def benchmark_grid(m: int = 9682) -> np.ndarray:
    """Voltage grid for the synthetic benchmark dataset.

    Graded in three segments: coarse across the reverse/breakdown span,
    finer through the zero crossing, and dense over the forward knee where
    the curve varies on the 25 mV scale.  A uniform grid of the same size
    badly undersamples the knee (only ~60 of 9682 points would land at
    positive voltage), which caps the accuracy any regression can reach
    there.
    """
    n_rev = int(round(m * 0.434))
    n_mid = int(round(m * 0.248))
    n_fwd = m - n_rev - n_mid + 2   # two shared segment endpoints
    grid = np.unique(np.concatenate([
        np.linspace(-125.0, -2.0, n_rev),
        np.linspace(-2.0, 0.4, n_mid),
        np.linspace(0.4, 0.8, n_fwd),
    ]))
    assert grid.size == m
    return grid


def benchmark_dataset(params: Optional[ShockleyParams] = None,
                      m: int = 9682) -> IVDataset:
    """The standard synthetic benchmark: default diode on the graded grid."""
    return sample_at(params or ShockleyParams(), benchmark_grid(m))


def _split_pos(v):
    v = np.asarray(v, dtype=float)
    return v, v >= 0


def t_v(v, tp: TransformParams):
    """Piecewise-linear voltage scaling."""
    v, pos = _split_pos(v)
    out = np.where(pos, v / tp.v_plus, v / tp.v_minus)
    return float(out) if out.ndim == 0 else out


def t_v_deriv(v, tp: TransformParams):
    """Slope of t_v; the v=0 kink takes the forward-branch slope."""
    v, pos = _split_pos(v)
    out = np.where(pos, 1.0 / tp.v_plus, 1.0 / tp.v_minus)
    return float(out) if out.ndim == 0 else out


def t_v_inv(u, tp: TransformParams):
    u, pos = _split_pos(u)
    out = np.where(pos, u * tp.v_plus, u * tp.v_minus)
    return float(out) if out.ndim == 0 else out


def _branches(i, tp):
    i = np.asarray(i, dtype=float)
    neg = i <= -tp.cap_minus_min
    pos = i >= tp.cap_plus_min
    return i, neg, pos, ~(neg | pos)


def t_i(i, tp: TransformParams):
    """Current scaling: log above/below the linear band, linear within."""
    i, neg, pos, mid = _branches(i, tp)
    out = np.empty_like(i)
    out[neg] = -(np.log10(-i[neg]) - tp.b_minus) / tp.a_minus
    out[pos] = (np.log10(i[pos]) - tp.b_plus) / tp.a_plus
    out[mid] = -1.0 + tp.slope_linear * (i[mid] + tp.cap_minus_min)
    return float(out) if out.ndim == 0 else out


def t_i_deriv(i, tp: TransformParams):
    i, neg, pos, mid = _branches(i, tp)
    out = np.empty_like(i)
    out[neg] = -1.0 / (tp.a_minus * i[neg] * LN10)
    out[pos] = 1.0 / (tp.a_plus * i[pos] * LN10)
    out[mid] = tp.slope_linear
    return float(out) if out.ndim == 0 else out


def t_i_inv(y, tp: TransformParams):
    """Exact piecewise inverse of t_i."""
    y = np.asarray(y, dtype=float)
    lo = y <= -1.0
    hi = y >= 1.0
    mid = ~(lo | hi)
    out = np.empty_like(y)
    out[lo] = -(10.0 ** (tp.b_minus - tp.a_minus * y[lo]))
    out[hi] = 10.0 ** (tp.a_plus * y[hi] + tp.b_plus)
    out[mid] = (y[mid] + 1.0) / tp.slope_linear - tp.cap_minus_min
    return float(out) if out.ndim == 0 else out


def t_i_inv_deriv(y, tp: TransformParams):
    y = np.asarray(y, dtype=float)
    lo = y <= -1.0
    hi = y >= 1.0
    mid = ~(lo | hi)
    out = np.empty_like(y)
    out[lo] = LN10 * tp.a_minus * 10.0 ** (tp.b_minus - tp.a_minus * y[lo])
    out[hi] = LN10 * tp.a_plus * 10.0 ** (tp.a_plus * y[hi] + tp.b_plus)
    out[mid] = 1.0 / tp.slope_linear
    return float(out) if out.ndim == 0 else out


def apply_transform(ds: IVDataset, mode: str, tp: TransformParams) -> IVDataset:
    """Return the dataset mapped into the given training space."""
    if mode not in TRANSFORM_MODES:
        raise DatasetError(f"unknown transform mode {mode!r}; "
                           f"expected one of {TRANSFORM_MODES}")
    if mode == "raw":
        return IVDataset(ds.v.copy(), ds.i.copy())
    v = t_v(ds.v, tp) if "V" in mode else ds.v.copy()
    i = t_i(ds.i, tp) if "I" in mode else ds.i.copy()
    return IVDataset(v, i)
