"""Table-based compact model: C2 cubic spline with linear boundary pieces.

The table is the classic interpolating cubic spline, except that the two
half-infinite boundary intervals carry straight lines instead of cubics.
Joining those lines with C2 continuity forces the spline's second
derivative to vanish at both end knots, so the interior is the natural
spline and extrapolation is linear by construction, which keeps Newton
iterations well-behaved far outside the measured range.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import solve_banded

from .dataset import IVDataset


class SplineError(ValueError):
    pass


class SplineModel:
    """Knot vector plus one cubic per interval of the induced partition.

    Coefficients are stored in shifted-local form: piece ``p`` evaluates as
    ``c3*t**3 + c2*t**2 + c1*t + c0`` with ``t = v - ref(p)``, where the
    reference point is the piece's left knot (the first knot for the left
    boundary piece).  The global ``a x**3 + b x**2 + c x + d`` form is
    recoverable via :func:`global_coefficients`; keeping local shifts avoids
    catastrophic cancellation at voltages around -125 V.
    """

    def __init__(self, knots, coeffs):
        knots = np.asarray(knots, dtype=float)
        coeffs = np.asarray(coeffs, dtype=float)
        if knots.ndim != 1 or knots.size < 4:
            raise SplineError("need at least 4 knots")
        if not np.all(np.diff(knots) > 0):
            raise SplineError("knots must be strictly increasing")
        if coeffs.shape != (knots.size + 1, 4):
            raise SplineError(f"coeffs must be ({knots.size + 1}, 4)")
        if not np.all(np.isfinite(coeffs)):
            raise SplineError("non-finite spline coefficients")
        self.knots = knots
        self.coeffs = coeffs  # columns c3, c2, c1, c0
        self.knots.flags.writeable = False
        self.coeffs.flags.writeable = False

    @property
    def m(self) -> int:
        return self.knots.size

    def piece_refs(self) -> np.ndarray:
        """Shift point of each of the m+1 pieces."""
        idx = np.clip(np.arange(self.m + 1) - 1, 0, self.m - 1)
        return self.knots[idx]

    def evaluate(self, v):
        return eval_spline(self, v)

    def to_text(self) -> str:
        lines = ["diodekit-spline 1", f"knots {self.m}"]
        lines += [repr(float(k)) for k in self.knots]
        lines.append(f"coeffs {self.m + 1}")
        lines += [" ".join(repr(float(c)) for c in row) for row in self.coeffs]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "SplineModel":
        lines = text.strip().splitlines()
        if not lines or lines[0].split() != ["diodekit-spline", "1"]:
            raise SplineError("not a spline model file (or wrong version)")
        if not lines[1].startswith("knots "):
            raise SplineError("missing knots block")
        m = int(lines[1].split()[1])
        knots = np.array([float(s) for s in lines[2:2 + m]])
        hdr = lines[2 + m]
        if not hdr.startswith("coeffs "):
            raise SplineError("missing coeffs block")
        rows = [[float(t) for t in s.split()] for s in lines[3 + m:3 + m + m + 1]]
        return cls(knots, np.array(rows))


def interval_index(knots: np.ndarray, v) -> np.ndarray:
    """Piece index for each query: 0 left of all knots, m at/right of the last.

    Binary search over the knot vector; piece p covers [knots[p-1], knots[p])
    for interior p, with the last interval closed on the left and unbounded.
    """
    return np.searchsorted(knots, v, side="right")


def fit_spline(ds: IVDataset) -> SplineModel:
    """Build the unique C2 interpolant with linear boundary pieces.

    The full constraint set (interpolation at both ends of every interior
    piece, C1/C2 junctions at every knot, and degree <= 1 on the two
    boundary pieces) reduces to a tridiagonal system for the knot second
    derivatives with zero end values, solved here in O(m).
    """
    x = ds.v
    y = ds.i
    m = x.size
    h = np.diff(x)
    dydx = np.diff(y) / h

    # second derivatives M at the knots; M[0] = M[m-1] = 0
    M = np.zeros(m)
    if m > 2:
        rhs = 6.0 * np.diff(dydx)
        ab = np.zeros((3, m - 2))
        ab[0, 1:] = h[1:-1]                  # superdiagonal
        ab[1, :] = 2.0 * (h[:-1] + h[1:])    # diagonal
        ab[2, :-1] = h[1:-1]                 # subdiagonal
        try:
            M[1:-1] = solve_banded((1, 1), ab, rhs)
        except np.linalg.LinAlgError as exc:  # pragma: no cover
            raise SplineError(f"singular spline system: {exc}") from exc

    # interior pieces, local in t = v - x[j]
    c3 = (M[1:] - M[:-1]) / (6.0 * h)
    c2 = M[:-1] / 2.0
    c1 = dydx - h * (2.0 * M[:-1] + M[1:]) / 6.0
    c0 = y[:-1]

    coeffs = np.zeros((m + 1, 4))
    coeffs[1:m, 0] = c3
    coeffs[1:m, 1] = c2
    coeffs[1:m, 2] = c1
    coeffs[1:m, 3] = c0
    # left boundary line through (x0, y0) with the interior slope there
    coeffs[0] = (0.0, 0.0, c1[0], y[0])
    # right boundary line through (x_{m-1}, y_{m-1}); slope of the last
    # interior piece evaluated at its right end
    t = h[-1]
    slope_end = c1[-1] + 2.0 * c2[-1] * t + 3.0 * c3[-1] * t * t
    coeffs[m] = (0.0, 0.0, slope_end, y[-1])
    return SplineModel(x, coeffs)


def eval_spline(model: SplineModel, v):
    """Value and first derivative at voltage(s) ``v``."""
    v = np.asarray(v, dtype=float)
    scalar = v.ndim == 0
    vq = np.atleast_1d(v)
    p = interval_index(model.knots, vq)
    ref = model.knots[np.clip(p - 1, 0, model.m - 1)]
    t = vq - ref
    c3, c2, c1, c0 = model.coeffs[p].T
    val = ((c3 * t + c2) * t + c1) * t + c0
    der = (3.0 * c3 * t + 2.0 * c2) * t + c1
    if scalar:
        return float(val[0]), float(der[0])
    return val, der


def global_coefficients(model: SplineModel) -> np.ndarray:
    """Expand the local pieces into global (a, b, c, d) rows.

    Only used by diagnostics/tests; the expansion is ill-conditioned for
    large shifts, which is exactly why the model stores local form.
    """
    r = model.piece_refs()
    c3, c2, c1, c0 = model.coeffs.T
    a = c3
    b = c2 - 3.0 * c3 * r
    c = c1 - 2.0 * c2 * r + 3.0 * c3 * r * r
    d = c0 - c1 * r + c2 * r * r - c3 * r ** 3
    return np.column_stack([a, b, c, d])


def piece_derivatives(model: SplineModel, p: int, v: float):
    """(value, first, second derivative) of piece ``p`` at ``v``."""
    ref = model.knots[min(max(p - 1, 0), model.m - 1)]
    t = v - ref
    c3, c2, c1, c0 = model.coeffs[p]
    return (((c3 * t + c2) * t + c1) * t + c0,
            (3.0 * c3 * t + 2.0 * c2) * t + c1,
            6.0 * c3 * t + 2.0 * c2)


def constraint_residuals(model: SplineModel, ds: IVDataset) -> dict:
    """Residuals of the full 4(m+1)-constraint system, for verification.

    Each junction/interpolation residual is divided by the larger of the
    local magnitude and the global scale of that derivative order, so a
    roundoff-size mismatch where both sides vanish is not flagged.
    """
    x = ds.v
    y = ds.i
    m = x.size

    both = np.array([[piece_derivatives(model, k, x[k]),
                      piece_derivatives(model, k + 1, x[k])]
                     for k in range(m)])   # (m, 2, 3)
    left, right = both[:, 0, :], both[:, 1, :]
    scales = np.maximum(np.abs(left) + np.abs(right),
                        1e-6 * np.max(np.abs(left), axis=0) + 1e-300)
    junction = np.abs(left - right) / scales
    yscale = np.maximum(np.abs(y), 1e-6 * np.max(np.abs(y)) + 1e-300)
    interp = max(np.max(np.abs(left[:, 0] - y) / yscale),
                 np.max(np.abs(right[:, 0] - y) / yscale))
    g = global_coefficients(model)
    boundary = max(abs(g[0, 0]), abs(g[0, 1]), abs(g[m, 0]), abs(g[m, 1]))
    return {"interpolation": float(interp),
            "c0": float(junction[:, 0].max()),
            "c1": float(junction[:, 1].max()),
            "c2": float(junction[:, 2].max()),
            "boundary": float(boundary)}
