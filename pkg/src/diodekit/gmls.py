"""Moving least-squares compact model: local weighted polynomial fits.

Every query solves a small weighted least-squares problem over a handful of
neighboring samples and reads the value and slope off the recovered
polynomial coefficients.  The slope comes from the coefficients directly,
not from differentiating the value estimate; on polynomial data the two
coincide, which the tests exploit.
"""

from __future__ import annotations

import numpy as np
from scipy.linalg import qr, solve_triangular

from .dataset import IVDataset

MAX_GROWTH_STEPS = 50


class GmlsError(ValueError):
    pass


class GmlsModel:
    """Point cloud plus regression parameters; fitting is lazy, per query.

    ``min_points`` is twice the local polynomial dimension, which is also
    the most points a query will ever use: the support search selects the
    ``min_points`` nearest samples once the kernel radius covers that many.
    """

    def __init__(self, cloud, samples, order, kernel_power=4, growth=1.5,
                 eps0=None):
        cloud = np.asarray(cloud, dtype=float)
        samples = np.asarray(samples, dtype=float)
        if order not in (1, 2, 3):
            raise GmlsError(f"polynomial order must be 1, 2, or 3, got {order}")
        if cloud.ndim != 1 or cloud.shape != samples.shape:
            raise GmlsError("cloud and samples must be 1-d arrays of equal size")
        if not np.all(np.diff(cloud) > 0):
            raise GmlsError("cloud must be strictly increasing")
        if kernel_power < 2:
            raise GmlsError("kernel power must be >= 2 for a C1 kernel")
        if not growth > 1:
            raise GmlsError("growth factor must exceed 1")
        self.min_points = 2 * (order + 1)
        if cloud.size < self.min_points:
            raise GmlsError(f"order {order} needs at least {self.min_points} "
                            f"samples, got {cloud.size}")
        self.cloud = cloud
        self.samples = samples
        self.order = order
        self.kernel_power = int(kernel_power)
        self.growth = float(growth)
        self.eps0 = float(eps0) if eps0 is not None else fill_distance(cloud)
        if not self.eps0 > 0:
            raise GmlsError("initial support radius must be positive")
        self.cloud.flags.writeable = False
        self.samples.flags.writeable = False

    def evaluate(self, v):
        return eval_gmls(self, v)

    def to_text(self) -> str:
        lines = ["diodekit-gmls 1",
                 f"order {self.order} kernel_power {self.kernel_power} "
                 f"growth {self.growth!r} eps0 {self.eps0!r}",
                 f"data {self.cloud.size}"]
        lines += [f"{float(v)!r} {float(f)!r}"
                  for v, f in zip(self.cloud, self.samples)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "GmlsModel":
        lines = text.strip().splitlines()
        if not lines or lines[0].split() != ["diodekit-gmls", "1"]:
            raise GmlsError("not a gmls model file (or wrong version)")
        kv = lines[1].split()
        if kv[0::2] != ["order", "kernel_power", "growth", "eps0"]:
            raise GmlsError("malformed gmls parameter line")
        order, kp = int(kv[1]), int(kv[3])
        growth, eps0 = float(kv[5]), float(kv[7])
        n = int(lines[2].split()[1])
        rows = np.array([[float(t) for t in s.split()] for s in lines[3:3 + n]])
        return cls(rows[:, 0], rows[:, 1], order,
                   kernel_power=kp, growth=growth, eps0=eps0)


def fill_distance(cloud: np.ndarray) -> float:
    """Largest gap between consecutive points."""
    return float(np.max(np.diff(cloud)))


def kernel(r, eps, p):
    """Compactly supported weight (1 - r/eps)^p on r < eps, else 0."""
    r = np.asarray(r, dtype=float)
    w = np.where(r < eps, (1.0 - r / eps) ** p, 0.0)
    return w


def fit_gmls(ds: IVDataset, order: int, kernel_power: int = 4,
             growth: float = 1.5, eps0=None) -> GmlsModel:
    """Wrap a dataset as a lazy moving least-squares model."""
    return GmlsModel(ds.v, ds.i, order, kernel_power=kernel_power,
                     growth=growth, eps0=eps0)


def _support_candidates(model: GmlsModel, v: float):
    """Yield (eps, indices) for each growth step with enough points.

    The radius grows geometrically from eps0 until the open support holds
    at least ``min_points`` samples; of those, the ``min_points`` nearest
    are selected (ties broken toward lower index), which keeps the per-query
    point count at exactly twice the polynomial dimension on generic clouds.
    """
    cloud = model.cloud
    dist = np.abs(cloud - v)
    for step in range(MAX_GROWTH_STEPS):
        eps = model.eps0 * model.growth ** step
        inside = np.nonzero(dist < eps)[0]
        if inside.size < model.min_points:
            continue
        if inside.size > model.min_points:
            pick = np.lexsort((inside, dist[inside]))[:model.min_points]
            inside = np.sort(inside[pick])
        yield eps, inside


def adapt_support(model: GmlsModel, v: float):
    """Smallest radius in the growth sequence with enough support points.

    Returns ``(eps, indices)``; raises after ``MAX_GROWTH_STEPS`` doublings.
    """
    for eps, idx in _support_candidates(model, v):
        return eps, idx
    raise GmlsError(f"insufficient local data near v={v:g} after "
                    f"{MAX_GROWTH_STEPS} growth steps")


def _solve_local(model: GmlsModel, v: float):
    """Coefficients of the local polynomial in the centered variable (x-v)/eps."""
    dim = model.order + 1
    for eps, idx in _support_candidates(model, v):
        x = model.cloud[idx]
        f = model.samples[idx]
        u = (x - v) / eps
        w = kernel(np.abs(x - v), eps, model.kernel_power)
        sw = np.sqrt(w)
        basis = np.vander(u, dim, increasing=True)
        a = basis * sw[:, None]
        # column-pivoted QR exposes rank deficiency of the weighted basis
        q_f, r_f, piv = qr(a, mode="economic", pivoting=True)
        if abs(r_f[-1, -1]) <= max(a.shape) * np.finfo(float).eps * abs(r_f[0, 0]):
            continue  # degenerate support, grow further
        c_p = solve_triangular(r_f, q_f.T @ (f * sw))
        c = np.empty_like(c_p)
        c[piv] = c_p
        return c, eps
    raise GmlsError(f"insufficient local data near v={v:g} after "
                    f"{MAX_GROWTH_STEPS} growth steps")


def _eval_in_range(model: GmlsModel, v: float):
    c, eps = _solve_local(model, v)
    return c[0], c[1] / eps


def eval_gmls(model: GmlsModel, v):
    """Value and slope at voltage(s) ``v``.

    Inside the cloud's span this is the local weighted fit; outside, the
    model continues linearly from the nearer endpoint using the endpoint's
    own slope estimate.
    """
    vq = np.asarray(v, dtype=float)
    scalar = vq.ndim == 0
    vq = np.atleast_1d(vq)
    lo, hi = model.cloud[0], model.cloud[-1]
    val = np.empty_like(vq)
    der = np.empty_like(vq)
    for k, point in enumerate(vq):
        if point < lo or point > hi:
            edge = lo if point < lo else hi
            f_e, d_e = _eval_in_range(model, edge)
            val[k] = f_e + (point - edge) * d_e
            der[k] = d_e
        else:
            val[k], der[k] = _eval_in_range(model, point)
    if scalar:
        return float(val[0]), float(der[0])
    return val, der
