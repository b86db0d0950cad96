"""Feed-forward compact model trained with projected Adam.

Networks are scalar-in/scalar-out with one or two hidden layers.  With the
non-negative weight constraint and a monotone activation the network is
non-decreasing, and since the voltage/current scalings are strictly
increasing the resulting compact model is monotone in every training space.

Training runs in the chosen training space ("raw", "V", "I", "VI"); the
model composes the inverse current scaling back onto network output at
evaluation time and differentiates through the whole chain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np

from . import dataset as dset
from .dataset import IVDataset, TransformParams

ACTIVATION_LETTERS = {"elu": "E", "sigmoid": "S", "tanh": "T"}
SPACE_SUFFIXES = {"raw": "", "V": "-V", "I": "-I", "VI": "-VI"}
NON_NEGATIVE = "non-negative"
UNCONSTRAINED = "none"

#: Cap on initial hidden-unit slopes; the data-driven ladder below would
#: otherwise produce near-singular units on very dense sample clusters.
INIT_SLOPE_CAP = 100.0


class MlpError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """Loss became non-finite; carries the epoch index."""

    def __init__(self, epoch, message=None):
        self.epoch = epoch
        super().__init__(message or f"training diverged at epoch {epoch}")


def _act_tanh(z):
    t = np.tanh(z)
    return t, 1.0 - t * t


def _act_sigmoid(z):
    s = np.where(z >= 0, 1.0 / (1.0 + np.exp(-np.abs(z))),
                 np.exp(-np.abs(z)) / (1.0 + np.exp(-np.abs(z))))
    return s, s * (1.0 - s)


def _act_elu(z):
    e = np.exp(np.minimum(z, 0.0))
    val = np.where(z > 0, z, e - 1.0)
    # slope at 0 taken from the positive side
    der = np.where(z >= 0, 1.0, e)
    return val, der


ACTIVATIONS = {"tanh": _act_tanh, "sigmoid": _act_sigmoid, "elu": _act_elu}


@dataclass(frozen=True)
class MlpArchitecture:
    hidden_layers: int = 1
    width: int = 10
    activation: str = "tanh"
    constraint: str = NON_NEGATIVE
    training_space: str = "VI"

    def __post_init__(self):
        if self.hidden_layers not in (1, 2):
            raise MlpError("hidden_layers must be 1 or 2")
        if self.width < 1:
            raise MlpError("width must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise MlpError(f"unknown activation {self.activation!r}")
        if self.constraint not in (NON_NEGATIVE, UNCONSTRAINED):
            raise MlpError(f"unknown constraint {self.constraint!r}")
        if self.training_space not in dset.TRANSFORM_MODES:
            raise MlpError(f"unknown training space {self.training_space!r}")

    @property
    def dims(self):
        return [1] + [self.width] * self.hidden_layers + [1]

    @property
    def name(self) -> str:
        tag = (f"M{self.hidden_layers}-{self.width}-"
               f"{ACTIVATION_LETTERS[self.activation]}"
               f"{SPACE_SUFFIXES[self.training_space]}")
        if self.constraint == UNCONSTRAINED:
            tag += "-neg"
        return tag

    @classmethod
    def from_name(cls, name: str) -> "MlpArchitecture":
        """Parse tags like ``M1-10-T-VI`` or ``M2-50-S-neg``."""
        parts = name.strip().split("-")
        try:
            if parts[0][0] != "M":
                raise ValueError
            hidden = int(parts[0][1:])
            width = int(parts[1])
            letters = {v: k for k, v in ACTIVATION_LETTERS.items()}
            activation = letters[parts[2]]
            rest = parts[3:]
        except (ValueError, KeyError, IndexError):
            raise MlpError(f"cannot parse architecture name {name!r}") from None
        constraint = NON_NEGATIVE
        if rest and rest[-1] == "neg":
            constraint = UNCONSTRAINED
            rest = rest[:-1]
        spaces = {"": "raw", "V": "V", "I": "I", "VI": "VI"}
        space = "-".join(rest)
        if space not in spaces:
            raise MlpError(f"cannot parse architecture name {name!r}")
        return cls(hidden, width, activation, constraint, spaces[space])


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 2000
    learning_rate: float = 1e-3
    batch_size: int = 128
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise MlpError("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise MlpError("learning_rate must be positive")
        if self.batch_size < 1:
            raise MlpError("batch_size must be >= 1")


class MlpModel:
    """Trained network: layer parameters plus the transform context."""

    def __init__(self, arch: MlpArchitecture, weights, biases,
                 tp: Optional[TransformParams], training_log=None, seed=0):
        dims = arch.dims
        if len(weights) != len(dims) - 1 or len(biases) != len(dims) - 1:
            raise MlpError("wrong number of layers")
        for k, (a, b) in enumerate(zip(weights, biases)):
            if a.shape != (dims[k + 1], dims[k]) or b.shape != (dims[k + 1],):
                raise MlpError(f"layer {k}: bad shapes {a.shape}, {b.shape}")
        if arch.constraint == NON_NEGATIVE:
            low = min(a.min() for a in weights)
            if low < 0:
                raise MlpError(f"constraint violated: weight {low}")
        if arch.training_space != "raw" and tp is None:
            raise MlpError("transformed training space requires TransformParams")
        self.arch = arch
        self.weights = [np.asarray(a, dtype=float) for a in weights]
        self.biases = [np.asarray(b, dtype=float) for b in biases]
        self.tp = tp
        self.training_log = (np.asarray(training_log, dtype=float)
                             if training_log is not None else np.empty(0))
        self.seed = seed

    @property
    def parameter_count(self) -> int:
        return sum(a.size + b.size for a, b in zip(self.weights, self.biases))

    def evaluate(self, v):
        return eval_mlp(self, v)

    def to_text(self) -> str:
        a = self.arch
        lines = ["diodekit-mlp 1",
                 f"arch {a.hidden_layers} {a.width} {a.activation} "
                 f"{a.constraint} {a.training_space} seed {self.seed}"]
        if self.tp is not None:
            t = self.tp
            lines.append(f"transform {t.v_plus!r} {t.v_minus!r} "
                         f"{t.p_plus_min!r} {t.p_plus_max!r} "
                         f"{t.p_minus_min!r} {t.p_minus_max!r}")
        else:
            lines.append("transform none")
        for a_mat, b_vec in zip(self.weights, self.biases):
            lines.append(f"layer {a_mat.shape[0]} {a_mat.shape[1]}")
            lines += [" ".join(repr(float(x)) for x in row) for row in a_mat]
            lines.append(" ".join(repr(float(x)) for x in b_vec))
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MlpModel":
        lines = text.strip().splitlines()
        if not lines or lines[0].split() != ["diodekit-mlp", "1"]:
            raise MlpError("not an mlp model file (or wrong version)")
        hdr = lines[1].split()
        if hdr[0] != "arch" or hdr[6] != "seed":
            raise MlpError("malformed arch line")
        arch = MlpArchitecture(int(hdr[1]), int(hdr[2]), hdr[3], hdr[4], hdr[5])
        seed = int(hdr[7])
        tline = lines[2].split()
        if tline[0] != "transform":
            raise MlpError("malformed transform line")
        tp = (None if tline[1] == "none" else
              TransformParams(*[float(s) for s in tline[1:7]]))
        weights, biases = [], []
        pos = 3
        while pos < len(lines):
            tag, rows, cols = lines[pos].split()
            if tag != "layer":
                raise MlpError("malformed layer block")
            rows, cols = int(rows), int(cols)
            block = lines[pos + 1:pos + 1 + rows]
            weights.append(np.array([[float(t) for t in s.split()]
                                     for s in block]))
            biases.append(np.array([float(t)
                                    for t in lines[pos + 1 + rows].split()]))
            pos += rows + 2
        return cls(arch, weights, biases, tp, seed=seed)


def forward_raw(model: MlpModel, x):
    """Network output and its input derivative, in training space."""
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    col = np.atleast_1d(x)[:, None]
    act = ACTIVATIONS[model.arch.activation]
    h = col
    grad = np.ones_like(col)
    last = len(model.weights) - 1
    for k, (a, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ a.T + b
        if k < last:
            h, dh = act(z)
            grad = (grad @ a.T) * dh
        else:
            h = z
            grad = grad @ a.T
    y = h[:, 0]
    dy = grad[:, 0]
    if scalar:
        return float(y[0]), float(dy[0])
    return y, dy


def eval_mlp(model: MlpModel, v):
    """Compact-model current and dI/dV at voltage(s) ``v``.

    Applies the voltage scaling on the way in and the inverse current
    scaling on the way out, as dictated by the training space, with the
    derivative chained through every stage.
    """
    v = np.asarray(v, dtype=float)
    scalar = v.ndim == 0
    vq = np.atleast_1d(v)
    space = model.arch.training_space
    tp = model.tp
    if "V" in space:
        x = dset.t_v(vq, tp)
        dx = dset.t_v_deriv(vq, tp)
    else:
        x, dx = vq, np.ones_like(vq)
    y, dy = forward_raw(model, x)
    if "I" in space:
        i = dset.t_i_inv(y, tp)
        di = dset.t_i_inv_deriv(y, tp) * dy * dx
    else:
        i, di = y, dy * dx
    if scalar:
        return float(i[0]), float(di[0])
    return i, di


def _init_params(arch: MlpArchitecture, x_train: np.ndarray,
                 rng: np.random.Generator):
    """Initial parameters.

    The first hidden layer is a resolution ladder: unit centers sit at the
    quantiles of the training inputs and slopes follow the inverse local
    quantile gap, so densely sampled features get sharp units.  Remaining
    layers use uniform Glorot scaling.  Under the non-negative constraint
    all weights start as magnitudes (projecting a symmetric init onto the
    constraint would zero half the units before the first step).
    """
    dims = arch.dims
    constrained = arch.constraint == NON_NEGATIVE
    weights, biases = [], []

    n1 = dims[1]
    qs = (np.arange(n1) + 0.5) / n1
    centers = np.quantile(x_train, qs)
    gaps = (np.quantile(x_train, np.minimum(qs + 1.0 / n1, 1.0))
            - np.quantile(x_train, np.maximum(qs - 1.0 / n1, 0.0)))
    slopes = np.minimum(2.0 / np.maximum(gaps, 1e-12), INIT_SLOPE_CAP)
    slopes = slopes * rng.uniform(0.8, 1.25, n1)
    weights.append(slopes[:, None])
    biases.append(-slopes * centers)

    for k in range(1, len(dims) - 1):
        lim = math.sqrt(6.0 / (dims[k] + dims[k + 1]))
        a = rng.uniform(-lim, lim, (dims[k + 1], dims[k]))
        if constrained:
            a = np.abs(a)
        weights.append(a)
        biases.append(np.zeros(dims[k + 1]))
    return weights, biases


def train(ds: IVDataset, arch: MlpArchitecture, cfg: TrainConfig,
          tp: TransformParams) -> MlpModel:
    """Fit the network by mini-batch Adam with post-step weight projection.

    Deterministic for a given (data, arch, cfg) triple: one seeded
    generator drives initialization and every epoch's shuffle.
    """
    transformed = dset.apply_transform(ds, arch.training_space, tp)
    x = transformed.v
    y = transformed.i
    rng = np.random.default_rng(cfg.seed)
    weights, biases = _init_params(arch, x, rng)
    act = ACTIVATIONS[arch.activation]
    constrained = arch.constraint == NON_NEGATIVE
    params = weights + biases
    n_w = len(weights)

    beta1, beta2, eps_adam = 0.9, 0.999, 1e-8
    mom = [np.zeros_like(p) for p in params]
    sec = [np.zeros_like(p) for p in params]
    step = 0
    X = x[:, None]
    n = x.size
    log = np.empty(cfg.epochs)

    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = perm[start:start + cfg.batch_size]
            xb = X[idx]
            yb = y[idx]
            # forward, keeping activations and their slopes
            hs = [xb]
            dhs = []
            h = xb
            for k in range(n_w - 1):
                h, dh = act(h @ weights[k].T + biases[k])
                hs.append(h)
                dhs.append(dh)
            out = (h @ weights[-1].T + biases[-1])[:, 0]
            resid = out - yb
            # backward
            grads = [None] * (2 * n_w)
            delta = (2.0 / idx.size) * resid[:, None]
            for k in range(n_w - 1, -1, -1):
                grads[k] = delta.T @ hs[k]
                grads[n_w + k] = delta.sum(axis=0)
                if k > 0:
                    delta = (delta @ weights[k]) * dhs[k - 1]
            step += 1
            c1 = 1.0 - beta1 ** step
            c2 = 1.0 - beta2 ** step
            for p, g, mo, se in zip(params, grads, mom, sec):
                mo *= beta1
                mo += (1.0 - beta1) * g
                se *= beta2
                se += (1.0 - beta2) * g * g
                p -= cfg.learning_rate * (mo / c1) / (np.sqrt(se / c2) + eps_adam)
            if constrained:
                for a in weights:
                    np.clip(a, 0.0, None, out=a)
        log[epoch] = _full_mse(weights, biases, act, X, y)
        if not math.isfinite(log[epoch]):
            raise TrainingDiverged(epoch)

    model = MlpModel(arch, weights, biases,
                     tp if arch.training_space != "raw" else None,
                     training_log=log, seed=cfg.seed)
    return model


def _full_mse(weights, biases, act, X, y):
    h = X
    for k in range(len(weights) - 1):
        h, _ = act(h @ weights[k].T + biases[k])
    out = (h @ weights[-1].T + biases[-1])[:, 0]
    return float(np.mean((out - y) ** 2))


def training_mse(model: MlpModel, ds: IVDataset) -> float:
    """Training-space mean squared error of the model on a dataset."""
    space = model.arch.training_space
    transformed = dset.apply_transform(
        ds, space, model.tp or TransformParams())
    y, _ = forward_raw(model, transformed.v)
    return float(np.mean((y - transformed.i) ** 2))


def zero_crossing(model, lo: float = -2.0, hi: float = 0.8,
                  n_scan: int = 2801) -> Optional[float]:
    """First sign change of the compact model's current on [lo, hi].

    Scans a uniform grid, then bisects the first bracketing interval.
    Returns None when the current never changes sign.
    """
    grid = np.linspace(lo, hi, n_scan)
    vals = model.evaluate(grid)[0]
    exact = np.nonzero(vals == 0.0)[0]
    change = np.nonzero(np.diff(np.sign(vals)) != 0)[0]
    if exact.size and (not change.size or exact[0] <= change[0]):
        return float(grid[exact[0]])
    if not change.size:
        return None
    a, b = grid[change[0]], grid[change[0] + 1]
    fa = model.evaluate(np.array([a]))[0][0]
    for _ in range(80):
        mid = 0.5 * (a + b)
        fm = model.evaluate(np.array([mid]))[0][0]
        if fm == 0.0:
            return float(mid)
        if (fa < 0) == (fm < 0):
            a, fa = mid, fm
        else:
            b = mid
    return float(0.5 * (a + b))


def monotonicity_violations(model, rng: np.random.Generator,
                            n_pairs: int = 2000,
                            lo: float = -125.0, hi: float = 0.8) -> int:
    """Count sampled ordered pairs where current decreases with voltage."""
    v1 = rng.uniform(lo, hi, n_pairs)
    v2 = rng.uniform(lo, hi, n_pairs)
    a = np.minimum(v1, v2)
    b = np.maximum(v1, v2)
    keep = a < b
    ia = model.evaluate(a[keep])[0]
    ib = model.evaluate(b[keep])[0]
    return int(np.sum(ia > ib))


def table1_grid() -> list[MlpArchitecture]:
    """The sixteen representative architecture/training configurations."""
    names = ["M1-50-E", "M2-50-E", "M1-50-S", "M2-50-S", "M1-50-T",
             "M1-50-S-neg", "M2-50-S-neg",
             "M1-10-E-VI", "M2-10-E-VI", "M1-10-E-VI-neg", "M2-10-E-VI-neg",
             "M1-10-T-VI", "M2-10-T-VI", "M2-25-T-VI", "M2-50-T-VI",
             "M2-100-T-VI"]
    return [MlpArchitecture.from_name(n) for n in names]


def full_grid() -> list[MlpArchitecture]:
    """All 240 combinations: 2 depths x 5 widths x 3 activations x
    2 constraints x 2 voltage-transform choices x 2 current-transform
    choices."""
    spaces = {(False, False): "raw", (True, False): "V",
              (False, True): "I", (True, True): "VI"}
    grid = []
    for hidden in (1, 2):
        for width in (5, 10, 25, 50, 100):
            for activation in ("elu", "sigmoid", "tanh"):
                for constraint in (NON_NEGATIVE, UNCONSTRAINED):
                    for tv in (False, True):
                        for ti in (False, True):
                            grid.append(MlpArchitecture(
                                hidden, width, activation, constraint,
                                spaces[(tv, ti)]))
    return grid


SWEEP_COLUMNS = ("name", "activation", "layers", "width", "space",
                 "constraint", "mse", "zero_crossing_v", "monotone",
                 "rectifier_converged")


def sweep_architectures(ds: IVDataset, grid: list[MlpArchitecture],
                        cfg: TrainConfig, tp: TransformParams,
                        rectifier_steps: int = 200) -> list[dict]:
    """Train every configuration and collect physicality diagnostics.

    Per-row failures (divergence, solver breakdown) are recorded in the
    row rather than aborting the sweep.  Each row trains with a seed
    derived from its grid position, so rows stay reproducible one by one.
    """
    from . import circuit  # deferred: circuit is a heavier import

    if not grid:
        raise MlpError("architecture grid is empty")
    rows = []
    for k, arch in enumerate(grid):
        row = dict.fromkeys(SWEEP_COLUMNS)
        row.update(name=arch.name, activation=arch.activation,
                   layers=arch.hidden_layers, width=arch.width,
                   space=arch.training_space, constraint=arch.constraint)
        row_cfg = replace(cfg, seed=cfg.seed + k)
        try:
            model = train(ds, arch, row_cfg, tp)
            row["mse"] = model.training_log[-1]
            row["zero_crossing_v"] = zero_crossing(model)
            viol = monotonicity_violations(
                model, np.random.default_rng(row_cfg.seed),
                lo=float(ds.v[0]), hi=float(ds.v[-1]))
            row["monotone"] = viol == 0
            net = circuit.build_bridge_rectifier("dut")
            period = 0.1
            try:
                circuit.transient(net, {"dut": model}, period,
                                  period / rectifier_steps,
                                  circuit.SolveOptions())
                row["rectifier_converged"] = True
            except circuit.SolverError:
                row["rectifier_converged"] = False
        except TrainingDiverged:
            row["rectifier_converged"] = False
            row["monotone"] = False
        rows.append(row)
    return rows
