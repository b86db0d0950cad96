"""Minimal nonlinear circuit simulator for validating diode compact models.

Modified nodal analysis with node voltages plus one branch current per
voltage source.  Nonlinear solves use damped Newton: the update is scaled
so no diode junction voltage moves more than the junction limit in one
iteration, and on failure the source amplitudes are ramped up in stages
(source stepping).  The element set is memoryless, so the transient sweep
is an exact sequence of warm-started DC solves.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Optional, Union

import numpy as np

from .dataset import ShockleyParams, shockley_eval

GROUND = "0"


class CircuitError(ValueError):
    """Bad netlist or element parameters."""


class SolverError(RuntimeError):
    """Newton failed to converge (or hit a singular Jacobian)."""

    def __init__(self, message, time=None, residual=None):
        self.time = time
        self.residual = residual
        super().__init__(message)


@dataclass(frozen=True)
class Dc:
    volts: float

    def at(self, t):
        return self.volts


@dataclass(frozen=True)
class Sine:
    amplitude: float
    freq: float
    phase: float = 0.0
    offset: float = 0.0

    def __post_init__(self):
        if not self.freq > 0:
            raise CircuitError("sine frequency must be positive")

    def at(self, t):
        return self.offset + self.amplitude * math.sin(
            2.0 * math.pi * self.freq * t + self.phase)


Waveform = Union[Dc, Sine]


@dataclass(frozen=True)
class Resistor:
    name: str
    npos: str
    nneg: str
    ohms: float

    def __post_init__(self):
        if not self.ohms > 0:
            raise CircuitError(f"{self.name}: resistance must be positive")


@dataclass(frozen=True)
class VSource:
    name: str
    npos: str
    nneg: str
    waveform: Waveform


@dataclass(frozen=True)
class Diode:
    """Two-terminal device; current f(v_pn) flows into the p terminal."""
    name: str
    npos: str
    nneg: str
    model: str


Element = Union[Resistor, VSource, Diode]


@dataclass(frozen=True)
class Netlist:
    elements: tuple

    def __post_init__(self):
        names = [e.name for e in self.elements]
        if len(set(names)) != len(names):
            raise CircuitError("duplicate element names")
        nodes = self.nodes()
        if GROUND not in nodes:
            raise CircuitError(f"no element connects to ground ({GROUND!r})")
        # every node must reach ground through the element graph
        adj = {}
        for e in self.elements:
            adj.setdefault(e.npos, set()).add(e.nneg)
            adj.setdefault(e.nneg, set()).add(e.npos)
        seen = {GROUND}
        stack = [GROUND]
        while stack:
            for nxt in adj.get(stack.pop(), ()):
                if nxt not in seen:
                    seen.add(nxt)
                    stack.append(nxt)
        floating = nodes - seen
        if floating:
            raise CircuitError(f"nodes not connected to ground: "
                               f"{sorted(floating)}")

    def nodes(self) -> set:
        out = set()
        for e in self.elements:
            out.add(e.npos)
            out.add(e.nneg)
        return out

    def sources(self):
        return [e for e in self.elements if isinstance(e, VSource)]

    def diodes(self):
        return [e for e in self.elements if isinstance(e, Diode)]


@dataclass(frozen=True)
class SolveOptions:
    reltol: float = 1e-3
    abstol_v: float = 1e-6
    abstol_i: float = 1e-12
    max_newton: int = 100
    junction_limit: float = 0.5
    source_levels: int = 10

    def __post_init__(self):
        for name in ("reltol", "abstol_v", "abstol_i", "junction_limit"):
            if not getattr(self, name) > 0:
                raise CircuitError(f"{name} must be positive")


@dataclass
class TransientResult:
    times: np.ndarray
    node_voltages: dict            # node name -> series
    branch_currents: dict          # source name -> series
    newton_iterations: np.ndarray

    def __post_init__(self):
        n = self.times.size
        series = (list(self.node_voltages.values())
                  + list(self.branch_currents.values()))
        if any(s.size != n for s in series):
            raise CircuitError("transient series lengths differ")
        if not all(np.all(np.isfinite(s)) for s in series):
            raise CircuitError("non-finite values in transient result")


class AnalyticDiode:
    """Shockley(+breakdown) curve exposed through the compact-model interface."""

    def __init__(self, params: Optional[ShockleyParams] = None):
        self.params = params or ShockleyParams()

    def evaluate(self, v):
        return shockley_eval(self.params, v)


class MnaSystem:
    """Assembled equations for one netlist and one model table."""

    def __init__(self, net: Netlist, models: dict):
        self.net = net
        self.node_names = sorted(net.nodes() - {GROUND})
        self.node_index = {n: k for k, n in enumerate(self.node_names)}
        self.sources = net.sources()
        self.n_nodes = len(self.node_names)
        self.n = self.n_nodes + len(self.sources)
        for d in net.diodes():
            if d.model not in models:
                raise CircuitError(f"{d.name}: unknown diode model "
                                   f"{d.model!r}")
        self.models = models
        self.diode_rows = [(self.node_index.get(d.npos, -1),
                            self.node_index.get(d.nneg, -1),
                            models[d.model]) for d in net.diodes()]
        self.res_rows = [(self.node_index.get(r.npos, -1),
                          self.node_index.get(r.nneg, -1), 1.0 / r.ohms)
                         for r in net.elements if isinstance(r, Resistor)]

    def _x_of(self, x, idx):
        return x[idx] if idx >= 0 else 0.0

    def assemble(self, x, t, scale):
        """KCL/source residual vector and Jacobian at state ``x``.

        Sign convention: residual rows sum the currents *leaving* each
        node; a source row is the voltage mismatch V+ - V- - E(t).
        """
        n = self.n
        F = np.zeros(n)
        J = np.zeros((n, n))
        for p, q, g in self.res_rows:
            dv = self._x_of(x, p) - self._x_of(x, q)
            i = g * dv
            if p >= 0:
                F[p] += i
                J[p, p] += g
                if q >= 0:
                    J[p, q] -= g
            if q >= 0:
                F[q] -= i
                J[q, q] += g
                if p >= 0:
                    J[q, p] -= g
        for p, q, model in self.diode_rows:
            dv = self._x_of(x, p) - self._x_of(x, q)
            i, g = model.evaluate(dv)
            if p >= 0:
                F[p] += i
                J[p, p] += g
                if q >= 0:
                    J[p, q] -= g
            if q >= 0:
                F[q] -= i
                J[q, q] += g
                if p >= 0:
                    J[q, p] -= g
        for k, src in enumerate(self.sources):
            row = self.n_nodes + k
            p = self.node_index.get(src.npos, -1)
            q = self.node_index.get(src.nneg, -1)
            # branch current flows from the + node through the source
            cur = x[row]
            if p >= 0:
                F[p] += cur
                J[p, row] += 1.0
                J[row, p] += 1.0
            if q >= 0:
                F[q] -= cur
                J[q, row] -= 1.0
                J[row, q] -= 1.0
            F[row] = (self._x_of(x, p) - self._x_of(x, q)
                      - scale * src.waveform.at(t))
        return F, J

    def junction_deltas(self, delta):
        out = []
        for p, q, _ in self.diode_rows:
            out.append(self._x_of(delta, p) - self._x_of(delta, q))
        return np.array(out) if out else np.zeros(0)

    def converged(self, F, delta, x, opts):
        nv = self.n_nodes
        res_ok = (np.all(np.abs(F[:nv]) < opts.abstol_i)
                  and np.all(np.abs(F[nv:]) < opts.abstol_v))
        tol = np.empty_like(x)
        tol[:nv] = opts.abstol_v + opts.reltol * np.abs(x[:nv])
        tol[nv:] = opts.abstol_i + opts.reltol * np.abs(x[nv:])
        return res_ok and np.all(np.abs(delta) < tol)

    def newton(self, t, scale, opts, x0):
        x = x0.copy()
        F, J = self.assemble(x, t, scale)
        last_res = float(np.max(np.abs(F))) if F.size else 0.0
        for it in range(1, opts.max_newton + 1):
            try:
                delta = np.linalg.solve(J, -F)
            except np.linalg.LinAlgError:
                raise SolverError(f"singular Jacobian at t={t:g}", time=t,
                                  residual=last_res) from None
            jd = self.junction_deltas(delta)
            alpha = 1.0
            if jd.size:
                worst = float(np.max(np.abs(jd)))
                if worst > opts.junction_limit:
                    alpha = opts.junction_limit / worst
            x += alpha * delta
            F, J = self.assemble(x, t, scale)
            last_res = float(np.max(np.abs(F))) if F.size else 0.0
            if alpha == 1.0 and self.converged(F, delta, x, opts):
                return x, it
        raise SolverError(
            f"no convergence after {opts.max_newton} Newton iterations "
            f"at t={t:g} (residual {last_res:.3e})",
            time=t, residual=last_res)

    def solve_dc(self, t, opts, guess=None):
        x0 = np.zeros(self.n) if guess is None else np.asarray(guess, float)
        try:
            return self.newton(t, 1.0, opts, x0)
        except SolverError:
            pass
        # source stepping: ramp amplitudes, warm-starting each level
        x = np.zeros(self.n)
        total_iters = 0
        levels = np.linspace(1.0 / opts.source_levels, 1.0,
                             opts.source_levels)
        for scale in levels:
            try:
                x, its = self.newton(t, float(scale), opts, x)
            except SolverError as exc:
                raise SolverError(
                    f"source stepping failed at level {scale:.2f}: {exc}",
                    time=t, residual=exc.residual) from None
            total_iters += its
        return x, total_iters


def dc_solve(net: Netlist, models: dict, t: float, opts: SolveOptions,
             guess=None):
    """Operating point at time ``t``; returns (solution vector, system).

    The vector holds the non-ground node voltages (alphabetical) followed
    by one branch current per source, in netlist order; the returned
    system's ``node_index`` maps names to positions.
    """
    sys_ = MnaSystem(net, models)
    x, _ = sys_.solve_dc(t, opts, guess)
    return x, sys_


def transient(net: Netlist, models: dict, t_end: float, dt: float,
              opts: Optional[SolveOptions] = None) -> TransientResult:
    """Quasi-static sweep: DC solves at t = 0, dt, ... < t_end.

    Each step warm-starts from the previous solution.  Exact (not an
    integration scheme) for this memoryless element set.
    """
    if not dt > 0:
        raise CircuitError("dt must be positive")
    if t_end < dt:
        raise CircuitError("t_end must be at least dt")
    opts = opts or SolveOptions()
    sys_ = MnaSystem(net, models)
    n_steps = int(round(t_end / dt))
    times = np.arange(n_steps) * dt
    states = np.empty((n_steps, sys_.n))
    iters = np.empty(n_steps, dtype=int)
    x = None
    for k, t in enumerate(times):
        try:
            x, its = sys_.solve_dc(float(t), opts, guess=x)
        except SolverError as exc:
            raise SolverError(f"transient failed at t={t:g}: {exc}",
                              time=float(t), residual=exc.residual) from None
        states[k] = x
        iters[k] = its
    node_v = {name: states[:, sys_.node_index[name]].copy()
              for name in sys_.node_names}
    branch_i = {src.name: states[:, sys_.n_nodes + k].copy()
                for k, src in enumerate(sys_.sources)}
    return TransientResult(times, node_v, branch_i, iters)


def build_bridge_rectifier(model_ref: str, amplitude: float = 5.0,
                           freq: float = 10.0,
                           phase: float = math.pi / 1.63,
                           load: float = 1000.0) -> Netlist:
    """Four-diode full-wave bridge driving a resistive load.

    The source sits between the two AC legs; conduction alternates between
    the (D1, D4) and (D2, D3) pairs, so the load node never swings
    negative by more than a reverse leakage drop.
    """
    if not (amplitude >= 0 and freq > 0 and load > 0):
        raise CircuitError("bridge needs amplitude >= 0, freq > 0, load > 0")
    return Netlist((
        VSource("V1", "ac_p", "ac_n", Sine(amplitude, freq, phase)),
        Diode("D1", "ac_p", "out", model_ref),
        Diode("D2", "ac_n", "out", model_ref),
        Diode("D3", GROUND, "ac_p", model_ref),
        Diode("D4", GROUND, "ac_n", model_ref),
        Resistor("RL", "out", GROUND, load),
    ))


_NAME_RE = re.compile(r"^[A-Za-z][\w.+-]*$")


def parse_netlist(text: str) -> Netlist:
    """Parse the one-element-per-line netlist format.

    ``R<name> n+ n- <ohms>``, ``V<name> n+ n- DC <v>``,
    ``V<name> n+ n- SIN <offset> <ampl> <freq> <phase>``,
    ``D<name> p n <model>``; ``*`` starts a comment; ground is node 0.
    """
    elements = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("*")[0].strip()
        if not line:
            continue
        tok = line.split()
        name = tok[0]
        if not _NAME_RE.match(name):
            raise CircuitError(f"line {lineno}: bad element name {name!r}")
        kind = name[0].upper()
        try:
            if kind == "R":
                elements.append(Resistor(name, tok[1], tok[2], float(tok[3])))
            elif kind == "D":
                elements.append(Diode(name, tok[1], tok[2], tok[3]))
            elif kind == "V":
                mode = tok[3].upper()
                if mode == "DC":
                    wave = Dc(float(tok[4]))
                elif mode == "SIN":
                    offset, ampl, freq, phase = (float(s) for s in tok[4:8])
                    wave = Sine(ampl, freq, phase, offset)
                else:
                    raise CircuitError(
                        f"line {lineno}: unknown source kind {tok[3]!r}")
                elements.append(VSource(name, tok[1], tok[2], wave))
            else:
                raise CircuitError(
                    f"line {lineno}: unknown element type {name!r}")
        except (IndexError, ValueError) as exc:
            raise CircuitError(f"line {lineno}: {exc}") from None
    if not elements:
        raise CircuitError("empty netlist")
    return Netlist(tuple(elements))


def format_netlist(net: Netlist) -> str:
    lines = []
    for e in net.elements:
        if isinstance(e, Resistor):
            lines.append(f"{e.name} {e.npos} {e.nneg} {e.ohms!r}")
        elif isinstance(e, Diode):
            lines.append(f"{e.name} {e.npos} {e.nneg} {e.model}")
        elif isinstance(e, VSource):
            w = e.waveform
            if isinstance(w, Dc):
                lines.append(f"{e.name} {e.npos} {e.nneg} DC {w.volts!r}")
            else:
                lines.append(f"{e.name} {e.npos} {e.nneg} SIN {w.offset!r} "
                             f"{w.amplitude!r} {w.freq!r} {w.phase!r}")
    return "\n".join(lines) + "\n"
