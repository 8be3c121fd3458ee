"""Carr-Purcell baselines and multistart robust pulse optimization.

A candidate sequence of ``n`` pulses is described by ``4n`` numbers: the
amplitude, phase, duration and trailing gap of each pulse.  The optimizer
maximizes the worst trace fidelity ``min_k Tr(E(eta_k) G^T)`` over a grid of
static offsets at fixed total time, optionally keeping at least half of the
sequence quiescent.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.linalg import expm
from scipy.optimize import minimize

from .dynamics import (
    JX,
    TAU_PI,
    Pulse,
    PulseSequence,
    QubitChannel,
    _Generators,
    channel_of_sequence,
)
from .fluctuator import FluctuatorModel
from .metrics import TargetGate

PI_X = np.diag([1.0, -1.0, -1.0])
MIN_DURATION = 1e-6  # in units of tau_pi


def identity_target() -> TargetGate:
    return TargetGate(np.eye(3), "identity")


def hadamard_target() -> TargetGate:
    """pi rotation about (x + z)/sqrt(2): swaps x and z, flips y."""
    return TargetGate(np.array([[0.0, 0.0, 1.0], [0.0, -1.0, 0.0], [1.0, 0.0, 0.0]]), "hadamard")


TARGETS = {"identity": identity_target, "hadamard": hadamard_target}


def carr_purcell(n_reps: int, wait: float, amplitude: float = 1.0) -> PulseSequence:
    """``n_reps`` blocks of w - pi_x - w - w - pi_x - w with finite pi pulses."""
    if int(n_reps) != n_reps or n_reps < 1:
        raise ValueError("n_reps must be a positive integer")
    if not 0 < amplitude <= 1:
        raise ValueError("amplitude must lie in (0, 1]")
    if not wait > 0:
        raise ValueError("wait must be positive")
    t_pi = math.pi / amplitude
    block = (
        Pulse(0.0, 0.0, wait, 0.0),
        Pulse(amplitude, 0.0, t_pi, 2 * wait),
        Pulse(amplitude, 0.0, t_pi, wait),
    )
    return PulseSequence(block * int(n_reps))


def carr_purcell_duty(duty: float, n_reps: int = 1, amplitude: float = 1.0) -> PulseSequence:
    """CP sequence whose pulses occupy a fraction ``duty`` of the time."""
    if not 0 < duty < 1:
        raise ValueError("duty must lie in (0, 1)")
    pulse_time = 2 * math.pi / amplitude
    return carr_purcell(n_reps, pulse_time * (1 - duty) / (4 * duty), amplitude)


def ideal_cp_channel(fluct: FluctuatorModel, n_reps: int, wait: float) -> QubitChannel:
    """CP with instantaneous pi_x rotations; only the waits take time."""
    if int(n_reps) != n_reps or n_reps < 1:
        raise ValueError("n_reps must be a positive integer")
    if not wait > 0:
        raise ValueError("wait must be positive")
    gens = _Generators(fluct)
    f1, f2 = gens.propagators(np.zeros(2), np.zeros(2), np.array([wait, 2 * wait]))
    flip = np.kron(np.eye(fluct.n), PI_X)
    block = f1 @ flip @ f2 @ flip @ f1
    return QubitChannel(gens.contract(np.linalg.matrix_power(block, int(n_reps))))


def random_sequence(n_pulses: int, total_time: float, duty_enforced: bool = True, seed=0) -> PulseSequence:
    """Random feasible start: amplitudes in (0, 1], phases in [0, 2 pi)."""
    if int(n_pulses) != n_pulses or n_pulses < 1:
        raise ValueError("n_pulses must be a positive integer")
    if not total_time > 0:
        raise ValueError("total_time must be positive")
    rng = np.random.default_rng(seed)
    amp = 1.0 - rng.random(n_pulses)
    phase = 2 * math.pi * rng.random(n_pulses)
    d = 1.0 - rng.random(n_pulses)
    g = 1.0 - rng.random(n_pulses)
    if duty_enforced:
        pulse_fraction = rng.uniform(0.2, 0.45)
    else:
        pulse_fraction = d.sum() / (d.sum() + g.sum())
    d *= pulse_fraction * total_time / d.sum()
    g *= (1 - pulse_fraction) * total_time / g.sum()
    return PulseSequence(tuple(Pulse(*p) for p in zip(amp, phase, d, g)))


@dataclass(frozen=True)
class OptimizationSpec:
    target: TargetGate
    fluct: FluctuatorModel
    n_pulses: int
    total_time: float
    offset_grid: tuple = (0.0,)
    n_starts: int = 200
    seed: int = 0
    duty_enforced: bool = True
    fd_step: float = 1e-4
    maxiter: int = 500

    def __post_init__(self):
        object.__setattr__(self, "offset_grid", tuple(float(o) for o in self.offset_grid))
        if int(self.n_pulses) != self.n_pulses or self.n_pulses < 1:
            raise ValueError("n_pulses must be a positive integer")
        if not self.total_time > 0:
            raise ValueError("total_time must be positive")
        if not self.offset_grid:
            raise ValueError("offset grid must be nonempty")
        bound = 10 * self.fluct.epsilon * (1 + 1e-9)
        if any(abs(o) > bound for o in self.offset_grid):
            raise ValueError("offset grid must lie within +-10 epsilon")
        if int(self.n_starts) != self.n_starts or self.n_starts < 1:
            raise ValueError("n_starts must be a positive integer")
        if not self.fd_step > 0:
            raise ValueError("fd_step must be positive")


def robust_grid(epsilon: float, n: int = 11) -> tuple:
    return tuple(float(x) for x in np.linspace(-10 * epsilon, 10 * epsilon, n))


def offset_traces(seq: PulseSequence, spec: OptimizationSpec) -> np.ndarray:
    g = spec.target.matrix
    return np.array(
        [np.trace(channel_of_sequence(spec.fluct.with_offset(o), seq).matrix @ g.T) for o in spec.offset_grid]
    )


def robust_objective(seq: PulseSequence, spec: OptimizationSpec) -> float:
    """Worst trace fidelity Tr(E G^T) over the offset grid, in [-3, 3]."""
    return float(np.min(offset_traces(seq, spec)))


# -- parameter vector <-> sequence -------------------------------------------------------


def _pack(seq: PulseSequence) -> np.ndarray:
    p = seq.pulses
    return np.concatenate(
        [
            [x.amplitude for x in p],
            [x.phase for x in p],
            [x.duration / TAU_PI for x in p],
            [x.gap / TAU_PI for x in p],
        ]
    )


def _project(x: np.ndarray, n: int, total_time: float, duty: bool) -> np.ndarray:
    """Nearest-by-rescaling feasible point: amplitude in [0,1], fixed total time, duty."""
    x = x.copy()
    total = total_time / TAU_PI
    amp = np.clip(x[:n], 0.0, 1.0)
    phase = np.mod(x[n : 2 * n], 2 * math.pi)
    d = np.maximum(x[2 * n : 3 * n], MIN_DURATION)
    g = np.maximum(x[3 * n :], 0.0)
    s = total / (d.sum() + g.sum())
    d, g = d * s, g * s
    if duty and g.sum() < total / 2 * (1 + 1e-12):
        if g.sum() <= 0:
            g = np.ones(n)
        g *= total / 2 * (1 + 2e-12) / g.sum()
        d *= (total - g.sum()) / d.sum()
    return np.concatenate([amp, phase, d, g])


def _unpack(x: np.ndarray, n: int) -> PulseSequence:
    amp, phase = x[:n], x[n : 2 * n]
    d, g = x[2 * n : 3 * n] * TAU_PI, x[3 * n :] * TAU_PI
    return PulseSequence(
        tuple(Pulse(float(min(max(a, 0.0), 1.0)), float(f), float(dd), float(gg)) for a, f, dd, gg in zip(amp, phase, d, g))
    )


class _TraceModel:
    """Per-offset traces Tr(E G^T) and their finite-difference Jacobian.

    Every parameter touches a single segment propagator, so perturbed traces
    are read off from cached prefix and suffix products instead of
    re-propagating the whole sequence.
    """

    def __init__(self, spec: OptimizationSpec):
        self.n = int(spec.n_pulses)
        self.h = float(spec.fd_step)
        gens = [_Generators(spec.fluct.with_offset(o)) for o in spec.offset_grid]
        self.drift = np.stack([g.drift for g in gens])[:, None]  # (K, 1, D, D)
        self.kx = gens[0].kx
        self.ky = gens[0].ky
        tie = gens[0].tie
        self.weight = tie.T @ spec.target.matrix.T @ tie / spec.fluct.n
        self.evaluations = 0
        self._cache_key = None
        self._cache_val = None

    def _pulse_generators(self, amp, phase, dur):
        ax = (amp * np.cos(phase))[..., None, None]
        ay = (amp * np.sin(phase))[..., None, None]
        return (self.drift + ax * self.kx + ay * self.ky) * (dur * TAU_PI)[..., None, None]

    def _propagators(self, x):
        n = self.n
        amp, phase, d, g = x[:n], x[n : 2 * n], x[2 * n : 3 * n], x[3 * n :]
        pulses = expm(self._pulse_generators(amp, phase, d))
        gaps = expm(self.drift * (g * TAU_PI)[:, None, None])
        k, _, dim, _ = pulses.shape
        segs = np.empty((k, 2 * n, dim, dim))
        segs[:, 0::2] = pulses
        segs[:, 1::2] = gaps
        return segs

    def traces(self, x) -> np.ndarray:
        key = x.tobytes()
        if self._cache_key == key:
            return self._cache_val
        self.evaluations += 1
        segs = self._propagators(x)
        prod = segs[:, 0]
        for j in range(1, segs.shape[1]):
            prod = segs[:, j] @ prod
        val = np.einsum("kab,ba->k", prod, self.weight)
        self._cache_key, self._cache_val = key, val
        return val

    def jacobian(self, x) -> np.ndarray:
        n, h = self.n, self.h
        segs = self._propagators(x)
        k, m, dim, _ = segs.shape
        # prefix[j] = U_{j-1}..U_0, suffix[j] = U_{m-1}..U_{j+1}
        prefix = np.empty_like(segs)
        suffix = np.empty_like(segs)
        prefix[:, 0] = np.eye(dim)
        for j in range(1, m):
            prefix[:, j] = segs[:, j - 1] @ prefix[:, j - 1]
        suffix[:, m - 1] = np.eye(dim)
        for j in range(m - 2, -1, -1):
            suffix[:, j] = suffix[:, j + 1] @ segs[:, j + 1]
        env = prefix @ self.weight @ suffix  # Tr(U_j env_j) = trace for every j

        amp, phase, d, g = x[:n], x[n : 2 * n], x[2 * n : 3 * n], x[3 * n :]
        steps = np.array([h, -h])[:, None]
        # pulse perturbations: (3 params, 2 signs, n pulses)
        pa = np.stack([amp + steps, np.broadcast_to(amp, (2, n)), np.broadcast_to(amp, (2, n))])
        pp = np.stack([np.broadcast_to(phase, (2, n)), phase + steps, np.broadcast_to(phase, (2, n))])
        pd = np.stack([np.broadcast_to(d, (2, n)), np.broadcast_to(d, (2, n)), d + steps])
        gen = self._pulse_generators(pa[:, :, None], pp[:, :, None], pd[:, :, None])  # (3,2,K,n,D,D)
        up = expm(gen)
        gp = expm(self.drift[None] * ((g + steps) * TAU_PI)[:, None, :, None, None])  # (2,K,n,D,D)
        tp = np.einsum("psknab,knba->pskn", up, env[:, 0::2])
        tg = np.einsum("sknab,knba->skn", gp, env[:, 1::2])
        jac = np.empty((k, 4 * n))
        jac[:, : 3 * n] = ((tp[:, 0] - tp[:, 1]) / (2 * h)).transpose(1, 0, 2).reshape(k, 3 * n)
        jac[:, 3 * n :] = (tg[0] - tg[1]) / (2 * h)
        self.evaluations += 8 * n  # one per finite-difference probe
        return jac


def local_optimize(start: PulseSequence, spec: OptimizationSpec, model: Optional[_TraceModel] = None):
    """Ascend the robust objective from ``start``; never returns anything worse.

    The min over offsets is handled in epigraph form (maximize ``t`` subject
    to ``Tr_k >= t`` for every offset) with SLSQP, using central finite
    differences for the trace gradients.
    """
    n = int(spec.n_pulses)
    if start.n_pulses != n:
        raise ValueError("start sequence has the wrong number of pulses")
    model = model or _TraceModel(spec)
    total = spec.total_time / TAU_PI
    x0 = _project(_pack(start), n, spec.total_time, spec.duty_enforced)
    start_obj = robust_objective(start, spec)

    def fun(y):
        grad = np.zeros_like(y)
        grad[-1] = -1.0
        return -y[-1], grad

    def epi(y):
        return model.traces(y[:-1]) - y[-1]

    def epi_jac(y):
        j = model.jacobian(y[:-1])
        return np.hstack([j, -np.ones((j.shape[0], 1))])

    ones_t = np.r_[np.zeros(2 * n), np.ones(2 * n), 0.0]
    gaps_only = np.r_[np.zeros(3 * n), np.ones(n), 0.0]
    constraints = [
        {"type": "ineq", "fun": epi, "jac": epi_jac},
        {"type": "eq", "fun": lambda y: np.array([ones_t @ y - total]), "jac": lambda y: ones_t[None]},
    ]
    if spec.duty_enforced:
        constraints.append(
            {"type": "ineq", "fun": lambda y: np.array([gaps_only @ y - total / 2]), "jac": lambda y: gaps_only[None]}
        )
    bounds = (
        [(0.0, 1.0)] * n
        + [(None, None)] * n
        + [(MIN_DURATION, total)] * n
        + [(0.0, total)] * n
        + [(-3.0, 3.0)]
    )
    y0 = np.r_[x0, np.min(model.traces(x0))]
    res = minimize(
        fun,
        y0,
        jac=True,
        method="SLSQP",
        bounds=bounds,
        constraints=constraints,
        options={"maxiter": int(spec.maxiter), "ftol": 1e-14},
    )
    x = _project(res.x[:-1], n, spec.total_time, spec.duty_enforced)
    candidate = _unpack(x, n)
    obj = robust_objective(candidate, spec)
    if not obj >= start_obj - 1e-12:
        return start, start_obj
    return candidate, obj


@dataclass
class OptimizationReport:
    best_sequence: PulseSequence
    best_objective: float
    per_start_objectives: list
    evaluations: int
    wall_notes: str = ""
    best_start: int = 0

    def to_dict(self) -> dict:
        return {
            "best_objective": self.best_objective,
            "best_start": self.best_start,
            "per_start_objectives": list(self.per_start_objectives),
            "evaluations": self.evaluations,
            "notes": self.wall_notes,
            "best_sequence": self.best_sequence.to_dict(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def _run_start(args):
    spec, k = args
    start = random_sequence(spec.n_pulses, spec.total_time, spec.duty_enforced, seed=(spec.seed, k))
    model = _TraceModel(spec)
    seq, obj = local_optimize(start, spec, model)
    return seq, obj, model.evaluations


def grape_search(spec: OptimizationSpec, workers: int = 1, starts: Optional[Sequence[int]] = None) -> OptimizationReport:
    """Best locally optimized sequence over ``spec.n_starts`` random starts.

    Start ``k`` draws its initial sequence from the stream ``(spec.seed, k)``,
    so results do not depend on ``workers``; ties go to the lowest index.
    """
    indices = list(range(int(spec.n_starts))) if starts is None else list(starts)
    jobs = [(spec, k) for k in indices]
    if workers and workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_start, jobs))
    else:
        results = [_run_start(j) for j in jobs]
    objs = [r[1] for r in results]
    best = int(np.argmax(objs))  # first maximum
    return OptimizationReport(
        best_sequence=results[best][0],
        best_objective=objs[best],
        per_start_objectives=objs,
        evaluations=sum(r[2] for r in results),
        wall_notes=f"{len(indices)} starts, SLSQP epigraph, fd_step={spec.fd_step:g}, maxiter={spec.maxiter}",
        best_start=indices[best],
    )
