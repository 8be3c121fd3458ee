"""Gate fidelities, offset sweeps and coherence-time estimates."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence, Union

import numpy as np

from .dynamics import PulseSequence, QubitChannel, channel_of_sequence, repeat_channel
from .fluctuator import FluctuatorModel


@dataclass(frozen=True)
class TargetGate:
    """Bloch-space image (3x3 rotation) of a target unitary."""

    matrix: np.ndarray
    name: str = ""

    def __post_init__(self):
        g = np.array(self.matrix, dtype=float)
        if g.shape != (3, 3):
            raise ValueError("target gate must be 3x3")
        if not np.allclose(g.T @ g, np.eye(3), rtol=0, atol=1e-12):
            raise ValueError("target gate must be orthogonal")
        if abs(np.linalg.det(g) - 1) > 1e-12:
            raise ValueError("target gate must be a proper rotation")
        g.setflags(write=False)
        object.__setattr__(self, "matrix", g)


def _mat(x):
    return x.matrix if hasattr(x, "matrix") else np.asarray(x, dtype=float)


def average_fidelity(channel, target) -> float:
    """Bloch-sphere average of (1 + E z . G z) / 2, i.e. 1/2 + Tr(E G^T)/6."""
    return 0.5 + float(np.trace(_mat(channel) @ _mat(target).T)) / 6.0


def worst_case_fidelity(channel, target):
    """Minimum state fidelity over pure initial states and the state attaining it.

    The quadratic form z . E^T G z only sees the symmetric part of E^T G, so
    the minimum is set by its lowest eigenvalue.
    """
    a = _mat(channel).T @ _mat(target)
    w, v = np.linalg.eigh((a + a.T) / 2)
    return 0.5 * (1.0 + float(w[0])), v[:, 0]


ChannelSource = Union[PulseSequence, Callable[[FluctuatorModel], QubitChannel]]


def _channel(fluct, source):
    if isinstance(source, PulseSequence):
        return channel_of_sequence(fluct, source)
    return source(fluct)


@dataclass(frozen=True)
class SweepResult:
    offsets: tuple
    avg_error: tuple
    worst_error: tuple
    label: str = ""

    def __post_init__(self):
        if not len(self.offsets) == len(self.avg_error) == len(self.worst_error):
            raise ValueError("sweep columns must have equal lengths")

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["eta_os", "avg_error", "worst_error"])
        for row in zip(self.offsets, self.avg_error, self.worst_error):
            w.writerow([f"{x:.12g}" for x in row])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "eta_os": list(self.offsets),
            "avg_error": list(self.avg_error),
            "worst_error": list(self.worst_error),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def at(self, eta_os: float) -> tuple:
        i = int(np.argmin(np.abs(np.asarray(self.offsets) - eta_os)))
        return self.avg_error[i], self.worst_error[i]


def gate_errors(channel, target) -> tuple:
    """(average-case, worst-case) infidelities clipped to [0, 1]."""
    avg = 1.0 - average_fidelity(channel, target)
    worst = 1.0 - worst_case_fidelity(channel, target)[0]
    return min(max(avg, 0.0), 1.0), min(max(worst, 0.0), 1.0)


def default_offsets(epsilon: float, n: int = 41) -> np.ndarray:
    return np.linspace(-10 * epsilon, 10 * epsilon, n)


def offset_sweep(
    fluct: FluctuatorModel,
    seq: ChannelSource,
    target: TargetGate,
    offsets: Sequence[float],
    label: str = "",
) -> SweepResult:
    """Gate errors as the static offset eta_os is varied.

    ``seq`` is a pulse sequence or any callable mapping a fluctuator to its
    channel (e.g. an idealized sequence with instantaneous pulses).
    """
    offs, avg, worst = [], [], []
    for eta_os in offsets:
        eta_os = float(eta_os)
        if not math.isfinite(eta_os):
            raise ValueError("offsets must be finite")
        a, w = gate_errors(_channel(fluct.with_offset(eta_os), seq), target)
        offs.append(eta_os)
        avg.append(a)
        worst.append(w)
    return SweepResult(tuple(offs), tuple(avg), tuple(worst), label)


@dataclass(frozen=True)
class T2Estimate:
    t2: float
    fit_residual: float
    samples: tuple = field(default=())

    def to_dict(self) -> dict:
        return {
            "t2": self.t2 if math.isfinite(self.t2) else "inf",
            "fit_residual": self.fit_residual,
            "samples": [[t, x] for t, x in self.samples],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def estimate_t2(fluct: FluctuatorModel, seq: ChannelSource, n_reps_max: int = 64, period: float | None = None) -> T2Estimate:
    """Exponential decay time of <sigma_x> sampled after each repetition of ``seq``.

    ``period`` is the duration of one repetition; it defaults to the
    sequence's total time and must be given when ``seq`` is a callable.
    """
    if int(n_reps_max) != n_reps_max or n_reps_max < 8:
        raise ValueError("n_reps_max must be an integer >= 8")
    if period is None:
        if not isinstance(seq, PulseSequence):
            raise ValueError("period is required for callable channel sources")
        period = seq.total_time
    channel = _channel(fluct, seq)
    zeta0 = np.array([1.0, 0.0, 0.0])
    samples = []
    for k in range(1, int(n_reps_max) + 1):
        x = float((repeat_channel(channel, k).matrix @ zeta0)[0])
        samples.append((k * period, min(max(x, -1.0), 1.0)))
    t = np.array([s[0] for s in samples])
    x = np.array([s[1] for s in samples])
    if 1.0 - x[-1] < 1e-9 and np.all(np.abs(1.0 - x) < 1e-9):
        return T2Estimate(math.inf, 0.0, tuple(samples))
    keep = x > 1e-6
    if keep.sum() < 2:
        raise ValueError("signal decays below the fit floor within two repetitions")
    coef, res, *_ = np.polyfit(t[keep], np.log(x[keep]), 1, full=True)
    slope = coef[0]
    resid = float(np.sqrt(res[0] / keep.sum())) if len(res) else 0.0
    if slope >= 0:
        return T2Estimate(math.inf, resid, tuple(samples))
    return T2Estimate(-1.0 / slope, resid, tuple(samples))


def round_sig(x: float, digits: int = 2) -> float:
    if x == 0:
        return 0.0
    return round(x, digits - 1 - int(math.floor(math.log10(abs(x)))))


def calibrate_epsilon(
    target_t2: float,
    duty: float,
    search_interval: tuple = (1e-5, 1e-1),
    gamma_m: float | None = None,
    n_reps_max: int = 64,
    amplitude: float = 1.0,
    digits: int = 2,
) -> float:
    """Noise scale epsilon of the 1/omega fixture giving ``target_t2`` under CP.

    T2 falls monotonically with epsilon, so a bisection in log(epsilon) over
    ``search_interval`` suffices; the result is rounded to ``digits``
    significant figures.
    """
    # local import: pulse_opt depends on this module
    from .fluctuator import FIXTURE_GAMMA_M, paper_fixture
    from .pulse_opt import carr_purcell_duty

    if not target_t2 > 0:
        raise ValueError("target T2 must be positive")
    lo, hi = map(float, search_interval)
    if not 0 < lo < hi:
        raise ValueError("search interval must satisfy 0 < lo < hi")
    gamma_m = FIXTURE_GAMMA_M if gamma_m is None else gamma_m
    seq = carr_purcell_duty(duty, n_reps=1, amplitude=amplitude)

    def t2_of(eps):
        return estimate_t2(paper_fixture(eps, gamma_m), seq, n_reps_max).t2

    t_lo, t_hi = t2_of(lo), t2_of(hi)
    if not (t_hi <= target_t2 <= t_lo):
        raise ValueError(
            f"target T2 {target_t2:g} outside the bracketed range [{t_hi:g}, {t_lo:g}]"
        )
    a, b = math.log(lo), math.log(hi)
    for _ in range(200):
        mid = (a + b) / 2
        if t2_of(math.exp(mid)) > target_t2:
            a = mid
        else:
            b = mid
        if b - a < 1e-9:
            break
    return round_sig(math.exp((a + b) / 2), digits)
