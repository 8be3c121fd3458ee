"""Qubit dephasing dynamics under a Markovian fluctuator.

Bloch vectors conditioned on each fluctuator state are stacked into a
3N-vector ``Z`` obeying ``dZ/dt = L(t) Z`` with

    L = (+)_k M_k + Gamma (x) I_3,

where ``M_k`` generates rotations about ``(a_x, a_y, eta_k)``.  For
piecewise-constant controls the propagator is a time-ordered product of
matrix exponentials, which is contracted back to a 3x3 channel acting on
the noise-averaged Bloch vector.

Time is measured in units where the maximum control amplitude is 1, so a
pi rotation at full amplitude takes ``pi`` time units.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.linalg import expm

from .fluctuator import FluctuatorModel, stationary_distribution

TIME_UNIT = "tau_pi_over_pi"
TAU_PI = math.pi

# so(3) generators: d zeta/dt = omega x zeta  ->  omega_x JX + omega_y JY + omega_z JZ
JX = np.array([[0.0, 0.0, 0.0], [0.0, 0.0, -1.0], [0.0, 1.0, 0.0]])
JY = np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 0.0], [-1.0, 0.0, 0.0]])
JZ = np.array([[0.0, -1.0, 0.0], [1.0, 0.0, 0.0], [0.0, 0.0, 0.0]])
for _j in (JX, JY, JZ):
    _j.setflags(write=False)

_AMPLITUDE_SLACK = 1e-12


@dataclass(frozen=True)
class Pulse:
    """Constant control ``A (cos phi, sin phi)`` for ``duration``, then ``gap`` of silence."""

    amplitude: float
    phase: float
    duration: float
    gap: float = 0.0

    def __post_init__(self):
        for name in ("amplitude", "phase", "duration", "gap"):
            if not math.isfinite(getattr(self, name)):
                raise ValueError(f"pulse {name} must be finite")
        if not 0.0 <= self.amplitude <= 1.0:
            raise ValueError(f"amplitude {self.amplitude} outside [0, 1]")
        if not self.duration > 0:
            raise ValueError("pulse duration must be positive")
        if self.gap < 0:
            raise ValueError("pulse gap must be nonnegative")
        phase = math.fmod(float(self.phase), 2 * math.pi)
        if phase < 0:
            phase += 2 * math.pi
        if phase >= 2 * math.pi:
            phase = 0.0
        object.__setattr__(self, "phase", phase)

    @property
    def a_x(self) -> float:
        return self.amplitude * math.cos(self.phase)

    @property
    def a_y(self) -> float:
        return self.amplitude * math.sin(self.phase)


@dataclass(frozen=True)
class PulseSequence:
    pulses: tuple

    def __post_init__(self):
        pulses = tuple(self.pulses)
        if not all(isinstance(p, Pulse) for p in pulses):
            raise TypeError("pulses must be Pulse instances")
        object.__setattr__(self, "pulses", pulses)

    def __len__(self):
        return len(self.pulses)

    @property
    def n_pulses(self) -> int:
        return len(self.pulses)

    @property
    def total_time(self) -> float:
        return math.fsum(p.duration + p.gap for p in self.pulses)

    @property
    def gap_time(self) -> float:
        return math.fsum(p.gap for p in self.pulses)

    @property
    def quiescent_time(self) -> float:
        """Time with zero control: gaps plus zero-amplitude pulses."""
        return self.gap_time + math.fsum(p.duration for p in self.pulses if p.amplitude == 0)

    def satisfies_duty(self, rtol: float = 1e-12) -> bool:
        """At least half of the sequence is quiescent."""
        return self.quiescent_time >= self.total_time / 2 * (1 - rtol)

    def segments(self):
        """(a_x, a_y, dt) for every nonzero-length constant stretch, in time order."""
        out = []
        for p in self.pulses:
            out.append((p.a_x, p.a_y, p.duration))
            if p.gap > 0:
                out.append((0.0, 0.0, p.gap))
        return out

    def reversed(self) -> "PulseSequence":
        """Time-reversed copy (gap-before-pulse structure is realized by shifting)."""
        segs = self.segments()[::-1]
        return sequence_from_segments(segs)

    def to_dict(self) -> dict:
        return {
            "time_unit": TIME_UNIT,
            "pulses": [
                {"amplitude": p.amplitude, "phase": p.phase, "duration": p.duration, "gap": p.gap}
                for p in self.pulses
            ],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PulseSequence":
        unit = d.get("time_unit", TIME_UNIT)
        if unit != TIME_UNIT:
            raise ValueError(f"unsupported time unit {unit!r}")
        return cls(
            tuple(
                Pulse(float(p["amplitude"]), float(p["phase"]), float(p["duration"]), float(p.get("gap", 0.0)))
                for p in d["pulses"]
            )
        )

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "PulseSequence":
        return cls.from_dict(json.loads(Path(path).read_text()))


def sequence_from_segments(segments: Iterable[tuple]) -> PulseSequence:
    """Pack (a_x, a_y, dt) stretches into a PulseSequence.

    Zero-control stretches following a pulse become its gap; a leading or
    repeated silent stretch becomes a zero-amplitude pulse.
    """
    pulses = []
    for ax, ay, dt in segments:
        if dt <= 0:
            continue
        amp = math.hypot(ax, ay)
        if amp == 0 and pulses and pulses[-1].amplitude > 0:
            last = pulses[-1]
            pulses[-1] = Pulse(last.amplitude, last.phase, last.duration, last.gap + dt)
        elif amp == 0 and pulses and pulses[-1].amplitude == 0:
            last = pulses[-1]
            pulses[-1] = Pulse(0.0, 0.0, last.duration + dt, 0.0)
        else:
            pulses.append(Pulse(min(amp, 1.0), math.atan2(ay, ax), dt, 0.0))
    return PulseSequence(tuple(pulses))


@dataclass(frozen=True)
class QubitChannel:
    """Linear map from initial to final Bloch vectors."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=float)
        if m.shape != (3, 3) or not np.all(np.isfinite(m)):
            raise ValueError("channel must be a finite 3x3 matrix")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "QubitChannel":
        return cls(np.eye(3))

    def singular_values(self) -> np.ndarray:
        return np.linalg.svd(self.matrix, compute_uv=False)

    def is_contractive(self, atol: float = 1e-10) -> bool:
        return bool(self.singular_values()[0] <= 1 + atol)

    def __matmul__(self, other: "QubitChannel") -> "QubitChannel":
        return QubitChannel(self.matrix @ other.matrix)

    def to_list(self) -> list:
        return [float(x) for x in self.matrix.reshape(-1)]


@dataclass(frozen=True)
class Liouvillian:
    matrix: np.ndarray

    @property
    def n_states(self) -> int:
        return self.matrix.shape[0] // 3

    def block(self, k: int, j: int) -> np.ndarray:
        return self.matrix[3 * k : 3 * k + 3, 3 * j : 3 * j + 3]


def rotation_generator(eta_k: float, a_x: float, a_y: float) -> np.ndarray:
    """Generator of ``d zeta/dt = (a_x, a_y, eta_k) x zeta``."""
    return a_x * JX + a_y * JY + eta_k * JZ


def rotation(axis_rate, t: float) -> np.ndarray:
    """exp(t (w . J)) for a rotation-rate vector ``w`` (Rodrigues' formula)."""
    w = np.asarray(axis_rate, dtype=float)
    theta = float(np.linalg.norm(w)) * t
    if theta == 0.0:
        return np.eye(3)
    n = w / np.linalg.norm(w)
    k = n[0] * JX + n[1] * JY + n[2] * JZ
    return np.eye(3) + math.sin(theta) * k + (1 - math.cos(theta)) * (k @ k)


class _Generators:
    """Drift and control parts of the stacked Liouvillian for one fluctuator."""

    def __init__(self, fluct: FluctuatorModel):
        n = fluct.n
        self.n = n
        eye_n = np.eye(n)
        self.drift = np.kron(np.diag(fluct.eta), JZ) + np.kron(fluct.gamma.entries, np.eye(3))
        self.kx = np.kron(eye_n, JX)
        self.ky = np.kron(eye_n, JY)
        self.tie = np.kron(np.ones((1, n)), np.eye(3))  # 3 x 3N

    def generator(self, a_x, a_y):
        a_x = np.asarray(a_x, dtype=float)[..., None, None]
        a_y = np.asarray(a_y, dtype=float)[..., None, None]
        return self.drift + a_x * self.kx + a_y * self.ky

    def propagators(self, a_x, a_y, dt):
        dt = np.asarray(dt, dtype=float)[..., None, None]
        return expm(self.generator(a_x, a_y) * dt)

    def contract(self, prop: np.ndarray) -> np.ndarray:
        return self.tie @ prop @ self.tie.T / self.n


def _check_amplitude(a_x, a_y):
    if a_x * a_x + a_y * a_y > 1 + _AMPLITUDE_SLACK:
        raise ValueError(f"control amplitude {math.hypot(a_x, a_y)} exceeds 1")


def build_liouvillian(fluct: FluctuatorModel, a_x: float, a_y: float) -> Liouvillian:
    _check_amplitude(a_x, a_y)
    return Liouvillian(_Generators(fluct).generator(a_x, a_y))


def _ordered_product(mats: np.ndarray) -> np.ndarray:
    """mats[-1] @ ... @ mats[0]."""
    out = mats[0]
    for m in mats[1:]:
        out = m @ out
    return out


def channel_of_segments(fluct: FluctuatorModel, segments: Sequence[tuple]) -> QubitChannel:
    gens = _Generators(fluct)
    segments = [s for s in segments if s[2] > 0]
    if not segments:
        return QubitChannel.identity()
    for ax, ay, _ in segments:
        _check_amplitude(ax, ay)
    ax, ay, dt = (np.array(col, dtype=float) for col in zip(*segments))
    props = gens.propagators(ax, ay, dt)
    return QubitChannel(gens.contract(_ordered_product(props)))


def channel_of_sequence(fluct: FluctuatorModel, seq: PulseSequence) -> QubitChannel:
    """Noise-averaged Bloch channel of a piecewise-constant pulse sequence."""
    stationary_distribution(fluct.gamma)
    return channel_of_segments(fluct, seq.segments())


def free_evolution(fluct: FluctuatorModel, t: float) -> np.ndarray:
    """3N x 3N propagator for zero control over time ``t``."""
    return _Generators(fluct).propagators(0.0, 0.0, t)


def apply_channel(channel: QubitChannel, zeta) -> np.ndarray:
    zeta = np.asarray(zeta, dtype=float)
    if zeta.shape != (3,):
        raise ValueError("Bloch vector must have 3 components")
    if np.linalg.norm(zeta) > 1 + 1e-12:
        raise ValueError("Bloch vector norm exceeds 1")
    return channel.matrix @ zeta


def repeat_channel(channel: QubitChannel, n: int) -> QubitChannel:
    if int(n) != n or n < 0:
        raise ValueError("repetition count must be a nonnegative integer")
    return QubitChannel(np.linalg.matrix_power(channel.matrix, int(n)))


def _rotations(omega: np.ndarray, t: np.ndarray) -> np.ndarray:
    """Batched Rodrigues rotations exp(t (omega . J)) for omega of shape (m, 3)."""
    norm = np.linalg.norm(omega, axis=1)
    theta = norm * t
    safe = np.where(norm > 0, norm, 1.0)
    n = omega / safe[:, None]
    k = n[:, 0, None, None] * JX + n[:, 1, None, None] * JY + n[:, 2, None, None] * JZ
    s = np.sin(theta)[:, None, None]
    c = (1 - np.cos(theta))[:, None, None]
    return np.eye(3) + s * k + c * (k @ k)


def simulate_monte_carlo(
    fluct: FluctuatorModel,
    seq: PulseSequence,
    n_traj: int,
    seed: int = 0,
    chunk: int = 4096,
):
    """Channel estimate from sampled telegraph trajectories of the fluctuator.

    Each trajectory starts in a uniformly random noise state, hops with
    exponential waiting times, and accumulates the exact rotation on every
    stretch of constant noise and control.  Returns ``(channel, stderr)``
    where ``stderr`` is the per-entry standard error of the mean.
    """
    if int(n_traj) != n_traj or n_traj < 100:
        raise ValueError("n_traj must be an integer >= 100")
    gamma = fluct.gamma.entries
    stationary_distribution(fluct.gamma)
    n = fluct.n
    out_rates = -np.diag(gamma).copy()
    if np.any(out_rates < 0):
        raise ValueError("rate matrix has negative escape rates")
    jump = np.zeros((n, n))  # jump[k] = distribution of next state given current k
    for k in range(n):
        if out_rates[k] > 0:
            col = gamma[:, k].copy()
            col[k] = 0.0
            jump[k] = np.cumsum(col / out_rates[k])
    segments = seq.segments()
    rng = np.random.default_rng(seed)

    total = np.zeros((3, 3))
    total_sq = np.zeros((3, 3))
    done = 0
    while done < n_traj:
        m = min(chunk, n_traj - done)
        mats = _simulate_chunk(rng, m, fluct.eta, out_rates, jump, segments)
        total += mats.sum(axis=0)
        total_sq += (mats**2).sum(axis=0)
        done += m
    mean = total / n_traj
    var = np.maximum(total_sq / n_traj - mean**2, 0.0) * n_traj / (n_traj - 1)
    return QubitChannel(mean), np.sqrt(var / n_traj)


def _simulate_chunk(rng, m, eta, out_rates, jump, segments):
    n = eta.size
    state = rng.integers(0, n, size=m)
    mats = np.broadcast_to(np.eye(3), (m, 3, 3)).copy()
    for ax, ay, dt in segments:
        remaining = np.full(m, float(dt))
        active = np.arange(m)
        while active.size:
            rates = out_rates[state[active]]
            with np.errstate(divide="ignore"):
                wait = np.where(rates > 0, rng.exponential(1.0, active.size) / np.where(rates > 0, rates, 1.0), np.inf)
            step = np.minimum(wait, remaining[active])
            omega = np.empty((active.size, 3))
            omega[:, 0] = ax
            omega[:, 1] = ay
            omega[:, 2] = eta[state[active]]
            mats[active] = _rotations(omega, step) @ mats[active]
            remaining[active] -= step
            hopped = wait < remaining[active] + step  # jump happened inside this stretch
            hopped &= remaining[active] > 0
            idx = active[hopped]
            if idx.size:
                u = rng.random(idx.size)
                cdf = jump[state[idx]]
                state[idx] = np.minimum((u[:, None] >= cdf).sum(axis=1), n - 1)
            active = active[remaining[active] > 0]
    return mats
