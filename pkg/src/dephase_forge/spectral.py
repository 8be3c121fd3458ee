"""Target noise spectra and least-squares fitting of Lorentzian mixtures.

A Markovian fluctuator with relaxation rates ``-lambda_j`` and transformed
amplitudes ``b_j`` has the power spectrum

    S(omega) = sum_j -2 b_j**2 lambda_j / (lambda_j**2 + omega**2)

The zero eigenvalue (``lambda_0 = 0``) only feeds the delta-function at
omega = 0, which is carried separately as a static offset.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
from scipy.optimize import minimize

SPECTRUM_KINDS = ("one-over-omega", "lorentzian-reference", "tabulated")


@dataclass(frozen=True)
class FrequencyBand:
    omega_min: float
    omega_max: float
    n_grid: int = 64

    def __post_init__(self):
        if not (np.isfinite(self.omega_min) and np.isfinite(self.omega_max)):
            raise ValueError("band edges must be finite")
        if self.omega_min <= 0 or self.omega_max <= 0:
            raise ValueError("band edges must be positive")
        if not self.omega_min < self.omega_max:
            raise ValueError(
                f"degenerate band: omega_min={self.omega_min} >= omega_max={self.omega_max}"
            )
        if int(self.n_grid) != self.n_grid or self.n_grid < 16:
            raise ValueError("n_grid must be an integer >= 16")

    @classmethod
    def decades_around(cls, center: float, decades: float = 2.0, n_grid: int = 64):
        half = 10.0 ** (decades / 2)
        return cls(center / half, center * half, n_grid)


def make_log_grid(band: FrequencyBand) -> np.ndarray:
    """Geometric grid from ``omega_min`` to ``omega_max`` inclusive."""
    if not isinstance(band, FrequencyBand):
        band = FrequencyBand(*band)
    grid = np.geomspace(band.omega_min, band.omega_max, int(band.n_grid))
    # geomspace already pins both endpoints; keep them bit-exact anyway
    grid[0], grid[-1] = band.omega_min, band.omega_max
    return grid


@dataclass(frozen=True)
class LorentzianModel:
    """Eigenvalue/amplitude pair defining a sum of zero-mean Lorentzians."""

    lambdas: np.ndarray
    bs: np.ndarray

    def __post_init__(self):
        lam = np.array(self.lambdas, dtype=float)
        b = np.array(self.bs, dtype=float)
        if lam.ndim != 1 or lam.shape != b.shape or lam.size < 1:
            raise ValueError("lambdas and bs must be equal-length 1-d vectors")
        if not (np.all(np.isfinite(lam)) and np.all(np.isfinite(b))):
            raise ValueError("lambdas and bs must be finite")
        if lam[0] != 0.0:
            raise ValueError("lambdas[0] must be exactly 0")
        if np.any(lam > 0):
            raise ValueError("lambdas must be <= 0")
        if np.any(np.diff(lam) > 0):
            raise ValueError("lambdas must be in nonincreasing order")
        if np.any(b < 0):
            raise ValueError("bs must be nonnegative")
        lam.setflags(write=False)
        b.setflags(write=False)
        object.__setattr__(self, "lambdas", lam)
        object.__setattr__(self, "bs", b)

    @property
    def n_states(self) -> int:
        return self.lambdas.size

    def variance(self) -> float:
        """Integrated finite-frequency weight, (1/2pi) int S domega."""
        return float(np.sum(self.bs[1:] ** 2))

    @classmethod
    def from_rates(cls, rates: Sequence[float], amplitudes: Sequence[float]):
        """Build from positive relaxation rates ``-lambda`` (any order)."""
        rates = np.asarray(rates, dtype=float)
        amplitudes = np.abs(np.asarray(amplitudes, dtype=float))
        order = np.argsort(rates, kind="stable")
        return cls(np.r_[0.0, -rates[order]], np.r_[0.0, amplitudes[order]])


def eval_lorentzian_spectrum(model: LorentzianModel, omega):
    """Evaluate the Lorentzian-mixture spectrum at ``omega`` (scalar or array)."""
    omega = np.asarray(omega, dtype=float)
    active = model.lambdas < 0
    lam = model.lambdas[active]
    b2 = model.bs[active] ** 2
    w = omega[..., None]
    s = np.sum(-2.0 * b2 * lam / (lam**2 + w**2), axis=-1)
    return float(s) if s.ndim == 0 else s


@dataclass(frozen=True)
class TargetSpectrum:
    kind: str
    scale: float = 1.0
    offset_weight: float = 0.0
    table: Optional[tuple] = None
    reference: Optional[LorentzianModel] = None

    def __post_init__(self):
        if self.kind not in SPECTRUM_KINDS:
            raise ValueError(f"unknown spectrum kind {self.kind!r}")
        if not self.scale > 0:
            raise ValueError("scale must be positive")
        if self.offset_weight < 0:
            raise ValueError("offset_weight must be nonnegative")
        if self.kind == "tabulated":
            if self.table is None or len(self.table) < 2:
                raise ValueError("tabulated spectrum needs at least two (omega, S) rows")
            tab = np.array(self.table, dtype=float)
            if tab.ndim != 2 or tab.shape[1] != 2:
                raise ValueError("table rows must be (omega, S) pairs")
            if np.any(tab[:, 0] <= 0) or np.any(np.diff(tab[:, 0]) <= 0):
                raise ValueError("table frequencies must be positive and strictly increasing")
            if np.any(tab[:, 1] <= 0):
                raise ValueError("table spectrum values must be positive")
            object.__setattr__(self, "table", tuple(map(tuple, tab)))
        if self.kind == "lorentzian-reference" and self.reference is None:
            raise ValueError("lorentzian-reference target needs a reference model")

    @property
    def offset(self) -> float:
        """Static offset eta_os realizing the delta-function weight."""
        return float(np.sqrt(self.offset_weight))

    def __call__(self, omega):
        omega = np.asarray(omega, dtype=float)
        if self.kind == "one-over-omega":
            out = self.scale / omega
        elif self.kind == "lorentzian-reference":
            out = self.scale * np.asarray(eval_lorentzian_spectrum(self.reference, omega))
        else:
            tab = np.array(self.table)
            lw, ls = np.log(tab[:, 0]), np.log(tab[:, 1])
            lo = np.log(omega)
            if np.any(lo < lw[0] - 1e-12) or np.any(lo > lw[-1] + 1e-12):
                raise ValueError("frequency outside the tabulated range")
            out = self.scale * np.exp(np.interp(lo, lw, ls))
        return float(out) if np.ndim(out) == 0 else out

    def validate_on(self, band: FrequencyBand) -> None:
        """Reject targets that no Lorentzian mixture can represent on ``band``.

        The spectrum must be positive, nonincreasing and must not fall off
        faster than 1/omega**2 anywhere in the band.
        """
        grid = make_log_grid(band)
        if self.kind == "tabulated":
            tab = np.array(self.table)
            inside = (tab[:, 0] > band.omega_min) & (tab[:, 0] < band.omega_max)
            grid = np.unique(np.r_[grid, tab[inside, 0]])
        s = np.asarray(self(grid))
        if np.any(~np.isfinite(s)) or np.any(s <= 0):
            raise ValueError("target spectrum must be positive on the fit band")
        rtol = 1e-12
        if np.any(s[1:] > s[:-1] * (1 + rtol)):
            raise ValueError("target spectrum must be nonincreasing on the fit band")
        w2s = grid**2 * s
        if np.any(w2s[1:] < w2s[:-1] * (1 - rtol)):
            raise ValueError("target spectrum decays faster than 1/omega^2")


def load_tabulated_spectrum(path, scale: float = 1.0, offset_weight: float = 0.0) -> TargetSpectrum:
    """Read a two-column ``omega,S`` CSV with a one-line header."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)
        rows = [(float(r[0]), float(r[1])) for r in reader if r and r[0].strip()]
    return TargetSpectrum("tabulated", scale=scale, offset_weight=offset_weight, table=tuple(rows))


@dataclass(frozen=True)
class FitReport:
    residual: float
    max_rel_dev: float
    grid: np.ndarray
    iterations: int
    converged: bool
    objective_trace: tuple = field(default=(), repr=False)

    def to_dict(self, model: Optional[LorentzianModel] = None) -> dict:
        out = {
            "residual": float(self.residual),
            "max_rel_dev": float(self.max_rel_dev),
            "converged": bool(self.converged),
            "iterations": int(self.iterations),
            "grid": [float(g) for g in self.grid],
        }
        if model is not None:
            out["lambdas"] = [float(x) for x in model.lambdas]
            out["bs"] = [float(x) for x in model.bs]
        return out

    def to_json(self, model: Optional[LorentzianModel] = None) -> str:
        return json.dumps(self.to_dict(model), indent=2)


def trapezoid_weights(grid: np.ndarray) -> np.ndarray:
    """Trapezoid-rule quadrature weights in omega for a sorted grid."""
    dw = np.diff(grid)
    w = np.zeros_like(grid)
    w[:-1] += dw / 2
    w[1:] += dw / 2
    return w


def fit_objective(model: LorentzianModel, target: TargetSpectrum, grid: np.ndarray) -> float:
    """Weighted L2 distance with W(omega) = 1/omega on ``grid``."""
    r = np.asarray(eval_lorentzian_spectrum(model, grid)) - np.asarray(target(grid))
    return float(np.sum(trapezoid_weights(grid) / grid * r**2))


def max_relative_deviation(model: LorentzianModel, target: TargetSpectrum, grid: np.ndarray) -> float:
    s_t = np.asarray(target(grid))
    return float(np.max(np.abs(np.asarray(eval_lorentzian_spectrum(model, grid)) - s_t) / s_t))


class _FitProblem:
    """Objective in unconstrained coordinates lambda = -exp(u), b = v**2."""

    def __init__(self, target, grid, n_free):
        self.grid = grid
        self.s_t = np.asarray(target(grid))
        self.quad = trapezoid_weights(grid) / grid
        # normalize so optimizer tolerances do not depend on the spectrum's units
        self.norm = float(np.sum(self.quad * self.s_t**2))
        self.quad = self.quad / self.norm
        self.n_free = n_free

    def split(self, p):
        n = self.n_free
        return -np.exp(p[:n]), p[n:] ** 2

    def value_and_grad(self, p):
        n = self.n_free
        lam, b = self.split(p)
        w2 = self.grid[:, None] ** 2
        den = lam**2 + w2
        terms = -2.0 * b**2 * lam / den
        r = terms.sum(axis=1) - self.s_t
        f = np.sum(self.quad * r**2)
        # d(term)/d(lambda) = -2 b^2 (w^2 - lambda^2) / den^2
        dlam = -2.0 * b**2 * (w2 - lam**2) / den**2
        db = -4.0 * b * lam / den
        g_lam = 2.0 * (self.quad * r) @ dlam
        g_b = 2.0 * (self.quad * r) @ db
        grad = np.empty_like(p)
        grad[:n] = g_lam * lam  # dlambda/du = lambda
        grad[n:] = g_b * 2.0 * p[n:]
        return f, grad

    def model(self, p) -> LorentzianModel:
        lam, b = self.split(p)
        return LorentzianModel.from_rates(-lam, b)


def _initial_point(rng, target, band, n_free):
    lo, hi = np.log(band.omega_min / 3), np.log(band.omega_max * 3)
    rates = np.exp(rng.uniform(lo, hi, n_free))
    probe = np.clip(rates, band.omega_min, band.omega_max)
    b2 = np.asarray(target(probe)) * rates / n_free * rng.uniform(0.2, 1.0, n_free)
    return np.r_[np.log(rates), b2**0.25]


def _as_parameters(model: LorentzianModel, n_free: int) -> np.ndarray:
    lam = list(model.lambdas[1:])
    b = list(model.bs[1:])
    fill = max(1e-12, min((-x for x in lam), default=1.0))
    while len(lam) < n_free:
        # pad with negligible Lorentzians so nested fits start from the smaller optimum
        lam.append(-fill * 2.0 ** (len(lam) + 1))
        b.append(1e-8)
    lam, b = np.array(lam[:n_free]), np.array(b[:n_free])
    return np.r_[np.log(-lam), np.sqrt(np.maximum(b, 1e-12))]


def fit_spectrum(
    target: TargetSpectrum,
    n_states: int,
    band: FrequencyBand,
    seed: int = 0,
    n_starts: int = 32,
    initial: Sequence[LorentzianModel] = (),
    maxiter: int = 5000,
) -> tuple[LorentzianModel, FitReport]:
    """Fit an ``n_states`` fluctuator spectrum to ``target`` over ``band``.

    The zero eigenvalue and its amplitude stay pinned at 0; the remaining
    ``n_states - 1`` Lorentzians are fitted from ``n_starts`` random starts
    (plus any ``initial`` models) and the lowest residual wins, ties going
    to the earliest start.
    """
    if int(n_states) != n_states or n_states < 2:
        raise ValueError("n_states must be an integer >= 2")
    target.validate_on(band)
    grid = make_log_grid(band)
    n_free = int(n_states) - 1
    problem = _FitProblem(target, grid, n_free)

    starts = [_as_parameters(m, n_free) for m in initial]
    for k in range(int(n_starts)):
        starts.append(_initial_point(np.random.default_rng([seed, k]), target, band, n_free))
    if not starts:
        raise ValueError("need at least one start")

    best = None
    for p0 in starts:
        trace = [problem.value_and_grad(p0)[0]]
        res = minimize(
            problem.value_and_grad,
            p0,
            jac=True,
            method="L-BFGS-B",
            callback=lambda xk: trace.append(problem.value_and_grad(xk)[0]),
            options={"maxiter": maxiter, "ftol": 1e-15, "gtol": 1e-14},
        )
        if best is None or res.fun < best[0].fun:
            best = (res, trace)
    res, trace = best
    model = problem.model(res.x)
    trace = [t * problem.norm for t in trace]
    report = FitReport(
        residual=fit_objective(model, target, grid),
        max_rel_dev=max_relative_deviation(model, target, grid),
        grid=grid,
        iterations=int(res.nit),
        converged=bool(res.success),
        objective_trace=tuple(float(t) for t in trace),
    )
    return model, report


def write_fit_report(path, model: LorentzianModel, report: FitReport) -> None:
    Path(path).write_text(report.to_json(model) + "\n")
