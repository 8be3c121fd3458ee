"""Symmetric N-state Markovian fluctuators.

The fluctuator occupies state ``k`` with noise amplitude ``eta[k]`` and hops
between states according to ``dp/dt = Gamma p``.  Rate matrices here are
symmetric with nonnegative off-diagonals and zero column sums, so the uniform
vector is always stationary.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.optimize import least_squares

from .spectral import LorentzianModel, eval_lorentzian_spectrum

# 4-state 1/omega fluctuator as printed (units of Gamma_m; 3 significant figures)
PRINTED_GAMMA = np.array(
    [
        [-7.69, 7.64, 0.0322, 0.0123],
        [7.64, -8.41, 0.694, 0.0694],
        [0.0322, 0.694, -0.730, 0.00437],
        [0.0123, 0.0694, 0.00437, -0.0861],
    ]
)
PRINTED_GAMMA.setflags(write=False)
ETA_PATTERN = np.array([-0.875, 1.36, -1.36, 0.875])
ETA_PATTERN.setflags(write=False)

FIXTURE_EPSILON = 1e-3
FIXTURE_GAMMA_M = 1.0 / 30.0


class SynthesisError(RuntimeError):
    """No valid rate matrix reproduced the requested eigenvalues."""

    def __init__(self, message, best=None, mismatch=np.inf):
        super().__init__(message)
        self.best = best
        self.mismatch = mismatch


def _column_tolerance(entries):
    return 1e-12 * max(1.0, float(np.max(np.abs(entries))))


@dataclass(frozen=True)
class RateMatrix:
    entries: np.ndarray

    def __post_init__(self):
        g = np.array(self.entries, dtype=float)
        if g.ndim != 2 or g.shape[0] != g.shape[1] or g.shape[0] < 1:
            raise ValueError("rate matrix must be square")
        if not np.all(np.isfinite(g)):
            raise ValueError("rate matrix entries must be finite")
        if not np.array_equal(g, g.T):
            raise ValueError("rate matrix must be exactly symmetric")
        off = g[~np.eye(g.shape[0], dtype=bool)]
        if np.any(off < 0):
            raise ValueError("off-diagonal rates must be nonnegative")
        if np.any(np.abs(g.sum(axis=0)) > _column_tolerance(g)):
            raise ValueError("rate matrix columns must sum to zero")
        g.setflags(write=False)
        object.__setattr__(self, "entries", g)

    @property
    def n(self) -> int:
        return self.entries.shape[0]

    @classmethod
    def from_offdiagonal(cls, offdiag) -> "RateMatrix":
        """Fill the diagonal so that every column sums to zero."""
        g = np.array(offdiag, dtype=float)
        g = (g + g.T) / 2
        np.fill_diagonal(g, 0.0)
        np.fill_diagonal(g, -g.sum(axis=0))
        return cls(g)

    def scaled(self, factor: float) -> "RateMatrix":
        return RateMatrix(self.entries * factor)

    def eigensystem(self):
        """Eigenvalues (descending, top one pinned to 0) and row eigenvectors.

        Each eigenvector's first non-negligible component is made positive.
        """
        w, u = np.linalg.eigh(self.entries)
        order = np.argsort(-w, kind="stable")
        w, u = w[order], u[:, order]
        w[0] = 0.0
        w = np.minimum(w, 0.0)
        v = u.T.copy()
        for row in v:
            nz = np.flatnonzero(np.abs(row) > 1e-12)
            if nz.size and row[nz[0]] < 0:
                row *= -1
        return w, v


def stationary_distribution(gamma: RateMatrix, atol: float = 1e-10) -> np.ndarray:
    """The uniform stationary vector, after checking ``Gamma p = 0``."""
    g = gamma.entries if isinstance(gamma, RateMatrix) else np.asarray(gamma, dtype=float)
    n = g.shape[0]
    p = np.full(n, 1.0 / n)
    resid = np.linalg.norm(g @ p)
    if resid > atol:
        raise ValueError(f"uniform vector is not stationary (|Gamma p| = {resid:.3g})")
    return p


def _laplacian(weights, pairs, n):
    g = np.zeros((n, n))
    g[pairs[0], pairs[1]] = weights
    g[pairs[1], pairs[0]] = weights
    np.fill_diagonal(g, -g.sum(axis=0))
    return g


def synthesize_rate_matrix(
    lambdas,
    seed: int = 0,
    n_starts: int = 16,
    rtol: float = 1e-6,
) -> RateMatrix:
    """Find a valid symmetric rate matrix whose spectrum is ``lambdas``.

    Off-diagonal rates are parameterized as squares ``w**2`` so that every
    candidate is a valid rate matrix; the eigenvalue mismatch is minimized
    by a trust-region least-squares solve from several random starts.
    """
    lam = np.asarray(lambdas, dtype=float)
    if lam.ndim != 1 or lam.size < 2:
        raise ValueError("need at least two eigenvalues")
    if not np.all(np.isfinite(lam)):
        raise ValueError("eigenvalues must be finite")
    if lam[0] != 0.0:
        raise ValueError("lambdas[0] must be exactly 0")
    if np.any(lam > 0):
        raise ValueError("eigenvalues must be <= 0")
    n = lam.size
    target = np.sort(lam)[::-1]
    scale = float(np.max(np.abs(target)))
    if scale == 0.0:
        return RateMatrix(np.zeros((n, n)))
    pairs = np.triu_indices(n, 1)

    def residual(x):
        w, _ = np.linalg.eigh(_laplacian(x**2, pairs, n))
        return (w[::-1] - target) / scale

    def jacobian(x):
        _, u = np.linalg.eigh(_laplacian(x**2, pairs, n))
        u = u[:, ::-1]
        # d lambda_i / d g_ab = -(u_ai - u_bi)^2
        diff = u[pairs[0], :] - u[pairs[1], :]
        return (-(diff**2) * 2 * x[:, None]).T / scale

    best_x, best_err = None, np.inf
    mean_rate = -target.sum() / (2 * len(pairs[0]))
    for k in range(int(n_starts)):
        rng = np.random.default_rng([seed, k])
        x0 = np.sqrt(mean_rate * rng.uniform(0.05, 2.0, len(pairs[0])))
        res = least_squares(residual, x0, jac=jacobian, method="trf", xtol=1e-15, ftol=1e-15,
                            gtol=1e-15, max_nfev=5000)
        err = float(np.max(np.abs(residual(res.x))))
        if err < best_err:
            best_x, best_err = res.x, err
        if best_err <= rtol:
            break
    gamma = RateMatrix(_laplacian(best_x**2, pairs, n))
    if best_err > rtol:
        raise SynthesisError(
            f"eigenvalue mismatch {best_err:.3g} (relative) exceeds {rtol:g}", gamma, best_err
        )
    return gamma


def assemble_noise_vector(gamma: RateMatrix, model: LorentzianModel, eta_os: float = 0.0) -> np.ndarray:
    """Noise amplitudes ``eta = sqrt(N) V^T b + eta_os``."""
    n = gamma.n
    if model.n_states != n:
        raise ValueError("rate matrix and Lorentzian model differ in size")
    if model.bs[0] != 0.0:
        raise ValueError("model.bs[0] must be 0; the static part goes in eta_os")
    w, v = gamma.eigensystem()
    tol = 1e-6 * max(1.0, float(np.max(np.abs(model.lambdas))))
    if np.any(np.abs(w - model.lambdas) > tol):
        raise ValueError("rate-matrix eigenvalues do not match the model ordering")
    b = np.array(model.bs, dtype=float)
    # degenerate clusters: the spectrum only sees the total weight
    start = 0
    while start < n:
        stop = start + 1
        while stop < n and abs(w[stop] - w[start]) <= tol:
            stop += 1
        if stop - start > 1:
            warnings.warn(
                f"degenerate eigenvalue {w[start]:.6g} (x{stop - start}); "
                "pooling its noise weight on one eigenvector",
                RuntimeWarning,
                stacklevel=2,
            )
            total = np.sqrt(np.sum(b[start:stop] ** 2))
            b[start:stop] = 0.0
            b[start] = total
        start = stop
    return np.sqrt(n) * v.T @ b + eta_os


@dataclass(frozen=True)
class FluctuatorModel:
    gamma: RateMatrix
    eta: np.ndarray
    epsilon: float = 1.0
    eta_os: float = 0.0
    gamma_m: float = 1.0

    def __post_init__(self):
        if not isinstance(self.gamma, RateMatrix):
            object.__setattr__(self, "gamma", RateMatrix(self.gamma))
        eta = np.array(self.eta, dtype=float).reshape(-1)
        if eta.size != self.gamma.n:
            raise ValueError("eta length must match the rate matrix")
        if not np.all(np.isfinite(eta)):
            raise ValueError("eta must be finite")
        if not self.epsilon >= 0 or not self.gamma_m > 0:
            raise ValueError("epsilon must be nonnegative and gamma_m positive")
        if not np.isfinite(self.eta_os):
            raise ValueError("eta_os must be finite")
        if abs(eta.mean() - self.eta_os) > 1e-10 * max(1.0, float(np.max(np.abs(eta)))):
            raise ValueError("eta must average to eta_os")
        eta.setflags(write=False)
        object.__setattr__(self, "eta", eta)

    @property
    def n(self) -> int:
        return self.gamma.n

    def with_offset(self, eta_os: float) -> "FluctuatorModel":
        return FluctuatorModel(
            self.gamma, self.eta - self.eta_os + eta_os, self.epsilon, float(eta_os), self.gamma_m
        )

    def with_epsilon(self, epsilon: float) -> "FluctuatorModel":
        if self.epsilon == 0:
            raise ValueError("noise pattern is lost when epsilon = 0")
        pattern = (self.eta - self.eta_os) / self.epsilon
        return FluctuatorModel(self.gamma, self.eta_os + epsilon * pattern, epsilon, self.eta_os, self.gamma_m)

    def transformed_amplitudes(self):
        """Eigenvalues and ``b = V eta / sqrt(N)`` (signed)."""
        w, v = self.gamma.eigensystem()
        return w, v @ self.eta / np.sqrt(self.n)

    def lorentzians(self) -> LorentzianModel:
        w, b = self.transformed_amplitudes()
        b = np.abs(b)
        b[0] = 0.0
        return LorentzianModel(w, b)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "gamma": [float(x) for x in self.gamma.entries.reshape(-1)],
            "eta": [float(x) for x in self.eta],
            "epsilon": float(self.epsilon),
            "eta_os": float(self.eta_os),
            "gamma_m": float(self.gamma_m),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FluctuatorModel":
        n = int(d["n"])
        gamma = np.asarray(d["gamma"], dtype=float).reshape(n, n)
        return cls(RateMatrix(gamma), d["eta"], d.get("epsilon", 1.0), d.get("eta_os", 0.0),
                   d.get("gamma_m", 1.0))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "FluctuatorModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def correlation(fluct: FluctuatorModel, t):
    """<eta(t) eta(0)> in the stationary state, including the static part."""
    w, b = fluct.transformed_amplitudes()
    t = np.abs(np.asarray(t, dtype=float))
    c = np.sum(b**2 * np.exp(w * t[..., None]), axis=-1)
    return float(c) if c.ndim == 0 else c


def spectrum_of_fluctuator(fluct: FluctuatorModel, omega):
    """Finite-frequency power spectrum; the omega = 0 delta is not included."""
    if np.any(np.asarray(omega) == 0):
        raise ValueError("omega = 0 carries the delta-function offset; evaluate it separately")
    return eval_lorentzian_spectrum(fluct.lorentzians(), omega)


def paper_fixture(
    epsilon: float = FIXTURE_EPSILON, gamma_m: float = FIXTURE_GAMMA_M, eta_os: float = 0.0
) -> FluctuatorModel:
    """4-state 1/omega fluctuator with noise pattern (-0.875, 1.36, -1.36, 0.875).

    The printed off-diagonal rates are used verbatim; the diagonal is
    recomputed from them because the rounded printed diagonal leaks
    probability (column sums up to 6.6e-3 Gamma_m).
    """
    if not epsilon >= 0 or not gamma_m > 0:
        raise ValueError("epsilon must be nonnegative and gamma_m positive")
    gamma = RateMatrix.from_offdiagonal(PRINTED_GAMMA * gamma_m)
    return FluctuatorModel(gamma, eta_os + epsilon * ETA_PATTERN, epsilon, eta_os, gamma_m)


def telegraph(rate: float, amplitude: float, eta_os: float = 0.0) -> FluctuatorModel:
    """Symmetric two-state telegraph noise switching at ``rate`` each way."""
    gamma = RateMatrix(np.array([[-rate, rate], [rate, -rate]], dtype=float))
    return FluctuatorModel(gamma, eta_os + amplitude * np.array([1.0, -1.0]), amplitude, eta_os, rate)


def static_offset(eta_os: float) -> FluctuatorModel:
    """Single-state (noiseless switching) model with a constant detuning."""
    return FluctuatorModel(RateMatrix(np.zeros((1, 1))), [eta_os], 1.0, eta_os, 1.0)
