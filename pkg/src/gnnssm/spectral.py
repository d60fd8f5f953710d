"""Spectral tools: eigen/singular values, random orthogonal matrices,
Kronecker-structured Jacobian spectra and Marchenko-Pastur moment checks."""

from dataclasses import dataclass, field
import json
from typing import NamedTuple

import numpy as np

from .rng import derive_seed, make_rng


class SpectralError(ValueError):
    pass


@dataclass(frozen=True)
class SpectrumReport:
    """Multiset of nonnegative values with summary statistics.

    ``values`` are sorted descending.  When ``moduli`` (eigenvalue moduli of a
    possibly nonsymmetric operator) are attached, the edge-of-chaos distance is
    measured on them; otherwise on ``values``.
    """

    values: np.ndarray
    moduli: np.ndarray = None
    label: str = ""
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_values(cls, values, moduli=None, label="", **meta):
        v = np.sort(np.abs(np.asarray(values, dtype=np.float64).ravel()))[::-1]
        if moduli is not None:
            moduli = np.sort(np.abs(np.asarray(moduli, dtype=np.float64).ravel()))[::-1]
        return cls(v, moduli, label, dict(meta))

    @property
    def mean(self):
        return float(self.values.mean()) if self.values.size else 0.0

    @property
    def variance(self):
        return float(self.values.var()) if self.values.size else 0.0

    @property
    def max(self):
        return float(self.values.max()) if self.values.size else 0.0

    @property
    def median(self):
        src = self.moduli if self.moduli is not None else self.values
        return float(np.median(src)) if src.size else 0.0

    @property
    def eoc_distance(self):
        src = self.moduli if self.moduli is not None else self.values
        return edge_of_chaos_distance(src)

    def to_dict(self):
        out = {
            "label": self.label,
            "values": self.values.tolist(),
            "mean": self.mean,
            "variance": self.variance,
            "max": self.max,
            "eoc_distance": self.eoc_distance,
        }
        if self.moduli is not None:
            out["moduli"] = self.moduli.tolist()
        if self.meta:
            out["meta"] = self.meta
        return out

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_csv(self):
        rows = ["value"] + [repr(float(v)) for v in self.values]
        return "\n".join(rows) + "\n"

    @classmethod
    def from_json(cls, text):
        d = json.loads(text)
        moduli = np.asarray(d["moduli"]) if "moduli" in d else None
        return cls(np.asarray(d["values"], dtype=np.float64), moduli, d.get("label", ""), d.get("meta", {}))


def edge_of_chaos_distance(values):
    """Mean of ``| |v| - 1 |`` over ``values``."""
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        return 0.0
    return float(np.mean(np.abs(np.abs(values) - 1.0)))


def symmetric_eigenvalues(m, tol=1e-10):
    """Real eigenvalues of a symmetric matrix, sorted descending."""
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise SpectralError(f"expected a square matrix, got shape {m.shape}")
    if not np.allclose(m, m.T, atol=tol, rtol=0.0):
        raise SpectralError("matrix is not symmetric")
    return np.linalg.eigvalsh(m)[::-1].copy()


def singular_values(m):
    """Singular values sorted descending."""
    return np.linalg.svd(np.atleast_2d(np.asarray(m, dtype=np.float64)), compute_uv=False)


def eigenvalue_moduli(m):
    """Moduli of the (possibly complex) eigenvalues, sorted descending."""
    return np.sort(np.abs(np.linalg.eigvals(np.asarray(m, dtype=np.float64))))[::-1]


def spectral_radius(m):
    return float(eigenvalue_moduli(m)[0])


def random_orthogonal(d, seed):
    """Haar-distributed orthogonal ``d x d`` matrix (sign-fixed QR of a Gaussian)."""
    if d < 1:
        raise SpectralError("d must be >= 1")
    g = make_rng(seed).standard_normal((d, d))
    q, r = np.linalg.qr(g)
    s = np.sign(np.diag(r))
    s[s == 0] = 1.0
    return q * s


def scale_spectral_radius(m, rho):
    """Rescale ``m`` so that its spectral radius (max |eigenvalue|) equals ``rho``."""
    if rho < 0:
        raise SpectralError("rho must be nonnegative")
    m = np.asarray(m, dtype=np.float64)
    r = spectral_radius(m)
    if r == 0.0:
        raise SpectralError("cannot rescale a matrix with zero spectral radius")
    return m * (rho / r)


def kron_jacobian_spectrum(adj_eigs, w):
    """Squared singular values of ``W^T kron Ã`` from the factor spectra.

    These are all products ``lambda_i**2 * mu_j`` with ``mu_j`` the eigenvalues
    of ``W W^T`` (equivalently ``W^T W``; only ``min`` of the two dimensions
    matter once padded with zeros to the column count of ``W``).
    """
    lam = np.asarray(adj_eigs, dtype=np.float64).ravel()
    if lam.size and np.abs(lam).max() > 1.0 + 1e-10:
        raise SpectralError("adjacency eigenvalues must have modulus <= 1")
    w = np.atleast_2d(np.asarray(w, dtype=np.float64))
    d_out = w.shape[1]
    s = singular_values(w)
    mu = np.zeros(d_out)
    mu[: min(d_out, s.size)] = s[:d_out] ** 2
    gamma = np.outer(lam**2, mu).ravel()
    return SpectrumReport.from_values(gamma, label="kron_squared_singular_values")


@dataclass(frozen=True)
class MpMoments:
    mean: float
    variance: float
    lam: float
    sigma2: float
    dk: int
    dk1: int


def mp_moments(lam, sigma2, dk, dk1):
    """Mean ``lam^2 sigma^2`` and variance ``lam^4 sigma^4 dk/dk1`` of the squared
    Jacobian singular values under Marchenko-Pastur asymptotics."""
    if sigma2 <= 0:
        raise SpectralError("sigma2 must be positive")
    if dk < 1 or dk1 < 1:
        raise SpectralError("dimensions must be >= 1")
    return MpMoments(
        mean=lam**2 * sigma2,
        variance=lam**4 * sigma2**2 * dk / dk1,
        lam=lam,
        sigma2=sigma2,
        dk=dk,
        dk1=dk1,
    )


class MpEstimate(NamedTuple):
    mean: float
    variance: float
    mean_se: float
    variance_se: float
    between_trial_mean_se: float
    between_trial_variance_se: float
    n_values: int


def mp_empirical_check(lam, sigma2, dk, dk1, trials, seed):
    """Monte Carlo mean and variance of ``gamma = lam^2 mu``.

    ``W`` is ``dk1 x dk`` (``dk1`` = input width) with i.i.d. entries
    ``N(0, sigma2 / dk1)``; ``mu`` ranges over the ``dk`` eigenvalues of
    ``W^T W``.  The ``gamma`` values of all trials are pooled; ``mean_se`` and
    ``variance_se`` are the usual sample standard errors of the pooled mean and
    variance.  The between-trial standard errors (spread of per-trial
    statistics) are returned as well; they are much smaller because
    eigenvalues of one matrix are strongly anti-correlated.
    """
    if trials < 1:
        raise SpectralError("trials must be >= 1")
    if dk < 1 or dk1 < 1:
        raise SpectralError("dimensions must be >= 1")
    scale = np.sqrt(sigma2 / dk1)
    pooled = []
    per_mean, per_var = [], []
    for t in range(trials):
        rng = make_rng(derive_seed(seed, ("mp", t)))
        w = rng.standard_normal((dk1, dk)) * scale
        mu = np.linalg.eigvalsh(w.T @ w)
        gamma = lam**2 * np.clip(mu, 0.0, None)
        pooled.append(gamma)
        per_mean.append(gamma.mean())
        per_var.append(gamma.var())
    g = np.concatenate(pooled)
    n = g.size
    mean = float(g.mean())
    centered = g - mean
    var = float(np.mean(centered**2))
    m4 = float(np.mean(centered**4))
    mean_se = float(np.sqrt(var / n))
    var_se = float(np.sqrt(max(m4 - var**2, 0.0) / n))
    if trials > 1:
        bt_mean = float(np.std(per_mean, ddof=1) / np.sqrt(trials))
        bt_var = float(np.std(per_var, ddof=1) / np.sqrt(trials))
    else:
        bt_mean = bt_var = float("nan")
    return MpEstimate(mean, var, mean_se, var_se, bt_mean, bt_var, n)


class NormEstimate(NamedTuple):
    value: float
    converged: bool
    iterations: int
    warning: str = ""

    def __float__(self):
        return float(self.value)


def operator_norm(apply, dim, tol=1e-8, max_iter=1000, adjoint=None, seed=0, restarts=3):
    """Power-iteration estimate of the largest singular value of a linear map.

    With ``adjoint`` the iteration runs on ``A^T A`` and returns the spectral
    norm for any map.  Without it, ``apply`` is iterated directly, which gives
    the spectral norm for symmetric (normal) maps and the spectral radius
    otherwise.  The best of ``restarts`` seeded starting vectors is kept.
    """
    best = None
    for r in range(restarts):
        v = make_rng(derive_seed(seed, ("power", r))).standard_normal(dim)
        v /= np.linalg.norm(v)
        est = 0.0
        converged = False
        it = 0
        for it in range(1, max_iter + 1):
            w = apply(v)
            if adjoint is not None:
                w = adjoint(w)
            nw = float(np.linalg.norm(w))
            if nw == 0.0:
                est, converged = 0.0, True
                break
            new = np.sqrt(nw) if adjoint is not None else nw
            w /= nw
            if abs(new - est) <= tol * max(abs(new), 1e-300):
                est, converged = new, True
                v = w
                break
            est, v = new, w
        cand = NormEstimate(
            float(est),
            converged,
            it,
            "" if converged else f"power iteration did not converge in {max_iter} steps",
        )
        if best is None or cand.value > best.value:
            best = cand
    return best
