"""Over-smoothing and over-squashing instrumentation.

Dirichlet energy and the mean-deviation smoothness measure, per-layer
propagation traces, empirical Lipschitz constants and the energy bound that
follows from them, Jacobian spectra and node-pair sensitivity tables.
"""

from dataclasses import dataclass, field
import csv
import io
import json

import numpy as np

from .graph import bfs_distances, laplacian, UNREACHABLE
from .nn import ConfigError, forward, layer_jacobian, layer_jvp, layer_step, layer_vjp, unvec, vec
from .spectral import NormEstimate, SpectrumReport, eigenvalue_moduli, operator_norm, singular_values
from .train import node_sensitivity


def dirichlet_energy(g, h, method="edges"):
    """Unnormalized Dirichlet energy ``sum_{(u,v) in E} ||h_u - h_v||^2``.

    ``method="trace"`` evaluates ``tr(H^T L H)`` with the dense Laplacian
    instead (small graphs; used as a cross-check).
    """
    h = np.asarray(h, dtype=np.float64)
    if h.ndim == 1:
        h = h[:, None]
    if method == "trace":
        return float(np.trace(h.T @ laplacian(g) @ h))
    if method != "edges":
        raise ValueError(f"unknown method {method!r}")
    if g.num_edges == 0:
        return 0.0
    diff = h[g.edges[:, 0]] - h[g.edges[:, 1]]
    return float(np.sum(diff * diff))


def mu_smoothness(h):
    """``||H - 1 gamma||_F`` with ``gamma`` the mean row of ``H``."""
    h = np.asarray(h, dtype=np.float64)
    if h.ndim == 1:
        h = h[:, None]
    return float(np.linalg.norm(h - h.mean(axis=0, keepdims=True)))


@dataclass
class PropagationTrace:
    dirichlet_energy: np.ndarray
    mu_smoothness: np.ndarray
    mean_norm: np.ndarray
    max_norm: np.ndarray
    label: str = ""

    def __len__(self):
        return len(self.dirichlet_energy)

    @property
    def energy_ratio(self):
        """Final over initial Dirichlet energy (``nan`` if the start is 0)."""
        e0 = self.dirichlet_energy[0]
        return float(self.dirichlet_energy[-1] / e0) if e0 > 0 else float("nan")

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "dirichlet_energy", "mu_smoothness", "mean_feature_norm", "max_feature_norm"])
        for k in range(len(self)):
            w.writerow([k] + [repr(float(s[k])) for s in
                              (self.dirichlet_energy, self.mu_smoothness, self.mean_norm, self.max_norm)])
        return buf.getvalue()

    def to_json(self):
        return json.dumps({
            "label": self.label,
            "dirichlet_energy": self.dirichlet_energy.tolist(),
            "mu_smoothness": self.mu_smoothness.tolist(),
            "mean_feature_norm": self.mean_norm.tolist(),
            "max_feature_norm": self.max_norm.tolist(),
            "energy_ratio": self.energy_ratio,
        }, indent=2, sort_keys=True)


def trace_states(m, g, x, depth=None):
    """States ``[H^(0), ..., H^(K)]``; a shared-weight model may be iterated past its depth."""
    depth = m.cfg.depth if depth is None else depth
    if depth <= m.cfg.depth:
        _, states = _model_states(m, g, x)
        return states[: depth + 1]
    if not m.cfg.share_weights or (m.cfg.residual == "ssm" and not m.cfg.ssm.shared):
        raise ConfigError(f"model has {m.cfg.depth} layers; iterating to {depth} needs shared layers")
    if m.cfg.coupling == "khop":
        raise ConfigError("k-hop layers are tied to their hop index and cannot be iterated")
    _, states = _model_states(m, g, x)
    h = states[-1]
    for _ in range(m.cfg.depth, depth):
        h, _ = layer_step(m, g, m.cfg.depth - 1, h)
        states.append(h)
    return states


def _model_states(m, g, x):
    c = forward(m, g, x)
    return c.output, list(c.states)


def propagate_trace(m, g, x, depth=None, label=""):
    """Per-layer energy, smoothness and feature-norm series for ``k = 0..K``."""
    states = trace_states(m, g, x, depth)
    energy = np.array([dirichlet_energy(g, h) for h in states])
    mu = np.array([mu_smoothness(h) for h in states])
    norms = [np.linalg.norm(h, axis=1) for h in states]
    return PropagationTrace(
        energy,
        mu,
        np.array([n.mean() for n in norms]),
        np.array([n.max() for n in norms]),
        label,
    )


# --------------------------------------------------------------------------
# Lipschitz estimates and the energy bound


EXACT_NORM_SIZE = 256


def layer_operator_norm(m, g, i, h, seed=0, tol=1e-8, max_iter=1000):
    """Spectral norm of layer ``i``'s Jacobian at ``h``.

    Small layers (``n d <= EXACT_NORM_SIZE``) use an SVD of the explicit
    Jacobian; larger ones use matrix-free power iteration.
    """
    n, d = h.shape
    if n * d <= EXACT_NORM_SIZE:
        return NormEstimate(float(singular_values(layer_jacobian(m, i, g, h))[0]), True, 0)
    _, cache = layer_step(m, g, i, h)

    def apply(v):
        return vec(layer_jvp(m, g, i, h, cache, unvec(v, n, d)))

    def adjoint(w):
        return vec(layer_vjp(m, g, i, h, cache, unvec(w, n, d))[0])

    return operator_norm(apply, n * d, tol=tol, max_iter=max_iter, adjoint=adjoint, seed=seed)


def empirical_lipschitz(m, g, i, h, n_samples=20, seed=0):
    """Empirical ``L`` of layer ``i``: max Jacobian norm over states ``t h``, ``t in (0, 1]``.

    Sampling the segment from the zero fixed point to the actual state is
    what the mean-value bound ``||f(h)|| <= L ||h||`` needs.
    """
    ts = np.linspace(1.0, 1.0 / n_samples, n_samples)
    return max(layer_operator_norm(m, g, i, t * h, seed=seed).value for t in ts)


@dataclass
class EnergyBoundReport:
    depth: np.ndarray
    energy: np.ndarray
    bound: np.ndarray
    lipschitz: np.ndarray
    num_edges: int
    input_norm: float

    @property
    def violations(self):
        return np.flatnonzero(self.energy > self.bound * (1 + 1e-12))

    @property
    def ok(self):
        return self.violations.size == 0

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["layer", "energy", "bound", "empirical_L", "violated"])
        for k in range(len(self.depth)):
            lk = self.lipschitz[k - 1] if k > 0 else float("nan")
            w.writerow([int(self.depth[k]), repr(float(self.energy[k])), repr(float(self.bound[k])),
                        repr(float(lk)), int(self.energy[k] > self.bound[k] * (1 + 1e-12))])
        return buf.getvalue()


def energy_bound_check(m, g, x, n_samples=20, seed=0, depth=None):
    """Compare ``E(H^(k))`` with ``2|E| prod_{j<=k} L_j^2 ||H^(0)||_F^2`` for every ``k``.

    ``L_j`` is the empirical Lipschitz constant of layer ``j`` from
    :func:`empirical_lipschitz`.
    """
    states = trace_states(m, g, x, depth)
    k_max = len(states) - 1
    lips = np.array([
        empirical_lipschitz(m, g, min(j, m.cfg.depth - 1), states[j], n_samples, seed) for j in range(k_max)
    ])
    h0 = float(np.linalg.norm(states[0]))
    prod = np.concatenate([[1.0], np.cumprod(lips**2)])
    bound = 2.0 * g.num_edges * prod * h0**2
    energy = np.array([dirichlet_energy(g, h) for h in states])
    return EnergyBoundReport(np.arange(k_max + 1), energy, bound, lips, g.num_edges, h0)


# --------------------------------------------------------------------------
# Spectra and sensitivities


def jacobian_spectrum_report(m, g, h, layer_index):
    """Singular values and eigenvalue moduli of one layer's explicit Jacobian.

    ``values`` are singular values; the edge-of-chaos distance is measured on
    the eigenvalue moduli.
    """
    jac = layer_jacobian(m, layer_index, g, h)
    return SpectrumReport.from_values(
        singular_values(jac),
        moduli=eigenvalue_moduli(jac),
        label=f"layer{layer_index}",
        coupling=m.cfg.coupling,
        residual=m.cfg.residual,
    )


@dataclass
class SensitivityRow:
    u: int
    v: int
    hops: float
    measured: float
    bound: float

    @property
    def flagged(self):
        return bool(np.isfinite(self.bound) and self.measured > self.bound * (1 + 1e-9) + 1e-300)


@dataclass
class SensitivityTable:
    rows: list = field(default_factory=list)

    @property
    def violations(self):
        return [r for r in self.rows if r.flagged]

    def to_csv(self):
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["u", "v", "hops", "measured", "bound", "flagged"])
        for r in self.rows:
            hops = "inf" if r.hops == UNREACHABLE else int(r.hops)
            w.writerow([r.u, r.v, hops, repr(r.measured), repr(r.bound), int(r.flagged)])
        return buf.getvalue()

    def to_json(self):
        return json.dumps([
            {"u": r.u, "v": r.v, "hops": None if r.hops == UNREACHABLE else int(r.hops),
             "measured": r.measured, "bound": r.bound, "flagged": r.flagged}
            for r in self.rows
        ], indent=2)


def sensitivity_report(m, g, x, pairs):
    """One row per ``(u, v)``: hop distance, measured node-pair Jacobian norm and bound."""
    table = SensitivityTable()
    for u, v in pairs:
        s = node_sensitivity(m, g, x, u, v)
        hops = bfs_distances(g, u)[v]
        table.rows.append(SensitivityRow(int(u), int(v), float(hops), s.measured, s.bound))
    return table
