"""Message-passing layers, the state-space wrapper and model assembly.

A model is ``encoder -> K coupled layers -> readout``.  Each layer computes a
coupling ``F = sigma(P H W)`` (GCN, k-hop) or an attention-weighted
aggregation (GAT) and then updates the node states according to the residual
mode::

    none            H' = F
    ssm             H' = H Lambda^T + F B^T      (row-wise h' = Lambda h + B f)
    plain_residual  H' = H + F

Feature matrices are ``n x d`` with one row per node.  Jacobians use
column-stacking vectorization, ``vec(H)[j * n + i] = H[i, j]``, so that a linear
GCN layer has Jacobian ``kron(W^T, P)``.
"""

from dataclasses import asdict, dataclass, field, replace
import json
import struct

import numpy as np
import scipy.sparse as sp

from .graph import k_hop_adjacency, normalized_adjacency
from .rng import derive_seed, make_rng
from .spectral import random_orthogonal, scale_spectral_radius

ACTIVATIONS = ("relu", "tanh", "identity")
COUPLINGS = ("gcn", "gat", "khop")
RESIDUALS = ("none", "ssm", "plain_residual")
READOUTS = ("node", "graph")
LEAKY_SLOPE = 0.2
MAX_JACOBIAN_SIZE = 2048


class ConfigError(ValueError):
    """Inconsistent model configuration or input dimensions."""


class CapabilityError(RuntimeError):
    """Requested an explicit Jacobian beyond the size guard."""


# --------------------------------------------------------------------------
# Activations


def activate(z, kind):
    if kind == "relu":
        return np.maximum(z, 0.0)
    if kind == "tanh":
        return np.tanh(z)
    if kind == "identity":
        return z
    raise ConfigError(f"unknown activation {kind!r}")


def activate_grad(z, kind):
    """Derivative of the activation at ``z`` (ReLU uses 0 at exactly 0)."""
    if kind == "relu":
        return (z > 0.0).astype(z.dtype)
    if kind == "tanh":
        t = np.tanh(z)
        return 1.0 - t * t
    if kind == "identity":
        return np.ones_like(z)
    raise ConfigError(f"unknown activation {kind!r}")


@dataclass
class LayerParams:
    weight: np.ndarray
    activation: str = "relu"
    a_src: np.ndarray = None
    a_dst: np.ndarray = None

    @property
    def lipschitz(self):
        # relu, tanh and identity are all 1-Lipschitz
        return 1.0


def _check_dims(h, w):
    if h.shape[1] != w.shape[0]:
        raise ConfigError(f"feature width {h.shape[1]} does not match weight rows {w.shape[0]}")


# --------------------------------------------------------------------------
# Couplings (public, single-layer forms)


def gcn_forward(adj, h, p):
    """``sigma(P h W)`` for a normalized adjacency ``adj``."""
    _check_dims(h, p.weight)
    mat = adj.matrix if hasattr(adj, "matrix") else adj
    return activate(mat @ (h @ p.weight), p.activation)


def khop_coupling_forward(g, h, p, hop):
    """``sigma(Ã_k h W)`` aggregating exactly-``hop``-distance neighbours."""
    return gcn_forward(k_hop_adjacency(g, hop), h, p)


def gat_forward(g, h, p):
    """Single-head attention over ``N(u) + {u}`` followed by ``sigma``."""
    _check_dims(h, p.weight)
    f, _ = _gat_forward(_attention_edges(g), h, p)
    return f


def attention_weights(g, h, p):
    """Attention coefficients as a sparse ``n x n`` matrix (rows sum to 1)."""
    edges = _attention_edges(g)
    _, c = _gat_forward(edges, h, p)
    rows, cols, _ = edges
    return sp.csr_matrix((c["alpha"], (rows, cols)), shape=(g.n, g.n))


def ssm_step(lam, b, h, coupling_out):
    """State update ``h'_u = Lambda h_u + B f_u`` for every node ``u``."""
    if lam.shape != (h.shape[1], h.shape[1]) or b.shape[0] != h.shape[1]:
        raise ConfigError("state matrices do not match the feature width")
    if coupling_out.shape[0] != h.shape[0] or coupling_out.shape[1] != b.shape[1]:
        raise ConfigError("coupling output shape does not match the state")
    return h @ lam.T + coupling_out @ b.T


def _attention_edges(g):
    key = "gat_edges"
    if key not in g._cache:
        a = (g.adjacency + sp.identity(g.n, format="csr")).tocsr()
        a.sort_indices()
        rows = np.repeat(np.arange(g.n), np.diff(a.indptr))
        g._cache[key] = (rows, a.indices.copy(), a.indptr.copy())
    return g._cache[key]


def _gat_forward(edges, h, p):
    rows, cols, indptr = edges
    n = h.shape[0]
    y = h @ p.weight
    a_src = p.a_src if p.a_src is not None else np.zeros(y.shape[1])
    a_dst = p.a_dst if p.a_dst is not None else np.zeros(y.shape[1])
    pre = (y @ a_src)[rows] + (y @ a_dst)[cols]
    e = np.where(pre > 0, pre, LEAKY_SLOPE * pre)
    starts = indptr[:-1]
    emax = np.maximum.reduceat(e, starts)
    ex = np.exp(e - emax[rows])
    alpha = ex / np.add.reduceat(ex, starts)[rows]
    att = sp.csr_matrix((alpha, cols, indptr), shape=(n, n))
    z = att @ y
    cache = {"y": y, "pre": pre, "alpha": alpha, "att": att, "z": z, "a_src": a_src, "a_dst": a_dst}
    return activate(z, p.activation), cache


def _gat_backward(edges, h, p, c, df):
    rows, cols, indptr = edges
    n = h.shape[0]
    dz = df * activate_grad(c["z"], p.activation)
    y, alpha = c["y"], c["alpha"]
    dy = c["att"].T @ dz
    dalpha = np.einsum("ij,ij->i", dz[rows], y[cols])
    weighted = np.add.reduceat(alpha * dalpha, indptr[:-1])
    de = alpha * (dalpha - weighted[rows])
    dpre = np.where(c["pre"] > 0, de, LEAKY_SLOPE * de)
    ds_src = np.bincount(rows, weights=dpre, minlength=n)
    ds_dst = np.bincount(cols, weights=dpre, minlength=n)
    dy = dy + np.outer(ds_src, c["a_src"]) + np.outer(ds_dst, c["a_dst"])
    grads = {"weight": h.T @ dy, "a_src": y.T @ ds_src, "a_dst": y.T @ ds_dst}
    return dy @ p.weight.T, grads


# --------------------------------------------------------------------------
# State-space configuration


@dataclass
class SsmConfig:
    """Fixed state matrices: ``Lambda`` (state) and ``B`` (input).

    Both are random orthogonal matrices rescaled to the given spectral radii.
    ``use_input_matrix=False`` replaces ``B`` by the identity (the "without B"
    ablation).
    """

    state_radius: float = 1.0
    input_radius: float = 0.1
    seed: int = 0
    shared: bool = True
    trainable: bool = False
    use_input_matrix: bool = True

    def __post_init__(self):
        if self.state_radius < 0 or self.input_radius < 0:
            raise ConfigError("SSM radii must be nonnegative")

    def materialize(self, d, n_layers=1):
        """List of ``(Lambda, B)`` pairs: one if shared, else one per layer."""
        out = []
        for i in range(1 if self.shared else n_layers):
            lam = _radius_matrix(d, self.state_radius, derive_seed(self.seed, ("Lambda", i)))
            if self.use_input_matrix:
                b = _radius_matrix(d, self.input_radius, derive_seed(self.seed, ("B", i)))
            else:
                b = np.eye(d)
            out.append((lam, b))
        return out


def _radius_matrix(d, radius, seed):
    u = random_orthogonal(d, seed)
    if radius == 0.0:
        return np.zeros((d, d))
    return scale_spectral_radius(u, radius)


# --------------------------------------------------------------------------
# Model


@dataclass
class ModelConfig:
    d_in: int
    d_hidden: int
    d_out: int
    depth: int
    coupling: str = "gcn"
    activation: str = "relu"
    residual: str = "ssm"
    readout: str = "node"
    ssm: SsmConfig = field(default_factory=SsmConfig)
    share_weights: bool = False
    sigma_w: float = 1.0
    weight_radius: float = None
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.ssm, dict):
            self.ssm = SsmConfig(**self.ssm)
        if self.coupling not in COUPLINGS:
            raise ConfigError(f"unknown coupling {self.coupling!r}; expected one of {COUPLINGS}")
        if self.activation not in ACTIVATIONS:
            raise ConfigError(f"unknown activation {self.activation!r}; expected one of {ACTIVATIONS}")
        if self.residual not in RESIDUALS:
            raise ConfigError(f"unknown residual mode {self.residual!r}; expected one of {RESIDUALS}")
        if self.readout not in READOUTS:
            raise ConfigError(f"unknown readout {self.readout!r}; expected one of {READOUTS}")
        if min(self.d_in, self.d_hidden, self.d_out) < 1 or self.depth < 0:
            raise ConfigError("dimensions must be positive and depth nonnegative")

    def to_dict(self):
        return asdict(self)


class Model:
    """Parameters plus configuration.

    ``params`` maps names to arrays::

        encoder.weight (d_in x d_h)   encoder.bias (d_h)
        layer{i}.weight (d_h x d_h)   layer{i}.a_src / a_dst (GAT only)
        ssm{j}.Lambda, ssm{j}.B       (fixed unless cfg.ssm.trainable)
        readout.weight (d_h x d_out)  readout.bias (d_out)
    """

    def __init__(self, cfg, params):
        self.cfg = cfg
        self.params = params

    @property
    def depth(self):
        return self.cfg.depth

    def n_coupling_params(self):
        if self.cfg.depth == 0:
            return 0
        return 1 if self.cfg.share_weights else self.cfg.depth

    def layer_params(self, i):
        j = 0 if self.cfg.share_weights else i
        return LayerParams(
            self.params[f"layer{j}.weight"],
            self.cfg.activation,
            self.params.get(f"layer{j}.a_src"),
            self.params.get(f"layer{j}.a_dst"),
        )

    def layer_param_prefix(self, i):
        return f"layer{0 if self.cfg.share_weights else i}"

    def state_matrices(self, i):
        """``(Lambda, B)`` for layer ``i`` under the configured residual mode."""
        d = self.cfg.d_hidden
        if self.cfg.residual == "plain_residual":
            return np.eye(d), np.eye(d)
        if self.cfg.residual == "none":
            return None
        j = 0 if self.cfg.ssm.shared else i
        return self.params[f"ssm{j}.Lambda"], self.params[f"ssm{j}.B"]

    def ssm_prefix(self, i):
        return f"ssm{0 if self.cfg.ssm.shared else i}"

    def trainable_names(self):
        names = [k for k in self.params if not k.startswith("ssm")]
        if self.cfg.residual == "ssm" and self.cfg.ssm.trainable:
            names += [k for k in self.params if k.startswith("ssm")]
        return names

    def coupling_weights(self):
        return [self.params[f"layer{i}.weight"] for i in range(self.n_coupling_params())]

    def copy(self):
        return Model(replace(self.cfg), {k: v.copy() for k, v in self.params.items()})


def build_model(cfg):
    """Initialize a model; weights are i.i.d. ``N(0, sigma_w^2 / fan_in)``."""
    rng = make_rng(derive_seed(cfg.seed, "init"))
    d, s = cfg.d_hidden, cfg.sigma_w
    params = {
        "encoder.weight": rng.standard_normal((cfg.d_in, d)) * s / np.sqrt(cfg.d_in),
        "encoder.bias": np.zeros(d),
    }
    n_coupling = 0 if cfg.depth == 0 else (1 if cfg.share_weights else cfg.depth)
    for i in range(n_coupling):
        w = rng.standard_normal((d, d)) * s / np.sqrt(d)
        if cfg.weight_radius is not None:
            w = scale_spectral_radius(w, cfg.weight_radius)
        params[f"layer{i}.weight"] = w
        if cfg.coupling == "gat":
            params[f"layer{i}.a_src"] = rng.standard_normal(d) * s / np.sqrt(d)
            params[f"layer{i}.a_dst"] = rng.standard_normal(d) * s / np.sqrt(d)
    if cfg.residual == "ssm" and cfg.depth > 0:
        for j, (lam, b) in enumerate(cfg.ssm.materialize(d, cfg.depth)):
            params[f"ssm{j}.Lambda"] = lam
            params[f"ssm{j}.B"] = b
    params["readout.weight"] = rng.standard_normal((d, cfg.d_out)) * s / np.sqrt(d)
    params["readout.bias"] = np.zeros(cfg.d_out)
    return Model(cfg, params)


# --------------------------------------------------------------------------
# Forward / backward with an explicit cache


def propagation_matrix(m, g, i):
    """Sparse aggregation operator used by layer ``i`` (GCN and k-hop couplings)."""
    if m.cfg.coupling == "gcn":
        return normalized_adjacency(g, "sym_self_loops").matrix
    if m.cfg.coupling == "khop":
        return k_hop_adjacency(g, i + 1).matrix
    raise ConfigError("GAT has no fixed propagation matrix")


def coupling_forward(m, g, i, h):
    """Coupling output of layer ``i`` and the intermediates needed for its VJP."""
    p = m.layer_params(i)
    if m.cfg.coupling == "gat":
        return _gat_forward(_attention_edges(g), h, p)
    mat = propagation_matrix(m, g, i)
    ph = mat @ h
    z = ph @ p.weight
    return activate(z, p.activation), {"ph": ph, "z": z, "mat": mat}


def coupling_backward(m, g, i, h, c, df):
    """Return ``(dH, {param_suffix: grad})`` for layer ``i``'s coupling."""
    p = m.layer_params(i)
    if m.cfg.coupling == "gat":
        return _gat_backward(_attention_edges(g), h, p, c, df)
    dz = df * activate_grad(c["z"], p.activation)
    dh = c["mat"].T @ (dz @ p.weight.T)
    return np.asarray(dh), {"weight": c["ph"].T @ dz}


def layer_step(m, g, i, h):
    """One full layer (coupling + state update). Returns ``(H_next, cache)``."""
    f, c = coupling_forward(m, g, i, h)
    sm = m.state_matrices(i)
    if sm is None:
        out = f
    else:
        lam, b = sm
        out = h @ lam.T + f @ b.T
    return out, {"coupling": c, "f": f}


def layer_vjp(m, g, i, h, cache, dout):
    """Backward through layer ``i``: ``(dH, grads)`` with grads keyed by full name."""
    sm = m.state_matrices(i)
    grads = {}
    if sm is None:
        df = dout
        dh_state = 0.0
    else:
        lam, b = sm
        df = dout @ b
        dh_state = dout @ lam
        if m.cfg.residual == "ssm" and m.cfg.ssm.trainable:
            pre = m.ssm_prefix(i)
            grads[f"{pre}.Lambda"] = dout.T @ h
            grads[f"{pre}.B"] = dout.T @ cache["f"]
    dh, cg = coupling_backward(m, g, i, h, cache["coupling"], df)
    pre = m.layer_param_prefix(i)
    for k, v in cg.items():
        grads[f"{pre}.{k}"] = v
    return dh + dh_state, grads


def coupling_jvp(m, g, i, h, c, dh):
    """Directional derivative of layer ``i``'s coupling at ``h`` along ``dh``."""
    p = m.layer_params(i)
    if m.cfg.coupling != "gat":
        dz = c["mat"] @ (dh @ p.weight)
        return activate_grad(c["z"], p.activation) * dz
    rows, cols, indptr = _attention_edges(g)
    dy = dh @ p.weight
    dpre = (dy @ c["a_src"])[rows] + (dy @ c["a_dst"])[cols]
    de = np.where(c["pre"] > 0, dpre, LEAKY_SLOPE * dpre)
    alpha = c["alpha"]
    dalpha = alpha * (de - np.add.reduceat(alpha * de, indptr[:-1])[rows])
    datt = sp.csr_matrix((dalpha, cols, indptr), shape=c["att"].shape)
    dz = c["att"] @ dy + datt @ c["y"]
    return activate_grad(c["z"], p.activation) * dz


def layer_jvp(m, g, i, h, cache, dh):
    """Directional derivative of the full layer ``i`` (coupling + state path)."""
    df = coupling_jvp(m, g, i, h, cache["coupling"], dh)
    sm = m.state_matrices(i)
    if sm is None:
        return df
    lam, b = sm
    return dh @ lam.T + df @ b.T


@dataclass
class ForwardCache:
    model: Model
    graph: object
    x: object
    states: list  # H^(0) .. H^(K)
    layer_caches: list
    segment: np.ndarray
    pool: object
    pooled: np.ndarray
    output: np.ndarray


def _pool_matrix(segment, n):
    n_graphs = int(segment.max()) + 1 if segment.size else 0
    counts = np.bincount(segment, minlength=n_graphs).astype(np.float64)
    return sp.csr_matrix((1.0 / counts[segment], (segment, np.arange(n))), shape=(n_graphs, n))


def forward(m, g, x, segment=None):
    """Full forward pass returning a :class:`ForwardCache` for :func:`backward`."""
    cfg = m.cfg
    if x.shape[0] != g.n:
        raise ConfigError(f"feature rows {x.shape[0]} != node count {g.n}")
    if x.shape[1] != cfg.d_in:
        raise ConfigError(f"feature width {x.shape[1]} != model input width {cfg.d_in}")
    h = np.asarray(x @ m.params["encoder.weight"]) + m.params["encoder.bias"]
    states = [h]
    caches = []
    for i in range(cfg.depth):
        h, c = layer_step(m, g, i, h)
        states.append(h)
        caches.append(c)
    pool = pooled = None
    if cfg.readout == "graph":
        if segment is None:
            segment = np.zeros(g.n, dtype=np.int64)
        pool = _pool_matrix(np.asarray(segment), g.n)
        pooled = pool @ h
        out = pooled @ m.params["readout.weight"] + m.params["readout.bias"]
    else:
        out = h @ m.params["readout.weight"] + m.params["readout.bias"]
    return ForwardCache(m, g, x, states, caches, segment, pool, pooled, out)


def model_forward(m, g, x, trace=False, segment=None):
    """Output of the model, plus the list ``[H^(0), ..., H^(K)]`` when ``trace``."""
    c = forward(m, g, x, segment)
    return (c.output, c.states) if trace else (c.output, None)


def forward_states(m, g, h0, start=0, stop=None):
    """Run layers ``start..stop-1`` from state ``h0`` (no encoder/readout)."""
    stop = m.cfg.depth if stop is None else stop
    h = h0
    for i in range(start, stop):
        h, _ = layer_step(m, g, i, h)
    return h


# --------------------------------------------------------------------------
# Explicit Jacobians


def layer_jacobian(m, layer_index, g, h):
    """Explicit ``nd x nd`` Jacobian of layer ``layer_index`` (0-based) at ``h``.

    Uses column-stacking vectorization. GCN/k-hop layers are assembled in
    closed form, GAT layers row by row from the VJP.
    """
    n, d = h.shape
    if n * d > MAX_JACOBIAN_SIZE:
        raise CapabilityError(
            f"explicit Jacobian of size {n * d} exceeds {MAX_JACOBIAN_SIZE}; use spectral.operator_norm with layer_jvp/layer_vjp"
        )
    if m.cfg.coupling == "gat":
        return _jacobian_from_vjp(m, layer_index, g, h)
    gamma = coupling_jacobian(m, layer_index, g, h)
    sm = m.state_matrices(layer_index)
    if sm is None:
        return gamma
    lam, b = sm
    eye_n = np.eye(n)
    return np.kron(lam, eye_n) + np.kron(b, eye_n) @ gamma


def coupling_jacobian(m, layer_index, g, h):
    """Jacobian of the coupling ``F`` alone (the ``Gamma`` of the state update)."""
    n, d = h.shape
    if n * d > MAX_JACOBIAN_SIZE:
        raise CapabilityError(f"explicit Jacobian of size {n * d} exceeds {MAX_JACOBIAN_SIZE}")
    if m.cfg.coupling == "gat":
        saved = m.cfg.residual
        m.cfg.residual = "none"
        try:
            return _jacobian_from_vjp(m, layer_index, g, h)
        finally:
            m.cfg.residual = saved
    p = m.layer_params(layer_index)
    mat = propagation_matrix(m, g, layer_index).toarray()
    z = mat @ h @ p.weight
    dsig = activate_grad(z, p.activation).ravel(order="F")
    return dsig[:, None] * np.kron(p.weight.T, mat)


def _jacobian_from_vjp(m, i, g, h):
    n, d = h.shape
    _, cache = layer_step(m, g, i, h)
    jac = np.empty((n * d, n * d))
    e = np.zeros((n, d))
    for col in range(d):
        for row in range(n):
            e[row, col] = 1.0
            dh, _ = layer_vjp(m, g, i, h, cache, e)
            jac[col * n + row] = dh.ravel(order="F")
            e[row, col] = 0.0
    return jac


def vec(h):
    return np.asarray(h).ravel(order="F")


def unvec(v, n, d):
    return np.asarray(v).reshape((n, d), order="F")


# --------------------------------------------------------------------------
# Checkpoint container
#
# Layout (little endian):
#   b"GSSM" | u32 version | u32 header_len | header (UTF-8 JSON) | float64 blocks
# The header holds the model config and an ordered list of (name, shape); the
# blocks follow in that order, each row-major.

CHECKPOINT_MAGIC = b"GSSM"
CHECKPOINT_VERSION = 1


def checkpoint_bytes(m):
    names = list(m.params)
    header = {
        "config": m.cfg.to_dict(),
        "params": [[k, list(m.params[k].shape)] for k in names],
    }
    hb = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [CHECKPOINT_MAGIC, struct.pack("<II", CHECKPOINT_VERSION, len(hb)), hb]
    for k in names:
        parts.append(np.ascontiguousarray(m.params[k], dtype="<f8").tobytes(order="C"))
    return b"".join(parts)


def model_from_bytes(data):
    if data[:4] != CHECKPOINT_MAGIC:
        raise ConfigError("not a model checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != CHECKPOINT_VERSION:
        raise ConfigError(f"unsupported checkpoint version {version}")
    header = json.loads(data[12:12 + hlen].decode("utf-8"))
    offset = 12 + hlen
    params = {}
    for name, shape in header["params"]:
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape)
        params[name] = arr.astype(np.float64)
        offset += 8 * count
    return Model(ModelConfig(**header["config"]), params)


def save_checkpoint(m, path):
    with open(path, "wb") as f:
        f.write(checkpoint_bytes(m))


def load_checkpoint(path):
    with open(path, "rb") as f:
        return model_from_bytes(f.read())
