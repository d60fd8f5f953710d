"""Reverse-mode gradients, losses, Adam(W) and the training loop."""

from dataclasses import asdict, dataclass, field
import csv
import io
import json

import numpy as np

from .graph import disjoint_union, normalized_adjacency
from .nn import ConfigError, forward, layer_vjp
from .rng import derive_seed, make_rng

LOG10_FLOOR = -12.0


class UsageError(RuntimeError):
    pass


class NumericError(FloatingPointError):
    """NaN/Inf encountered in gradients or losses."""


# --------------------------------------------------------------------------
# Gradients


@dataclass
class GradientBundle:
    params: dict
    input: np.ndarray

    def norm(self, name):
        return float(np.linalg.norm(self.params[name]))

    def check_finite(self):
        bad = [k for k, v in self.params.items() if not np.all(np.isfinite(v))]
        if bad:
            raise NumericError(f"non-finite gradient in {', '.join(bad)}")


def backward(cache, dout):
    """Gradients of ``<dout, output>`` w.r.t. every parameter and the input.

    ``cache`` is the :class:`~gnnssm.nn.ForwardCache` of the matching forward
    pass.  Fixed state matrices get zero gradients unless marked trainable.
    """
    if cache is None:
        raise UsageError("backward needs the cache of a forward pass")
    m = cache.model
    dout = np.asarray(dout, dtype=np.float64)
    if dout.shape != cache.output.shape:
        raise ConfigError(f"cotangent shape {dout.shape} != output shape {cache.output.shape}")
    grads = {k: np.zeros_like(v) for k, v in m.params.items()}
    wo = m.params["readout.weight"]
    grads["readout.bias"] = dout.sum(axis=0)
    if m.cfg.readout == "graph":
        grads["readout.weight"] = cache.pooled.T @ dout
        dh = np.asarray(cache.pool.T @ (dout @ wo.T))
    else:
        grads["readout.weight"] = cache.states[-1].T @ dout
        dh = dout @ wo.T
    for i in reversed(range(m.cfg.depth)):
        dh, lg = layer_vjp(m, cache.graph, i, cache.states[i], cache.layer_caches[i], dh)
        for k, v in lg.items():
            grads[k] += v
    x = cache.x
    grads["encoder.weight"] = np.asarray(x.T @ dh)
    grads["encoder.bias"] = dh.sum(axis=0)
    dx = dh @ m.params["encoder.weight"].T
    return GradientBundle(grads, dx)


def input_vjp(m, g, x, cotangent, segment=None):
    """``cotangent^T`` times the full input-output Jacobian, shaped like ``x``."""
    return backward(forward(m, g, x, segment), cotangent).input


def state_vjp(cache, cot_final, stop=None):
    """Pull a cotangent on ``H^(stop)`` back to ``H^(0)`` through the layers."""
    m = cache.model
    stop = m.cfg.depth if stop is None else stop
    dh = cot_final
    for i in reversed(range(stop)):
        dh, _ = layer_vjp(m, cache.graph, i, cache.states[i], cache.layer_caches[i], dh)
    return dh


@dataclass
class Sensitivity:
    measured: float
    bound: float
    hops: int
    block: np.ndarray


def sensitivity_bound(m, g, u, v, hops=None):
    """Upper bound ``(c_sigma w d)^k (O^k)_{vu}`` with ``O = c_r I + c_a A``.

    Uses ``c_r = c_a = max entry of Â``, ``w = max |W|`` over coupling layers
    and ``c_sigma = 1``.  Defined for GCN couplings without a state path; NaN
    otherwise.
    """
    k = m.cfg.depth if hops is None else hops
    if m.cfg.coupling != "gcn" or m.cfg.residual != "none":
        return float("nan")
    if k == 0:
        return 1.0 if u == v else 0.0
    c = float(normalized_adjacency(g, "sym_self_loops").matrix.max())
    w = max(float(np.abs(wk).max()) for wk in m.coupling_weights())
    d = m.cfg.d_hidden
    o = c * (np.eye(g.n) + g.dense_adjacency())
    ok = np.linalg.matrix_power(o, k)
    return float((w * d) ** k * ok[v, u])


def node_sensitivity(m, g, x, u, v, max_passes=4096):
    """Spectral norm of ``d h_v^(K) / d h_u^(0)`` with the matching bound.

    ``h^(0)`` is the encoder output and ``h^(K)`` the state after the last
    layer.  The ``d x d`` block is assembled from ``d`` backward passes.
    """
    d = m.cfg.d_hidden
    if d > max_passes:
        raise ConfigError(f"{d} backward passes exceed the allowed {max_passes}")
    cache = forward(m, g, x)
    block = np.empty((d, d))
    cot = np.zeros((g.n, d))
    for j in range(d):
        cot[v, j] = 1.0
        block[j] = state_vjp(cache, cot)[u]
        cot[v, j] = 0.0
    measured = float(np.linalg.norm(block, 2))
    return Sensitivity(measured, sensitivity_bound(m, g, u, v), m.cfg.depth, block)


# --------------------------------------------------------------------------
# Losses and metrics


def mse(pred, target):
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64).reshape(pred.shape)
    diff = pred - target
    return float(np.mean(diff**2)), 2.0 * diff / diff.size


def log10_mse(pred, target):
    value, _ = mse(pred, target)
    return LOG10_FLOOR if value <= 10.0**LOG10_FLOOR else float(np.log10(value))


def cross_entropy(logits, labels):
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise ConfigError("cross entropy needs (n, classes) logits and n labels")
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = logits.shape[0]
    value = -float(logp[np.arange(n), labels].mean())
    grad = np.exp(logp)
    grad[np.arange(n), labels] -= 1.0
    return value, grad / n


def accuracy(logits, labels):
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    if logits.shape[0] != labels.shape[0]:
        raise ConfigError("prediction and label counts differ")
    return float(np.mean(np.argmax(logits, axis=1) == labels))


LOSSES = {"mse": mse, "cross_entropy": cross_entropy}
METRICS = {"accuracy": accuracy, "log10_mse": log10_mse, "mse": lambda p, t: mse(p, t)[0]}


def losses_and_metrics(pred, target, kind):
    """``(value, grad)`` for losses; ``(value, None)`` for metrics."""
    if kind in LOSSES:
        return LOSSES[kind](pred, target)
    if kind in METRICS:
        return METRICS[kind](pred, target), None
    raise ConfigError(f"unknown loss/metric {kind!r}")


# --------------------------------------------------------------------------
# Optimizer


@dataclass
class TrainConfig:
    optimizer: str = "adam"
    lr: float = 0.003
    weight_decay: float = 0.0
    epochs: int = 400
    patience: int = 100
    seed: int = 0
    loss: str = "cross_entropy"
    metric: str = "accuracy"
    batch_size: int = 32
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.optimizer not in ("adam", "adamw"):
            raise ConfigError(f"unknown optimizer {self.optimizer!r}")
        if self.loss not in LOSSES:
            raise ConfigError(f"unknown loss {self.loss!r}")
        if self.metric not in ("accuracy", "log10_mse", "mse"):
            raise ConfigError(f"unknown metric {self.metric!r}")
        if self.lr < 0 or self.weight_decay < 0 or self.epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise ConfigError("learning rate/decay must be >= 0; epochs, patience, batch size >= 1")

    @property
    def higher_is_better(self):
        return self.metric == "accuracy"


def decays(name):
    return name.endswith(".weight")


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def optimizer_step(model, state, grads, cfg):
    """One Adam/AdamW update in place on ``model.params``.

    Adam adds ``weight_decay * w`` to the gradient; AdamW shrinks the weights
    directly.  Decay applies to ``*.weight`` matrices only; fixed state
    matrices are never touched unless trainable.
    """
    names = model.trainable_names()
    for k in names:
        if not np.all(np.isfinite(grads.params[k])):
            raise NumericError(f"non-finite gradient for {k} at step {state.step + 1}")
    state.step += 1
    t = state.step
    b1, b2 = cfg.beta1, cfg.beta2
    for k in names:
        w = model.params[k]
        gk = grads.params[k]
        if cfg.optimizer == "adam" and cfg.weight_decay and decays(k):
            gk = gk + cfg.weight_decay * w
        m = state.m.get(k)
        if m is None:
            m = state.m[k] = np.zeros_like(w)
            state.v[k] = np.zeros_like(w)
        v = state.v[k]
        m *= b1
        m += (1 - b1) * gk
        v *= b2
        v += (1 - b2) * gk * gk
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        new = w - cfg.lr * mhat / (np.sqrt(vhat) + cfg.eps)
        if cfg.optimizer == "adamw" and cfg.weight_decay and decays(k):
            new -= cfg.lr * cfg.weight_decay * w
        model.params[k] = new
    return state


# --------------------------------------------------------------------------
# Batches and the training loop


@dataclass
class Batch:
    """One forward unit: a (possibly disjoint-union) graph and its targets.

    ``rows`` selects the output rows scored by the loss (node tasks); for graph
    readouts every pooled row is scored.
    """

    graph: object
    x: object
    segment: np.ndarray
    rows: np.ndarray
    target: np.ndarray


def make_batches(task, split, batch_size=None, order=None):
    """Split ``split`` of a task into :class:`Batch` objects."""
    idx = np.asarray(task.splits[split])
    if task.kind == "node_classification":
        return [Batch(task.graphs[0], task.features[0], None, idx, task.targets[0][idx])]
    if order is not None:
        idx = idx[order]
    size = len(idx) if batch_size is None else batch_size
    out = []
    for start in range(0, len(idx), size):
        sel = idx[start:start + size]
        graphs = [task.graphs[i] for i in sel]
        g, segment = disjoint_union(graphs)
        x = np.vstack([task.features[i] for i in sel])
        offsets = np.cumsum([0] + [gr.n for gr in graphs])[:-1]
        if task.kind == "ring_transfer":
            rows = offsets + np.asarray([task.target_nodes[i] for i in sel])
            target = np.asarray([task.targets[i] for i in sel])
        elif task.kind == "graph_regression":
            rows = None
            target = np.asarray([task.targets[i] for i in sel], dtype=np.float64).reshape(-1, 1)
        else:
            rows = np.arange(g.n)
            target = np.concatenate([task.targets[i] for i in sel]).astype(np.float64).reshape(-1, 1)
        out.append(Batch(g, x, segment, rows, target))
    return out


def batch_loss(m, batch, loss):
    """Forward + loss + backward on one batch. Returns ``(loss, grads, cache)``."""
    cache = forward(m, batch.graph, batch.x, batch.segment)
    out = cache.output
    if batch.rows is None:
        value, g = losses_and_metrics(out, batch.target, loss)
        dout = g
    else:
        value, g = losses_and_metrics(out[batch.rows], batch.target, loss)
        dout = np.zeros_like(out)
        np.add.at(dout, batch.rows, g)
    if not np.isfinite(value):
        raise NumericError(f"non-finite loss {value}")
    return value, backward(cache, dout), cache


def evaluate(m, batches, metric):
    """Metric over all batches, pooling predictions before scoring."""
    preds, targets = [], []
    for b in batches:
        out = forward(m, b.graph, b.x, b.segment).output
        preds.append(out if b.rows is None else out[b.rows])
        targets.append(b.target)
    return METRICS[metric](np.concatenate(preds), np.concatenate(targets))


@dataclass
class History:
    rows: list
    best_epoch: int
    best_val: float
    test_at_best: float
    config: dict
    stopped_early: bool

    def to_csv(self):
        cols = ["epoch", "train_loss", "val_metric", "test_metric", "grad_norm_first_layer", "grad_norm_last_layer"]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(cols)
        for r in self.rows:
            w.writerow([r["epoch"]] + [repr(float(r[c])) for c in cols[1:]])
        return buf.getvalue()

    def summary(self):
        return {
            "best_epoch": self.best_epoch,
            "best_val_metric": self.best_val,
            "test_metric_at_best": self.test_at_best,
            "epochs_run": len(self.rows),
            "stopped_early": self.stopped_early,
            "train_config": self.config,
        }

    def to_json(self):
        return json.dumps(self.summary(), indent=2, sort_keys=True)


def layer_grad_names(m):
    n = m.n_coupling_params()
    if n == 0:
        return "encoder.weight", "readout.weight"
    return "layer0.weight", f"layer{n - 1}.weight"


def train_loop(m, task, cfg, log=None):
    """Train ``m`` in place; the best-validation parameters are restored at the end.

    Graph-level tasks are reshuffled every epoch with a seeded permutation.
    """
    rng = make_rng(derive_seed(cfg.seed, "shuffle"))
    val_batches = make_batches(task, "val")
    test_batches = make_batches(task, "test")
    first, last = layer_grad_names(m)
    state = AdamState()
    sign = 1.0 if cfg.higher_is_better else -1.0
    best = (-np.inf, -1, None, np.nan)
    rows = []
    since_best = 0
    stopped = False
    n_train = len(task.splits["train"])
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(n_train) if task.kind != "node_classification" else None
        total, count = 0.0, 0
        gf = gl = 0.0
        for b in make_batches(task, "train", cfg.batch_size, order):
            value, grads, _ = batch_loss(m, b, cfg.loss)
            optimizer_step(m, state, grads, cfg)
            weight = len(b.target)
            total += value * weight
            count += weight
            gf, gl = grads.norm(first), grads.norm(last)
        val = evaluate(m, val_batches, cfg.metric)
        test = evaluate(m, test_batches, cfg.metric)
        rows.append({
            "epoch": epoch,
            "train_loss": total / count,
            "val_metric": val,
            "test_metric": test,
            "grad_norm_first_layer": gf,
            "grad_norm_last_layer": gl,
        })
        if log is not None:
            log(rows[-1])
        if sign * val > best[0]:
            best = (sign * val, epoch, {k: v.copy() for k, v in m.params.items()}, test)
            since_best = 0
        else:
            since_best += 1
            if since_best >= cfg.patience:
                stopped = True
                break
    if best[2] is not None:
        m.params = best[2]
    return History(rows, best[1], sign * best[0], best[3], asdict(cfg), stopped)
