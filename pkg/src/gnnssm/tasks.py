"""Datasets: Cora ingestion and splits, RingTransfer, graph-property prediction.

Also provides a citation-graph surrogate with Cora's published statistics for
environments where the raw Cora files are unavailable.  It is a stand-in for
smoke runs only and never substitutes for the real data in accuracy claims.
"""

from dataclasses import dataclass, field
import csv
import io
import json
import os

import numpy as np
import scipy.sparse as sp

from .graph import (
    DisconnectedGraphError,
    GeneratorSpec,
    GraphError,
    from_edge_list,
    from_edge_list_text,
    generate,
    graph_property,
    is_connected,
    to_edge_list_text,
)
from .rng import derive_seed, make_rng

TASK_KINDS = ("node_classification", "graph_regression", "node_regression", "ring_transfer")
GPP_TASKS = ("diameter", "sssp", "eccentricity")
GPP_FAMILIES = (
    "erdos_renyi",
    "barabasi_albert",
    "grid",
    "caveman",
    "tree",
    "ladder",
    "line",
    "star",
    "caterpillar",
    "lobster",
)
FULL_GPP_SIZES = (5120, 640, 1280)
DESK_GPP_SIZES = (1000, 200, 400)
CORA_NODES = 2708
CORA_FEATURES = 1433
CORA_CLASSES = 7
CORA_DIRECTED_EDGES = 10556
CORA_CLASS_SIZES = (351, 217, 418, 818, 426, 298, 180)
CORA_ENV = "GNNSSM_CORA_DIR"


class DataError(ValueError):
    """Malformed or inconsistent dataset input."""


@dataclass
class TaskInstance:
    kind: str
    graphs: list
    features: list
    targets: list
    splits: dict
    n_classes: int = 0
    target_nodes: list = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise DataError(f"unknown task kind {self.kind!r}")
        if len(self.graphs) != len(self.features):
            raise DataError("one feature matrix per graph is required")
        for g, x in zip(self.graphs, self.features):
            if x.shape[0] != g.n:
                raise DataError(f"feature rows {x.shape[0]} != node count {g.n}")
        names = list(self.splits)
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                if np.intersect1d(self.splits[a], self.splits[b]).size:
                    raise DataError(f"splits {a!r} and {b!r} overlap")
        for t in self.targets:
            if not np.all(np.isfinite(np.asarray(t, dtype=np.float64))):
                raise DataError("targets must be finite")

    @property
    def d_in(self):
        return self.features[0].shape[1]

    @property
    def d_out(self):
        if self.kind in ("node_classification", "ring_transfer"):
            return self.n_classes
        return 1

    @property
    def readout(self):
        return "graph" if self.kind == "graph_regression" else "node"

    @property
    def loss(self):
        return "cross_entropy" if self.n_classes else "mse"

    @property
    def metric(self):
        return "accuracy" if self.n_classes else "log10_mse"


# --------------------------------------------------------------------------
# Cora


def _parse_cora(content_text, cites_text):
    ids, rows, labels = {}, [], []
    n_feat = None
    for lineno, raw in enumerate(content_text.splitlines(), 1):
        if not raw.strip():
            continue
        parts = raw.strip().split("\t") if "\t" in raw else raw.split()
        if len(parts) < 3:
            raise DataError(f"content line {lineno}: expected id, features, label")
        feats = parts[1:-1]
        if n_feat is None:
            n_feat = len(feats)
        elif len(feats) != n_feat:
            raise DataError(f"content line {lineno}: {len(feats)} features, expected {n_feat}")
        try:
            vec = np.asarray([float(v) for v in feats])
        except ValueError:
            raise DataError(f"content line {lineno}: non-numeric feature") from None
        if parts[0] in ids:
            raise DataError(f"content line {lineno}: duplicate paper id {parts[0]!r}")
        ids[parts[0]] = len(ids)
        rows.append(vec)
        labels.append(parts[-1])
    if not ids:
        raise DataError("content file has no nodes")
    pairs = []
    for lineno, raw in enumerate(cites_text.splitlines(), 1):
        if not raw.strip():
            continue
        parts = raw.split()
        if len(parts) != 2:
            raise DataError(f"cites line {lineno}: expected 'cited citing'")
        for p in parts:
            if p not in ids:
                raise DataError(f"cites line {lineno}: unknown paper id {p!r}")
        pairs.append((ids[parts[0]], ids[parts[1]]))
    classes = sorted(set(labels))
    y = np.asarray([classes.index(c) for c in labels], dtype=np.int64)
    x = sp.csr_matrix(np.vstack(rows))
    return from_edge_list(pairs, len(ids)), x, y, classes


def row_normalize(x):
    """Scale each feature row to unit sum (zero rows stay zero)."""
    x = sp.csr_matrix(x, dtype=np.float64)
    s = np.asarray(x.sum(axis=1)).ravel()
    inv = np.divide(1.0, s, out=np.zeros_like(s), where=s != 0)
    return sp.diags(inv) @ x


def load_cora(content_path, cites_path, scheme="planetoid", seed=0, normalize=True):
    """Load the raw citation files (``cora.content`` / ``cora.cites``)."""
    with open(content_path) as f:
        content = f.read()
    with open(cites_path) as f:
        cites = f.read()
    g, x, y, classes = _parse_cora(content, cites)
    if normalize:
        x = row_normalize(x)
    splits = split_cora(y, scheme, seed)
    meta = {"source": "cora", "classes": classes, "directed_edges": 2 * g.num_edges, "split_scheme": scheme}
    return TaskInstance("node_classification", [g], [sp.csr_matrix(x)], [y], splits, len(classes), meta=meta)


def find_cora(directory=None):
    """Locate ``cora.content``/``cora.cites``; returns the two paths or ``None``."""
    for d in (directory, os.environ.get(CORA_ENV), "data/cora"):
        if not d:
            continue
        c, e = os.path.join(d, "cora.content"), os.path.join(d, "cora.cites")
        if os.path.exists(c) and os.path.exists(e):
            return c, e
    return None


def split_cora(labels, scheme="planetoid", seed=0, per_class=20, n_val=500, n_test=1000):
    """Index splits for node classification.

    ``planetoid``: per class the ``per_class`` lowest-index nodes train; the
    first ``n_val`` remaining nodes (by index) validate; the last ``n_test``
    nodes outside train and val test.  ``random``: same sizes, seeded draw.
    """
    labels = np.asarray(labels)
    n = labels.shape[0]
    classes = np.unique(labels)
    for c in classes:
        if np.sum(labels == c) < per_class:
            raise DataError(f"class {c} has fewer than {per_class} nodes")
    if scheme == "planetoid":
        train = np.sort(np.concatenate([np.flatnonzero(labels == c)[:per_class] for c in classes]))
        rest = np.setdiff1d(np.arange(n), train)
        val = rest[:n_val]
        test = np.setdiff1d(rest, val)[-n_test:]
    elif scheme == "random":
        rng = make_rng(derive_seed(seed, "split"))
        train = np.sort(np.concatenate([rng.permutation(np.flatnonzero(labels == c))[:per_class] for c in classes]))
        rest = rng.permutation(np.setdiff1d(np.arange(n), train))
        val = np.sort(rest[:n_val])
        test = np.sort(rest[n_val:n_val + n_test])
    else:
        raise DataError(f"unknown split scheme {scheme!r}")
    if len(val) < n_val or len(test) < n_test:
        raise DataError("not enough nodes for the requested split sizes")
    return {"train": train, "val": val, "test": test}


def make_cora_like(seed=0, homophily=0.81, words_per_node=18, words_per_class=120, noise_words=0.7):
    """Planted-partition citation surrogate with Cora's size statistics.

    2708 nodes in 7 classes of Cora's class sizes, 5278 undirected edges of
    which a fraction ``homophily`` join same-class nodes, and sparse binary
    1433-dim bag-of-words features: each node draws ``words_per_node`` words,
    a ``1 - noise_words`` share from a class-specific vocabulary.  Edge
    endpoints are drawn with heavy-tailed node propensities.

    The default ``noise_words`` puts a feature-only linear classifier near
    58% test accuracy and a 2-layer GCN near 88%, close to the spread
    reported for the real data.
    """
    rng = make_rng(derive_seed(seed, "cora_like"))
    y = np.repeat(np.arange(CORA_CLASSES), CORA_CLASS_SIZES)
    y = y[rng.permutation(y.size)]
    n = y.size
    members = [np.flatnonzero(y == c) for c in range(CORA_CLASSES)]
    target = CORA_DIRECTED_EDGES // 2
    n_intra = int(round(homophily * target))
    edges = set()

    def add(u, v):
        if u != v:
            edges.add((min(u, v), max(u, v)))

    # degree heterogeneity through per-node propensities (heavy tail like citation graphs)
    weight = rng.pareto(2.5, n) + 1.0
    while len(edges) < n_intra:
        c = rng.choice(CORA_CLASSES, p=np.asarray(CORA_CLASS_SIZES) / n)
        mem = members[c]
        p = weight[mem] / weight[mem].sum()
        u, v = rng.choice(mem, size=2, p=p)
        add(int(u), int(v))
    p_all = weight / weight.sum()
    while len(edges) < target:
        u, v = rng.choice(n, size=2, p=p_all)
        if y[u] != y[v]:
            add(int(u), int(v))
    g = from_edge_list(sorted(edges), n)
    vocab = [rng.choice(CORA_FEATURES, size=words_per_class, replace=False) for _ in range(CORA_CLASSES)]
    rows, cols = [], []
    for i in range(n):
        k_class = rng.binomial(words_per_node, 1.0 - noise_words)
        words = np.concatenate([
            rng.choice(vocab[y[i]], size=k_class),
            rng.integers(0, CORA_FEATURES, size=words_per_node - k_class),
        ])
        words = np.unique(words)
        rows += [i] * words.size
        cols += words.tolist()
    x = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, CORA_FEATURES))
    x.data[:] = 1.0
    splits = split_cora(y)
    meta = {"source": "cora_like_surrogate", "seed": seed, "directed_edges": 2 * g.num_edges}
    return TaskInstance("node_classification", [g], [row_normalize(x).tocsr()], [y], splits, CORA_CLASSES, meta=meta)


# --------------------------------------------------------------------------
# RingTransfer


def make_ring_transfer(n_nodes=10, n_classes=5, n_samples=2000, seed=0, fractions=(0.8, 0.1, 0.1)):
    """Ring of ``n_nodes`` with a class signal at node 0 and a marker at node ``n/2``.

    Features have ``n_classes + 1`` channels: the source carries the one-hot
    class in the first ``n_classes`` channels, the target (antipodal, at hop
    distance ``n/2``) carries 1 in the last channel, every other node is 0.
    The label is the source class, predicted at the target node.  Labels are
    balanced (``i mod n_classes``) and then shuffled with the seed.
    """
    if n_nodes < 4 or n_nodes % 2:
        raise DataError("n_nodes must be even and >= 4")
    if n_classes < 2 or n_samples < 3:
        raise DataError("need n_classes >= 2 and n_samples >= 3")
    rng = make_rng(derive_seed(seed, "ring"))
    ring = generate(GeneratorSpec("ring", n=n_nodes))
    labels = rng.permutation(np.arange(n_samples) % n_classes)
    target = n_nodes // 2
    feats = []
    for c in labels:
        x = np.zeros((n_nodes, n_classes + 1))
        x[0, c] = 1.0
        x[target, n_classes] = 1.0
        feats.append(x)
    splits = _fraction_splits(n_samples, fractions)
    meta = {"n_nodes": n_nodes, "n_classes": n_classes, "n_samples": n_samples, "seed": seed}
    return TaskInstance(
        "ring_transfer",
        [ring] * n_samples,
        feats,
        [int(c) for c in labels],
        splits,
        n_classes,
        target_nodes=[target] * n_samples,
        meta=meta,
    )


def _fraction_splits(n, fractions):
    a = int(round(fractions[0] * n))
    b = a + int(round(fractions[1] * n))
    idx = np.arange(n)
    return {"train": idx[:a], "val": idx[a:b], "test": idx[b:]}


# --------------------------------------------------------------------------
# Graph property prediction


@dataclass(frozen=True)
class GppFamilies:
    """Per-family parameter ranges for the GPP graph sampler.

    Node counts are drawn from ``[n_min, n_max]``; the remaining ranges are
    inclusive and chosen so that sampled graphs are connected with high
    probability (disconnected draws are resampled).
    """

    n_min: int = 25
    n_max: int = 35
    er_p: tuple = (0.1, 0.2)
    ba_m: tuple = (1, 3)
    caveman_clique: tuple = (3, 6)
    caterpillar_spine: tuple = (0.3, 0.6)
    lobster_spine: tuple = (0.25, 0.5)
    max_resample: int = 100


def sample_family_spec(family, rng, ranges=GppFamilies()):
    """Draw a :class:`GeneratorSpec` for ``family`` within ``ranges``."""
    n = int(rng.integers(ranges.n_min, ranges.n_max + 1))
    seed = int(rng.integers(0, 2**63 - 1))
    if family == "erdos_renyi":
        return GeneratorSpec(family, n=n, p=float(rng.uniform(*ranges.er_p)), seed=seed)
    if family == "barabasi_albert":
        return GeneratorSpec(family, n=n, m=int(rng.integers(ranges.ba_m[0], ranges.ba_m[1] + 1)), seed=seed)
    if family == "grid":
        shapes = [(w, h) for w in range(3, ranges.n_max + 1) for h in range(3, ranges.n_max + 1)
                  if ranges.n_min <= w * h <= ranges.n_max]
        w, h = shapes[int(rng.integers(0, len(shapes)))]
        return GeneratorSpec(family, w=w, h=h, seed=seed)
    if family == "caveman":
        opts = [(m, c * m) for m in range(ranges.caveman_clique[0], ranges.caveman_clique[1] + 1)
                for c in range(2, ranges.n_max + 1) if ranges.n_min <= c * m <= ranges.n_max]
        m, total = opts[int(rng.integers(0, len(opts)))]
        return GeneratorSpec(family, n=total, m=m, seed=seed)
    if family == "ladder":
        even = n + 1 if n % 2 and n + 1 <= ranges.n_max else n - (n % 2)
        return GeneratorSpec(family, n=even, seed=seed)
    if family == "caterpillar":
        m = max(1, int(round(n * rng.uniform(*ranges.caterpillar_spine))))
        return GeneratorSpec(family, n=n, m=m, seed=seed)
    if family == "lobster":
        m = max(1, int(round(n * rng.uniform(*ranges.lobster_spine))))
        return GeneratorSpec(family, n=n, m=m, seed=seed)
    if family in ("tree", "line", "star"):
        return GeneratorSpec(family, n=n, seed=seed)
    raise GraphError(f"unknown family {family!r}")


def sample_connected(family, rng, ranges=GppFamilies()):
    for _ in range(ranges.max_resample):
        spec = sample_family_spec(family, rng, ranges)
        g = generate(spec)
        if is_connected(g):
            return g, spec
    raise DisconnectedGraphError(
        f"no connected {family} graph after {ranges.max_resample} draws; widen the parameter ranges"
    )


def make_gpp(task="diameter", n_train=None, n_val=None, n_test=None, seed=0, paper_scale=False,
             families=GPP_FAMILIES, ranges=GppFamilies(), feature_dim=1):
    """Graph-property-prediction dataset.

    Graphs cycle round-robin over ``families``; node features are
    ``U[0, 1)`` with ``feature_dim`` channels.  For ``sssp`` one uniformly
    chosen source gets an extra indicator channel and the target is the hop
    distance of every node from it.  ``diameter`` is graph-level;
    ``eccentricity`` and ``sssp`` are node-level.  Targets are raw integers.
    """
    if task not in GPP_TASKS:
        raise DataError(f"unknown GPP task {task!r}")
    sizes = FULL_GPP_SIZES if paper_scale else DESK_GPP_SIZES
    counts = [c if c is not None else d for c, d in zip((n_train, n_val, n_test), sizes)]
    if min(counts) < 1:
        raise DataError("split sizes must be >= 1")
    total = sum(counts)
    rng = make_rng(derive_seed(seed, ("gpp", task)))
    graphs, feats, targets, specs = [], [], [], []
    for i in range(total):
        family = families[i % len(families)]
        g, spec = sample_connected(family, rng, ranges)
        x = rng.random((g.n, feature_dim))
        if task == "diameter":
            y = float(graph_property(g, "diameter"))
        elif task == "eccentricity":
            y = graph_property(g, "eccentricity").astype(np.float64)
        else:
            src = int(rng.integers(0, g.n))
            ind = np.zeros((g.n, 1))
            ind[src] = 1.0
            x = np.hstack([x, ind])
            y = graph_property(g, "sssp", source=src).astype(np.float64)
        graphs.append(g)
        feats.append(x)
        targets.append(y)
        specs.append(spec.to_text().strip().replace("\n", ";"))
    a, b = counts[0], counts[0] + counts[1]
    idx = np.arange(total)
    splits = {"train": idx[:a], "val": idx[a:b], "test": idx[b:]}
    kind = "graph_regression" if task == "diameter" else "node_regression"
    meta = {"task": task, "seed": seed, "counts": counts, "families": list(families), "generator_specs": specs}
    return TaskInstance(kind, graphs, feats, targets, splits, 0, meta=meta)


# --------------------------------------------------------------------------
# Dataset container
#
#   manifest.json           kind, counts, n_classes, splits, meta
#   graphs/g_00000.txt      edge-list text per graph
#   features/x_00000.csv    dense feature rows
#   targets.csv             graph_index,node_index,value (node_index -1 for graph targets)


def _matrix_csv(x):
    x = x.toarray() if sp.issparse(x) else np.asarray(x)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    for row in x:
        w.writerow([repr(float(v)) for v in row])
    return buf.getvalue()


def save_task(task, directory):
    """Write ``task`` to ``directory``; identical tasks give identical bytes."""
    os.makedirs(os.path.join(directory, "graphs"), exist_ok=True)
    os.makedirs(os.path.join(directory, "features"), exist_ok=True)
    manifest = {
        "kind": task.kind,
        "n_graphs": len(task.graphs),
        "n_classes": task.n_classes,
        "splits": {k: np.asarray(v).tolist() for k, v in task.splits.items()},
        "target_nodes": task.target_nodes,
        "meta": task.meta,
    }
    with open(os.path.join(directory, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    for i, (g, x) in enumerate(zip(task.graphs, task.features)):
        with open(os.path.join(directory, "graphs", f"g_{i:05d}.txt"), "w") as f:
            f.write(to_edge_list_text(g))
        with open(os.path.join(directory, "features", f"x_{i:05d}.csv"), "w") as f:
            f.write(_matrix_csv(x))
    with open(os.path.join(directory, "targets.csv"), "w") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["graph", "node", "value"])
        for i, t in enumerate(task.targets):
            t = np.asarray(t)
            if t.ndim == 0:
                w.writerow([i, -1, repr(t.item())])
            else:
                for j, v in enumerate(t):
                    w.writerow([i, j, repr(v.item())])


def load_task(directory):
    with open(os.path.join(directory, "manifest.json")) as f:
        manifest = json.load(f)
    count = manifest["n_graphs"]
    graphs, feats = [], []
    for i in range(count):
        with open(os.path.join(directory, "graphs", f"g_{i:05d}.txt")) as f:
            graphs.append(from_edge_list_text(f.read()))
        feats.append(np.loadtxt(os.path.join(directory, "features", f"x_{i:05d}.csv"), delimiter=",", ndmin=2))
    per = [[] for _ in range(count)]
    scalar = [None] * count
    with open(os.path.join(directory, "targets.csv")) as f:
        for row in csv.DictReader(f):
            gi, node = int(row["graph"]), int(row["node"])
            val = float(row["value"])
            if node < 0:
                scalar[gi] = val
            else:
                per[gi].append(val)
    integral = manifest["n_classes"] > 0
    targets = []
    for i in range(count):
        if scalar[i] is not None:
            targets.append(int(scalar[i]) if integral else scalar[i])
        else:
            arr = np.asarray(per[i])
            targets.append(arr.astype(np.int64) if integral else arr)
    splits = {k: np.asarray(v, dtype=np.int64) for k, v in manifest["splits"].items()}
    return TaskInstance(manifest["kind"], graphs, feats, targets, splits, manifest["n_classes"],
                        manifest["target_nodes"], manifest["meta"])
