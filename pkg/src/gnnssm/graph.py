"""Undirected graphs, normalized operators, BFS distances and generators.

Graphs are immutable.  Edges are stored once as ``(u, v)`` with ``u < v``;
the adjacency is kept as a scipy CSR matrix and a dense copy is produced on
demand for small graphs.
"""

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.sparse as sp

from .rng import make_rng

UNREACHABLE = np.inf
NORMALIZATION_KINDS = ("sym", "sym_self_loops")
GENERATOR_KINDS = (
    "ring",
    "line",
    "grid",
    "star",
    "tree",
    "ladder",
    "caterpillar",
    "lobster",
    "caveman",
    "erdos_renyi",
    "barabasi_albert",
)


class GraphError(ValueError):
    """Invalid graph input (bad node index, bad generator parameters)."""


class DisconnectedGraphError(GraphError):
    """A connected graph was required."""


@dataclass(frozen=True, eq=False)
class Graph:
    n: int
    edges: np.ndarray  # (m, 2) int64, u < v, lexicographically sorted
    _cache: dict = field(default_factory=dict, init=False, repr=False, compare=False)

    @property
    def num_edges(self):
        return int(self.edges.shape[0])

    @cached_property
    def adjacency(self):
        """Symmetric 0/1 adjacency as ``scipy.sparse.csr_matrix`` (float64)."""
        u, v = self.edges[:, 0], self.edges[:, 1]
        rows = np.concatenate([u, v])
        cols = np.concatenate([v, u])
        data = np.ones(rows.shape[0], dtype=np.float64)
        a = sp.csr_matrix((data, (rows, cols)), shape=(self.n, self.n))
        a.sort_indices()
        return a

    @cached_property
    def degree(self):
        return np.asarray(self.adjacency.sum(axis=1)).ravel().astype(np.int64)

    def dense_adjacency(self):
        return self.adjacency.toarray()

    def edge_set(self):
        return {(int(u), int(v)) for u, v in self.edges}

    def neighbors(self, u):
        a = self.adjacency
        return a.indices[a.indptr[u]:a.indptr[u + 1]]

    def __eq__(self, other):
        if not isinstance(other, Graph):
            return NotImplemented
        return self.n == other.n and np.array_equal(self.edges, other.edges)

    def __hash__(self):
        return hash((self.n, self.edges.tobytes()))

    def __repr__(self):
        return f"Graph(n={self.n}, edges={self.num_edges})"


def from_edge_list(pairs, n):
    """Build a :class:`Graph` on ``n`` nodes from an iterable of node pairs.

    Self pairs are dropped and duplicates (in either orientation) merged.
    """
    n = int(n)
    if n < 0:
        raise GraphError(f"node count must be non-negative, got {n}")
    arr = np.asarray(list(pairs), dtype=np.int64).reshape(-1, 2)
    if arr.size and (arr.min() < 0 or arr.max() >= n):
        bad = arr[(arr < 0).any(axis=1) | (arr >= n).any(axis=1)][0]
        raise GraphError(f"edge ({bad[0]}, {bad[1]}) out of range for n={n}")
    arr = arr[arr[:, 0] != arr[:, 1]]
    arr = np.sort(arr, axis=1)
    if arr.size:
        arr = np.unique(arr, axis=0)
    return Graph(n, arr)


def from_adjacency(a):
    """Graph from a (dense or sparse) symmetric adjacency pattern."""
    coo = sp.coo_matrix(a)
    mask = coo.row < coo.col
    return from_edge_list(np.stack([coo.row[mask], coo.col[mask]], axis=1), coo.shape[0])


def disjoint_union(graphs):
    """Disjoint union of ``graphs``.

    Returns ``(union, segment)`` where ``segment[i]`` is the index of the graph
    that node ``i`` came from.
    """
    offsets = np.cumsum([0] + [g.n for g in graphs])
    edges = [g.edges + off for g, off in zip(graphs, offsets[:-1])]
    edges = np.concatenate(edges) if edges else np.zeros((0, 2), dtype=np.int64)
    segment = np.repeat(np.arange(len(graphs)), [g.n for g in graphs])
    union = Graph(int(offsets[-1]), edges.astype(np.int64))
    # per-component operators are reused (and cached on the components)
    union._cache["components"] = list(graphs)
    return union, segment


# --------------------------------------------------------------------------
# Operators


def _sym_normalize(a):
    """``D^{-1/2} a D^{-1/2}`` with the convention ``0^{-1/2} = 0``."""
    a = sp.csr_matrix(a, dtype=np.float64, copy=True)
    a.sum_duplicates()
    a.sort_indices()
    deg = np.asarray(a.sum(axis=1)).ravel()
    inv = np.zeros_like(deg)
    nz = deg > 0
    inv[nz] = 1.0 / np.sqrt(deg[nz])
    rows = np.repeat(np.arange(a.shape[0]), np.diff(a.indptr))
    a.data *= inv[rows] * inv[a.indices]
    return a


def block_diag_csr(mats):
    """Block-diagonal CSR matrix from square CSR blocks (sorted indices kept)."""
    sizes = [m.shape[0] for m in mats]
    offsets = np.cumsum([0] + sizes)
    nnz = np.cumsum([0] + [m.nnz for m in mats])
    data = np.concatenate([m.data for m in mats]) if mats else np.zeros(0)
    indices = np.concatenate([m.indices + off for m, off in zip(mats, offsets[:-1])]) if mats else np.zeros(0, np.int64)
    indptr = np.concatenate([[0]] + [m.indptr[1:] + base for m, base in zip(mats, nnz[:-1])]) if mats else np.zeros(1, np.int64)
    n = int(offsets[-1])
    return sp.csr_matrix((data, indices, indptr), shape=(n, n))


@dataclass(frozen=True, eq=False)
class NormalizedAdjacency:
    kind: str
    matrix: sp.csr_matrix
    hop: int = 1

    @cached_property
    def eigenvalues(self):
        """Real spectrum sorted descending (dense solve; small graphs only)."""
        from .spectral import symmetric_eigenvalues

        return symmetric_eigenvalues(self.matrix.toarray())

    def dense(self):
        return self.matrix.toarray()

    @property
    def label(self):
        return f"khop({self.hop})" if self.kind == "khop" else self.kind


def normalized_adjacency(g, kind="sym_self_loops"):
    """Return Ã = D^{-1/2} A D^{-1/2} (``sym``) or Â with self loops (``sym_self_loops``).

    Isolated nodes get an all-zero row/column under ``sym``.
    """
    key = ("norm", kind)
    if key in g._cache:
        return g._cache[key]
    if kind == "sym":
        mat = _sym_normalize(g.adjacency)
    elif kind == "sym_self_loops":
        mat = _sym_normalize(g.adjacency + sp.identity(g.n, format="csr"))
    else:
        raise GraphError(f"unknown normalization kind {kind!r}")
    out = NormalizedAdjacency(kind, mat)
    g._cache[key] = out
    return out


def laplacian(g):
    """Unnormalized Laplacian ``D - A`` as a dense array."""
    a = g.dense_adjacency()
    return np.diag(a.sum(axis=1)) - a


def bfs_distances(g, source):
    """Hop distances from ``source`` as floats; unreachable nodes are ``inf``."""
    if not 0 <= source < g.n:
        raise GraphError(f"source {source} out of range for n={g.n}")
    a = g.adjacency
    dist = np.full(g.n, UNREACHABLE)
    dist[source] = 0
    frontier = [source]
    d = 0
    while frontier:
        d += 1
        nxt = []
        for u in frontier:
            for v in a.indices[a.indptr[u]:a.indptr[u + 1]]:
                if dist[v] == UNREACHABLE:
                    dist[v] = d
                    nxt.append(v)
        frontier = nxt
    return dist


def all_pairs_distances(g):
    """All-pairs hop distances as floats (``inf`` where no path exists).

    Level-synchronous BFS from every source at once, expressed as sparse
    boolean frontier propagation; O(n^2) memory.
    """
    if "apsp" in g._cache:
        return g._cache["apsp"]
    n = g.n
    dist = np.full((n, n), UNREACHABLE)
    np.fill_diagonal(dist, 0)
    a = g.adjacency.astype(bool)
    frontier = np.eye(n, dtype=bool)
    seen = frontier.copy()
    d = 0
    while frontier.any():
        d += 1
        reach = (a @ sp.csr_matrix(frontier)).toarray() if n > 256 else (a @ frontier)
        reach = np.asarray(reach, dtype=bool) & ~seen
        dist[reach] = d
        seen |= reach
        frontier = reach
    dist.setflags(write=False)
    g._cache["apsp"] = dist
    return dist


def k_hop_adjacency(g, k):
    """Normalized exact-distance-``k`` adjacency ``D_k^{-1/2} A_k D_k^{-1/2}``.

    ``A_k[i, j] = 1`` iff the shortest path between ``i`` and ``j`` has length
    exactly ``k``.  Nodes with no node at distance ``k`` get a zero row.
    """
    k = int(k)
    if k < 1:
        raise GraphError(f"hop must be >= 1, got {k}")
    key = ("khop", k)
    if key in g._cache:
        return g._cache[key]
    if k == 1:
        mat = normalized_adjacency(g, "sym").matrix
    elif "components" in g._cache:
        mat = block_diag_csr([k_hop_adjacency(c, k).matrix for c in g._cache["components"]])
    else:
        dist = all_pairs_distances(g)
        rows, cols = np.nonzero(dist == k)
        ak = sp.csr_matrix(
            (np.ones(rows.shape[0]), (rows, cols)), shape=(g.n, g.n)
        )
        mat = _sym_normalize(ak)
    out = NormalizedAdjacency("khop", mat, hop=k)
    g._cache[key] = out
    return out


def is_connected(g):
    if g.n == 0:
        return True
    return bool((bfs_distances(g, 0) != UNREACHABLE).all())


def graph_property(g, which, source=0):
    """``diameter`` (int), ``eccentricity`` (per-node vector) or ``sssp`` (distances).

    Diameter and eccentricity require a connected graph.
    """
    if which == "sssp":
        return bfs_distances(g, source)
    if which not in ("diameter", "eccentricity"):
        raise GraphError(f"unknown graph property {which!r}")
    dist = all_pairs_distances(g)
    if (dist == UNREACHABLE).any():
        raise DisconnectedGraphError(f"{which} is undefined on a disconnected graph")
    ecc = dist.max(axis=1)
    return int(ecc.max()) if which == "diameter" else ecc.astype(np.int64)


# --------------------------------------------------------------------------
# Generators


@dataclass(frozen=True)
class GeneratorSpec:
    """Parameters for :func:`generate`.

    Size conventions (``n`` is always the total node count unless noted):

    ============== ==============================================================
    ring           n-cycle, n >= 3
    line           path on n nodes
    grid           w x h 4-neighbour lattice (n ignored)
    star           node 0 joined to n - 1 leaves
    tree           uniform random labelled tree (Pruefer sequence)
    ladder         two paths of n/2 nodes joined by rungs, n even
    caterpillar    spine path of m nodes, remaining n - m leaves attached to
                   uniformly chosen spine nodes
    lobster        spine of m nodes; every other node attaches to a uniformly
                   chosen spine node or an already attached first-level leaf
    caveman        connected caveman: n/m cliques of size m arranged in a
                   cycle; in each clique one edge (first member, last member) is
                   rewired to the first member of the next clique
    erdos_renyi    G(n, p)
    barabasi_albert preferential attachment, m edges per new node, seeded
                   with a star on m + 1 nodes
    ============== ==============================================================
    """

    kind: str
    n: int = 0
    p: float = 0.0
    m: int = 0
    w: int = 0
    h: int = 0
    seed: int = 0

    def to_text(self):
        lines = [f"kind={self.kind}"]
        for key in ("n", "p", "m", "w", "h", "seed"):
            lines.append(f"{key}={getattr(self, key)!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        vals = {}
        for raw in text.splitlines():
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, _, value = line.partition("=")
            key, value = key.strip(), value.strip()
            if key == "kind":
                vals[key] = value
            elif key == "p":
                vals[key] = float(value)
            elif key in ("n", "m", "w", "h", "seed"):
                vals[key] = int(value)
            else:
                raise GraphError(f"unknown generator key {key!r}")
        if "kind" not in vals:
            raise GraphError("generator spec is missing 'kind'")
        return cls(**vals)


def _need(cond, msg):
    if not cond:
        raise GraphError(msg)


def _ring(n):
    _need(n >= 3, "ring needs n >= 3")
    return [(i, (i + 1) % n) for i in range(n)]


def _line(n):
    _need(n >= 1, "line needs n >= 1")
    return [(i, i + 1) for i in range(n - 1)]


def _grid(w, h):
    _need(w >= 1 and h >= 1, "grid needs w, h >= 1")
    idx = lambda r, c: r * w + c  # noqa: E731
    out = []
    for r in range(h):
        for c in range(w):
            if c + 1 < w:
                out.append((idx(r, c), idx(r, c + 1)))
            if r + 1 < h:
                out.append((idx(r, c), idx(r + 1, c)))
    return out


def _star(n):
    _need(n >= 2, "star needs n >= 2")
    return [(0, i) for i in range(1, n)]


def _tree(n, rng):
    _need(n >= 1, "tree needs n >= 1")
    if n <= 2:
        return _line(n)
    prufer = rng.integers(0, n, size=n - 2)
    degree = np.ones(n, dtype=np.int64)
    np.add.at(degree, prufer, 1)
    out = []
    for x in prufer:
        leaf = int(np.flatnonzero(degree == 1)[0])
        out.append((leaf, int(x)))
        degree[leaf] -= 1
        degree[x] -= 1
    u, v = np.flatnonzero(degree == 1)
    out.append((int(u), int(v)))
    return out


def _ladder(n):
    _need(n >= 2 and n % 2 == 0, "ladder needs an even n >= 2")
    r = n // 2
    out = [(i, i + 1) for i in range(r - 1)]
    out += [(r + i, r + i + 1) for i in range(r - 1)]
    out += [(i, r + i) for i in range(r)]
    return out


def _caterpillar(n, m, rng):
    _need(1 <= m <= n, "caterpillar needs 1 <= m (spine) <= n")
    out = _line(m)
    for leaf in range(m, n):
        out.append((int(rng.integers(0, m)), leaf))
    return out


def _lobster(n, m, rng):
    _need(1 <= m <= n, "lobster needs 1 <= m (spine) <= n")
    out = _line(m)
    first_level = []
    for node in range(m, n):
        pool = m + len(first_level)
        pick = int(rng.integers(0, pool))
        if pick < m:
            out.append((pick, node))
            first_level.append(node)
        else:
            out.append((first_level[pick - m], node))
    return out


def _caveman(n, m):
    _need(m >= 2 and n >= 2 * m and n % m == 0, "caveman needs m >= 2 and n a multiple of m with >= 2 cliques")
    cliques = n // m
    out = set()
    for c in range(cliques):
        base = c * m
        for i in range(m):
            for j in range(i + 1, m):
                out.add((base + i, base + j))
    for c in range(cliques):
        base = c * m
        nxt = ((c + 1) % cliques) * m
        out.discard((base, base + m - 1))
        out.add((base + m - 1, nxt) if base + m - 1 < nxt else (nxt, base + m - 1))
    return sorted(out)


def _erdos_renyi(n, p, rng):
    _need(n >= 1 and 0.0 <= p <= 1.0, "erdos_renyi needs n >= 1 and p in [0, 1]")
    iu, ju = np.triu_indices(n, k=1)
    keep = rng.random(iu.shape[0]) < p
    return list(zip(iu[keep].tolist(), ju[keep].tolist()))


def _barabasi_albert(n, m, rng):
    _need(m >= 1 and m < n, "barabasi_albert needs 1 <= m < n")
    out = [(0, i) for i in range(1, m + 1)]
    targets = [0] * m + list(range(1, m + 1))
    for node in range(m + 1, n):
        chosen = set()
        while len(chosen) < m:
            chosen.add(targets[int(rng.integers(0, len(targets)))])
        for t in sorted(chosen):
            out.append((t, node))
            targets += [t, node]
    return out


def generate(spec):
    """Build the graph described by ``spec``; same spec gives the same graph."""
    if spec.kind not in GENERATOR_KINDS:
        raise GraphError(f"unknown generator kind {spec.kind!r}")
    rng = make_rng(spec.seed)
    k = spec.kind
    n = spec.n
    if k == "ring":
        pairs = _ring(n)
    elif k == "line":
        pairs = _line(n)
    elif k == "grid":
        pairs = _grid(spec.w, spec.h)
        n = spec.w * spec.h
    elif k == "star":
        pairs = _star(n)
    elif k == "tree":
        pairs = _tree(n, rng)
    elif k == "ladder":
        pairs = _ladder(n)
    elif k == "caterpillar":
        pairs = _caterpillar(n, spec.m, rng)
    elif k == "lobster":
        pairs = _lobster(n, spec.m, rng)
    elif k == "caveman":
        pairs = _caveman(n, spec.m)
    elif k == "erdos_renyi":
        pairs = _erdos_renyi(n, spec.p, rng)
    else:
        pairs = _barabasi_albert(n, spec.m, rng)
    return from_edge_list(pairs, n)


# --------------------------------------------------------------------------
# Edge-list text format


def to_edge_list_text(g):
    lines = [f"n={g.n}"]
    lines += [f"{u} {v}" for u, v in g.edges.tolist()]
    return "\n".join(lines) + "\n"


def from_edge_list_text(text):
    """Parse the ``n=<count>`` + ``u v`` per line format (``#`` starts a comment)."""
    n = None
    pairs = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if n is None:
            if not line.startswith("n="):
                raise GraphError(f"line {lineno}: expected header 'n=<count>'")
            n = int(line[2:])
            continue
        parts = line.split()
        if len(parts) != 2:
            raise GraphError(f"line {lineno}: expected 'u v', got {line!r}")
        pairs.append((int(parts[0]), int(parts[1])))
    if n is None:
        raise GraphError("missing header 'n=<count>'")
    return from_edge_list(pairs, n)


def read_edge_list(path):
    with open(path) as f:
        return from_edge_list_text(f.read())


def write_edge_list(g, path):
    with open(path, "w") as f:
        f.write(to_edge_list_text(g))

