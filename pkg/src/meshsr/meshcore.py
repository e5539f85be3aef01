"""Meshes, field samples, kNN projection between node sets, and dataset I/O."""

from __future__ import annotations

import hashlib
import itertools
import json
import threading
from collections import OrderedDict
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from . import grad
from .errors import ConfigError, ContractError, DimensionError, ParseError, ValidationError

ZERO_DISTANCE = 1e-12
DEFAULT_K = 3
FORMAT = "meshsr-dataset/1"


def _digest(arr):
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    h = hashlib.blake2b(digest_size=16)
    h.update(str(arr.shape).encode())
    h.update(arr.tobytes())
    return h.hexdigest()


@dataclass(eq=False)
class Mesh:
    """Node positions (n x D) plus undirected, loop-free edges."""

    id: str
    positions: np.ndarray
    edges: np.ndarray

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        if self.positions.ndim != 2:
            raise DimensionError(f"mesh {self.id}: positions must be n x D")
        self.edges = np.asarray(self.edges, dtype=np.int64).reshape(-1, 2)
        if not np.all(np.isfinite(self.positions)):
            raise ValidationError(f"mesh {self.id}: non-finite positions")
        if self.edges.size:
            if self.edges.min() < 0 or self.edges.max() >= self.n_nodes:
                raise ValidationError(f"mesh {self.id}: edge index out of range")
            if np.any(self.edges[:, 0] == self.edges[:, 1]):
                raise ValidationError(f"mesh {self.id}: self-loop in stored edges")

    @property
    def n_nodes(self):
        return self.positions.shape[0]

    @property
    def dim(self):
        return self.positions.shape[1]

    @cached_property
    def fingerprint(self):
        return _digest(self.positions)

    @cached_property
    def graph(self):
        return DirectedGraph.from_undirected(self.edges, self.n_nodes)


@dataclass(eq=False)
class DirectedGraph:
    """Both directions of every undirected edge; messages flow src -> dst."""

    n: int
    src: np.ndarray
    dst: np.ndarray

    @classmethod
    def from_undirected(cls, edges, n):
        edges = np.asarray(edges, dtype=np.int64).reshape(-1, 2)
        src = np.concatenate([edges[:, 0], edges[:, 1]])
        dst = np.concatenate([edges[:, 1], edges[:, 0]])
        return cls(int(n), src, dst)

    @classmethod
    def from_directed(cls, pairs, n):
        pairs = np.asarray(pairs, dtype=np.int64).reshape(-1, 2)
        return cls(int(n), pairs[:, 0].copy(), pairs[:, 1].copy())

    @property
    def n_edges(self):
        return self.src.size

    @cached_property
    def src_segments(self):
        return grad.Segments.build(self.src, self.n)

    @cached_property
    def dst_segments(self):
        return grad.Segments.build(self.dst, self.n)

    @property
    def pairs(self):
        return np.stack([self.src, self.dst], axis=1)


@dataclass(eq=False)
class FieldSample:
    mesh: Mesh
    values: np.ndarray
    mu: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim == 1:
            self.values = self.values[:, None]
        self.mu = np.asarray(self.mu, dtype=np.float64).reshape(-1)
        if self.values.shape[0] != self.mesh.n_nodes:
            raise DimensionError(
                f"sample on mesh {self.mesh.id}: {self.values.shape[0]} rows "
                f"for {self.mesh.n_nodes} nodes")

    @property
    def positions(self):
        return self.mesh.positions


@dataclass(eq=False)
class PairedSample:
    lr: FieldSample
    hr: FieldSample

    def __post_init__(self):
        if not np.array_equal(self.lr.mu, self.hr.mu):
            raise ValidationError("paired LR/HR samples carry different mu")


@dataclass(eq=False)
class UnpairedSample:
    """An LR sample whose HR solution is unknown; only the HR mesh is."""

    lr: FieldSample
    hr_mesh: Mesh


@dataclass
class NormStats:
    field_mean: np.ndarray
    field_std: np.ndarray
    pos_mean: np.ndarray
    pos_std: np.ndarray

    def __post_init__(self):
        for name in ("field_mean", "field_std", "pos_mean", "pos_std"):
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(-1))

    @classmethod
    def identity(cls, d, dim):
        return cls(np.zeros(d), np.ones(d), np.zeros(dim), np.ones(dim))

    @classmethod
    def from_samples(cls, samples):
        vals = np.concatenate([s.values for s in samples], axis=0)
        pos = np.concatenate([s.positions for s in samples], axis=0)

        def std(a):
            s = a.std(axis=0)
            return np.where(s > 1e-12, s, 1.0)

        return cls(vals.mean(axis=0), std(vals), pos.mean(axis=0), std(pos))

    def norm_values(self, v):
        return (np.asarray(v) - self.field_mean) / self.field_std

    def denorm_values(self, v):
        return np.asarray(v) * self.field_std + self.field_mean

    def norm_positions(self, p):
        return (np.asarray(p) - self.pos_mean) / self.pos_std

    def to_json(self):
        return {k: getattr(self, k).tolist()
                for k in ("field_mean", "field_std", "pos_mean", "pos_std")}

    @classmethod
    def from_json(cls, obj):
        return cls(**{k: obj[k] for k in ("field_mean", "field_std", "pos_mean", "pos_std")})


@dataclass(eq=False)
class SplitDataset:
    """Paired LR-HR pool, unpaired LR pool and held-out test pairs."""

    paired: list
    unpaired: list
    test: list = field(default_factory=list)
    stats: NormStats | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.paired) < 2:
            raise ValidationError(f"need at least 2 paired samples, got {len(self.paired)}")
        if self.stats is None:
            self.stats = NormStats.from_samples(self.lr_pool())

    @property
    def counts(self):
        """(N_h, N - N_h)."""
        return len(self.paired), len(self.unpaired)

    @property
    def n_total(self):
        return len(self.paired) + len(self.unpaired)

    @property
    def d(self):
        return self.paired[0].lr.values.shape[1]

    @property
    def dim(self):
        return self.paired[0].lr.mesh.dim

    def lr_pool(self):
        return [p.lr for p in self.paired] + [u.lr for u in self.unpaired]

    def meshes(self):
        seen = OrderedDict()
        for p in self.paired + self.test:
            seen.setdefault(p.lr.mesh.id, p.lr.mesh)
            seen.setdefault(p.hr.mesh.id, p.hr.mesh)
        for u in self.unpaired:
            seen.setdefault(u.lr.mesh.id, u.lr.mesh)
            seen.setdefault(u.hr_mesh.id, u.hr_mesh)
        return list(seen.values())

    def restrict_paired(self, indices):
        """Keep only ``indices`` of the paired pool; the rest lose their HR data."""
        indices = [int(i) for i in indices]
        if len(set(indices)) != len(indices):
            raise ValidationError("duplicate paired indices")
        if any(i < 0 or i >= len(self.paired) for i in indices):
            raise ValidationError(f"paired index out of range (pool size {len(self.paired)})")
        keep = set(indices)
        demoted = [UnpairedSample(p.lr, p.hr.mesh)
                   for i, p in enumerate(self.paired) if i not in keep]
        return SplitDataset([self.paired[i] for i in indices], demoted + list(self.unpaired),
                            list(self.test), self.stats, dict(self.provenance))

    def paired_only(self):
        return SplitDataset(list(self.paired), [], list(self.test), self.stats,
                            dict(self.provenance))


# --- nearest neighbours -----------------------------------------------------

def _sq_dist(points, p):
    d2 = np.zeros(points.shape[0])
    for c in range(points.shape[1]):
        diff = points[:, c] - p[c]
        d2 += diff * diff
    return d2


class KnnIndex:
    """Uniform-grid spatial hash over a fixed set of source positions."""

    def __init__(self, positions, cell=None):
        pts = np.array(positions, dtype=np.float64)
        if pts.ndim != 2:
            raise DimensionError("KnnIndex needs an n x D position array")
        self.positions = pts
        self.n = pts.shape[0]
        if self.n == 0:
            self.cell = 1.0
            self.buckets = {}
            return
        self.lo = pts.min(axis=0)
        extent = pts.max(axis=0) - self.lo
        if cell is None:
            live = extent[extent > 0]
            cell = (np.prod(live) / self.n) ** (1.0 / live.size) if live.size else 1.0
            # bound the cells along the longest axis so elongated sets stay cheap
            per_axis = 2 * int(np.ceil(self.n ** (1.0 / pts.shape[1])))
            cell = max(cell, float(extent.max()) / per_axis)
        self.cell = float(cell)
        keys = np.floor((pts - self.lo) / self.cell).astype(np.int64)
        self.key_max = keys.max(axis=0)
        buckets = {}
        for i, key in enumerate(map(tuple, keys)):
            buckets.setdefault(key, []).append(i)
        self.buckets = {k: np.array(v, dtype=np.int64) for k, v in buckets.items()}
        self._keys = np.array(list(self.buckets), dtype=np.int64).reshape(len(self.buckets), -1)

    def _ring(self, center, r):
        """Occupied bucket keys at Chebyshev distance ``r`` from ``center``."""
        dim = len(center)
        if r == 0:
            return [tuple(center)]
        if (2 * r + 1) ** dim > 2 * len(self._keys):
            cheb = np.abs(self._keys - center).max(axis=1)
            return [tuple(k) for k in self._keys[cheb == r]]
        return [tuple(c + o for c, o in zip(center, off))
                for off in itertools.product(range(-r, r + 1), repeat=dim)
                if max(abs(o) for o in off) == r]

    def query(self, point, k):
        """Indices and distances of the ``min(k, n)`` nearest sources."""
        if self.n == 0:
            raise ContractError("knn query on an empty index")
        if k < 1:
            raise ContractError(f"k must be >= 1, got {k}")
        p = np.asarray(point, dtype=np.float64).reshape(-1)
        k = min(int(k), self.n)
        center = np.floor((p - self.lo) / self.cell).astype(np.int64)
        # beyond this ring every bucket has been visited
        last = int(np.max(np.maximum(np.abs(center), np.abs(center - self.key_max))))
        found = []
        # rings closer than the key box hold no buckets
        r = int(np.max(np.maximum(np.maximum(-center, center - self.key_max), 0)))
        while True:
            for key in self._ring(center, r):
                idx = self.buckets.get(key)
                if idx is not None:
                    found.append(idx)
            if found:
                cand = np.concatenate(found)
                if cand.size >= k or r >= last:
                    d2 = _sq_dist(self.positions[cand], p)
                    # unvisited sources lie farther than r cells away
                    if r >= last or np.sqrt(np.partition(d2, k - 1)[k - 1]) \
                            < r * self.cell * (1.0 - 1e-9):
                        order = np.lexsort((cand, d2))[:k]
                        return cand[order], np.sqrt(d2[order])
            r += 1


def knn_query(index, point, k):
    idx, dist = index.query(point, k)
    return list(zip(idx.tolist(), dist.tolist()))


_weight_cache = OrderedDict()
_cache_lock = threading.Lock()
_CACHE_SIZE = 2048


def knn_weights(src_pos, dst_pos, k=DEFAULT_K):
    """Sparse (n_t x n_s) inverse-square-distance weight matrix, rows summing to 1."""
    src_pos = np.asarray(src_pos, dtype=np.float64)
    dst_pos = np.asarray(dst_pos, dtype=np.float64)
    if src_pos.shape[0] < 1:
        raise ContractError("kNN interpolation needs at least one source node")
    if k < 1:
        raise ContractError(f"k must be >= 1, got {k}")
    if src_pos.shape[1] != dst_pos.shape[1]:
        raise DimensionError(f"source dim {src_pos.shape[1]} != target dim {dst_pos.shape[1]}")
    key = (_digest(src_pos), _digest(dst_pos), int(k))
    with _cache_lock:
        hit = _weight_cache.get(key)
        if hit is not None:
            _weight_cache.move_to_end(key)
            return hit
    index = KnnIndex(src_pos)
    kk = min(int(k), src_pos.shape[0])
    n_t = dst_pos.shape[0]
    rows = np.repeat(np.arange(n_t), kk)
    cols = np.zeros(n_t * kk, dtype=np.int64)
    vals = np.zeros(n_t * kk)
    for t in range(n_t):
        idx, dist = index.query(dst_pos[t], kk)
        sl = slice(t * kk, (t + 1) * kk)
        cols[sl] = idx
        if dist[0] < ZERO_DISTANCE:
            w = np.zeros(kk)
            w[0] = 1.0
        else:
            w = 1.0 / (dist * dist)
            w /= w.sum()
        vals[sl] = w
    mat = sp.csr_matrix((vals, (rows, cols)), shape=(n_t, src_pos.shape[0]))
    mat.eliminate_zeros()
    with _cache_lock:
        _weight_cache[key] = mat
        while len(_weight_cache) > _CACHE_SIZE:
            _weight_cache.popitem(last=False)
    return mat


def knn_interpolate(values, src_pos, dst_pos, k=DEFAULT_K):
    """Project nodal ``values`` from ``src_pos`` onto ``dst_pos``.

    Differentiable with respect to ``values``; the weights are constants.
    """
    values = grad.as_tensor(values)
    if values.shape[0] != np.shape(src_pos)[0]:
        raise DimensionError(f"{values.shape[0]} value rows for {np.shape(src_pos)[0]} sources")
    return grad.sparse_apply(knn_weights(src_pos, dst_pos, k), values)


def project(values, src_mesh, dst_mesh, k=DEFAULT_K):
    """kNN projection between meshes; identity when both are the same node set."""
    values = grad.as_tensor(values)
    if src_mesh is dst_mesh or (src_mesh.n_nodes == dst_mesh.n_nodes
                                and src_mesh.fingerprint == dst_mesh.fingerprint):
        return values
    return knn_interpolate(values, src_mesh.positions, dst_mesh.positions, k)


# --- graph features ---------------------------------------------------------

def build_graph_features(sample, stats):
    """Normalized node features [u, P], edge features [P_src, P_dst], directed edges."""
    if stats is None:
        raise ConfigError("normalization stats are required to build graph features")
    mesh = sample.mesh
    if sample.values.shape[1] != stats.field_mean.size or mesh.dim != stats.pos_mean.size:
        raise DimensionError(
            f"stats for d={stats.field_mean.size}, D={stats.pos_mean.size} applied to "
            f"d={sample.values.shape[1]}, D={mesh.dim}")
    pos = stats.norm_positions(mesh.positions)
    node = np.concatenate([stats.norm_values(sample.values), pos], axis=1)
    g = mesh.graph
    edge = np.concatenate([pos[g.src], pos[g.dst]], axis=1)
    return node, edge, np.stack([g.src, g.dst], axis=1)


def edge_features(mesh, stats):
    pos = stats.norm_positions(mesh.positions)
    g = mesh.graph
    return np.concatenate([pos[g.src], pos[g.dst]], axis=1)


# --- persistence ------------------------------------------------------------

def _mesh_record(m):
    return {"id": m.id, "positions": m.positions.tolist(), "edges": m.edges.tolist()}


def _sample_record(s, role, pair_id, split, hr_mesh=None):
    rec = {"mesh_id": s.mesh.id, "role": role, "pair_id": pair_id, "split": split,
           "mu": s.mu.tolist(), "values": s.values.tolist()}
    if hr_mesh is not None:
        rec["hr_mesh_id"] = hr_mesh.id
    return rec


def dataset_records(ds):
    """Manifest dict plus mesh and sample record lists, in write order."""
    meshes = [_mesh_record(m) for m in ds.meshes()]
    samples = []
    pid = 0
    for split, pairs in (("paired", ds.paired), ("test", ds.test)):
        for p in pairs:
            samples.append(_sample_record(p.lr, "lr", pid, split))
            samples.append(_sample_record(p.hr, "hr", pid, split))
            pid += 1
    for u in ds.unpaired:
        samples.append(_sample_record(u.lr, "lr", pid, "unpaired", u.hr_mesh))
        pid += 1
    manifest = {
        "format": FORMAT,
        "N": ds.n_total,
        "N_h": len(ds.paired),
        "n_test": len(ds.test),
        "d": ds.d,
        "D": ds.dim,
        "stats": ds.stats.to_json(),
        "provenance": ds.provenance,
    }
    return manifest, meshes, samples


def save_dataset(ds, path):
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest, meshes, samples = dataset_records(ds)
    with open(path / "meshes.jsonl", "w") as f:
        for rec in meshes:
            f.write(json.dumps(rec) + "\n")
    with open(path / "samples.jsonl", "w") as f:
        for rec in samples:
            f.write(json.dumps(rec) + "\n")
    with open(path / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    return path


def dataset_fingerprint(path):
    """Content hash over the three dataset files."""
    path = Path(path)
    h = hashlib.sha256()
    for name in ("manifest.json", "meshes.jsonl", "samples.jsonl"):
        h.update(name.encode())
        h.update((path / name).read_bytes())
    return h.hexdigest()


def _read_jsonl(path):
    out = []
    with open(path) as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                out.append((lineno, json.loads(line)))
            except json.JSONDecodeError as exc:
                raise ParseError(path, lineno, f"malformed JSON ({exc.msg})") from None
    return out


def load_dataset(path):
    path = Path(path)
    try:
        manifest = json.loads((path / "manifest.json").read_text())
    except json.JSONDecodeError as exc:
        raise ParseError(path / "manifest.json", "manifest", exc.msg) from None
    if manifest.get("format") != FORMAT:
        raise ParseError(path / "manifest.json", "manifest",
                         f"unknown format {manifest.get('format')!r}")
    meshes = {}
    for lineno, rec in _read_jsonl(path / "meshes.jsonl"):
        try:
            meshes[rec["id"]] = Mesh(rec["id"], rec["positions"], rec["edges"])
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(path / "meshes.jsonl", lineno, str(exc)) from None

    lr, hr, hr_mesh_of, split_of = {}, {}, {}, {}
    spath = path / "samples.jsonl"
    for lineno, rec in _read_jsonl(spath):
        try:
            mesh = meshes[rec["mesh_id"]]
            s = FieldSample(mesh, rec["values"], rec["mu"])
            pid = int(rec["pair_id"])
            (lr if rec["role"] == "lr" else hr)[pid] = s
            if rec["role"] not in ("lr", "hr"):
                raise ValueError(f"unknown role {rec['role']!r}")
            split_of[pid] = rec["split"]
            if "hr_mesh_id" in rec:
                hr_mesh_of[pid] = meshes[rec["hr_mesh_id"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise ParseError(spath, lineno, f"{type(exc).__name__}: {exc}") from None

    paired, unpaired, test = [], [], []
    for pid in sorted(lr):
        split = split_of[pid]
        if split == "unpaired":
            if pid not in hr_mesh_of:
                raise ParseError(spath, f"pair {pid}", "unpaired sample without hr_mesh_id")
            unpaired.append(UnpairedSample(lr[pid], hr_mesh_of[pid]))
        else:
            if pid not in hr:
                raise ParseError(spath, f"pair {pid}", "paired sample without HR record")
            (test if split == "test" else paired).append(PairedSample(lr[pid], hr[pid]))
    if len(paired) != manifest["N_h"] or len(paired) + len(unpaired) != manifest["N"] \
            or len(test) != manifest.get("n_test", 0):
        raise ValidationError(
            f"{path}: manifest counts N={manifest['N']}, N_h={manifest['N_h']} do not match "
            f"{len(paired) + len(unpaired)} LR / {len(paired)} paired records")
    return SplitDataset(paired, unpaired, test, NormStats.from_json(manifest["stats"]),
                        manifest.get("provenance", {}))
