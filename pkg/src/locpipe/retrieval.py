"""Global image description and retrieval.

Implements residual aggregation of local descriptors against a codebook,
both with hard (nearest-centroid) and soft (learned softmax) assignment,
fusion of several global features into one unit vector, exhaustive cosine
search, and match-count reranking of retrieved candidates.

Aggregated matrices are intra-normalized (per-cluster row L2) and then
globally L2-normalized, which bounds the influence any one cluster can
have on similarities.
"""

import struct
from dataclasses import dataclass

import numpy as np

from . import _accel
from .errors import (BadMagic, DimensionMismatch, EmptyIndex, MissingFeatures,
                     TruncatedFile, ZeroVector)
from .matching import match_descriptors

__all__ = [
    "Codebook",
    "GlobalDescriptor",
    "vlad_hard",
    "vlad_soft",
    "soft_assign_weights",
    "fuse",
    "DescriptorIndex",
    "retrieve",
    "rerank_by_matches",
    "fit_codebook",
    "save_codebook",
    "load_codebook",
    "save_global_descriptors",
    "load_global_descriptors",
]

GDS_MAGIC = b"GDS1"
CBK_MAGIC = b"CBK1"


@dataclass
class Codebook:
    """Cluster centroids plus soft-assignment parameters.

    `w` (K x D) and `b` (K,) parametrize per-cluster scores w_k.x + b_k
    whose softmax gives the soft assignment; `from_centroids` sets them so
    soft assignment equals the distance-based form exp(-alpha |x - c_k|^2).
    """

    centroids: np.ndarray
    w: np.ndarray
    b: np.ndarray
    alpha: float = 100.0

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        if self.centroids.ndim != 2 or self.centroids.shape[0] < 1:
            raise ValueError("centroids must be a nonempty K x D matrix")
        if not np.all(np.isfinite(self.centroids)):
            raise ValueError("centroids must be finite")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        self.w = np.asarray(self.w, dtype=np.float64).reshape(self.centroids.shape)
        self.b = np.asarray(self.b, dtype=np.float64).reshape(self.k)

    @classmethod
    def from_centroids(cls, centroids, alpha: float = 100.0) -> "Codebook":
        centroids = np.asarray(centroids, dtype=np.float64)
        w = 2.0 * alpha * centroids
        b = -alpha * np.sum(centroids * centroids, axis=1)
        return cls(centroids=centroids, w=w, b=b, alpha=alpha)

    @property
    def k(self):
        return self.centroids.shape[0]

    @property
    def dim(self):
        return self.centroids.shape[1]


def _as_descriptor_matrix(features):
    desc = getattr(features, "descriptors", features)
    desc = np.asarray(desc, dtype=np.float64)
    if desc.ndim != 2:
        desc = desc.reshape(0 if desc.size == 0 else -1, desc.shape[-1] if desc.ndim else 0)
    return desc


def _normalize_aggregate(v):
    """Intra-normalization per cluster row, then global L2."""
    norms = np.linalg.norm(v, axis=1)
    nz = norms > 0
    v[nz] /= norms[nz, None]
    total = np.linalg.norm(v)
    if total > 0:
        v /= total
    return v


def vlad_hard(features, codebook: Codebook) -> np.ndarray:
    """Sum of descriptor residuals to each nearest centroid, normalized.

    Empty input returns the K x D zero matrix with normalization skipped.
    """
    desc = _as_descriptor_matrix(features)
    if desc.size and desc.shape[1] != codebook.dim:
        raise DimensionMismatch(
            f"descriptor dim {desc.shape[1]} vs codebook dim {codebook.dim}")
    if desc.shape[0] == 0:
        return np.zeros((codebook.k, codebook.dim))
    v, _ = _accel.vlad_hard_accumulate(desc, codebook.centroids)
    return _normalize_aggregate(v)


def soft_assign_weights(features, codebook: Codebook) -> np.ndarray:
    """(N, K) softmax weights of each descriptor over the clusters."""
    desc = _as_descriptor_matrix(features)
    if desc.size and desc.shape[1] != codebook.dim:
        raise DimensionMismatch(
            f"descriptor dim {desc.shape[1]} vs codebook dim {codebook.dim}")
    _, weights = _accel.vlad_soft_accumulate(desc, codebook.centroids,
                                             codebook.w, codebook.b)
    return weights


def vlad_soft(features, codebook: Codebook) -> np.ndarray:
    """Soft-assignment residual aggregation, normalized like `vlad_hard`."""
    desc = _as_descriptor_matrix(features)
    if desc.size and desc.shape[1] != codebook.dim:
        raise DimensionMismatch(
            f"descriptor dim {desc.shape[1]} vs codebook dim {codebook.dim}")
    if desc.shape[0] == 0:
        return np.zeros((codebook.k, codebook.dim))
    v, _ = _accel.vlad_soft_accumulate(desc, codebook.centroids,
                                       codebook.w, codebook.b)
    return _normalize_aggregate(v)


@dataclass
class GlobalDescriptor:
    """Named unit sub-descriptors plus their fused unit-norm view."""

    subs: list
    fused: np.ndarray

    def sub(self, name):
        for n, v in self.subs:
            if n == name:
                return v
        raise KeyError(name)


def fuse(named_vectors, weights=None) -> GlobalDescriptor:
    """Normalize each sub-descriptor and concatenate with 1/sqrt(F) scaling.

    The fused cosine similarity then equals the mean of per-sub cosines
    (a weighted mean when `weights` are given).
    """
    named_vectors = list(named_vectors)
    if not named_vectors:
        raise ZeroVector("need at least one sub-descriptor")
    if weights is None:
        weights = np.ones(len(named_vectors))
    weights = np.asarray(weights, dtype=np.float64).reshape(len(named_vectors))
    if np.any(weights < 0) or weights.sum() == 0:
        raise ValueError("fusion weights must be nonnegative, not all zero")
    subs = []
    for name, vec in named_vectors:
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(vec)):
            raise ZeroVector(f"sub-descriptor {name!r} has non-finite entries")
        norm = np.linalg.norm(vec)
        if norm == 0:
            raise ZeroVector(f"sub-descriptor {name!r} is the zero vector")
        subs.append((name, vec / norm))
    # sqrt weights normalized so the concatenation has unit norm and the
    # fused cosine decomposes as sum_i w_i * cos_i with sum w_i = 1
    scale = np.sqrt(weights / weights.sum())
    fused = np.concatenate([s * v for s, (_, v) in zip(scale, subs)])
    return GlobalDescriptor(subs=subs, fused=fused)


class DescriptorIndex:
    """Exhaustive cosine-similarity index over fused global descriptors."""

    def __init__(self, vectors: dict):
        if not vectors:
            raise EmptyIndex("no database descriptors")
        self.ids = sorted(vectors)
        mat = []
        dim = None
        for i in self.ids:
            v = vectors[i]
            v = v.fused if isinstance(v, GlobalDescriptor) else np.asarray(v, float)
            v = v.reshape(-1)
            if dim is None:
                dim = v.size
            elif v.size != dim:
                raise DimensionMismatch("database descriptors have mixed dims")
            n = np.linalg.norm(v)
            if n == 0:
                raise ZeroVector(f"database descriptor {i!r} is zero")
            mat.append(v / n)
        self.matrix = np.array(mat)

    def __len__(self):
        return len(self.ids)

    def similarities(self, query):
        q = query.fused if isinstance(query, GlobalDescriptor) else np.asarray(query, float)
        q = q.reshape(-1)
        if q.size != self.matrix.shape[1]:
            raise DimensionMismatch(
                f"query dim {q.size} vs index dim {self.matrix.shape[1]}")
        n = np.linalg.norm(q)
        if n == 0:
            raise ZeroVector("query descriptor is zero")
        return self.matrix @ (q / n)


def retrieve(query, index: DescriptorIndex, m: int, exclude=()):
    """Top-m database ids by fused cosine, descending; ties by ascending id."""
    if len(index) == 0:
        raise EmptyIndex("no database descriptors")
    sims = index.similarities(query)
    exclude = set(exclude)
    ranked = sorted(
        (i for i in range(len(index.ids)) if index.ids[i] not in exclude),
        key=lambda i: (-sims[i], index.ids[i]),
    )
    return [index.ids[i] for i in ranked[:m]]


def rerank_by_matches(query_features, candidates, feature_provider,
                      n: int, matcher=match_descriptors, ratio=None):
    """Sort candidates by match count against the query, keep the top n.

    Ties preserve the incoming (retrieval) order. `feature_provider` is a
    mapping or callable id -> LocalFeatureSet.
    """
    counts = []
    for cand in candidates:
        try:
            feats = feature_provider(cand) if callable(feature_provider) \
                else feature_provider[cand]
        except KeyError:
            raise MissingFeatures(cand) from None
        if feats is None:
            raise MissingFeatures(cand)
        kwargs = {} if ratio is None else {"ratio": ratio}
        counts.append(len(matcher(query_features, feats, **kwargs)))
    order = sorted(range(len(candidates)), key=lambda i: (-counts[i], i))
    return [candidates[i] for i in order[:n]]


# ---------------------------------------------------------------------------
# codebook fitting (used by the synthetic harness; real codebooks are ingested)


def fit_codebook(descriptors, k: int, seed: int = 0, iters: int = 25,
                 alpha: float = 100.0) -> Codebook:
    """Plain Lloyd k-means over descriptor rows, deterministic per seed."""
    desc = _as_descriptor_matrix(descriptors)
    if desc.shape[0] < k:
        raise ValueError(f"need at least {k} descriptors to fit {k} centroids")
    rng = np.random.default_rng(seed)
    cents = desc[rng.choice(desc.shape[0], size=k, replace=False)].copy()
    for _ in range(iters):
        d2 = _accel.pairwise_sq_dists(desc, cents)
        assign = np.argmin(d2, axis=1)
        moved = 0.0
        for kk in range(k):
            members = desc[assign == kk]
            if len(members) == 0:
                # re-seed an empty cluster at the overall farthest descriptor
                far = int(np.argmax(np.min(d2, axis=1)))
                new = desc[far]
            else:
                new = members.mean(axis=0)
            moved = max(moved, float(np.linalg.norm(new - cents[kk])))
            cents[kk] = new
        if moved < 1e-12:
            break
    return Codebook.from_centroids(cents, alpha=alpha)


# ---------------------------------------------------------------------------
# file formats


def save_codebook(path, codebook: Codebook):
    with open(path, "wb") as fh:
        fh.write(CBK_MAGIC)
        fh.write(struct.pack("<IIf", codebook.k, codebook.dim, codebook.alpha))
        fh.write(codebook.centroids.astype("<f4").tobytes())
        fh.write(codebook.w.astype("<f4").tobytes())
        fh.write(codebook.b.astype("<f4").tobytes())


def load_codebook(path) -> Codebook:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 16:
        raise TruncatedFile("file shorter than header", path=path)
    if blob[:4] != CBK_MAGIC:
        raise BadMagic(f"expected {CBK_MAGIC!r}, found {blob[:4]!r}", path=path)
    k, d, alpha = struct.unpack_from("<IIf", blob, 4)
    need = 16 + 4 * (2 * k * d + k)
    if len(blob) < need:
        raise TruncatedFile(f"need {need} bytes, file has {len(blob)}", path=path)
    off = 16
    cents = np.frombuffer(blob, "<f4", k * d, off).reshape(k, d).astype(np.float64)
    off += 4 * k * d
    w = np.frombuffer(blob, "<f4", k * d, off).reshape(k, d).astype(np.float64)
    off += 4 * k * d
    b = np.frombuffer(blob, "<f4", k, off).astype(np.float64)
    return Codebook(centroids=cents, w=w, b=b, alpha=float(alpha))


def save_global_descriptors(path, vectors: dict):
    """Write {image name: vector} with a common dimension."""
    names = sorted(vectors)
    if not names:
        raise ZeroVector("nothing to save")
    dim = np.asarray(vectors[names[0]]).reshape(-1).size
    with open(path, "wb") as fh:
        fh.write(GDS_MAGIC)
        fh.write(struct.pack("<II", len(names), dim))
        for name in names:
            vec = np.asarray(vectors[name], dtype=np.float64).reshape(-1)
            if vec.size != dim:
                raise DimensionMismatch(f"descriptor {name!r} has dim {vec.size}, expected {dim}")
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(vec.astype("<f4").tobytes())


def load_global_descriptors(path) -> dict:
    """Read {image name: unit vector}; vectors are re-normalized on load."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 12:
        raise TruncatedFile("file shorter than header", path=path)
    if blob[:4] != GDS_MAGIC:
        raise BadMagic(f"expected {GDS_MAGIC!r}, found {blob[:4]!r}", path=path)
    count, dim = struct.unpack_from("<II", blob, 4)
    off = 12
    out = {}
    for _ in range(count):
        if off + 2 > len(blob):
            raise TruncatedFile("truncated name length", path=path)
        (nlen,) = struct.unpack_from("<H", blob, off)
        off += 2
        if off + nlen + 4 * dim > len(blob):
            raise TruncatedFile("truncated descriptor record", path=path)
        name = blob[off:off + nlen].decode("utf-8")
        off += nlen
        vec = np.frombuffer(blob, "<f4", dim, off).astype(np.float64)
        off += 4 * dim
        norm = np.linalg.norm(vec)
        if not np.isfinite(norm) or norm == 0:
            raise ZeroVector(f"descriptor {name!r} is zero or non-finite")
        out[name] = vec / norm
    return out
