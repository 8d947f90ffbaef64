"""Exact cosine top-k search and day/night query routing.

All stored and query vectors are unit-norm, so similarity is a plain dot
product. Ranking is by similarity descending, ties by ascending row index.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import encoder
from .errors import DataError, ShapeError
from .geo import DomainTag, SolarConfig, classify_domain
from .store import Checkpoint, DescriptorDB, ImageRecord, Manifest, load_images

BLOCK_ROWS = 4096
ENCODE_BATCH = 256


class Hit(NamedTuple):
    index: int
    id: str
    similarity: float


@dataclass
class RankedList:
    hits: list = field(default_factory=list)

    @property
    def indices(self) -> list:
        return [h.index for h in self.hits]

    def __len__(self):
        return len(self.hits)

    def to_json(self, query_id: str) -> dict:
        return {"query_id": query_id, "hits": [{"id": h.id, "sim": h.similarity} for h in self.hits]}


def encode_images(images, model: Checkpoint, threads: int = 1) -> np.ndarray:
    """Descriptors (N, D) float64 for a list of images, in input order."""
    images = list(images)
    if not images:
        return np.zeros((0, model.params.out_dim))
    chunks = [np.stack(images[i:i + ENCODE_BATCH]) for i in range(0, len(images), ENCODE_BATCH)]
    run = lambda c: encoder.forward_batch(c, model.params)  # noqa: E731
    if threads > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(run, chunks))
    else:
        parts = [run(c) for c in chunks]
    return np.concatenate(parts)


def build_db(manifest: Manifest, model: Checkpoint, images=None, base_dir=None, threads: int = 1) -> DescriptorDB:
    """One unit row per manifest record, computed with ``model``."""
    if images is None:
        images = load_images(manifest, base_dir)
    if len(images) != len(manifest):
        raise ShapeError(f"{len(images)} images for {len(manifest)} records")
    desc = encode_images(images, model, threads).astype(np.float32)
    # renormalize after the float32 cast so stored rows are unit to f32 precision
    if len(desc):
        desc /= np.linalg.norm(desc, axis=1, keepdims=True)
    return DescriptorDB(desc.reshape(-1, model.params.out_dim), manifest.ids, model.encoder_fingerprint)


def _similarities(vectors: np.ndarray, q: np.ndarray) -> np.ndarray:
    # row-wise product and sum rather than a BLAS matvec: each row's value
    # must not depend on how many rows share the call, or block cuts change ties
    return (vectors.astype(np.float64) * q).sum(axis=1)


def _rank(sims: np.ndarray, idx: np.ndarray, k: int):
    order = np.lexsort((idx, -sims))[:k]
    return sims[order], idx[order]


def _check_query(db: DescriptorDB, query, k: int) -> np.ndarray:
    q = np.asarray(query, dtype=np.float64).reshape(-1)
    if q.shape[0] != db.dim:
        raise ShapeError(f"query dim {q.shape[0]} != db dim {db.dim}")
    if k < 1:
        raise DataError("k must be >= 1")
    return q


def top_k(db: DescriptorDB, query, k: int, block_rows: int = BLOCK_ROWS) -> RankedList:
    """Exact k best rows of ``db`` for ``query``.

    Each block keeps every candidate tied with its k-th best value, so the
    per-block cut never drops a row that the global tie-break would prefer.
    """
    q = _check_query(db, query, k)
    best_s = np.zeros(0)
    best_i = np.zeros(0, dtype=np.int64)
    for start in range(0, db.count, block_rows):
        s = _similarities(db.vectors[start:start + block_rows], q)
        i = np.arange(start, start + len(s), dtype=np.int64)
        if len(s) > k:
            kth = np.partition(s, len(s) - k)[len(s) - k]
            keep = s >= kth
            s, i = s[keep], i[keep]
        best_s, best_i = _rank(np.concatenate([best_s, s]), np.concatenate([best_i, i]), k)
    return RankedList([Hit(int(i), db.ids[i], float(s)) for s, i in zip(best_s, best_i)])


def top_k_naive(db: DescriptorDB, query, k: int) -> RankedList:
    """Full sort of every similarity; the reference for :func:`top_k`."""
    q = _check_query(db, query, k)
    s = _similarities(db.vectors, q)
    s, i = _rank(s, np.arange(db.count, dtype=np.int64), k)
    return RankedList([Hit(int(j), db.ids[j], float(v)) for v, j in zip(s, i)])


# --------------------------------------------------------------------------
# Routing


@dataclass
class RoutingConfig:
    day_model: Checkpoint
    night_model: Checkpoint
    od_mode: bool = True
    solar: SolarConfig = field(default_factory=SolarConfig)
    twilight_to_night: bool = True

    def __post_init__(self):
        if self.day_model.params.out_dim != self.night_model.params.out_dim:
            raise ShapeError("day and night models must share out_dim")


def query_domain(meta: ImageRecord, solar: SolarConfig = SolarConfig()) -> DomainTag:
    """Explicit tag if present, otherwise derived from sun elevation."""
    if meta.domain is not None:
        return DomainTag.parse(meta.domain)
    if meta.utc is None:
        raise DataError(f"query {meta.id!r} has neither a domain tag nor a timestamp")
    if meta.coord_mode != "geo":
        raise DataError(f"query {meta.id!r}: solar routing needs lat/lon, not planar coordinates")
    return classify_domain(meta.position, meta.utc, solar)


def model_for(domain: DomainTag, routing: RoutingConfig) -> Checkpoint:
    if domain is DomainTag.NIGHT or (domain is DomainTag.TWILIGHT and routing.twilight_to_night):
        return routing.night_model
    return routing.day_model


def route_query(img, meta: ImageRecord, routing: RoutingConfig):
    """Encode a query with the model its domain calls for.

    Returns ``(descriptor, domain)``.
    """
    domain = query_domain(meta, routing.solar)
    return encoder.forward(img, model_for(domain, routing).params), domain


class Retriever:
    """Day/night retrieval over one or two descriptor databases.

    In OD mode every query searches ``day_db`` (built by the day model);
    otherwise night-routed queries search ``night_db``, built by the night
    model.
    """

    def __init__(self, routing: RoutingConfig, day_db: DescriptorDB, night_db: DescriptorDB | None = None):
        if day_db.encoder_fingerprint != routing.day_model.encoder_fingerprint:
            raise DataError("day database was not built by the day model")
        if not routing.od_mode:
            if night_db is None:
                raise DataError("non-OD retrieval needs a night-model database")
            if night_db.encoder_fingerprint != routing.night_model.encoder_fingerprint:
                raise DataError("night database was not built by the night model")
        self.routing = routing
        self.day_db = day_db
        self.night_db = night_db

    def database_for(self, domain: DomainTag) -> DescriptorDB:
        if self.routing.od_mode or model_for(domain, self.routing) is self.routing.day_model:
            if self.day_db.encoder_fingerprint != self.routing.day_model.encoder_fingerprint:
                raise DataError("day database fingerprint no longer matches the day model")
            return self.day_db
        return self.night_db

    def search(self, img, meta: ImageRecord, k: int):
        desc, domain = route_query(img, meta, self.routing)
        return top_k(self.database_for(domain), desc, k), domain
