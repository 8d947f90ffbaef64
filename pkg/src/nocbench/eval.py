"""Recall@N under a distance criterion, split by query domain."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError
from .geo import DomainTag, SolarConfig, haversine_many
from .retrieval import Retriever
from .store import ImageRecord, Manifest

DEFAULT_NS = (1, 5, 10)
DEFAULT_THRESHOLD_M = 25.0


def _distances(query: ImageRecord, db_manifest: Manifest) -> np.ndarray:
    if query.coord_mode != db_manifest.coord_mode:
        raise DataError(f"query {query.id!r} is {query.coord_mode}, database is {db_manifest.coord_mode}")
    xy = db_manifest.coords()
    if query.coord_mode == "geo":
        return haversine_many(query.position.lat, query.position.lon, xy[:, 0], xy[:, 1])
    return np.hypot(xy[:, 0] - query.position.x_m, xy[:, 1] - query.position.y_m)


def positives(query: ImageRecord, db_manifest: Manifest, threshold_m: float = DEFAULT_THRESHOLD_M) -> set:
    """Indices of database records within ``threshold_m`` (inclusive)."""
    if len(db_manifest) == 0:
        return set()
    return set(np.flatnonzero(_distances(query, db_manifest) <= threshold_m).tolist())


@dataclass
class SubsetRecall:
    n_queries: int
    recall_at: dict
    n_without_positives: int = 0

    def to_json(self) -> dict:
        return {"n_queries": self.n_queries, "n_without_positives": self.n_without_positives,
                "recall_at": {str(n): r for n, r in self.recall_at.items()}}


def recall_at_n(ranked, positive_sets, ns=DEFAULT_NS) -> SubsetRecall:
    """Fraction of queries with a positive among their top-N hits.

    ``ranked`` holds per-query ordered db indices (or RankedLists).
    Queries with no positives are left out of the denominator and counted
    in ``n_without_positives``.
    """
    ns = sorted(set(int(n) for n in ns))
    if not ns:
        raise DataError("need at least one N")
    if ns[0] < 1:
        raise DataError("N must be >= 1")
    ranked = list(ranked)
    positive_sets = list(positive_sets)
    if len(ranked) != len(positive_sets):
        raise DataError("ranked lists and positive sets differ in length")
    hits = {n: 0 for n in ns}
    counted = skipped = 0
    for rl, pos in zip(ranked, positive_sets):
        if not pos:
            skipped += 1
            continue
        counted += 1
        idx = rl.indices if hasattr(rl, "indices") else list(rl)
        first = next((r for r, i in enumerate(idx) if i in pos), None)
        for n in ns:
            if first is not None and first < n:
                hits[n] += 1
    recall = {n: (hits[n] / counted if counted else float("nan")) for n in ns}
    return SubsetRecall(counted, recall, skipped)


def segment_queries(manifest: Manifest, solar: SolarConfig = SolarConfig()) -> dict:
    """Partition query ids by domain (explicit tag, else sun elevation)."""
    from .retrieval import query_domain

    buckets = {}
    for r in manifest.records:
        buckets.setdefault(query_domain(r, solar), []).append(r.id)
    return buckets


@dataclass
class RecallReport:
    subsets: dict
    threshold_m: float = DEFAULT_THRESHOLD_M
    ns: tuple = DEFAULT_NS
    od_mode: bool = True
    meta: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "threshold_m": self.threshold_m,
            "ns": list(self.ns),
            "od_mode": self.od_mode,
            "subsets": {DomainTag.parse(k).value: v.to_json() for k, v in self.subsets.items()},
            **({"meta": self.meta} if self.meta else {}),
        }

    def check_monotone(self) -> None:
        for tag, sub in self.subsets.items():
            vals = [sub.recall_at[n] for n in sorted(sub.recall_at)]
            vals = [v for v in vals if v == v]
            if any(b < a for a, b in zip(vals, vals[1:])):
                raise AssertionError(f"recall not monotone in N for {tag}")


def format_recalls(values) -> str:
    """``(0.53, 0.712, 0.764)`` -> ``"53.0 / 71.2 / 76.4"``."""
    return " / ".join("n/a" if v is None or v != v else f"{100.0 * v:.1f}" for v in values)


def render_report(report: RecallReport) -> str:
    ns = list(report.ns)
    header = "R@" + " / R@".join(str(n) for n in ns)
    lines = [f"{'subset':<10}{'queries':>8}  {header}"]
    order = [DomainTag.DAY, DomainTag.TWILIGHT, DomainTag.NIGHT]
    tags = [t for t in order if t in report.subsets] + [t for t in report.subsets if t not in order]
    for tag in tags:
        sub = report.subsets[tag]
        vals = [sub.recall_at.get(n) if sub.n_queries else None for n in ns]
        lines.append(f"{DomainTag.parse(tag).value:<10}{sub.n_queries:>8}  {format_recalls(vals)}")
    return "\n".join(lines)


def evaluate(retriever: Retriever, query_manifest: Manifest, query_images, db_manifest: Manifest,
             ns=DEFAULT_NS, threshold_m: float = DEFAULT_THRESHOLD_M):
    """Route and search every query, then score per domain.

    Returns ``(report, results)`` where ``results`` maps query id to its
    (RankedList, domain).
    """
    if len(query_images) != len(query_manifest):
        raise DataError("query images and manifest differ in length")
    k = min(max(ns), max(len(db_manifest), 1))
    by_domain, results = {}, {}
    for rec, img in zip(query_manifest.records, query_images):
        rl, domain = retriever.search(img, rec, k)
        results[rec.id] = (rl, domain)
        by_domain.setdefault(domain, []).append((rl, positives(rec, db_manifest, threshold_m)))
    subsets = {}
    for domain, pairs in by_domain.items():
        subsets[domain] = recall_at_n([p[0] for p in pairs], [p[1] for p in pairs], ns)
    report = RecallReport(subsets, threshold_m, tuple(sorted(ns)), retriever.routing.od_mode)
    report.check_monotone()
    return report, results
