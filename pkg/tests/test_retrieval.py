from datetime import datetime, timezone

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nocbench import encoder, losses
from nocbench.errors import DataError, ShapeError
from nocbench.geo import DomainTag, GeoPoint, PlanarPoint
from nocbench.retrieval import (
    Retriever,
    RoutingConfig,
    build_db,
    query_domain,
    route_query,
    top_k,
    top_k_naive,
)
from nocbench.store import Checkpoint, DescriptorDB, ImageRecord, Manifest

from oracles import ranking_oracle

FP = "00" * 32


def unit_rows(rng, n, d):
    v = rng.normal(size=(n, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def db_of(vectors):
    return DescriptorDB(np.asarray(vectors, np.float32), [f"r{i}" for i in range(len(vectors))], FP)


def model(seed, out=8):
    return Checkpoint(encoder.init_params(4, 8, out, seed=seed), losses.init_head(3, out, seed=seed))


def planar_manifest(n, domain=None):
    return Manifest("planar", [ImageRecord(f"q{i}", "x", PlanarPoint(i * 100.0, 0), domain=domain) for i in range(n)])


class TestTopK:
    def test_one_hot(self):
        hits = top_k(db_of(np.eye(3)), [1.0, 0, 0], 1).hits
        assert hits[0].index == 0 and hits[0].similarity == 1.0 and hits[0].id == "r0"

    def test_tie_break(self):
        rows = np.array([[0, 1.0], [1.0, 0], [1.0, 0], [0.6, 0.8]])
        assert top_k(db_of(rows), [1.0, 0], 3).indices == [1, 2, 3]

    def test_matches_oracle_random(self):
        rng = np.random.default_rng(0)
        vecs = unit_rows(rng, 500, 16)
        db = db_of(vecs)
        for _ in range(100):
            q = unit_rows(rng, 1, 16)[0]
            k = int(rng.integers(1, 30))
            assert top_k(db, q, k, block_rows=64).indices == ranking_oracle(db.vectors, q, k)

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 60), st.integers(1, 70), st.integers(1, 17), st.integers(0, 2**31), st.booleans())
    def test_blocked_equals_naive(self, n, k, block, seed, quantize):
        rng = np.random.default_rng(seed)
        v = unit_rows(rng, n, 4)
        if quantize:
            # coarse grid makes exact ties common
            v = np.round(v * 2) / 2
            v[np.all(v == 0, axis=1)] = [1, 0, 0, 0]
            v /= np.linalg.norm(v, axis=1, keepdims=True)
        db = db_of(v)
        q = db.vectors[int(rng.integers(n))]
        assert top_k(db, q, k, block_rows=block).hits == top_k_naive(db, q, k).hits

    def test_k_larger_than_db(self):
        assert len(top_k(db_of(np.eye(3)), [1.0, 0, 0], 10)) == 3

    def test_empty_db(self):
        db = DescriptorDB(np.zeros((0, 3), np.float32), [], FP)
        assert top_k(db, [1.0, 0, 0], 5).hits == []

    def test_similarities_non_increasing(self):
        rng = np.random.default_rng(1)
        hits = top_k(db_of(unit_rows(rng, 200, 8)), unit_rows(rng, 1, 8)[0], 50, block_rows=7).hits
        sims = [h.similarity for h in hits]
        assert sims == sorted(sims, reverse=True)

    def test_errors(self):
        with pytest.raises(ShapeError):
            top_k(db_of(np.eye(3)), [1.0, 0], 1)
        with pytest.raises(DataError):
            top_k(db_of(np.eye(3)), [1.0, 0, 0], 0)

    def test_json_shape(self):
        out = top_k(db_of(np.eye(2)), [1.0, 0], 1).to_json("q")
        assert out == {"query_id": "q", "hits": [{"id": "r0", "sim": 1.0}]}


class TestBuildDB:
    def test_rows_and_determinism(self):
        rng = np.random.default_rng(2)
        imgs = [rng.random((8, 8, 3)) for _ in range(10)]
        m = planar_manifest(10)
        mdl = model(0)
        a, b = build_db(m, mdl, imgs), build_db(m, mdl, imgs)
        assert a.count == 10 and a.ids == m.ids
        assert np.all(np.abs(np.linalg.norm(a.vectors.astype(np.float64), axis=1) - 1) < 1e-5)
        assert a.vectors.tobytes() == b.vectors.tobytes()
        assert a.encoder_fingerprint == mdl.encoder_fingerprint

    def test_empty(self):
        db = build_db(planar_manifest(0), model(0), [])
        assert db.count == 0 and top_k(db, np.ones(8) / np.sqrt(8), 3).hits == []

    def test_threads_identical(self):
        rng = np.random.default_rng(3)
        imgs = [rng.random((8, 8, 3)) for _ in range(600)]
        m = planar_manifest(600)
        assert build_db(m, model(0), imgs, threads=1).vectors.tobytes() == \
            build_db(m, model(0), imgs, threads=3).vectors.tobytes()

    def test_count_mismatch(self):
        with pytest.raises(ShapeError):
            build_db(planar_manifest(2), model(0), [np.zeros((8, 8, 3))])


class TestRouting:
    def setup_method(self):
        self.day, self.night = model(0), model(1)
        self.routing = RoutingConfig(self.day, self.night)
        self.img = np.random.default_rng(4).random((8, 8, 3))

    def test_night_tag_uses_night_model(self):
        meta = ImageRecord("q", "x", PlanarPoint(0, 0), domain=DomainTag.NIGHT)
        d, dom = route_query(self.img, meta, self.routing)
        assert dom is DomainTag.NIGHT
        assert d.tobytes() == encoder.forward(self.img, self.night.params).tobytes()

    def test_day_tag_uses_day_model(self):
        meta = ImageRecord("q", "x", PlanarPoint(0, 0), domain=DomainTag.DAY)
        d, _ = route_query(self.img, meta, self.routing)
        assert d.tobytes() == encoder.forward(self.img, self.day.params).tobytes()

    def test_twilight_configurable(self):
        meta = ImageRecord("q", "x", PlanarPoint(0, 0), domain=DomainTag.TWILIGHT)
        d, _ = route_query(self.img, meta, self.routing)
        assert d.tobytes() == encoder.forward(self.img, self.night.params).tobytes()
        r2 = RoutingConfig(self.day, self.night, twilight_to_night=False)
        d2, _ = route_query(self.img, meta, r2)
        assert d2.tobytes() == encoder.forward(self.img, self.day.params).tobytes()

    def test_solar_midnight_routes_to_night(self):
        meta = ImageRecord("q", "x", GeoPoint(0.0, 0.0), utc=datetime(2024, 3, 20, 0, 7, tzinfo=timezone.utc))
        assert query_domain(meta) is DomainTag.NIGHT
        meta = ImageRecord("q", "x", GeoPoint(0.0, 0.0), utc=datetime(2024, 3, 20, 12, 7, tzinfo=timezone.utc))
        assert query_domain(meta) is DomainTag.DAY

    def test_missing_evidence(self):
        with pytest.raises(DataError):
            query_domain(ImageRecord("q", "x", GeoPoint(0, 0)))
        with pytest.raises(DataError):
            query_domain(ImageRecord("q", "x", PlanarPoint(0, 0), utc=datetime(2024, 1, 1, tzinfo=timezone.utc)))

    def test_out_dim_mismatch(self):
        with pytest.raises(ShapeError):
            RoutingConfig(model(0, 8), model(1, 6))


class TestRetriever:
    def setup_method(self):
        rng = np.random.default_rng(5)
        self.imgs = [rng.random((8, 8, 3)) for _ in range(12)]
        self.m = planar_manifest(12)
        self.day, self.night = model(0), model(1)
        self.day_db = build_db(self.m, self.day, self.imgs)
        self.night_db = build_db(self.m, self.night, self.imgs)

    def test_od_always_searches_day_db(self):
        r = Retriever(RoutingConfig(self.day, self.night, od_mode=True), self.day_db)
        for tag in DomainTag:
            assert r.database_for(tag) is self.day_db

    def test_non_od_uses_night_db_for_night(self):
        r = Retriever(RoutingConfig(self.day, self.night, od_mode=False), self.day_db, self.night_db)
        assert r.database_for(DomainTag.NIGHT) is self.night_db
        assert r.database_for(DomainTag.DAY) is self.day_db

    def test_day_rankings_unchanged_by_night_model(self):
        base = Retriever(RoutingConfig(self.day, self.day), self.day_db)
        od = Retriever(RoutingConfig(self.day, self.night), self.day_db)
        for rec, img in zip(self.m.records, self.imgs):
            meta = ImageRecord(rec.id, rec.image, rec.position, domain=DomainTag.DAY)
            assert base.search(img, meta, 5)[0].hits == od.search(img, meta, 5)[0].hits

    def test_fingerprint_checks(self):
        with pytest.raises(DataError):
            Retriever(RoutingConfig(self.day, self.night), self.night_db)
        with pytest.raises(DataError):
            Retriever(RoutingConfig(self.day, self.night, od_mode=False), self.day_db)
        with pytest.raises(DataError):
            Retriever(RoutingConfig(self.day, self.night, od_mode=False), self.day_db, self.day_db)
