import json
import struct
from datetime import datetime, timezone

import numpy as np
import pytest

from nocbench import encoder, losses
from nocbench.errors import DataError, FormatError, ShapeError
from nocbench.geo import DomainTag, GeoPoint, PlanarPoint
from nocbench.store import (
    Checkpoint,
    DescriptorDB,
    ImageRecord,
    Manifest,
    load_checkpoint,
    load_db,
    load_image,
    read_manifest,
    save_checkpoint,
    save_db,
    save_image,
    write_manifest,
)


def unit_rows(n, d, seed=0):
    v = np.random.default_rng(seed).normal(size=(n, d))
    return (v / np.linalg.norm(v, axis=1, keepdims=True)).astype(np.float32)


FP = "ab" * 32


def small_ckpt(seed=0, head=True):
    p = encoder.init_params(4, 8, 6, seed=seed)
    h = losses.init_head(5, 6, seed=seed) if head else None
    return Checkpoint(p, h, meta={"note": "x"})


class TestManifest:
    def test_roundtrip(self, tmp_path):
        recs = [
            ImageRecord("a", "a.npy", GeoPoint(35.0, 139.0), datetime(2020, 1, 1, 12, tzinfo=timezone.utc), 0,
                        DomainTag.NIGHT),
            ImageRecord("b", "b.npy", GeoPoint(35.001, 139.0)),
        ]
        m = Manifest("geo", recs)
        write_manifest(m, tmp_path / "m.jsonl")
        back = read_manifest(tmp_path / "m.jsonl")
        assert [r.to_json() for r in back.records] == [r.to_json() for r in recs]

    def test_duplicate_id_line_reported(self, tmp_path):
        rows = [{"id": "a", "image": "x", "x_m": 0, "y_m": 0}, {"id": "a", "image": "y", "x_m": 1, "y_m": 0}]
        (tmp_path / "m.jsonl").write_text("\n".join(json.dumps(r) for r in rows))
        with pytest.raises(DataError, match="line 2"):
            read_manifest(tmp_path / "m.jsonl")

    def test_mixed_coordinates_rejected(self, tmp_path):
        rows = [{"id": "a", "image": "x", "x_m": 0, "y_m": 0}, {"id": "b", "image": "y", "lat": 1, "lon": 0}]
        (tmp_path / "m.jsonl").write_text("\n".join(json.dumps(r) for r in rows))
        with pytest.raises(DataError):
            read_manifest(tmp_path / "m.jsonl")

    def test_malformed_json(self, tmp_path):
        (tmp_path / "m.jsonl").write_text('{"id": "a", "image": "x", "x_m": 0, "y_m": 0}\n{oops\n')
        with pytest.raises(DataError, match="line 2"):
            read_manifest(tmp_path / "m.jsonl")

    def test_missing_label_is_data_error(self):
        m = Manifest("planar", [ImageRecord("a", "x", PlanarPoint(0, 0))])
        with pytest.raises(DataError):
            m.labels

    @pytest.mark.parametrize("bad", [
        {"id": "a", "image": "x"},
        {"id": "", "image": "x", "x_m": 0, "y_m": 0},
        {"id": "a", "image": "x", "x_m": 0, "y_m": 0, "label": -1},
        {"id": "a", "image": "x", "lat": 95, "lon": 0},
    ])
    def test_invalid_records(self, bad):
        with pytest.raises(DataError):
            ImageRecord.from_json(bad)


class TestImages:
    def test_npy_roundtrip(self, tmp_path):
        img = np.random.default_rng(0).random((8, 8, 3))
        save_image(img, tmp_path / "i.npy")
        np.testing.assert_array_equal(load_image("i.npy", tmp_path), img.astype(np.float32))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataError):
            load_image("nope.npy", tmp_path)

    def test_wrong_shape(self, tmp_path):
        np.save(tmp_path / "g.npy", np.zeros((8, 8)))
        with pytest.raises(DataError):
            load_image("g.npy", tmp_path)


class TestDescriptorDB:
    def test_roundtrip_bit_exact(self, tmp_path):
        db = DescriptorDB(unit_rows(7, 5), [f"id{i}" for i in range(7)], FP)
        save_db(db, tmp_path / "d.db")
        back = load_db(tmp_path / "d.db")
        assert back.ids == db.ids and back.encoder_fingerprint == FP
        assert back.vectors.tobytes() == db.vectors.tobytes()

    def test_layout(self, tmp_path):
        db = DescriptorDB(unit_rows(2, 3), ["a", "bc"], FP)
        save_db(db, tmp_path / "d.db")
        buf = (tmp_path / "d.db").read_bytes()
        assert buf[:4] == b"NOCP"
        assert struct.unpack_from("<IIQ", buf, 4) == (1, 3, 2)
        assert len(buf) == 20 + 2 * 3 * 4 + (4 + 1) + (4 + 2) + 32

    def test_empty_db(self, tmp_path):
        db = DescriptorDB(np.zeros((0, 4), np.float32), [], FP)
        save_db(db, tmp_path / "d.db")
        assert load_db(tmp_path / "d.db").count == 0

    def test_bad_magic(self, tmp_path):
        db = DescriptorDB(unit_rows(2, 3), ["a", "b"], FP)
        save_db(db, tmp_path / "d.db")
        buf = bytearray((tmp_path / "d.db").read_bytes())
        buf[0:4] = b"XXXX"
        (tmp_path / "d.db").write_bytes(bytes(buf))
        with pytest.raises(FormatError):
            load_db(tmp_path / "d.db")

    @pytest.mark.parametrize("cut", [3, 10, 30, 1])
    def test_truncation(self, tmp_path, cut):
        db = DescriptorDB(unit_rows(4, 3), list("abcd"), FP)
        save_db(db, tmp_path / "d.db")
        buf = (tmp_path / "d.db").read_bytes()
        (tmp_path / "d.db").write_bytes(buf[:-cut] if cut < 32 else buf[:cut])
        with pytest.raises(FormatError):
            load_db(tmp_path / "d.db")

    def test_trailing_bytes(self, tmp_path):
        db = DescriptorDB(unit_rows(2, 3), ["a", "b"], FP)
        save_db(db, tmp_path / "d.db")
        with open(tmp_path / "d.db", "ab") as fh:
            fh.write(b"\0")
        with pytest.raises(FormatError):
            load_db(tmp_path / "d.db")

    def test_unnormalized_rows_rejected(self):
        db = DescriptorDB(np.ones((2, 3), np.float32), ["a", "b"], FP)
        with pytest.raises(FormatError):
            db.check_norms()

    def test_id_count_mismatch(self):
        with pytest.raises(ShapeError):
            DescriptorDB(unit_rows(2, 3), ["a"], FP)


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        c = small_ckpt()
        save_checkpoint(c, tmp_path / "m.json")
        back = load_checkpoint(tmp_path / "m.json")
        assert back.fingerprint == c.fingerprint
        assert back.blob() == c.blob()
        assert back.meta == {"note": "x"}

    def test_without_head(self, tmp_path):
        c = small_ckpt(head=False)
        save_checkpoint(c, tmp_path / "m.json")
        assert load_checkpoint(tmp_path / "m.json").head is None

    def test_fingerprint_ignores_meta(self):
        a, b = small_ckpt(), small_ckpt()
        b.meta["other"] = 1
        assert a.fingerprint == b.fingerprint
        assert small_ckpt(seed=1).fingerprint != a.fingerprint

    def test_blob_length_mismatch(self, tmp_path):
        save_checkpoint(small_ckpt(), tmp_path / "m.json")
        blob = tmp_path / "m.json.bin"
        blob.write_bytes(blob.read_bytes()[:-4])
        with pytest.raises(ShapeError):
            load_checkpoint(tmp_path / "m.json")

    def test_declared_dims_mismatch(self, tmp_path):
        save_checkpoint(small_ckpt(), tmp_path / "m.json")
        h = json.loads((tmp_path / "m.json").read_text())
        h["encoder"]["out_dim"] = 99
        (tmp_path / "m.json").write_text(json.dumps(h))
        with pytest.raises(ShapeError):
            load_checkpoint(tmp_path / "m.json")

    def test_corrupt_blob_detected(self, tmp_path):
        save_checkpoint(small_ckpt(), tmp_path / "m.json")
        blob = tmp_path / "m.json.bin"
        b = bytearray(blob.read_bytes())
        b[0] ^= 0xFF
        blob.write_bytes(bytes(b))
        with pytest.raises(FormatError):
            load_checkpoint(tmp_path / "m.json")

    def test_head_dim_mismatch(self):
        p = encoder.init_params(4, 8, 6)
        with pytest.raises(ShapeError):
            Checkpoint(p, losses.init_head(3, 5))
