"""On-disk formats: JSON-Lines manifests, the ``NOCP`` descriptor database and
JSON+blob checkpoints.

Descriptor database layout (all little-endian)::

    b"NOCP" | u32 version=1 | u32 dim | u64 count
    | count*dim f32 row-major vectors
    | count x (u32 byte length, UTF-8 id)
    | 32-byte encoder fingerprint

Checkpoints are a JSON header at ``path`` plus a raw f32 blob at
``path + ".bin"`` holding the tensors in header order.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path

import numpy as np

from .encoder import TENSOR_NAMES, EncoderParams
from .errors import DataError, FormatError, ShapeError
from .geo import DomainTag, GeoPoint, PlanarPoint, as_utc, format_utc
from .losses import ClassifierHead

DB_MAGIC = b"NOCP"
DB_VERSION = 1
CHECKPOINT_VERSION = 1
NORM_TOL = 1e-4


# --------------------------------------------------------------------------
# Manifests


@dataclass
class ImageRecord:
    id: str
    image: str
    position: GeoPoint | PlanarPoint
    utc: datetime | None = None
    label: int | None = None
    domain: DomainTag | None = None

    @property
    def coord_mode(self) -> str:
        return "geo" if isinstance(self.position, GeoPoint) else "planar"

    def to_json(self) -> dict:
        d = {"id": self.id, "image": self.image}
        if isinstance(self.position, GeoPoint):
            d["lat"], d["lon"] = self.position.lat, self.position.lon
        else:
            d["x_m"], d["y_m"] = self.position.x_m, self.position.y_m
        if self.utc is not None:
            d["utc"] = format_utc(self.utc)
        if self.label is not None:
            d["label"] = int(self.label)
        if self.domain is not None:
            d["domain"] = DomainTag.parse(self.domain).value
        return d

    @classmethod
    def from_json(cls, d: dict) -> "ImageRecord":
        if not isinstance(d, dict):
            raise DataError("record must be a JSON object")
        for key in ("id", "image"):
            if not isinstance(d.get(key), str) or not d[key]:
                raise DataError(f"missing or empty {key!r}")
        has_geo = "lat" in d or "lon" in d
        has_planar = "x_m" in d or "y_m" in d
        if has_geo == has_planar:
            raise DataError("record needs exactly one of lat/lon or x_m/y_m")
        try:
            pos = GeoPoint(d["lat"], d["lon"]) if has_geo else PlanarPoint(d["x_m"], d["y_m"])
        except KeyError as e:
            raise DataError(f"missing coordinate {e.args[0]!r}") from None
        except (TypeError, ValueError) as e:
            raise DataError(str(e)) from None
        label = d.get("label")
        if label is not None and (isinstance(label, bool) or not isinstance(label, int) or label < 0):
            raise DataError(f"label must be a non-negative integer, got {label!r}")
        utc = as_utc(d["utc"]) if d.get("utc") is not None else None
        domain = DomainTag.parse(d["domain"]) if d.get("domain") is not None else None
        return cls(d["id"], d["image"], pos, utc, label, domain)


@dataclass
class Manifest:
    coord_mode: str
    records: list = field(default_factory=list)

    def __post_init__(self):
        if self.coord_mode not in ("geo", "planar"):
            raise DataError(f"coord_mode must be 'geo' or 'planar', not {self.coord_mode!r}")
        seen = set()
        for r in self.records:
            if r.coord_mode != self.coord_mode:
                raise DataError(f"record {r.id!r} is {r.coord_mode} in a {self.coord_mode} manifest")
            if r.id in seen:
                raise DataError(f"duplicate id {r.id!r}")
            seen.add(r.id)

    @classmethod
    def from_records(cls, records) -> "Manifest":
        records = list(records)
        mode = records[0].coord_mode if records else "planar"
        return cls(mode, records)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    @property
    def ids(self) -> list:
        return [r.id for r in self.records]

    @property
    def labels(self) -> np.ndarray:
        missing = [r.id for r in self.records if r.label is None]
        if missing:
            raise DataError(f"record {missing[0]!r} has no class label")
        return np.array([r.label for r in self.records], dtype=np.int64)

    def index(self) -> dict:
        return {r.id: i for i, r in enumerate(self.records)}

    def subset(self, ids) -> "Manifest":
        idx = self.index()
        return Manifest(self.coord_mode, [self.records[idx[i]] for i in ids])

    def coords(self) -> np.ndarray:
        """(N, 2) array of (lat, lon) or (x_m, y_m)."""
        if self.coord_mode == "geo":
            pts = [(r.position.lat, r.position.lon) for r in self.records]
        else:
            pts = [(r.position.x_m, r.position.y_m) for r in self.records]
        return np.array(pts, dtype=np.float64).reshape(-1, 2)


def write_manifest(m: Manifest, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in m.records:
            fh.write(json.dumps(r.to_json(), ensure_ascii=False) + "\n")


def read_manifest(path) -> Manifest:
    records, seen = [], {}
    mode = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = ImageRecord.from_json(json.loads(line))
            except json.JSONDecodeError as e:
                raise DataError(f"{path} line {lineno}: malformed JSON ({e.msg})") from None
            except DataError as e:
                raise DataError(f"{path} line {lineno}: {e}") from None
            if rec.id in seen:
                raise DataError(f"{path} line {lineno}: duplicate id {rec.id!r} (first on line {seen[rec.id]})")
            seen[rec.id] = lineno
            if mode is None:
                mode = rec.coord_mode
            elif rec.coord_mode != mode:
                raise DataError(f"{path} line {lineno}: mixed coordinate modes ({mode} and {rec.coord_mode})")
            records.append(rec)
    return Manifest(mode or "planar", records)


# --------------------------------------------------------------------------
# Images


def save_image(img: np.ndarray, path) -> None:
    np.save(path, np.asarray(img, dtype=np.float32), allow_pickle=False)


def load_image(ref: str, base_dir=None) -> np.ndarray:
    """Resolve an image reference: a ``.npy`` path or an inline ``synth:`` seed."""
    if ref.startswith("synth:"):
        from .synthdata import render_ref

        return render_ref(ref)
    path = Path(ref)
    if not path.is_absolute() and base_dir is not None:
        path = Path(base_dir) / path
    try:
        img = np.load(path, allow_pickle=False)
    except (OSError, ValueError) as e:
        raise DataError(f"cannot read image {ref!r}: {e}") from None
    if img.ndim != 3 or img.shape[-1] != 3:
        raise DataError(f"image {ref!r} has shape {img.shape}, expected H x W x 3")
    return img


def load_images(m: Manifest, base_dir=None) -> list:
    return [load_image(r.image, base_dir) for r in m.records]


# --------------------------------------------------------------------------
# Descriptor database


@dataclass
class DescriptorDB:
    vectors: np.ndarray
    ids: list
    encoder_fingerprint: str

    def __post_init__(self):
        self.vectors = np.ascontiguousarray(self.vectors, dtype=np.float32)
        if self.vectors.ndim != 2:
            raise ShapeError("vectors must be a count x dim matrix")
        if len(self.ids) != self.vectors.shape[0]:
            raise ShapeError(f"{len(self.ids)} ids for {self.vectors.shape[0]} vectors")
        if self.vectors.shape[1] < 1:
            raise ShapeError("dim must be positive")
        fp = bytes.fromhex(self.encoder_fingerprint)
        if len(fp) != 32:
            raise FormatError("encoder fingerprint must be 32 bytes")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    def check_norms(self, tol: float = NORM_TOL) -> None:
        if self.count == 0:
            return
        norms = np.linalg.norm(self.vectors.astype(np.float64), axis=1)
        bad = np.flatnonzero(np.abs(norms - 1.0) > tol)
        if bad.size:
            raise FormatError(f"row {bad[0]} ({self.ids[bad[0]]!r}) has norm {norms[bad[0]]:.6f}")


def save_db(db: DescriptorDB, path) -> None:
    db.check_norms()
    parts = [DB_MAGIC, struct.pack("<IIQ", DB_VERSION, db.dim, db.count),
             db.vectors.astype("<f4").tobytes()]
    for i in db.ids:
        b = i.encode("utf-8")
        parts.append(struct.pack("<I", len(b)))
        parts.append(b)
    parts.append(bytes.fromhex(db.encoder_fingerprint))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_db(path) -> DescriptorDB:
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 4 or buf[:4] != DB_MAGIC:
        raise FormatError(f"{path}: bad magic {buf[:4]!r}")
    if len(buf) < 20:
        raise FormatError(f"{path}: truncated header")
    version, dim, count = struct.unpack_from("<IIQ", buf, 4)
    if version != DB_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    off = 20
    nbytes = count * dim * 4
    if len(buf) < off + nbytes:
        raise FormatError(f"{path}: truncated vector payload")
    vectors = np.frombuffer(buf, dtype="<f4", count=count * dim, offset=off).reshape(count, dim)
    off += nbytes
    ids = []
    for _ in range(count):
        if len(buf) < off + 4:
            raise FormatError(f"{path}: truncated id table")
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        if len(buf) < off + n:
            raise FormatError(f"{path}: truncated id table")
        ids.append(buf[off:off + n].decode("utf-8"))
        off += n
    if len(buf) - off != 32:
        raise FormatError(f"{path}: expected 32 fingerprint bytes, found {len(buf) - off}")
    db = DescriptorDB(vectors.astype(np.float32), ids, buf[off:].hex())
    db.check_norms()
    return db


# --------------------------------------------------------------------------
# Checkpoints


def _tensor_list(params: EncoderParams, head: ClassifierHead | None):
    out = [(name, np.asarray(t)) for name, t in params.tensors().items()]
    if head is not None:
        out.append(("head_W", np.asarray(head.W)))
    return out


def encoder_fingerprint(params: EncoderParams) -> str:
    h = hashlib.sha256(json.dumps({"patch_size": params.patch_size}).encode())
    for _, t in _tensor_list(params, None):
        h.update(np.asarray(t, dtype="<f4").tobytes())
    return h.hexdigest()


@dataclass
class Checkpoint:
    params: EncoderParams
    head: ClassifierHead | None = None
    format_version: int = CHECKPOINT_VERSION
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.head is not None and self.head.dim != self.params.out_dim:
            raise ShapeError(f"head dim {self.head.dim} != encoder out_dim {self.params.out_dim}")

    def header(self) -> dict:
        p = self.params
        return {
            "format": "nocbench-checkpoint",
            "format_version": self.format_version,
            "encoder": {"patch_size": p.patch_size, "feat_dim": p.feat_dim, "out_dim": p.out_dim},
            "head": None if self.head is None else {
                "num_classes": self.head.num_classes, "dim": self.head.dim,
                "s": float(self.head.s), "m": float(self.head.m)},
            "tensors": [{"name": n, "shape": list(t.shape)} for n, t in _tensor_list(p, self.head)],
            "meta": self.meta,
        }

    def blob(self) -> bytes:
        return b"".join(np.asarray(t, dtype="<f4").tobytes() for _, t in _tensor_list(self.params, self.head))

    @property
    def fingerprint(self) -> str:
        h = self.header()
        h.pop("meta")
        digest = hashlib.sha256(json.dumps(h, sort_keys=True).encode())
        digest.update(self.blob())
        return digest.hexdigest()

    @property
    def encoder_fingerprint(self) -> str:
        return encoder_fingerprint(self.params)

    def copy(self) -> "Checkpoint":
        return Checkpoint(self.params.copy(), None if self.head is None else self.head.copy(),
                          self.format_version, json.loads(json.dumps(self.meta)))


def _blob_path(path) -> Path:
    return Path(str(path) + ".bin")


def save_checkpoint(c: Checkpoint, path) -> None:
    header = c.header()
    header["fingerprint"] = c.fingerprint
    header["blob"] = _blob_path(path).name
    _blob_path(path).write_bytes(c.blob())
    Path(path).write_text(json.dumps(header, indent=2) + "\n", encoding="utf-8")


def load_checkpoint(path) -> Checkpoint:
    try:
        header = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"{path}: malformed checkpoint header ({e.msg})") from None
    if header.get("format") != "nocbench-checkpoint":
        raise FormatError(f"{path}: not a nocbench checkpoint")
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported format_version {header.get('format_version')}")
    blob = (Path(path).parent / header.get("blob", _blob_path(path).name)).read_bytes()
    specs = header["tensors"]
    expected = sum(int(np.prod(t["shape"])) for t in specs) * 4
    if expected != len(blob):
        raise ShapeError(f"{path}: header declares {expected} payload bytes, blob has {len(blob)}")
    tensors, off = {}, 0
    for t in specs:
        n = int(np.prod(t["shape"]))
        tensors[t["name"]] = np.frombuffer(blob, dtype="<f4", count=n, offset=off).reshape(t["shape"]).astype(np.float32)
        off += n * 4
    enc = header["encoder"]
    missing = [n for n in TENSOR_NAMES if n not in tensors]
    if missing:
        raise FormatError(f"{path}: missing tensor {missing[0]}")
    params = EncoderParams(int(enc["patch_size"]), **{n: tensors[n] for n in TENSOR_NAMES})
    if (params.feat_dim, params.out_dim) != (enc["feat_dim"], enc["out_dim"]):
        raise ShapeError(f"{path}: tensor shapes disagree with declared encoder dims")
    head = None
    if header.get("head") is not None:
        h = header["head"]
        if "head_W" not in tensors:
            raise FormatError(f"{path}: header declares a head but no head_W tensor")
        if tensors["head_W"].shape != (h["num_classes"], h["dim"]):
            raise ShapeError(f"{path}: head_W shape disagrees with declared head dims")
        head = ClassifierHead(tensors["head_W"], float(h["s"]), float(h["m"]))
    ckpt = Checkpoint(params, head, header["format_version"], header.get("meta") or {})
    if ckpt.fingerprint != header.get("fingerprint"):
        raise FormatError(f"{path}: fingerprint mismatch")
    return ckpt
