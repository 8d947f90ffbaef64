"""Day/night ablation on synthetic places.

Rows: day-only baseline; fine-tuned on day+night, night only, and
night only + IKT; each fine-tuned row with and without the original
(day-model) database. Night queries are night-transformed views; the
database holds day views. By default the database and query places are
held out from training, so recall measures generalization to unseen places.
"""

from __future__ import annotations

import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import nightgen, retrieval, synthdata, trainer
from ._seeding import derive_seed
from .errors import DataError
from .eval import DEFAULT_NS, evaluate, format_recalls
from .geo import DomainTag
from .losses import LossConfig
from .store import ImageRecord, Manifest

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class Row:
    name: str
    day_data: bool
    night_data: bool
    ikt: bool
    od: bool


ROWS = (
    Row("baseline", True, False, False, True),
    Row("day+night", True, True, False, True),
    Row("night", False, True, False, True),
    Row("night+ikt", False, True, True, True),
    Row("day+night", True, True, False, False),
    Row("night", False, True, False, False),
    Row("night+ikt", False, True, True, False),
)


@dataclass
class AblationConfig:
    n_places: int = 150
    views_per_place: int = 8
    image_size: int = 32
    jitter: float = 0.5
    db_views: tuple = (0,)
    query_views: tuple = (1, 2, 3, 4, 5, 6, 7)
    holdout_places: int = 50
    patch_size: int = 4
    feat_dim: int = 64
    out_dim: int = 64
    night: dict = field(default_factory=dict)
    pretrain: dict = field(default_factory=lambda: {"lr": 3e-3, "epochs": 60, "batch_size": 32, "optimizer": "adam"})
    finetune: dict = field(default_factory=lambda: {"lr": 3e-3, "epochs": 10, "batch_size": 32, "optimizer": "adam",
                                                    "recompute_day_probs": False})
    ikt: dict = field(default_factory=lambda: {"alpha_mode": "auto"})
    seeds: tuple = (0, 1, 2, 3, 4)
    ns: tuple = DEFAULT_NS
    threads: int = 1

    def __post_init__(self):
        if not 0 <= self.holdout_places < self.n_places:
            raise DataError("holdout_places must be in [0, n_places)")
        views = set(self.db_views) | set(self.query_views)
        if not views or min(views) < 0 or max(views) >= self.views_per_place:
            raise DataError("db_views and query_views must index existing views")
        if set(self.db_views) & set(self.query_views):
            raise DataError("db_views and query_views overlap")
        if not self.holdout_places and len(views) >= self.views_per_place:
            raise DataError("no views left for training")
        if not self.seeds:
            raise DataError("need at least one seed")

    @classmethod
    def from_json(cls, d: dict) -> "AblationConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(d) - known
        if unknown:
            raise DataError(f"unknown ablation config keys: {sorted(unknown)}")
        d = dict(d)
        for key in ("db_views", "query_views", "seeds", "ns"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    def to_json(self) -> dict:
        return asdict(self)


def _night_images(images, records, params: nightgen.NightParams, seed: int):
    return [nightgen.night_transform(img, params.with_seed(derive_seed(seed, "night", r.id)))
            for img, r in zip(images, records)]


def _as_domain(m: Manifest, tag: DomainTag) -> Manifest:
    return Manifest(m.coord_mode, [ImageRecord(r.id, r.image, r.position, r.utc, r.label, tag) for r in m.records])


def build_split(cfg: AblationConfig, seed: int) -> dict:
    """Generate data for one seed and split views into train / db / query."""
    scfg = synthdata.SynthConfig(cfg.n_places, cfg.views_per_place, cfg.image_size, cfg.jitter,
                                 seed=derive_seed(seed, "synth"))
    man, imgs = synthdata.generate(scfg)
    view = [int(r.id.rsplit("_v", 1)[1]) for r in man.records]
    first_test = cfg.n_places - cfg.holdout_places
    # with holdout_places > 0, database and queries come only from places never trained on
    is_test = [(r.label >= first_test) if cfg.holdout_places else True for r in man.records]
    is_train = [(r.label < first_test) if cfg.holdout_places else True for r in man.records]
    held = set(cfg.db_views) | set(cfg.query_views)
    pick = lambda views, mask: [i for i, v in enumerate(view) if v in views and mask[i]]  # noqa: E731
    train_views = set(range(cfg.views_per_place)) - (set() if cfg.holdout_places else held)
    train_idx = pick(train_views, is_train)
    db_idx, q_idx = pick(set(cfg.db_views), is_test), pick(set(cfg.query_views), is_test)
    sub = lambda idx: Manifest(man.coord_mode, [man.records[i] for i in idx])  # noqa: E731
    night_p = nightgen.NightParams(**cfg.night)
    train_m = sub(train_idx)
    train_day = [imgs[i] for i in train_idx]
    q_m = sub(q_idx)
    q_day = [imgs[i] for i in q_idx]
    return {
        "train": train_m,
        "train_day": train_day,
        "train_night": _night_images(train_day, train_m.records, night_p, derive_seed(seed, "night-train")),
        "db": sub(db_idx),
        "db_images": [imgs[i] for i in db_idx],
        "query_day": _as_domain(q_m, DomainTag.DAY),
        "query_day_images": q_day,
        "query_night": _as_domain(q_m, DomainTag.NIGHT),
        "query_night_images": _night_images(q_day, q_m.records, night_p, derive_seed(seed, "night-query")),
    }


def _train_cfg(d: dict, seed: int, loss: dict | None = None, threads: int = 1) -> trainer.TrainConfig:
    d = dict(d)
    if loss is not None:
        d["loss"] = LossConfig(**loss)
    return trainer.TrainConfig(seed=seed, threads=threads, **d)


def _union(a: Manifest, b: Manifest, suffix: str) -> Manifest:
    recs = list(a.records) + [ImageRecord(r.id + suffix, r.image, r.position, r.utc, r.label, r.domain)
                              for r in b.records]
    return Manifest(a.coord_mode, recs)


def run_seed(cfg: AblationConfig, seed: int) -> dict:
    """All rows for one seed. Returns ``{row_key: {"night": recalls, "day": recalls, ...}}``."""
    data = build_split(cfg, seed)
    day = trainer.pretrain_day(data["train"], data["train_day"],
                               _train_cfg(cfg.pretrain, derive_seed(seed, "pretrain"), threads=cfg.threads),
                               cfg.patch_size, cfg.feat_dim, cfg.out_dim)
    ft_seed = derive_seed(seed, "finetune")
    models = {"baseline": day}
    mixed = _union(data["train"], data["train"], "#night")
    models["day+night"] = trainer.finetune_night(
        mixed, data["train_day"] + data["train_night"], day, None,
        _train_cfg(cfg.finetune, ft_seed, threads=cfg.threads))
    models["night"] = trainer.finetune_night(
        data["train"], data["train_night"], day, None, _train_cfg(cfg.finetune, ft_seed, threads=cfg.threads))
    cache = trainer.build_day_cache(data["train"], data["train_day"], day, data["train"])
    models["night+ikt"] = trainer.finetune_night(
        data["train"], data["train_night"], day, cache,
        _train_cfg(cfg.finetune, ft_seed, loss=cfg.ikt, threads=cfg.threads))

    day_db = retrieval.build_db(data["db"], day, data["db_images"], threads=cfg.threads)
    out = {}
    for row in ROWS:
        night_model = models[row.name]
        routing = retrieval.RoutingConfig(day, night_model, od_mode=row.od)
        night_db = None
        if not row.od:
            night_db = retrieval.build_db(data["db"], night_model, data["db_images"], threads=cfg.threads)
        r = retrieval.Retriever(routing, day_db, night_db)
        night_rep, _ = evaluate(r, data["query_night"], data["query_night_images"], data["db"], cfg.ns)
        day_rep, day_res = evaluate(r, data["query_day"], data["query_day_images"], data["db"], cfg.ns)
        out[row_key(row)] = {
            "night": night_rep.subsets[DomainTag.NIGHT].recall_at,
            "day": day_rep.subsets[DomainTag.DAY].recall_at,
            "day_rankings": {q: [(h.index, h.similarity) for h in rl.hits] for q, (rl, _) in day_res.items()},
            "alpha": night_model.meta.get("alpha"),
        }
    return out


def row_key(row: Row) -> str:
    return f"{row.name}|{'od' if row.od else 'new-db'}"


def run(cfg: AblationConfig) -> dict:
    """Run every seed and aggregate mean recalls per row."""
    t0 = time.time()
    per_seed = {}
    for s in cfg.seeds:
        per_seed[s] = run_seed(cfg, s)
        log.info("seed %s done after %.1fs", s, time.time() - t0)
    rows = []
    for row in ROWS:
        k = row_key(row)
        night = {n: float(np.mean([per_seed[s][k]["night"][n] for s in cfg.seeds])) for n in cfg.ns}
        day = {n: float(np.mean([per_seed[s][k]["day"][n] for s in cfg.seeds])) for n in cfg.ns}
        rows.append({"row": asdict(row), "key": k, "night": night, "day": day,
                     "night_r1_per_seed": [per_seed[s][k]["night"][min(cfg.ns)] for s in cfg.seeds]})
    return {"config": cfg.to_json(), "rows": rows, "per_seed": per_seed, "seconds": time.time() - t0}


def render(result: dict) -> str:
    ns = result["config"]["ns"]
    tick = lambda b: "x" if b else " "  # noqa: E731
    head = "R@" + " / R@".join(str(n) for n in ns)
    lines = [f"Day  Night  IKT  OD  | night queries {head:<20}| day queries"]
    for r in result["rows"]:
        row = r["row"]
        night = format_recalls([r["night"][n] for n in ns])
        day = format_recalls([r["day"][n] for n in ns])
        lines.append(f" {tick(row['day_data'])}     {tick(row['night_data'])}     {tick(row['ikt'])}   "
                     f"{tick(row['od'])}  | {night:<34}| {day}")
    return "\n".join(lines)
