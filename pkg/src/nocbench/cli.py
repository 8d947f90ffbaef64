"""``nocbench`` command line: one subcommand per pipeline stage.

Every subcommand takes an optional ``--config`` JSON file whose keys mirror
its flags; explicit flags win over the file. The resolved configuration is
echoed to stderr as one JSON line before work starts. Exit codes: 0 ok,
2 usage, 3 data, 4 numeric divergence.
"""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from dataclasses import asdict
from datetime import date
from pathlib import Path

import numpy as np

from . import ablation, nightgen, retrieval, synthdata, trainer
from ._seeding import derive_seed
from .errors import DataError, DivergenceError
from .eval import evaluate, render_report
from .geo import DomainTag, GeoPoint, SolarConfig, as_utc, classify_elevation, format_utc, solar_elevation_deg, \
    sun_crossings
from .store import (
    DescriptorDB,
    ImageRecord,
    Manifest,
    load_checkpoint,
    load_db,
    load_image,
    load_images,
    read_manifest,
    save_checkpoint,
    save_db,
    save_image,
    write_manifest,
)

log = logging.getLogger("nocbench")

EXIT_USAGE, EXIT_DATA, EXIT_DIVERGENCE = 2, 3, 4


class UsageError(Exception):
    pass


# --------------------------------------------------------------------------
# helpers


def _read_json(path) -> dict:
    try:
        d = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise DataError(f"{path}: malformed JSON ({e.msg})") from None
    if not isinstance(d, dict):
        raise DataError(f"{path}: expected a JSON object")
    return d


def _resolve(args, keys, config_key="config") -> dict:
    """Merge ``--config`` JSON with explicitly given flags (flags win)."""
    path = getattr(args, config_key, None)
    conf = _read_json(path) if path else {}
    unknown = set(conf) - set(keys)
    if unknown:
        raise DataError(f"unknown config keys: {sorted(unknown)}")
    out = {}
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
        elif k in conf:
            out[k] = conf[k]
    return out


def _echo(command: str, resolved: dict, args) -> None:
    rec = {"event": "config", "command": command, "seed": _seed(args), "threads": args.threads, **resolved}
    print(json.dumps(rec, default=str, sort_keys=True), file=sys.stderr)


def _seed(args) -> int:
    return 0 if args.seed is None else int(args.seed)


def _safe_name(i: int, rid: str) -> str:
    return f"{i:06d}_{re.sub(r'[^A-Za-z0-9._-]', '_', rid)[:80]}.npy"


def _manifest_images(path):
    m = read_manifest(path)
    return m, load_images(m, Path(path).parent)


def _write_lines(lines, out) -> None:
    text = "".join(json.dumps(x, sort_keys=True) + "\n" for x in lines)
    if out:
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _ns(text: str) -> list:
    try:
        ns = [int(x) for x in str(text).split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"--ns expects comma-separated integers, got {text!r}") from None
    if not ns or min(ns) < 1:
        raise UsageError("--ns needs positive integers")
    return ns


def _train_config(d: dict, seed: int, threads: int) -> trainer.TrainConfig:
    fields = set(trainer.TrainConfig.__dataclass_fields__) - {"seed", "threads"}
    unknown = set(d) - fields
    if unknown:
        raise DataError(f"unknown training keys: {sorted(unknown)}")
    return trainer.TrainConfig(seed=seed, threads=threads, **d)


def _write_train_log(path, resolved: dict, steps: list) -> None:
    if path:
        _write_lines([{"config": resolved}] + steps, path)


# --------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> int:
    keys = ["n_places", "views_per_place", "image_size", "jitter", "spacing_m", "seed", "inline"]
    r = _resolve(args, keys)
    if args.seed is not None:
        r["seed"] = args.seed
    inline = bool(r.pop("inline", False))
    cfg = synthdata.SynthConfig(**r)
    _echo("synth", {**asdict(cfg), "inline": inline, "out": args.out}, args)
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    m, imgs = synthdata.generate(cfg)
    if not inline:
        recs = []
        for i, (rec, img) in enumerate(zip(m.records, imgs)):
            name = f"images/{_safe_name(i, rec.id)}"
            save_image(img, out / name)
            recs.append(ImageRecord(rec.id, name, rec.position, rec.utc, rec.label, rec.domain))
        m = Manifest(m.coord_mode, recs)
    write_manifest(m, out / "manifest.jsonl")
    log.info("wrote %d records to %s", len(m), out)
    return 0


def cmd_gen_night(args) -> int:
    keys = [f for f in nightgen.NightParams.__dataclass_fields__ if f != "seed"]
    params_d = _read_json(args.params) if args.params else {}
    unknown = set(params_d) - set(keys)
    if unknown:
        raise DataError(f"unknown night parameters: {sorted(unknown)}")
    for k in keys:
        if getattr(args, k, None) is not None:
            params_d[k] = getattr(args, k)
    p = nightgen.NightParams(**params_d)
    _echo("gen-night", {"manifest": args.manifest, "out": args.out, "params": asdict(p)}, args)
    m, imgs = _manifest_images(args.manifest)
    out = Path(args.out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    recs = []
    for i, (rec, img) in enumerate(zip(m.records, imgs)):
        night = nightgen.night_transform(img, p.with_seed(derive_seed(_seed(args), "night", rec.id)))
        name = f"images/{_safe_name(i, rec.id)}"
        save_image(night, out / name)
        recs.append(ImageRecord(rec.id, name, rec.position, rec.utc, rec.label, DomainTag.NIGHT))
    write_manifest(Manifest(m.coord_mode, recs), out / "manifest.jsonl")
    log.info("wrote %d night-style images to %s", len(recs), out)
    return 0


TRAIN_KEYS = ["lr", "epochs", "batch_size", "optimizer", "freeze_head", "recompute_day_probs", "loss"]


def cmd_pretrain(args) -> int:
    r = _resolve(args, TRAIN_KEYS + ["patch_size", "feat_dim", "out_dim"])
    dims = {k: r.pop(k) for k in ("patch_size", "feat_dim", "out_dim") if k in r}
    cfg = _train_config(r, _seed(args), args.threads)
    resolved = {**cfg.to_json(), **dims, "manifest": args.manifest, "out": args.out}
    _echo("pretrain", resolved, args)
    m, imgs = _manifest_images(args.manifest)
    steps = []
    ck = trainer.pretrain_day(m, imgs, cfg, step_log=steps, **dims)
    ck.meta["config"] = resolved
    save_checkpoint(ck, args.out)
    _write_train_log(args.log, resolved, steps)
    log.info("saved day model %s (fingerprint %s)", args.out, ck.fingerprint[:12])
    return 0


def cmd_cache_day(args) -> int:
    _echo("cache-day", {"day_manifest": args.day_manifest, "night_manifest": args.night_manifest,
                        "model": args.model, "out": args.out}, args)
    day_m, day_imgs = _manifest_images(args.day_manifest)
    night_m = read_manifest(args.night_manifest) if args.night_manifest else None
    model = load_checkpoint(args.model)
    cache = trainer.build_day_cache(day_m, day_imgs, model, night_m, args.threads)
    desc = cache.descriptors.astype(np.float32)
    if len(desc):
        desc /= np.linalg.norm(desc, axis=1, keepdims=True)
    save_db(DescriptorDB(desc.reshape(-1, model.params.out_dim), cache.ids, cache.encoder_fingerprint), args.out)
    log.info("cached %d day descriptors in %s", len(cache), args.out)
    return 0


def cmd_finetune(args) -> int:
    r = _resolve(args, TRAIN_KEYS + ["alpha", "alpha_mode", "ikt_scalar_mode"])
    loss = dict(r.pop("loss", {}) or {})
    for k in ("alpha", "alpha_mode", "ikt_scalar_mode"):
        if k in r:
            loss[k] = r.pop(k)
    r["loss"] = loss
    cfg = _train_config(r, _seed(args), args.threads)
    resolved = {**cfg.to_json(), "manifest": args.manifest, "model": args.model, "cache": args.cache,
                "out": args.out}
    _echo("finetune", resolved, args)
    m, imgs = _manifest_images(args.manifest)
    pre = load_checkpoint(args.model)
    cache = None
    if args.cache:
        db = load_db(args.cache)
        if db.encoder_fingerprint != pre.encoder_fingerprint:
            raise DataError("day cache was not produced by the given pretrained model")
        cache = trainer.DayCache(db.ids, db.vectors.astype(np.float64), db.encoder_fingerprint)
    steps = []
    ck = trainer.finetune_night(m, imgs, pre, cache, cfg, step_log=steps)
    ck.meta["config"] = resolved
    save_checkpoint(ck, args.out)
    _write_train_log(args.log, resolved, steps)
    log.info("saved night model %s", args.out)
    return 0


def cmd_build_db(args) -> int:
    _echo("build-db", {"manifest": args.manifest, "model": args.model, "out": args.out}, args)
    m, imgs = _manifest_images(args.manifest)
    db = retrieval.build_db(m, load_checkpoint(args.model), imgs, threads=args.threads)
    save_db(db, args.out)
    log.info("wrote %d descriptors to %s", db.count, args.out)
    return 0


def _retriever(args):
    day = load_checkpoint(args.model)
    night = load_checkpoint(args.night_model) if args.night_model else day
    routing = retrieval.RoutingConfig(day, night, od_mode=args.od,
                                      twilight_to_night=not args.twilight_day)
    night_db = load_db(args.night_db) if getattr(args, "night_db", None) else None
    return retrieval.Retriever(routing, load_db(args.db), night_db)


def cmd_query(args) -> int:
    _echo("query", {k: getattr(args, k) for k in ("db", "night_db", "queries", "model", "night_model", "k", "od",
                                                   "twilight_day", "out")}, args)
    r = _retriever(args)
    qm, qimgs = _manifest_images(args.queries)
    lines = []
    for rec, img in zip(qm.records, qimgs):
        rl, domain = r.search(img, rec, args.k)
        lines.append({**rl.to_json(rec.id), "domain": domain.value})
    _write_lines(lines, args.out)
    return 0


def cmd_evaluate(args) -> int:
    ns = _ns(args.ns)
    _echo("evaluate", {**{k: getattr(args, k) for k in ("db", "night_db", "db_manifest", "queries", "model",
                                                         "night_model", "od", "threshold_m", "twilight_day")},
                       "ns": ns}, args)
    r = _retriever(args)
    db_m = read_manifest(args.db_manifest)
    if db_m.ids != r.day_db.ids:
        raise DataError("database manifest ids do not match the database rows")
    qm, qimgs = _manifest_images(args.queries)
    report, _ = evaluate(r, qm, qimgs, db_m, ns, args.threshold_m)
    if args.json:
        Path(args.json).write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n")
    print(render_report(report))
    return 0


def cmd_metrics(args) -> int:
    _echo("metrics", {k: getattr(args, k) for k in ("a", "b", "day_manifest", "night_manifest", "out")}, args)
    if args.a and args.b:
        f = nightgen.faithfulness(load_image(args.a), load_image(args.b))
        _write_lines([f], args.out)
        return 0
    if not (args.day_manifest and args.night_manifest):
        raise UsageError("metrics needs --a/--b images or --day-manifest/--night-manifest")
    dm, dimgs = _manifest_images(args.day_manifest)
    nm, nimgs = _manifest_images(args.night_manifest)
    nidx = nm.index()
    lines = []
    for rec, img in zip(dm.records, dimgs):
        if rec.id not in nidx:
            raise DataError(f"night manifest has no record {rec.id!r}")
        lines.append({"id": rec.id, **nightgen.faithfulness(img, nimgs[nidx[rec.id]])})
    if lines:
        summary = {k: float(np.mean([x[k] for x in lines])) for k in ("l2", "psnr_db", "ssim")}
        lines.append({"id": "__mean__", **summary})
    _write_lines(lines, args.out)
    return 0


def cmd_solar(args) -> int:
    _echo("solar", {k: getattr(args, k) for k in ("lat", "lon", "utc", "refraction")}, args)
    p = GeoPoint(args.lat, args.lon)
    t = as_utc(args.utc)
    elev = solar_elevation_deg(p, t, refraction=args.refraction)
    cfg = SolarConfig(args.day_elevation, args.night_elevation)
    rise, sett = sun_crossings(p, date(t.year, t.month, t.day))
    out = {"lat": p.lat, "lon": p.lon, "utc": format_utc(t), "elevation_deg": elev,
           "domain": classify_elevation(elev, cfg).value,
           "sunrise_utc": format_utc(rise) if rise else None, "sunset_utc": format_utc(sett) if sett else None}
    _write_lines([out], None)
    return 0


def cmd_ablate(args) -> int:
    conf = _read_json(args.config) if args.config else {}
    if args.seeds:
        conf["seeds"] = [int(s) for s in args.seeds.split(",")]
    conf.setdefault("threads", args.threads)
    cfg = ablation.AblationConfig.from_json(conf)
    _echo("ablate", cfg.to_json(), args)
    result = ablation.run(cfg)
    if args.out:
        slim = {k: v for k, v in result.items() if k != "per_seed"}
        Path(args.out).write_text(json.dumps(slim, indent=2, sort_keys=True, default=str) + "\n")
    print(ablation.render(result))
    log.info("ablation finished in %.1fs", result["seconds"])
    return 0


# --------------------------------------------------------------------------
# parser


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    # SUPPRESS keeps sub-level defaults from clobbering flags given before the subcommand
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="root seed (default 0)")
    common.add_argument("--threads", type=int, default=argparse.SUPPRESS, help="worker ceiling (default 1)")
    common.add_argument("--log-level", default=argparse.SUPPRESS, help="DEBUG, INFO, WARNING (default WARNING)")

    p = argparse.ArgumentParser(prog="nocbench", description="Day/night place recognition toolkit.")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--log-level", default="WARNING")
    sub = p.add_subparsers(dest="command", metavar="command")
    sub.required = True

    def add(name, fn, help_):
        sp = sub.add_parser(name, parents=[common], help=help_, description=help_)
        sp.set_defaults(func=fn)
        return sp

    s = add("synth", cmd_synth, "generate a synthetic place dataset")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--n-places", dest="n_places", type=int)
    s.add_argument("--views", dest="views_per_place", type=int)
    s.add_argument("--size", dest="image_size", type=int)
    s.add_argument("--jitter", type=float)
    s.add_argument("--spacing-m", dest="spacing_m", type=float)
    s.add_argument("--inline", action="store_true", default=None,
                   help="keep images as synth: references instead of writing .npy files")

    s = add("gen-night", cmd_gen_night, "night-style copies of a manifest's images")
    s.add_argument("--manifest", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--params", help="JSON file of night transform parameters")
    for k in ("gamma", "brightness", "temp_shift", "bloom_intensity", "noise_sigma"):
        s.add_argument("--" + k.replace("_", "-"), dest=k, type=float)
    s.add_argument("--bloom-count", dest="bloom_count", type=int)

    def train_flags(sp):
        sp.add_argument("--config")
        sp.add_argument("--manifest", required=True)
        sp.add_argument("--out", required=True)
        sp.add_argument("--log", help="write per-step training log (JSON Lines)")
        sp.add_argument("--lr", type=float)
        sp.add_argument("--epochs", type=int)
        sp.add_argument("--batch-size", dest="batch_size", type=int)
        sp.add_argument("--optimizer", choices=["sgd", "adam"])
        sp.add_argument("--freeze-head", dest="freeze_head", action="store_true", default=None)

    s = add("pretrain", cmd_pretrain, "train a day model from scratch")
    train_flags(s)
    s.add_argument("--patch-size", dest="patch_size", type=int)
    s.add_argument("--feat-dim", dest="feat_dim", type=int)
    s.add_argument("--out-dim", dest="out_dim", type=int)

    s = add("cache-day", cmd_cache_day, "cache pretrained descriptors of the day images")
    s.add_argument("--day-manifest", required=True)
    s.add_argument("--night-manifest", help="check ids match one-to-one")
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)

    s = add("finetune", cmd_finetune, "fine-tune a night model (LMC + alpha * IKT with --cache)")
    train_flags(s)
    s.add_argument("--model", required=True, help="pretrained day checkpoint")
    s.add_argument("--cache", help="day descriptor cache from cache-day; enables the IKT term")
    s.add_argument("--alpha", type=float)
    s.add_argument("--alpha-mode", dest="alpha_mode", choices=["fixed", "auto"])
    s.add_argument("--ikt-scalar-mode", dest="ikt_scalar_mode", action="store_true", default=None)
    s.add_argument("--frozen-day-probs", dest="recompute_day_probs", action="store_false", default=None,
                   help="compute day probabilities once with the initial head")

    s = add("build-db", cmd_build_db, "encode a database manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)

    def search_flags(sp):
        sp.add_argument("--db", required=True, help="day-model database")
        sp.add_argument("--night-db", help="night-model database, used without --od")
        sp.add_argument("--queries", required=True)
        sp.add_argument("--model", required=True, help="day model")
        sp.add_argument("--night-model", help="night model (defaults to the day model)")
        sp.add_argument("--od", action=argparse.BooleanOptionalAction, default=True,
                        help="search the original day database for every query (default on)")
        sp.add_argument("--twilight-day", action="store_true", help="route twilight queries to the day model")

    s = add("query", cmd_query, "top-k search, JSON Lines output")
    search_flags(s)
    s.add_argument("--k", type=int, default=10)
    s.add_argument("--out")

    s = add("evaluate", cmd_evaluate, "recall@N per query domain")
    search_flags(s)
    s.add_argument("--db-manifest", required=True, help="manifest the database was built from (positions)")
    s.add_argument("--ns", default="1,5,10")
    s.add_argument("--threshold-m", dest="threshold_m", type=float, default=25.0)
    s.add_argument("--json", help="also write the report as JSON")

    s = add("metrics", cmd_metrics, "L2 / PSNR / SSIM between images")
    s.add_argument("--a")
    s.add_argument("--b")
    s.add_argument("--day-manifest")
    s.add_argument("--night-manifest")
    s.add_argument("--out")

    s = add("solar", cmd_solar, "sun elevation, domain and sunrise/sunset")
    s.add_argument("--lat", type=float, required=True)
    s.add_argument("--lon", type=float, required=True)
    s.add_argument("--utc", required=True)
    s.add_argument("--refraction", action="store_true")
    s.add_argument("--day-elevation", type=float, default=SolarConfig.day_elevation_deg)
    s.add_argument("--night-elevation", type=float, default=SolarConfig.night_elevation_deg)

    s = add("ablate", cmd_ablate, "run the day/night ablation on synthetic places")
    s.add_argument("--config")
    s.add_argument("--seeds", help="comma-separated seeds, overriding the config")
    s.add_argument("--out", help="write the aggregated result as JSON")
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=str(args.log_level).upper(), stream=sys.stderr,
                        format="%(levelname)s %(name)s: %(message)s", force=True)
    if args.threads < 1:
        parser.print_usage(sys.stderr)
        print("nocbench: error: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as e:
        parser.print_usage(sys.stderr)
        print(f"nocbench: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as e:
        print(f"nocbench: diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (DataError, OSError) as e:
        print(f"nocbench: data error: {e}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
