"""
Routing queries and scoring recall
==================================

Day queries go to the day encoder, night queries to the night encoder, and
both search one database of day descriptors (the "original database" mode).
Recall@N counts a query as found when a hit within 25 m appears in its top N.
"""

import time

import numpy as np

from nocbench import nightgen, retrieval, trainer
from nocbench.eval import evaluate, render_report
from nocbench.geo import DomainTag
from nocbench.store import DescriptorDB, ImageRecord, Manifest
from nocbench.synthdata import SynthConfig, generate

###############################################################################
# Exact top-k. The blocked search keeps every candidate tied with the k-th
# best value, so it agrees with a full sort even on duplicated rows.

rng = np.random.default_rng(0)
v = rng.normal(size=(20000, 64))
v[1000] = v[7]
v = (v / np.linalg.norm(v, axis=1, keepdims=True)).astype(np.float32)
db = DescriptorDB(v, [f"r{i}" for i in range(len(v))], "0" * 64)
t0 = time.perf_counter()
hits = retrieval.top_k(db, v[7], k=3, block_rows=4096)
print(f"top-3 in {1000 * (time.perf_counter() - t0):.1f} ms:", [(h.id, round(h.similarity, 4)) for h in hits.hits])
assert hits.indices == retrieval.top_k_naive(db, v[7], 3).indices

###############################################################################
# A small place recognition run: view 0 of every place forms the database,
# views 1-3 are queries, shown once as day and once as night images.

cfg = SynthConfig(n_places=30, views_per_place=4, image_size=32, seed=1)
manifest, images = generate(cfg)
views = [int(r.id.rsplit("_v", 1)[1]) for r in manifest.records]
db_idx = [i for i, v in enumerate(views) if v == 0]
q_idx = [i for i, v in enumerate(views) if v != 0]
db_m = Manifest("planar", [manifest.records[i] for i in db_idx])

# the ablation's training settings, a few seconds on one core. Training sees every
# view here, so these recalls are optimistic; the ablation holds places out.
day_model = trainer.pretrain_day(manifest, images, trainer.TrainConfig(lr=3e-3, epochs=60, optimizer="adam"))
night_imgs = [nightgen.night_transform(img, nightgen.NightParams(seed=i)) for i, img in enumerate(images)]
night_model = trainer.finetune_night(manifest, night_imgs, day_model, None,
                                     trainer.TrainConfig(lr=3e-3, epochs=10, optimizer="adam"))

day_db = retrieval.build_db(db_m, day_model, [images[i] for i in db_idx])
retriever = retrieval.Retriever(retrieval.RoutingConfig(day_model, night_model), day_db)


def as_domain(tag):
    return Manifest("planar", [ImageRecord(r.id + "_" + tag.value, r.image, r.position, r.utc, r.label, tag)
                               for r in (manifest.records[i] for i in q_idx)])


queries = Manifest("planar", as_domain(DomainTag.DAY).records + as_domain(DomainTag.NIGHT).records)
q_images = [images[i] for i in q_idx] + [night_imgs[i] for i in q_idx]
report, results = evaluate(retriever, queries, q_images, db_m, ns=(1, 5, 10))
print(render_report(report))

###############################################################################
# What the day model alone does with night queries, for comparison.

day_only = retrieval.Retriever(retrieval.RoutingConfig(day_model, day_model), day_db)
night_q = as_domain(DomainTag.NIGHT)
base, _ = evaluate(day_only, night_q, [night_imgs[i] for i in q_idx], db_m, ns=(1, 5, 10))
print("night queries through the day encoder:")
print(render_report(base))
