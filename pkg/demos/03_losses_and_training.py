"""
Large margin cosine loss and inherited knowledge
================================================

A day encoder is trained with the large margin cosine (LMC) loss. A night
copy is then fine-tuned on night-style images, optionally pulled towards
the day model's class distributions by a KL term (IKT).
"""

import numpy as np

from nocbench import nightgen, trainer
from nocbench.losses import ClassifierHead, LossConfig, combined_loss, kl_divergence, lmc_loss, softened_probs
from nocbench.synthdata import SynthConfig, generate

###############################################################################
# The loss on a toy two-class head. The margin only penalizes the true class,
# so a descriptor must beat the other class by more than m to be "easy".

x = np.array([1.0, 0.0])
W = np.array([[0.9, np.sqrt(1 - 0.81)], [0.1, np.sqrt(1 - 0.01)]])
for m in (0.0, 0.2, 0.4):
    head = ClassifierHead(W, s=30.0, m=m)
    print(f"m={m:.1f}  loss {lmc_loss(x, [0], head).loss:.3e}  p_gt {softened_probs(x, 0, head)[0]:.6f}")

print("KL((0.9, 0.1) || (0.5, 0.5)) =", round(float(kl_divergence([0.9, 0.1], [0.5, 0.5])), 4), "nats")

# With identical day and night distributions the IKT term is zero whatever alpha is
head = ClassifierHead(W)
p = softened_probs(x, 0, head)[None]
gap = combined_loss(x, [0], head, p, LossConfig(alpha=100.0)).loss - lmc_loss(x, [0], head).loss
print(f"combined - lmc when p_day == p_night: {gap:.1e}")

###############################################################################
# A small day model, then two night fine-tunes from the same starting point.

manifest, images = generate(SynthConfig(n_places=20, views_per_place=4, image_size=32, seed=0))
night = [nightgen.night_transform(img, nightgen.NightParams(seed=i)) for i, img in enumerate(images)]

log = []
day_model = trainer.pretrain_day(manifest, images, trainer.TrainConfig(lr=3e-3, epochs=15, optimizer="adam"),
                                 feat_dim=32, out_dim=32, step_log=log)
print(f"pretrain: {len(log)} steps, loss {log[0]['loss']:.2f} -> {log[-1]['loss']:.2f}")

ft = dict(lr=3e-3, epochs=5, optimizer="adam", recompute_day_probs=False)
gkt = trainer.finetune_night(manifest, night, day_model, None, trainer.TrainConfig(**ft))
cache = trainer.build_day_cache(manifest, images, day_model, manifest)
ikt_log = []
ikt = trainer.finetune_night(manifest, night, day_model, cache,
                             trainer.TrainConfig(loss=LossConfig(alpha_mode="auto"), **ft), step_log=ikt_log)
print("auto alpha picked:", round(ikt.meta["alpha"], 3))
print("first IKT step parts:", {k: round(v, 3) for k, v in ikt_log[0].items() if isinstance(v, float)})

###############################################################################
# Both fine-tunes change the encoder; the day model is left untouched.

print("fingerprints: day", day_model.fingerprint[:12], "gkt", gkt.fingerprint[:12], "ikt", ikt.fingerprint[:12])
