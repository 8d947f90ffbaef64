"""Day-model pretraining and night fine-tuning with LMC + alpha * IKT.

Training is single-process and deterministic: batch order comes from
``hash(seed, "shuffle", epoch)``, parameter init from named sub-seeds, and
gradient reductions follow record order (see :mod:`nocbench.encoder`).
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import encoder, losses
from ._seeding import derive_seed, rng_for
from .errors import DataError, DivergenceError
from .store import Checkpoint, Manifest

log = logging.getLogger(__name__)

MIN_GEM_P = 0.1


@dataclass
class TrainConfig:
    lr: float = 1e-3
    epochs: int = 1
    batch_size: int = 32
    loss: losses.LossConfig = field(default_factory=losses.LossConfig)
    seed: int = 0
    freeze_head: bool = False
    recompute_day_probs: bool = True
    optimizer: str = "sgd"  # "sgd" | "adam"
    threads: int = 1

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = losses.LossConfig(**self.loss)
        if not self.lr > 0:
            raise DataError("lr must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise DataError("epochs must be >= 0 and batch_size >= 1")
        if self.optimizer not in ("sgd", "adam"):
            raise DataError(f"unknown optimizer {self.optimizer!r}")

    def to_json(self) -> dict:
        return asdict(self)


@dataclass
class DayCache:
    """Pretrained-model descriptors of the day images, keyed by record id."""

    ids: list
    descriptors: np.ndarray
    encoder_fingerprint: str = ""

    def __post_init__(self):
        self._index = {i: n for n, i in enumerate(self.ids)}

    def __len__(self):
        return len(self.ids)

    def lookup(self, ids) -> np.ndarray:
        return self.descriptors[[self._index[i] for i in ids]]

    def aligned_to(self, manifest: Manifest) -> np.ndarray:
        missing = [i for i in manifest.ids if i not in self._index]
        if missing:
            raise DataError(f"day cache has no descriptor for night record {missing[0]!r}")
        return self.lookup(manifest.ids)


def build_day_cache(day_manifest: Manifest, day_images, pretrained: Checkpoint,
                    night_manifest: Manifest | None = None, threads: int = 1) -> DayCache:
    """Encode day images with the pretrained model.

    When ``night_manifest`` is given, the two id sets must match exactly.
    """
    if night_manifest is not None:
        day_ids, night_ids = set(day_manifest.ids), set(night_manifest.ids)
        missing = [i for i in night_manifest.ids if i not in day_ids]
        if missing:
            raise DataError(f"day manifest is missing id {missing[0]!r}")
        extra = [i for i in day_manifest.ids if i not in night_ids]
        if extra:
            raise DataError(f"day manifest has id {extra[0]!r} with no night counterpart")
    from .retrieval import encode_images

    desc = encode_images(day_images, pretrained, threads)
    return DayCache(day_manifest.ids, desc, pretrained.encoder_fingerprint)


class _Optimizer:
    """SGD or Adam over named float32 tensors; arithmetic in float64."""

    def __init__(self, kind: str, lr: float, betas=(0.9, 0.999), eps=1e-8):
        self.kind, self.lr, self.betas, self.eps = kind, lr, betas, eps
        self.state = {}
        self.t = 0

    def tick(self):
        self.t += 1

    def step(self, name: str, value: np.ndarray, grad: np.ndarray) -> np.ndarray:
        v = np.asarray(value, dtype=np.float64)
        if self.kind == "sgd":
            upd = self.lr * grad
        else:
            b1, b2 = self.betas
            m, s = self.state.get(name, (np.zeros_like(v), np.zeros_like(v)))
            m = b1 * m + (1 - b1) * grad
            s = b2 * s + (1 - b2) * grad * grad
            self.state[name] = (m, s)
            mh = m / (1 - b1**self.t)
            sh = s / (1 - b2**self.t)
            upd = self.lr * mh / (np.sqrt(sh) + self.eps)
        return (v - upd).astype(np.float32)


def _stack(images, idx):
    return np.stack([np.asarray(images[i], dtype=np.float64) for i in idx])


def _train(ckpt: Checkpoint, images, labels: np.ndarray, cfg: TrainConfig,
           day_desc: np.ndarray | None = None, step_log: list | None = None) -> Checkpoint:
    """Shared loop. ``day_desc`` (N, D) enables the IKT term."""
    params, head = ckpt.params.copy(), ckpt.head.copy()
    n = len(labels)
    if n == 0:
        raise DataError("empty training set")
    opt = _Optimizer(cfg.optimizer, cfg.lr)
    use_ikt = day_desc is not None
    alpha = cfg.loss.alpha
    alpha_resolved = cfg.loss.alpha_mode == "fixed"
    frozen_p_day = None
    if use_ikt and not cfg.recompute_day_probs:
        frozen_p_day = losses.softened_probs(day_desc, labels, head)
    step = 0
    for epoch in range(cfg.epochs):
        order = rng_for(cfg.seed, "shuffle", epoch).permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            y = labels[idx]
            box = {}

            def upstream(desc):
                nonlocal alpha, alpha_resolved
                if not use_ikt:
                    terms = losses.lmc_loss(desc, y, head)
                else:
                    p_day = (frozen_p_day[idx] if frozen_p_day is not None
                             else losses.softened_probs(day_desc[idx], y, head))
                    if not alpha_resolved:
                        probe = losses.combined_loss(desc, y, head, p_day, cfg.loss, alpha=0.0)
                        alpha = losses.auto_alpha(probe.parts["lmc"], probe.parts["ikt"], cfg.loss.alpha)
                        alpha_resolved = True
                        log.info("auto alpha resolved to %.6g", alpha)
                    terms = losses.combined_loss(desc, y, head, p_day, cfg.loss, alpha=alpha)
                box["terms"] = terms
                return terms, terms.dX

            # non-finite values are caught explicitly below
            with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
                _, terms, grads = encoder.forward_backward(_stack(images, idx), params, upstream, cfg.threads)
                if not np.isfinite(terms.loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                    raise DivergenceError(f"non-finite loss at epoch {epoch}, step {step}")
                opt.tick()
                new = {name: opt.step(name, t, grads[name]) for name, t in params.tensors().items()}
                new_w = None if cfg.freeze_head else opt.step("head_W", head.W, terms.dW)
                if not all(np.all(np.isfinite(t)) for t in new.values()) or (
                        new_w is not None and not np.all(np.isfinite(new_w))):
                    raise DivergenceError(f"parameters overflowed at epoch {epoch}, step {step}")
            new["gem_p"] = np.maximum(new["gem_p"], np.float32(MIN_GEM_P))
            params = encoder.EncoderParams(params.patch_size, **new)
            if new_w is not None:
                head.W = new_w
                head.renormalize()
            if step_log is not None:
                rec = {"epoch": epoch, "step": step, "lmc": terms.parts.get("lmc"), "loss": terms.loss}
                if use_ikt:
                    rec.update(ikt=terms.parts["ikt"], alpha=terms.parts["alpha"])
                step_log.append(rec)
            step += 1
    meta = dict(ckpt.meta)
    if use_ikt:
        meta["alpha"] = alpha
    return Checkpoint(params, head, ckpt.format_version, meta)


def pretrain_day(manifest: Manifest, images, cfg: TrainConfig, patch_size: int = 4, feat_dim: int = 64,
                 out_dim: int = 64, step_log: list | None = None) -> Checkpoint:
    """Train encoder and head from scratch with the LMC loss on day images."""
    labels = manifest.labels
    if len(labels) == 0:
        raise DataError("empty training manifest")
    params = encoder.init_params(patch_size, feat_dim, out_dim, seed=derive_seed(cfg.seed, "encoder-init"))
    head = losses.init_head(int(labels.max()) + 1, out_dim, cfg.loss.s, cfg.loss.m,
                            seed=derive_seed(cfg.seed, "head-init"))
    init = Checkpoint(params, head, meta={"stage": "pretrain"})
    if cfg.epochs == 0:
        return init
    return _train(init, images, labels, cfg, step_log=step_log)


def finetune_night(night_manifest: Manifest, night_images, pretrained: Checkpoint, cache: DayCache | None,
                   cfg: TrainConfig, step_log: list | None = None) -> Checkpoint:
    """Fine-tune a copy of ``pretrained`` on night-style images.

    With a ``cache`` the objective is ``L_LMC + alpha * L_IKT``; without one
    it is plain LMC. No augmentation is applied.
    """
    if pretrained.head is None:
        raise DataError("pretrained checkpoint has no classifier head")
    labels = night_manifest.labels
    if len(night_images) != len(night_manifest):
        raise DataError("night images and manifest differ in length")
    day_desc = cache.aligned_to(night_manifest) if cache is not None else None
    start = pretrained.copy()
    start.meta["stage"] = "finetune"
    return _train(start, night_images, labels, cfg, day_desc=day_desc, step_log=step_log)
