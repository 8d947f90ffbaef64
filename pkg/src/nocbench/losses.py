"""Large-margin cosine classification loss and the inherited-knowledge KL term.

Shapes: descriptors ``X`` are (B, D) unit rows, the head ``W`` is (C, D)
with unit rows, ``labels`` are (B,) ints. Every loss returns its value
together with gradients of that value (mean over the batch).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import DataError, ShapeError


@dataclass
class ClassifierHead:
    W: np.ndarray
    s: float = 30.0
    m: float = 0.4

    def __post_init__(self):
        self.W = np.asarray(self.W)
        if self.W.ndim != 2:
            raise ShapeError("head weights must be a C x D matrix")
        if not self.s > 0:
            raise DataError("scale s must be positive")
        if not 0.0 <= self.m < 1.0:
            raise DataError("margin m must lie in [0, 1)")

    @property
    def num_classes(self) -> int:
        return self.W.shape[0]

    @property
    def dim(self) -> int:
        return self.W.shape[1]

    def copy(self) -> "ClassifierHead":
        return ClassifierHead(self.W.copy(), self.s, self.m)

    def renormalize(self) -> None:
        """Project rows back onto the unit sphere (after an optimizer step)."""
        w = np.asarray(self.W, dtype=np.float64)
        self.W = (w / np.linalg.norm(w, axis=1, keepdims=True)).astype(self.W.dtype)


def init_head(num_classes: int, dim: int, s: float = 30.0, m: float = 0.4, seed: int = 0) -> ClassifierHead:
    rng = np.random.default_rng(seed)
    w = rng.standard_normal((num_classes, dim))
    w /= np.linalg.norm(w, axis=1, keepdims=True)
    return ClassifierHead(w.astype(np.float32), s, m)


@dataclass
class LossConfig:
    alpha: float = 30.0
    alpha_mode: str = "fixed"  # "fixed" | "auto"
    s: float = 30.0
    m: float = 0.4
    ikt_scalar_mode: bool = False

    def __post_init__(self):
        if not np.isfinite(self.alpha) or self.alpha < 0:
            raise DataError("alpha must be finite and non-negative")
        if self.alpha_mode not in ("fixed", "auto"):
            raise DataError(f"alpha_mode must be 'fixed' or 'auto', not {self.alpha_mode!r}")


@dataclass
class LossTerms:
    """Value and gradients of a batch objective."""

    loss: float
    dX: np.ndarray
    dW: np.ndarray
    parts: dict = field(default_factory=dict)


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    return x[None] if x.ndim == 1 else x


def _check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.atleast_1d(np.asarray(labels))
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        bad = labels[(labels < 0) | (labels >= num_classes)][0]
        raise DataError(f"label {int(bad)} outside [0, {num_classes})")
    return labels.astype(np.int64)


def cosines(x, head: ClassifierHead) -> np.ndarray:
    """``W @ x``: cosine between a unit descriptor and every class weight."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != head.dim:
        raise ShapeError(f"descriptor dim {x.shape[-1]} != head dim {head.dim}")
    return x @ np.asarray(head.W, dtype=np.float64).T


def margin_logits(cos: np.ndarray, labels: np.ndarray, s: float, m: float) -> np.ndarray:
    """``s * (cos - m * onehot(label))``."""
    z = np.array(cos, dtype=np.float64, copy=True)
    z[np.arange(len(labels)), labels] -= m
    return s * z


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def lmc_loss(X, labels, head: ClassifierHead) -> LossTerms:
    """Large margin cosine loss averaged over the batch.

    The margin is subtracted from the ground-truth cosine only, then all
    cosines are scaled by ``s`` and fed to softmax cross-entropy.
    """
    X = _as_batch(X)
    if X.shape[0] == 0:
        raise DataError("empty batch")
    labels = _check_labels(labels, head.num_classes)
    cos = cosines(X, head)
    z = margin_logits(cos, labels, head.s, head.m)
    rows = np.arange(len(labels))
    logp = log_softmax(z)
    loss = -logp[rows, labels].mean()
    dz = np.exp(logp)
    dz[rows, labels] -= 1.0
    dz /= len(labels)
    return _through_cosines(float(loss), dz, X, head, {"lmc": float(loss)})


def _through_cosines(loss, dz, X, head, parts) -> LossTerms:
    dcos = head.s * dz
    return LossTerms(loss, dcos @ np.asarray(head.W, dtype=np.float64), dcos.T @ X, parts)


def softened_probs(x, label, head: ClassifierHead) -> np.ndarray:
    """Full C-class softmax of the margin-adjusted scaled logits.

    Accepts one descriptor with a scalar label, or a (B, D) batch with (B,)
    labels. Entry ``[label]`` is the ground-truth probability.
    """
    single = np.ndim(x) == 1
    X = _as_batch(x)
    labels = _check_labels(label, head.num_classes)
    p = softmax(margin_logits(cosines(X, head), labels, head.s, head.m))
    return p[0] if single else p


def _check_dist(p, name):
    p = np.asarray(p, dtype=np.float64)
    if np.any(p < 0) or not np.allclose(p.sum(axis=-1), 1.0, atol=1e-6):
        raise DataError(f"{name} is not a probability distribution")
    return p


def kl_divergence(p_day, p_night) -> np.ndarray:
    """Row-wise ``sum_j p ln(p / q)`` with ``0 ln(0/q) = 0``."""
    p = _check_dist(p_day, "p_day")
    q = _check_dist(p_night, "p_night")
    if p.shape != q.shape:
        raise ShapeError("distributions differ in shape")
    support = p > 0
    if np.any(support & (q <= 0)):
        raise DataError("infinite divergence: p_night is zero where p_day is positive")
    terms = np.zeros_like(p)
    terms[support] = p[support] * (np.log(p[support]) - np.log(q[support]))
    return terms.sum(axis=-1)


def ikt_loss(p_day, p_night):
    """Mean KL(p_day || p_night) and its gradient w.r.t. the night logits.

    With ``p_night = softmax(z)`` the per-row gradient is ``p_night - p_day``;
    it is divided by the batch size to match the mean.
    """
    p = np.atleast_2d(p_day)
    q = np.atleast_2d(p_night)
    kl = kl_divergence(p, q)
    grad = (np.asarray(q, dtype=np.float64) - p) / p.shape[0]
    return float(kl.mean()), (grad[0] if np.ndim(p_night) == 1 else grad)


def _xlogy_ratio(p, log_p_other):
    """``p * (ln p - log_p_other)`` with ``0 ln 0 = 0``."""
    safe = np.where(p > 0, p, 1.0)
    return np.where(p > 0, p * (np.log(safe) - log_p_other), 0.0)


def _ikt_from_logits(z_night, p_day, labels, scalar_mode: bool):
    """IKT value and d/dz_night for a batch whose night logits are ``z_night``.

    Night log-probabilities come straight from log-softmax, never from a
    clipped probability, so the value stays consistent with its gradient
    when the night distribution saturates. Logits are bounded by
    ``s * (1 + m)``, so no class probability underflows to zero.
    """
    b = len(labels)
    rows = np.arange(b)
    logq = log_softmax(z_night)
    q = np.exp(logq)
    if not scalar_mode:
        kl = _xlogy_ratio(p_day, logq).sum(axis=1)
        return float(kl.mean()), (q - p_day) / b
    # Bernoulli reading: KL between (p_gt, 1 - p_gt) and (q_gt, 1 - q_gt)
    p_gt = p_day[rows, labels]
    q_gt = q[rows, labels]
    other = q.copy()
    other[rows, labels] = 0.0
    q_rest = other.sum(axis=1)
    # q_rest is zero only for a single-class head, where both terms vanish
    with np.errstate(divide="ignore", invalid="ignore"):
        kl = _xlogy_ratio(p_gt, logq[rows, labels]) + _xlogy_ratio(1.0 - p_gt, np.log(q_rest))
        coef = np.where(q_rest > 0, (q_gt - p_gt) / q_rest, 0.0)
    grad = -coef[:, None] * q
    grad[rows, labels] = q_gt - p_gt
    return float(kl.mean()), grad / b


def ikt_terms(X, labels, head: ClassifierHead, p_day, scalar_mode: bool = False) -> LossTerms:
    """IKT alone as a function of the night descriptors: mean KL(p_day || p_night(X))."""
    X, labels, p_day = _check_batch(X, labels, head, p_day)
    z = margin_logits(cosines(X, head), labels, head.s, head.m)
    ikt, dz = _ikt_from_logits(z, p_day, labels, scalar_mode)
    return _through_cosines(ikt, dz, X, head, {"ikt": ikt})


def _check_batch(X, labels, head, p_day):
    X = _as_batch(X)
    if X.shape[0] == 0:
        raise DataError("empty batch")
    labels = _check_labels(labels, head.num_classes)
    p_day = np.asarray(p_day, dtype=np.float64)
    if p_day.shape != (X.shape[0], head.num_classes):
        raise ShapeError("p_day must be (batch, classes)")
    return X, labels, p_day


def combined_loss(X, labels, head: ClassifierHead, p_day, cfg: LossConfig, alpha: float | None = None) -> LossTerms:
    """``L_LMC + alpha * L_IKT`` with gradients.

    ``p_day`` (B, C) is treated as a constant target. ``alpha`` overrides
    ``cfg.alpha`` (the trainer passes the resolved auto value).
    """
    X, labels, p_day = _check_batch(X, labels, head, p_day)
    a = cfg.alpha if alpha is None else float(alpha)
    rows = np.arange(len(labels))
    z = margin_logits(cosines(X, head), labels, head.s, head.m)
    logp = log_softmax(z)
    lmc = float(-logp[rows, labels].mean())
    dz = np.exp(logp)
    dz[rows, labels] -= 1.0
    dz /= len(labels)
    ikt, dz_ikt = _ikt_from_logits(z, p_day, labels, cfg.ikt_scalar_mode)
    if a != 0.0:
        loss = lmc + a * ikt
        dz = dz + a * dz_ikt
    else:
        loss = lmc
    return _through_cosines(loss, dz, X, head, {"lmc": lmc, "ikt": ikt, "alpha": a, "loss": loss})


def auto_alpha(lmc: float, ikt: float, fallback: float) -> float:
    """Alpha that makes ``alpha * L_IKT`` equal ``L_LMC`` at the first step."""
    if ikt > 1e-12 and np.isfinite(ikt):
        return lmc / ikt
    return fallback
