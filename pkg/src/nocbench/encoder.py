"""Patch-linear embedding network with GeM pooling and exact backprop.

Pipeline per image::

    patches (M x 3P^2) -> X @ W1 + b1 -> relu -> clamp(eps) -> GeM(p)
        -> @ W2 + b2 -> L2 normalize

Parameters are stored as float32 (the checkpoint format); all arithmetic
runs in float64. Batch reductions are done in fixed chunks of
``REDUCE_CHUNK`` records summed in record order, so results do not
depend on the worker count.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

GEM_EPS = 1e-6
NORM_EPS = 1e-12
REDUCE_CHUNK = 16

TENSOR_NAMES = ("W1", "b1", "gem_p", "W2", "b2")


@dataclass
class EncoderParams:
    patch_size: int
    W1: np.ndarray  # (3 * patch_size**2, feat_dim)
    b1: np.ndarray  # (feat_dim,)
    gem_p: np.ndarray  # shape (1,)
    W2: np.ndarray  # (feat_dim, out_dim)
    b2: np.ndarray  # (out_dim,)

    def __post_init__(self):
        self.gem_p = np.asarray(self.gem_p).reshape(1)
        k, f = np.shape(self.W1)
        if k != 3 * self.patch_size**2:
            raise ShapeError(f"W1 has {k} rows, expected 3*{self.patch_size}^2")
        if np.shape(self.b1) != (f,):
            raise ShapeError("b1 does not match W1")
        if np.shape(self.W2)[0] != f:
            raise ShapeError("W2 rows do not match feat_dim")
        if np.shape(self.b2) != (np.shape(self.W2)[1],):
            raise ShapeError("b2 does not match W2")
        if not float(self.gem_p[0]) > 0:
            raise ShapeError("gem_p must be positive")

    @property
    def feat_dim(self) -> int:
        return self.W1.shape[1]

    @property
    def out_dim(self) -> int:
        return self.W2.shape[1]

    def tensors(self) -> dict:
        return {name: getattr(self, name) for name in TENSOR_NAMES}

    def copy(self) -> "EncoderParams":
        return EncoderParams(self.patch_size, **{k: v.copy() for k, v in self.tensors().items()})

    def astype(self, dtype) -> "EncoderParams":
        return EncoderParams(self.patch_size, **{k: np.asarray(v, dtype=dtype) for k, v in self.tensors().items()})


def init_params(patch_size: int, feat_dim: int, out_dim: int = 64, seed: int = 0,
                gem_p: float = 3.0) -> EncoderParams:
    """Seeded uniform init in +-1/sqrt(fan_in) for weights and biases."""
    rng = np.random.default_rng(seed)
    k = 3 * patch_size * patch_size
    lim1, lim2 = 1.0 / np.sqrt(k), 1.0 / np.sqrt(feat_dim)
    return EncoderParams(
        patch_size,
        W1=rng.uniform(-lim1, lim1, (k, feat_dim)).astype(np.float32),
        b1=rng.uniform(-lim1, lim1, feat_dim).astype(np.float32),
        gem_p=np.array([gem_p], dtype=np.float32),
        W2=rng.uniform(-lim2, lim2, (feat_dim, out_dim)).astype(np.float32),
        b2=rng.uniform(-lim2, lim2, out_dim).astype(np.float32),
    )


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, H, W, 3) or (H, W, 3) -> (B, M, 3 * P * P) float64 patch rows."""
    x = np.asarray(images, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.ndim != 4 or x.shape[-1] != 3:
        raise ShapeError(f"expected H x W x 3 images, got shape {np.shape(images)}")
    b, h, w, _ = x.shape
    p = patch_size
    if h % p or w % p:
        raise ShapeError(f"image {h}x{w} not divisible by patch size {p}")
    x = x.reshape(b, h // p, p, w // p, p, 3).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, (h // p) * (w // p), 3 * p * p)


def gem_pool(features: np.ndarray, p: float, eps: float = GEM_EPS) -> np.ndarray:
    """Generalized mean over rows: ``(mean(max(x, eps) ** p)) ** (1 / p)``.

    ``features`` is (M, F) or batched (B, M, F); pooling is over the M axis.
    """
    p = float(np.asarray(p).reshape(-1)[0])
    if not p > 0:
        raise ValueError(f"GeM exponent must be positive, got {p}")
    c = np.maximum(np.asarray(features, dtype=np.float64), eps)
    return np.mean(c**p, axis=-2) ** (1.0 / p)


def _forward_cache(x: np.ndarray, params: EncoderParams) -> dict:
    W1 = np.asarray(params.W1, dtype=np.float64)
    W2 = np.asarray(params.W2, dtype=np.float64)
    p = float(params.gem_p[0])
    z = x @ W1 + np.asarray(params.b1, dtype=np.float64)
    c = np.maximum(z, GEM_EPS)  # relu followed by the eps clamp
    cp = c**p
    s = cp.mean(axis=1)
    g = s ** (1.0 / p)
    y = g @ W2 + np.asarray(params.b2, dtype=np.float64)
    norm = np.maximum(np.linalg.norm(y, axis=1, keepdims=True), NORM_EPS)
    return dict(x=x, z=z, c=c, cp=cp, s=s, g=g, y=y, norm=norm, out=y / norm, p=p)


def forward_batch(images, params: EncoderParams) -> np.ndarray:
    """Unit-norm descriptors (B, out_dim), float64."""
    return _forward_cache(patchify(images, params.patch_size), params)["out"]


def forward(img, params: EncoderParams) -> np.ndarray:
    """Descriptor of a single H x W x 3 image."""
    return forward_batch(np.asarray(img)[None], params)[0]


def _backward_chunk(cache: dict, params: EncoderParams, up: np.ndarray) -> dict:
    out, norm, p = cache["out"], cache["norm"], cache["p"]
    dy = (up - out * np.sum(out * up, axis=1, keepdims=True)) / norm
    W2 = np.asarray(params.W2, dtype=np.float64)
    g, s, c, cp = cache["g"], cache["s"], cache["c"], cache["cp"]
    m = c.shape[1]
    dg = dy @ W2.T
    # d g / d c = g / s * c^(p-1) / M ; d g / d p = g * (mean(c^p ln c) / (p s) - ln s / p^2)
    dc = (dg * g / s)[:, None, :] * (cp / c) / m
    mean_cp_log = np.mean(cp * np.log(c), axis=1)
    dp = np.sum(dg * g * (mean_cp_log / (p * s) - np.log(s) / p**2))
    dz = dc * (cache["z"] > GEM_EPS)
    return {
        "W1": np.einsum("bmk,bmf->kf", cache["x"], dz),
        "b1": dz.sum(axis=(0, 1)),
        "gem_p": np.array([dp]),
        "W2": g.T @ dy,
        "b2": dy.sum(axis=0),
    }


def forward_backward(images, params: EncoderParams, upstream_fn, threads: int = 1):
    """Forward a batch, then backprop ``upstream_fn(descriptors)``.

    ``upstream_fn`` maps the (B, D) descriptor matrix to ``(aux, dL/dout)``
    so a loss can be evaluated on the whole batch before gradients flow.
    Returns ``(descriptors, aux, grads)``; ``grads`` maps each tensor name
    to a float64 array of that tensor's shape.
    """
    x = patchify(images, params.patch_size)
    starts = list(range(0, x.shape[0], REDUCE_CHUNK))

    def run_forward(i):
        return _forward_cache(x[i:i + REDUCE_CHUNK], params)

    pool = ThreadPoolExecutor(threads) if threads > 1 and len(starts) > 1 else None
    try:
        caches = list(pool.map(run_forward, starts)) if pool else [run_forward(i) for i in starts]
        desc = np.concatenate([c["out"] for c in caches]) if caches else np.zeros((0, params.out_dim))
        aux, up = upstream_fn(desc)
        up = np.asarray(up, dtype=np.float64)

        def run_backward(j):
            i = starts[j]
            return _backward_chunk(caches[j], params, up[i:i + REDUCE_CHUNK])

        idx = range(len(starts))
        parts = list(pool.map(run_backward, idx)) if pool else [run_backward(j) for j in idx]
    finally:
        if pool:
            pool.shutdown()
    grads = {name: np.zeros(np.shape(t)) for name, t in params.tensors().items()}
    for part in parts:
        for name in TENSOR_NAMES:
            grads[name] = grads[name] + part[name]
    return desc, aux, grads


def backward(img, params: EncoderParams, upstream_grad) -> dict:
    """Gradients of ``upstream_grad . forward(img)`` with respect to every parameter."""
    up = np.asarray(upstream_grad, dtype=np.float64)
    if up.shape != (params.out_dim,):
        raise ShapeError(f"upstream gradient must have shape ({params.out_dim},)")
    _, _, grads = forward_backward(np.asarray(img)[None], params, lambda d: (None, up[None]))
    return grads

