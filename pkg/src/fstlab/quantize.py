"""Codebook baselines: K-means (hard, straight-through) and Gumbel-softmax selection."""
from dataclasses import dataclass, field

import numpy as np
import torch


@dataclass
class Codebook:
    K: int
    codes: np.ndarray
    method: str = "kmeans"
    errors: list = field(default_factory=list)

    def __post_init__(self):
        self.codes = np.asarray(self.codes, dtype=np.float64)
        if self.K < 1 or self.codes.shape[0] != self.K:
            raise ValueError(f"codebook needs K >= 1 rows, got {self.codes.shape}")
        if not np.all(np.isfinite(self.codes)):
            raise ValueError("codebook rows must be finite")
        if self.method not in ("kmeans", "gumbel"):
            raise ValueError(f"unknown codebook method {self.method!r}")


def _sq_dists(x, c):
    d = (x * x).sum(1)[:, None] + (c * c).sum(1)[None, :] - 2.0 * x @ c.T
    return np.maximum(d, 0.0)


def _kmeans_pp(x, K, rng):
    N = len(x)
    centers = [x[rng.integers(N)]]
    d2 = _sq_dists(x, centers[0][None])[:, 0]
    for _ in range(1, K):
        total = d2.sum()
        idx = rng.choice(N, p=d2 / total) if total > 0 else rng.integers(N)
        centers.append(x[idx])
        d2 = np.minimum(d2, _sq_dists(x, x[idx][None])[:, 0])
    return np.array(centers)


def fit_kmeans(vectors, K, iters=25, seed=0):
    """Lloyd's algorithm from a seeded k-means++ start.

    ``errors[t]`` is the mean squared quantization error of the assignment
    made with the centroids of iteration ``t``; it never increases. Empty
    clusters keep their previous centroid.
    """
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError("vectors must be N x d")
    if len(x) < K:
        raise ValueError(f"need at least K={K} vectors, got {len(x)}")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, K, rng)
    errors = []
    assign = None
    for _ in range(max(iters, 1)):
        d = _sq_dists(x, centers)
        new_assign = d.argmin(1)
        errors.append(float(d[np.arange(len(x)), new_assign].mean()))
        if assign is not None and np.array_equal(assign, new_assign):
            break
        assign = new_assign
        for k in range(K):
            members = x[assign == k]
            if len(members):
                centers[k] = members.mean(0)
    return Codebook(K, centers, "kmeans", errors)


def _codes_tensor(codebook, like):
    codes = codebook.codes if isinstance(codebook, Codebook) else codebook
    return torch.as_tensor(codes, dtype=like.dtype)


def nearest_code(x, codes):
    d = (x * x).sum(-1, keepdim=True) + (codes * codes).sum(-1) - 2.0 * x @ codes.T
    return d.argmin(-1)


class _StraightThrough(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, q):
        return q.clone()

    @staticmethod
    def backward(ctx, grad):
        return grad, None


def quantize_hard(x, codebook):
    """Replace each row by its nearest code; gradients pass straight through.

    The forward value is the code row itself (bit-exact, unlike
    ``x + (q - x).detach()``).
    """
    codes = _codes_tensor(codebook, x)
    q = codes[nearest_code(x.detach(), codes)]
    return _StraightThrough.apply(x, q)


def distance_logits_init(proj, codes):
    """Set a linear map so its logits rank codes by (negative) squared distance."""
    with torch.no_grad():
        proj.weight.copy_(2.0 * codes)
        proj.bias.copy_(-(codes * codes).sum(-1))


def quantize_gumbel(x, proj, codes, temperature, training=True, generator=None,
                    noise=True, return_weights=False):
    """Gumbel-softmax code selection.

    Training: a softmax over ``(proj(x) + gumbel) / temperature`` mixes the
    codes (rows are convex combinations). Eval: the argmax code.
    """
    if temperature <= 0:
        raise ValueError(f"temperature must be > 0, got {temperature}")
    codes = _codes_tensor(codes, x) if not isinstance(codes, torch.Tensor) else codes
    logits = proj(x)
    if not training:
        idx = logits.argmax(-1)
        weights = torch.nn.functional.one_hot(idx, codes.shape[0]).to(x.dtype)
        out = codes[idx]
    else:
        if noise:
            u = torch.rand(logits.shape, generator=generator, dtype=logits.dtype)
            fi = torch.finfo(u.dtype)
            u = u.clamp(fi.tiny, 1.0 - fi.eps)
            logits = logits - torch.log(-torch.log(u))
        weights = torch.softmax(logits / temperature, dim=-1)
        out = weights @ codes
    return (out, weights) if return_weights else out
