"""Decoupled embedding losses, their closed-form gradients, and class centers.

The embedding objective splits the classical center pull into three parts
evaluated on a batch of embeddings ``X`` (one row per sample) against
learnable per-class centers ``c``:

* an intra-class angular term, ``mean((1 - cos<x_i, c_{y_i}>)^2)``,
* an inter-class angular term,
  ``-mean(1 - mean_{k != y_i} cos<x_i, c_k>)``, which rewards pointing away
  from foreign centers,
* a norm-ratio term ``mean((1 - beta_i)^2)`` with
  ``beta_i = |x_i| / (|c_{y_i}| + eps)``, which matches norms without the
  scale blow-up of a raw norm difference.

Every function exists in two interchangeable forms: a plain numpy value
path (used for metrics and by the finite-difference oracle) and a tape path
(pass a :class:`~skelgcn.tensor.Tensor` for ``X`` or the logits) used during
training.  Closed-form gradients are provided independently of both; the
test suite requires all three routes to agree.

The published derivation of the inter-class gradient carries a sign flip
relative to the objective above (it would pull samples toward foreign
centers).  The corrected sign is the default; set
``LossWeights.literal_inter_sign`` to reproduce the as-published variant.
"""

from dataclasses import dataclass

import numpy as np

from skelgcn.tensor import (
    Tensor,
    div,
    exp,
    log,
    matmul,
    mul,
    neg,
    reshape,
    sqrt,
    sub,
    sum_over,
)

__all__ = [
    "DegenerateInput",
    "ClassCenters",
    "LossWeights",
    "init_centers",
    "intra_angular_loss",
    "inter_angular_loss",
    "norm_ratio_loss",
    "embedding_loss",
    "softmax_cross_entropy",
    "total_loss",
    "embedding_grad_x",
    "center_grads",
    "update_centers",
    "embedding_stats",
    "METRICS_HEADER",
]

_NORM_FLOOR = 1e-8

METRICS_HEADER = (
    "epoch,loss_softmax,loss_intra,loss_inter,loss_norm,loss_total,"
    "intra_cos,inter_cos,mean_beta"
)


class DegenerateInput(ValueError):
    """An embedding or center with (effectively) zero norm."""


@dataclass
class ClassCenters:
    """Learnable per-class embedding centers.

    ``eps`` guards the norm-ratio denominator; centers themselves are kept
    away from zero by a hard norm floor re-imposed after every update.
    """

    c: np.ndarray  # (M, D)
    eps: float = 0.0
    center_lr: float = 0.5

    def __post_init__(self):
        self.c = np.asarray(self.c, dtype=np.float64)
        self._check_floor()

    def _check_floor(self):
        norms = np.linalg.norm(self.c, axis=1)
        if np.any(norms <= _NORM_FLOOR):
            bad = np.nonzero(norms <= _NORM_FLOOR)[0].tolist()
            raise DegenerateInput(f"class centers {bad} are (near) zero vectors")

    @property
    def num_classes(self) -> int:
        return self.c.shape[0]

    @property
    def dim(self) -> int:
        return self.c.shape[1]


def init_centers(
    num_classes: int, dim: int, rng: np.random.Generator, eps: float = 0.0,
    center_lr: float = 0.5,
) -> ClassCenters:
    """Random unit directions scaled to sqrt(dim), so norm ratios start O(1)."""
    directions = rng.standard_normal((num_classes, dim))
    directions /= np.linalg.norm(directions, axis=1, keepdims=True)
    return ClassCenters(np.sqrt(dim) * directions, eps=eps, center_lr=center_lr)


@dataclass
class LossWeights:
    """Weights for the inter-class and norm terms.

    ``None`` means the per-batch default ``1/N``.  Explicit values must lie
    in ``[0, 1)``.  ``enabled=False`` turns the embedding loss off entirely
    (softmax-only training); ``literal_inter_sign`` selects the as-published
    inter-class gradient sign for reproduction studies.
    """

    lambda1: float | None = None
    lambda2: float | None = None
    enabled: bool = True
    literal_inter_sign: bool = False

    def __post_init__(self):
        for name in ("lambda1", "lambda2"):
            value = getattr(self, name)
            if value is not None and not 0.0 <= value < 1.0:
                raise ValueError(f"{name} must lie in [0, 1), got {value}")

    def resolve(self, batch_size: int) -> tuple:
        lam1 = 1.0 / batch_size if self.lambda1 is None else self.lambda1
        lam2 = 1.0 / batch_size if self.lambda2 is None else self.lambda2
        return lam1, lam2


def _as_batch(x) -> np.ndarray:
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"expected a (N, D) batch, got shape {arr.shape}")
    return arr


def _check_labels(labels, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.intp)
    if labels.ndim != 1:
        raise ValueError(f"labels must be a vector, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise ValueError(
            f"label out of range: values span [{labels.min()}, {labels.max()}] "
            f"for {num_classes} classes"
        )
    return labels


def _angular_pieces(x: np.ndarray, centers: ClassCenters):
    """Norms, unit rows, and the full cosine matrix, with degeneracy guards."""
    nx = np.linalg.norm(x, axis=1)
    if np.any(nx <= _NORM_FLOOR):
        bad = np.nonzero(nx <= _NORM_FLOOR)[0].tolist()
        raise DegenerateInput(f"embeddings {bad} have (near) zero norm")
    centers._check_floor()
    nc = np.linalg.norm(centers.c, axis=1)
    xhat = x / nx[:, None]
    chat = centers.c / nc[:, None]
    return nx, nc, xhat, chat, xhat @ chat.T


# ---------------------------------------------------------------------------
# loss values (numpy path and tape path)
# ---------------------------------------------------------------------------


def intra_angular_loss(x, labels, centers: ClassCenters):
    """Mean squared (1 - cosine) between each sample and its own center.

    Bounded in [0, 4]; invariant under positive rescaling of the samples.
    """
    labels = _check_labels(labels, centers.num_classes)
    if isinstance(x, Tensor):
        return _intra_graph(x, labels, centers)
    x = _as_batch(x)
    _, _, _, _, cosm = _angular_pieces(x, centers)
    own = cosm[np.arange(len(labels)), labels]
    return float(np.mean((1.0 - own) ** 2))


def inter_angular_loss(x, labels, centers: ClassCenters):
    """Negated mean margin against foreign centers; lies in [-2, 0].

    Written exactly as the (nonpositive) objective
    ``-mean_i(1 - mean_{k != y_i} cos<x_i, c_k>)``; minimizing it pushes
    samples away from the other classes' centers.
    """
    if centers.num_classes < 2:
        raise ValueError("inter-class loss needs at least two classes")
    labels = _check_labels(labels, centers.num_classes)
    if isinstance(x, Tensor):
        return _inter_graph(x, labels, centers, variant=False)
    x = _as_batch(x)
    _, _, _, _, cosm = _angular_pieces(x, centers)
    own = cosm[np.arange(len(labels)), labels]
    foreign = cosm.sum(axis=1) - own
    return float(-np.mean(1.0 - foreign / (centers.num_classes - 1)))


def norm_ratio_loss(x, labels, centers: ClassCenters):
    """Mean squared deviation of the norm ratio ``beta`` from 1 (>= 0).

    Zero-norm embeddings are valid here (``beta = 0``); only the center
    norms must stay clear of zero.
    """
    labels = _check_labels(labels, centers.num_classes)
    centers._check_floor()
    if isinstance(x, Tensor):
        return _norm_ratio_graph(x, labels, centers)
    x = _as_batch(x)
    nc = np.linalg.norm(centers.c, axis=1)
    beta = np.linalg.norm(x, axis=1) / (nc[labels] + centers.eps)
    return float(np.mean((1.0 - beta) ** 2))


def embedding_loss(x, labels, centers: ClassCenters, cfg: LossWeights):
    """Weighted sum: intra + lambda1 * inter + lambda2 * norm-ratio."""
    n = (x.data if isinstance(x, Tensor) else np.asarray(x)).shape[0]
    lam1, lam2 = cfg.resolve(n)
    if isinstance(x, Tensor):
        labels = _check_labels(labels, centers.num_classes)
        intra = _intra_graph(x, labels, centers)
        inter = _inter_graph(x, labels, centers, variant=cfg.literal_inter_sign)
        ratio = _norm_ratio_graph(x, labels, centers)
        return intra + lam1 * inter + lam2 * ratio
    return (
        intra_angular_loss(x, labels, centers)
        + lam1 * inter_angular_loss(x, labels, centers)
        + lam2 * norm_ratio_loss(x, labels, centers)
    )


def softmax_cross_entropy(logits, labels, reduction: str = "sum"):
    """Numerically stable cross entropy over a logit batch.

    The batch reduction defaults to a plain sum; pass ``reduction="mean"``
    to average instead.
    """
    if reduction not in ("sum", "mean"):
        raise ValueError(f"reduction must be 'sum' or 'mean', got {reduction!r}")
    raw = logits.data if isinstance(logits, Tensor) else np.asarray(logits, dtype=np.float64)
    if raw.ndim != 2:
        raise ValueError(f"expected (N, M) logits, got shape {raw.shape}")
    if not np.all(np.isfinite(raw)):
        raise ValueError("logits contain non-finite values")
    labels = _check_labels(labels, raw.shape[1])
    n = raw.shape[0]
    if isinstance(logits, Tensor):
        onehot = np.zeros(raw.shape)
        onehot[np.arange(n), labels] = 1.0
        shift = Tensor(raw.max(axis=1, keepdims=True))  # constant, grad-exact
        centered = sub(logits, shift)
        lse = sum_over(log(sum_over(exp(centered), axis=1, keepdims=True)) + shift)
        own = sum_over(mul(logits, Tensor(onehot)))
        loss = sub(lse, own)
        return loss if reduction == "sum" else mul(loss, Tensor(1.0 / n))
    shift = raw.max(axis=1, keepdims=True)
    lse = np.log(np.exp(raw - shift).sum(axis=1)) + shift[:, 0]
    nll = lse - raw[np.arange(n), labels]
    total = float(nll.sum())
    return total if reduction == "sum" else total / n


def total_loss(logits, x, labels, centers: ClassCenters, cfg: LossWeights,
               reduction: str = "sum"):
    """Classification loss plus (when enabled) the embedding loss."""
    ce = softmax_cross_entropy(logits, labels, reduction)
    if not cfg.enabled:
        return ce
    return ce + embedding_loss(x, labels, centers, cfg)


# ---------------------------------------------------------------------------
# tape builders
# ---------------------------------------------------------------------------


def _unit_rows(x: Tensor) -> tuple:
    sq = sum_over(mul(x, x), axis=1, keepdims=True)
    nx = sqrt(sq)
    return nx, div(x, nx)


def _intra_graph(x: Tensor, labels, centers: ClassCenters) -> Tensor:
    n = x.shape[0]
    _, _, _, chat, _ = _angular_pieces(x.data, centers)
    _, xhat = _unit_rows(x)
    own_cos = sum_over(mul(xhat, Tensor(chat[labels])), axis=1)
    gap = sub(Tensor(1.0), own_cos)
    return mul(sum_over(mul(gap, gap)), Tensor(1.0 / n))


def _inter_graph(x: Tensor, labels, centers: ClassCenters, variant: bool) -> Tensor:
    """Foreign-center cosine objective.

    ``variant=False`` builds the literal nonpositive objective.
    ``variant=True`` builds the sign-flipped companion whose gradient equals
    the as-published derivation (same optimum structure, opposite push).
    """
    if centers.num_classes < 2:
        raise ValueError("inter-class loss needs at least two classes")
    n = x.shape[0]
    m = centers.num_classes
    _, _, _, chat, _ = _angular_pieces(x.data, centers)
    _, xhat = _unit_rows(x)
    cosm = matmul(xhat, Tensor(chat.T))
    onehot = np.zeros((n, m))
    onehot[np.arange(n), labels] = 1.0
    own = sum_over(mul(cosm, Tensor(onehot)), axis=1)
    foreign = sub(sum_over(cosm, axis=1), own)
    mean_foreign = mul(foreign, Tensor(1.0 / (m - 1)))
    if variant:
        return mul(sum_over(mean_foreign), Tensor(-1.0 / n))
    return mul(sum_over(sub(Tensor(1.0), mean_foreign)), Tensor(-1.0 / n))


def _norm_ratio_graph(x: Tensor, labels, centers: ClassCenters) -> Tensor:
    n = x.shape[0]
    nc = np.linalg.norm(centers.c, axis=1)
    nx, _ = _unit_rows(x)
    beta = div(reshape(nx, (n,)), Tensor(nc[labels] + centers.eps))
    gap = sub(Tensor(1.0), beta)
    return mul(sum_over(mul(gap, gap)), Tensor(1.0 / n))


# ---------------------------------------------------------------------------
# closed-form gradients
# ---------------------------------------------------------------------------


def embedding_grad_x(x, labels, centers: ClassCenters, cfg: LossWeights) -> np.ndarray:
    """Closed-form d(embedding loss)/dX, one row per sample.

    Matches both the tape gradient and central finite differences on the
    value functions above; the angular pieces are orthogonal to each
    ``x_i`` (pure rotations), only the norm-ratio piece is radial.
    """
    x = _as_batch(x)
    labels = _check_labels(labels, centers.num_classes)
    n, _ = x.shape
    m = centers.num_classes
    lam1, lam2 = cfg.resolve(n)
    nx, nc, xhat, chat, cosm = _angular_pieces(x, centers)
    rows = np.arange(n)
    own = cosm[rows, labels]

    grad = (2.0 / n) * (1.0 - own)[:, None] * (
        own[:, None] * xhat - chat[labels]
    ) / nx[:, None]

    if m >= 2:
        foreign_dirs = chat.sum(axis=0)[None, :] - chat[labels]
        foreign_cos = cosm.sum(axis=1) - own
        inter = (
            (foreign_dirs - foreign_cos[:, None] * xhat)
            / (n * (m - 1))
            / nx[:, None]
        )
        if cfg.literal_inter_sign:
            inter = -inter
        grad += lam1 * inter

    beta = nx / (nc[labels] + centers.eps)
    grad += lam2 * (2.0 / n) * ((beta - 1.0) / (nc[labels] + centers.eps))[:, None] * xhat
    return grad


def center_grads(x, labels, centers: ClassCenters, cfg: LossWeights) -> np.ndarray:
    """Closed-form d(embedding loss)/d(centers), one row per class.

    The angular pieces mirror the sample gradients with the roles of ``x``
    and ``c`` swapped; the norm-ratio piece acts along each center's own
    direction.  Classes absent from the batch still receive inter-class
    contributions from every sample.
    """
    x = _as_batch(x)
    labels = _check_labels(labels, centers.num_classes)
    n, d = x.shape
    m = centers.num_classes
    lam1, lam2 = cfg.resolve(n)
    nx, nc, xhat, chat, cosm = _angular_pieces(x, centers)
    rows = np.arange(n)
    own = cosm[rows, labels]
    grad = np.zeros((m, d))

    intra = (2.0 / n) * (1.0 - own)[:, None] * (
        own[:, None] * chat[labels] - xhat
    ) / nc[labels][:, None]
    np.add.at(grad, labels, intra)

    if m >= 2:
        sum_xhat = xhat.sum(axis=0)
        own_xhat = np.zeros((m, d))
        np.add.at(own_xhat, labels, xhat)
        sum_cos = cosm.sum(axis=0)
        own_cos = np.zeros(m)
        np.add.at(own_cos, labels, own)
        foreign_xhat = sum_xhat[None, :] - own_xhat
        foreign_cos = sum_cos - own_cos
        inter = (
            (foreign_xhat - foreign_cos[:, None] * chat)
            / (n * (m - 1))
            / nc[:, None]
        )
        if cfg.literal_inter_sign:
            inter = -inter
        grad += lam1 * inter

    beta = nx / (nc[labels] + centers.eps)
    ratio = (2.0 / n) * (1.0 - beta)[:, None] * nx[:, None] * chat[labels] / (
        (nc[labels] + centers.eps) ** 2
    )[:, None]
    np.add.at(grad, labels, lam2 * ratio)
    return grad


def update_centers(x, labels, centers: ClassCenters, cfg: LossWeights) -> ClassCenters:
    """One gradient step on the centers, re-imposing the norm floor.

    An update that would drive a center's norm below the floor is rescaled
    back onto it (keeping the previous direction if the update zeroed the
    center exactly).
    """
    grad = center_grads(x, labels, centers, cfg)
    previous = centers.c.copy()
    centers.c = centers.c - centers.center_lr * grad
    norms = np.linalg.norm(centers.c, axis=1)
    for j in np.nonzero(norms < _NORM_FLOOR)[0]:
        direction = centers.c[j] if norms[j] > 0.0 else previous[j]
        centers.c[j] = direction / np.linalg.norm(direction) * _NORM_FLOOR
    return centers


# ---------------------------------------------------------------------------
# diagnostics
# ---------------------------------------------------------------------------


def embedding_stats(x, labels, centers: ClassCenters) -> dict:
    """Compactness diagnostics: mean own-center cosine, mean pairwise
    center cosine, and the mean norm ratio."""
    x = _as_batch(x)
    labels = _check_labels(labels, centers.num_classes)
    nx, nc, xhat, chat, cosm = _angular_pieces(x, centers)
    own = cosm[np.arange(len(labels)), labels]
    m = centers.num_classes
    if m >= 2:
        pair = chat @ chat.T
        inter = float(pair[np.triu_indices(m, k=1)].mean())
    else:
        inter = float("nan")
    beta = nx / (nc[labels] + centers.eps)
    return {
        "intra_cos": float(own.mean()),
        "inter_cos": inter,
        "mean_beta": float(beta.mean()),
    }
