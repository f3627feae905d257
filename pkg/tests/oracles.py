"""Independent reference implementations used as test oracles.

Everything here is written as plainly as possible (explicit loops, direct
formulas, high-precision accumulation) and never calls into the library
code paths it is used to check.
"""

import math

import numpy as np


def fd_gradient(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Dense central-difference gradient of a scalar function of an array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    out = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        out[i] = (fp - fm) / (2.0 * h)
    return g


def matmul_loops(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Triple-loop matrix product."""
    n, k = a.shape
    k2, m = b.shape
    assert k == k2
    out = np.zeros((n, m))
    for i in range(n):
        for j in range(m):
            acc = 0.0
            for t in range(k):
                acc += a[i, t] * b[t, j]
            out[i, j] = acc
    return out


def conv1x1_via_matmul(x: np.ndarray, w: np.ndarray, bias=None) -> np.ndarray:
    """Channel mixing as a reshape + matmul."""
    c_in, t, v = x.shape
    flat = x.reshape(c_in, t * v)
    out = (w @ flat).reshape(w.shape[0], t, v)
    if bias is not None:
        out = out + np.asarray(bias)[:, None, None]
    return out


def temporal_conv_loops(x: np.ndarray, w: np.ndarray, stride: int) -> np.ndarray:
    """Sliding-window temporal convolution with explicit loops."""
    c_in, t_in, v = x.shape
    c_out, c_in2, k = w.shape
    assert c_in == c_in2
    pad = (k - 1) // 2
    t_out = math.ceil(t_in / stride)
    out = np.zeros((c_out, t_out, v))
    for o in range(c_out):
        for ti in range(t_out):
            for vi in range(v):
                acc = 0.0
                for c in range(c_in):
                    for j in range(k):
                        src = ti * stride + j - pad
                        if 0 <= src < t_in:
                            acc += w[o, c, j] * x[c, src, vi]
                out[o, ti, vi] = acc
    return out


def saliency_loops(x: np.ndarray, w_mid: np.ndarray, w_out: np.ndarray, act) -> np.ndarray:
    """Frame-joint saliency map computed with explicit loops."""
    c_in, t, v = x.shape
    c_mid = w_mid.shape[0]
    mid = np.zeros((c_mid, t, v))
    for cm in range(c_mid):
        for ti in range(t):
            for vi in range(v):
                mid[cm, ti, vi] = sum(w_mid[cm, c] * x[c, ti, vi] for c in range(c_in))
    ft = mid.mean(axis=2)  # (c_mid, t)
    fv = mid.mean(axis=1)  # (c_mid, v)
    c_out = w_out.shape[0]
    out = np.zeros((c_out, t, v))
    for o in range(c_out):
        for ti in range(t):
            for vi in range(v):
                acc = 0.0
                for cm in range(c_mid):
                    acc += w_out[o, cm] * act(ft[cm, ti] * fv[cm, vi])
                out[o, ti, vi] = acc
    return out


def topology_loops(
    x: np.ndarray,
    w_mid: np.ndarray,
    w_spatial_mid: np.ndarray,
    w_out: np.ndarray,
    act,
) -> np.ndarray:
    """Dynamic joint-joint topology tensor computed with explicit loops."""
    c_in, t, v = x.shape
    c_mid = w_mid.shape[0]
    fv = np.zeros((c_mid, v))
    fs = np.zeros((c_mid, v))
    for cm in range(c_mid):
        for vi in range(v):
            fv[cm, vi] = np.mean(
                [sum(w_mid[cm, c] * x[c, ti, vi] for c in range(c_in)) for ti in range(t)]
            )
            fs[cm, vi] = np.mean(
                [
                    sum(w_spatial_mid[cm, c] * x[c, ti, vi] for c in range(c_in))
                    for ti in range(t)
                ]
            )
    c_out = w_out.shape[0]
    out = np.zeros((c_out, v, v))
    for o in range(c_out):
        for u in range(v):
            for vi in range(v):
                acc = 0.0
                for cm in range(c_mid):
                    acc += w_out[o, cm] * act(fv[cm, vi] + fs[cm, u])
                out[o, u, vi] = acc
    return out


def graph_block_loops(r_list, a_list, alpha_list, topo_list) -> np.ndarray:
    """Quadruple-loop fusion of refined features with static + dynamic topology."""
    c, t, v = r_list[0].shape
    out = np.zeros((c, t, v))
    for k in range(len(r_list)):
        r, a, alpha, topo = r_list[k], a_list[k], alpha_list[k], topo_list[k]
        for ci in range(c):
            for ti in range(t):
                for vi in range(v):
                    acc = 0.0
                    for u in range(v):
                        acc += r[ci, ti, u] * (a[u, vi] + alpha * topo[ci, u, vi])
                    out[ci, ti, vi] += acc
    return out


def hop_distances_floyd(n: int, edges) -> np.ndarray:
    """All-pairs shortest hop counts via Floyd-Warshall."""
    inf = np.inf
    d = np.full((n, n), inf)
    np.fill_diagonal(d, 0.0)
    for i, j in edges:
        d[i, j] = 1.0
        d[j, i] = 1.0
    for m in range(n):
        for i in range(n):
            for j in range(n):
                if d[i, m] + d[m, j] < d[i, j]:
                    d[i, j] = d[i, m] + d[m, j]
    return d


def random_tree(rng: np.random.Generator, n: int):
    """A uniformly random labelled tree edge list (random parent attach)."""
    edges = []
    for child in range(1, n):
        parent = int(rng.integers(0, child))
        edges.append((parent, child))
    return edges


def intra_angular_direct(x, labels, centers) -> float:
    """Mean squared (1 - cosine) to each sample's own center, via math.fsum."""
    n = x.shape[0]
    terms = []
    for i in range(n):
        xi = x[i]
        ci = centers[labels[i]]
        cos = math.fsum(xi * ci) / (
            math.sqrt(math.fsum(xi * xi)) * math.sqrt(math.fsum(ci * ci))
        )
        terms.append((1.0 - cos) ** 2)
    return math.fsum(terms) / n


def inter_angular_direct(x, labels, centers) -> float:
    """Negated mean margin over foreign-center cosines, direct formula."""
    n, _ = x.shape
    m = centers.shape[0]
    terms = []
    for i in range(n):
        xi = x[i]
        nx = math.sqrt(math.fsum(xi * xi))
        cos_sum = math.fsum(
            math.fsum(xi * centers[k]) / (nx * math.sqrt(math.fsum(centers[k] ** 2)))
            for k in range(m)
            if k != labels[i]
        )
        terms.append(1.0 - cos_sum / (m - 1))
    return -math.fsum(terms) / n


def norm_ratio_direct(x, labels, centers, eps=0.0) -> float:
    n = x.shape[0]
    terms = []
    for i in range(n):
        beta = math.sqrt(math.fsum(x[i] * x[i])) / (
            math.sqrt(math.fsum(centers[labels[i]] ** 2)) + eps
        )
        terms.append((1.0 - beta) ** 2)
    return math.fsum(terms) / n


def softmax_ce_direct(logits, labels, reduction="sum") -> float:
    """Cross entropy from first principles with mpmath-free high precision."""
    n = logits.shape[0]
    losses = []
    for i in range(n):
        row = logits[i]
        mx = row.max()
        lse = mx + math.log(math.fsum(math.exp(z - mx) for z in row))
        losses.append(lse - row[labels[i]])
    total = math.fsum(losses)
    return total if reduction == "sum" else total / n
