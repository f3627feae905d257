"""Finite-difference verification of every gradient path in the package.

The oracle is a plain central difference: perturb one coordinate of one
input, re-evaluate a scalar function twice, divide.  ``check_module`` runs
it against the analytic gradients of a chosen target (closed form where one
exists, the autodiff tape otherwise) at randomly sampled coordinates and
returns one :class:`GradCheckReport` per coordinate.  A failing coordinate
produces a failing report, never an exception, so a full sweep always
completes.

Relative error convention: ``|a - n| / max(|a|, |n|, 1e-12)``.

A central difference carries an absolute noise floor of roughly
``eps * |f| / h`` (~1e-10 here), so coordinates whose true gradient sits
near or below that floor cannot be attested in relative terms by this
oracle no matter how correct they are.  A coordinate therefore passes when
its relative error is under tolerance *or* the absolute disagreement is
under a small ``atol`` pinned to that noise floor; any genuine defect
(wrong sign, misplaced term, corrupted coordinate) exceeds both.
"""

import csv
import math
from dataclasses import dataclass, fields

import numpy as np

from skelgcn import losses as L
from skelgcn import tensor as T
from skelgcn.attention import graph_block, init_graph_block
from skelgcn.graph import build_graph, toy_skeleton
from skelgcn.network import (
    ModelConfig,
    init_model,
    layer_forward,
    model_forward,
    named_parameters,
    zero_gradients,
)
from skelgcn.tensor import Tensor

__all__ = [
    "GradCheckReport",
    "central_difference",
    "relative_error",
    "compare_coordinates",
    "check_module",
    "CHECK_TARGETS",
    "reports_to_csv",
    "format_report_table",
]

DEFAULT_H = 1e-5
DEFAULT_TOL = 1e-6
DEEP_TOL = 1e-4  # compositions accumulate roundoff; see check_module
DEFAULT_ATOL = 1e-10
DEEP_ATOL = 1e-8
MIN_COORDS = 100

CHECK_TARGETS = ("tensor-ops", "losses", "attention", "layer", "model")


@dataclass
class GradCheckReport:
    target: str
    coordinate: str  # e.g. "layer0.w_mid[2,1]"
    analytic: float
    numeric: float
    rel_err: float
    passed: bool
    h: float


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-12)


def central_difference(f, x: np.ndarray, coord, h: float = DEFAULT_H) -> float:
    """(f(x + h e) - f(x - h e)) / 2h along coordinate ``coord`` of ``x``.

    ``x`` is restored afterwards.  Non-finite evaluations raise instead of
    being silently propagated.
    """
    coord = tuple(np.atleast_1d(coord)) if not isinstance(coord, tuple) else coord
    orig = x[coord]
    try:
        x[coord] = orig + h
        fp = f(x)
        x[coord] = orig - h
        fm = f(x)
    finally:
        x[coord] = orig
    if not (math.isfinite(fp) and math.isfinite(fm)):
        raise FloatingPointError(
            f"non-finite evaluation at coordinate {coord}: f+={fp}, f-={fm}"
        )
    return (fp - fm) / (2.0 * h)


def compare_coordinates(
    target: str,
    f,
    arrays: dict,
    analytic: dict,
    coords,
    h: float = DEFAULT_H,
    tol: float = DEFAULT_TOL,
    atol: float = DEFAULT_ATOL,
) -> list:
    """Check analytic gradients against central differences coordinatewise.

    ``arrays`` maps names to the mutable numpy buffers ``f`` reads from,
    ``analytic`` maps the same names to gradient arrays, and ``coords`` is a
    sequence of ``(name, flat_index)`` pairs.  Failures (including
    non-finite evaluations) become failing reports.
    """
    reports = []
    for name, flat in coords:
        x = arrays[name]
        grad = analytic[name]
        multi = np.unravel_index(flat, x.shape) if x.ndim else ()
        label = f"{name}[{','.join(str(i) for i in multi)}]" if x.ndim else name
        a = float(np.asarray(grad)[multi]) if x.ndim else float(grad)
        try:
            n = central_difference(lambda _: f(), x, multi, h)
            rel = relative_error(a, n)
            passed = rel < tol or abs(a - n) <= atol
        except FloatingPointError:
            n, rel, passed = float("nan"), float("inf"), False
        reports.append(GradCheckReport(target, label, a, n, rel, passed, h))
    return reports


def _spread_coords(rng, arrays: dict, count: int):
    """Sample ``count`` coordinates, covering every array at least once."""
    names = sorted(arrays)
    coords = []
    for i in range(count):
        name = names[i % len(names)] if i < len(names) else names[int(rng.integers(len(names)))]
        size = max(1, arrays[name].size)
        coords.append((name, int(rng.integers(size))))
    return coords


def _tape_gradients(loss: Tensor, tensors: dict) -> dict:
    for t in tensors.values():
        t.zero_grad()
    T.backward(loss)
    return {
        name: (t.grad if t.grad is not None else np.zeros_like(t.data))
        for name, t in tensors.items()
    }


def _nudge_from_kinks(x: np.ndarray, margin: float = 2e-2) -> np.ndarray:
    """Move values away from relu/hardswish kinks so the oracle is valid."""
    for kink in (0.0, -3.0, 3.0):
        close = np.abs(x - kink) < margin
        x[close] = kink + margin * np.where(x[close] >= kink, 1.0, -1.0) * 2.0
    return x


# ---------------------------------------------------------------------------
# per-target checks
# ---------------------------------------------------------------------------


def _check_tensor_ops(rng, n_coords, h, tol, atol):
    reports = []
    weight = rng.uniform(-1.0, 1.0, (3, 4, 5))

    def scalar(out):
        return T.sum_over(T.mul(out, Tensor(weight[: out.shape[0], : out.shape[1], : out.shape[2]])))

    cases = []
    a = rng.uniform(-1, 1, (3, 4))
    b = rng.uniform(-1, 1, (4, 5))
    cases.append(("matmul", {"a": a, "b": b}, lambda t: T.matmul(t["a"], t["b"])))

    x = rng.uniform(-1, 1, (2, 4, 5))
    w = rng.uniform(-1, 1, (3, 2))
    bias = rng.uniform(-1, 1, 3)
    cases.append(
        ("conv1x1", {"x": x, "w": w, "bias": bias},
         lambda t: T.conv1x1(t["x"], t["w"], t["bias"]))
    )

    xt = rng.uniform(-1, 1, (2, 6, 3))
    wt = rng.uniform(-1, 1, (3, 2, 3))
    cases.append(
        ("temporal_conv", {"x": xt, "w": wt},
         lambda t: T.temporal_conv(t["x"], t["w"], 2))
    )

    xm = rng.uniform(-1, 1, (3, 4, 5))
    cases.append(("mean", {"x": xm}, lambda t: T.mean_over_axis(t["x"], 1)))

    ba = rng.uniform(-1, 1, (3, 1, 5))
    bb = rng.uniform(-1, 1, (3, 4, 1))
    cases.append(("broadcast_mul", {"a": ba, "b": bb}, lambda t: T.mul(t["a"], t["b"])))
    cases.append(("broadcast_add", {"a": ba, "b": bb}, lambda t: T.add(t["a"], t["b"])))

    xd = rng.uniform(0.3, 1.5, (3, 4))
    yd = rng.uniform(0.3, 1.5, (3, 4))
    cases.append(("div", {"a": xd, "b": yd}, lambda t: T.div(t["a"], t["b"])))
    cases.append(
        ("exp_log_sqrt", {"x": xd},
         lambda t: T.log(T.sqrt(T.exp(t["x"]))))
    )

    for kind in sorted(T.ACTIVATIONS):
        xa = _nudge_from_kinks(rng.uniform(-1, 1, (3, 4, 5)))
        cases.append(
            (kind, {"x": xa}, lambda t, k=kind: T.activation(t["x"], k))
        )

    per_case = max(1, -(-n_coords // len(cases)))
    for name, arrays, op in cases:
        tensors = {k: Tensor(v.copy(), requires_grad=True) for k, v in arrays.items()}
        out = op(tensors)
        loss = scalar(out) if out.ndim == 3 else T.sum_over(T.mul(out, out))
        grads = _tape_gradients(loss, tensors)

        buffers = {k: t.data for k, t in tensors.items()}

        def value():
            consts = {k: Tensor(v) for k, v in buffers.items()}
            o = op(consts)
            return (scalar(o) if o.ndim == 3 else T.sum_over(T.mul(o, o))).item()

        coords = _spread_coords(rng, buffers, per_case)
        reports += compare_coordinates(f"tensor-ops/{name}", value, buffers, grads, coords, h, tol, atol)
    return reports


def _check_losses(rng, n_coords, h, tol, atol):
    n = int(rng.integers(2, 17))
    d = int(rng.integers(3, 33))
    m = int(rng.integers(2, 9))
    x = rng.uniform(-1.0, 1.0, (n, d))
    # Resample rows too close to the cosine singularity at the origin.
    for i in range(n):
        while np.linalg.norm(x[i]) < 0.1:
            x[i] = rng.uniform(-1.0, 1.0, d)
    labels = rng.integers(0, m, n)
    centers = L.init_centers(m, d, rng)
    cfg = L.LossWeights()

    arrays = {"x": x, "centers": centers.c}
    analytic = {
        "x": L.embedding_grad_x(x, labels, centers, cfg),
        "centers": L.center_grads(x, labels, centers, cfg),
    }

    def value():
        return L.embedding_loss(x, labels, centers, cfg)

    coords = _spread_coords(rng, arrays, n_coords)
    return compare_coordinates("losses", value, arrays, analytic, coords, h, tol, atol)


def _randomize(params_iter, rng):
    for name, p in params_iter:
        if "scale" in name:
            p.data = rng.uniform(0.6, 1.4, p.shape)
        elif "alpha" in name:
            p.data = np.asarray(rng.uniform(-0.6, 0.6))
        else:
            p.data = rng.uniform(-0.6, 0.6, p.shape)


def _attention_entries(p):
    for k, subset in enumerate(p.subsets):
        yield f"subset{k}.w_mid", subset.w_mid
        yield f"subset{k}.w_spatial_mid", subset.w_spatial_mid
        yield f"subset{k}.w_saliency", subset.w_saliency
        yield f"subset{k}.w_topology", subset.w_topology
        yield f"subset{k}.w_transform", subset.w_transform
        yield f"alpha{k}", p.alpha[k]


def _check_attention(rng, n_coords, h, tol, atol):
    g = build_graph(4, [(0, 1), (1, 2), (1, 3)], center=1)
    p = init_graph_block(3, 4, g, 2, "tanh", rng)
    _randomize(_attention_entries(p), rng)
    x = Tensor(rng.uniform(-1, 1, (3, 5, 4)), requires_grad=True)
    weight = Tensor(rng.uniform(-1, 1, (4, 5, 4)))

    entries = dict(_attention_entries(p))
    entries["x"] = x
    loss = T.sum_over(T.mul(graph_block(x, p), weight))
    grads = _tape_gradients(loss, entries)
    buffers = {k: t.data for k, t in entries.items()}

    def value():
        return T.sum_over(T.mul(graph_block(Tensor(x.data), p), weight)).item()

    coords = _spread_coords(rng, buffers, n_coords)
    return compare_coordinates("attention", value, buffers, grads, coords, h, tol, atol)


def _layer_entries(layer):
    for k, subset in enumerate(layer.gcb.subsets):
        yield f"subset{k}.w_mid", subset.w_mid
        yield f"subset{k}.w_spatial_mid", subset.w_spatial_mid
        yield f"subset{k}.w_saliency", subset.w_saliency
        yield f"subset{k}.w_topology", subset.w_topology
        yield f"subset{k}.w_transform", subset.w_transform
        yield f"alpha{k}", layer.gcb.alpha[k]
    yield "gcb_scale", layer.gcb_scale
    for k, w in enumerate(layer.tcb.branches):
        yield f"tcb_branch{k}", w
    yield "tcb_scale", layer.tcb_scale
    if layer.residual is not None:
        yield "residual", layer.residual


def _check_layer(rng, n_coords, h, tol, atol):
    from skelgcn.network import LayerParams, TemporalBlockParams

    g = build_graph(4, [(0, 1), (1, 2), (1, 3)], center=1)
    gcb = init_graph_block(2, 4, g, 2, "tanh", rng)
    layer = LayerParams(
        gcb=gcb,
        gcb_scale=Tensor(np.ones((4, 1, 1)), requires_grad=True),
        tcb=TemporalBlockParams(
            branches=[
                Tensor(rng.uniform(-0.5, 0.5, (2, 4, 3)), requires_grad=True),
                Tensor(rng.uniform(-0.5, 0.5, (2, 4, 5)), requires_grad=True),
            ],
            stride=2,
        ),
        tcb_scale=Tensor(np.ones((4, 1, 1)), requires_grad=True),
        residual=Tensor(rng.uniform(-0.5, 0.5, (4, 2, 1)), requires_grad=True),
        stride=2,
    )
    _randomize(_layer_entries(layer), rng)
    x = Tensor(rng.uniform(-1, 1, (2, 6, 4)), requires_grad=True)
    weight = Tensor(rng.uniform(-1, 1, (4, 3, 4)))

    entries = dict(_layer_entries(layer))
    entries["x"] = x
    loss = T.sum_over(T.mul(layer_forward(x, layer), weight))
    grads = _tape_gradients(loss, entries)
    buffers = {k: t.data for k, t in entries.items()}

    def value():
        return T.sum_over(T.mul(layer_forward(Tensor(x.data), layer), weight)).item()

    coords = _spread_coords(rng, buffers, n_coords)
    return compare_coordinates("layer", value, buffers, grads, coords, h, tol, atol)


def tiny_model_config() -> ModelConfig:
    return ModelConfig(
        num_classes=3,
        num_joints=9,
        num_frames=16,
        channel_schedule=(8, 8, 16),
        c_mid_divisor=8,
        embed_dim=12,
    )


def _check_model(rng, n_coords, h, tol, atol):
    cfg = tiny_model_config()
    graph = toy_skeleton()
    params = init_model(cfg, graph, rng)
    _randomize(named_parameters(params), rng)
    batch = rng.uniform(-1, 1, (2, 3, cfg.num_frames, cfg.num_joints))
    labels = rng.integers(0, cfg.num_classes, 2)
    centers = L.init_centers(cfg.num_classes, cfg.embed_dim, rng)
    loss_cfg = L.LossWeights()

    def forward_loss():
        emb, logits = model_forward(Tensor(batch), params, cfg)
        return L.total_loss(logits, emb, labels, centers, loss_cfg)

    zero_gradients(params)
    loss = forward_loss()
    entries = dict(named_parameters(params))
    grads = _tape_gradients(loss, entries)
    buffers = {k: t.data for k, t in entries.items()}

    def value():
        return forward_loss().item()

    coords = _spread_coords(rng, buffers, n_coords)
    return compare_coordinates("model", value, buffers, grads, coords, h, tol, atol)


_TARGET_FNS = {
    "tensor-ops": (_check_tensor_ops, DEFAULT_TOL, DEFAULT_ATOL),
    "losses": (_check_losses, DEFAULT_TOL, DEFAULT_ATOL),
    "attention": (_check_attention, DEFAULT_TOL, DEEP_ATOL),
    "layer": (_check_layer, DEEP_TOL, DEEP_ATOL),
    "model": (_check_model, DEEP_TOL, DEEP_ATOL),
}


def check_module(
    target: str,
    trials: int = 4,
    seed: int = 0,
    h: float = DEFAULT_H,
    tol: float | None = None,
    atol: float | None = None,
) -> list:
    """Run the finite-difference oracle against one target's gradients.

    At least :data:`MIN_COORDS` coordinates are sampled across the trials.
    Deterministic for a given seed.  Tolerance defaults to 1e-6 for
    closed-form / shallow targets and 1e-4 for the deep compositions
    (layer, model), where roundoff accumulates.
    """
    if target not in _TARGET_FNS:
        raise ValueError(f"unknown gradcheck target {target!r}; expected {CHECK_TARGETS}")
    fn, default_tol, default_atol = _TARGET_FNS[target]
    tol = default_tol if tol is None else tol
    atol = default_atol if atol is None else atol
    per_trial = max(1, -(-max(MIN_COORDS, trials) // trials))
    rng = np.random.default_rng(seed)
    reports = []
    for _ in range(trials):
        reports += fn(rng, per_trial, h, tol, atol)
    return reports


def reports_to_csv(reports, path) -> None:
    names = [f.name for f in fields(GradCheckReport)]
    with open(path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(names)
        for r in reports:
            writer.writerow([getattr(r, n) for n in names])


def format_report_table(reports, max_rows: int | None = None) -> str:
    """Human-readable summary; failures always listed, passes elided."""
    lines = [
        f"{'target':<24} {'coordinate':<28} {'analytic':>13} {'numeric':>13} {'rel_err':>10} pass"
    ]
    shown = 0
    for r in reports:
        if r.passed and max_rows is not None and shown >= max_rows:
            continue
        lines.append(
            f"{r.target:<24} {r.coordinate:<28} {r.analytic:>13.6e} "
            f"{r.numeric:>13.6e} {r.rel_err:>10.2e} {'ok' if r.passed else 'FAIL'}"
        )
        shown += 1
    failed = sum(not r.passed for r in reports)
    lines.append(f"{len(reports)} coordinates checked, {failed} failed")
    return "\n".join(lines)
