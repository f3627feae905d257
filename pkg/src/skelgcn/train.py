"""Optimizer, training loop, evaluation metrics, and attention export.

Training follows the classical recipe: seeded shuffle, mini-batches, a
forward pass on the tape, the combined classification + embedding loss,
one backward pass, a closed-form center update, and a Nesterov SGD step
with stepwise learning-rate decay.  Everything is driven by a single seed,
so a run's metrics log is reproducible byte for byte.

The per-epoch metrics CSV line is
``epoch,loss_softmax,loss_intra,loss_inter,loss_norm,loss_total,intra_cos,
inter_cos,mean_beta``.  Loss components are per-sample means against the
learned centers (zero when the embedding loss is disabled); the three
trailing diagnostics are computed against the epoch's per-class mean
embeddings in both modes, so compactness is comparable across runs.
"""

import copy
import csv
import os
from dataclasses import dataclass, field

import numpy as np

from skelgcn import losses as L
from skelgcn.graph import SkeletonGraph, load_graph_file, toy_skeleton
from skelgcn.losses import METRICS_HEADER
from skelgcn.network import (
    ModelConfig,
    init_model,
    layer_forward,
    load_checkpoint,
    model_forward,
    named_parameters,
    save_checkpoint,
    zero_gradients,
)
from skelgcn.synth import SynthDataset, inject_noise, load_dataset
from skelgcn.tensor import (
    Tensor,
    activation,
    conv1x1,
    mean_over_axis,
    mul,
    save_tensor,
)

__all__ = [
    "NumericError",
    "SgdState",
    "RunConfig",
    "TrainResult",
    "EvalMetrics",
    "sgd_step",
    "lr_at_epoch",
    "train",
    "train_on",
    "evaluate",
    "evaluate_samples",
    "export_attention",
]


class NumericError(RuntimeError):
    """A non-finite loss or a failed numeric verification."""


@dataclass
class SgdState:
    """SGD with (optionally Nesterov) momentum and per-parameter velocity."""

    lr: float
    momentum: float = 0.9
    nesterov: bool = True
    velocities: dict = field(default_factory=dict)


def sgd_step(named_params, state: SgdState) -> None:
    """v <- mu v + g, then p <- p - lr * (g + mu v) (Nesterov) or p - lr v."""
    for name, p in named_params:
        if p.grad is None:
            continue
        g = p.grad
        v = state.velocities.get(name)
        if v is None:
            v = np.zeros_like(p.data)
        if v.shape != g.shape:
            raise ValueError(
                f"{name}: velocity shape {v.shape} does not match gradient {g.shape}"
            )
        v = state.momentum * v + g
        state.velocities[name] = v
        step = g + state.momentum * v if state.nesterov else v
        p.data = p.data - state.lr * step


def lr_at_epoch(base_lr: float, epoch: int, milestones, decay: float) -> float:
    """Stepwise decay: multiply by ``decay`` at every passed milestone."""
    passed = sum(1 for m in milestones if epoch >= m)
    return base_lr * decay**passed


@dataclass
class RunConfig:
    """Everything one training run needs.

    ``milestone_fractions`` positions the learning-rate drops relative to
    ``epochs``.  ``ce_reduction`` defaults to the per-sample mean so the
    step size is batch-size independent; pass ``"sum"`` for the summed
    form.  ``embed_loss=False`` trains with the classification loss only.
    """

    model: ModelConfig
    epochs: int = 20
    batch_size: int = 48
    lr: float = 0.1
    momentum: float = 0.9
    nesterov: bool = True
    milestone_fractions: tuple = (0.6, 0.9)
    lr_decay: float = 0.1
    seed: int = 0
    embed_loss: bool = True
    lambda1: float | None = None
    lambda2: float | None = None
    literal_inter_sign: bool = False
    center_lr: float = 0.5
    center_eps: float = 0.0
    ce_reduction: str = "mean"
    noise_fraction: float = 0.0
    noise_mode: str = "joint"
    data_dir: str | None = None
    graph_file: str | None = None
    out_dir: str | None = None

    def loss_weights(self) -> L.LossWeights:
        return L.LossWeights(
            lambda1=self.lambda1,
            lambda2=self.lambda2,
            enabled=self.embed_loss,
            literal_inter_sign=self.literal_inter_sign,
        )

    def milestones(self) -> tuple:
        return tuple(
            int(np.ceil(f * self.epochs)) for f in self.milestone_fractions
        )


@dataclass
class TrainResult:
    metrics: list  # one dict per epoch, keys as in METRICS_HEADER + test_accuracy
    best_epoch: int
    best_accuracy: float
    params: object  # ModelParams of the best epoch
    centers: L.ClassCenters
    checkpoint_dir: str | None = None
    metrics_path: str | None = None

    def metrics_lines(self) -> list:
        lines = [METRICS_HEADER]
        for row in self.metrics:
            lines.append(
                ",".join(repr(row[k]) if isinstance(row[k], float) else str(row[k])
                         for k in METRICS_HEADER.split(","))
            )
        return lines


@dataclass
class EvalMetrics:
    accuracy: float
    per_class: np.ndarray  # (M,) accuracy per class
    confusion: np.ndarray  # (M, M), rows = true class, cols = predicted
    intra_cos: float  # mean cosine to own class-mean embedding
    inter_center_cos: float  # mean pairwise cosine between class means
    count: int


def _batch_array(samples) -> np.ndarray:
    return np.stack([s.x for s in samples])


def _class_mean_stats(embeddings: np.ndarray, labels: np.ndarray, m: int):
    means = np.zeros((m, embeddings.shape[1]))
    for j in range(m):
        rows = embeddings[labels == j]
        if len(rows):
            means[j] = rows.mean(axis=0)
    norms = np.linalg.norm(means, axis=1)
    ok = norms > 1e-12
    unit = np.zeros_like(means)
    unit[ok] = means[ok] / norms[ok][:, None]
    xn = np.linalg.norm(embeddings, axis=1)
    xn = np.where(xn > 1e-12, xn, 1.0)
    intra = float(np.mean((embeddings / xn[:, None] * unit[labels]).sum(axis=1)))
    pairs = [
        float(unit[a] @ unit[b])
        for a in range(m)
        for b in range(a + 1, m)
        if ok[a] and ok[b]
    ]
    inter = float(np.mean(pairs)) if pairs else float("nan")
    beta = float(np.mean(xn / np.where(norms[labels] > 1e-12, norms[labels], 1.0)))
    return intra, inter, beta


def train_on(dataset: SynthDataset, cfg: RunConfig, graph: SkeletonGraph | None = None
             ) -> TrainResult:
    """Train on an in-memory dataset; see :func:`train` for the file front end."""
    graph = graph if graph is not None else toy_skeleton()
    if cfg.noise_fraction > 0.0:
        dataset = inject_noise(
            dataset, cfg.noise_fraction, seed=cfg.seed, mode=cfg.noise_mode
        )
    train_samples = dataset.subset("train")
    test_samples = dataset.subset("test")
    if not train_samples:
        raise ValueError("dataset has no training samples")

    seeds = np.random.SeedSequence(cfg.seed).spawn(3)
    init_rng = np.random.default_rng(seeds[0])
    center_rng = np.random.default_rng(seeds[1])
    shuffle_rng = np.random.default_rng(seeds[2])

    model_cfg = cfg.model
    params = init_model(model_cfg, graph, init_rng)
    centers = L.init_centers(
        model_cfg.num_classes, model_cfg.embed_dim, center_rng,
        eps=cfg.center_eps, center_lr=cfg.center_lr,
    )
    loss_cfg = cfg.loss_weights()
    state = SgdState(lr=cfg.lr, momentum=cfg.momentum, nesterov=cfg.nesterov)
    milestones = cfg.milestones()

    metrics = []
    best = (-1.0, -1, None, None)  # accuracy, epoch, params copy, centers copy
    if cfg.epochs == 0:
        result = evaluate_samples(params, model_cfg, test_samples or train_samples)
        best = (result.accuracy, 0, copy.deepcopy(params), copy.deepcopy(centers))

    order = np.arange(len(train_samples))
    for epoch in range(cfg.epochs):
        state.lr = lr_at_epoch(cfg.lr, epoch, milestones, cfg.lr_decay)
        shuffle_rng.shuffle(order)
        sums = {k: 0.0 for k in ("ce", "intra", "inter", "ratio", "total")}
        epoch_embeddings = []
        epoch_labels = []
        for start in range(0, len(order), cfg.batch_size):
            batch_ids = order[start : start + cfg.batch_size]
            batch = [train_samples[i] for i in batch_ids]
            x = _batch_array(batch)
            labels = np.array([s.label for s in batch])
            n = len(batch)

            zero_gradients(params)
            emb, logits = model_forward(Tensor(x), params, model_cfg)
            try:
                loss = L.total_loss(logits, emb, labels, centers, loss_cfg, cfg.ce_reduction)
                value = loss.item()
            except ValueError as err:  # non-finite activations surface here
                raise NumericError(
                    f"numeric failure at epoch {epoch}, batch starting at "
                    f"sample {start} (id {batch[0].sample_id}): {err}"
                ) from err
            if not np.isfinite(value):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, batch starting at "
                    f"sample {start} (id {batch[0].sample_id})"
                )
            loss.backward()
            if loss_cfg.enabled:
                L.update_centers(emb.data, labels, centers, loss_cfg)
            sgd_step(named_parameters(params), state)

            ce = L.softmax_cross_entropy(logits.data, labels, cfg.ce_reduction)
            ce_mean = ce / n if cfg.ce_reduction == "sum" else ce
            sums["ce"] += ce_mean * n
            if loss_cfg.enabled:
                sums["intra"] += L.intra_angular_loss(emb.data, labels, centers) * n
                sums["inter"] += L.inter_angular_loss(emb.data, labels, centers) * n
                sums["ratio"] += L.norm_ratio_loss(emb.data, labels, centers) * n
            sums["total"] += value if cfg.ce_reduction == "sum" else value * n
            epoch_embeddings.append(emb.data)
            epoch_labels.append(labels)

        total = len(order)
        embeddings = np.concatenate(epoch_embeddings)
        labels_all = np.concatenate(epoch_labels)
        intra_cos, inter_cos, mean_beta = _class_mean_stats(
            embeddings, labels_all, model_cfg.num_classes
        )
        row = {
            "epoch": epoch,
            "loss_softmax": sums["ce"] / total,
            "loss_intra": sums["intra"] / total,
            "loss_inter": sums["inter"] / total,
            "loss_norm": sums["ratio"] / total,
            "loss_total": sums["total"] / total,
            "intra_cos": intra_cos,
            "inter_cos": inter_cos,
            "mean_beta": mean_beta,
        }

        eval_on = test_samples or train_samples
        result = evaluate_samples(params, model_cfg, eval_on)
        row["test_accuracy"] = result.accuracy
        metrics.append(row)
        if result.accuracy > best[0]:
            best = (result.accuracy, epoch, copy.deepcopy(params), copy.deepcopy(centers))

    best_acc, best_epoch, best_params, best_centers = best
    out = TrainResult(
        metrics=metrics,
        best_epoch=best_epoch,
        best_accuracy=best_acc,
        params=best_params if best_params is not None else params,
        centers=best_centers if best_centers is not None else centers,
    )

    if cfg.out_dir is not None:
        os.makedirs(cfg.out_dir, exist_ok=True)
        ckpt = os.path.join(cfg.out_dir, "checkpoint")
        save_checkpoint(ckpt, out.params, model_cfg, centers=out.centers.c)
        metrics_path = os.path.join(cfg.out_dir, "metrics.csv")
        with open(metrics_path, "w") as f:
            f.write("\n".join(out.metrics_lines()) + "\n")
        out.checkpoint_dir = ckpt
        out.metrics_path = metrics_path
    return out


def train(cfg: RunConfig) -> TrainResult:
    """Load the dataset (and graph) from disk per the config, then train."""
    if cfg.data_dir is None:
        raise ValueError("RunConfig.data_dir is required")
    if not os.path.isdir(cfg.data_dir):
        raise ValueError(f"dataset directory {cfg.data_dir!r} does not exist")
    if cfg.graph_file is not None and not os.path.exists(cfg.graph_file):
        raise ValueError(f"graph file {cfg.graph_file!r} does not exist")
    dataset = load_dataset(cfg.data_dir)
    graph = load_graph_file(cfg.graph_file) if cfg.graph_file else toy_skeleton()
    return train_on(dataset, cfg, graph)


def evaluate_samples(params, model_cfg: ModelConfig, samples, batch_size: int = 64
                     ) -> EvalMetrics:
    """Accuracy, per-class accuracy, confusion matrix, and compactness.

    The compactness statistics are measured against per-class *mean
    embeddings* of the evaluated samples, which is well defined for both
    embedding-loss and softmax-only checkpoints.
    """
    if not samples:
        raise ValueError("nothing to evaluate")
    m = model_cfg.num_classes
    labels = np.array([s.label for s in samples])
    if labels.max() >= m:
        raise ValueError(
            f"dataset has class {labels.max()} but the model knows {m} classes"
        )
    predictions = np.zeros(len(samples), dtype=int)
    embeddings = np.zeros((len(samples), model_cfg.embed_dim))
    for start in range(0, len(samples), batch_size):
        chunk = samples[start : start + batch_size]
        emb, logits = model_forward(Tensor(_batch_array(chunk)), params, model_cfg)
        predictions[start : start + len(chunk)] = np.argmax(logits.data, axis=1)
        embeddings[start : start + len(chunk)] = emb.data

    confusion = np.zeros((m, m), dtype=int)
    np.add.at(confusion, (labels, predictions), 1)
    with np.errstate(invalid="ignore"):
        per_class = np.where(
            confusion.sum(axis=1) > 0,
            np.diag(confusion) / np.maximum(confusion.sum(axis=1), 1),
            np.nan,
        )
    intra, inter, _ = _class_mean_stats(embeddings, labels, m)
    return EvalMetrics(
        accuracy=float((predictions == labels).mean()),
        per_class=per_class,
        confusion=confusion,
        intra_cos=intra,
        inter_center_cos=inter,
        count=len(samples),
    )


def evaluate(checkpoint_dir, samples) -> EvalMetrics:
    params, cfg, _ = load_checkpoint(checkpoint_dir)
    return evaluate_samples(params, cfg, samples)


def export_attention(params, model_cfg: ModelConfig, sample, layer_index: int,
                     out_prefix) -> dict:
    """Write the chosen layer's attention artifacts for one sample.

    Two maps are produced, each averaged over channels and over adjacency
    subsets: the frame-joint saliency map and the transformed-feature map
    feeding it.  Each is written as a CSV (rows = frames, cols = joints)
    and as a binary tensor record; returns the arrays and file paths.
    """
    if not 0 <= layer_index < len(params.layers):
        raise ValueError(
            f"layer index {layer_index} outside 0..{len(params.layers) - 1}"
        )
    x = Tensor(sample.x if hasattr(sample, "x") else np.asarray(sample))
    for layer in params.layers[:layer_index]:
        x = layer_forward(x, layer)

    target = params.layers[layer_index]
    sal_maps = []
    trans_maps = []
    for subset in target.gcb.subsets:
        mid = conv1x1(x, subset.w_mid)
        frame_pool = mean_over_axis(mid, -1)
        joint_pool = mean_over_axis(mid, -2)
        sal = conv1x1(activation(mul(frame_pool, joint_pool), subset.act), subset.w_saliency)
        sal_maps.append(sal.data.mean(axis=0))
        trans_maps.append(conv1x1(x, subset.w_transform).data.mean(axis=0))
    saliency_map = np.mean(sal_maps, axis=0)  # (T_layer, V)
    transform_map = np.mean(trans_maps, axis=0)

    out_prefix = str(out_prefix)
    paths = {}
    for name, arr in (("saliency", saliency_map), ("transform", transform_map)):
        csv_path = f"{out_prefix}_{name}.csv"
        with open(csv_path, "w", newline="") as f:
            writer = csv.writer(f)
            for row in arr:
                writer.writerow([repr(float(v)) for v in row])
        bin_path = f"{out_prefix}_{name}.bin"
        save_tensor(bin_path, arr)
        paths[name] = (csv_path, bin_path)
    return {"saliency": saliency_map, "transform": transform_map, "paths": paths}
