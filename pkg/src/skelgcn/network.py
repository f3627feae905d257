"""The layered skeleton-sequence classifier.

Each layer is a graph block (spatial mixing), a multi-branch temporal block
(frame mixing at odd kernel sizes 3, 5, ..., 2m+1), and a residual path,
followed by a relu.  Per-channel affine scales sit where normalization
layers usually would, so checkpoints keep a placeholder slot; they start at
1 and are learnable.  The stack ends with global average pooling, a linear
embedding head, and a linear classifier.

A :class:`ModelConfig` pins the channel schedule, strides, attention
settings, and head widths; configs round-trip through a flat ``key=value``
text format, and full parameter sets round-trip through a manifest plus a
stream of binary tensor records (checkpoints).
"""

import os
from dataclasses import dataclass, field, fields

import numpy as np

from skelgcn.attention import RELU_GAIN, GraphBlockParams, graph_block, init_graph_block
from skelgcn.graph import SkeletonGraph, build_graph, save_graph_file
from skelgcn.tensor import (
    Tensor,
    activation,
    add,
    concat,
    matmul,
    mean_over_axis,
    mul,
    read_tensor,
    reshape,
    temporal_conv,
    write_tensor,
)

__all__ = [
    "TemporalBlockParams",
    "LayerParams",
    "ModelConfig",
    "ModelParams",
    "default_strides",
    "init_model",
    "temporal_block",
    "layer_forward",
    "model_forward",
    "named_parameters",
    "zero_gradients",
    "save_checkpoint",
    "load_checkpoint",
    "config_to_text",
    "config_from_text",
]


@dataclass
class TemporalBlockParams:
    """Parallel temporal convolutions whose outputs concatenate back to C."""

    branches: list  # Tensor (C/m, C, k) for k = 3, 5, ..., 2m+1
    stride: int = 1


@dataclass
class LayerParams:
    gcb: GraphBlockParams
    gcb_scale: Tensor  # (C_out, 1, 1) affine placeholder after spatial mixing
    tcb: TemporalBlockParams
    tcb_scale: Tensor  # (C_out, 1, 1) affine placeholder after temporal mixing
    residual: Tensor | None  # (C_out, C_in, 1) projection weights, or None
    stride: int = 1


@dataclass
class ModelConfig:
    """Architecture hyperparameters.

    ``strides`` defaults to stride 2 wherever the channel count grows
    (None selects that rule); ``c_mid_divisor == 0`` selects the fixed
    mid-width setting.
    """

    num_classes: int
    num_joints: int
    num_frames: int
    in_channels: int = 3
    channel_schedule: tuple = (64, 64, 64, 64, 128, 128, 128, 256, 256, 256)
    strides: tuple | None = None
    c_mid_divisor: int = 8
    attention_act: str = "tanh"
    temporal_kernels: int = 2  # m: kernel sizes 3, 5, ..., 2m+1
    num_subsets: int = 3
    embed_dim: int = 256

    def __post_init__(self):
        self.channel_schedule = tuple(int(c) for c in self.channel_schedule)
        if self.strides is None:
            self.strides = default_strides(self.channel_schedule)
        self.strides = tuple(int(s) for s in self.strides)
        if len(self.strides) != len(self.channel_schedule):
            raise ValueError(
                f"{len(self.strides)} strides for {len(self.channel_schedule)} layers"
            )
        m = self.temporal_kernels
        if m < 1:
            raise ValueError(f"temporal kernel count must be >= 1, got {m}")
        for c in self.channel_schedule:
            if c % m:
                raise ValueError(f"channel width {c} not divisible by {m} branches")
        total = int(np.prod(self.strides))
        if self.num_frames % total:
            raise ValueError(
                f"{self.num_frames} frames not divisible by total stride {total}"
            )


def default_strides(channel_schedule) -> tuple:
    """Stride 2 at every channel-increase layer, 1 elsewhere."""
    strides = [1]
    for prev, cur in zip(channel_schedule, channel_schedule[1:]):
        strides.append(2 if cur > prev else 1)
    return tuple(strides)


@dataclass
class ModelParams:
    layers: list  # LayerParams
    fc_w: Tensor  # (C_last, D)
    fc_b: Tensor  # (D,)
    cls_w: Tensor  # (D, M)
    cls_b: Tensor  # (M,)
    graph: SkeletonGraph = field(repr=False)


def _uniform(rng, shape, fan_in, gain=1.0):
    # Trunk convolutions and the embedding head feed relus; see the gain
    # discussion in skelgcn.attention.
    bound = gain * np.sqrt(1.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


def init_model(cfg: ModelConfig, graph: SkeletonGraph, rng: np.random.Generator) -> ModelParams:
    if graph.num_joints != cfg.num_joints:
        raise ValueError(
            f"graph has {graph.num_joints} joints, config expects {cfg.num_joints}"
        )
    if graph.num_subsets != cfg.num_subsets:
        raise ValueError(
            f"graph has {graph.num_subsets} subsets, config expects {cfg.num_subsets}"
        )
    layers = []
    c_prev = cfg.in_channels
    for c_out, stride in zip(cfg.channel_schedule, cfg.strides):
        gcb = init_graph_block(
            c_prev, c_out, graph, cfg.c_mid_divisor, cfg.attention_act, rng
        )
        m = cfg.temporal_kernels
        branches = [
            _uniform(rng, (c_out // m, c_out, 2 * i + 3), c_out * (2 * i + 3), RELU_GAIN)
            for i in range(m)
        ]
        residual = None
        if c_prev != c_out or stride != 1:
            residual = _uniform(rng, (c_out, c_prev, 1), c_prev, RELU_GAIN)
        layers.append(
            LayerParams(
                gcb=gcb,
                gcb_scale=Tensor(np.ones((c_out, 1, 1)), requires_grad=True),
                tcb=TemporalBlockParams(branches=branches, stride=stride),
                tcb_scale=Tensor(np.ones((c_out, 1, 1)), requires_grad=True),
                residual=residual,
                stride=stride,
            )
        )
        c_prev = c_out
    c_last = cfg.channel_schedule[-1]
    return ModelParams(
        layers=layers,
        fc_w=_uniform(rng, (c_last, cfg.embed_dim), c_last, RELU_GAIN),
        fc_b=Tensor(np.zeros(cfg.embed_dim), requires_grad=True),
        cls_w=_uniform(rng, (cfg.embed_dim, cfg.num_classes), cfg.embed_dim),
        cls_b=Tensor(np.zeros(cfg.num_classes), requires_grad=True),
        graph=graph,
    )


def temporal_block(x, p: TemporalBlockParams) -> Tensor:
    """Parallel odd-kernel temporal convolutions, concatenated over channels."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    c = x.shape[-3]
    m = len(p.branches)
    if c % m:
        raise ValueError(f"{c} channels not divisible across {m} branches")
    outs = [temporal_conv(x, w, p.stride) for w in p.branches]
    return outs[0] if m == 1 else concat(outs, axis=-3)


def layer_forward(x, layer: LayerParams) -> Tensor:
    """relu(scale * tcb(scale * gcb(x)) + residual(x))."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    h = mul(graph_block(x, layer.gcb), layer.gcb_scale)
    h = mul(temporal_block(h, layer.tcb), layer.tcb_scale)
    if layer.residual is None:
        res = x
    else:
        res = temporal_conv(x, layer.residual, layer.stride)
    return activation(add(h, res), "relu")


def model_forward(x, params: ModelParams, cfg: ModelConfig):
    """Embeddings and logits for one sample ``(C, T, V)`` or a batch.

    Returns ``(embedding, logits)`` shaped ``(D,)``/``(M,)`` for a single
    sample and ``(N, D)``/``(N, M)`` for a batch ``(N, C, T, V)``.
    """
    x = x if isinstance(x, Tensor) else Tensor(x)
    single = x.ndim == 3
    if single:
        x = reshape(x, (1,) + x.shape)
    if x.shape[-3:] != (cfg.in_channels, cfg.num_frames, cfg.num_joints):
        raise ValueError(
            f"input shape {x.shape[-3:]} does not match configured "
            f"({cfg.in_channels}, {cfg.num_frames}, {cfg.num_joints})"
        )
    h = x
    for layer in params.layers:
        h = layer_forward(h, layer)
    pooled = mean_over_axis(mean_over_axis(h, -1), -2)  # (N, C_last, 1, 1)
    pooled = reshape(pooled, pooled.shape[:-2])
    embedding = add(matmul(pooled, params.fc_w), params.fc_b)
    logits = add(matmul(embedding, params.cls_w), params.cls_b)
    if single:
        embedding = reshape(embedding, embedding.shape[1:])
        logits = reshape(logits, logits.shape[1:])
    return embedding, logits


def named_parameters(params: ModelParams):
    """Deterministically ordered (name, Tensor) pairs for every parameter."""
    for i, layer in enumerate(params.layers):
        for k, subset in enumerate(layer.gcb.subsets):
            prefix = f"layer{i}.subset{k}"
            yield f"{prefix}.w_mid", subset.w_mid
            yield f"{prefix}.w_spatial_mid", subset.w_spatial_mid
            yield f"{prefix}.w_saliency", subset.w_saliency
            yield f"{prefix}.w_topology", subset.w_topology
            yield f"{prefix}.w_transform", subset.w_transform
        for k, alpha in enumerate(layer.gcb.alpha):
            yield f"layer{i}.alpha{k}", alpha
        yield f"layer{i}.gcb_scale", layer.gcb_scale
        for k, w in enumerate(layer.tcb.branches):
            yield f"layer{i}.tcb_branch{k}", w
        yield f"layer{i}.tcb_scale", layer.tcb_scale
        if layer.residual is not None:
            yield f"layer{i}.residual", layer.residual
    yield "fc.w", params.fc_w
    yield "fc.b", params.fc_b
    yield "classifier.w", params.cls_w
    yield "classifier.b", params.cls_b


def zero_gradients(params: ModelParams) -> None:
    for _, p in named_parameters(params):
        p.zero_grad()


# ---------------------------------------------------------------------------
# config and checkpoint serialization
# ---------------------------------------------------------------------------

_LIST_FIELDS = {"channel_schedule", "strides"}


def config_to_text(cfg: ModelConfig) -> str:
    lines = []
    for f in fields(cfg):
        value = getattr(cfg, f.name)
        if f.name in _LIST_FIELDS:
            value = ",".join(str(v) for v in value)
        lines.append(f"{f.name}={value}")
    return "\n".join(lines) + "\n"


def config_from_text(text: str) -> ModelConfig:
    kv = {}
    for raw in text.splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        kv[key.strip()] = value.strip()
    kwargs = {}
    for f in fields(ModelConfig):
        if f.name not in kv:
            continue
        raw = kv.pop(f.name)
        if f.name in _LIST_FIELDS:
            kwargs[f.name] = tuple(int(v) for v in raw.split(",") if v)
        elif f.name == "attention_act":
            kwargs[f.name] = raw
        else:
            kwargs[f.name] = int(raw)
    if kv:
        raise ValueError(f"unknown config keys: {sorted(kv)}")
    return ModelConfig(**kwargs)


def save_checkpoint(directory, params: ModelParams, cfg: ModelConfig, centers=None) -> None:
    """Write manifest + concatenated tensor records + config (+ graph).

    ``centers`` (an ``(M, D)`` array) is appended under the name
    ``centers`` when given.
    """
    os.makedirs(directory, exist_ok=True)
    entries = list(named_parameters(params))
    if centers is not None:
        entries.append(("centers", Tensor(np.asarray(centers))))
    with open(os.path.join(directory, "manifest.txt"), "w") as f:
        for name, p in entries:
            dims = " ".join(str(d) for d in p.shape)
            f.write(f"{name} {dims}\n".rstrip() + "\n")
    with open(os.path.join(directory, "params.bin"), "wb") as f:
        for _, p in entries:
            write_tensor(f, p)
    with open(os.path.join(directory, "config.txt"), "w") as f:
        f.write(config_to_text(cfg))
    save_graph_file(os.path.join(directory, "graph.txt"), params.graph)


def load_checkpoint(directory):
    """Rebuild (params, cfg, centers) from a checkpoint directory."""
    from skelgcn.graph import load_graph_file

    with open(os.path.join(directory, "config.txt")) as f:
        cfg = config_from_text(f.read())
    graph = load_graph_file(os.path.join(directory, "graph.txt"))
    params = init_model(cfg, graph, np.random.default_rng(0))

    names = []
    with open(os.path.join(directory, "manifest.txt")) as f:
        for line in f:
            if line.strip():
                names.append(line.split()[0])
    loaded = {}
    with open(os.path.join(directory, "params.bin"), "rb") as f:
        for name in names:
            loaded[name] = read_tensor(f)

    centers = loaded.pop("centers", None)
    own = dict(named_parameters(params))
    if set(own) != set(loaded):
        missing = sorted(set(own) ^ set(loaded))
        raise ValueError(f"checkpoint/config parameter mismatch: {missing}")
    for name, p in own.items():
        if loaded[name].shape != p.data.shape:
            raise ValueError(
                f"parameter {name}: checkpoint shape {loaded[name].shape} "
                f"!= model shape {p.data.shape}"
            )
        p.data = loaded[name]
    return params, cfg, centers
