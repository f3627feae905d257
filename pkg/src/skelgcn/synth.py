"""Synthetic fine-grained skeleton sequences and dataset files.

Every class animates the *same* limb joints of a shared base skeleton with
per-joint sinusoids; classes differ only in the fine motion parameters
(frequency, amplitude, phase pattern), which mimics fine-grained
recognition where inter-class appearance is nearly identical.  Each sample
additionally gets a random global phase, so absolute coordinates carry no
class signal; a classifier has to look at the dynamics.

A dataset lives on disk as a directory: a text manifest (spec echo, sample
ids/labels, train/test split) plus one binary tensor record per sample.
The split is derived from a stable hash of the sample id, so it never
changes across runs or machines.
"""

import hashlib
import math
import os
from dataclasses import dataclass, field

import numpy as np

from skelgcn.graph import SkeletonGraph, toy_skeleton
from skelgcn.tensor import FormatError, load_tensor, save_tensor

__all__ = [
    "SkeletonSample",
    "ClassMotion",
    "SynthSpec",
    "SynthDataset",
    "default_spec",
    "generate",
    "inject_noise",
    "split_of_id",
    "save_dataset",
    "load_dataset",
    "load_sample_csv",
    "PARAM_DISTANCE_FLOOR",
]

PARAM_DISTANCE_FLOOR = 0.5

# Rest pose for the 9-joint toy skeleton (x right, y forward, z up), kept
# zero-centered and at the same scale as the motion amplitudes: a static
# offset much larger than the motion starves rectifying networks of
# dynamics after temporal pooling.  Columns follow graph.TOY_JOINT_NAMES:
# head, chest, pelvis, l_elbow, l_hand, r_elbow, r_hand, l_knee, r_knee.
_TOY_BASE_POSE = 0.25 * np.array(
    [
        [0.00, 0.00, 0.00, 0.35, 0.65, -0.35, -0.65, 0.15, -0.15],
        [0.00, 0.00, 0.00, 0.00, 0.00, 0.00, 0.00, 0.00, 0.00],
        [0.53, 0.23, -0.17, 0.18, 0.13, 0.18, 0.13, -0.62, -0.62],
    ]
)

_TOY_MOVING_JOINTS = (3, 4, 5, 6, 7, 8)  # elbows, hands, knees

# Classes must differ enough in their amplitude profile to be told apart by
# oscillation-energy statistics; phases alone are invisible to them.
AMP_DISTANCE_FLOOR = 1.0


@dataclass
class SkeletonSample:
    """One labelled sequence: coordinates (3, T, V), class label, and id."""

    x: np.ndarray
    label: int
    sample_id: str


@dataclass
class ClassMotion:
    """Per-joint sinusoid parameters for one class (length-V arrays)."""

    freq: np.ndarray  # cycles per sequence
    amp: np.ndarray
    phase: np.ndarray

    def flat(self) -> np.ndarray:
        # Phase enters through the unit circle so its distance is circular.
        return np.concatenate(
            [self.freq, self.amp, np.cos(self.phase) * self.amp, np.sin(self.phase) * self.amp]
        )


@dataclass
class SynthSpec:
    """Full recipe for a synthetic dataset.

    Classes must be pairwise distinguishable: the distance between any two
    classes' flattened motion parameters has to clear
    :data:`PARAM_DISTANCE_FLOOR`, and at least one amplitude must be
    nonzero.
    """

    num_classes: int
    motions: list  # ClassMotion per class
    base_pose: np.ndarray  # (3, V)
    move_dirs: np.ndarray  # (3, V) unit direction per joint
    samples_per_class: int = 200
    num_frames: int = 32
    jitter: float = 0.03
    seed: int = 0

    def __post_init__(self):
        self.base_pose = np.asarray(self.base_pose, dtype=np.float64)
        self.move_dirs = np.asarray(self.move_dirs, dtype=np.float64)
        if len(self.motions) != self.num_classes:
            raise ValueError(
                f"{len(self.motions)} motion sets for {self.num_classes} classes"
            )
        if all(np.all(m.amp == 0.0) for m in self.motions):
            raise ValueError("degenerate spec: every amplitude is zero")
        flats = [m.flat() for m in self.motions]
        for a in range(self.num_classes):
            for b in range(a + 1, self.num_classes):
                dist = float(np.linalg.norm(flats[a] - flats[b]))
                if dist < PARAM_DISTANCE_FLOOR:
                    raise ValueError(
                        f"classes {a} and {b} are not distinguishable: parameter "
                        f"distance {dist:.3f} < floor {PARAM_DISTANCE_FLOOR}"
                    )

    @property
    def num_joints(self) -> int:
        return self.base_pose.shape[1]


@dataclass
class SynthDataset:
    samples: list  # SkeletonSample
    spec: SynthSpec
    split: dict = field(default_factory=dict)  # sample_id -> "train" | "test"

    def subset(self, part: str):
        return [s for s in self.samples if self.split.get(s.sample_id) == part]

    @property
    def labels(self) -> np.ndarray:
        return np.array([s.label for s in self.samples])


def default_spec(
    num_classes: int = 5,
    samples_per_class: int = 200,
    num_frames: int = 32,
    jitter: float = 0.03,
    seed: int = 0,
) -> SynthSpec:
    """The stock 5-class recipe on the 9-joint toy skeleton.

    Limb joints oscillate in every class; frequencies, amplitudes, and
    phases are drawn per class until the pairwise distance floor holds.
    """
    rng = np.random.default_rng(seed)
    v = _TOY_BASE_POSE.shape[1]
    dirs = rng.normal(size=(3, v))
    dirs /= np.linalg.norm(dirs, axis=0, keepdims=True)

    motions = []
    guard = 0
    while len(motions) < num_classes:
        freq = np.zeros(v)
        amp = np.zeros(v)
        phase = np.zeros(v)
        for j in _TOY_MOVING_JOINTS:
            freq[j] = float(rng.integers(1, 4))
            amp[j] = rng.uniform(0.2, 1.4)
            phase[j] = rng.uniform(0.0, 2.0 * math.pi)
        candidate = ClassMotion(freq, amp, phase)
        if all(
            np.linalg.norm(candidate.flat() - m.flat()) >= PARAM_DISTANCE_FLOOR
            and np.linalg.norm(candidate.amp - m.amp) >= AMP_DISTANCE_FLOOR
            for m in motions
        ):
            motions.append(candidate)
        guard += 1
        if guard > 1000:
            raise RuntimeError("could not draw distinguishable classes")

    return SynthSpec(
        num_classes=num_classes,
        motions=motions,
        base_pose=_TOY_BASE_POSE.copy(),
        move_dirs=dirs,
        samples_per_class=samples_per_class,
        num_frames=num_frames,
        jitter=jitter,
        seed=seed,
    )


def split_of_id(sample_id: str, test_fraction: float = 0.2) -> str:
    """Stable hash-based split assignment (md5, not Python's salted hash)."""
    digest = hashlib.md5(sample_id.encode()).hexdigest()
    return "test" if int(digest[:8], 16) % 10_000 < test_fraction * 10_000 else "train"


def generate(spec: SynthSpec, graph: SkeletonGraph | None = None,
             test_fraction: float = 0.2) -> SynthDataset:
    """Deterministically synthesize the dataset described by ``spec``."""
    graph = graph if graph is not None else toy_skeleton()
    if graph.num_joints != spec.num_joints:
        raise ValueError(
            f"graph has {graph.num_joints} joints, spec poses {spec.num_joints}"
        )
    rng = np.random.default_rng(spec.seed)
    t_axis = np.arange(spec.num_frames) / spec.num_frames  # (T,)
    samples = []
    split = {}
    for label, motion in enumerate(spec.motions):
        for i in range(spec.samples_per_class):
            global_phase = rng.uniform(0.0, 2.0 * math.pi)
            angle = (
                2.0 * math.pi * motion.freq[None, :] * t_axis[:, None]
                + motion.phase[None, :]
                + global_phase
            )  # (T, V)
            wave = motion.amp[None, :] * np.sin(angle)  # (T, V)
            x = spec.base_pose[:, None, :] + spec.move_dirs[:, None, :] * wave[None, :, :]
            x = x + spec.jitter * rng.standard_normal(x.shape)
            sample_id = f"c{label}-{i:04d}"
            samples.append(SkeletonSample(x=x, label=label, sample_id=sample_id))
            split[sample_id] = split_of_id(sample_id, test_fraction)
    return SynthDataset(samples=samples, spec=spec, split=split)


def inject_noise(dataset: SynthDataset, fraction: float, seed: int = 0,
                 mode: str = "joint") -> SynthDataset:
    """Zero out a uniformly chosen fraction of coordinates.

    ``mode="joint"`` (default) picks (sample, frame, joint) sites and zeroes
    all three coordinates there, modelling pose-extractor dropout;
    ``mode="axis"`` picks individual scalar coordinates instead.  Labels,
    ids, split, and sample count are untouched; the input dataset is not
    modified.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValueError(f"noise fraction must lie in [0, 1], got {fraction}")
    if mode not in ("joint", "axis"):
        raise ValueError(f"unknown noise mode {mode!r}")
    arrays = [s.x.copy() for s in dataset.samples]
    if arrays and fraction > 0.0:
        n = len(arrays)
        _, t, v = arrays[0].shape
        sites = n * t * v * (3 if mode == "axis" else 1)
        count = int(round(fraction * sites))
        rng = np.random.default_rng(seed)
        chosen = rng.choice(sites, size=count, replace=False)
        if mode == "joint":
            si, ti, vi = np.unravel_index(chosen, (n, t, v))
            for s, tt, vv in zip(si, ti, vi):
                arrays[s][:, tt, vv] = 0.0
        else:
            si, ci, ti, vi = np.unravel_index(chosen, (n, 3, t, v))
            for s, cc, tt, vv in zip(si, ci, ti, vi):
                arrays[s][cc, tt, vv] = 0.0
    samples = [
        SkeletonSample(x=a, label=s.label, sample_id=s.sample_id)
        for a, s in zip(arrays, dataset.samples)
    ]
    return SynthDataset(samples=samples, spec=dataset.spec, split=dict(dataset.split))


# ---------------------------------------------------------------------------
# dataset directory format
# ---------------------------------------------------------------------------

_MANIFEST_VERSION = 1


def _fmt_floats(values) -> str:
    return ",".join(repr(float(x)) for x in np.asarray(values).ravel())


def _parse_floats(text: str, shape=None) -> np.ndarray:
    arr = np.array([float(x) for x in text.split(",") if x], dtype=np.float64)
    return arr.reshape(shape) if shape is not None else arr


def save_dataset(dataset: SynthDataset, directory) -> None:
    """Write manifest + per-sample tensor binaries."""
    os.makedirs(os.path.join(directory, "samples"), exist_ok=True)
    spec = dataset.spec
    lines = [
        f"version={_MANIFEST_VERSION}",
        f"num_classes={spec.num_classes}",
        f"samples_per_class={spec.samples_per_class}",
        f"num_frames={spec.num_frames}",
        f"num_joints={spec.num_joints}",
        f"jitter={spec.jitter!r}",
        f"seed={spec.seed}",
        f"base_pose={_fmt_floats(spec.base_pose)}",
        f"move_dirs={_fmt_floats(spec.move_dirs)}",
    ]
    for k, m in enumerate(spec.motions):
        lines.append(f"class{k}.freq={_fmt_floats(m.freq)}")
        lines.append(f"class{k}.amp={_fmt_floats(m.amp)}")
        lines.append(f"class{k}.phase={_fmt_floats(m.phase)}")
    for s in dataset.samples:
        part = dataset.split.get(s.sample_id, "train")
        lines.append(f"sample {s.sample_id} {s.label} {part}")
    with open(os.path.join(directory, "manifest.txt"), "w") as f:
        f.write("\n".join(lines) + "\n")
    for s in dataset.samples:
        save_tensor(os.path.join(directory, "samples", f"{s.sample_id}.bin"), s.x)


def load_dataset(directory) -> SynthDataset:
    """Rebuild a dataset directory written by :func:`save_dataset`."""
    manifest = os.path.join(directory, "manifest.txt")
    kv = {}
    rows = []
    with open(manifest) as f:
        for raw in f:
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if line.startswith("sample "):
                _, sample_id, label, part = line.split()
                rows.append((sample_id, int(label), part))
            else:
                key, _, value = line.partition("=")
                kv[key] = value
    if int(kv.get("version", -1)) != _MANIFEST_VERSION:
        raise FormatError(f"unsupported dataset manifest version {kv.get('version')}")

    num_classes = int(kv["num_classes"])
    v = int(kv["num_joints"])
    motions = [
        ClassMotion(
            freq=_parse_floats(kv[f"class{k}.freq"]),
            amp=_parse_floats(kv[f"class{k}.amp"]),
            phase=_parse_floats(kv[f"class{k}.phase"]),
        )
        for k in range(num_classes)
    ]
    spec = SynthSpec(
        num_classes=num_classes,
        motions=motions,
        base_pose=_parse_floats(kv["base_pose"], (3, v)),
        move_dirs=_parse_floats(kv["move_dirs"], (3, v)),
        samples_per_class=int(kv["samples_per_class"]),
        num_frames=int(kv["num_frames"]),
        jitter=float(kv["jitter"]),
        seed=int(kv["seed"]),
    )
    samples = []
    split = {}
    for sample_id, label, part in rows:
        x = load_tensor(os.path.join(directory, "samples", f"{sample_id}.bin"))
        samples.append(SkeletonSample(x=x, label=label, sample_id=sample_id))
        split[sample_id] = part
    return SynthDataset(samples=samples, spec=spec, split=split)


def load_sample_csv(path, label: int = 0, sample_id: str | None = None) -> SkeletonSample:
    """Import a frame-major CSV: one row per frame, V*3 columns ordered
    ``j0_x, j0_y, j0_z, j1_x, ...``."""
    rows = np.loadtxt(path, delimiter=",", ndmin=2, dtype=np.float64)
    t, width = rows.shape
    if width % 3:
        raise ValueError(f"{path}: {width} columns is not a multiple of 3")
    v = width // 3
    x = rows.reshape(t, v, 3).transpose(2, 0, 1)  # (3, T, V)
    name = sample_id if sample_id is not None else os.path.splitext(os.path.basename(path))[0]
    return SkeletonSample(x=np.ascontiguousarray(x), label=label, sample_id=name)
