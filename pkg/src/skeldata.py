"""
Skeleton datasets: on-disk format, validation, resampling, splitting and
synthetic stand-ins shaped like the Emilya, KDAE and EGBM corpora.

Sample file layout (one file per sample):

    T J fps label
    x0 y0 z0 x1 y1 z1 ... (3*J reals, frame 0)
    ...                   (T lines in total)
"""
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from src.errors import DatasetLoadError, EmptySequenceError, ParameterError, SplitError

TARGET_FRAMES = 64

logger = logging.getLogger(__name__)


@dataclass
class SkeletonSequence:
    frames: np.ndarray  # (T, J, 3), meters
    fps: float
    label: str
    dataset_id: str
    sample_id: str

    @property
    def frame_count(self) -> int:
        return int(self.frames.shape[0])

    @property
    def joint_count(self) -> int:
        return int(self.frames.shape[1])

    def validate(self) -> None:
        if self.frames.ndim != 3 or self.frames.shape[2] != 3:
            raise DatasetLoadError(f"sample {self.sample_id}: frames must be T x J x 3, got {self.frames.shape}")
        if not np.isfinite(self.frames).all():
            raise DatasetLoadError(f"sample {self.sample_id}: non-finite coordinates")
        if not self.fps > 0:
            raise DatasetLoadError(f"sample {self.sample_id}: fps must be positive, got {self.fps}")


@dataclass
class SampleEntry:
    sample_id: str
    path: str
    label: str
    frames: int


@dataclass
class DatasetManifest:
    name: str
    joint_count: int
    fps: float
    labels: tuple[str, ...]
    samples: list[SampleEntry]
    edges: list[tuple[int, int]] | None = None
    root: Path | None = None

    def validate(self) -> None:
        if not self.labels:
            raise DatasetLoadError(f"manifest {self.name}: label set is empty")
        if len(set(self.labels)) != len(self.labels):
            raise DatasetLoadError(f"manifest {self.name}: duplicate labels in {list(self.labels)}")
        if self.joint_count < 1:
            raise DatasetLoadError(f"manifest {self.name}: joint_count must be positive")
        if not self.samples:
            raise DatasetLoadError(f"manifest {self.name}: no samples")
        for entry in self.samples:
            if entry.label not in self.labels:
                raise DatasetLoadError(f"sample {entry.sample_id}: unknown label {entry.label!r}")

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "joint_count": self.joint_count,
            "fps": self.fps,
            "labels": list(self.labels),
            "edges": [list(e) for e in self.edges] if self.edges is not None else None,
            "samples": [entry.__dict__ for entry in self.samples],
        }


@dataclass
class LoadedDataset:
    manifest: DatasetManifest
    sequences: list[SkeletonSequence] = field(default_factory=list)

    def by_id(self) -> dict[str, SkeletonSequence]:
        return {seq.sample_id: seq for seq in self.sequences}


@dataclass
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.train_fraction < 1:
            raise ParameterError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")


### Sample files


def write_sample(path: Path, seq: SkeletonSequence) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    T, J = seq.frame_count, seq.joint_count
    with open(path, "w") as f:
        f.write(f"{T} {J} {seq.fps:.17g} {seq.label}\n")
        np.savetxt(f, seq.frames.reshape(T, 3 * J), fmt="%.17g")


def read_sample(path: Path, sample_id: str | None = None, dataset_id: str = "") -> SkeletonSequence:
    path = Path(path)
    sample_id = sample_id or path.stem
    try:
        lines = path.read_text().splitlines()
    except OSError as e:
        raise DatasetLoadError(f"sample {sample_id}: cannot read {path}: {e}") from e
    if not lines:
        raise DatasetLoadError(f"sample {sample_id}: empty file {path}")
    header = lines[0].split()
    if len(header) != 4:
        raise DatasetLoadError(f"sample {sample_id}: header must be 'T J fps label', got {lines[0]!r}")
    try:
        T, J, fps = int(header[0]), int(header[1]), float(header[2])
    except ValueError as e:
        raise DatasetLoadError(f"sample {sample_id}: malformed header {lines[0]!r}") from e
    body = [line for line in lines[1:] if line.strip()]
    if T == 0:
        raise DatasetLoadError(f"sample {sample_id}: zero frames")
    if len(body) != T:
        raise DatasetLoadError(f"sample {sample_id}: header declares {T} frames, found {len(body)}")
    try:
        data = np.loadtxt(body, dtype=np.float64, ndmin=2)
    except ValueError as e:
        raise DatasetLoadError(f"sample {sample_id}: malformed frame data: {e}") from e
    if data.shape != (T, 3 * J):
        raise DatasetLoadError(f"sample {sample_id}: expected {T} rows of {3 * J} values, got {data.shape}")
    seq = SkeletonSequence(data.reshape(T, J, 3), fps, header[3], dataset_id, sample_id)
    seq.validate()
    return seq


### Manifests


def read_manifest(manifest_path: Path) -> DatasetManifest:
    manifest_path = Path(manifest_path)
    try:
        raw = json.loads(manifest_path.read_text())
    except OSError as e:
        raise DatasetLoadError(f"cannot read manifest {manifest_path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DatasetLoadError(f"manifest {manifest_path} is not valid JSON: {e}") from e
    try:
        samples = [SampleEntry(str(s["sample_id"]), str(s["path"]), str(s["label"]), int(s["frames"])) for s in raw["samples"]]
        edges = raw.get("edges")
        manifest = DatasetManifest(
            name=str(raw["name"]),
            joint_count=int(raw["joint_count"]),
            fps=float(raw["fps"]),
            labels=tuple(raw["labels"]),
            samples=samples,
            edges=[(int(a), int(b)) for a, b in edges] if edges is not None else None,
            root=manifest_path.parent,
        )
    except (KeyError, TypeError, ValueError) as e:
        raise DatasetLoadError(f"manifest {manifest_path} is missing or mistypes a field: {e}") from e
    manifest.validate()
    return manifest


def load_dataset(manifest_path: Path) -> LoadedDataset:
    """Read a manifest and every sample it lists, validating each against it."""
    manifest = read_manifest(manifest_path)
    sequences = []
    for entry in manifest.samples:
        seq = read_sample(manifest.root / entry.path, entry.sample_id, manifest.name)
        if seq.joint_count != manifest.joint_count:
            raise DatasetLoadError(
                f"sample {entry.sample_id}: has {seq.joint_count} joints but manifest {manifest.name} declares {manifest.joint_count}"
            )
        if seq.label != entry.label:
            raise DatasetLoadError(f"sample {entry.sample_id}: file label {seq.label!r} disagrees with manifest label {entry.label!r}")
        if seq.label not in manifest.labels:
            raise DatasetLoadError(f"sample {entry.sample_id}: unknown label {seq.label!r}")
        if seq.frame_count != entry.frames:
            raise DatasetLoadError(f"sample {entry.sample_id}: manifest lists {entry.frames} frames, file holds {seq.frame_count}")
        sequences.append(seq)
    logger.info(f"loaded {len(sequences)} samples from {manifest.name} (J={manifest.joint_count})")
    return LoadedDataset(manifest, sequences)


def write_dataset(dataset: LoadedDataset, out_dir: Path) -> Path:
    """Write samples plus manifest.json under out_dir; returns the manifest path."""
    out_dir = Path(out_dir)
    entries = []
    for seq in dataset.sequences:
        rel = f"samples/{seq.sample_id}.txt"
        write_sample(out_dir / rel, seq)
        entries.append(SampleEntry(seq.sample_id, rel, seq.label, seq.frame_count))
    dataset.manifest.samples = entries
    dataset.manifest.root = out_dir
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(dataset.manifest.to_dict(), indent=2))
    logger.info(f"wrote {len(entries)} samples to {out_dir}")
    return manifest_path


### Preprocessing


def resample_indices(frame_count: int, target: int = TARGET_FRAMES) -> np.ndarray:
    if frame_count == 0:
        raise EmptySequenceError("cannot resample a sequence with zero frames")
    if frame_count > target:
        return (np.arange(target) * frame_count) // target
    # shorter sequences repeat cyclically from the start
    return np.arange(target) % frame_count


def resample_to_frames(seq: SkeletonSequence, target: int = TARGET_FRAMES) -> SkeletonSequence:
    if seq.frame_count == target:
        return seq
    indices = resample_indices(seq.frame_count, target)
    return SkeletonSequence(seq.frames[indices].copy(), seq.fps, seq.label, seq.dataset_id, seq.sample_id)


def split_train_test(sample_ids: list[str] | DatasetManifest, spec: SplitSpec) -> tuple[list[str], list[str]]:
    """Seeded shuffle, then the first round(fraction * N) ids train."""
    if isinstance(sample_ids, DatasetManifest):
        sample_ids = [entry.sample_id for entry in sample_ids.samples]
    n = len(sample_ids)
    if n < 5:
        raise SplitError(f"need at least 5 samples to split, got {n}")
    order = np.random.default_rng(spec.seed).permutation(n)
    n_train = int(np.floor(spec.train_fraction * n + 0.5))
    shuffled = [sample_ids[i] for i in order]
    return shuffled[:n_train], shuffled[n_train:]


### Topology


def default_skeleton_edges(joint_count: int) -> list[tuple[int, int]]:
    """A spine of up to five joints plus four limb chains sharing the remainder.

    Arms hang off joint 3, legs off joint 0; any joint count >= 1 yields a tree.
    """
    spine = min(joint_count, 5)
    edges = [(i - 1, i) for i in range(1, spine)]
    anchors = [3, 3, 0, 0] if spine == 5 else [0, 0, 0, 0]
    tips = list(anchors)
    for offset, joint in enumerate(range(spine, joint_count)):
        limb = offset % 4
        edges.append((tips[limb], joint))
        tips[limb] = joint
    return edges


### Synthesis


@dataclass
class SynthProfile:
    name: str
    joint_count: int
    fps: float
    labels: tuple[str, ...]
    samples_per_label: int
    seed: int = 0
    min_frames: int = 40
    max_frames: int = 120

    def validate(self) -> None:
        if self.joint_count < 2:
            raise ParameterError(f"profile {self.name}: need at least 2 joints, got {self.joint_count}")
        if not self.labels:
            raise ParameterError(f"profile {self.name}: label set is empty")
        if self.samples_per_label < 1:
            raise ParameterError(f"profile {self.name}: samples_per_label must be positive")
        if not 1 <= self.min_frames <= self.max_frames:
            raise ParameterError(f"profile {self.name}: bad frame range [{self.min_frames}, {self.max_frames}]")


EMILYA_LABELS = ("Neutral", "Joy", "Anger", "Panic", "Fear", "Anxiety", "Sadness", "Shame")
KDAE_LABELS = ("Happiness", "Sadness", "Neutral", "Anger", "Disgust", "Fear", "Surprise")
EGBM_LABELS = KDAE_LABELS

PROFILES: dict[str, SynthProfile] = {
    "emilya-like": SynthProfile("emilya-like", 28, 120.0, EMILYA_LABELS, 20, min_frames=150, max_frames=300),
    "kdae-like": SynthProfile("kdae-like", 24, 125.0, KDAE_LABELS, 20, min_frames=150, max_frames=300),
    "egbm-like": SynthProfile("egbm-like", 25, 30.0, EGBM_LABELS, 20, min_frames=40, max_frames=90),
    "tiny": SynthProfile("tiny", 12, 30.0, ("Joy", "Sadness", "Anger"), 20, min_frames=40, max_frames=90),
}


def get_profile(name: str, /, **overrides) -> SynthProfile:
    if name not in PROFILES:
        raise ParameterError(f"unknown profile {name!r}; available: {sorted(PROFILES)}")
    base = PROFILES[name]
    return SynthProfile(**{**base.__dict__, **overrides})


def _rest_pose(edges: list[tuple[int, int]], joint_count: int) -> np.ndarray:
    pose = np.zeros((joint_count, 3))
    pose[0] = (0.0, 1.0, 0.0)
    for parent, child in edges:
        angle = 0.7 * child
        pose[child] = pose[parent] + 0.12 * np.array([np.sin(angle), -0.6 if child % 2 else 0.6, np.cos(angle)])
    return pose


def synthesize_dataset(profile: SynthProfile) -> LoadedDataset:
    """
    Deterministic motion per label: a label-specific frequency, amplitude,
    phase pattern and posture lean, plus small per-sample jitter.
    """
    profile.validate()
    rng = np.random.default_rng(profile.seed)
    J, K = profile.joint_count, len(profile.labels)
    edges = default_skeleton_edges(J)
    rest = _rest_pose(edges, J)
    # extremities move more than the trunk
    reach = 0.5 + np.linalg.norm(rest - rest[0], axis=1)

    sequences = []
    for k, label in enumerate(profile.labels):
        freq = 0.5 + 0.4 * k
        amp = 0.05 + 0.03 * k
        phases = 2 * np.pi * ((np.arange(J) * (k + 1)) % J) / J
        lean = 0.08 * np.array([np.cos(2 * np.pi * k / K), 0.0, np.sin(2 * np.pi * k / K)])
        for n in range(profile.samples_per_label):
            T = int(rng.integers(profile.min_frames, profile.max_frames + 1))
            t = np.arange(T)[:, None] / profile.fps
            jitter = 1.0 + 0.1 * (rng.random() - 0.5)
            offset = rng.uniform(0, 2 * np.pi)
            wave = 2 * np.pi * freq * jitter * t + phases[None, :] + offset
            motion = np.stack([np.sin(wave), 0.5 * np.sin(2 * wave), np.cos(wave)], axis=-1)
            frames = rest[None] + lean[None, None] * rest[None, :, 1:2] + amp * reach[None, :, None] * motion
            frames += rng.normal(0.0, 0.0005, size=frames.shape)
            sample_id = f"{profile.name}-{k:02d}-{n:04d}"
            sequences.append(SkeletonSequence(frames, profile.fps, label, profile.name, sample_id))

    entries = [SampleEntry(s.sample_id, f"samples/{s.sample_id}.txt", s.label, s.frame_count) for s in sequences]
    manifest = DatasetManifest(profile.name, J, profile.fps, tuple(profile.labels), entries, edges)
    return LoadedDataset(manifest, sequences)


### Probes


def velocity_features(seq: SkeletonSequence) -> np.ndarray:
    """Per-joint mean speed and speed deviation (length 2*J)."""
    if seq.frame_count < 2:
        return np.zeros(2 * seq.joint_count)
    speed = np.linalg.norm(np.diff(seq.frames, axis=0), axis=-1) * seq.fps
    return np.concatenate([speed.mean(axis=0), speed.std(axis=0)])


def nearest_centroid_accuracy(sequences: list[SkeletonSequence]) -> float:
    """Training accuracy of a nearest-centroid classifier on velocity features."""
    features = np.stack([velocity_features(s) for s in sequences])
    labels = np.array([s.label for s in sequences])
    classes = sorted(set(labels))
    centroids = np.stack([features[labels == c].mean(axis=0) for c in classes])
    distances = np.linalg.norm(features[:, None, :] - centroids[None], axis=-1)
    predicted = np.array(classes)[distances.argmin(axis=1)]
    return float((predicted == labels).mean())
