"""Video records, the manifest/feature-file formats, snippet sampling and the
synthetic two-modality generator."""
from __future__ import annotations

import hashlib
import json
import os
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .autograd import ConfigError

FEATURE_MAGIC = b"FSEQ"
FEATURE_VERSION = 1
_HEADER = struct.Struct("<4sIII")


class LoadError(ValueError):
    """Manifest problem; the message names the offending record."""


class DecodeError(ValueError):
    """Feature file problem; carries the byte offset where decoding failed."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


Segment = tuple  # (start_snippet, end_snippet, class_index)


@dataclass
class VideoRecord:
    id: str
    rgb: np.ndarray
    flow: np.ndarray
    labels: np.ndarray
    gt_segments: list = field(default_factory=list)
    fps: float | None = None

    def __post_init__(self):
        self.rgb = np.asarray(self.rgb, dtype=np.float64)
        self.flow = np.asarray(self.flow, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.float64)
        if self.rgb.ndim != 2 or self.rgb.shape != self.flow.shape:
            raise ValueError(
                f"video {self.id}: rgb {self.rgb.shape} and flow {self.flow.shape} must share T x D")
        T, C = self.rgb.shape[0], len(self.labels)
        for s, e, c in self.gt_segments:
            if not (0 <= s < e <= T) or not (0 <= c < C):
                raise ValueError(f"video {self.id}: bad gt segment {(s, e, c)} for T={T}, C={C}")

    @property
    def T(self) -> int:
        return self.rgb.shape[0]

    @property
    def D(self) -> int:
        return self.rgb.shape[1]


# -- feature files ------------------------------------------------------------

def write_feature_file(path, features: np.ndarray) -> None:
    arr = np.asarray(features)
    if arr.ndim != 2:
        raise ValueError(f"features must be T x D, got shape {arr.shape}")
    T, D = arr.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(FEATURE_MAGIC, FEATURE_VERSION, T, D))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _read_header(raw: bytes) -> tuple[int, int]:
    if len(raw) < _HEADER.size:
        raise DecodeError(f"header needs {_HEADER.size} bytes, file has {len(raw)}", len(raw))
    magic, version, T, D = _HEADER.unpack_from(raw)
    if magic != FEATURE_MAGIC:
        raise DecodeError(f"bad magic {magic!r}, expected {FEATURE_MAGIC!r}", 0)
    if version != FEATURE_VERSION:
        raise DecodeError(f"unsupported version {version}", 4)
    return T, D


def read_feature_file(path) -> np.ndarray:
    """Decode one feature file to a float64 ``T x D`` matrix."""
    raw = Path(path).read_bytes()
    T, D = _read_header(raw)
    need = _HEADER.size + 4 * T * D
    if len(raw) < need:
        raise DecodeError(f"truncated payload: expected {need} bytes for T={T}, D={D}, got {len(raw)}",
                          len(raw))
    if len(raw) > need:
        raise DecodeError(f"{len(raw) - need} trailing bytes after payload", need)
    values = np.frombuffer(raw, dtype="<f4", count=T * D, offset=_HEADER.size)
    bad = np.flatnonzero(~np.isfinite(values))
    if bad.size:
        raise DecodeError("non-finite feature value", _HEADER.size + 4 * int(bad[0]))
    return values.astype(np.float64).reshape(T, D)


def feature_file_shape(path) -> tuple[int, int]:
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
    T, D = _read_header(head)
    size = os.path.getsize(path)
    if size != _HEADER.size + 4 * T * D:
        raise DecodeError(f"payload length {size - _HEADER.size} does not match T={T}, D={D}",
                          min(size, _HEADER.size + 4 * T * D))
    return T, D


# -- manifests ----------------------------------------------------------------

@dataclass
class ManifestEntry:
    id: str
    rgb_path: str
    flow_path: str
    labels: list[int]
    gt_segments: list[tuple[float, float, int]] = field(default_factory=list)
    fps: float | None = None


@dataclass
class DatasetManifest:
    class_names: list[str]
    feature_dim: int
    videos: list[ManifestEntry]
    split: str = "train"
    root: Path = field(default=Path("."), compare=False, repr=False)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def resolve(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.root / p

    def load_video(self, entry: ManifestEntry) -> VideoRecord:
        labels = np.zeros(self.num_classes)
        labels[list(entry.labels)] = 1.0
        return VideoRecord(
            id=entry.id,
            rgb=read_feature_file(self.resolve(entry.rgb_path)),
            flow=read_feature_file(self.resolve(entry.flow_path)),
            labels=labels,
            gt_segments=[tuple(s) for s in entry.gt_segments],
            fps=entry.fps,
        )

    def load_all(self) -> list[VideoRecord]:
        return [self.load_video(v) for v in self.videos]

    def to_json(self) -> dict:
        videos = []
        for v in self.videos:
            item = {"id": v.id, "rgb_path": v.rgb_path, "flow_path": v.flow_path,
                    "labels": list(v.labels),
                    "gt_segments": [[float(s), float(e), int(c)] for s, e, c in v.gt_segments]}
            if v.fps is not None:
                item["fps"] = v.fps
            videos.append(item)
        return {"class_names": list(self.class_names), "feature_dim": self.feature_dim,
                "split": self.split, "videos": videos}


def save_manifest(manifest: DatasetManifest, path) -> None:
    Path(path).write_text(json.dumps(manifest.to_json(), indent=2) + "\n", encoding="utf-8")


def load_manifest(path, check_files: bool = True) -> DatasetManifest:
    """Parse and validate a JSON manifest; feature paths resolve relative to it."""
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise LoadError(f"manifest {path} not found") from None
    except json.JSONDecodeError as exc:
        raise LoadError(f"manifest {path} is not valid JSON: {exc}") from None
    try:
        class_names = [str(c) for c in doc["class_names"]]
        D = int(doc["feature_dim"])
        split = doc.get("split", "train")
        raw_videos = doc["videos"]
    except (KeyError, TypeError, ValueError) as exc:
        raise LoadError(f"manifest {path}: malformed top-level field ({exc})") from None
    if split not in ("train", "test"):
        raise LoadError(f"manifest {path}: split must be train|test, got {split!r}")
    C = len(class_names)
    seen: set[str] = set()
    videos = []
    for n, item in enumerate(raw_videos):
        vid = str(item.get("id", f"#{n}"))
        try:
            entry = ManifestEntry(
                id=str(item["id"]), rgb_path=str(item["rgb_path"]), flow_path=str(item["flow_path"]),
                labels=[int(c) for c in item["labels"]],
                gt_segments=[(float(s), float(e), int(c)) for s, e, c in item.get("gt_segments", [])],
                fps=float(item["fps"]) if item.get("fps") is not None else None,
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise LoadError(f"video {vid}: malformed field ({exc})") from None
        if entry.id in seen:
            raise LoadError(f"video {entry.id}: duplicate id")
        seen.add(entry.id)
        for c in entry.labels:
            if not 0 <= c < C:
                raise LoadError(f"video {entry.id}: label index {c} outside [0, {C})")
        for s, e, c in entry.gt_segments:
            if not (0 <= s < e) or not 0 <= c < C:
                raise LoadError(f"video {entry.id}: invalid gt segment {(s, e, c)}")
        videos.append(entry)
    manifest = DatasetManifest(class_names, D, videos, split, root=path.parent)
    if check_files:
        for v in videos:
            shapes = []
            for rel in (v.rgb_path, v.flow_path):
                fp = manifest.resolve(rel)
                if not fp.exists():
                    raise LoadError(f"video {v.id}: feature file {fp} does not exist")
                try:
                    shapes.append(feature_file_shape(fp))
                except DecodeError as exc:
                    raise LoadError(f"video {v.id}: {fp}: {exc}") from None
            (T, d1), (T2, d2) = shapes
            if d1 != D or d2 != D:
                raise LoadError(f"video {v.id}: feature dim {d1}/{d2} != manifest feature_dim {D}")
            if T != T2:
                raise LoadError(f"video {v.id}: rgb has T={T}, flow has T={T2}")
            for s, e, c in v.gt_segments:
                if e > T:
                    raise LoadError(f"video {v.id}: gt segment {(s, e, c)} ends beyond T={T}")
    return manifest


# -- snippet sampling -----------------------------------------------------------

def sample_indices(T: int, T_fixed: int, rng: np.random.Generator) -> np.ndarray:
    if T_fixed < 1:
        raise ValueError(f"T_fixed must be >= 1, got {T_fixed}")
    return np.sort(rng.choice(T, size=T_fixed, replace=T < T_fixed))


def sample_training_snippets(record: VideoRecord, T_fixed: int, rng: np.random.Generator) -> VideoRecord:
    """Uniformly pick ``T_fixed`` snippets (sorted; with replacement only when
    the video is shorter), using the same indices for both modalities."""
    idx = sample_indices(record.T, T_fixed, rng)
    return VideoRecord(id=record.id, rgb=record.rgb[idx], flow=record.flow[idx],
                       labels=record.labels.copy(), gt_segments=[], fps=record.fps)


# -- synthetic data ------------------------------------------------------------

@dataclass
class SyntheticSpec:
    num_videos: int = 40
    C: int = 4
    D: int = 32
    T_range: tuple[int, int] = (60, 120)
    actions_per_video_range: tuple[int, int] = (1, 3)
    signal_channels: int = 8
    redundant_channels: int = 16
    noise_sigma: float = 0.3
    seed: int = 0
    num_test_videos: int = 40
    signal_amplitude: float = 1.0
    distractor_amplitude: float = 2.0
    distractor_bursts_range: tuple[int, int] = (2, 4)
    action_len_range: tuple[int, int] = (6, 20)
    distractor_len_range: tuple[int, int] = (6, 20)

    def validate(self) -> None:
        if self.signal_channels + self.redundant_channels > self.D:
            raise ConfigError(f"signal_channels + redundant_channels = "
                              f"{self.signal_channels + self.redundant_channels} exceeds D={self.D}")
        if self.signal_channels < self.C:
            raise ConfigError(f"need at least one signal channel per class "
                              f"({self.signal_channels} < C={self.C})")
        if self.num_videos < 1 or self.C < 1:
            raise ConfigError("num_videos and C must be positive")
        lo, hi = self.T_range
        if not 1 <= lo <= hi:
            raise ConfigError(f"bad T_range {self.T_range}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be non-negative")
        a_lo, a_hi = self.action_len_range
        if not 1 <= a_lo <= a_hi:
            raise ConfigError(f"bad action_len_range {self.action_len_range}")

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        unknown = set(d) - set(known)
        if unknown:
            raise ConfigError(f"unknown synthetic spec fields: {sorted(unknown)}")
        for k in ("T_range", "actions_per_video_range", "distractor_bursts_range",
                  "action_len_range", "distractor_len_range"):
            if k in known:
                known[k] = tuple(known[k])
        return cls(**known)


def class_channels(spec: SyntheticSpec, c: int) -> np.ndarray:
    """Signal channels owned by class ``c`` (round-robin over the signal block)."""
    return np.arange(c, spec.signal_channels, spec.C)


def _place_intervals(rng, T, count, len_range, gap=1):
    """Non-overlapping [s, e) intervals separated by at least ``gap`` snippets."""
    out = []
    for _ in range(count):
        for _attempt in range(50):
            L = int(rng.integers(len_range[0], len_range[1] + 1))
            if L >= T:
                L = max(1, T // 2)
            s = int(rng.integers(0, T - L + 1))
            e = s + L
            if all(e + gap <= a or s >= b + gap for a, b in out):
                out.append((s, e))
                break
    return sorted(out)


def _motion_envelope(L: int) -> np.ndarray:
    # linear onset/offset ramps, flat top
    ramp = max(1, L // 4)
    t = np.arange(L)
    up = np.minimum(1.0, (t + 1) / ramp)
    down = np.minimum(1.0, (L - t) / ramp)
    return np.minimum(up, down)


def synthesize_video(spec: SyntheticSpec, rng: np.random.Generator, vid: str):
    T = int(rng.integers(spec.T_range[0], spec.T_range[1] + 1))
    c = int(rng.integers(spec.C))
    n_act = int(rng.integers(spec.actions_per_video_range[0], spec.actions_per_video_range[1] + 1))
    segments = _place_intervals(rng, T, n_act, spec.action_len_range)
    if not segments:
        segments = [(0, min(T, spec.action_len_range[0]))]
    rgb = np.zeros((T, spec.D))
    flow = np.zeros((T, spec.D))
    chans = class_channels(spec, c)
    amp = spec.signal_amplitude
    for s, e in segments:
        rgb[s:e, chans] += amp
        flow[s:e, chans] += amp * _motion_envelope(e - s)[:, None]
    if spec.redundant_channels:
        red = np.arange(spec.signal_channels, spec.signal_channels + spec.redundant_channels)
        n_burst = int(rng.integers(spec.distractor_bursts_range[0], spec.distractor_bursts_range[1] + 1))
        bursts = _place_intervals(rng, T, n_burst, spec.distractor_len_range, gap=0)
        which = int(rng.integers(2))
        for s, e in bursts:
            pattern = rng.choice([-1.0, 1.0], size=red.size) * spec.distractor_amplitude
            target = rgb if which == 0 else flow
            target[s:e, red] += pattern
            which = 1 - which
    if spec.noise_sigma > 0:
        rgb += rng.normal(0.0, spec.noise_sigma, rgb.shape)
        flow += rng.normal(0.0, spec.noise_sigma, flow.shape)
    labels = np.zeros(spec.C)
    labels[c] = 1.0
    gt = [(float(s), float(e), c) for s, e in segments]
    return VideoRecord(id=vid, rgb=rgb, flow=flow, labels=labels, gt_segments=gt)


def generate_synthetic(spec: SyntheticSpec, out_dir=None):
    """Build train (and test) synthetic splits.

    Returns ``{split: (manifest, records)}``; when ``out_dir`` is given the
    feature files and ``<split>.json`` manifests are written there.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    class_names = [f"class_{c}" for c in range(spec.C)]
    result = {}
    splits = [("train", spec.num_videos), ("test", spec.num_test_videos)]
    for split, n in splits:
        if n <= 0:
            continue
        records = [synthesize_video(spec, rng, f"{split}_{i:04d}") for i in range(n)]
        entries = [ManifestEntry(id=r.id, rgb_path=f"features/{r.id}_rgb.fseq",
                                 flow_path=f"features/{r.id}_flow.fseq",
                                 labels=[int(c) for c in np.flatnonzero(r.labels)],
                                 gt_segments=list(r.gt_segments)) for r in records]
        root = Path(out_dir) if out_dir is not None else Path(".")
        manifest = DatasetManifest(class_names, spec.D, entries, split, root=root)
        if out_dir is not None:
            (root / "features").mkdir(parents=True, exist_ok=True)
            for r, e in zip(records, entries):
                write_feature_file(root / e.rgb_path, r.rgb)
                write_feature_file(root / e.flow_path, r.flow)
            save_manifest(manifest, root / f"{split}.json")
            (root / "synthetic_spec.json").write_text(
                json.dumps(asdict(spec), indent=2) + "\n", encoding="utf-8")
            # stored values are f32; keep records consistent with what a reader sees
            for r in records:
                r.rgb = r.rgb.astype(np.float32).astype(np.float64)
                r.flow = r.flow.astype(np.float32).astype(np.float64)
        result[split] = (manifest, records)
    return result


def manifest_hash(manifest_dir) -> str:
    """sha256 over manifests and feature files under ``manifest_dir``."""
    root = Path(manifest_dir)
    h = hashlib.sha256()
    for p in sorted(root.rglob("*")):
        if p.is_file() and (p.suffix in (".json", ".fseq")):
            h.update(p.relative_to(root).as_posix().encode())
            h.update(p.read_bytes())
    return h.hexdigest()
