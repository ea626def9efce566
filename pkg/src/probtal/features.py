"""Snippet features: on-disk format, synthetic generator and temporal sampling.

On-disk layout (one directory)::

    manifest.json   {"dim", "vlp_dim", "classes", "videos": [...]}
    textbank.f32    little-endian float32, (C+1) x vlp_dim, row-major
    gt.json         {"version": "1.0", "database": {vid: {"annotations": [...]}}}
    features/*.f32  little-endian float32, num_snippets x dim, row-major

Each video entry has ``id, num_snippets, fps, duration_s, rgb, flow, vlp``
and may carry ``subset`` ("train"/"test") and ``snippet_len``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

SNIPPET_LEN = 16
_LE_F32 = np.dtype("<f4")


class DatasetError(ValueError):
    pass


@dataclass
class SnippetFeatureBundle:
    video_id: str
    rgb: np.ndarray
    flow: np.ndarray
    vlp_image: np.ndarray
    fps: float
    duration: float
    snippet_len: int = SNIPPET_LEN
    subset: str = "train"

    def __post_init__(self):
        if self.rgb.shape[0] != self.flow.shape[0]:
            raise DatasetError(f"{self.video_id}: rgb/flow row counts differ")
        if self.vlp_image.shape[0] != self.rgb.shape[0]:
            raise DatasetError(f"{self.video_id}: vlp row count differs from rgb")
        for name in ("rgb", "flow", "vlp_image"):
            if not np.all(np.isfinite(getattr(self, name))):
                raise DatasetError(f"{self.video_id}: non-finite values in {name}")

    @property
    def num_snippets(self) -> int:
        return self.rgb.shape[0]

    @property
    def seconds_per_snippet(self) -> float:
        return self.snippet_len / self.fps


@dataclass
class TextBank:
    """Category embeddings; the last row models background and is trainable."""

    embeddings: np.ndarray
    class_names: list[str]
    background_row_trainable: bool = True

    def __post_init__(self):
        C = len(self.class_names)
        if self.embeddings.shape[0] != C + 1:
            raise DatasetError(f"text bank has {self.embeddings.shape[0]} rows, expected {C + 1}")
        norms = np.linalg.norm(self.embeddings[:C].astype(np.float64), axis=1)
        if np.any(norms == 0):
            raise DatasetError("zero-norm class embedding")
        if not np.allclose(norms, 1.0, atol=1e-5):
            emb = self.embeddings.copy()
            emb[:C] = (emb[:C] / norms[:, None]).astype(emb.dtype)
            self.embeddings = emb

    @property
    def num_classes(self) -> int:
        return len(self.class_names)


@dataclass
class Segment:
    class_id: int
    start: float
    end: float


@dataclass
class GroundTruth:
    video_id: str
    segments: list[Segment]
    num_classes: int

    @property
    def labels(self) -> np.ndarray:
        y = np.zeros(self.num_classes, dtype=np.float32)
        for s in self.segments:
            y[s.class_id] = 1.0
        return y


@dataclass
class Dataset:
    classes: list[str]
    bundles: list[SnippetFeatureBundle]
    truths: list[GroundTruth]
    textbank: TextBank

    def __len__(self):
        return len(self.bundles)

    @property
    def dim(self) -> int:
        return self.bundles[0].rgb.shape[1]

    @property
    def vlp_dim(self) -> int:
        return self.textbank.embeddings.shape[1]

    def subset(self, name: str) -> "Dataset":
        keep = [i for i, b in enumerate(self.bundles) if b.subset == name]
        return Dataset(self.classes, [self.bundles[i] for i in keep],
                       [self.truths[i] for i in keep], self.textbank)

    def truth_dict(self) -> dict[str, GroundTruth]:
        return {g.video_id: g for g in self.truths}


# ------------------------------------------------------------------ file I/O


def _write_f32(path: Path, arr: np.ndarray) -> None:
    np.ascontiguousarray(arr, dtype=_LE_F32).tofile(path)


def _read_f32(path: Path, rows: int, cols: int) -> np.ndarray:
    if not path.exists():
        raise DatasetError(f"missing feature file {path}")
    nbytes = path.stat().st_size
    if nbytes != rows * cols * 4:
        raise DatasetError(
            f"{path.name}: shape mismatch, {nbytes} bytes for declared [{rows} x {cols}]")
    arr = np.fromfile(path, dtype=_LE_F32).reshape(rows, cols).astype(np.float32)
    if not np.all(np.isfinite(arr)):
        raise DatasetError(f"{path.name}: non-finite values")
    return arr


def gt_to_json(truths: list[GroundTruth], classes: list[str]) -> dict:
    db = {}
    for g in truths:
        db[g.video_id] = {"annotations": [
            {"label": classes[s.class_id], "segment": [float(s.start), float(s.end)]}
            for s in g.segments]}
    return {"version": "1.0", "database": db}


def load_ground_truth(path, classes: list[str] | None = None) -> tuple[list[GroundTruth], list[str]]:
    """Parse a ground-truth JSON; class ids follow ``classes`` or sorted label order."""
    with open(path) as fh:
        doc = json.load(fh)
    if "database" not in doc:
        raise DatasetError(f"{path}: missing 'database'")
    db = doc["database"]
    if classes is None:
        classes = sorted({a["label"] for v in db.values() for a in v.get("annotations", [])})
    index = {c: i for i, c in enumerate(classes)}
    truths = []
    for vid, entry in db.items():
        segs = []
        for ann in entry.get("annotations", []):
            if ann["label"] not in index:
                raise DatasetError(f"{vid}: unknown class {ann['label']!r}")
            start, end = (float(v) for v in ann["segment"])
            if not start < end:
                raise DatasetError(f"{vid}: segment start must be < end, got {ann['segment']}")
            segs.append(Segment(index[ann["label"]], start, end))
        truths.append(GroundTruth(vid, segs, len(classes)))
    return truths, classes


def write_dataset(ds: Dataset, directory) -> Path:
    directory = Path(directory)
    (directory / "features").mkdir(parents=True, exist_ok=True)
    videos = []
    for b in ds.bundles:
        entry = {"id": b.video_id, "num_snippets": b.num_snippets, "fps": b.fps,
                 "duration_s": b.duration, "snippet_len": b.snippet_len, "subset": b.subset}
        for key, arr in (("rgb", b.rgb), ("flow", b.flow), ("vlp", b.vlp_image)):
            rel = f"features/{b.video_id}_{key}.f32"
            _write_f32(directory / rel, arr)
            entry[key] = rel
        videos.append(entry)
    manifest = {"dim": ds.dim, "vlp_dim": ds.vlp_dim, "classes": ds.classes, "videos": videos}
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    _write_f32(directory / "textbank.f32", ds.textbank.embeddings)
    with open(directory / "gt.json", "w") as fh:
        json.dump(gt_to_json(ds.truths, ds.classes), fh, indent=1)
    return directory / "manifest.json"


def load_dataset(manifest_path) -> Dataset:
    """Load and validate a dataset from ``manifest.json`` (or its directory)."""
    path = Path(manifest_path)
    if path.is_dir():
        path = path / "manifest.json"
    root = path.parent
    with open(path) as fh:
        m = json.load(fh)
    D, Dv, classes = int(m["dim"]), int(m["vlp_dim"]), list(m["classes"])
    C = len(classes)

    bank = _read_f32(root / m.get("textbank", "textbank.f32"), C + 1, Dv)
    textbank = TextBank(bank, classes)

    gt_path = root / m.get("ground_truth", "gt.json")
    gt_by_id = {}
    if gt_path.exists():
        truths, _ = load_ground_truth(gt_path, classes)
        gt_by_id = {g.video_id: g for g in truths}

    bundles, truths = [], []
    for v in m["videos"]:
        n = int(v["num_snippets"])
        if n < 1:
            raise DatasetError(f"{v['id']}: empty video")
        b = SnippetFeatureBundle(
            video_id=v["id"],
            rgb=_read_f32(root / v["rgb"], n, D),
            flow=_read_f32(root / v["flow"], n, D),
            vlp_image=_read_f32(root / v["vlp"], n, Dv),
            fps=float(v["fps"]),
            duration=float(v["duration_s"]),
            snippet_len=int(v.get("snippet_len", SNIPPET_LEN)),
            subset=v.get("subset", "train"),
        )
        if abs(b.duration - n * b.seconds_per_snippet) > b.seconds_per_snippet + 1e-9:
            raise DatasetError(f"{b.video_id}: duration inconsistent with snippet count")
        g = gt_by_id.get(b.video_id, GroundTruth(b.video_id, [], C))
        for s in g.segments:
            if s.end > b.duration + 1e-6:
                raise DatasetError(f"{b.video_id}: segment ends after the video")
        bundles.append(b)
        truths.append(g)
    return Dataset(classes, bundles, truths, textbank)


# ---------------------------------------------------------------- synthesis


@dataclass
class SynthConfig:
    num_classes: int = 4
    dim: int = 16
    vlp_dim: int = 16
    num_train: int = 80
    num_test: int = 20
    t_raw_range: tuple[int, int] = (64, 128)
    segments_range: tuple[int, int] = (1, 3)
    segment_len_range: tuple[int, int] = (8, 24)
    classes_per_video: int = 1
    min_gap: int = 2
    feature_noise: float = 0.15
    flow_noise: float = 0.15
    flow_proto_noise: float = 0.3
    vlp_noise: float = 0.15
    fps: float = 25.0
    snippet_len: int = SNIPPET_LEN


def _unit_rows(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def _place_segments(rng, t_raw, lengths, min_gap):
    free = t_raw - sum(lengths) - min_gap * (len(lengths) - 1)
    if free < 0:
        raise DatasetError(
            f"infeasible synthetic config: segments {lengths} do not fit in {t_raw} snippets")
    # split the free space into len+1 slack pieces
    cuts = np.sort(rng.integers(0, free + 1, size=len(lengths)))
    slack = np.diff(np.concatenate([[0], cuts, [free]]))
    starts, pos = [], int(slack[0])
    for i, length in enumerate(lengths):
        starts.append(pos)
        pos += length + min_gap + int(slack[i + 1])
    return starts


def synthesize_dataset(cfg: SynthConfig, seed: int) -> Dataset:
    """Planted-segment dataset with prototype geometry; same seed, same bytes."""
    rng = np.random.default_rng(seed)
    C, D, Dv = cfg.num_classes, cfg.dim, cfg.vlp_dim
    if cfg.classes_per_video > C:
        raise DatasetError("classes_per_video exceeds num_classes")
    if cfg.segment_len_range[0] * cfg.segments_range[0] > cfg.t_raw_range[1]:
        raise DatasetError("infeasible synthetic config: segments exceed video length")
    # rows 0..C-1 are classes, row C is background
    rgb_proto = _unit_rows(rng, C + 1, D)
    flow_proto = rgb_proto + cfg.flow_proto_noise * rng.standard_normal((C + 1, D))
    flow_proto /= np.linalg.norm(flow_proto, axis=1, keepdims=True)
    vlp_proto = _unit_rows(rng, C + 1, Dv)
    bank = np.concatenate([vlp_proto[:C], _unit_rows(rng, 1, Dv)]).astype(np.float32)
    classes = [f"action_{i}" for i in range(C)]

    bundles, truths = [], []
    spsec = cfg.snippet_len / cfg.fps
    for v in range(cfg.num_train + cfg.num_test):
        t_raw = int(rng.integers(cfg.t_raw_range[0], cfg.t_raw_range[1] + 1))
        n_seg = int(rng.integers(cfg.segments_range[0], cfg.segments_range[1] + 1))
        lengths = [int(x) for x in rng.integers(cfg.segment_len_range[0],
                                                cfg.segment_len_range[1] + 1, size=n_seg)]
        starts = _place_segments(rng, t_raw, lengths, cfg.min_gap)
        video_classes = rng.choice(C, size=cfg.classes_per_video, replace=False)
        seg_classes = [int(video_classes[i % len(video_classes)]) for i in range(n_seg)]

        label = np.full(t_raw, C)
        for s, length, c in zip(starts, lengths, seg_classes):
            label[s:s + length] = c
        rgb = rgb_proto[label] + cfg.feature_noise * rng.standard_normal((t_raw, D))
        flow = flow_proto[label] + cfg.flow_noise * rng.standard_normal((t_raw, D))
        vlp = vlp_proto[label] + cfg.vlp_noise * rng.standard_normal((t_raw, Dv))
        vid = f"video_{v:04d}"
        bundles.append(SnippetFeatureBundle(
            vid, rgb.astype(np.float32), flow.astype(np.float32), vlp.astype(np.float32),
            fps=cfg.fps, duration=t_raw * spsec, snippet_len=cfg.snippet_len,
            subset="train" if v < cfg.num_train else "test"))
        truths.append(GroundTruth(vid, [Segment(c, s * spsec, (s + length) * spsec)
                                        for s, length, c in zip(starts, lengths, seg_classes)], C))
    return Dataset(classes, bundles, truths, TextBank(bank, classes))


def feature_prototypes(cfg: SynthConfig, seed: int) -> np.ndarray:
    """Re-derive the (C+1) x D rgb prototypes that ``synthesize_dataset`` used."""
    rng = np.random.default_rng(seed)
    return _unit_rows(rng, cfg.num_classes + 1, cfg.dim)


# ------------------------------------------------------------------ sampling


@dataclass
class IndexMap:
    """Maps sampled positions back to raw snippets and seconds."""

    indices: np.ndarray
    t_raw: int
    seconds_per_snippet: float
    duration: float

    @property
    def stride(self) -> float:
        return self.t_raw / len(self.indices)

    def to_seconds(self, i: int) -> float:
        """Centre time of the i-th stratum."""
        return (i + 0.5) * self.stride * self.seconds_per_snippet

    def to_index(self, seconds: float) -> int:
        i = int(np.floor(seconds / self.seconds_per_snippet / self.stride))
        return min(max(i, 0), len(self.indices) - 1)

    def segment_seconds(self, first: int, last: int) -> tuple[float, float]:
        """Time span covered by sampled positions first..last inclusive."""
        start = first * self.stride * self.seconds_per_snippet
        end = (last + 1) * self.stride * self.seconds_per_snippet
        return max(0.0, start), min(self.duration, end)


@dataclass
class SampledSnippets:
    rgb: np.ndarray
    flow: np.ndarray
    vlp_image: np.ndarray
    index_map: IndexMap


def sample_snippets(bundle: SnippetFeatureBundle, T: int,
                    rng: np.random.Generator | None = None) -> SampledSnippets:
    """Stratified temporal sampling to a fixed length ``T``.

    Without ``rng`` each stratum contributes its midpoint (inference); with
    ``rng`` a uniform draw inside each stratum (training).
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    n = bundle.num_snippets
    if n == 0:
        raise DatasetError(f"{bundle.video_id}: empty bundle")
    edges = np.arange(T + 1) * (n / T)
    lo = np.floor(edges[:-1]).astype(np.int64)
    hi = np.maximum(np.floor(edges[1:]).astype(np.int64), lo + 1)
    if rng is None or n < T:
        idx = np.floor((np.arange(T) + 0.5) * n / T).astype(np.int64)
    else:
        idx = lo + np.floor(rng.random(T) * (hi - lo)).astype(np.int64)
    idx = np.clip(idx, 0, n - 1)
    imap = IndexMap(idx, n, bundle.seconds_per_snippet, bundle.duration)
    return SampledSnippets(bundle.rgb[idx], bundle.flow[idx], bundle.vlp_image[idx], imap)

