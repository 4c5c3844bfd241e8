"""Dataset ingestion, length normalization, synthetic data, and split files.

The on-disk layout is a JSON manifest plus one little-endian binary file
per split:

    magic "BMHD" | u32 version=1 | u64 N | u32 L | u32 d_t | u32 d_a | u32 d_v
    then per sample:
        f32 label_reg | i32 label_cls (-1 if absent)
        L*d_t f32 token embeddings (row-major)
        d_a f32 acoustic vector | d_v f32 visual vector

Arrays are float32 in memory so that save -> load is the identity.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPLIT_MAGIC = b"BMHD"
SPLIT_VERSION = 1
SPLIT_NAMES = ("train", "valid", "test")
PLANTED_MODES = ("av", "at", "vt", "trimodal", "noise")


class DataError(ValueError):
    """Malformed manifest/split file or a dimension contract violation."""


@dataclass
class UtteranceSample:
    """One utterance: a token-embedding sequence plus per-utterance vectors."""

    id: str
    text_seq: np.ndarray  # [len, d_t]
    acoustic: np.ndarray  # [d_a]
    visual: np.ndarray    # [d_v]
    label_reg: float
    label_cls: int | None = None


@dataclass
class DatasetManifest:
    name: str
    d_t: int
    d_a: int
    d_v: int
    label_lo: float
    label_hi: float
    task: str  # "regression" | "binary-classification"
    lam: float
    splits: dict[str, str] = field(default_factory=dict)

    def validate(self) -> None:
        if self.label_lo >= self.label_hi:
            raise DataError(f"manifest label range [{self.label_lo}, {self.label_hi}] is empty")
        if self.lam < 0:
            raise DataError(f"manifest lambda must be >= 0, got {self.lam}")
        if self.task not in ("regression", "binary-classification"):
            raise DataError(f"manifest task {self.task!r} unknown")
        for d, v in (("d_t", self.d_t), ("d_a", self.d_a), ("d_v", self.d_v)):
            if v < 1:
                raise DataError(f"manifest {d} must be positive, got {v}")


@dataclass
class DatasetFeatures:
    """Length-normalized features for one split (immutable once loaded)."""

    text: np.ndarray       # [N, L, d_t] float32
    acoustic: np.ndarray   # [N, d_a] float32
    visual: np.ndarray     # [N, d_v] float32
    label_reg: np.ndarray  # [N] float32
    label_cls: np.ndarray  # [N] int32, -1 where absent

    def __post_init__(self):
        n = self.text.shape[0]
        for name, arr in (("acoustic", self.acoustic), ("visual", self.visual),
                          ("label_reg", self.label_reg), ("label_cls", self.label_cls)):
            if arr.shape[0] != n:
                raise DataError(f"{name} has {arr.shape[0]} samples, text has {n}")

    @property
    def n(self) -> int:
        return self.text.shape[0]

    @property
    def seq_len(self) -> int:
        return self.text.shape[1]

    def dims(self) -> tuple[int, int, int]:
        return self.text.shape[2], self.acoustic.shape[1], self.visual.shape[1]

    def take(self, idx) -> "DatasetFeatures":
        return DatasetFeatures(self.text[idx], self.acoustic[idx], self.visual[idx],
                               self.label_reg[idx], self.label_cls[idx])


# ---------------------------------------------------------------------------
# length normalization


def compute_target_length(lengths, lam: float) -> int:
    """Common sequence length: round(mean + lam * population std), >= 1."""
    lengths = np.asarray(list(lengths), dtype=np.float64)
    if lengths.size == 0:
        raise DataError("compute_target_length: empty length list")
    raw = lengths.mean() + float(lam) * lengths.std()  # population std
    return max(1, int(math.floor(raw + 0.5)))  # round half-up


def pad_truncate(seq: np.ndarray, target_len: int) -> np.ndarray:
    """Zero-pad short sequences at the end; keep the first rows of long ones."""
    seq = np.asarray(seq)
    if target_len < 1:
        raise DataError(f"pad_truncate: target length must be >= 1, got {target_len}")
    if seq.ndim != 2 or seq.shape[0] < 1:
        raise DataError(f"pad_truncate: expected a non-empty [len, d] matrix, got {seq.shape}")
    n = seq.shape[0]
    if n == target_len:
        return seq
    if n > target_len:
        return seq[:target_len]
    pad = np.zeros((target_len - n, seq.shape[1]), dtype=seq.dtype)
    return np.concatenate([seq, pad], axis=0)


def average_frames(frames: np.ndarray) -> np.ndarray:
    """Mean over the frame axis of a [k, d] stack."""
    frames = np.asarray(frames)
    if frames.ndim != 2 or frames.shape[0] < 1:
        raise DataError(f"average_frames: expected a non-empty [k, d] matrix, got {frames.shape}")
    return frames.mean(axis=0)


# ---------------------------------------------------------------------------
# synthetic datasets with a planted interaction


def gen_synthetic(
    n: int,
    dims: tuple[int, int, int] = (16, 8, 8),
    seed: int = 0,
    planted_mode: str = "av",
    lam: float = 3.0,
    len_range: tuple[int, int] = (4, 12),
    ratios: tuple[float, float, float] = (0.6, 0.2, 0.2),
    length_from: str = "train",
) -> tuple[dict[str, DatasetFeatures], DatasetManifest]:
    """Deterministic synthetic dataset whose label is planted in a chosen
    modality interaction.

    For ``planted_mode="av"`` the label is a clipped low-rank bilinear form
    of the acoustic and visual vectors plus small noise; "at"/"vt" plant
    the same structure against the sequence-mean text vector, "trimodal"
    mixes all three, and "noise" draws labels independent of every feature.
    Splits follow ``ratios`` in sample order; the target length is computed
    from the training split's raw lengths (``length_from="all"`` uses the
    whole corpus).
    """
    if n < 1:
        raise DataError(f"gen_synthetic: n must be >= 1, got {n}")
    if planted_mode not in PLANTED_MODES:
        raise DataError(f"gen_synthetic: unknown planted mode {planted_mode!r}")
    if length_from not in ("train", "all"):
        raise DataError(f"gen_synthetic: length_from must be 'train' or 'all'")
    d_t, d_a, d_v = dims
    rng = np.random.default_rng(seed)

    # planted structure: rank-2 bilinear factors per modality pair
    factors = {
        pair: (rng.normal(size=(2, da)) / math.sqrt(da), rng.normal(size=(2, db)) / math.sqrt(db))
        for pair, da, db in (("av", d_a, d_v), ("at", d_a, d_t), ("vt", d_v, d_t))
    }

    lengths = rng.integers(len_range[0], len_range[1] + 1, size=n)
    seqs = [rng.normal(size=(int(l), d_t)) for l in lengths]
    acoustic = rng.normal(size=(n, d_a))
    visual = rng.normal(size=(n, d_v))
    noise = rng.normal(scale=0.02, size=n)
    uniform = rng.uniform(-1.0, 1.0, size=n)

    def bilinear(pair, x, y):
        p, q = factors[pair]
        return ((x @ p[0]) * (y @ q[0]) + (x @ p[1]) * (y @ q[1])) / math.sqrt(2.0)

    t_latent = np.stack([s.mean(axis=0) * math.sqrt(s.shape[0]) for s in seqs])
    if planted_mode == "noise":
        labels = uniform
    else:
        if planted_mode == "av":
            signal = bilinear("av", acoustic, visual)
        elif planted_mode == "at":
            signal = bilinear("at", acoustic, t_latent)
        elif planted_mode == "vt":
            signal = bilinear("vt", visual, t_latent)
        else:  # trimodal
            signal = (bilinear("av", acoustic, visual)
                      + bilinear("at", acoustic, t_latent)
                      + bilinear("vt", visual, t_latent)) / math.sqrt(3.0)
        labels = np.clip(np.clip(0.6 * signal, -1.0, 1.0) + noise, -1.0, 1.0)

    # contiguous 6:2:2-style partition
    n_train = int(round(n * ratios[0]))
    n_valid = int(round(n * ratios[1]))
    bounds = {"train": slice(0, n_train),
              "valid": slice(n_train, n_train + n_valid),
              "test": slice(n_train + n_valid, n)}

    stat_lengths = lengths[bounds["train"]] if length_from == "train" else lengths
    if stat_lengths.size == 0:
        stat_lengths = lengths
    target_len = compute_target_length(stat_lengths, lam)

    text = np.stack([pad_truncate(s, target_len) for s in seqs]).astype(np.float32)
    acoustic = acoustic.astype(np.float32)
    visual = visual.astype(np.float32)
    labels = labels.astype(np.float32)
    label_cls = np.full(n, -1, dtype=np.int32)

    splits = {
        name: DatasetFeatures(text[sl], acoustic[sl], visual[sl], labels[sl], label_cls[sl])
        for name, sl in bounds.items()
    }
    manifest = DatasetManifest(
        name=f"synthetic-{planted_mode}-n{n}-seed{seed}",
        d_t=d_t, d_a=d_a, d_v=d_v,
        label_lo=-1.0, label_hi=1.0,
        task="regression", lam=lam,
        splits={name: f"{name}.bmhd" for name in SPLIT_NAMES},
    )
    return splits, manifest


# ---------------------------------------------------------------------------
# split file format


def save_split(path, feats: DatasetFeatures) -> None:
    path = Path(path)
    n, L, d_t = feats.text.shape
    d_a = feats.acoustic.shape[1]
    d_v = feats.visual.shape[1]
    with open(path, "wb") as fh:
        fh.write(SPLIT_MAGIC)
        fh.write(struct.pack("<IQIIII", SPLIT_VERSION, n, L, d_t, d_a, d_v))
        for i in range(n):
            fh.write(struct.pack("<fi", float(feats.label_reg[i]), int(feats.label_cls[i])))
            fh.write(np.ascontiguousarray(feats.text[i], dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(feats.acoustic[i], dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(feats.visual[i], dtype="<f4").tobytes())


def load_split(path, manifest: DatasetManifest | None = None) -> DatasetFeatures:
    """Read one split file; nothing is returned unless the whole file parses."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as e:
        raise DataError(f"cannot read split file {path}: {e}") from e
    header = struct.calcsize("<IQIIII") + len(SPLIT_MAGIC)
    if len(blob) < header:
        raise DataError(f"corrupt header in {path}: file shorter than the fixed header")
    if blob[:4] != SPLIT_MAGIC:
        raise DataError(f"corrupt header in {path}: bad magic {blob[:4]!r}")
    version, n, L, d_t, d_a, d_v = struct.unpack_from("<IQIIII", blob, 4)
    if version != SPLIT_VERSION:
        raise DataError(f"split file {path} has version {version}, expected {SPLIT_VERSION}")
    if manifest is not None:
        for name, got, want in (("d_t", d_t, manifest.d_t),
                                ("d_a", d_a, manifest.d_a),
                                ("d_v", d_v, manifest.d_v)):
            if got != want:
                raise DataError(
                    f"split file {path}: {name}={got} does not match manifest {name}={want}")
    per_sample = 4 + 4 + 4 * (L * d_t + d_a + d_v)
    expected = header + n * per_sample
    if len(blob) != expected:
        raise DataError(
            f"corrupt split file {path}: expected {expected} bytes for {n} samples, got {len(blob)}")

    label_reg = np.empty(n, dtype=np.float32)
    label_cls = np.empty(n, dtype=np.int32)
    text = np.empty((n, L, d_t), dtype=np.float32)
    acoustic = np.empty((n, d_a), dtype=np.float32)
    visual = np.empty((n, d_v), dtype=np.float32)
    off = header
    for i in range(n):
        label_reg[i], label_cls[i] = struct.unpack_from("<fi", blob, off)
        off += 8
        text[i] = np.frombuffer(blob, dtype="<f4", count=L * d_t, offset=off).reshape(L, d_t)
        off += 4 * L * d_t
        acoustic[i] = np.frombuffer(blob, dtype="<f4", count=d_a, offset=off)
        off += 4 * d_a
        visual[i] = np.frombuffer(blob, dtype="<f4", count=d_v, offset=off)
        off += 4 * d_v
    return DatasetFeatures(text, acoustic, visual, label_reg, label_cls)


# ---------------------------------------------------------------------------
# manifest + whole-dataset helpers

_MANIFEST_KEYS = {"name", "d_t", "d_a", "d_v", "label_lo", "label_hi", "task", "lambda", "splits"}


def save_manifest(path, manifest: DatasetManifest) -> None:
    doc = {
        "name": manifest.name,
        "d_t": manifest.d_t, "d_a": manifest.d_a, "d_v": manifest.d_v,
        "label_lo": manifest.label_lo, "label_hi": manifest.label_hi,
        "task": manifest.task, "lambda": manifest.lam,
        "splits": dict(manifest.splits),
    }
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except OSError as e:
        raise DataError(f"cannot read manifest {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise DataError(f"manifest {path} is not valid JSON: {e}") from e
    missing = _MANIFEST_KEYS - doc.keys()
    if missing:
        raise DataError(f"manifest {path} is missing keys: {sorted(missing)}")
    m = DatasetManifest(
        name=str(doc["name"]),
        d_t=int(doc["d_t"]), d_a=int(doc["d_a"]), d_v=int(doc["d_v"]),
        label_lo=float(doc["label_lo"]), label_hi=float(doc["label_hi"]),
        task=str(doc["task"]), lam=float(doc["lambda"]),
        splits={k: str(v) for k, v in doc["splits"].items()},
    )
    m.validate()
    return m


def save_dataset(outdir, splits: dict[str, DatasetFeatures], manifest: DatasetManifest) -> Path:
    """Write manifest.json plus one split file per entry; returns manifest path."""
    outdir = Path(outdir)
    outdir.mkdir(parents=True, exist_ok=True)
    for name, feats in splits.items():
        save_split(outdir / manifest.splits[name], feats)
    mpath = outdir / "manifest.json"
    save_manifest(mpath, manifest)
    return mpath


def load_dataset(manifest_path) -> tuple[dict[str, DatasetFeatures], DatasetManifest]:
    """Load every split referenced by a manifest (paths relative to it)."""
    manifest_path = Path(manifest_path)
    manifest = load_manifest(manifest_path)
    base = manifest_path.parent
    splits = {}
    for name, rel in manifest.splits.items():
        p = base / rel
        if not p.exists():
            raise DataError(f"manifest {manifest_path} references missing split file {p}")
        splits[name] = load_split(p, manifest)
    return splits, manifest


def samples_to_features(samples: list[UtteranceSample], target_len: int) -> DatasetFeatures:
    """Length-normalize a list of utterances into stacked feature arrays."""
    if not samples:
        raise DataError("samples_to_features: empty sample list")
    text = np.stack([pad_truncate(s.text_seq, target_len) for s in samples]).astype(np.float32)
    acoustic = np.stack([np.asarray(s.acoustic) for s in samples]).astype(np.float32)
    visual = np.stack([np.asarray(s.visual) for s in samples]).astype(np.float32)
    label_reg = np.array([s.label_reg for s in samples], dtype=np.float32)
    label_cls = np.array([-1 if s.label_cls is None else s.label_cls for s in samples],
                         dtype=np.int32)
    return DatasetFeatures(text, acoustic, visual, label_reg, label_cls)
