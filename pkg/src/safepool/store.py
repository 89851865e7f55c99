"""On-disk formats and dataset machinery.

* TensorFile: a little-endian binary container for one dense array
  (magic ``SAFT``), bit-exact on round trip.
* DatasetManifest: JSON description of a dataset (classes, grid shape,
  sample files, classifier, pooling-layer checkpoint and flags).
* Seeded k-shot sampling with a fixed SplitMix64 / Fisher-Yates scheme.
* A planted-parts synthetic dataset generator for desk-scale benchmarks.

All paths inside a manifest are relative to the manifest's directory.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .attnpool import AttnPoolParams, TENSOR_FIELDS
from .errors import CapacityError, ConfigError, DataError, TensorFormatError
from .prng import SplitMix64, fnv1a64, shuffled

MAGIC = b"SAFT"
VERSION = 1
DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("<f8")}
CODE_FOR_KIND = {"float32": 1, "float64": 2}
SPLITS = ("train", "val", "test")


# ---------------------------------------------------------------------------
# TensorFile container


def write_tensor(path, t: np.ndarray) -> None:
    """Write one array to a TensorFile. Only float32/float64 are accepted."""
    t = np.ascontiguousarray(t)
    if t.ndim < 1:
        t = t.reshape(1)
    if t.dtype.name not in CODE_FOR_KIND:
        raise ConfigError(f"unsupported dtype {t.dtype}; use float32/float64")
    code = CODE_FOR_KIND[t.dtype.name]
    header = MAGIC + struct.pack("<HBB", VERSION, code, t.ndim)
    header += struct.pack(f"<{t.ndim}Q", *t.shape)
    payload = t.astype(DTYPE_CODES[code], copy=False).tobytes()
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(header)
        fh.write(payload)
    os.replace(tmp, path)


def read_tensor(path) -> np.ndarray:
    """Read a TensorFile; raises TensorFormatError with the failing offset."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 8:
        raise TensorFormatError("file shorter than fixed header", offset=0)
    if blob[:4] != MAGIC:
        raise TensorFormatError(f"bad magic {blob[:4]!r}", offset=0)
    version, code, rank = struct.unpack_from("<HBB", blob, 4)
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version}", offset=4)
    if code not in DTYPE_CODES:
        raise TensorFormatError(f"unknown dtype code {code}", offset=6)
    if rank < 1:
        raise TensorFormatError("rank must be >= 1", offset=7)
    dims_end = 8 + 8 * rank
    if len(blob) < dims_end:
        raise TensorFormatError("truncated dims block", offset=len(blob))
    dims = struct.unpack_from(f"<{rank}Q", blob, 8)
    if any(d < 1 for d in dims):
        raise TensorFormatError(f"non-positive dim in {dims}", offset=8)
    dtype = DTYPE_CODES[code]
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(blob) - dims_end != expected:
        raise TensorFormatError(
            f"payload is {len(blob) - dims_end} bytes, expected {expected}",
            offset=dims_end,
        )
    arr = np.frombuffer(blob, dtype=dtype, offset=dims_end).reshape(dims)
    return arr.astype(dtype.newbyteorder("="), copy=True)


# ---------------------------------------------------------------------------
# Attention-pool checkpoints (one named tensor per field + a small sidecar)


def save_attnpool(dirpath, params: AttnPoolParams) -> None:
    d = Path(dirpath)
    d.mkdir(parents=True, exist_ok=True)
    for name, tensor in params.tensors().items():
        write_tensor(d / f"{name}.tf", tensor)
    meta = {
        "heads": params.heads,
        "scale": params.scale,
        "include_mean_token": params.include_mean_token,
        "has_pos_embed": params.pos_embed is not None,
    }
    (d / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=2))


def load_attnpool(dirpath) -> AttnPoolParams:
    d = Path(dirpath)
    meta_path = d / "meta.json"
    if not meta_path.exists():
        raise DataError(f"no checkpoint meta at {meta_path}")
    meta = json.loads(meta_path.read_text())
    tensors = {name: read_tensor(d / f"{name}.tf") for name in TENSOR_FIELDS}
    pos = read_tensor(d / "pos_embed.tf") if meta["has_pos_embed"] else None
    return AttnPoolParams(
        **tensors,
        heads=meta["heads"],
        scale=meta["scale"],
        pos_embed=pos,
        include_mean_token=meta["include_mean_token"],
    )


# ---------------------------------------------------------------------------
# Dataset manifest


@dataclass
class SampleRecord:
    path: str
    label: int
    split: str
    planted_cells: Optional[list] = None

    def to_json(self):
        out = {"path": self.path, "label": self.label, "split": self.split}
        if self.planted_cells is not None:
            out["planted_cells"] = list(self.planted_cells)
        return out


@dataclass
class DatasetManifest:
    name: str
    classes: list
    height: int
    width: int
    channels: int
    embed_dim: int
    samples: list  # list[SampleRecord]
    classifier_path: str
    attnpool_checkpoint: Optional[str] = None
    include_mean_token: bool = False
    has_pos_embed: bool = False
    scale: Optional[float] = None
    metadata: dict = field(default_factory=dict)
    root: Path = field(default_factory=Path)  # directory paths resolve against

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def resolve(self, relpath) -> Path:
        return Path(self.root) / relpath

    def split_indices(self, split: str) -> list:
        return [i for i, s in enumerate(self.samples) if s.split == split]

    def to_json(self) -> dict:
        return {
            "name": self.name,
            "classes": list(self.classes),
            "grid": {"height": self.height, "width": self.width,
                     "channels": self.channels},
            "embed_dim": self.embed_dim,
            "samples": [s.to_json() for s in self.samples],
            "classifier_path": self.classifier_path,
            "attnpool_checkpoint": self.attnpool_checkpoint,
            "flags": {
                "include_mean_token": self.include_mean_token,
                "pos_embed": self.has_pos_embed,
                "scale": self.scale,
            },
            "metadata": self.metadata,
        }

    def save(self, path) -> None:
        path = Path(path)
        path.write_text(json.dumps(self.to_json(), sort_keys=True, indent=2))

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise DataError(f"cannot read manifest {path}: {exc}") from exc
        flags = doc.get("flags", {})
        samples = [
            SampleRecord(s["path"], int(s["label"]), s["split"],
                         s.get("planted_cells"))
            for s in doc["samples"]
        ]
        return cls(
            name=doc["name"],
            classes=doc["classes"],
            height=doc["grid"]["height"],
            width=doc["grid"]["width"],
            channels=doc["grid"]["channels"],
            embed_dim=doc["embed_dim"],
            samples=samples,
            classifier_path=doc["classifier_path"],
            attnpool_checkpoint=doc.get("attnpool_checkpoint"),
            include_mean_token=bool(flags.get("include_mean_token", False)),
            has_pos_embed=bool(flags.get("pos_embed", False)),
            scale=flags.get("scale"),
            metadata=doc.get("metadata", {}),
            root=path.parent,
        )

    def validate(self, check_files: bool = True) -> None:
        """Raise on structural problems; optionally verify referenced files."""
        if not self.classes:
            raise ConfigError("manifest has no classes")
        if len(set(self.classes)) != len(self.classes):
            raise ConfigError("duplicate class names in manifest")
        n = self.n_classes
        for s in self.samples:
            if not 0 <= s.label < n:
                raise ConfigError(f"label {s.label} out of range for {s.path}")
            if s.split not in SPLITS:
                raise ConfigError(f"unknown split {s.split!r} for {s.path}")
        if check_files:
            expected = (self.height * self.width, self.channels)
            for s in self.samples:
                p = self.resolve(s.path)
                if not p.exists():
                    raise DataError(f"missing feature file {p}")
                arr = read_tensor(p)
                if arr.shape != expected:
                    raise DataError(
                        f"{p}: shape {arr.shape} != declared {expected}")
            clf = read_tensor(self.resolve(self.classifier_path))
            if clf.shape != (n, self.embed_dim):
                raise DataError(
                    f"classifier shape {clf.shape} != ({n}, {self.embed_dim})")
            if self.attnpool_checkpoint is not None:
                load_attnpool(self.resolve(self.attnpool_checkpoint))

    # -- array loading helpers ------------------------------------------------

    def load_sample(self, index: int) -> np.ndarray:
        return read_tensor(self.resolve(self.samples[index].path))

    def load_arrays(self, indices) -> tuple:
        """Stack sample feature maps; returns (maps (n, HW, C), labels (n,))."""
        maps = np.stack([self.load_sample(i) for i in indices])
        labels = np.array([self.samples[i].label for i in indices],
                          dtype=np.int64)
        return maps, labels

    def load_split(self, split: str) -> tuple:
        idx = self.split_indices(split)
        if not idx:
            raise ConfigError(f"split {split!r} is empty")
        maps, labels = self.load_arrays(idx)
        return maps, labels, idx

    def load_classifier_weights(self) -> np.ndarray:
        return read_tensor(self.resolve(self.classifier_path))

    def load_attnpool(self) -> AttnPoolParams:
        if self.attnpool_checkpoint is None:
            raise ConfigError("manifest has no attnpool checkpoint")
        return load_attnpool(self.resolve(self.attnpool_checkpoint))


# ---------------------------------------------------------------------------
# k-shot sampling


@dataclass
class FewShotSet:
    """Deterministic per-class selection: exactly K train samples per class
    and min(K, 4) validation samples, drawn from the manifest's train split."""

    shots: int
    seed: int
    train: dict  # class index -> list of manifest sample indices
    val: dict

    def train_indices(self) -> list:
        return [i for c in sorted(self.train) for i in self.train[c]]

    def val_indices(self) -> list:
        return [i for c in sorted(self.val) for i in self.val[c]]


def sample_k_shot(manifest: DatasetManifest, k: int, seed: int) -> FewShotSet:
    """Select K train + min(K, 4) validation samples per class.

    Each class is shuffled by a SplitMix64 stream seeded with
    seed XOR fnv1a64(class name), so the selection is reproducible across
    runs, platforms, and reimplementations.
    """
    if k < 1:
        raise ConfigError("shots must be >= 1")
    n_val = min(k, 4)
    train, val = {}, {}
    for ci, name in enumerate(manifest.classes):
        pool = [i for i in manifest.split_indices("train")
                if manifest.samples[i].label == ci]
        if len(pool) < k + n_val:
            raise CapacityError(
                f"class {name!r} has {len(pool)} train samples, "
                f"needs {k + n_val}")
        order = shuffled(pool, SplitMix64((seed ^ fnv1a64(name)) ))
        train[ci] = order[:k]
        val[ci] = order[k:k + n_val]
    return FewShotSet(shots=k, seed=seed, train=train, val=val)


# ---------------------------------------------------------------------------
# Synthetic planted-parts dataset


def gen_synthetic(out_dir, n_classes, pool_per_class, height, width, channels,
                  embed_dim, parts, noise, seed, test_per_class=20,
                  classifier_noise=0.5, heads=4, name="synthetic"):
    """Generate a planted-parts dataset and return its manifest.

    Construction: ``parts`` orthonormal vectors in R^channels form the part
    vocabulary; the first ``n_classes`` of them are class-discriminative,
    the remainder are shared background. Each sample map fills the grid
    with random background parts, plants the class part in 2-4 random
    cells, and adds Gaussian noise with expected norm ``noise`` per cell
    (entry std noise / sqrt(channels)), i.e. noise is measured relative to
    the unit-norm part vectors. A frozen pooling layer is
    built whose value/output projection maps the part vocabulary onto
    orthonormal images in R^embed_dim, and classifier rows are those images
    of the class parts plus ``classifier_noise`` times a random unit vector
    (re-normalized). With noise = classifier_noise = 0 the test split is
    separable by construction.

    The measured zero-shot accuracy of the generated test split is recorded
    in the manifest metadata.
    """
    if parts < n_classes:
        raise ConfigError("need at least one part per class")
    if channels < 8 or embed_dim < 8:
        raise ConfigError("channels and embed_dim must be >= 8")
    if parts > min(channels, embed_dim):
        raise ConfigError(
            "parts must be <= min(channels, embed_dim) for orthonormal images")
    if channels % heads != 0:
        raise ConfigError(f"heads={heads} must divide channels={channels}")

    rng = np.random.default_rng(seed)
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)

    # Orthonormal part vocabulary and orthonormal images in embedding space.
    part_vecs = np.linalg.qr(rng.standard_normal((channels, channels)))[0][:parts]
    images = np.linalg.qr(rng.standard_normal((embed_dim, embed_dim)))[0][:parts]
    proj = part_vecs.T @ images                      # (C, d_out); p_i -> u_i

    # Frozen pooling layer: value/output path factors the projection exactly.
    w_v = np.linalg.qr(rng.standard_normal((channels, channels)))[0]
    w_c = w_v.T @ proj
    pool_o = AttnPoolParams(
        w_q=(rng.standard_normal((channels, channels))
             / np.sqrt(channels)).astype(np.float32),
        b_q=np.zeros(channels, np.float32),
        w_k=(rng.standard_normal((channels, channels))
             / np.sqrt(channels)).astype(np.float32),
        b_k=np.zeros(channels, np.float32),
        w_v=w_v.astype(np.float32),
        b_v=np.zeros(channels, np.float32),
        w_c=w_c.astype(np.float32),
        b_c=np.zeros(embed_dim, np.float32),
        heads=heads,
    )
    save_attnpool(out_dir / "attnpool_o", pool_o)

    rows = images[:n_classes].copy()
    if classifier_noise > 0:
        bump = rng.standard_normal((n_classes, embed_dim))
        bump /= np.linalg.norm(bump, axis=1, keepdims=True)
        rows = rows + classifier_noise * bump
    rows /= np.linalg.norm(rows, axis=1, keepdims=True)
    write_tensor(out_dir / "classifier.tf", rows.astype(np.float32))

    hw = height * width
    bg_ids = np.arange(n_classes, parts)
    samples = []

    def make_sample(ci, tag, idx):
        cells = part_vecs[rng.choice(bg_ids, size=hw)] if len(bg_ids) else \
            np.zeros((hw, channels))
        n_plant = int(rng.integers(2, 5))
        planted = rng.choice(hw, size=n_plant, replace=False)
        cells[planted] = part_vecs[ci]
        cells = cells + (noise / np.sqrt(channels)) * rng.standard_normal((hw, channels))
        rel = f"features/c{ci:03d}_{tag}{idx:03d}.tf"
        write_tensor(out_dir / rel, cells.astype(np.float32))
        split = "train" if tag == "t" else "test"
        samples.append(SampleRecord(rel, ci, split, sorted(int(p) for p in planted)))

    for ci in range(n_classes):
        for i in range(pool_per_class):
            make_sample(ci, "t", i)
        for i in range(test_per_class):
            make_sample(ci, "e", i)

    manifest = DatasetManifest(
        name=name,
        classes=[f"class_{i:03d}" for i in range(n_classes)],
        height=height, width=width, channels=channels, embed_dim=embed_dim,
        samples=samples,
        classifier_path="classifier.tf",
        attnpool_checkpoint="attnpool_o",
        metadata={
            "generator": {
                "n_classes": n_classes, "pool_per_class": pool_per_class,
                "parts": parts, "noise": noise, "seed": seed,
                "test_per_class": test_per_class,
                "classifier_noise": classifier_noise,
            },
        },
        root=out_dir,
    )

    # Pin the zero-shot accuracy of the generated test split.
    from .inference import Classifier, evaluate

    maps, labels, _ = manifest.load_split("test")
    clf = Classifier(rows.astype(np.float32))
    result = evaluate(maps, labels, pool_o, pool_o, clf, beta=0.5)
    manifest.metadata["zero_shot_accuracy"] = result.accuracy
    manifest.save(out_dir / "manifest.json")
    return manifest
