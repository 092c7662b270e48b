"""Bags of instance embeddings: synthetic generation, binary files, manifests.

Bag file layout (``MMILBAG1``), all little-endian::

    magic       8 bytes  b"MMILBAG1"
    n           u32
    C           u32
    has_coords  u8
    label       u8
    embeddings  n*C f32, row-major
    coords      n*2 f32 (only when has_coords)
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ConfigurationError, DataError, ParseError

BAG_MAGIC = b"MMILBAG1"
_HEADER = struct.Struct("<8sIIBB")
SPLITS = ("train", "val", "test")
DEFAULT_RATIOS = (0.60, 0.15, 0.25)
PATCH_SIZE = 256


@dataclass
class InstanceBag:
    id: str
    embeddings: np.ndarray
    label: int
    coords: np.ndarray | None = None
    instance_labels: np.ndarray | None = None

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] < 1:
            raise DataError(f"bag {self.id!r}: embeddings must be a non-empty (n, C) array")
        if self.coords is not None:
            self.coords = np.asarray(self.coords, dtype=np.float64)
            if self.coords.shape != (self.n, 2):
                raise DataError(f"bag {self.id!r}: coords shape {self.coords.shape} != ({self.n}, 2)")
        if self.label not in (0, 1):
            raise DataError(f"bag {self.id!r}: label must be 0 or 1, got {self.label}")
        if self.instance_labels is not None:
            self.instance_labels = np.asarray(self.instance_labels, dtype=np.int64)
            if bag_label_oracle(self.instance_labels) != self.label:
                raise DataError(f"bag {self.id!r}: label contradicts its instance labels")

    @property
    def n(self) -> int:
        return self.embeddings.shape[0]

    @property
    def dim(self) -> int:
        return self.embeddings.shape[1]


def bag_label_oracle(instance_labels: Sequence[int]) -> int:
    """A bag is negative iff every instance is negative."""
    labels = list(np.asarray(instance_labels).reshape(-1).tolist())
    if not labels:
        raise DataError("bag has no instances")
    if any(v not in (0, 1) for v in labels):
        raise DataError("instance labels must be 0 or 1")
    return 0 if sum(labels) == 0 else 1


# ---------------------------------------------------------------------------
# binary bag files


def encode_bag(bag: InstanceBag) -> bytes:
    has = bag.coords is not None
    parts = [
        _HEADER.pack(BAG_MAGIC, bag.n, bag.dim, int(has), int(bag.label)),
        np.ascontiguousarray(bag.embeddings, dtype="<f4").tobytes(),
    ]
    if has:
        parts.append(np.ascontiguousarray(bag.coords, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_bag(raw: bytes, bag_id: str = "") -> InstanceBag:
    if len(raw) < _HEADER.size:
        raise ParseError(f"truncated bag header ({len(raw)} of {_HEADER.size} bytes)", len(raw))
    magic, n, c, has, label = _HEADER.unpack_from(raw, 0)
    if magic != BAG_MAGIC:
        raise ParseError(f"bad magic {magic!r}", 0)
    if has not in (0, 1):
        raise ParseError(f"has_coords flag must be 0 or 1, got {has}", 16)
    if label not in (0, 1):
        raise ParseError(f"label byte must be 0 or 1, got {label}", 17)
    off = _HEADER.size
    need = off + 4 * n * c + (8 * n if has else 0)
    if len(raw) < need:
        raise ParseError(f"truncated bag body: expected {need} bytes, got {len(raw)}", len(raw))
    if len(raw) > need:
        raise ParseError(f"{len(raw) - need} trailing bytes after bag body", need)
    emb = np.frombuffer(raw, dtype="<f4", count=n * c, offset=off).reshape(n, c)
    coords = None
    if has:
        coords = np.frombuffer(raw, dtype="<f4", count=n * 2, offset=off + 4 * n * c).reshape(n, 2)
    return InstanceBag(bag_id, emb.astype(np.float64), int(label),
                       None if coords is None else coords.astype(np.float64))


def save_bag(path, bag: InstanceBag) -> None:
    Path(path).write_bytes(encode_bag(bag))


def load_bag(path, bag_id: str | None = None) -> InstanceBag:
    path = Path(path)
    try:
        raw = path.read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read bag file {path}: {exc.strerror}") from exc
    return decode_bag(raw, bag_id if bag_id is not None else path.stem)


# ---------------------------------------------------------------------------
# synthetic data


@dataclass
class GeneratorParams:
    n_bags: int = 300
    n_range: tuple[int, int] = (64, 256)
    dim: int = 32
    pos_instance_rate: float = 0.05
    separation: float = 3.0
    components: int = 4
    seed: int = 0

    def validate(self) -> None:
        lo, hi = self.n_range
        if lo < 1 or hi < lo:
            raise ConfigurationError(f"invalid instance-count range {self.n_range}")
        if not 0.0 < self.pos_instance_rate <= 1.0:
            raise ConfigurationError(f"positive-instance rate must lie in (0, 1], got {self.pos_instance_rate}")
        if hi * self.pos_instance_rate < 1:
            raise ConfigurationError(
                f"rate {self.pos_instance_rate} gives no positive instance even at n={hi}"
            )
        if self.separation <= 0:
            raise ConfigurationError("separation must be positive")
        if self.n_bags < 1 or self.dim < 1 or self.components < 1:
            raise ConfigurationError("n_bags, dim and components must be positive")
        if self.dim <= self.components:
            raise ConfigurationError("dim must exceed the number of base components")

    def to_json(self) -> dict:
        return {**self.__dict__, "n_range": list(self.n_range)}


def _positive_count(n: int, rate: float) -> int:
    return min(n, max(1, int(round(rate * n))))


def generate_bags(params: GeneratorParams) -> Iterator[InstanceBag]:
    """Yield bags alternating negative / positive (50/50 overall).

    Instances come from one Gaussian mixture (equal weights, unit
    covariance) shared by all bags; in a positive bag a spatially contiguous block of instances is shifted by
    ``separation`` along a direction orthogonal to all mixture means.
    Instances are ordered row by row on a virtual patch grid.
    """
    params.validate()
    rng = np.random.default_rng(params.seed)
    C, K = params.dim, params.components
    means = rng.normal(0.0, 1.0, (K, C))
    q, _ = np.linalg.qr(means.T)
    direction = rng.normal(size=C)
    direction -= q @ (q.T @ direction)
    direction /= np.linalg.norm(direction)
    lo, hi = params.n_range
    width = len(str(params.n_bags - 1))
    for i in range(params.n_bags):
        label = i % 2
        n = int(rng.integers(lo, hi + 1))
        side = math.ceil(math.sqrt(n))
        cells = np.sort(rng.choice(side * side, size=n, replace=False))
        grid = np.stack([cells % side, cells // side], axis=1)
        coords = grid * PATCH_SIZE + PATCH_SIZE / 2
        x = means[rng.integers(K, size=n)] + rng.normal(size=(n, C))
        inst = np.zeros(n, dtype=np.int64)
        if label:
            k = _positive_count(n, params.pos_instance_rate)
            centre = grid[rng.integers(n)]
            d = ((grid - centre) ** 2).sum(1)
            inst[np.argsort(d, kind="stable")[:k]] = 1
            x[inst == 1] += params.separation * direction
        yield InstanceBag(f"bag{i:0{width}d}", x, bag_label_oracle(inst), coords, inst)


@dataclass
class ManifestEntry:
    path: str
    label: int
    split: str = "train"
    positive_instances: list[int] | None = None

    @property
    def id(self) -> str:
        return Path(self.path).stem


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    seed: int = 0
    dim: int = 0
    generator: dict = field(default_factory=dict)
    root: Path | None = None

    def to_json(self) -> dict:
        return {
            "seed": self.seed,
            "dim": self.dim,
            "generator": self.generator,
            "entries": [
                {"path": e.path, "label": e.label, "split": e.split,
                 **({"positive_instances": e.positive_instances} if e.positive_instances is not None else {})}
                for e in self.entries
            ],
        }

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1) + "\n")

    def split(self, name: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == name]

    def resolve(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() or self.root is None else self.root / p

    def load_split(self, name: str) -> list[InstanceBag]:
        bags = []
        for e in self.split(name):
            bag = load_bag(self.resolve(e), e.id)
            if bag.label != e.label:
                raise DataError(f"bag {e.id!r}: file label {bag.label} != manifest label {e.label}")
            if e.positive_instances is not None:
                inst = np.zeros(bag.n, dtype=np.int64)
                inst[e.positive_instances] = 1
                bag.instance_labels = inst
            bags.append(bag)
        return bags


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        record = json.loads(path.read_text())
    except OSError as exc:
        raise DataError(f"cannot read manifest {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {path} is not valid JSON: {exc}") from exc
    entries = [ManifestEntry(e["path"], int(e["label"]), e.get("split", "train"), e.get("positive_instances"))
               for e in record["entries"]]
    m = DatasetManifest(entries, record.get("seed", 0), record.get("dim", 0), record.get("generator", {}),
                        path.parent)
    for e in entries:
        if e.split not in SPLITS:
            raise DataError(f"bag {e.id!r}: unknown split {e.split!r}")
        if not m.resolve(e).is_file():
            raise DataError(f"manifest references missing bag file {e.path}")
    return m


def _largest_remainder(total: int, ratios: Sequence[float]) -> list[int]:
    raw = [total * r for r in ratios]
    counts = [int(math.floor(v + 1e-9)) for v in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: total - sum(counts)]:
        counts[i] += 1
    return counts


def split_dataset(manifest: DatasetManifest, ratios: Sequence[float] = DEFAULT_RATIOS,
                  seed: int = 0) -> DatasetManifest:
    """Stratified train/val/test assignment.

    Bags are shuffled within each label, interleaved in proportion to
    class size, and cut at largest-remainder counts, so every split's
    positive count is within one bag of proportional.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ConfigurationError(f"split ratios must be three non-negative numbers summing to 1, got {ratios}")
    counts = _largest_remainder(len(manifest.entries), ratios)
    empty = [s for s, c in zip(SPLITS, counts) if c == 0]
    if empty:
        raise ConfigurationError(f"split ratios {ratios} leave the {', '.join(empty)} split empty")
    rng = np.random.default_rng(seed)
    keyed = []
    for label in (0, 1):
        idx = [i for i, e in enumerate(manifest.entries) if e.label == label]
        perm = rng.permutation(len(idx))
        for rank, p in enumerate(perm):
            keyed.append(((rank + 0.5) / len(idx), label, idx[p]))
    keyed.sort()
    order = [i for _, _, i in keyed]
    entries = [ManifestEntry(e.path, e.label, e.split, e.positive_instances) for e in manifest.entries]
    start = 0
    for name, c in zip(SPLITS, counts):
        for i in order[start:start + c]:
            entries[i].split = name
        start += c
    return DatasetManifest(entries, manifest.seed, manifest.dim, manifest.generator, manifest.root)


def gen_synthetic_dataset(out_dir, params: GeneratorParams,
                          ratios: Sequence[float] = DEFAULT_RATIOS) -> DatasetManifest:
    """Write ``bags/*.mmilbag`` and ``manifest.json`` under ``out_dir``."""
    params.validate()
    out = Path(out_dir)
    (out / "bags").mkdir(parents=True, exist_ok=True)
    entries = []
    for bag in generate_bags(params):
        rel = f"bags/{bag.id}.mmilbag"
        save_bag(out / rel, bag)
        entries.append(ManifestEntry(rel, bag.label, "train", np.flatnonzero(bag.instance_labels).tolist()))
    manifest = DatasetManifest(entries, params.seed, params.dim, params.to_json(), out)
    manifest = split_dataset(manifest, ratios, params.seed)
    manifest.save(out / "manifest.json")
    return manifest
