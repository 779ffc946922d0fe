"""Datasets, proposals, augmentation, and the replay memory bank.

Three data sources share one index interface: a deterministic synthetic
shapes generator (each class is a shape/fill-pattern pair), a VOC-style
on-disk layout (images/, labels/, splits/*.txt, optional proposals/), and
the class-agnostic proposal files in the CAPR run-length format below.

CAPR proposal file, all integers little-endian:

    magic  b"CAPR" | version u16 | N u16 | H u16 | W u16
    per mask: valid u8 | rle_len u32 | payload of rle_len bytes

The payload is a sequence of u32 run lengths over the row-major flattened
mask, alternating zero-runs and one-runs starting with zeros; runs must sum
to H*W.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, DataError, ProposalFormatError

CAPR_MAGIC = b"CAPR"
CAPR_VERSION = 1

SHAPES = ("square", "disk", "triangle", "diamond", "plus", "ring")
PATTERNS = ("solid", "hstripes", "vstripes", "checker")


@dataclass
class LabeledImage:
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    label: np.ndarray  # H x W int32 class ids
    image_id: str

    def __post_init__(self):
        if self.image.shape[:2] != self.label.shape:
            raise DataError(
                f"{self.image_id}: image {self.image.shape[:2]} vs label {self.label.shape}"
            )


@dataclass
class ProposalSet:
    masks: np.ndarray  # N x H x W uint8 binary
    valid: np.ndarray  # N bool; padding masks are invalid and skipped by pooling

    def __post_init__(self):
        if self.masks.ndim != 3 or len(self.valid) != self.masks.shape[0]:
            raise DataError("proposal masks must be N x H x W with one valid flag per mask")

    @property
    def n(self) -> int:
        return self.masks.shape[0]


def class_inventory(label: np.ndarray) -> frozenset[int]:
    """Foreground class ids present in a label map."""
    return frozenset(int(c) for c in np.unique(label) if c != 0)


# ---------------------------------------------------------------------------
# Dataset index
# ---------------------------------------------------------------------------


@dataclass
class DatasetIndex:
    """Ordered image-id index with precomputed class inventories.

    Loading is lazy via the stored callables, so the same type serves both
    the in-memory synthetic dataset and the on-disk VOC layout.
    """

    image_ids: list[str]
    n_fg_classes: int
    splits: dict[str, list[str]] = field(default_factory=dict)
    _inventories: dict[str, frozenset[int]] = field(default_factory=dict)
    _load: Callable[[str], LabeledImage] | None = None
    _load_proposals: Callable[[str], ProposalSet] | None = None

    def inventory(self, image_id: str) -> frozenset[int]:
        return self._inventories[image_id]

    def load(self, image_id: str) -> LabeledImage:
        return self._load(image_id)

    def has_proposal_files(self) -> bool:
        return self._load_proposals is not None

    def proposals(self, image_id: str, pad_to: int) -> ProposalSet:
        """Stored proposals when the layout ships them, oracle ones otherwise."""
        if self._load_proposals is not None:
            return self._load_proposals(image_id)
        return oracle_proposals(self.load(image_id).label, pad_to)

    def subset(self, image_ids: list[str]) -> "DatasetIndex":
        return DatasetIndex(
            image_ids=list(image_ids),
            n_fg_classes=self.n_fg_classes,
            splits={},
            _inventories={i: self._inventories[i] for i in image_ids},
            _load=self._load,
            _load_proposals=self._load_proposals,
        )


# ---------------------------------------------------------------------------
# Synthetic shapes dataset
# ---------------------------------------------------------------------------


def _shape_mask(kind: str, size: int, cy: int, cx: int, r: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    dy, dx = yy - cy, xx - cx
    if kind == "square":
        return (np.abs(dy) <= r) & (np.abs(dx) <= r)
    if kind == "disk":
        return dy * dy + dx * dx <= r * r
    if kind == "triangle":
        return (dy >= -r) & (dy <= r) & (np.abs(dx) <= (dy + r) / 2)
    if kind == "diamond":
        return np.abs(dy) + np.abs(dx) <= r
    if kind == "plus":
        arm = max(1, r // 3)
        return ((np.abs(dx) <= arm) & (np.abs(dy) <= r)) | (
            (np.abs(dy) <= arm) & (np.abs(dx) <= r)
        )
    if kind == "ring":
        d2 = dy * dy + dx * dx
        return (d2 <= r * r) & (d2 >= (r / 2) ** 2)
    raise ValueError(kind)


def _pattern_fill(kind: str, size: int, hi: float, lo: float, period: int = 3) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    if kind == "solid":
        return np.full((size, size), hi, dtype=np.float32)
    if kind == "hstripes":
        return np.where((yy // period) % 2 == 0, hi, lo).astype(np.float32)
    if kind == "vstripes":
        return np.where((xx // period) % 2 == 0, hi, lo).astype(np.float32)
    if kind == "checker":
        return np.where((yy // period + xx // period) % 2 == 0, hi, lo).astype(np.float32)
    raise ValueError(kind)


def class_appearance(class_id: int) -> tuple[str, str]:
    """Deterministic (shape, pattern) pair for a 1-based class id."""
    idx = class_id - 1
    return SHAPES[idx % len(SHAPES)], PATTERNS[idx // len(SHAPES)]


def _render_image(seed: int, img_idx: int, n_fg_classes: int, size: int) -> LabeledImage:
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence([seed, img_idx])))

    base = rng.uniform(0.12, 0.28)
    fy, fx = rng.uniform(1.0, 3.0, size=2)
    phase_y, phase_x = rng.uniform(0, 2 * np.pi, size=2)
    yy, xx = np.mgrid[0:size, 0:size]
    texture = 0.05 * np.sin(2 * np.pi * fy * yy / size + phase_y) * np.sin(
        2 * np.pi * fx * xx / size + phase_x
    )
    gray = base + texture + rng.uniform(-0.04, 0.04, size=(size, size))
    image = np.stack([gray + rng.uniform(-0.02, 0.02) for _ in range(3)], axis=-1)
    label = np.zeros((size, size), dtype=np.int32)

    n_objects = int(rng.integers(1, 5))
    # First object cycles through the classes so every class keeps showing up
    # even in small datasets; the rest are uniform draws.
    classes = [1 + img_idx % n_fg_classes]
    classes += [int(c) for c in rng.integers(1, n_fg_classes + 1, size=n_objects - 1)]

    occupied = np.zeros((size, size), dtype=bool)
    for class_id in classes:
        shape, pattern = class_appearance(class_id)
        placed = False
        for _ in range(40):
            r = int(rng.integers(max(3, size // 10), max(4, size // 5)))
            cy = int(rng.integers(r + 1, size - r - 1))
            cx = int(rng.integers(r + 1, size - r - 1))
            mask = _shape_mask(shape, size, cy, cx, r)
            footprint = _shape_mask("disk" if shape == "ring" else shape, size, cy, cx, r + 1)
            if not (footprint & occupied).any():
                placed = True
                break
        if not placed:
            continue
        hi = rng.uniform(0.65, 0.9)
        lo = hi - rng.uniform(0.25, 0.35)
        fill = _pattern_fill(pattern, size, hi, lo)
        fill = fill + rng.uniform(-0.02, 0.02, size=(size, size))
        tint = rng.uniform(-0.05, 0.05, size=3)
        for ch in range(3):
            image[:, :, ch][mask] = fill[mask] + tint[ch]
        label[mask] = class_id
        occupied |= footprint

    image = np.clip(image, 0.0, 1.0).astype(np.float32)
    return LabeledImage(image=image, label=label, image_id=f"synth_{img_idx:05d}")


def generate_synthetic_dataset(
    seed: int, n_fg_classes: int, n_images: int, size: int
) -> DatasetIndex:
    """Deterministic shapes dataset; a pure function of its arguments.

    Every image holds 1-4 non-overlapping objects on a textured background,
    with pixel-exact label maps. Class c renders as `class_appearance(c)`.
    """
    if n_fg_classes < 2:
        raise ConfigError("need at least 2 foreground classes")
    if n_fg_classes > len(SHAPES) * len(PATTERNS):
        raise ConfigError(
            f"class vocabulary is {len(SHAPES) * len(PATTERNS)} shape/pattern pairs, "
            f"got n_fg_classes={n_fg_classes}"
        )
    if size < 32:
        raise ConfigError("size must be >= 32")

    samples = {
        f"synth_{i:05d}": _render_image(seed, i, n_fg_classes, size) for i in range(n_images)
    }
    return DatasetIndex(
        image_ids=sorted(samples),
        n_fg_classes=n_fg_classes,
        _inventories={k: class_inventory(v.label) for k, v in samples.items()},
        _load=lambda image_id: samples[image_id],
    )


# ---------------------------------------------------------------------------
# VOC-style layout
# ---------------------------------------------------------------------------


def export_voc_layout(
    index: DatasetIndex,
    root: str | Path,
    splits: dict[str, list[str]],
    pad_to: int = 100,
) -> None:
    """Write images/, labels/, splits/ and CAPR proposal files for an index."""
    root = Path(root)
    for sub in ("images", "labels", "splits", "proposals"):
        (root / sub).mkdir(parents=True, exist_ok=True)
    inventories = {}
    for image_id in index.image_ids:
        sample = index.load(image_id)
        img8 = (np.clip(sample.image, 0, 1) * 255).round().astype(np.uint8)
        Image.fromarray(img8, mode="RGB").save(root / "images" / f"{image_id}.png")
        Image.fromarray(sample.label.astype(np.uint8), mode="L").save(
            root / "labels" / f"{image_id}.png"
        )
        save_proposals(
            root / "proposals" / f"{image_id}.capr", index.proposals(image_id, pad_to)
        )
        inventories[image_id] = sorted(index.inventory(image_id))
    for name, ids in splits.items():
        (root / "splits" / f"{name}.txt").write_text("".join(f"{i}\n" for i in ids))
    (root / "inventories.json").write_text(json.dumps(inventories, sort_keys=True, indent=1))


def load_voc_layout(root: str | Path) -> DatasetIndex:
    """Index a VOC-style tree; inventories come from a cache file or a scan."""
    root = Path(root)
    split_files = sorted((root / "splits").glob("*.txt"))
    if not split_files:
        raise DataError(f"no split lists under {root / 'splits'}")
    splits = {
        f.stem: [line.strip() for line in f.read_text().splitlines() if line.strip()]
        for f in split_files
    }
    image_ids: list[str] = []
    for name in sorted(splits):
        image_ids += [i for i in splits[name] if i not in image_ids]

    missing = [
        i
        for i in image_ids
        if not (root / "labels" / f"{i}.png").exists() or not (root / "images" / f"{i}.png").exists()
    ]
    if missing:
        raise DataError(f"missing image or label files for: {', '.join(sorted(missing))}")

    cache = root / "inventories.json"
    if cache.exists():
        cached = json.loads(cache.read_text())
        inventories = {i: frozenset(cached[i]) for i in image_ids}
    else:
        inventories = {
            i: class_inventory(np.asarray(Image.open(root / "labels" / f"{i}.png")))
            for i in image_ids
        }

    n_fg = max((max(inv) for inv in inventories.values() if inv), default=0)

    def load(image_id: str) -> LabeledImage:
        img = np.asarray(Image.open(root / "images" / f"{image_id}.png").convert("RGB"))
        lab = np.asarray(Image.open(root / "labels" / f"{image_id}.png"))
        return LabeledImage(
            image=(img.astype(np.float32) / 255.0),
            label=lab.astype(np.int32),
            image_id=image_id,
        )

    load_props = None
    if (root / "proposals").is_dir():

        def load_props(image_id: str) -> ProposalSet:
            return load_proposals(root / "proposals" / f"{image_id}.capr")

    return DatasetIndex(
        image_ids=image_ids,
        n_fg_classes=n_fg,
        splits=splits,
        _inventories=inventories,
        _load=load,
        _load_proposals=load_props,
    )


# ---------------------------------------------------------------------------
# Proposals
# ---------------------------------------------------------------------------


def oracle_proposals(label: np.ndarray, pad_to: int = 100) -> ProposalSet:
    """Connected components of each class region, one background mask, padding.

    A stand-in for a pretrained class-agnostic mask generator: exact object
    masks read off the label map. Padded entries are flagged invalid so that
    pooling and the proposal-path prediction skip them.
    """
    label = np.asarray(label)
    masks = []
    for class_id in sorted(class_inventory(label)):
        comps, n_comp = ndimage.label(label == class_id)
        for k in range(1, n_comp + 1):
            masks.append((comps == k).astype(np.uint8))
    bg = (label == 0).astype(np.uint8)
    if bg.any() or not masks:
        masks.append(bg)
    if len(masks) > pad_to:
        raise DataError(f"{len(masks)} components exceed pad_to={pad_to}")
    n_real = len(masks)
    while len(masks) < pad_to:
        masks.append(np.zeros_like(label, dtype=np.uint8))
    valid = np.arange(pad_to) < n_real
    return ProposalSet(masks=np.stack(masks), valid=valid)


def encode_proposals(proposals: ProposalSet) -> bytes:
    n, h, w = proposals.masks.shape
    out = [CAPR_MAGIC, struct.pack("<HHHH", CAPR_VERSION, n, h, w)]
    for i in range(n):
        flat = proposals.masks[i].reshape(-1).astype(np.uint8)
        # Run boundaries; prepend a zero-run so runs always start with zeros.
        change = np.flatnonzero(np.diff(flat)) + 1
        bounds = np.concatenate(([0], change, [flat.size]))
        runs = np.diff(bounds).astype(np.uint64)
        if flat[0] == 1:
            runs = np.concatenate(([0], runs))
        payload = runs.astype("<u4").tobytes()
        out.append(struct.pack("<BI", int(proposals.valid[i]), len(payload)))
        out.append(payload)
    return b"".join(out)


def decode_proposals(data: bytes) -> ProposalSet:
    if data[:4] != CAPR_MAGIC:
        raise ProposalFormatError("bad magic", 0)
    if len(data) < 12:
        raise ProposalFormatError("truncated header", len(data))
    version, n, h, w = struct.unpack_from("<HHHH", data, 4)
    if version != CAPR_VERSION:
        raise ProposalFormatError(f"unsupported version {version}", 4)
    total = h * w
    masks = np.zeros((n, total), dtype=np.uint8)
    valid = np.zeros(n, dtype=bool)
    offset = 12
    for i in range(n):
        if offset + 5 > len(data):
            raise ProposalFormatError(f"truncated record for mask {i}", offset)
        flag, rle_len = struct.unpack_from("<BI", data, offset)
        offset += 5
        if offset + rle_len > len(data) or rle_len % 4 != 0:
            raise ProposalFormatError(f"bad payload length for mask {i}", offset)
        runs = np.frombuffer(data, dtype="<u4", count=rle_len // 4, offset=offset)
        if int(runs.sum()) != total:
            raise ProposalFormatError(f"runs of mask {i} sum to {runs.sum()}, want {total}", offset)
        if len(runs) > 1:  # single run means an all-zero mask, already in place
            values = (np.arange(len(runs), dtype=np.uint8) % 2).astype(np.uint8)
            masks[i] = np.repeat(values, runs.astype(np.int64))
        valid[i] = bool(flag)
        offset += rle_len
    if offset != len(data):
        raise ProposalFormatError("trailing bytes after last mask", offset)
    return ProposalSet(masks=masks.reshape(n, h, w), valid=valid)


def save_proposals(path: str | Path, proposals: ProposalSet) -> None:
    Path(path).write_bytes(encode_proposals(proposals))


def load_proposals(path: str | Path) -> ProposalSet:
    return decode_proposals(Path(path).read_bytes())


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------


def augment(
    sample: LabeledImage,
    proposals: ProposalSet,
    rng: np.random.Generator,
    crop_size: int,
    force_scale: float | None = None,
    force_flip: bool | None = None,
    force_crop: tuple[int, int] | None = None,
) -> tuple[LabeledImage, ProposalSet]:
    """Random scale in [0.5, 2.0], horizontal flip (p=.5), crop/pad to size.

    One geometric transform for image, label, and every proposal mask: the
    image is resized bilinearly, label and masks by nearest neighbour, and
    short sides are padded with background before the random crop. The
    `force_*` hooks pin individual draws without disturbing the rng call
    order, which keeps forced and free runs aligned.
    """
    scale = float(rng.uniform(0.5, 2.0))
    flip = bool(rng.random() < 0.5)
    if force_scale is not None:
        scale = force_scale
    if force_flip is not None:
        flip = force_flip

    h, w = sample.label.shape
    nh, nw = max(1, round(h * scale)), max(1, round(w * scale))

    img = torch.from_numpy(sample.image).permute(2, 0, 1).unsqueeze(0)
    img = F.interpolate(img, size=(nh, nw), mode="bilinear", align_corners=False)
    lab = torch.from_numpy(sample.label.astype(np.float32))[None, None]
    lab = F.interpolate(lab, size=(nh, nw), mode="nearest-exact")
    msk = torch.from_numpy(proposals.masks.astype(np.float32)).unsqueeze(0)
    msk = F.interpolate(msk, size=(nh, nw), mode="nearest-exact")

    if flip:
        img, lab, msk = img.flip(-1), lab.flip(-1), msk.flip(-1)

    pad_h, pad_w = max(0, crop_size - nh), max(0, crop_size - nw)
    if pad_h or pad_w:
        img = F.pad(img, (0, pad_w, 0, pad_h), value=0.0)
        lab = F.pad(lab, (0, pad_w, 0, pad_h), value=0.0)
        msk = F.pad(msk, (0, pad_w, 0, pad_h), value=0.0)

    ph, pw = lab.shape[-2:]
    top = int(rng.integers(0, ph - crop_size + 1))
    left = int(rng.integers(0, pw - crop_size + 1))
    if force_crop is not None:
        top, left = force_crop

    img = img[0, :, top : top + crop_size, left : left + crop_size]
    lab = lab[0, 0, top : top + crop_size, left : left + crop_size]
    msk = msk[0, :, top : top + crop_size, left : left + crop_size]

    out_sample = LabeledImage(
        image=img.permute(1, 2, 0).numpy().copy(),
        label=lab.numpy().astype(np.int32),
        image_id=sample.image_id,
    )
    out_props = ProposalSet(masks=msk.numpy().astype(np.uint8), valid=proposals.valid.copy())
    return out_sample, out_props


# ---------------------------------------------------------------------------
# Replay memory
# ---------------------------------------------------------------------------


@dataclass
class ReplayEntry:
    sample: LabeledImage
    proposals: ProposalSet
    origin_step: int
    tag_class: int


@dataclass
class ReplayMemory:
    capacity: int
    entries: list[ReplayEntry] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.entries)

    def per_class_counts(self) -> dict[int, int]:
        counts: dict[int, int] = {}
        for e in self.entries:
            counts[e.tag_class] = counts.get(e.tag_class, 0) + 1
        return counts


def class_quotas(capacity: int, seen_classes: list[int]) -> dict[int, int]:
    """Split capacity evenly across classes, remainder to the lowest ids."""
    n = len(seen_classes)
    base, rem = divmod(capacity, n)
    return {c: base + (1 if i < rem else 0) for i, c in enumerate(sorted(seen_classes))}


def update_replay_memory(
    memory: ReplayMemory,
    step_samples: list[tuple[LabeledImage, ProposalSet]],
    current_classes: list[int],
    seen_classes: list[int],
    step: int,
    rng: np.random.Generator,
) -> ReplayMemory:
    """Class-balanced refresh at the end of a step.

    Capacity is divided evenly across the seen classes; each new sample is
    tagged with its least-represented current class and buckets are filled
    (or trimmed, when quotas shrink) by uniform sampling.
    """
    if memory.capacity <= 0:
        raise ConfigError("replay enabled with capacity 0")
    quotas = class_quotas(memory.capacity, seen_classes)

    buckets: dict[int, list[ReplayEntry]] = {c: [] for c in sorted(seen_classes)}
    for entry in memory.entries:
        buckets.setdefault(entry.tag_class, []).append(entry)

    candidates: dict[int, list[ReplayEntry]] = {c: [] for c in sorted(seen_classes)}
    for sample, proposals in step_samples:
        present = sorted(class_inventory(sample.label) & set(current_classes))
        if not present:
            continue
        tag = min(present, key=lambda c: (len(buckets[c]) + len(candidates[c]), c))
        candidates[tag].append(ReplayEntry(sample, proposals, step, tag))

    new_entries: list[ReplayEntry] = []
    for c in sorted(seen_classes):
        quota = quotas[c]
        kept = buckets.get(c, [])
        if len(kept) > quota:
            keep_idx = sorted(rng.choice(len(kept), size=quota, replace=False).tolist())
            kept = [kept[i] for i in keep_idx]
        need = quota - len(kept)
        pool = candidates.get(c, [])
        if need > 0 and pool:
            if len(pool) > need:
                take_idx = sorted(rng.choice(len(pool), size=need, replace=False).tolist())
                pool = [pool[i] for i in take_idx]
            kept = kept + pool
        new_entries.extend(kept)

    return ReplayMemory(capacity=memory.capacity, entries=new_entries)


def sample_replay(
    memory: ReplayMemory, k: int, rng: np.random.Generator
) -> list[ReplayEntry]:
    if not memory.entries or k <= 0:
        return []
    k = min(k, len(memory.entries))
    idx = rng.choice(len(memory.entries), size=k, replace=False)
    return [memory.entries[int(i)] for i in idx]
