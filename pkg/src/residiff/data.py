"""Synthetic phantom corpus, mask degradations, splits, and the on-disk format.

Phantoms are two-channel images containing one to three elliptical
lesions, each with a brighter concentric core.  Channel 0 brightens the
whole lesion, channel 1 only the core, so the two channels carry distinct
contrast the way different acquisition modalities would.  Masks are the
union of the lesion ellipses.

Tensors are stored one per file: a little-endian header (magic
``NNDMT\\0``, u16 format version, u16 rank, rank x u32 dims) followed by
row-major float32 data.  The manifest is UTF-8 JSON.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .errors import DataError

TENSOR_MAGIC = b"NNDMT\x00"
TENSOR_VERSION = 1
MANIFEST_VERSION = 1
DEGRADE_MODES = ("erode", "boundary_noise", "blur_threshold")

_CROSS = ndimage.generate_binary_structure(2, 1)  # 4-neighborhood


@dataclass
class PhantomCase:
    id: str
    volume: np.ndarray  # (2, H, W) float32, normalized per channel
    mask: np.ndarray    # (1, H, W) float32 in {0, 1}
    provenance: dict | None = None


@dataclass
class ManifestCase:
    id: str
    img: str
    msk: str
    img_shape: tuple
    msk_shape: tuple
    split: str
    provenance: dict | None = None


@dataclass
class DatasetManifest:
    version: int
    seed: int
    cases: list = field(default_factory=list)

    def split_ids(self, split: str) -> list:
        return [c.id for c in self.cases if c.split == split]


# ---------------------------------------------------------------------------
# generation


def rasterize_ellipses(ellipses: list, hw: int) -> tuple[np.ndarray, np.ndarray]:
    """Render lesion and core masks (bool HxW) from ellipse parameter dicts."""
    yy, xx = np.mgrid[0:hw, 0:hw].astype(np.float64)
    lesion = np.zeros((hw, hw), dtype=bool)
    core = np.zeros((hw, hw), dtype=bool)
    for e in ellipses:
        dy, dx = yy - e["cy"], xx - e["cx"]
        c, s = np.cos(e["theta"]), np.sin(e["theta"])
        u = dx * c + dy * s
        v = -dx * s + dy * c
        lesion |= (u / e["a"]) ** 2 + (v / e["b"]) ** 2 <= 1.0
        ca, cb = e["a"] * e["core_scale"], e["b"] * e["core_scale"]
        core |= (u / ca) ** 2 + (v / cb) ** 2 <= 1.0
    return lesion, core


def generate_phantoms(n: int, hw: int, seed: int, noise_sigma: float = 0.3) -> list[PhantomCase]:
    """Deterministically generate `n` phantom cases of extent hw x hw.

    Every case is fully determined by (seed, case index); sub-seeds are
    independent so generation could fan out across workers.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if hw < 16:
        raise ValueError(f"hw must be >= 16, got {hw}")
    if noise_sigma < 0:
        raise ValueError(f"noise_sigma must be >= 0, got {noise_sigma}")

    cases = []
    for i in range(n):
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), i]))
        k = int(rng.integers(1, 4))
        ellipses = []
        for _ in range(k):
            # semi-axes scale with hw so that lesion area stays between
            # roughly 2% and 34% of the image over 1-3 ellipses
            a = float(rng.uniform(0.08, 0.19) * hw)
            b = float(rng.uniform(0.08, 0.19) * hw)
            margin = max(a, b) + 1.0
            ellipses.append(
                {
                    "cy": float(rng.uniform(margin, hw - margin)),
                    "cx": float(rng.uniform(margin, hw - margin)),
                    "a": a,
                    "b": b,
                    "theta": float(rng.uniform(0.0, np.pi)),
                    "core_scale": float(rng.uniform(0.35, 0.6)),
                    "lesion_gain": float(rng.uniform(1.2, 2.0)),
                    "core_gain": float(rng.uniform(1.2, 2.0)),
                }
            )
        lesion, core = rasterize_ellipses(ellipses, hw)

        ch0 = np.zeros((hw, hw), dtype=np.float64)
        ch1 = np.zeros((hw, hw), dtype=np.float64)
        for e in ellipses:
            el_lesion, el_core = rasterize_ellipses([e], hw)
            ch0 = np.maximum(ch0, e["lesion_gain"] * el_lesion)
            ch1 = np.maximum(ch1, e["core_gain"] * el_core)
        volume = np.stack([ch0, ch1])
        volume += rng.normal(0.0, noise_sigma, size=volume.shape)

        mean = volume.mean(axis=(1, 2), keepdims=True)
        std = volume.std(axis=(1, 2), keepdims=True)
        volume = (volume - mean) / np.maximum(std, 1e-12)

        cases.append(
            PhantomCase(
                id=f"case_{i:04d}",
                volume=volume.astype(np.float32),
                mask=lesion[None].astype(np.float32),
                provenance={"ellipses": ellipses, "noise_sigma": float(noise_sigma)},
            )
        )
    return cases


# ---------------------------------------------------------------------------
# degradations


def _as_binary_2d(mask: np.ndarray) -> np.ndarray:
    m = np.asarray(mask)
    if m.ndim == 3 and m.shape[0] == 1:
        m = m[0]
    if m.ndim != 2:
        raise ValueError(f"expected a single-channel 2D mask, got shape {m.shape}")
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("mask must be exactly binary")
    if not m.any():
        raise ValueError("mask has no foreground to degrade")
    return m.astype(bool)


def degrade_mask(mask: np.ndarray, mode: str, magnitude: int, seed: int) -> np.ndarray:
    """Produce an imperfect soft mask from a binary one.

    erode            4-neighborhood erosion, `magnitude` iterations.
    boundary_noise   flip pixels inside the +-magnitude boundary band.
    blur_threshold   Gaussian blur (sigma = magnitude), keep values >= 0.72.

    The result lives in [0, 1] and its 0.5-binarization differs from the
    input, so the residual against the original is nonzero.
    """
    if mode not in DEGRADE_MODES:
        raise ValueError(f"mode must be one of {DEGRADE_MODES}, got {mode!r}")
    if magnitude < 1:
        raise ValueError(f"magnitude must be >= 1, got {magnitude}")
    m = _as_binary_2d(mask)
    shape_3d = np.asarray(mask).ndim == 3

    if mode == "erode":
        out = ndimage.binary_erosion(m, structure=_CROSS, iterations=magnitude, border_value=0)
        out = out.astype(np.float32)
    elif mode == "boundary_noise":
        rng = np.random.default_rng(seed)
        band = ndimage.binary_dilation(m, structure=_CROSS, iterations=magnitude) & ~ndimage.binary_erosion(
            m, structure=_CROSS, iterations=magnitude, border_value=0
        )
        flips = band & (rng.random(m.shape) < 0.35)
        if not flips.any():
            ys, xs = np.nonzero(band)
            flips[ys[0], xs[0]] = True
        out = (m ^ flips).astype(np.float32)
    else:
        # keep-threshold sits above the blurred value of a straight-edge
        # boundary pixel (~0.70), so at least one boundary layer always erodes
        blurred = ndimage.gaussian_filter(m.astype(np.float64), sigma=magnitude, mode="constant", cval=0.0)
        out = np.where(blurred >= 0.72, blurred, 0.0).astype(np.float32)

    out = np.clip(out, 0.0, 1.0)
    return out[None] if shape_3d else out


def stress_degrade(mask: np.ndarray, seed: int) -> np.ndarray:
    """Erosion (magnitude 2) followed by boundary noise; the refiner stress baseline."""
    eroded = degrade_mask(mask, "erode", 2, seed)
    return degrade_mask(eroded, "boundary_noise", 1, seed)


# ---------------------------------------------------------------------------
# splits


def split_dataset(cases: list[PhantomCase], fractions: tuple, seed: int) -> DatasetManifest:
    """Shuffle by seed, then partition into train/val/test by the given fractions."""
    if len(fractions) != 3 or any(f <= 0 for f in fractions):
        raise ValueError(f"fractions must be three positive numbers, got {fractions}")
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must sum to 1, got {sum(fractions)}")

    n = len(cases)
    counts = [int(np.floor(f * n)) for f in fractions]
    remainders = [f * n - c for f, c in zip(fractions, counts)]
    for _ in range(n - sum(counts)):
        j = int(np.argmax(remainders))
        counts[j] += 1
        remainders[j] = -1.0
    if any(c == 0 for c in counts):
        raise ValueError(f"too few cases ({n}) for nonempty splits with fractions {fractions}")

    order = np.random.default_rng(seed).permutation(n)
    assignment = {}
    pos = 0
    for split, count in zip(("train", "val", "test"), counts):
        for idx in order[pos : pos + count]:
            assignment[cases[idx].id] = split
        pos += count

    manifest = DatasetManifest(version=MANIFEST_VERSION, seed=int(seed))
    for case in cases:
        manifest.cases.append(
            ManifestCase(
                id=case.id,
                img=f"tensors/{case.id}.img",
                msk=f"tensors/{case.id}.msk",
                img_shape=tuple(case.volume.shape),
                msk_shape=tuple(case.mask.shape),
                split=assignment[case.id],
                provenance=case.provenance,
            )
        )
    return manifest


def split_cases(manifest: DatasetManifest, cases: list[PhantomCase]) -> dict:
    """Group cases by their manifest split assignment, preserving order."""
    by_id = {c.id: c for c in cases}
    out = {"train": [], "val": [], "test": []}
    for entry in manifest.cases:
        out[entry.split].append(by_id[entry.id])
    return out


# ---------------------------------------------------------------------------
# on-disk format


def write_tensor(f, arr: np.ndarray) -> None:
    """Serialize a float32 array: magic, version, rank, dims, row-major data."""
    arr = np.ascontiguousarray(arr, dtype="<f4")
    f.write(TENSOR_MAGIC)
    f.write(struct.pack("<HH", TENSOR_VERSION, arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(arr.tobytes())


def read_tensor(f) -> np.ndarray:
    """Inverse of write_tensor; raises DataError on any structural defect."""
    magic = f.read(len(TENSOR_MAGIC))
    if magic != TENSOR_MAGIC:
        raise DataError(f"bad tensor magic {magic!r}")
    head = f.read(4)
    if len(head) != 4:
        raise DataError("truncated tensor header")
    version, rank = struct.unpack("<HH", head)
    if version != TENSOR_VERSION:
        raise DataError(f"unsupported tensor format version {version}")
    dims_raw = f.read(4 * rank)
    if len(dims_raw) != 4 * rank:
        raise DataError("truncated tensor dims")
    dims = struct.unpack(f"<{rank}I", dims_raw)
    count = int(np.prod(dims)) if rank else 1
    payload = f.read(4 * count)
    if len(payload) != 4 * count:
        raise DataError(f"truncated tensor payload: expected {4 * count} bytes, got {len(payload)}")
    if f.read(1) != b"":
        raise DataError("trailing bytes after tensor payload")
    return np.frombuffer(payload, dtype="<f4").reshape(dims).copy()


def _tensor_to_path(path: Path, arr: np.ndarray) -> None:
    with open(path, "wb") as f:
        write_tensor(f, arr)


def _tensor_from_path(path: Path) -> np.ndarray:
    with open(path, "rb") as f:
        return read_tensor(f)


def manifest_to_dict(manifest: DatasetManifest) -> dict:
    return {
        "version": manifest.version,
        "seed": manifest.seed,
        "cases": [
            {
                "id": c.id,
                "img": c.img,
                "msk": c.msk,
                "img_shape": list(c.img_shape),
                "msk_shape": list(c.msk_shape),
                "split": c.split,
                "provenance": c.provenance,
            }
            for c in manifest.cases
        ],
    }


def manifest_from_dict(d: dict) -> DatasetManifest:
    version = d.get("version")
    if version != MANIFEST_VERSION:
        raise DataError(f"unsupported manifest version {version}")
    manifest = DatasetManifest(version=version, seed=int(d["seed"]))
    for c in d["cases"]:
        manifest.cases.append(
            ManifestCase(
                id=c["id"],
                img=c["img"],
                msk=c["msk"],
                img_shape=tuple(c["img_shape"]),
                msk_shape=tuple(c["msk_shape"]),
                split=c["split"],
                provenance=c.get("provenance"),
            )
        )
    return manifest


def write_dataset(manifest: DatasetManifest, cases: list[PhantomCase], out_dir) -> None:
    """Write manifest.json plus one .img/.msk tensor pair per case."""
    out = Path(out_dir)
    (out / "tensors").mkdir(parents=True, exist_ok=True)
    by_id = {c.id: c for c in cases}
    for entry in manifest.cases:
        case = by_id[entry.id]
        _tensor_to_path(out / entry.img, case.volume)
        _tensor_to_path(out / entry.msk, case.mask)
    with open(out / "manifest.json", "w", encoding="utf-8") as f:
        json.dump(manifest_to_dict(manifest), f, indent=1)


def read_dataset(dataset_dir) -> tuple[DatasetManifest, list[PhantomCase]]:
    """Load a dataset directory, verifying shapes against the manifest."""
    root = Path(dataset_dir)
    manifest_path = root / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no manifest.json under {root}")
    with open(manifest_path, encoding="utf-8") as f:
        manifest = manifest_from_dict(json.load(f))

    cases = []
    for entry in manifest.cases:
        try:
            volume = _tensor_from_path(root / entry.img)
            mask = _tensor_from_path(root / entry.msk)
        except FileNotFoundError as exc:
            raise DataError(f"case '{entry.id}': missing tensor file {exc.filename}") from exc
        except DataError as exc:
            raise DataError(f"case '{entry.id}': {exc}") from exc
        if volume.shape != entry.img_shape:
            raise DataError(f"case '{entry.id}': image shape {volume.shape} != declared {entry.img_shape}")
        if mask.shape != entry.msk_shape:
            raise DataError(f"case '{entry.id}': mask shape {mask.shape} != declared {entry.msk_shape}")
        cases.append(PhantomCase(id=entry.id, volume=volume, mask=mask, provenance=entry.provenance))
    return manifest, cases


def cases_from_arrays(volumes, masks, ids) -> list[PhantomCase]:
    """Importer entry point: wrap externally loaded arrays as dataset cases.

    Callers are responsible for decoding whatever source format the arrays
    came from; this only validates shape compatibility and binarity.
    """
    if not (len(volumes) == len(masks) == len(ids)):
        raise ValueError("volumes, masks, and ids must have equal lengths")
    cases = []
    for volume, mask, case_id in zip(volumes, masks, ids):
        volume = np.asarray(volume, dtype=np.float32)
        mask = np.asarray(mask, dtype=np.float32)
        if volume.ndim != 3 or mask.ndim != 3:
            raise ValueError(f"case '{case_id}': expected (C, H, W) arrays")
        if volume.shape[1:] != mask.shape[1:]:
            raise ValueError(f"case '{case_id}': spatial dims differ: {volume.shape} vs {mask.shape}")
        if not np.all((mask == 0) | (mask == 1)):
            raise ValueError(f"case '{case_id}': mask must be exactly binary")
        cases.append(PhantomCase(id=str(case_id), volume=volume, mask=mask, provenance=None))
    return cases
