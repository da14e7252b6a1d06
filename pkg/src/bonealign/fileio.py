"""Stack manifests, grayscale images, displacement-field files and CSV output.

Manifest (JSON)::

    {"modality": "MR", "layer_gap_mm": 5.0,
     "slices": ["img_000.png", ...], "labels": ["lab_000.png", null, ...]}

Paths are relative to the manifest's directory.

Field file (little-endian)::

    b"DFLD" | uint32 width | uint32 height | height*width*(dx, dy) float32, row-major
"""

from __future__ import annotations

import csv
import json
import struct
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

from .regengine import DisplacementField
from .stack import ImageStack, LabelMask, Modality

FIELD_MAGIC = b"DFLD"

CORRESPONDENCE_COLUMNS = ("mr_index", "ct_index_frac", "sim")
ALIGN_SUMMARY_COLUMNS = (
    "n_pairs", "mean_sim", "median_sim", "anchor_mr", "anchor_ct", "anchor_sim", "gamma", "blend", "orientation",
)
METRIC_COLUMNS = (
    "pair", "mr_index", "ct_index_frac", "dsc", "jaccard", "hd_px", "ssim", "sim_score",
    "jd_std", "jd_nonpos_frac", "loss_initial", "loss_final",
)
SWEEP_COLUMNS = ("gamma", "mean_sim", "matched_domains", "mean_domains_per_pair", "empty_images", "n_pairs")


class InputError(Exception):
    exit_code = 2


class ManifestError(InputError):
    exit_code = 2


class MissingFileError(InputError):
    exit_code = 4


class DimensionError(InputError):
    exit_code = 5


def read_image(path) -> np.ndarray:
    """Read a grayscale image and normalise it to [0, 1] by its bit depth."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"missing file: {path}")
    try:
        with Image.open(path) as im:
            if im.mode in ("RGB", "RGBA", "P", "LA"):
                im = im.convert("L")
            arr = np.asarray(im)
    except OSError as exc:
        raise InputError(f"cannot read image {path}: {exc}") from exc
    if arr.dtype == np.uint8 or arr.dtype == np.bool_:
        return arr.astype(np.float64) / (1.0 if arr.dtype == np.bool_ else 255.0)
    if arr.dtype in (np.uint16, np.int32, np.uint32) or arr.dtype.kind in "iu":
        return np.clip(arr.astype(np.float64) / 65535.0, 0.0, 1.0)
    if arr.dtype.kind == "f":
        return np.clip(arr.astype(np.float64), 0.0, 1.0)
    raise InputError(f"unsupported pixel type {arr.dtype} in {path}")


def write_image(path, img, bits: int = 16):
    arr = np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0)
    if bits == 16:
        out = Image.fromarray(np.round(arr * 65535.0).astype(np.uint16))
    elif bits == 8:
        out = Image.fromarray(np.round(arr * 255.0).astype(np.uint8))
    else:
        raise ValueError("bits must be 8 or 16")
    out.save(path)


def read_mask(path) -> LabelMask:
    return LabelMask(read_image(path) >= 0.5)


def write_mask(path, mask):
    Image.fromarray(np.asarray(mask, dtype=bool).astype(np.uint8) * 255).save(path)


def quantize16(img) -> np.ndarray:
    """Values as they come back from a 16-bit image file."""
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0, 1) * 65535.0) / 65535.0


def _manifest_dict(path: Path) -> dict:
    if not path.is_file():
        raise MissingFileError(f"missing manifest: {path}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"malformed manifest {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ManifestError(f"malformed manifest {path}: top level must be an object")
    for key in ("modality", "layer_gap_mm", "slices"):
        if key not in data:
            raise ManifestError(f"malformed manifest {path}: missing '{key}'")
    if data["modality"] not in ("MR", "CT"):
        raise ManifestError(f"malformed manifest {path}: modality must be 'MR' or 'CT'")
    gap = data["layer_gap_mm"]
    if not isinstance(gap, (int, float)) or isinstance(gap, bool) or not gap > 0:
        raise ManifestError(f"malformed manifest {path}: layer_gap_mm must be a positive number")
    slices = data["slices"]
    labels = data.get("labels", [None] * len(slices) if isinstance(slices, list) else None)
    if not isinstance(slices, list) or not slices or not all(isinstance(s, str) for s in slices):
        raise ManifestError(f"malformed manifest {path}: slices must be a non-empty list of paths")
    if not isinstance(labels, list) or len(labels) != len(slices):
        raise ManifestError(f"malformed manifest {path}: labels list must match slices in length")
    if not all(lab is None or isinstance(lab, str) for lab in labels):
        raise ManifestError(f"malformed manifest {path}: labels must be paths or null")
    data["labels"] = labels
    return data


def load_stack(manifest_path) -> ImageStack:
    """Load and validate a stack from its JSON manifest."""
    path = Path(manifest_path)
    data = _manifest_dict(path)
    root = path.parent
    slices, labels = [], []
    shape = None
    for rel, lab_rel in zip(data["slices"], data["labels"]):
        img = read_image(root / rel)
        if img.ndim != 2:
            raise DimensionError(f"{root / rel}: expected a 2D grayscale image")
        if shape is None:
            shape = img.shape
        elif img.shape != shape:
            raise DimensionError(f"{root / rel}: dimensions {img.shape} differ from {shape}")
        slices.append(img)
        if lab_rel is None:
            labels.append(None)
            continue
        lab = read_image(root / lab_rel)
        if lab.shape != shape:
            raise DimensionError(f"{root / lab_rel}: label dimensions {lab.shape} differ from {shape}")
        labels.append(lab >= 0.5)
    return ImageStack(Modality(data["modality"]), float(data["layer_gap_mm"]), tuple(slices), tuple(labels))


def write_stack(stack: ImageStack, directory, prefix: str = "") -> Path:
    """Write slices (16-bit PNG), labels (8-bit PNG) and a manifest; return the manifest path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    slice_names, label_names = [], []
    for i, (sl, lab) in enumerate(zip(stack.slices, stack.labels)):
        name = f"{prefix}slice_{i:03d}.png"
        write_image(directory / name, sl)
        slice_names.append(name)
        if lab is None:
            label_names.append(None)
        else:
            lname = f"{prefix}label_{i:03d}.png"
            write_mask(directory / lname, lab)
            label_names.append(lname)
    manifest = {
        "modality": stack.modality.value,
        "layer_gap_mm": stack.layer_gap_mm,
        "slices": slice_names,
        "labels": label_names,
    }
    out = directory / f"{prefix}manifest.json"
    out.write_text(json.dumps(manifest, indent=2) + "\n")
    return out


def write_field(path, field: DisplacementField):
    u = np.ascontiguousarray(field.u, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FIELD_MAGIC)
        fh.write(struct.pack("<II", field.width, field.height))
        fh.write(u.tobytes(order="C"))


def read_field(path) -> DisplacementField:
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"missing field file: {path}")
    raw = path.read_bytes()
    if raw[:4] != FIELD_MAGIC or len(raw) < 12:
        raise InputError(f"{path}: not a displacement-field file")
    width, height = struct.unpack("<II", raw[4:12])
    expected = 12 + width * height * 2 * 4
    if len(raw) != expected:
        raise InputError(f"{path}: expected {expected} bytes, found {len(raw)}")
    u = np.frombuffer(raw, dtype="<f4", offset=12).reshape(height, width, 2)
    return DisplacementField(u.astype(np.float64))


def fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(path, columns: Sequence[str], rows: Iterable[Sequence]):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([fmt(v) for v in row])


def read_correspondence(path):
    """Read ``(mr_index, ct_index_frac, sim)`` records from a correspondence CSV."""
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"missing correspondence file: {path}")
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or any(c not in reader.fieldnames for c in CORRESPONDENCE_COLUMNS):
            raise ManifestError(f"{path}: expected columns {', '.join(CORRESPONDENCE_COLUMNS)}")
        try:
            return [(int(r["mr_index"]), float(r["ct_index_frac"]), float(r["sim"])) for r in reader]
        except ValueError as exc:
            raise ManifestError(f"{path}: {exc}") from exc
