"""Manifests, PNG image I/O, checkpoint containers and loss traces.

Checkpoint container layout (all integers little-endian)::

    offset 0   8 bytes   magic b"GVCKPT\\r\\n"
    offset 8   uint32    container version (1)
    offset 12  uint64    header length H in bytes
    offset 20  H bytes   UTF-8 JSON header
    offset 20+H          payload: tensors back to back, row-major float32

The header lists every tensor as ``{"name", "shape", "offset", "nbytes"}``
with offsets relative to the payload start, plus ``payload_bytes`` and a
CRC-32 of the payload.
"""
from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from dataclasses import asdict, is_dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .core_types import (
    CLASSES,
    GROUND_SIDE,
    OVERHEAD_SIDE,
    PairedSample,
    check_unique_ids,
    denormalize,
    normalize,
)

MANIFEST_VERSION = 1
MAGIC = b"GVCKPT\r\n"
CONTAINER_VERSION = 1
CHECKPOINT_FORMAT = 1
_PREFIX = struct.Struct("<8sIQ")


class ManifestError(ValueError):
    def __init__(self, message, index=None):
        super().__init__(message if index is None else f"manifest entry {index}: {message}")
        self.index = index


class CheckpointFormatError(ValueError):
    pass


# --- images ------------------------------------------------------------------

def write_png(path, pixels):
    """Write a [-1, 1] float image (or uint8 image) as an RGB PNG."""
    pixels = np.asarray(pixels)
    data = pixels if pixels.dtype == np.uint8 else denormalize(pixels)
    Image.fromarray(data, mode="RGB").save(path, format="PNG", optimize=False)


def read_png(path):
    with Image.open(path) as im:
        if im.mode != "RGB":
            im = im.convert("RGB")
        return np.asarray(im, dtype=np.uint8)


# --- manifests ---------------------------------------------------------------

def save_dataset(samples, out_dir):
    """Write PNGs plus ``manifest.json`` under ``out_dir``; returns the manifest path."""
    out = Path(out_dir)
    (out / "overhead").mkdir(parents=True, exist_ok=True)
    (out / "ground").mkdir(parents=True, exist_ok=True)
    check_unique_ids(samples)
    entries = []
    for s in samples:
        o_rel = f"overhead/{s.location_id}.png"
        g_rel = f"ground/{s.location_id}.png"
        write_png(out / o_rel, s.overhead)
        write_png(out / g_rel, s.ground)
        entry = {"location_id": s.location_id, "overhead_path": o_rel, "ground_path": g_rel}
        if s.label is not None:
            entry["label"] = s.label
        entries.append(entry)
    path = out / "manifest.json"
    path.write_text(json.dumps({"version": MANIFEST_VERSION, "entries": entries}, indent=2) + "\n")
    return path


def read_manifest(manifest_path):
    path = Path(manifest_path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict) or doc.get("version") != MANIFEST_VERSION:
        raise ManifestError(f"{path}: unsupported manifest version {doc.get('version')!r}")
    entries = doc.get("entries")
    if not isinstance(entries, list):
        raise ManifestError(f"{path}: 'entries' must be a list")
    return entries


def _load_image(base, rel, side, what, index):
    p = base / rel
    if not p.is_file():
        raise ManifestError(f"{what} image missing: {p}", index)
    raw = read_png(p)
    if raw.shape != (side, side, 3):
        raise ManifestError(f"{what} image {p} is {raw.shape[1]}x{raw.shape[0]}, "
                            f"expected {side}x{side}", index)
    return normalize(raw)


def load_dataset(manifest_path):
    """Samples in manifest order; paths resolve relative to the manifest's directory."""
    base = Path(manifest_path).parent
    entries = read_manifest(manifest_path)
    samples, seen = [], set()
    for i, e in enumerate(entries):
        for key in ("location_id", "overhead_path", "ground_path"):
            if key not in e:
                raise ManifestError(f"missing field {key!r}", i)
        lid = str(e["location_id"])
        if lid in seen:
            raise ManifestError(f"duplicate location_id {lid!r}", i)
        seen.add(lid)
        label = e.get("label")
        if label is not None and label not in CLASSES:
            raise ManifestError(f"label {label!r} not one of {CLASSES}", i)
        samples.append(PairedSample(
            overhead=_load_image(base, e["overhead_path"], OVERHEAD_SIDE, "overhead", i),
            ground=_load_image(base, e["ground_path"], GROUND_SIDE, "ground", i),
            location_id=lid,
            label=label,
        ))
    return samples


# --- binary container ---------------------------------------------------------

def _atomic_write(path, chunks):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as fh:
            for c in chunks:
                fh.write(c)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


def write_container(path, header, tensors):
    """Write ``header`` (JSON-able dict) and named arrays as float32 payload."""
    table, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        table.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    payload = b"".join(blobs)
    header = dict(header, tensors=table, payload_bytes=len(payload),
                  payload_crc32=zlib.crc32(payload))
    head = json.dumps(header, sort_keys=True).encode("utf-8")
    return _atomic_write(path, [_PREFIX.pack(MAGIC, CONTAINER_VERSION, len(head)), head, payload])


def read_container(path):
    """Returns ``(header, tensors)``; raises CheckpointFormatError on any inconsistency."""
    blob = Path(path).read_bytes()
    if len(blob) < _PREFIX.size:
        raise CheckpointFormatError(f"{path}: truncated prefix")
    magic, version, hlen = _PREFIX.unpack_from(blob)
    if magic != MAGIC:
        raise CheckpointFormatError(f"{path}: not a checkpoint container")
    if version != CONTAINER_VERSION:
        raise CheckpointFormatError(f"{path}: container version {version} unsupported")
    start = _PREFIX.size + hlen
    if len(blob) < start:
        raise CheckpointFormatError(f"{path}: truncated header")
    try:
        header = json.loads(blob[_PREFIX.size:start].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: corrupt header ({exc})") from exc
    payload = blob[start:]
    if len(payload) != header.get("payload_bytes"):
        raise CheckpointFormatError(
            f"{path}: payload is {len(payload)} bytes, header says {header.get('payload_bytes')}")
    if zlib.crc32(payload) != header.get("payload_crc32"):
        raise CheckpointFormatError(f"{path}: payload checksum mismatch")
    tensors, expected = {}, 0
    for t in header["tensors"]:
        count = int(np.prod(t["shape"], dtype=np.int64))
        if t["nbytes"] != 4 * count or t["offset"] != expected:
            raise CheckpointFormatError(f"{path}: shape table inconsistent at {t['name']!r}")
        expected += t["nbytes"]
        arr = np.frombuffer(payload, dtype="<f4", count=count, offset=t["offset"])
        tensors[t["name"]] = arr.reshape(t["shape"]).astype(np.float32)
    if expected != len(payload):
        raise CheckpointFormatError(f"{path}: shape table does not cover the payload")
    return header, tensors


# --- checkpoints --------------------------------------------------------------

_GROUPS = ("gen_params", "disc_params", "gen_m", "gen_v", "disc_m", "disc_v")


def save_checkpoint(state, path):
    header = {
        "kind": "train_state",
        "format_version": CHECKPOINT_FORMAT,
        "train_config": state.config.to_dict(),
        "generator_config": state.gen_config.to_dict(),
        "counters": {"step": state.step, "epoch": state.epoch},
        "rng_state": state.rng_state,
        "d_losses": list(state.d_losses),
        "g_losses": list(state.g_losses),
    }
    tensors = {}
    for group in _GROUPS:
        for name, arr in getattr(state, group).items():
            tensors[f"{group}/{name}"] = arr
    return write_container(path, header, tensors)


def load_checkpoint(path):
    from .generator import GeneratorConfig
    from .training import TrainConfig, TrainState

    header, tensors = read_container(path)
    if header.get("kind") != "train_state":
        raise CheckpointFormatError(f"{path}: not a training checkpoint")
    if header.get("format_version") != CHECKPOINT_FORMAT:
        raise CheckpointFormatError(f"{path}: checkpoint format {header.get('format_version')} unsupported")
    groups = {g: {} for g in _GROUPS}
    for full, arr in tensors.items():
        group, _, name = full.partition("/")
        if group not in groups:
            raise CheckpointFormatError(f"{path}: unknown tensor group {group!r}")
        groups[group][name] = arr
    return TrainState(
        config=TrainConfig(**header["train_config"]),
        gen_config=GeneratorConfig.from_dict(header["generator_config"]),
        step=int(header["counters"]["step"]),
        epoch=int(header["counters"]["epoch"]),
        rng_state=header["rng_state"],
        d_losses=[float(x) for x in header["d_losses"]],
        g_losses=[float(x) for x in header["g_losses"]],
        **groups,
    )


# --- loss traces and reports --------------------------------------------------

def read_loss_trace(path):
    """Returns ``(steps, d_losses, g_losses)`` arrays from a ``step,d_loss,g_loss`` CSV."""
    lines = Path(path).read_text().splitlines()
    if not lines or lines[0] != "step,d_loss,g_loss":
        raise ValueError(f"{path}: missing 'step,d_loss,g_loss' header")
    rows = [ln.split(",") for ln in lines[1:] if ln]
    steps = np.array([int(r[0]) for r in rows], dtype=int)
    return steps, np.array([float(r[1]) for r in rows]), np.array([float(r[2]) for r in rows])


def write_report(report, path):
    doc = asdict(report) if is_dataclass(report) else dict(report)
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return Path(path)


def read_report(path):
    return json.loads(Path(path).read_text())


# --- scene classifiers ----------------------------------------------------------

def save_classifier(classifier, path):
    from .evaluation import ConstantClassifier, SceneClassifier

    if isinstance(classifier, ConstantClassifier):
        header = {"kind": "constant_classifier", "distribution": classifier.distribution.tolist()}
        return write_container(path, header, {})
    if isinstance(classifier, SceneClassifier):
        header = {"kind": "scene_classifier", "n_classes": classifier.n_classes,
                  "holdout_accuracy": classifier.holdout_accuracy}
        return write_container(path, header, classifier.params)
    raise TypeError(f"cannot serialise classifier of type {type(classifier).__name__}")


def load_classifier(path):
    from .evaluation import ConstantClassifier, SceneClassifier

    header, tensors = read_container(path)
    kind = header.get("kind")
    if kind == "constant_classifier":
        return ConstantClassifier(header["distribution"])
    if kind == "scene_classifier":
        return SceneClassifier(tensors, header["n_classes"], header["holdout_accuracy"])
    raise CheckpointFormatError(f"{path}: not a classifier file (kind={kind!r})")
