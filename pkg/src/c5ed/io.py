"""File formats: binary PGM images, CSV arrays, JSON records, and model checkpoints.

Weights are stored as one flat little-endian float64 file (``weights.bin``)
described by a JSON manifest (``weights.json``) listing each array's name,
kind (``param`` or ``buffer``), shape and byte offset.
"""
from __future__ import annotations

import csv
import json
import math
from pathlib import Path
from typing import Any

import numpy as np

from .network import Cascade, NetworkSpec, build_cascade
from .nn import Module

__all__ = [
    "write_pgm",
    "read_pgm",
    "magnitude_to_gray",
    "write_array_csv",
    "read_array_csv",
    "write_complex_csv",
    "read_complex_csv",
    "write_json",
    "read_json",
    "save_weights",
    "load_weights",
    "save_checkpoint",
    "load_checkpoint",
    "CheckpointError",
]

WEIGHTS_FILE = "weights.bin"
MANIFEST_FILE = "weights.json"
SPEC_FILE = "spec.json"
META_FILE = "meta.json"
_DTYPE = "<f8"


class CheckpointError(ValueError):
    pass


# -- images -------------------------------------------------------------------------

def magnitude_to_gray(image: np.ndarray, vmax: float | None = None) -> np.ndarray:
    """Map magnitudes to 8-bit gray: 0 -> 0, ``vmax`` (default: the image maximum) -> 255."""
    mag = np.abs(np.asarray(image, dtype=np.complex128 if np.iscomplexobj(image) else np.float64))
    top = float(mag.max()) if vmax is None else float(vmax)
    if top <= 0:
        return np.zeros(mag.shape, dtype=np.uint8)
    return np.round(np.clip(mag / top, 0.0, 1.0) * 255).astype(np.uint8)


def write_pgm(path, image: np.ndarray, vmax: float | None = None) -> None:
    """Write a 2D array as a binary (P5) 8-bit PGM. Float input goes through :func:`magnitude_to_gray`."""
    image = np.asarray(image)
    if image.ndim != 2:
        raise ValueError(f"PGM needs a 2D image, got shape {image.shape}")
    gray = image if image.dtype == np.uint8 else magnitude_to_gray(image, vmax)
    h, w = gray.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        end = pos
        while not data[end:end + 1].isspace():
            end += 1
        tokens.append(data[pos:end].decode("ascii"))
        pos = end
    magic, w, h, maxval = tokens[0], int(tokens[1]), int(tokens[2]), int(tokens[3])
    if magic != "P5" or maxval != 255:
        raise ValueError(f"unsupported PGM header {tokens}")
    pos += 1
    return np.frombuffer(data[pos:pos + w * h], dtype=np.uint8).reshape(h, w)


# -- CSV ----------------------------------------------------------------------------

def _fmt(x: float) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() and abs(x) < 2 ** 53 else repr(x)


def write_array_csv(path, array: np.ndarray) -> None:
    """A 2D real array, one CSV row per array row; integral values are written without a decimal point."""
    array = np.asarray(array, dtype=np.float64)
    if array.ndim != 2:
        raise ValueError(f"expected a 2D array, got shape {array.shape}")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        for row in array:
            writer.writerow([_fmt(v) for v in row])


def read_array_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        return np.array([[float(v) for v in row] for row in csv.reader(fh)])


def write_complex_csv(path, z: np.ndarray) -> None:
    """A 2D complex array in long form: ``row,col,re,im``."""
    z = np.asarray(z, dtype=np.complex128)
    if z.ndim != 2:
        raise ValueError(f"expected a 2D array, got shape {z.shape}")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["row", "col", "re", "im"])
        for (i, j), v in np.ndenumerate(z):
            writer.writerow([i, j, repr(float(v.real)), repr(float(v.imag))])


def read_complex_csv(path) -> np.ndarray:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    h = max(int(r["row"]) for r in rows) + 1
    w = max(int(r["col"]) for r in rows) + 1
    z = np.zeros((h, w), dtype=np.complex128)
    for r in rows:
        z[int(r["row"]), int(r["col"])] = float(r["re"]) + 1j * float(r["im"])
    return z


# -- JSON ---------------------------------------------------------------------------

def _jsonable(obj: Any) -> Any:
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        value = float(obj)
        # non-finite values become strings so the file stays strict JSON
        return value if math.isfinite(value) else str(value)
    return obj


def write_json(path, record: Any) -> None:
    Path(path).write_text(json.dumps(_jsonable(record), indent=2, sort_keys=True, allow_nan=False) + "\n")


def read_json(path) -> Any:
    return json.loads(Path(path).read_text())


# -- weights ------------------------------------------------------------------------

def save_weights(model: Module, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    entries, chunks, offset = [], [], 0
    arrays = [("param", n, p.data) for n, p in model.named_parameters()]
    arrays += [("buffer", n, np.asarray(b, dtype=np.float64)) for n, b in model.named_buffers()]
    for kind, name, array in arrays:
        raw = np.ascontiguousarray(array, dtype=_DTYPE).tobytes()
        entries.append({"name": name, "kind": kind, "shape": list(array.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    (directory / WEIGHTS_FILE).write_bytes(b"".join(chunks))
    write_json(directory / MANIFEST_FILE, {"dtype": _DTYPE, "total_bytes": offset, "arrays": entries})


def load_weights(model: Module, directory) -> None:
    """Copy stored arrays into ``model``; every model array must be present with the same shape."""
    directory = Path(directory)
    manifest = read_json(directory / MANIFEST_FILE)
    blob = (directory / WEIGHTS_FILE).read_bytes()
    if len(blob) != manifest["total_bytes"]:
        raise CheckpointError(f"{WEIGHTS_FILE} holds {len(blob)} bytes, manifest says {manifest['total_bytes']}")
    stored = {(e["kind"], e["name"]): e for e in manifest["arrays"]}
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    wanted = [("param", n, p.data.shape) for n, p in params.items()]
    wanted += [("buffer", n, np.shape(b)) for n, b in buffers.items()]
    missing = [f"{k}:{n}" for k, n, _ in wanted if (k, n) not in stored]
    if missing or len(stored) != len(wanted):
        raise CheckpointError(f"checkpoint does not match the model (missing: {missing[:5]}, "
                              f"stored {len(stored)} arrays, model has {len(wanted)})")
    for kind, name, shape in wanted:
        e = stored[(kind, name)]
        if tuple(e["shape"]) != tuple(shape):
            raise CheckpointError(f"{kind} {name}: stored shape {tuple(e['shape'])} != model shape {tuple(shape)}")
        value = np.frombuffer(blob, dtype=manifest["dtype"], count=int(np.prod(shape, dtype=int)),
                              offset=e["offset"]).reshape(shape)
        if kind == "param":
            params[name].data[...] = value
        else:
            model.load_buffer(name, value.astype(np.float64))


def save_checkpoint(directory, model: Cascade, meta: dict | None = None) -> Path:
    """``spec.json`` + weights + ``meta.json`` (training context such as image size)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    model.spec.save(directory / SPEC_FILE)
    save_weights(model, directory)
    write_json(directory / META_FILE, meta or {})
    return directory


def load_checkpoint(directory) -> tuple[Cascade, dict]:
    directory = Path(directory)
    if not (directory / SPEC_FILE).is_file():
        raise CheckpointError(f"{directory} is not a checkpoint directory (no {SPEC_FILE})")
    spec = NetworkSpec.load(directory / SPEC_FILE)
    model = build_cascade(spec)
    load_weights(model, directory)
    meta = read_json(directory / META_FILE) if (directory / META_FILE).is_file() else {}
    return model, meta
