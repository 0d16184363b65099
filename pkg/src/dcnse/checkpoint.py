"""Versioned binary checkpoints.

Layout::

    b"DCNSE-CKPT\\n"            magic
    uint32 LE                  format version
    uint32 LE                  byte length of the header text
    header text (utf-8)        key=value lines: config, metadata, and one
                               ``blob=<name>:<d0>x<d1>...`` line per array
    float64 LE blobs           in header order

A sidecar ``<path>.manifest.txt`` lists each blob's name, shape and sha256.
"""
import hashlib
import struct
from pathlib import Path

import numpy as np

from .model import DcnConfig, build_dcn

MAGIC = b"DCNSE-CKPT\n"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _shape_str(shape):
    return "x".join(str(d) for d in shape) if shape else "scalar"


def _parse_shape(text):
    return () if text == "scalar" else tuple(int(d) for d in text.split("x"))


def save_arrays(path, config, meta, arrays):
    """Write ``arrays`` (ordered name -> ndarray) with config/meta key=value text."""
    path = Path(path)
    lines = [f"config.{k}={v}" for k, v in config.items()]
    lines += [f"meta.{k}={v}" for k, v in meta.items()]
    blobs = []
    for name, arr in arrays.items():
        if "=" in name or ":" in name or "\n" in name:
            raise CheckpointError(f"illegal blob name {name!r}")
        a = np.ascontiguousarray(arr, dtype="<f8")
        lines.append(f"blob={name}:{_shape_str(a.shape)}")
        blobs.append((name, a))
    header = ("\n".join(lines) + "\n").encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(header)))
        fh.write(header)
        for _, a in blobs:
            fh.write(a.tobytes())
    tmp.replace(path)
    manifest = [f"{name}\t{_shape_str(a.shape)}\t{hashlib.sha256(a.tobytes()).hexdigest()}"
                for name, a in blobs]
    Path(str(path) + ".manifest.txt").write_text("\n".join(manifest) + "\n")
    return path


def load_arrays(path, verify_manifest=True):
    """Returns ``(config, meta, arrays)``; config/meta values are strings."""
    path = Path(path)
    raw = path.read_bytes()
    if not raw.startswith(MAGIC):
        raise CheckpointError(f"{path}: bad magic, not a DCN checkpoint")
    off = len(MAGIC)
    if len(raw) < off + 8:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack_from("<II", raw, off)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off += 8
    header = raw[off:off + hlen].decode("utf-8")
    off += hlen
    config, meta, arrays = {}, {}, {}
    for line in header.splitlines():
        if not line:
            continue
        key, _, val = line.partition("=")
        if key.startswith("config."):
            config[key[7:]] = val
        elif key.startswith("meta."):
            meta[key[5:]] = val
        elif key == "blob":
            name, _, shape_txt = val.rpartition(":")
            shape = _parse_shape(shape_txt)
            n = int(np.prod(shape)) if shape else 1
            end = off + 8 * n
            if end > len(raw):
                raise CheckpointError(f"{path}: truncated blob {name}")
            arrays[name] = np.frombuffer(raw[off:end], dtype="<f8").reshape(shape).copy()
            off = end
    if off != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - off} trailing bytes")
    mpath = Path(str(path) + ".manifest.txt")
    if verify_manifest and mpath.exists():
        for line in mpath.read_text().splitlines():
            name, shape_txt, digest = line.split("\t")
            a = arrays.get(name)
            if a is None or hashlib.sha256(a.tobytes()).hexdigest() != digest:
                raise CheckpointError(f"{path}: checksum mismatch for {name}")
    return config, meta, arrays


def save_model(path, model, meta=None, extra=None):
    arrays = {name: t.data for name, t in model.named_parameters()}
    if extra:
        arrays.update(extra)
    return save_arrays(path, model.cfg.to_dict(), meta or {}, arrays)


def load_model(path):
    """Rebuild the model from a checkpoint. Returns ``(model, meta, extra)``
    where ``extra`` holds the non-parameter blobs (optimizer state)."""
    config, meta, arrays = load_arrays(path)
    model = build_dcn(DcnConfig.from_dict(config), seed=0)
    for name, t in model.named_parameters():
        if name not in arrays:
            raise CheckpointError(f"{path}: missing parameter {name}")
        a = arrays.pop(name)
        if a.shape != t.shape:
            raise CheckpointError(f"{path}: {name} has shape {a.shape}, expected {t.shape}")
        t.data = a
    return model, meta, arrays
