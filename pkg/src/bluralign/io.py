"""Binary tensor files, binary pixmaps (P5/P6), checksummed manifests and run configs."""
from __future__ import annotations

import dataclasses
import hashlib
import json
import struct
from pathlib import Path

import numpy as np
import yaml

MAGIC = b"CAIA"
FORMAT_VERSION = 1
DTYPE_FLOAT32 = 0


class TensorFormatError(ValueError):
    pass


class BadMagicError(TensorFormatError):
    pass


class UnsupportedVersionError(TensorFormatError):
    pass


class ChecksumError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def encode_tensor(array):
    arr = np.asarray(array, dtype="<f4", order="C")
    header = MAGIC + struct.pack("<III", FORMAT_VERSION, DTYPE_FLOAT32, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes(order="C")


def decode_tensor(buf):
    if len(buf) < 16:
        raise TensorFormatError("tensor file is truncated")
    if buf[:4] != MAGIC:
        raise BadMagicError(f"bad magic {buf[:4]!r}")
    version, dtype, rank = struct.unpack_from("<III", buf, 4)
    if version != FORMAT_VERSION:
        raise UnsupportedVersionError(f"unsupported tensor format version {version}")
    if dtype != DTYPE_FLOAT32:
        raise TensorFormatError(f"unsupported dtype code {dtype}")
    offset = 16 + 4 * rank
    dims = struct.unpack_from(f"<{rank}I", buf, 16)
    count = int(np.prod(dims, dtype=np.int64)) if rank else 1
    if len(buf) != offset + 4 * count:
        raise TensorFormatError(
            f"payload is {len(buf) - offset} bytes, expected {4 * count} for dims {dims}")
    return np.frombuffer(buf, dtype="<f4", count=count, offset=offset).reshape(dims).astype(np.float32)


def write_tensor(path, array):
    data = encode_tensor(array)
    Path(path).write_bytes(data)
    return data


def read_tensor(path):
    return decode_tensor(Path(path).read_bytes())


# -- pixmaps ------------------------------------------------------------------


def quantize(values):
    """Map [0, 1] floats to bytes, rounding half up."""
    v = np.floor(np.asarray(values, dtype=np.float64) * 255.0 + 0.5)
    return np.clip(v, 0, 255).astype(np.uint8)


def encode_pnm(array):
    arr = np.asarray(array)
    if arr.dtype != np.uint8:
        arr = quantize(arr)
    if arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    elif arr.ndim == 2:
        magic = b"P5"
    else:
        raise ValueError(f"cannot store array of shape {arr.shape} as a pixmap")
    header = magic + b"\n%d %d\n255\n" % (arr.shape[1], arr.shape[0])
    return header + np.ascontiguousarray(arr).tobytes()


def _tokens(buf, count):
    out, pos = [], 2
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated pixmap header")
        out.append(int(buf[start:pos]))
    return out, pos + 1


def decode_pnm(buf):
    """Decode an 8-bit P5/P6 pixmap to a uint8 array (H x W or H x W x 3)."""
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"not a binary pixmap (magic {magic!r})")
    (width, height, maxval), pos = _tokens(buf, 3)
    if maxval != 255:
        raise ValueError(f"only 8-bit pixmaps are supported (maxval {maxval})")
    depth = 3 if magic == b"P6" else 1
    n = width * height * depth
    payload = buf[pos:pos + n]
    if len(payload) != n:
        raise ValueError("pixmap payload is truncated")
    arr = np.frombuffer(payload, dtype=np.uint8)
    return arr.reshape((height, width, 3) if depth == 3 else (height, width)).copy()


def write_pnm(path, array):
    data = encode_pnm(array)
    Path(path).write_bytes(data)
    return data


def read_pnm(path):
    return decode_pnm(Path(path).read_bytes())


def read_image(path):
    """Read a P6 file as an H x W x 3 float image in [0, 1]."""
    arr = read_pnm(path)
    if arr.ndim != 3:
        raise ValueError(f"{path} is not a color (P6) pixmap")
    return arr.astype(np.float64) / 255.0


# -- manifests ------------------------------------------------------------------


def sha256(data):
    return hashlib.sha256(data).hexdigest()


def write_manifest(directory, tensors, meta=None):
    """Write every tensor as ``<name>.caia`` and a manifest.json with dims and checksums."""
    directory = Path(directory)
    files = {}
    for name in sorted(tensors):
        data = write_tensor(directory / f"{name}.caia", tensors[name])
        files[name] = {"file": f"{name}.caia", "dims": list(np.shape(tensors[name])),
                       "sha256": sha256(data)}
    manifest = {"files": files, "meta": meta or {}}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(directory, verify=True):
    """Load manifest.json and its tensors, checking each checksum and shape."""
    directory = Path(directory)
    try:
        manifest = json.loads((directory / "manifest.json").read_text())
    except FileNotFoundError:
        raise ChecksumError(f"no manifest.json in {directory}") from None
    tensors = {}
    for name, entry in manifest["files"].items():
        data = (directory / entry["file"]).read_bytes()
        if verify and sha256(data) != entry["sha256"]:
            raise ChecksumError(f"checksum mismatch for {entry['file']}")
        arr = decode_tensor(data)
        if list(arr.shape) != list(entry["dims"]):
            raise ChecksumError(f"dims mismatch for {entry['file']}")
        tensors[name] = arr
    return manifest, tensors


# -- run configuration ------------------------------------------------------------


def _coerce(value, default):
    if isinstance(default, tuple):
        return tuple(value)
    return value


def dataclass_from_dict(cls, values, section):
    """Build ``cls`` from ``values``, rejecting keys the dataclass does not define."""
    values = values or {}
    if not isinstance(values, dict):
        raise ConfigError(f"section [{section}] must be a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in [{section}]: {', '.join(unknown)}")
    defaults = cls()
    kwargs = {k: _coerce(v, getattr(defaults, k)) for k, v in values.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{section}] section: {exc}") from exc


def parse_run_config(text, sections):
    """Parse a YAML run config into one dataclass per section.

    ``sections`` maps section name to dataclass; missing sections take defaults
    and unknown sections or keys are errors.
    """
    try:
        doc = yaml.safe_load(text) if text.strip() else {}
    except yaml.YAMLError as exc:
        raise ConfigError(f"config is not valid YAML: {exc}") from exc
    doc = doc or {}
    if not isinstance(doc, dict):
        raise ConfigError("config must be a mapping of sections")
    unknown = sorted(set(doc) - set(sections))
    if unknown:
        raise ConfigError(f"unknown section(s): {', '.join(unknown)}")
    return {name: dataclass_from_dict(cls, doc.get(name), name) for name, cls in sections.items()}


def dump_run_config(configs):
    doc = {}
    for name, cfg in configs.items():
        doc[name] = {k: list(v) if isinstance(v, tuple) else v
                     for k, v in dataclasses.asdict(cfg).items()}
    return yaml.safe_dump(doc, sort_keys=False)
