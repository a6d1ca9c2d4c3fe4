"""NIfTI-1 volumes and JSON documents (configs, traces, manifests).

Only single-file NIfTI-1 (``n+1``) with 3-D data is supported, optionally
gzipped. Images are written as float32; label maps as uint8 or int16 with the
protocol stored in a JSON sidecar next to the file.
"""

from __future__ import annotations

import gzip
import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .config import ConfigError, read_config, write_config  # noqa: F401  (re-exported)
from .core import LabelMap, Protocol, Volume

HEADER_SIZE = 348
VOX_OFFSET = 352
ECODE_COMMENT = 6
AFFINE_TAG = b"groupseg-affine:"
TRACE_SCHEMA_VERSION = 1
MANIFEST_SCHEMA_VERSION = 1

DATATYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
}
INTEGER_CODES = {2, 4, 8}


class NiftiError(ValueError):
    pass


# field name, struct code, offset
_FIELDS = [
    ("sizeof_hdr", "i", 0),
    ("dim_info", "B", 39),
    ("dim", "8h", 40),
    ("intent_p", "3f", 56),
    ("intent_code", "h", 68),
    ("datatype", "h", 70),
    ("bitpix", "h", 72),
    ("slice_start", "h", 74),
    ("pixdim", "8f", 76),
    ("vox_offset", "f", 108),
    ("scl_slope", "f", 112),
    ("scl_inter", "f", 116),
    ("slice_end", "h", 120),
    ("slice_code", "B", 122),
    ("xyzt_units", "B", 123),
    ("cal_max", "f", 124),
    ("cal_min", "f", 128),
    ("descrip", "80s", 148),
    ("qform_code", "h", 252),
    ("sform_code", "h", 254),
    ("quatern", "3f", 256),
    ("qoffset", "3f", 268),
    ("srow_x", "4f", 280),
    ("srow_y", "4f", 296),
    ("srow_z", "4f", 312),
    ("magic", "4s", 344),
]


def _open(path, mode):
    path = str(path)
    return gzip.open(path, mode) if path.endswith(".gz") else open(path, mode)


def parse_header(raw: bytes) -> dict:
    """Decode the fields of a 348-byte NIfTI-1 header."""
    if len(raw) < HEADER_SIZE:
        raise NiftiError(f"truncated header: {len(raw)} of {HEADER_SIZE} bytes")
    if struct.unpack("<i", raw[:4])[0] == HEADER_SIZE:
        endian = "<"
    elif struct.unpack(">i", raw[:4])[0] == HEADER_SIZE:
        endian = ">"
    else:
        raise NiftiError("bad sizeof_hdr; not a NIfTI-1 file")
    hdr = {"endian": endian}
    for name, code, offset in _FIELDS:
        values = struct.unpack_from(endian + code, raw, offset)
        hdr[name] = values[0] if len(values) == 1 else list(values)
    magic = hdr["magic"]
    if magic[:3] != b"n+1":
        raise NiftiError(f"bad magic {magic!r}; only single-file n+1 is supported")
    hdr["descrip"] = hdr["descrip"].split(b"\0", 1)[0].decode("latin-1")
    return hdr


def quaternion_to_matrix(b: float, c: float, d: float) -> np.ndarray:
    a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
    return np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ])


def matrix_to_quaternion(r: np.ndarray) -> tuple[float, float, float]:
    """(b, c, d) of the unit quaternion for rotation ``r`` with a >= 0."""
    trace = np.trace(r)
    if trace > 0:
        s = 0.5 / np.sqrt(trace + 1.0)
        a, b, c, d = 0.25 / s, (r[2, 1] - r[1, 2]) * s, (r[0, 2] - r[2, 0]) * s, (r[1, 0] - r[0, 1]) * s
    elif r[0, 0] > r[1, 1] and r[0, 0] > r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[0, 0] - r[1, 1] - r[2, 2])
        a, b, c, d = (r[2, 1] - r[1, 2]) / s, 0.25 * s, (r[0, 1] + r[1, 0]) / s, (r[0, 2] + r[2, 0]) / s
    elif r[1, 1] > r[2, 2]:
        s = 2.0 * np.sqrt(1.0 + r[1, 1] - r[0, 0] - r[2, 2])
        a, b, c, d = (r[0, 2] - r[2, 0]) / s, (r[0, 1] + r[1, 0]) / s, 0.25 * s, (r[1, 2] + r[2, 1]) / s
    else:
        s = 2.0 * np.sqrt(1.0 + r[2, 2] - r[0, 0] - r[1, 1])
        a, b, c, d = (r[1, 0] - r[0, 1]) / s, (r[0, 2] + r[2, 0]) / s, (r[1, 2] + r[2, 1]) / s, 0.25 * s
    if a < 0:
        b, c, d = -b, -c, -d
    return float(b), float(c), float(d)


def header_affine(hdr: dict) -> np.ndarray:
    """sform when set, else qform, else a pixdim diagonal."""
    affine = np.eye(4)
    if hdr["sform_code"] > 0:
        affine[:3] = np.array([hdr["srow_x"], hdr["srow_y"], hdr["srow_z"]], dtype=np.float64)
        return affine
    pixdim = np.asarray(hdr["pixdim"], dtype=np.float64)
    zooms = np.where(pixdim[1:4] > 0, pixdim[1:4], 1.0)
    if hdr["qform_code"] > 0:
        r = quaternion_to_matrix(*hdr["quatern"])
        qfac = -1.0 if pixdim[0] < 0 else 1.0
        r[:, 2] *= qfac
        affine[:3, :3] = r * zooms
        affine[:3, 3] = hdr["qoffset"]
        return affine
    affine[:3, :3] = np.diag(zooms)
    return affine


def read_header(path) -> dict:
    with _open(path, "rb") as f:
        return parse_header(f.read(HEADER_SIZE))


def read_volume(path, as_labels: bool = False, protocol: Protocol | None = None):
    """Load a NIfTI-1 file as a :class:`Volume`, or a :class:`LabelMap` with ``as_labels``.

    Data are scaled by ``scl_slope``/``scl_inter`` when the slope is set and
    not the identity. For label maps, a protocol sidecar next to the file is
    used when ``protocol`` is not given.
    """
    with _open(path, "rb") as f:
        raw = f.read()
    hdr = parse_header(raw)
    ndim = hdr["dim"][0]
    if not 1 <= ndim <= 7:
        raise NiftiError(f"invalid dim[0] = {ndim}")
    extents = hdr["dim"][1 : ndim + 1]
    if ndim > 3 and any(e > 1 for e in extents[3:]):
        raise NiftiError(f"unsupported {ndim}-D data with extents {extents}; only 3-D volumes are supported")
    shape = tuple(list(extents[:3]) + [1] * (3 - min(ndim, 3)))
    if min(shape) < 1:
        raise NiftiError(f"invalid extents {shape}")
    code = hdr["datatype"]
    if code not in DATATYPES:
        raise NiftiError(f"unsupported datatype code {code}")
    dtype = DATATYPES[code].newbyteorder(hdr["endian"])
    offset = int(hdr["vox_offset"])
    count = int(np.prod(shape))
    if len(raw) < offset + count * dtype.itemsize:
        raise NiftiError(f"truncated data: need {offset + count * dtype.itemsize} bytes, file has {len(raw)}")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=offset).reshape(shape, order="F")
    data = data.astype(dtype.newbyteorder("="))
    affine = header_affine(hdr)
    exact = _extension_affine(raw, hdr)
    if exact is not None and hdr["sform_code"] > 0 and np.allclose(exact, affine, atol=1e-3):
        affine = exact

    slope, inter = hdr["scl_slope"], hdr["scl_inter"]
    scaled = np.isfinite(slope) and slope != 0 and not (slope == 1 and inter == 0)

    if as_labels:
        if code not in INTEGER_CODES:
            raise NiftiError("label maps must use an integer datatype")
        if scaled:
            data = np.round(data * slope + inter)
        if protocol is None:
            sidecar = protocol_sidecar(path)
            if sidecar.exists():
                protocol = Protocol.from_json(sidecar)
        return LabelMap(data, affine, protocol)
    if scaled:
        data = data.astype(np.float64) * slope + inter
    return Volume(data, affine)


def _extension_affine(raw: bytes, hdr: dict) -> np.ndarray | None:
    """Float64 affine stored in a comment extension by :func:`write_volume`, if any."""
    end = int(hdr["vox_offset"])
    if end <= VOX_OFFSET or raw[HEADER_SIZE] != 1:
        return None
    pos = VOX_OFFSET
    while pos + 8 <= end:
        esize, ecode = struct.unpack_from(hdr["endian"] + "2i", raw, pos)
        if esize < 8:
            break
        body = raw[pos + 8 : pos + esize]
        if ecode == ECODE_COMMENT and body.startswith(AFFINE_TAG):
            values = json.loads(body[len(AFFINE_TAG) :].rstrip(b"\0").decode())
            return np.array(values, dtype=np.float64).reshape(4, 4)
        pos += esize
    return None


def _affine_extension(affine: np.ndarray) -> bytes:
    body = AFFINE_TAG + json.dumps([float(v) for v in np.asarray(affine).ravel()]).encode()
    size = 8 + len(body)
    size += -size % 16
    return struct.pack("<2i", size, ECODE_COMMENT) + body.ljust(size - 8, b"\0")


def protocol_sidecar(path) -> Path:
    path = Path(path)
    name = path.name
    for ext in (".nii.gz", ".nii"):
        if name.endswith(ext):
            name = name[: -len(ext)]
            break
    return path.with_name(name + ".protocol.json")


def build_header(shape, affine: np.ndarray, code: int, descrip: str = "", vox_offset: int = VOX_OFFSET) -> bytes:
    dtype = DATATYPES[code]
    affine = np.asarray(affine, dtype=np.float64)
    hdr = bytearray(HEADER_SIZE)
    zooms = np.linalg.norm(affine[:3, :3], axis=0)

    struct.pack_into("<i", hdr, 0, HEADER_SIZE)
    struct.pack_into("<B", hdr, 38, ord("r"))
    struct.pack_into("<8h", hdr, 40, 3, *shape, 1, 1, 1, 1)
    struct.pack_into("<h", hdr, 70, code)
    struct.pack_into("<h", hdr, 72, dtype.itemsize * 8)
    struct.pack_into("<f", hdr, 108, float(vox_offset))
    struct.pack_into("<f", hdr, 112, 1.0)
    struct.pack_into("<f", hdr, 116, 0.0)
    struct.pack_into("<B", hdr, 123, 2)  # mm
    struct.pack_into("<80s", hdr, 148, descrip.encode("latin-1")[:79])

    # qform from the rotation part when the matrix is orthogonal up to zooms
    r = affine[:3, :3] / zooms
    qfac = 1.0
    if np.linalg.det(r) < 0:
        qfac = -1.0
        r[:, 2] *= -1
    qform_code = 1 if np.allclose(r @ r.T, np.eye(3), atol=1e-5) else 0
    quat = matrix_to_quaternion(r) if qform_code else (0.0, 0.0, 0.0)
    struct.pack_into("<8f", hdr, 76, qfac, *zooms, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<h", hdr, 252, qform_code)
    struct.pack_into("<h", hdr, 254, 1)
    struct.pack_into("<3f", hdr, 256, *quat)
    struct.pack_into("<3f", hdr, 268, *affine[:3, 3])
    struct.pack_into("<4f", hdr, 280, *affine[0])
    struct.pack_into("<4f", hdr, 296, *affine[1])
    struct.pack_into("<4f", hdr, 312, *affine[2])
    struct.pack_into("<4s", hdr, 344, b"n+1\0")
    return bytes(hdr)


def write_volume(vol, path) -> None:
    """Write a Volume (float32) or LabelMap (uint8/int16) as NIfTI-1, gzipped for ``.gz``."""
    if min(vol.shape) < 1:
        raise NiftiError(f"cannot write empty shape {vol.shape}")
    if isinstance(vol, LabelMap):
        code = 2 if int(vol.data.max()) < 256 else 4
        if int(vol.data.max()) > np.iinfo(np.int16).max:
            raise NiftiError("label IDs exceed the int16 range")
    else:
        code = 16
    data = np.asarray(vol.data, dtype=DATATYPES[code].newbyteorder("<"))
    ext = _affine_extension(vol.affine)
    header = build_header(vol.shape, vol.affine, code, vox_offset=VOX_OFFSET + len(ext))
    payload = header + b"\1\0\0\0" + ext + data.tobytes(order="F")
    path = Path(path)
    if str(path).endswith(".gz"):
        # fixed mtime keeps gzip output byte-identical across runs
        with open(path, "wb") as raw, gzip.GzipFile(fileobj=raw, mode="wb", mtime=0, filename="") as f:
            f.write(payload)
    else:
        with open(path, "wb") as f:
            f.write(payload)
    if isinstance(vol, LabelMap) and vol.protocol is not None:
        with open(protocol_sidecar(path), "w") as f:
            json.dump(vol.protocol.to_dict(), f, indent=1)


# --------------------------------------------------------------------------
# JSON documents
# --------------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def _jsonable(value):
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    raise TypeError(f"cannot serialize {type(value).__name__}")


def write_trace(trace: dict, path) -> None:
    doc = {"schema_version": TRACE_SCHEMA_VERSION, **trace}
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        json.dump(doc, f, indent=1, default=_jsonable)
    os.replace(tmp, path)


def read_trace(path) -> dict:
    with open(path) as f:
        try:
            doc = json.load(f)
        except json.JSONDecodeError as err:
            raise ConfigError(f"{path}: invalid trace JSON ({err})") from err
    if not isinstance(doc, dict) or doc.get("schema_version") != TRACE_SCHEMA_VERSION:
        raise ConfigError(f"{path}: schema_version: expected {TRACE_SCHEMA_VERSION}")
    return doc


def append_manifest(record: dict, path) -> None:
    line = json.dumps({"schema_version": MANIFEST_SCHEMA_VERSION, **record}, sort_keys=True, default=_jsonable)
    with open(path, "a") as f:
        f.write(line + "\n")


def write_manifest(records, path) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as f:
        for record in records:
            doc = {"schema_version": MANIFEST_SCHEMA_VERSION, **record}
            f.write(json.dumps(doc, sort_keys=True, default=_jsonable) + "\n")
    os.replace(tmp, path)


def read_manifest(path) -> list[dict]:
    records = []
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                doc = json.loads(line)
            except json.JSONDecodeError as err:
                raise ConfigError(f"{path}:{lineno}: invalid JSON ({err})") from err
            if doc.get("schema_version") != MANIFEST_SCHEMA_VERSION:
                raise ConfigError(f"{path}:{lineno}: schema_version: expected {MANIFEST_SCHEMA_VERSION}")
            records.append(doc)
    return records
