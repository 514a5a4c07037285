"""Binary file formats for pointmaps, masks, images, labeled clouds and fields.

Layouts:

* Pointmap (``.pmap``): magic ``PMAP``, u16 version, u32 width, u32 height
  (all little-endian), then width*height records of three f32 (row-major),
  then width*height validity bytes (0 or 1).
* Mask (``.pgm``): 16-bit binary PGM, maxval 65535, big-endian samples.
* Image (``.ppm``): 8-bit binary PPM.
* Cloud / field (``.ply``): binary little-endian PLY. A cloud has
  ``x y z`` (float) and ``label`` (ushort). A field adds ``opacity``
  and ``scale`` (raw, pre-activation), ``r g b`` and ``identity_0`` ..
  ``identity_15``, plus a ``classifier`` element holding one row of
  ``bias weight_0 .. weight_15`` per class.

Readers raise :class:`FormatError` carrying the byte offset of the problem.
Writers are not safe against concurrent writes to the same path.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from segfield.data import LabeledMaskSet, Pointmap, SegmentedPointCloud
from segfield.errors import FormatError, InvalidInputError
from segfield.field import IDENTITY_DIM, GaussianField

POINTMAP_MAGIC = b"PMAP"
POINTMAP_VERSION = 1
_PMAP_HEADER = struct.Struct("<4sHII")

_PLY_TYPES = {
    "char": "i1", "uchar": "u1", "short": "<i2", "ushort": "<u2",
    "int": "<i4", "uint": "<u4", "float": "<f4", "double": "<f8",
    "int8": "i1", "uint8": "u1", "int16": "<i2", "uint16": "<u2",
    "int32": "<i4", "uint32": "<u4", "float32": "<f4", "float64": "<f8",
}

_CLOUD_PROPS = [("x", "float"), ("y", "float"), ("z", "float"), ("label", "ushort")]
_FIELD_PROPS = (
    _CLOUD_PROPS
    + [("opacity", "float"), ("scale", "float"), ("r", "float"), ("g", "float"), ("b", "float")]
    + [(f"identity_{i}", "float") for i in range(IDENTITY_DIM)]
)
_CLASSIFIER_PROPS = [("bias", "float")] + [(f"weight_{i}", "float") for i in range(IDENTITY_DIM)]


def _read_bytes(path) -> bytes:
    return Path(path).read_bytes()


# -- pointmap ---------------------------------------------------------------


def write_pointmap(path, pm: Pointmap) -> None:
    h, w = pm.shape
    pts = np.where(pm.valid[..., None], pm.points, 0.0).astype("<f4")
    with open(path, "wb") as fh:
        fh.write(_PMAP_HEADER.pack(POINTMAP_MAGIC, POINTMAP_VERSION, w, h))
        fh.write(pts.tobytes(order="C"))
        fh.write(pm.valid.astype(np.uint8).tobytes(order="C"))


def read_pointmap(path) -> Pointmap:
    buf = _read_bytes(path)
    if len(buf) < _PMAP_HEADER.size:
        raise FormatError("truncated pointmap header", len(buf))
    magic, version, w, h = _PMAP_HEADER.unpack_from(buf, 0)
    if magic != POINTMAP_MAGIC:
        raise FormatError(f"bad pointmap magic {magic!r}", 0)
    if version != POINTMAP_VERSION:
        raise FormatError(f"unsupported pointmap version {version}", 4)
    if w == 0 or h == 0:
        raise FormatError("pointmap has zero pixels", 6)
    off = _PMAP_HEADER.size
    n = w * h
    need = off + 12 * n + n
    if len(buf) < need:
        raise FormatError(f"truncated pointmap payload (need {need} bytes)", len(buf))
    if len(buf) > need:
        raise FormatError("trailing bytes after pointmap payload", need)
    pts = np.frombuffer(buf, dtype="<f4", count=3 * n, offset=off).reshape(h, w, 3)
    vbytes = np.frombuffer(buf, dtype=np.uint8, count=n, offset=off + 12 * n)
    bad = np.flatnonzero(vbytes > 1)
    if bad.size:
        raise FormatError("validity byte not 0/1", off + 12 * n + int(bad[0]))
    return Pointmap(pts.astype(np.float64), vbytes.reshape(h, w).astype(bool))


# -- netpbm -------------------------------------------------------------------


def _parse_netpbm_header(buf: bytes, magic: bytes) -> tuple[int, int, int, int]:
    """Return (width, height, maxval, data offset)."""
    if buf[:2] != magic:
        raise FormatError(f"bad magic {buf[:2]!r}, expected {magic!r}", 0)
    pos = 2
    fields = []
    while len(fields) < 3:
        while pos < len(buf) and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos : pos + 1] == b"#":
            while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise FormatError("malformed netpbm header", pos)
        fields.append(int(buf[start:pos]))
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise FormatError("missing whitespace after netpbm header", pos)
    w, h, maxval = fields
    if w == 0 or h == 0 or not (0 < maxval < 65536):
        raise FormatError("invalid netpbm dimensions or maxval", pos)
    return w, h, maxval, pos + 1


def write_mask(path, masks: LabeledMaskSet) -> None:
    ids = masks.ids
    if ids.size and ids.max() > 65535:
        raise InvalidInputError("mask IDs above 65535 cannot be stored in 16-bit PGM")
    h, w = ids.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(ids.astype(">u2").tobytes(order="C"))


def read_mask(path) -> LabeledMaskSet:
    buf = _read_bytes(path)
    w, h, maxval, off = _parse_netpbm_header(buf, b"P5")
    dtype = ">u2" if maxval > 255 else "u1"
    need = off + w * h * np.dtype(dtype).itemsize
    if len(buf) < need:
        raise FormatError(f"truncated PGM payload (need {need} bytes)", len(buf))
    data = np.frombuffer(buf, dtype=dtype, count=w * h, offset=off).reshape(h, w)
    return LabeledMaskSet(data.astype(np.int64))


def to_uint8(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img)
    if img.dtype == np.uint8:
        return img
    return np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path, img: np.ndarray) -> None:
    """Write an (H, W, 3) image; floats are taken as [0, 1] and quantized."""
    data = to_uint8(img)
    if data.ndim != 3 or data.shape[2] != 3:
        raise InvalidInputError(f"image must be (H, W, 3), got {data.shape}")
    h, w, _ = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(data).tobytes())


def read_image(path) -> np.ndarray:
    """Read an 8-bit PPM as a uint8 (H, W, 3) array."""
    buf = _read_bytes(path)
    w, h, maxval, off = _parse_netpbm_header(buf, b"P6")
    if maxval > 255:
        raise FormatError("only 8-bit PPM is supported", off - 1)
    need = off + w * h * 3
    if len(buf) < need:
        raise FormatError(f"truncated PPM payload (need {need} bytes)", len(buf))
    return np.frombuffer(buf, dtype=np.uint8, count=w * h * 3, offset=off).reshape(h, w, 3).copy()


# -- PLY ------------------------------------------------------------------------


def _ply_header(elements: list[tuple[str, int, list[tuple[str, str]]]]) -> bytes:
    lines = ["ply", "format binary_little_endian 1.0"]
    for name, count, props in elements:
        lines.append(f"element {name} {count}")
        lines.extend(f"property {t} {p}" for p, t in props)
    lines.append("end_header")
    return ("\n".join(lines) + "\n").encode("ascii")


def _ply_dtype(props: list[tuple[str, str]]) -> np.dtype:
    return np.dtype([(p, _PLY_TYPES[t]) for p, t in props])


def _write_ply(path, elements: list[tuple[str, list[tuple[str, str]], dict[str, np.ndarray]]]) -> None:
    header = _ply_header([(name, len(next(iter(cols.values()))), props) for name, props, cols in elements])
    with open(path, "wb") as fh:
        fh.write(header)
        for _name, props, cols in elements:
            rec = np.empty(len(next(iter(cols.values()))), dtype=_ply_dtype(props))
            for p, _t in props:
                rec[p] = cols[p]
            fh.write(rec.tobytes())


def _read_ply(path) -> dict[str, np.ndarray]:
    buf = _read_bytes(path)
    if not buf.startswith(b"ply\n"):
        raise FormatError("bad PLY magic", 0)
    end = buf.find(b"end_header\n")
    if end < 0:
        raise FormatError("PLY header not terminated", len(buf))
    body = end + len(b"end_header\n")
    elements: list[tuple[str, int, list[tuple[str, str]]]] = []
    pos = 4
    for line in buf[4:end].decode("ascii", errors="replace").split("\n"):
        parts = line.split()
        if not parts or parts[0] in ("comment", "obj_info"):
            pass
        elif parts[0] == "format":
            if parts[1:] != ["binary_little_endian", "1.0"]:
                raise FormatError(f"unsupported PLY format {' '.join(parts[1:])}", pos)
        elif parts[0] == "element" and len(parts) == 3:
            elements.append((parts[1], int(parts[2]), []))
        elif parts[0] == "property" and len(parts) == 3 and elements:
            if parts[1] not in _PLY_TYPES:
                raise FormatError(f"unsupported PLY property type {parts[1]}", pos)
            elements[-1][2].append((parts[2], parts[1]))
        else:
            raise FormatError(f"malformed PLY header line {line!r}", pos)
        pos += len(line) + 1
    out = {}
    off = body
    for name, count, props in elements:
        dt = _ply_dtype(props)
        need = off + dt.itemsize * count
        if len(buf) < need:
            raise FormatError(f"truncated PLY element {name!r} (need {need} bytes)", len(buf))
        out[name] = np.frombuffer(buf, dtype=dt, count=count, offset=off)
        off = need
    return out


def _require(data: dict[str, np.ndarray], element: str, props: list[tuple[str, str]]) -> np.ndarray:
    if element not in data:
        raise FormatError(f"PLY lacks element {element!r}", 0)
    arr = data[element]
    names = arr.dtype.names or ()
    missing = [p for p, _ in props if p not in names]
    if missing:
        raise FormatError(f"PLY element {element!r} lacks properties {missing}", 0)
    return arr


def write_cloud(path, cloud: SegmentedPointCloud) -> None:
    if len(cloud) and (cloud.labels.min() < 0 or cloud.labels.max() > 65535):
        raise InvalidInputError("cloud labels must fit in an unsigned 16-bit integer")
    p = cloud.positions
    cols = {"x": p[:, 0], "y": p[:, 1], "z": p[:, 2], "label": cloud.labels}
    _write_ply(path, [("vertex", _CLOUD_PROPS, cols)])


def read_cloud(path) -> SegmentedPointCloud:
    """Read a labeled cloud; source frames are not stored and come back as zeros."""
    v = _require(_read_ply(path), "vertex", _CLOUD_PROPS)
    pos = np.stack([v["x"], v["y"], v["z"]], axis=1).astype(np.float64)
    labels = v["label"].astype(np.int64)
    return SegmentedPointCloud(pos, labels, np.zeros(len(v), dtype=np.int64))


def write_field(path, f: GaussianField) -> None:
    if len(f) and f.labels.max() > 65535:
        raise InvalidInputError("class labels must fit in an unsigned 16-bit integer")
    p = f.positions
    cols = {
        "x": p[:, 0], "y": p[:, 1], "z": p[:, 2], "label": f.labels,
        "opacity": f.raw_opacity, "scale": f.raw_scale,
        "r": f.colors[:, 0], "g": f.colors[:, 1], "b": f.colors[:, 2],
    }
    for i in range(IDENTITY_DIM):
        cols[f"identity_{i}"] = f.identity[:, i]
    clf = {"bias": f.classifier_bias}
    for i in range(IDENTITY_DIM):
        clf[f"weight_{i}"] = f.classifier_weight[:, i]
    _write_ply(path, [("vertex", _FIELD_PROPS, cols), ("classifier", _CLASSIFIER_PROPS, clf)])


def read_field(path) -> GaussianField:
    data = _read_ply(path)
    v = _require(data, "vertex", _FIELD_PROPS)
    c = _require(data, "classifier", _CLASSIFIER_PROPS)

    def f64(*names):
        return np.stack([v[n] for n in names], axis=1).astype(np.float64)

    return GaussianField(
        positions=f64("x", "y", "z"),
        raw_opacity=v["opacity"].astype(np.float64),
        raw_scale=v["scale"].astype(np.float64),
        colors=f64("r", "g", "b"),
        identity=f64(*[f"identity_{i}" for i in range(IDENTITY_DIM)]),
        labels=v["label"].astype(np.int64),
        classifier_weight=np.stack([c[f"weight_{i}"] for i in range(IDENTITY_DIM)], axis=1).astype(np.float64),
        classifier_bias=c["bias"].astype(np.float64),
    )
