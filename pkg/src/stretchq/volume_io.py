"""NIfTI-1 volumes, PGM slices, CSV summaries and the binary fit container."""

from __future__ import annotations

import csv
import gzip
import io
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .exceptions import DataError, NiftiError

HEADER_DTYPE = np.dtype([
    ("sizeof_hdr", "i4"), ("data_type", "S10"), ("db_name", "S18"), ("extents", "i4"),
    ("session_error", "i2"), ("regular", "S1"), ("dim_info", "u1"), ("dim", "i2", (8,)),
    ("intent_p1", "f4"), ("intent_p2", "f4"), ("intent_p3", "f4"), ("intent_code", "i2"),
    ("datatype", "i2"), ("bitpix", "i2"), ("slice_start", "i2"), ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"), ("scl_slope", "f4"), ("scl_inter", "f4"), ("slice_end", "i2"),
    ("slice_code", "u1"), ("xyzt_units", "u1"), ("cal_max", "f4"), ("cal_min", "f4"),
    ("slice_duration", "f4"), ("toffset", "f4"), ("glmax", "i4"), ("glmin", "i4"),
    ("descrip", "S80"), ("aux_file", "S24"), ("qform_code", "i2"), ("sform_code", "i2"),
    ("quatern_b", "f4"), ("quatern_c", "f4"), ("quatern_d", "f4"),
    ("qoffset_x", "f4"), ("qoffset_y", "f4"), ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)), ("srow_y", "f4", (4,)), ("srow_z", "f4", (4,)),
    ("intent_name", "S16"), ("magic", "S4"),
])
assert HEADER_DTYPE.itemsize == 348

DATATYPES = {2: "u1", 4: "i2", 8: "i4", 16: "f4", 64: "f8"}
DATATYPE_CODES = {"uint8": 2, "int16": 4, "int32": 8, "float32": 16, "float64": 64}

# NIfTI comment extension carrying the exact float64 geometry, since the
# header itself only stores float32.
_ECODE_COMMENT = 6
_GEOMETRY_TAG = b"stretchq-geometry "

_PRESERVED = ("descrip", "intent_name", "xyzt_units", "qform_code", "sform_code", "intent_code",
              "slice_code", "dim_info", "toffset", "slice_duration", "cal_min", "cal_max")


@dataclass
class Volume4D:
    """Dense (nx, ny, nz, nv) array with voxel geometry.

    ``header`` keeps passthrough NIfTI fields (description, codes, units).
    """

    data: np.ndarray
    affine: np.ndarray = field(default_factory=lambda: np.eye(4))
    voxel_size: np.ndarray | None = None
    header: dict = field(default_factory=dict)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 3:
            data = data[..., None]
        if data.ndim != 4 or min(data.shape) < 1:
            raise DataError(f"volume must be 3-D or 4-D with positive dims, got {data.shape}")
        self.data = data
        self.affine = np.array(self.affine, dtype=float).reshape(4, 4)
        if self.voxel_size is None:
            self.voxel_size = np.linalg.norm(self.affine[:3, :3], axis=0)
        self.voxel_size = np.array(self.voxel_size, dtype=float).reshape(3)

    @property
    def dims(self):
        return self.data.shape

    @property
    def spatial(self):
        return self.data[..., 0] if self.data.shape[3] == 1 else self.data


def _affine_to_quaternion(affine):
    R = np.array(affine[:3, :3], dtype=float)
    zooms = np.linalg.norm(R, axis=0)
    zooms[zooms == 0] = 1.0
    R = R / zooms
    qfac = 1.0
    if np.linalg.det(R) < 0:
        qfac = -1.0
        R[:, 2] *= -1
    u, _, vt = np.linalg.svd(R)
    R = u @ vt
    # quaternion (a, b, c, d) with a >= 0
    a = 0.5 * np.sqrt(max(0.0, 1.0 + np.trace(R)))
    if a > 1e-4:
        b = (R[2, 1] - R[1, 2]) / (4 * a)
        c = (R[0, 2] - R[2, 0]) / (4 * a)
        d = (R[1, 0] - R[0, 1]) / (4 * a)
    else:
        b = 0.5 * np.sqrt(max(0.0, 1 + R[0, 0] - R[1, 1] - R[2, 2]))
        c = 0.5 * np.sqrt(max(0.0, 1 - R[0, 0] + R[1, 1] - R[2, 2]))
        d = 0.5 * np.sqrt(max(0.0, 1 - R[0, 0] - R[1, 1] + R[2, 2]))
        b = np.copysign(b, R[2, 1] - R[1, 2]) if b else b
        c = np.copysign(c, R[0, 2] - R[2, 0]) if c else c
        d = np.copysign(d, R[1, 0] - R[0, 1]) if d else d
    if a < 0:
        a, b, c, d = -a, -b, -c, -d
    return (b, c, d), qfac


def _quaternion_to_affine(hdr):
    b, c, d = (float(hdr[k]) for k in ("quatern_b", "quatern_c", "quatern_d"))
    a = np.sqrt(max(0.0, 1.0 - (b * b + c * c + d * d)))
    R = np.array([
        [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
        [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
        [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
    ])
    pix = hdr["pixdim"].astype(float)
    qfac = -1.0 if pix[0] < 0 else 1.0
    zooms = np.array([pix[1], pix[2], pix[3] * qfac])
    out = np.eye(4)
    out[:3, :3] = R * zooms
    out[:3, 3] = [hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"]]
    return out


def _open_bytes(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError) as exc:
            raise NiftiError(f"{path}: corrupt gzip stream ({exc})") from None
    return raw


def _parse_header(raw, path):
    if len(raw) < 348:
        raise NiftiError(f"{path}: truncated header ({len(raw)} bytes < 348)")
    for order in ("<", ">"):
        hdr = np.frombuffer(raw[:348], dtype=HEADER_DTYPE.newbyteorder(order))[0]
        if int(hdr["sizeof_hdr"]) == 348:
            break
    else:
        raise NiftiError(f"{path}: sizeof_hdr is not 348 in either byte order; not a NIfTI-1 file")
    magic = bytes(raw[344:348])
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise NiftiError(f"{path}: bad magic {magic!r}; expected b'n+1\\x00' or b'ni1\\x00'")
    return hdr, order, magic


def _read_extensions(raw, order, end):
    exts = []
    if len(raw) >= 352 and raw[348] != 0:
        pos = 352
        while pos + 8 <= end:
            esize, ecode = np.frombuffer(raw[pos:pos + 8], dtype=order + "i4")
            if esize < 8 or pos + esize > end:
                break
            exts.append((int(ecode), bytes(raw[pos + 8:pos + esize])))
            pos += int(esize)
    return exts


def read_nifti(path):
    """Read a NIfTI-1 volume (``.nii``, ``.nii.gz`` or ``.hdr``/``.img`` pair).

    Data is returned as float64 with ``scl_slope``/``scl_inter`` applied.
    """
    path = os.fspath(path)
    raw = _open_bytes(path)
    hdr, order, magic = _parse_header(raw, path)
    code = int(hdr["datatype"])
    if code not in DATATYPES:
        raise NiftiError(f"{path}: unsupported datatype code {code}")
    ndim = int(hdr["dim"][0])
    if not 1 <= ndim <= 7:
        raise NiftiError(f"{path}: invalid dim[0] = {ndim}")
    shape = [int(v) for v in hdr["dim"][1:1 + ndim]]
    if any(s < 1 for s in shape):
        raise NiftiError(f"{path}: non-positive dimension in {shape}")
    if len(shape) > 4 and any(s != 1 for s in shape[4:]):
        raise NiftiError(f"{path}: volumes with more than 4 dimensions are not supported")
    shape = (shape + [1, 1, 1, 1])[:4]
    dtype = np.dtype(DATATYPES[code]).newbyteorder(order)
    count = int(np.prod(shape))

    if magic == b"n+1\x00":
        offset = int(hdr["vox_offset"])
        payload = raw
        exts = _read_extensions(raw, order, offset)
    else:
        stem = path[:-3] if path.endswith(".gz") else path
        img = os.path.splitext(stem)[0] + ".img"
        payload = _open_bytes(img)
        offset = int(hdr["vox_offset"])
        exts = _read_extensions(raw, order, len(raw))
    nbytes = count * dtype.itemsize
    if len(payload) < offset + nbytes:
        raise NiftiError(
            f"{path}: truncated data ({len(payload) - offset} of {nbytes} bytes present)"
        )
    data = np.frombuffer(payload, dtype=dtype, count=count, offset=offset)
    data = data.reshape(shape, order="F").astype(np.float64)
    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if np.isfinite(slope) and slope != 0:
        data = data * slope + (inter if np.isfinite(inter) else 0.0)

    if int(hdr["sform_code"]) > 0:
        affine = np.eye(4)
        affine[0], affine[1], affine[2] = hdr["srow_x"], hdr["srow_y"], hdr["srow_z"]
    elif int(hdr["qform_code"]) > 0:
        affine = _quaternion_to_affine(hdr)
    else:
        affine = np.diag([*hdr["pixdim"][1:4].astype(float), 1.0])
    voxel_size = hdr["pixdim"][1:4].astype(float)
    for ecode, blob in exts:
        if ecode == _ECODE_COMMENT and blob.startswith(_GEOMETRY_TAG):
            try:
                geo = json.loads(blob[len(_GEOMETRY_TAG):].rstrip(b"\x00").decode())
                a = np.array([float.fromhex(v) for v in geo["affine"]]).reshape(4, 4)
                vs = np.array([float.fromhex(v) for v in geo["voxel_size"]])
            except (ValueError, KeyError):
                continue
            # Only trust the extension if the header still agrees with it.
            if np.array_equal(a.astype(np.float32), affine.astype(np.float32)) and np.array_equal(
                vs.astype(np.float32), voxel_size.astype(np.float32)
            ):
                affine, voxel_size = a, vs
    header = {}
    for key in _PRESERVED:
        v = hdr[key]
        header[key] = v.decode("latin-1").rstrip("\x00") if isinstance(v, bytes) else v.item()
    return Volume4D(data, affine, voxel_size, header)


def nifti_bytes(vol, datatype="float32", byteorder="<"):
    """Serialise a volume as a single-file NIfTI-1 byte string."""
    if datatype not in ("float32", "float64"):
        raise ValueError("datatype must be 'float32' or 'float64'")
    code = DATATYPE_CODES[datatype]
    dtype = np.dtype(DATATYPES[code]).newbyteorder(byteorder)
    geo = json.dumps({
        "affine": [float(v).hex() for v in vol.affine.ravel()],
        "voxel_size": [float(v).hex() for v in vol.voxel_size],
    }).encode()
    blob = _GEOMETRY_TAG + geo
    esize = 8 + len(blob)
    esize += (-esize) % 16
    blob = blob.ljust(esize - 8, b"\x00")

    hdr = np.zeros((), dtype=HEADER_DTYPE.newbyteorder(byteorder))
    hdr["sizeof_hdr"] = 348
    hdr["regular"] = b"r"
    nx, ny, nz, nv = vol.dims
    ndim = 4 if nv > 1 else 3
    hdr["dim"] = [ndim, nx, ny, nz, nv, 1, 1, 1]
    hdr["datatype"] = code
    hdr["bitpix"] = dtype.itemsize * 8
    (qb, qc, qd), qfac = _affine_to_quaternion(vol.affine)
    hdr["pixdim"] = [qfac, *vol.voxel_size, 1.0, 0, 0, 0]
    hdr["vox_offset"] = 352 + esize
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = 2 | 8  # mm, s
    h = vol.header or {}
    for key in ("descrip", "intent_name"):
        if key in h:
            hdr[key] = str(h[key]).encode("latin-1")[: HEADER_DTYPE[key].itemsize]
    for key in ("xyzt_units", "intent_code", "slice_code", "dim_info", "toffset", "slice_duration"):
        if key in h:
            hdr[key] = h[key]
    hdr["qform_code"] = h.get("qform_code") or 1
    hdr["sform_code"] = h.get("sform_code") or 1
    hdr["quatern_b"], hdr["quatern_c"], hdr["quatern_d"] = qb, qc, qd
    hdr["qoffset_x"], hdr["qoffset_y"], hdr["qoffset_z"] = vol.affine[:3, 3]
    hdr["srow_x"], hdr["srow_y"], hdr["srow_z"] = vol.affine[0], vol.affine[1], vol.affine[2]
    hdr["magic"] = b"n+1"
    finite = vol.data[np.isfinite(vol.data)]
    if finite.size:
        f32 = np.finfo(np.float32).max
        hdr["cal_min"], hdr["cal_max"] = np.clip([finite.min(), finite.max()], -f32, f32)

    buf = io.BytesIO()
    buf.write(hdr.tobytes())
    buf.write(bytes([1, 0, 0, 0]))
    buf.write(np.array([esize, _ECODE_COMMENT], dtype=byteorder + "i4").tobytes())
    buf.write(blob)
    buf.write(np.asarray(vol.data, dtype=dtype).tobytes(order="F"))
    return buf.getvalue()


def write_nifti(vol, path, datatype="float32", byteorder="<"):
    """Write ``vol`` to ``path``; a ``.gz`` suffix selects gzip compression.

    Gzip output uses a zero timestamp so identical volumes give identical files.
    """
    if not isinstance(vol, Volume4D):
        vol = Volume4D(vol)
    path = os.fspath(path)
    payload = nifti_bytes(vol, datatype, byteorder)
    if path.endswith(".gz"):
        payload = gzip.compress(payload, mtime=0)
    with open(path, "wb") as fh:
        fh.write(payload)


# ---------------------------------------------------------------------------
# PGM slices


def _slice(data, axis, index):
    data = np.asarray(data, dtype=float)
    if data.ndim == 4:
        data = data[..., 0]
    if not 0 <= index < data.shape[axis]:
        raise IndexError(f"slice index {index} out of range for axis {axis} of size {data.shape[axis]}")
    return np.take(data, index, axis=axis)


def export_slice_pgm(vol, axis=2, index=0, window="auto"):
    """8-bit binary PGM (P5) of one slice with linear windowing.

    ``window`` is ``(lo, hi)`` or ``"auto"`` (2nd-98th percentile of finite
    values). Values map to ``floor(255 (v - lo)/(hi - lo) + 0.5)`` clipped to
    [0, 255]; NaN becomes 0. The first in-plane axis runs left to right and
    the second bottom to top.
    """
    data = vol.data if isinstance(vol, Volume4D) else vol
    sl = _slice(data, axis, index)
    finite = sl[np.isfinite(sl)]
    if isinstance(window, str):
        if window != "auto":
            raise ValueError("window must be (lo, hi) or 'auto'")
        if finite.size:
            lo, hi = np.percentile(finite, [2, 98])
        else:
            lo, hi = 0.0, 1.0
        if hi <= lo:
            hi = lo + 1.0
    else:
        lo, hi = map(float, window)
        if not lo < hi:
            raise ValueError("window requires lo < hi")
    with np.errstate(invalid="ignore"):
        pix = np.floor(255.0 * (sl - lo) / (hi - lo) + 0.5)
    pix = np.clip(np.nan_to_num(pix, nan=0.0), 0, 255).astype(np.uint8)
    img = pix.T[::-1]
    h, w = img.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + img.tobytes()


def read_pgm(blob):
    """Parse a P5 PGM produced by :func:`export_slice_pgm` into a uint8 array."""
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5":
        raise DataError("not a binary PGM")
    w, h = map(int, parts[1].split())
    return np.frombuffer(parts[3], dtype=np.uint8).reshape(h, w)


# ---------------------------------------------------------------------------
# CSV summaries

SUMMARY_FIELDS = ("region", "measure", "estimator", "shell_b", "mean", "median", "p05", "p95")


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, (float, np.floating)):
        return repr(float(v)) if np.isfinite(v) else "nan"
    return str(v)


def summarize_maps(qmaps, regions):
    """Per-region statistics rows for every measure of a QMaps."""
    rows = []
    for region, rmask in regions.items():
        for name, arr in qmaps.items():
            vals = arr[np.asarray(rmask, dtype=bool)]
            vals = vals[np.isfinite(vals)]
            stats = (np.mean(vals), *np.percentile(vals, [50, 5, 95])) if vals.size else (np.nan,) * 4
            rows.append({
                "region": region,
                "measure": name,
                "estimator": qmaps.metadata.get("estimator", ""),
                "shell_b": qmaps.metadata.get("shell_b"),
                "mean": stats[0], "median": stats[1], "p05": stats[2], "p95": stats[3],
            })
    return rows


def write_csv(rows, path_or_stream, fields=SUMMARY_FIELDS):
    """Write dict rows with '.' decimals and '\\n' line endings."""
    own = isinstance(path_or_stream, (str, os.PathLike))
    fh = open(path_or_stream, "w", newline="") if own else path_or_stream
    try:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(fields)
        for row in rows:
            writer.writerow([_fmt(row.get(f)) for f in fields])
    finally:
        if own:
            fh.close()


# ---------------------------------------------------------------------------
# fit container
#
# Layout (little endian):
#   8 bytes   magic b"STRQFIT\x00"
#   u32       format version (1)
#   u32       length L of the JSON metadata
#   L bytes   UTF-8 JSON: dims, n_directions, n_shells, tau, fit_shells,
#             shell_b, options, software
#   f64       directions, K x 3
#   i32       members, K x n_shells (-1 = direction absent on that shell)
#   f64       s0, one per voxel
#   u8        mask, one per voxel
#   records   one per voxel and direction: D f64, alpha f64, rss f64,
#             n_iter u32, flags u8 (bit 0 converged, 1 D at bound,
#             2 alpha at bound, 3 degraded initialisation)
# Voxels run x fastest; within a voxel, records run over directions.

FIT_MAGIC = b"STRQFIT\x00"
FIT_VERSION = 1
_RECORD = np.dtype([("D", "<f8"), ("alpha", "<f8"), ("rss", "<f8"), ("n_iter", "<u4"), ("flags", "u1")])


def _xfast(arr):
    # (X, Y, Z, ...) -> flat with x fastest over voxels
    arr = np.asarray(arr)
    return np.transpose(arr, (2, 1, 0) + tuple(range(3, arr.ndim))).reshape(-1, *arr.shape[3:])


def _unxfast(flat, dims, tail=()):
    X, Y, Z = dims
    return np.transpose(np.asarray(flat).reshape((Z, Y, X) + tuple(tail)), (2, 1, 0) + tuple(range(3, 3 + len(tail))))


def write_fit(fit, path, software="", affine=None):
    """Persist a :class:`~stretchq.fitting.StretchedFitVolume`.

    ``affine`` (the source volume's voxel-to-world matrix) is stored in the
    metadata so maps computed later keep the geometry.
    """
    X, Y, Z = fit.shape
    K = fit.directions.shape[0]
    meta = {
        "dims": [X, Y, Z],
        "n_directions": K,
        "n_shells": int(fit.shell_b.size),
        "tau": fit.tau,
        "fit_shells": [float(b) for b in fit.fit_shells],
        "shell_b": [float(b) for b in fit.shell_b],
        "options": fit.options.to_dict(),
        "software": software,
    }
    if affine is not None:
        meta["affine"] = [float(v) for v in np.asarray(affine, dtype=float).reshape(-1)]
    js = json.dumps(meta, sort_keys=True).encode()
    rec = np.zeros(X * Y * Z * K, dtype=_RECORD)
    for key in ("D", "alpha", "rss", "n_iter", "flags"):
        rec[key] = _xfast(getattr(fit, key)).reshape(-1)
    with open(path, "wb") as fh:
        fh.write(FIT_MAGIC)
        fh.write(np.array([FIT_VERSION, len(js)], dtype="<u4").tobytes())
        fh.write(js)
        fh.write(np.asarray(fit.directions, dtype="<f8").tobytes())
        fh.write(np.asarray(fit.members, dtype="<i4").tobytes())
        fh.write(_xfast(fit.s0).astype("<f8").tobytes())
        fh.write(_xfast(fit.mask).astype("u1").tobytes())
        fh.write(rec.tobytes())


def read_fit(path, with_metadata=False):
    """Load a fit container; optionally also return its JSON metadata."""
    from .fitting import FitOptions, StretchedFitVolume

    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != FIT_MAGIC:
        raise DataError(f"{path}: not a stretchq fit file (magic {raw[:8]!r})")
    version, jlen = np.frombuffer(raw[8:16], dtype="<u4")
    if version != FIT_VERSION:
        raise DataError(f"{path}: unsupported fit format version {version}")
    meta = json.loads(raw[16:16 + jlen])
    X, Y, Z = meta["dims"]
    K, S = meta["n_directions"], meta["n_shells"]
    V = X * Y * Z
    pos = 16 + jlen
    sizes = [("directions", "<f8", K * 3), ("members", "<i4", K * S), ("s0", "<f8", V), ("mask", "u1", V)]
    parts = {}
    for name, dt, n in sizes:
        nbytes = np.dtype(dt).itemsize * n
        if len(raw) < pos + nbytes:
            raise DataError(f"{path}: truncated fit file")
        parts[name] = np.frombuffer(raw, dtype=dt, count=n, offset=pos)
        pos += nbytes
    if len(raw) < pos + V * K * _RECORD.itemsize:
        raise DataError(f"{path}: truncated fit file")
    rec = np.frombuffer(raw, dtype=_RECORD, count=V * K, offset=pos)
    fields = {
        key: _unxfast(rec[key], (X, Y, Z), (K,)).astype(dt)
        for key, dt in (("D", float), ("alpha", float), ("rss", float), ("n_iter", np.int32), ("flags", np.uint8))
    }
    fit = StretchedFitVolume(
        directions=parts["directions"].reshape(K, 3).copy(),
        s0=_unxfast(parts["s0"], (X, Y, Z)).copy(),
        mask=_unxfast(parts["mask"], (X, Y, Z)).astype(bool),
        tau=float(meta["tau"]),
        fit_shells=np.array(meta["fit_shells"], dtype=float),
        shell_b=np.array(meta["shell_b"], dtype=float),
        members=parts["members"].reshape(K, S).astype(int),
        options=FitOptions.from_dict(meta["options"]),
        **fields,
    )
    return (fit, meta) if with_metadata else fit
