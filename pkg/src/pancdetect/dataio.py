"""On-disk case archive and NIfTI-1 import.

Archive layout::

    <root>/manifest.tsv            case_id <TAB> is_tumor_case
    <root>/<case_id>/header.json   dims, spacing, origin, channels, metadata
    <root>/<case_id>/<channel>.raw little-endian, C order over (z, x, y)
    <root>/<case_id>/label.raw

CT is stored as float32 (``<f4``), masks and the label as uint8.
"""
from __future__ import annotations

import contextlib
import gzip
import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptArchive, DataMissing, WorkdirLocked
from .volume import ANATOMY_CHANNELS, CT, LabeledCase, MultiChannelVolume, Volume3D

CASE_FORMAT = "pancdetect-case/1"
MANIFEST = "manifest.tsv"
HEADER = "header.json"
LABEL = "label"


def _dtype_for(name):
    return np.dtype("<f4") if name == CT else np.dtype("u1")


def _write_atomic(path: Path, data: bytes):
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_case(case: LabeledCase, root) -> Path:
    case_dir = Path(root) / case.case_id
    case_dir.mkdir(parents=True, exist_ok=True)
    channels = []
    for name, ch in zip(case.x.channel_names, case.x.channels):
        dtype = _dtype_for(name)
        fname = f"{name}.raw"
        _write_atomic(case_dir / fname, np.ascontiguousarray(ch.data, dtype=dtype).tobytes())
        channels.append({"name": name, "file": fname, "dtype": dtype.str})
    label_dtype = _dtype_for(LABEL)
    _write_atomic(case_dir / f"{LABEL}.raw", np.ascontiguousarray(case.y.data, dtype=label_dtype).tobytes())
    header = {
        "format": CASE_FORMAT,
        "case_id": case.case_id,
        "dims": list(case.shape),
        "spacing": list(case.x.spacing),
        "origin": list(case.x.origin),
        "is_tumor_case": case.is_tumor_case,
        "channels": channels,
        "label": {"file": f"{LABEL}.raw", "dtype": label_dtype.str},
        "metadata": case.metadata,
    }
    _write_atomic(case_dir / HEADER, json.dumps(header, indent=2, sort_keys=True).encode("utf-8"))
    return case_dir


def _read_array(path: Path, dtype, dims):
    dtype = np.dtype(dtype)
    expected = int(np.prod(dims)) * dtype.itemsize
    try:
        size = path.stat().st_size
    except FileNotFoundError:
        raise CorruptArchive(f"{path}: array file missing") from None
    if size != expected:
        raise CorruptArchive(
            f"{path}: {size} bytes on disk but header dims {tuple(dims)} x {dtype.itemsize} B = {expected}"
        )
    return np.fromfile(path, dtype=dtype).reshape(dims)


def read_case(case_dir) -> LabeledCase:
    case_dir = Path(case_dir)
    try:
        header = json.loads((case_dir / HEADER).read_text())
    except FileNotFoundError:
        raise DataMissing(f"{case_dir}: no {HEADER}") from None
    except json.JSONDecodeError as exc:
        raise CorruptArchive(f"{case_dir}: malformed header ({exc})") from None
    try:
        if header.get("format") != CASE_FORMAT:
            raise CorruptArchive(f"{case_dir}: unknown case format {header.get('format')!r}")
        dims = tuple(int(d) for d in header["dims"])
        spacing, origin = header["spacing"], header["origin"]
        names = [c["name"] for c in header["channels"]]
        if len(set(names)) != len(names):
            raise CorruptArchive(f"{case_dir}: duplicate channel names {names}")
        channels = [
            Volume3D(_read_array(case_dir / c["file"], c["dtype"], dims), spacing, origin)
            for c in header["channels"]
        ]
        label = header["label"]
        y = Volume3D(_read_array(case_dir / label["file"], label["dtype"], dims), spacing, origin)
        return LabeledCase(
            x=MultiChannelVolume(tuple(channels), tuple(names)),
            y=y,
            case_id=header["case_id"],
            is_tumor_case=bool(header["is_tumor_case"]),
            metadata=header.get("metadata", {}),
        )
    except (KeyError, TypeError, ValueError) as exc:
        raise CorruptArchive(f"{case_dir}: invalid header ({exc!r})") from None


def write_manifest(root, entries):
    lines = ["case_id\tis_tumor_case"] + [f"{cid}\t{int(bool(t))}" for cid, t in entries]
    _write_atomic(Path(root) / MANIFEST, ("\n".join(lines) + "\n").encode("utf-8"))


def read_manifest(root):
    """List of ``(case_id, is_tumor_case)`` in archive order."""
    path = Path(root) / MANIFEST
    if not path.exists():
        raise DataMissing(f"{root}: no {MANIFEST}; is this a case archive?")
    rows = path.read_text().splitlines()
    if not rows or rows[0].split("\t") != ["case_id", "is_tumor_case"]:
        raise CorruptArchive(f"{path}: bad manifest header")
    out = []
    for row in rows[1:]:
        if row.strip():
            cid, flag = row.split("\t")
            out.append((cid, flag == "1"))
    return out


def write_archive(cases, root) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    for case in cases:
        write_case(case, root)
    write_manifest(root, [(c.case_id, c.is_tumor_case) for c in cases])
    return root


def read_archive(root, case_ids=None):
    root = Path(root)
    ids = [cid for cid, _ in read_manifest(root)] if case_ids is None else list(case_ids)
    cases = []
    for cid in ids:
        if not (root / cid).is_dir():
            raise DataMissing(f"{root}: case {cid!r} not found")
        cases.append(read_case(root / cid))
    return cases


@contextlib.contextmanager
def workdir_lock(workdir):
    """Exclusive lock file guarding a working directory."""
    path = Path(workdir) / ".lock"
    path.parent.mkdir(parents=True, exist_ok=True)
    try:
        fd = os.open(path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise WorkdirLocked(
            f"{workdir} is locked by another run (remove {path} if that run is dead)"
        ) from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield path
    finally:
        with contextlib.suppress(FileNotFoundError):
            path.unlink()


# -- NIfTI-1 -----------------------------------------------------------------

_NIFTI_DTYPES = {
    2: np.uint8,
    4: np.int16,
    8: np.int32,
    16: np.float32,
    64: np.float64,
    256: np.int8,
    512: np.uint16,
    768: np.uint32,
}
_NIFTI_CODES = {np.dtype(v): k for k, v in _NIFTI_DTYPES.items()}


def _open_maybe_gz(path):
    path = str(path)
    return gzip.open(path, "rb") if path.endswith(".gz") else open(path, "rb")


def read_nifti(path) -> Volume3D:
    """Read a single-file NIfTI-1 volume into (z, x, y) order.

    Applies ``scl_slope``/``scl_inter`` when the slope is non-zero. Only
    ``pixdim`` is used for geometry; orientation matrices are ignored.
    """
    with _open_maybe_gz(path) as fh:
        raw = fh.read()
    if len(raw) < 348:
        raise CorruptArchive(f"{path}: too short for a NIfTI-1 header")
    endian = "<" if struct.unpack("<i", raw[:4])[0] == 348 else ">"
    if struct.unpack(endian + "i", raw[:4])[0] != 348:
        raise CorruptArchive(f"{path}: not a NIfTI-1 file")
    if raw[344:347] not in (b"n+1", b"ni1"):
        raise CorruptArchive(f"{path}: bad NIfTI magic {raw[344:348]!r}")
    dim = struct.unpack(endian + "8h", raw[40:56])
    datatype = struct.unpack(endian + "h", raw[70:72])[0]
    pixdim = struct.unpack(endian + "8f", raw[76:108])
    vox_offset = int(struct.unpack(endian + "f", raw[108:112])[0])
    slope, inter = struct.unpack(endian + "2f", raw[112:120])
    if dim[0] < 3 or any(d > 1 for d in dim[4 : dim[0] + 1]):
        raise CorruptArchive(f"{path}: expected a 3D volume, dim={dim}")
    if datatype not in _NIFTI_DTYPES:
        raise CorruptArchive(f"{path}: unsupported NIfTI datatype {datatype}")
    nx, ny, nz = dim[1:4]
    dtype = np.dtype(_NIFTI_DTYPES[datatype]).newbyteorder(endian)
    count = nx * ny * nz
    if len(raw) < vox_offset + count * dtype.itemsize:
        raise CorruptArchive(f"{path}: voxel data truncated")
    data = np.frombuffer(raw, dtype=dtype, count=count, offset=vox_offset)
    data = data.reshape((nx, ny, nz), order="F").transpose(2, 0, 1)
    if slope not in (0.0, 1.0) or inter != 0.0:
        data = data.astype(np.float32) * (slope or 1.0) + inter
    spacing = (abs(pixdim[3]) or 1.0, abs(pixdim[1]) or 1.0, abs(pixdim[2]) or 1.0)
    return Volume3D(np.ascontiguousarray(data.astype(data.dtype.newbyteorder("="))), spacing)


def write_nifti(path, vol: Volume3D):
    """Write a minimal single-file little-endian NIfTI-1 volume."""
    data = np.asarray(vol.data)
    dtype = np.dtype(data.dtype).newbyteorder("<")
    code = _NIFTI_CODES.get(np.dtype(data.dtype.newbyteorder("=")))
    if code is None:
        raise ValueError(f"cannot store dtype {data.dtype} in NIfTI")
    nz, nx, ny = data.shape
    hdr = bytearray(352)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, nx, ny, nz, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, code, dtype.itemsize * 8)
    sz, sx, sy = vol.spacing
    struct.pack_into("<8f", hdr, 76, 1.0, sx, sy, sz, 1.0, 1.0, 1.0, 1.0)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    hdr[344:348] = b"n+1\x00"
    body = np.ascontiguousarray(data.transpose(1, 2, 0)).astype(dtype).tobytes(order="F")
    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "wb") as fh:
        fh.write(bytes(hdr) + body)


def import_nifti_case(case_id, ct, pancreas, pancreatic_duct, common_bile_duct, label=None,
                      pancreatic_duct_dilated=None, common_bile_duct_dilated=None) -> LabeledCase:
    """Build a four-channel case from NIfTI files (label optional: all-zero)."""
    vols = [read_nifti(p) for p in (ct, pancreas, pancreatic_duct, common_bile_duct)]
    vols = [vols[0].with_data(vols[0].data.astype(np.float32))] + [
        v.with_data((v.data != 0).astype(np.uint8), spacing=vols[0].spacing) for v in vols[1:]
    ]
    if label is not None:
        y = read_nifti(label)
        y = y.with_data((y.data != 0).astype(np.uint8), spacing=vols[0].spacing)
    else:
        y = vols[0].with_data(np.zeros(vols[0].shape, dtype=np.uint8))
    metadata = {"source": "nifti", "files": [str(p) for p in (ct, pancreas, pancreatic_duct, common_bile_duct, label) if p]}
    if pancreatic_duct_dilated is not None:
        metadata["pancreatic_duct_dilated"] = bool(pancreatic_duct_dilated)
    if common_bile_duct_dilated is not None:
        metadata["common_bile_duct_dilated"] = bool(common_bile_duct_dilated)
    return LabeledCase(
        x=MultiChannelVolume(tuple(vols), ANATOMY_CHANNELS),
        y=y,
        case_id=case_id,
        is_tumor_case=bool(y.data.any()),
        metadata=metadata,
    )
