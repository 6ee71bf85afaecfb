import gzip
import json
import struct

import numpy as np
import pytest

from pancdetect import dataio
from pancdetect.errors import CorruptArchive, DataMissing, WorkdirLocked
from pancdetect.volume import CT, PANCREAS, Volume3D


def test_case_round_trip(tmp_path, tumor_case):
    dataio.write_archive([tumor_case], tmp_path)
    back = dataio.read_archive(tmp_path)[0]
    assert back.case_id == tumor_case.case_id
    assert back.x.channel_names == tumor_case.x.channel_names
    assert back.x.spacing == tumor_case.x.spacing
    for name in back.x.channel_names:
        assert back.x[name].data.tobytes() == tumor_case.x[name].data.tobytes()
    assert back.y.data.tobytes() == tumor_case.y.data.tobytes()
    assert back.metadata["pancreatic_duct_dilated"] is True
    assert dataio.read_manifest(tmp_path) == [(tumor_case.case_id, True)]


def test_corrupt_header(tmp_path, tumor_case):
    dataio.write_case(tumor_case, tmp_path)
    header = tmp_path / tumor_case.case_id / "header.json"
    header.write_text("{not json")
    with pytest.raises(CorruptArchive):
        dataio.read_case(header.parent)
    header.write_text(json.dumps({"format": "other"}))
    with pytest.raises(CorruptArchive):
        dataio.read_case(header.parent)


def test_truncated_payload(tmp_path, tumor_case):
    case_dir = dataio.write_case(tumor_case, tmp_path)
    raw = case_dir / f"{PANCREAS}.raw"
    raw.write_bytes(raw.read_bytes()[:-5])
    with pytest.raises(CorruptArchive):
        dataio.read_case(case_dir)


def test_missing_data(tmp_path):
    with pytest.raises(DataMissing):
        dataio.read_manifest(tmp_path)
    with pytest.raises(DataMissing):
        dataio.read_case(tmp_path / "nothing")


def test_workdir_lock(tmp_path):
    with dataio.workdir_lock(tmp_path), pytest.raises(WorkdirLocked):
        with dataio.workdir_lock(tmp_path):
            pass
    assert not (tmp_path / ".lock").exists()


@pytest.mark.parametrize("suffix", [".nii", ".nii.gz"])
def test_nifti_round_trip(tmp_path, suffix):
    data = np.arange(2 * 3 * 4, dtype=np.float32).reshape(2, 3, 4)
    vol = Volume3D(data, (3.0, 1.0, 2.0))
    path = tmp_path / f"v{suffix}"
    dataio.write_nifti(path, vol)
    back = dataio.read_nifti(path)
    np.testing.assert_array_equal(back.data, data)
    assert back.spacing == (3.0, 1.0, 2.0)


def test_nifti_layout_and_scaling(tmp_path):
    # Hand-built header: dims (nx, ny, nz) = (2, 1, 3), int16 with slope 2, intercept -1.
    hdr = bytearray(352)
    struct.pack_into("<i", hdr, 0, 348)
    struct.pack_into("<8h", hdr, 40, 3, 2, 1, 3, 1, 1, 1, 1)
    struct.pack_into("<hh", hdr, 70, 4, 16)
    struct.pack_into("<8f", hdr, 76, 1, 0.5, 0.6, 2.5, 1, 1, 1, 1)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<2f", hdr, 112, 2.0, -1.0)
    hdr[344:348] = b"n+1\x00"
    body = np.arange(6, dtype="<i2").tobytes()  # x fastest, then y, then z
    path = tmp_path / "h.nii.gz"
    with gzip.open(path, "wb") as fh:
        fh.write(bytes(hdr) + body)
    vol = dataio.read_nifti(path)
    assert vol.shape == (3, 2, 1)
    assert vol.spacing == pytest.approx((2.5, 0.5, 0.6))
    # voxel (z=k, x=i) holds raw value i + 2k, scaled by 2 and shifted by -1
    for k in range(3):
        for i in range(2):
            assert vol.data[k, i, 0] == 2 * (i + 2 * k) - 1


def test_nifti_rejects_garbage(tmp_path):
    path = tmp_path / "bad.nii"
    path.write_bytes(b"\x00" * 400)
    with pytest.raises(CorruptArchive):
        dataio.read_nifti(path)


def test_import_nifti_case(tmp_path):
    shape = (4, 5, 6)
    ct = Volume3D(np.random.default_rng(0).normal(size=shape).astype(np.float32), (2, 2, 2))
    mask = np.zeros(shape, np.uint8)
    mask[1:3, 1:4, 2:5] = 1
    paths = {}
    for name, data in (("ct", ct.data), ("p", mask), ("pd", mask), ("cbd", mask), ("y", mask * 0)):
        paths[name] = tmp_path / f"{name}.nii"
        dataio.write_nifti(paths[name], ct.with_data(data))
    case = dataio.import_nifti_case("n1", paths["ct"], paths["p"], paths["pd"], paths["cbd"], paths["y"], True, False)
    assert not case.is_tumor_case
    np.testing.assert_allclose(case.x[CT].data, ct.data)
    assert case.metadata["pancreatic_duct_dilated"] is True
    assert case.metadata["common_bile_duct_dilated"] is False
