import hashlib
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from pgps.volume import (
    FormatError,
    GenerationError,
    LabelVolume,
    Volume,
    load_labels,
    load_volume,
    save_labels,
    save_volume,
    synth_blobs,
)


def test_roundtrip_small(tmp_path):
    vol = Volume(np.arange(64, dtype=np.float32).reshape(4, 4, 4) / 7)
    save_volume(vol, tmp_path / "v.vol")
    assert load_volume(tmp_path / "v.vol") == vol


def test_header_layout(tmp_path):
    vol = Volume(np.ones((2, 3, 4), np.float32))
    save_volume(vol, tmp_path / "v.vol")
    raw = (tmp_path / "v.vol").read_bytes()
    assert raw[:16] == b"PGPSVOL1" + b"\0" * 8
    assert struct.unpack_from("<3Q", raw, 16) == (2, 3, 4)
    assert len(raw) == 16 + 24 + 4 * 24


def test_truncated(tmp_path):
    vol = Volume(np.zeros((4, 4, 4), np.float32))
    path = tmp_path / "v.vol"
    save_volume(vol, path)
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(FormatError, match="truncated payload at byte offset 293"):
        load_volume(path)
    path.write_bytes(b"PGPSVOL1")
    with pytest.raises(FormatError, match="byte offset 8"):
        load_volume(path)


def test_bad_magic_and_dims(tmp_path):
    path = tmp_path / "v.vol"
    path.write_bytes(b"NOTAVOLUME000000" + b"\0" * 24)
    with pytest.raises(FormatError, match="magic mismatch at byte offset 0"):
        load_volume(path)
    path.write_bytes(b"PGPSVOL1".ljust(16, b"\0") + struct.pack("<3Q", 1, 2**40, 1))
    with pytest.raises(FormatError, match="byte offset 24"):
        load_volume(path)
    path.write_bytes(b"PGPSLAB1".ljust(16, b"\0") + struct.pack("<3Q", 1, 1, 1))
    with pytest.raises(FormatError, match="magic mismatch"):
        load_volume(path)


def test_labels_roundtrip(tmp_path):
    lab = LabelVolume(np.array([0, 1, 2, 1] * 16, np.uint8).reshape(4, 4, 4), n_classes=3)
    save_labels(lab, tmp_path / "l.lab")
    raw = (tmp_path / "l.lab").read_bytes()
    assert raw[:8] == b"PGPSLAB1" and struct.unpack_from("<Q", raw, 40) == (3,)
    assert load_labels(tmp_path / "l.lab") == lab


def test_label_range_checked():
    with pytest.raises(ValueError):
        LabelVolume(np.full((2, 2, 2), 2, np.uint8), n_classes=2)


def test_non_finite_rejected():
    data = np.zeros((2, 2, 2), np.float32)
    data[0, 0, 0] = np.nan
    with pytest.raises(ValueError):
        Volume(data)


@settings(max_examples=25, deadline=None)
@given(
    arrays(
        np.float32,
        st.tuples(st.integers(1, 6), st.integers(1, 6), st.integers(1, 6)),
        elements=st.floats(-1e6, 1e6, width=32),
    )
)
def test_roundtrip_property(tmp_path_factory, data):
    path = tmp_path_factory.mktemp("rt") / "v.vol"
    vol = Volume(data)
    save_volume(vol, path)
    assert load_volume(path).data.tobytes() == data.tobytes()


def test_blob_roundtrip_checksum(tmp_path):
    vol, lab = synth_blobs((64, 64, 64), 3, (4, 10), seed=7)
    before = hashlib.sha256(vol.data.tobytes()).hexdigest()
    save_volume(vol, tmp_path / "b.vol")
    save_labels(lab, tmp_path / "b.lab")
    assert hashlib.sha256(load_volume(tmp_path / "b.vol").data.tobytes()).hexdigest() == before
    assert load_labels(tmp_path / "b.lab") == lab


def test_blobs_empty():
    _, lab = synth_blobs((16, 16, 16), 0, (2, 3), seed=1)
    assert not lab.labels.any()


def test_blobs_deterministic():
    a = synth_blobs((32, 32, 32), 2, (3, 6), seed=5)
    b = synth_blobs((32, 32, 32), 2, (3, 6), seed=5)
    assert a[0] == b[0] and a[1] == b[1]
    c = synth_blobs((32, 32, 32), 2, (3, 6), seed=6)
    assert not (a[0] == c[0])


def test_blobs_seed7_foreground_fraction():
    vol, lab = synth_blobs((64, 64, 64), 3, (4, 10), seed=7)
    assert 0.001 < lab.foreground_fraction < 0.2
    # frozen regression value
    assert lab.foreground_fraction == pytest.approx(0.015506744384765625)


@pytest.mark.parametrize("seed", range(6))
def test_blobs_intensity_consistency(seed):
    vol, lab = synth_blobs((32, 40, 24), 4, (2, 6), seed=seed)
    fg = lab.labels == 1
    assert np.all(vol.data[fg] >= 0.6) and np.all(vol.data[fg] <= 1.0)
    assert np.all(vol.data[~fg] <= 0.3) and np.all(vol.data[~fg] >= 0.0)


def test_blobs_impossible_geometry():
    with pytest.raises(GenerationError):
        synth_blobs((8, 8, 8), 1, (3, 5), seed=0)
