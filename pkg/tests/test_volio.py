import numpy as np
import pytest

from promptseg.errors import BadChecksum, DimMismatch, MissingHeader
from promptseg.grids import LabelMap, LogitTensor, Volume
from promptseg.volio import (
    load_labelmap,
    load_logits,
    load_volume,
    read_header,
    save_grid,
    write_header,
)


def f32(data):
    return np.asarray(data, dtype=np.float32).astype(np.float64)


def test_volume_roundtrip_identity(tmp_path):
    path = str(tmp_path / "ramp.vol")
    vol = Volume(f32(np.arange(64.0).reshape(4, 4, 4)), spacing=(1.0, 1.0, 1.0))
    save_grid(vol, path)
    back = load_volume(path)
    assert np.array_equal(back.data, vol.data)
    assert back.spacing == vol.spacing


def test_labelmap_and_logits_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    labels = LabelMap(rng.integers(0, 14, size=(5, 4, 3)).astype(np.uint8), (2.0, 1.0, 1.0))
    lpath = str(tmp_path / "g.vol")
    save_grid(labels, lpath)
    back = load_labelmap(lpath)
    assert np.array_equal(back.data, labels.data)
    assert back.spacing == labels.spacing

    logits = LogitTensor(f32(rng.normal(size=(3, 2, 2, 2))), (1.5, 1.5, 2.0))
    gpath = str(tmp_path / "L.vol")
    save_grid(logits, gpath)
    back2 = load_logits(gpath)
    assert np.array_equal(back2.data, logits.data)
    assert back2.channels == 3


def test_double_roundtrip_bit_identical(tmp_path):
    # after one f32 quantization the payload is a fixed point of save/load
    vol = Volume(np.random.default_rng(1).normal(size=(4, 4, 4)))
    a = str(tmp_path / "a.vol")
    b = str(tmp_path / "b.vol")
    save_grid(vol, a)
    save_grid(load_volume(a), b)
    assert open(a, "rb").read() == open(b, "rb").read()


def test_payload_length_mismatch(tmp_path):
    path = str(tmp_path / "bad.vol")
    with open(path, "wb") as fh:
        raw = np.arange(7, dtype="<f4").tobytes()
        fh.write(raw)
    import zlib

    write_header(
        path + ".hdr",
        {"dims": "2,2,2", "spacing": "1.0,1.0,1.0", "channels": 1, "dtype": "f32",
         "crc32": f"{zlib.crc32(raw):08x}"},
    )
    with pytest.raises(DimMismatch):
        load_volume(path)


def test_missing_header(tmp_path):
    path = str(tmp_path / "orphan.vol")
    with open(path, "wb") as fh:
        fh.write(b"\x00" * 4)
    with pytest.raises(MissingHeader):
        load_volume(path)


def test_checksum_detects_corruption(tmp_path):
    path = str(tmp_path / "c.vol")
    save_grid(Volume(np.ones((2, 2, 2))), path)
    with open(path, "r+b") as fh:
        fh.seek(0)
        fh.write(b"\xff")
    with pytest.raises(BadChecksum):
        load_volume(path)


def test_spacing_preserved_exactly(tmp_path):
    path = str(tmp_path / "big.vol")
    vol = Volume(np.zeros((96, 96, 96)), spacing=(2.0, 1.5, 1.5))
    save_grid(vol, path)
    assert load_volume(path).spacing == (2.0, 1.5, 1.5)


def test_header_parser_ignores_comments(tmp_path):
    path = str(tmp_path / "h.hdr")
    with open(path, "w") as fh:
        fh.write("# comment\nkey=value\n\nother = spaced \n")
    assert read_header(path) == {"key": "value", "other": "spaced"}
