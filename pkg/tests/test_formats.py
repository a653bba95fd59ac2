"""Checkpoint, internals, and image files: byte contracts and corruption."""

import struct
import zlib

import numpy as np
import pytest

from selfguide.formats import (read_checkpoint, read_internals, read_ppm,
                               write_checkpoint, write_internals, write_ppm)
from selfguide.sampler import InternalsSequence

from test_denoiser import mini_model, rand_input


def small_tensors():
    rng = np.random.default_rng(0)
    return {
        "w3": rng.standard_normal((2, 3, 4)).astype(np.float32),
        "bias": rng.standard_normal(5).astype(np.float32),
        "scalar_step": np.float32(41.0),
    }


def recorded_sequence(provenance="sampled"):
    m = mini_model()
    z, ids = rand_input()
    seq = InternalsSequence(provenance=provenance)
    for t in (5, 1):
        _, internals = m.forward(z, t, ids, record=True)
        seq.append(t, internals.detached())
    return seq


# -- checkpoints -------------------------------------------------------------

def test_checkpoint_round_trip_is_byte_identical(tmp_path):
    p1, p2 = tmp_path / "a.sgdf", tmp_path / "b.sgdf"
    tensors = small_tensors()
    write_checkpoint(p1, tensors)
    loaded = read_checkpoint(p1)
    assert list(loaded) == list(tensors)
    for name in tensors:
        assert np.array_equal(loaded[name], np.asarray(tensors[name], np.float32))
    assert loaded["scalar_step"].shape == ()
    write_checkpoint(p2, loaded)
    assert p1.read_bytes() == p2.read_bytes()


def test_checkpoint_rejects_flipped_byte(tmp_path):
    p = tmp_path / "a.sgdf"
    write_checkpoint(p, small_tensors())
    data = bytearray(p.read_bytes())
    data[len(data) // 2] ^= 0xFF
    p.write_bytes(bytes(data))
    with pytest.raises(ValueError, match="checksum"):
        read_checkpoint(p)


def test_checkpoint_rejects_wrong_magic(tmp_path):
    p = tmp_path / "a.sgdf"
    p.write_bytes(b"NOPE" + b"\x00" * 20)
    with pytest.raises(ValueError, match="magic"):
        read_checkpoint(p)


def test_checkpoint_rejects_future_version(tmp_path):
    p = tmp_path / "a.sgdf"
    write_checkpoint(p, small_tensors())
    body = bytearray(p.read_bytes()[:-4])
    struct.pack_into("<I", body, 4, 99)
    p.write_bytes(bytes(body) + struct.pack("<I", zlib.crc32(bytes(body))))
    with pytest.raises(ValueError, match="version"):
        read_checkpoint(p)


# -- internals dumps ---------------------------------------------------------

def test_internals_round_trip_is_byte_identical(tmp_path):
    p1, p2 = tmp_path / "a.sgin", tmp_path / "b.sgin"
    seq = recorded_sequence()
    write_internals(p1, seq)
    loaded = read_internals(p1)
    assert loaded.provenance == "sampled"
    assert loaded.timesteps == [5, 1]
    for (t0, orig), (t1, back) in zip(seq.steps, loaded.steps):
        assert t0 == t1
        assert orig.layer_meta == back.layer_meta
        for a, b in zip(orig.attn, back.attn):
            assert np.array_equal(a.data, b.data)
        for a, b in zip(orig.acts, back.acts):
            assert np.array_equal(a.data, b.data)
    write_internals(p2, loaded)
    assert p1.read_bytes() == p2.read_bytes()


def test_internals_keep_provenance(tmp_path):
    p = tmp_path / "x.sgin"
    write_internals(p, recorded_sequence(provenance="extracted"))
    assert read_internals(p).provenance == "extracted"


def test_internals_reject_corruption(tmp_path):
    p = tmp_path / "x.sgin"
    write_internals(p, recorded_sequence())
    data = bytearray(p.read_bytes())
    data[40] ^= 0x01
    p.write_bytes(bytes(data))
    with pytest.raises(ValueError, match="checksum"):
        read_internals(p)


# -- images ------------------------------------------------------------------

def test_ppm_round_trip_exact(tmp_path):
    p1, p2 = tmp_path / "a.ppm", tmp_path / "b.ppm"
    # every value sits exactly on the 8-bit grid, so a round trip is lossless
    levels = np.arange(48, dtype=np.float32).reshape(3, 4, 4) * 5
    img = levels / 127.5 - 1.0
    write_ppm(p1, img)
    back = read_ppm(p1)
    assert np.array_equal(back, img.astype(np.float32))
    write_ppm(p2, back)
    assert p1.read_bytes() == p2.read_bytes()


def test_ppm_clips_out_of_range_values(tmp_path):
    p = tmp_path / "a.ppm"
    img = np.zeros((3, 2, 2), dtype=np.float32)
    img[0, 0, 0], img[1, 1, 1] = 9.0, -9.0
    write_ppm(p, img)
    back = read_ppm(p)
    assert back[0, 0, 0] == pytest.approx(1.0)
    assert back[1, 1, 1] == pytest.approx(-1.0)


def test_ppm_header_comments_are_skipped(tmp_path):
    p = tmp_path / "c.ppm"
    pix = bytes(range(12))
    p.write_bytes(b"P6\n# made elsewhere\n2 2\n255\n" + pix)
    img = read_ppm(p)
    assert img.shape == (3, 2, 2)
    assert np.array_equal(
        np.round((img + 1.0) * 127.5).astype(np.uint8).transpose(1, 2, 0).ravel(),
        np.frombuffer(pix, np.uint8))


def test_ppm_rejects_non_p6(tmp_path):
    p = tmp_path / "bad.ppm"
    p.write_bytes(b"P5\n2 2\n255\n" + bytes(4))
    with pytest.raises(ValueError, match="PPM"):
        read_ppm(p)


def test_ppm_requires_three_channels(tmp_path):
    with pytest.raises(ValueError, match="3xHxW"):
        write_ppm(tmp_path / "x.ppm", np.zeros((1, 4, 4)))
