"""Bit-exact binary file formats.

Checkpoints ("SGDF") hold named float32 tensors; internals dumps
("SGIN") hold per-timestep attention maps and activations.  Both are
little-endian with a fixed field order and a trailing CRC32 over every
preceding byte, so save -> load -> save is byte-identical and
corruption is detected on read.  Images use binary PPM (P6, maxval
255), chosen because it can be emitted and compared byte for byte
with no image library in the loop.
"""

import struct
import zlib

import numpy as np

CHECKPOINT_MAGIC = b"SGDF"
INTERNALS_MAGIC = b"SGIN"
FORMAT_VERSION = 1

_PROVENANCE = {"sampled": 0, "extracted": 1}
_PROVENANCE_NAMES = {v: k for k, v in _PROVENANCE.items()}
_POSITIONS = {"encoder": 0, "bottleneck": 1, "decoder": 2}
_POSITION_NAMES = {v: k for k, v in _POSITIONS.items()}


def _finish(chunks):
    body = b"".join(chunks)
    return body + struct.pack("<I", zlib.crc32(body))


def _check(data, magic):
    if len(data) < 12 or data[:4] != magic:
        raise ValueError(f"bad magic; expected {magic!r}")
    body, tail = data[:-4], data[-4:]
    if zlib.crc32(body) != struct.unpack("<I", tail)[0]:
        raise ValueError("checksum mismatch")
    version = struct.unpack_from("<I", body, 4)[0]
    if version != FORMAT_VERSION:
        raise ValueError(f"unsupported format version {version}")
    return body


def write_checkpoint(path, tensors):
    """tensors: dict name -> array-like; stored as float32 in name order
    given (order is part of the byte contract)."""
    chunks = [CHECKPOINT_MAGIC, struct.pack("<II", FORMAT_VERSION, len(tensors))]
    for name, value in tensors.items():
        arr = np.asarray(value, dtype="<f4", order="C")  # keeps 0-dim scalars 0-dim
        enc = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(enc)))
        chunks.append(enc)
        chunks.append(struct.pack("<B", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape) if arr.ndim else b"")
        chunks.append(arr.tobytes())
    with open(path, "wb") as f:
        f.write(_finish(chunks))


def read_checkpoint(path):
    with open(path, "rb") as f:
        body = _check(f.read(), CHECKPOINT_MAGIC)
    count = struct.unpack_from("<I", body, 8)[0]
    off = 12
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", body, off)
        off += 2
        name = body[off:off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<B", body, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}I", body, off) if ndim else ()
        off += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(shape).copy()
        off += 4 * n
        tensors[name] = arr
    return tensors


def write_internals(path, seq):
    """Serialize an InternalsSequence (detached tensors only)."""
    chunks = [INTERNALS_MAGIC,
              struct.pack("<IBI", FORMAT_VERSION, _PROVENANCE[seq.provenance], len(seq.steps))]
    for t, internals in seq.steps:
        chunks.append(struct.pack("<IHH", t, len(internals.attn), len(internals.acts)))
        for a, (pos, res, idx) in zip(internals.attn, internals.layer_meta):
            h, w, k = a.data.shape
            chunks.append(struct.pack("<BHBIII", _POSITIONS[pos], res, idx, h, w, k))
            chunks.append(np.ascontiguousarray(a.data, dtype="<f4").tobytes())
        for m in internals.acts:
            h, w, d = m.data.shape
            chunks.append(struct.pack("<III", h, w, d))
            chunks.append(np.ascontiguousarray(m.data, dtype="<f4").tobytes())
    with open(path, "wb") as f:
        f.write(_finish(chunks))


def read_internals(path):
    from .autodiff import Tensor
    from .denoiser import ModelInternals
    from .sampler import InternalsSequence

    with open(path, "rb") as f:
        body = _check(f.read(), INTERNALS_MAGIC)
    prov, nsteps = struct.unpack_from("<BI", body, 8)
    off = 13
    seq = InternalsSequence(provenance=_PROVENANCE_NAMES[prov])
    for _ in range(nsteps):
        t, n_attn, n_acts = struct.unpack_from("<IHH", body, off)
        off += 8
        internals = ModelInternals()
        for _ in range(n_attn):
            pos, res, idx, h, w, k = struct.unpack_from("<BHBIII", body, off)
            off += 16
            n = h * w * k
            arr = np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(h, w, k).copy()
            off += 4 * n
            internals.attn.append(Tensor(arr))
            internals.layer_meta.append((_POSITION_NAMES[pos], res, idx))
        for _ in range(n_acts):
            h, w, d = struct.unpack_from("<III", body, off)
            off += 12
            n = h * w * d
            arr = np.frombuffer(body, dtype="<f4", count=n, offset=off).reshape(h, w, d).copy()
            off += 4 * n
            internals.acts.append(Tensor(arr))
        seq.append(t, internals)
    return seq


def write_ppm(path, image):
    """image: 3xHxW in [-1,1] -> binary P6, maxval 255."""
    img = np.asarray(image)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError("expected a 3xHxW image")
    _, h, w = img.shape
    bytes_ = np.clip(np.round((img + 1.0) * 127.5), 0, 255).astype(np.uint8)
    with open(path, "wb") as f:
        f.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        f.write(bytes_.transpose(1, 2, 0).tobytes())


def read_ppm(path):
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(b"P6"):
        raise ValueError("not a binary PPM file")
    # header: magic, width, height, maxval, single whitespace, then pixels
    fields = []
    off = 2
    while len(fields) < 3:
        while off < len(data) and data[off:off + 1].isspace():
            off += 1
        if data[off:off + 1] == b"#":  # comment line
            off = data.index(b"\n", off) + 1
            continue
        start = off
        while off < len(data) and not data[off:off + 1].isspace():
            off += 1
        fields.append(int(data[start:off]))
    off += 1
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError("only maxval 255 supported")
    pix = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=off)
    return pix.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float32) / 127.5 - 1.0
