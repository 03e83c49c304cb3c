"""Binary artifact formats.

Three little-endian container formats, each identified by a 4-byte magic and a
u32 version:

EHF1  coefficient fields: u32 d, u32 N, f64 h, then N^d cells in row-major
      order with d(d+1)/2 upper-triangular f64 entries per cell, then N^d f64
      lambda values, then N^d f64 Lambda values.
CHI1  corrector fields: u32 d, u32 N, f64 h, then d scalar fields of N^d f64
      (row-major), one per coordinate.
WLK1  walk traces: one block per path; block header = magic, u32 version,
      u32 d, u64 path id, u64 record count; each record = f64 time followed by
      d x i64 unwrapped cell coordinates. (The record count is not part of the
      spec'd header fields but something must delimit blocks in a stream; a
      length prefix is the plainest choice.)

write -> read round-trips are bit-identical; golden byte tests pin the layout.
"""

import struct

import numpy as np

from .errors import FormatError

EHF1_MAGIC = b"EHF1"
CHI1_MAGIC = b"CHI1"
WLK1_MAGIC = b"WLK1"
VERSION = 1


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated {what}: wanted {n} bytes, got {len(buf)}")
    return buf


def _check_header(fh, magic):
    got = _read_exact(fh, 4, "magic")
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    (ver,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
    if ver != VERSION:
        raise FormatError(f"unsupported {magic.decode()} version {ver}")


def write_ehf1(path, field):
    with open(path, "wb") as fh:
        fh.write(EHF1_MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<II", field.d, field.cells_per_side))
        fh.write(struct.pack("<d", field.spacing))
        ntri = field.d * (field.d + 1) // 2
        fh.write(np.ascontiguousarray(
            field.entries, dtype="<f8").reshape(-1, ntri).tobytes())
        fh.write(np.ascontiguousarray(field.lam, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(field.Lam, dtype="<f8").tobytes())


def read_ehf1(path):
    from .environment import CoefficientField
    with open(path, "rb") as fh:
        _check_header(fh, EHF1_MAGIC)
        d, n = struct.unpack("<II", _read_exact(fh, 8, "dims"))
        (h,) = struct.unpack("<d", _read_exact(fh, 8, "spacing"))
        ntri = d * (d + 1) // 2
        m = n ** d
        shape = (n,) * d
        entries = np.frombuffer(
            _read_exact(fh, 8 * m * ntri, "entries"), dtype="<f8"
        ).reshape(shape + (ntri,)).copy()
        lam = np.frombuffer(
            _read_exact(fh, 8 * m, "lambda"), dtype="<f8").reshape(shape).copy()
        Lam = np.frombuffer(
            _read_exact(fh, 8 * m, "Lambda"), dtype="<f8").reshape(shape).copy()
        trailing = fh.read(1)
        if trailing:
            raise FormatError("trailing bytes after EHF1 payload")
    return CoefficientField(d, n, h, entries, lam, Lam, model="custom")


def write_chi1(path, d, n, h, chis):
    chis = np.asarray(chis, dtype="<f8")
    if chis.shape != (d,) + (n,) * d:
        raise FormatError(f"corrector stack has shape {chis.shape}, "
                          f"expected {(d,) + (n,) * d}")
    with open(path, "wb") as fh:
        fh.write(CHI1_MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<II", d, n))
        fh.write(struct.pack("<d", h))
        for k in range(d):
            fh.write(np.ascontiguousarray(chis[k], dtype="<f8").tobytes())


def read_chi1(path):
    with open(path, "rb") as fh:
        _check_header(fh, CHI1_MAGIC)
        d, n = struct.unpack("<II", _read_exact(fh, 8, "dims"))
        (h,) = struct.unpack("<d", _read_exact(fh, 8, "spacing"))
        m = n ** d
        chis = np.empty((d,) + (n,) * d)
        for k in range(d):
            chis[k] = np.frombuffer(
                _read_exact(fh, 8 * m, f"chi^{k + 1}"), dtype="<f8"
            ).reshape((n,) * d)
        trailing = fh.read(1)
        if trailing:
            raise FormatError("trailing bytes after CHI1 payload")
    return d, n, h, chis


def write_wlk1(path, d, times, positions, path_ids=None):
    """positions: int64 array (paths, len(times), d), unwrapped."""
    positions = np.asarray(positions, dtype="<i8")
    times = np.asarray(times, dtype="<f8")
    n_paths = positions.shape[0]
    if path_ids is None:
        path_ids = range(n_paths)
    with open(path, "wb") as fh:
        for pid, idx in zip(path_ids, range(n_paths)):
            fh.write(WLK1_MAGIC)
            fh.write(struct.pack("<I", VERSION))
            fh.write(struct.pack("<I", d))
            fh.write(struct.pack("<QQ", pid, len(times)))
            # interleave as raw bytes: f64 time then d x i64 per record
            buf = bytearray()
            for t_idx in range(len(times)):
                buf += struct.pack("<d", float(times[t_idx]))
                buf += positions[idx, t_idx].astype("<i8").tobytes()
            fh.write(bytes(buf))


def read_wlk1(path):
    """Returns list of (path_id, times array, positions array (T, d))."""
    out = []
    with open(path, "rb") as fh:
        while True:
            magic = fh.read(4)
            if not magic:
                break
            if magic != WLK1_MAGIC:
                raise FormatError(f"bad magic {magic!r} in walk trace")
            (ver,) = struct.unpack("<I", _read_exact(fh, 4, "version"))
            if ver != VERSION:
                raise FormatError(f"unsupported WLK1 version {ver}")
            (d,) = struct.unpack("<I", _read_exact(fh, 4, "dimension"))
            pid, n_rec = struct.unpack("<QQ", _read_exact(fh, 16, "block header"))
            rec_bytes = _read_exact(fh, n_rec * (8 + 8 * d), "records")
            times = np.empty(n_rec)
            pos = np.empty((n_rec, d), dtype=np.int64)
            stride = 8 + 8 * d
            for i in range(n_rec):
                chunk = rec_bytes[i * stride:(i + 1) * stride]
                (times[i],) = struct.unpack("<d", chunk[:8])
                pos[i] = np.frombuffer(chunk[8:], dtype="<i8")
            out.append((pid, times, pos))
    return out
