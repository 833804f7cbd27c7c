"""On-disk formats: flat float64 arrays, checkpoints, manifests, curves and configs."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .estimator import MaskEstimator
from .wavio import atomic_write, atomic_write_text

ARRAY_MAGIC = b"MCSA"
CHECKPOINT_MAGIC = b"MCSE"
CHECKPOINT_VERSION = 1


class FormatError(ValueError):
    pass


# flat arrays: magic, uint32 T, F, planes, then planes x T x F little-endian float64

def write_planes(path, planes) -> None:
    planes = np.asarray(planes, dtype="<f8")
    if planes.ndim == 2:
        planes = planes[np.newaxis]
    if planes.ndim != 3:
        raise ValueError(f"expected (planes, T, F) array, got shape {planes.shape}")
    n, t, f = planes.shape
    header = ARRAY_MAGIC + struct.pack("<III", t, f, n)
    atomic_write(path, lambda fh: (fh.write(header), fh.write(planes.tobytes(order="C"))))


def read_planes(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if data[:4] != ARRAY_MAGIC:
        raise FormatError(f"{path}: not a plane file")
    t, f, n = struct.unpack("<III", data[4:16])
    body = data[16:]
    if len(body) != 8 * n * t * f:
        raise FormatError(f"{path}: expected {n * t * f} values, found {len(body) // 8}")
    return np.frombuffer(body, dtype="<f8").reshape(n, t, f).astype(np.float64)


def checkpoint_bytes(est: MaskEstimator) -> bytes:
    buf = io.BytesIO()
    mode = est.feature_mode.encode("utf-8")
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<IIII", CHECKPOINT_VERSION, est.n_sources, est.bins, len(est.widths)))
    buf.write(struct.pack(f"<{len(est.widths)}I", *est.widths))
    buf.write(struct.pack("<I", len(mode)) + mode)
    buf.write(struct.pack("<I", est.local is not None))
    for arr in [est.shift, est.scale, *est.parameters()]:
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return buf.getvalue()


def save_checkpoint(path, est: MaskEstimator) -> None:
    data = checkpoint_bytes(est)
    atomic_write(path, lambda fh: fh.write(data))


def load_checkpoint(path) -> MaskEstimator:
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not a checkpoint")
    version, n_src, bins, n_w = struct.unpack("<IIII", data[4:20])
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    pos = 20
    widths = struct.unpack(f"<{n_w}I", data[pos:pos + 4 * n_w])
    pos += 4 * n_w
    (mlen,) = struct.unpack("<I", data[pos:pos + 4])
    mode = data[pos + 4:pos + 4 + mlen].decode("utf-8")
    pos += 4 + mlen
    (has_local,) = struct.unpack("<I", data[pos:pos + 4])
    pos += 4

    def take(shape):
        nonlocal pos
        size = int(np.prod(shape))
        if pos + 8 * size > len(data):
            raise FormatError(f"{path}: truncated checkpoint")
        arr = np.frombuffer(data[pos:pos + 8 * size], dtype="<f8").reshape(shape).astype(np.float64)
        pos += 8 * size
        return arr

    shift = take((widths[0],))
    scale = take((widths[0],))
    weights, biases = [], []
    for a, b in zip(widths[:-1], widths[1:]):
        weights.append(take((a, b)))
        biases.append(take((b,)))
    local = take((n_src, widths[0] // bins)) if has_local else None
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    return MaskEstimator(widths, n_src, bins, weights, biases, shift, scale, mode, local)


# manifests and other line-oriented tables

MANIFEST_FIELDS = ("utt_id", "seed", "index", "bucket", "angle_diff", "azimuths", "room", "t60",
                   "mix", "refs", "dry")


@dataclass(frozen=True)
class ManifestRow:
    utt_id: str
    seed: int
    index: int
    bucket: str
    angle_diff: float
    azimuths: tuple  # radians, source order
    room: tuple  # length, width, height
    t60: float
    mix: str  # paths relative to the workdir
    refs: tuple
    dry: tuple

    def to_line(self) -> str:
        nums = lambda xs: ",".join(repr(float(x)) for x in xs)  # noqa: E731
        return "\t".join([self.utt_id, str(self.seed), str(self.index), self.bucket, repr(float(self.angle_diff)),
                          nums(self.azimuths), nums(self.room), repr(float(self.t60)), self.mix,
                          ",".join(self.refs), ",".join(self.dry)])

    @classmethod
    def from_line(cls, line: str) -> "ManifestRow":
        p = line.rstrip("\n").split("\t")
        if len(p) != len(MANIFEST_FIELDS):
            raise FormatError(f"manifest row has {len(p)} fields, expected {len(MANIFEST_FIELDS)}")
        floats = lambda s: tuple(float(x) for x in s.split(","))  # noqa: E731
        return cls(p[0], int(p[1]), int(p[2]), p[3], float(p[4]), floats(p[5]), floats(p[6]), float(p[7]),
                   p[8], tuple(p[9].split(",")), tuple(p[10].split(",")))


def write_table(path, header: str, lines) -> None:
    atomic_write_text(path, header + "\n" + "".join(line + "\n" for line in lines))


def read_table(path, header: str) -> list:
    text = Path(path).read_text(encoding="utf-8").splitlines()
    if not text or text[0] != header:
        raise FormatError(f"{path}: missing header {header!r}")
    return [line for line in text[1:] if line.strip()]


def write_manifest(path, rows) -> None:
    write_table(path, "\t".join(MANIFEST_FIELDS), [r.to_line() for r in rows])


def read_manifest(path) -> list:
    return [ManifestRow.from_line(line) for line in read_table(path, "\t".join(MANIFEST_FIELDS))]


CURVE_HEADER = "step\tloss\tgrad_norm"


def write_curve(path, curve) -> None:
    write_table(path, CURVE_HEADER, [f"{s}\t{loss!r}\t{g!r}" for s, loss, g in curve])


def read_curve(path) -> list:
    out = []
    for line in read_table(path, CURVE_HEADER):
        s, loss, g = line.split("\t")
        out.append((int(s), float(loss), float(g)))
    return out


def parse_config(text: str) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"config line {n}: expected key=value, got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key:
            raise FormatError(f"config line {n}: empty key")
        out[key.replace("-", "_")] = value
    return out
