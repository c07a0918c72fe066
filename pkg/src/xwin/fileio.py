"""Volume and projection file formats.

Both formats share a 64-byte ASCII header line (space padded, newline
terminated) followed by little-endian float32 payload, x/u fastest:

    XWINVOL1 nx ny nz sx sy sz ox oy oz
    XWINPRJ1 nu nv pitch
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .phantoms import VoxelVolume
from .projector import ProjectionImage

HEADER_BYTES = 64
VOL_MAGIC = "XWINVOL1"
PRJ_MAGIC = "XWINPRJ1"


class FileFormatError(ValueError):
    pass


def _pack_header(fields) -> bytes:
    line = " ".join(str(f) for f in fields)
    if len(line) > HEADER_BYTES - 1:
        raise FileFormatError(f"header too long ({len(line) + 1} > {HEADER_BYTES} bytes)")
    return (line.ljust(HEADER_BYTES - 1) + "\n").encode("ascii")


def _read_header(raw: bytes, magic: str, path) -> list[str]:
    if len(raw) < HEADER_BYTES:
        raise FileFormatError(f"{path}: truncated header")
    header = raw[:HEADER_BYTES].decode("ascii", errors="replace")
    fields = header.split()
    if not fields or fields[0] != magic:
        raise FileFormatError(f"{path}: bad magic, expected {magic}")
    return fields[1:]


def save_volume(path, vol: VoxelVolume) -> None:
    fields = [VOL_MAGIC, vol.nx, vol.ny, vol.nz, *[float(s) for s in vol.spacing],
              *[float(o) for o in vol.origin]]
    payload = vol.data.astype("<f4").tobytes(order="C")
    Path(path).write_bytes(_pack_header(fields) + payload)


def load_volume(path) -> VoxelVolume:
    raw = Path(path).read_bytes()
    fields = _read_header(raw, VOL_MAGIC, path)
    if len(fields) != 9:
        raise FileFormatError(f"{path}: expected 9 header fields, got {len(fields)}")
    nx, ny, nz = (int(f) for f in fields[:3])
    spacing = tuple(float(f) for f in fields[3:6])
    origin = tuple(float(f) for f in fields[6:9])
    if min(nx, ny, nz) < 1:
        raise FileFormatError(f"{path}: non-positive dimensions {nx}x{ny}x{nz}")
    if min(spacing) <= 0:
        raise FileFormatError(f"{path}: non-positive spacing")
    expected = nx * ny * nz * 4
    payload = raw[HEADER_BYTES:]
    if len(payload) != expected:
        raise FileFormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(nz, ny, nx)
    return VoxelVolume(nx, ny, nz, spacing, origin, data.copy())


def save_projection(path, img: ProjectionImage) -> None:
    pitch = img.geometry.pitch if img.geometry is not None else 1.0
    fields = [PRJ_MAGIC, img.nu, img.nv, float(pitch)]
    payload = img.data.astype("<f4").tobytes(order="C")
    Path(path).write_bytes(_pack_header(fields) + payload)


def load_projection(path) -> ProjectionImage:
    raw = Path(path).read_bytes()
    fields = _read_header(raw, PRJ_MAGIC, path)
    if len(fields) != 3:
        raise FileFormatError(f"{path}: expected 3 header fields, got {len(fields)}")
    nu, nv = int(fields[0]), int(fields[1])
    pitch = float(fields[2])
    if nu < 1 or nv < 1:
        raise FileFormatError(f"{path}: non-positive dimensions {nu}x{nv}")
    if pitch <= 0:
        raise FileFormatError(f"{path}: non-positive pitch")
    expected = nu * nv * 4
    payload = raw[HEADER_BYTES:]
    if len(payload) != expected:
        raise FileFormatError(
            f"{path}: payload is {len(payload)} bytes, expected {expected}"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(nv, nu)
    return ProjectionImage(data.copy())
