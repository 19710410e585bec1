"""Binary file formats: 8/16-bit PGM images and raw float32 volumes."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .geometry import Vec3
from .hologram import IntensityVolume


def write_pgm8(path, data: np.ndarray) -> None:
    """Binary PGM, maxval 255, row-major from the top row."""
    if data.dtype != np.uint8 or data.ndim != 2:
        raise ValueError("expected a 2D uint8 array")
    h, w = data.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(data.tobytes())


def write_pgm16(path, data: np.ndarray) -> None:
    """Binary PGM, maxval 65535, big-endian sample order."""
    if data.ndim != 2:
        raise ValueError("expected a 2D array")
    arr = np.clip(np.asarray(data), 0, 65535).astype(">u2")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(arr.tobytes())


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Read a binary PGM; returns (array, maxval). 16-bit data is big-endian."""
    blob = Path(path).read_bytes()
    if not blob.startswith(b"P5"):
        raise ValueError(f"{path} is not a binary PGM")
    # header: magic, width, height, maxval; '#' comments allowed
    tokens: list[bytes] = []
    pos = 2
    while len(tokens) < 3:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    pos += 1  # single whitespace after maxval
    w, h, maxval = int(tokens[0]), int(tokens[1]), int(tokens[2])
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    data = np.frombuffer(blob, dtype=dtype, count=w * h, offset=pos).reshape(h, w)
    return data.astype(np.uint16 if maxval >= 256 else np.uint8), maxval


def write_volume(path, volume: IntensityVolume) -> None:
    """Raw little-endian float32 stream plus a JSON sidecar at ``path + '.json'``."""
    path = Path(path)
    volume.data.astype("<f4").tofile(path)
    nz, ny, nx = volume.data.shape
    sidecar = {
        "origin_um": [volume.origin.x, volume.origin.y, volume.origin.z],
        "voxel_size_um": list(volume.voxel_size_um),
        "dimensions": [nx, ny, nz],
        "order": "z,y,x",
    }
    Path(str(path) + ".json").write_text(json.dumps(sidecar, indent=2) + "\n")


def read_volume(path) -> IntensityVolume:
    path = Path(path)
    sidecar = json.loads(Path(str(path) + ".json").read_text())
    nx, ny, nz = sidecar["dimensions"]
    data = np.fromfile(path, dtype="<f4").astype(float)
    if data.size != nx * ny * nz:
        raise ValueError(f"volume payload has {data.size} voxels, sidecar says {nx * ny * nz}")
    ox, oy, oz = sidecar["origin_um"]
    return IntensityVolume(
        origin=Vec3(ox, oy, oz),
        voxel_size_um=tuple(sidecar["voxel_size_um"]),
        data=data.reshape(nz, ny, nx),
    )
