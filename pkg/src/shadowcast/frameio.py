"""16-bit binary PGM (P5, big-endian) frames with JSON sidecars."""
from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np

from .imaging import (
    BeamProfile,
    CameraModel,
    Etalon,
    Frame,
    ImagingSystem,
    IonSpotModel,
    Scene,
)
from .photophysics import TransitionParams


def write_pgm(path, data: np.ndarray, maxval: int = 65535) -> None:
    data = np.asarray(data)
    if data.ndim != 2:
        raise ValueError("PGM data must be 2-D")
    if not (0 < maxval <= 65535):
        raise ValueError("maxval must be in 1..65535")
    if data.size and (data.min() < 0 or data.max() > maxval):
        raise ValueError("PGM data outside [0, maxval]")
    height, width = data.shape
    header = f"P5\n{width} {height}\n{maxval}\n".encode("ascii")
    dtype = ">u2" if maxval > 255 else "u1"
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(data.astype(dtype).tobytes())


def _header_tokens(buf: bytes):
    """Yield (token, end offset) for the three header fields after the magic number."""
    pos = 0
    n = len(buf)
    while True:
        while pos < n and buf[pos : pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos : pos + 1] == b"#":
            while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PGM header")
        yield buf[start:pos], pos


def read_pgm(path) -> tuple[np.ndarray, int]:
    """Read a binary PGM; returns (array of shape (height, width), maxval)."""
    buf = Path(path).read_bytes()
    if buf[:2] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    tokens = _header_tokens(buf[2:])
    try:
        width = int(next(tokens)[0])
        height = int(next(tokens)[0])
        tok, end = next(tokens)
        maxval = int(tok)
    except (StopIteration, ValueError) as exc:
        raise ValueError(f"{path}: malformed PGM header") from exc
    # exactly one whitespace byte separates the header from the raster
    offset = 2 + end + 1
    dtype = ">u2" if maxval > 255 else "u1"
    nbytes = width * height * np.dtype(dtype).itemsize
    raster = buf[offset : offset + nbytes]
    if len(raster) != nbytes:
        raise ValueError(f"{path}: raster has {len(raster)} bytes, expected {nbytes}")
    data = np.frombuffer(raster, dtype=dtype).reshape(height, width)
    return data.astype(np.uint16), maxval


def scene_to_dict(scene: Scene) -> dict:
    return dataclasses.asdict(scene)


def scene_from_dict(d: dict) -> Scene:
    imaging = dict(d["imaging"])
    if imaging.get("etalon") is not None:
        imaging["etalon"] = Etalon(**imaging["etalon"])
    beam = dict(d["beam"])
    beam["center"] = tuple(beam["center"])
    ion = dict(d["ion"])
    ion["center"] = tuple(ion["center"])
    return Scene(
        transition=TransitionParams(**d["transition"]),
        beam=BeamProfile(**beam),
        imaging=ImagingSystem(**imaging),
        camera=CameraModel(**d["camera"]),
        ion=IonSpotModel(**ion),
    )


def dump_json(obj, path) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True, allow_nan=True)
    Path(path).write_text(text + "\n", encoding="utf-8")


def sidecar_path(pgm_path) -> Path:
    return Path(pgm_path).with_suffix(".json")


def save_frame(frame: Frame, path, scene: Scene | None = None) -> Path:
    """Write ``path`` (PGM) and its ``.json`` sidecar; returns the sidecar path."""
    maxval = 65535
    if scene is not None:
        maxval = scene.camera.max_count
    write_pgm(path, frame.counts, maxval=maxval)
    meta = dict(frame.metadata)
    if scene is not None:
        meta["scene"] = scene_to_dict(scene)
    side = sidecar_path(path)
    dump_json(meta, side)
    return side


def load_frame(path) -> Frame:
    counts, _ = read_pgm(path)
    side = sidecar_path(path)
    metadata = json.loads(side.read_text(encoding="utf-8")) if side.exists() else {}
    return Frame(counts=counts, metadata=metadata)


def frame_scene(frame: Frame) -> Scene | None:
    d = frame.metadata.get("scene")
    return scene_from_dict(d) if d else None
