"""Synthetic talking-scene generator and on-disk formats.

A scene is a small RGB video of a static textured "identity" with a
rectangular face and a rectangular mouth inside it. Mouth brightness follows
the per-frame audio amplitude, and a faint stripe pattern drifts across the
background so consecutive frames are not identical. Frame 0 is the reference
frame.

Latents live in pixel space: :func:`encode` maps ``[0, 1]`` pixels to
``[-1, 1]`` and :func:`decode` inverts it.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from lff.errors import ConfigError, FormatError
from lff.tensor import Rng, Tensor

MAGIC = b"TNSR"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_DTYPE_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_HEADER = struct.Struct("<4sBBB")

# mouth colours at zero and full amplitude; the open colour is brighter in
# every channel so mouth intensity is strictly increasing in amplitude
_MOUTH_CLOSED = np.array([0.45, 0.18, 0.20])
_MOUTH_OPEN = np.array([0.95, 0.62, 0.60])
_DRIFT_PERIOD = 48.0
_DRIFT_STRENGTH = 0.06


@dataclass
class SyntheticScene:
    reference_frame: np.ndarray  # C×H×W, pixels in [0, 1]
    video: np.ndarray  # F×C×H×W
    audio: np.ndarray  # F×d raw per-frame features
    amplitude: np.ndarray  # F
    face_mask: np.ndarray  # H×W in {0, 1}
    lip_mask: np.ndarray  # H×W in {0, 1}

    @property
    def frames(self) -> int:
        return self.video.shape[0]


def mask_boxes(height: int, width: int):
    """Face and lip rectangles as ``(top, bottom, left, right)`` half-open boxes."""
    face = (int(0.2 * height), int(0.85 * height), int(0.25 * width), int(0.75 * width))
    lip = (int(0.6 * height), int(0.75 * height), int(0.375 * width), int(0.625 * width))
    return face, lip


def _box_mask(height, width, box):
    m = np.zeros((height, width))
    m[box[0]:box[1], box[2]:box[3]] = 1.0
    return m


def speech_amplitude(rng: Rng, frames: int) -> np.ndarray:
    """A bursty amplitude envelope in (0, 1): AR(1) noise through a sigmoid."""
    noise = rng.normal((frames,), np.float64)
    u = np.empty(frames)
    acc = 0.0
    for i in range(frames):
        acc = 0.6 * acc + noise[i]
        u[i] = acc
    return 1.0 / (1.0 + np.exp(-1.5 * u))


def audio_features(amplitude: np.ndarray, audio_dim: int, phases: np.ndarray) -> np.ndarray:
    """Column 0 is the amplitude; the rest are unit harmonics of the frame index.

    The harmonics are not scaled by the amplitude, so loudness changes the
    direction of the feature vector and survives a LayerNorm.
    """
    frames = amplitude.shape[0]
    i = np.arange(frames)[:, None]
    harmonics = np.arange(1, audio_dim)[None, :]
    feats = np.empty((frames, audio_dim))
    feats[:, 0] = amplitude
    feats[:, 1:] = np.sin(2 * np.pi * harmonics * i / 12.0 + phases[None, :])
    return feats


def generate_scene(rng: Rng, frames: int, height: int = 16, width: int = 16, audio_dim: int = 4,
                   channels: int = 3, amplitude: np.ndarray | None = None) -> SyntheticScene:
    """Draw one scene. ``amplitude`` overrides the random audio envelope."""
    if frames < 1:
        raise ConfigError(f"frames must be >= 1, got {frames}")
    if height < 8 or width < 8:
        raise ConfigError(f"scene must be at least 8x8 to hold face and lip boxes, got {height}x{width}")
    if channels not in (1, 3):
        raise ConfigError(f"channels must be 1 or 3, got {channels}")
    if audio_dim < 1:
        raise ConfigError(f"audio_dim must be >= 1, got {audio_dim}")
    face_box, lip_box = mask_boxes(height, width)
    face_mask = _box_mask(height, width, face_box)
    lip_mask = _box_mask(height, width, lip_box)
    if lip_mask.sum() == 0 or np.any(lip_mask > face_mask):
        raise ConfigError(f"{height}x{width} is too small to place the lip box inside the face box")

    # identity: smooth background texture and a flat face colour
    base = rng.uniform(0.15, 0.55, size=3)
    gx, gy = rng.uniform(-0.15, 0.15, size=3), rng.uniform(-0.15, 0.15, size=3)
    ys = np.linspace(-0.5, 0.5, height)[None, :, None]
    xs = np.linspace(-0.5, 0.5, width)[None, None, :]
    background = base[:, None, None] + gy[:, None, None] * ys + gx[:, None, None] * xs
    background = background + 0.03 * rng.normal((3, height, width), np.float64)
    face_colour = rng.uniform(0.55, 0.85, size=3)
    phases = rng.uniform(0.0, 2 * np.pi, size=max(audio_dim - 1, 0))
    if amplitude is None:
        amplitude = speech_amplitude(rng, frames)
    amplitude = np.asarray(amplitude, dtype=np.float64)
    if amplitude.shape != (frames,):
        raise ConfigError(f"amplitude must have shape ({frames},), got {amplitude.shape}")

    still = np.where(face_mask[None] > 0, face_colour[:, None, None], background)
    video = np.empty((frames, 3, height, width))
    outside = 1.0 - face_mask
    x_coord = np.arange(width)[None, :] / width
    for i in range(frames):
        stripe = _DRIFT_STRENGTH * np.sin(2 * np.pi * (x_coord + i / _DRIFT_PERIOD)) * np.ones((height, 1))
        frame = still + (stripe * outside)[None]
        mouth = _MOUTH_CLOSED + amplitude[i] * (_MOUTH_OPEN - _MOUTH_CLOSED)
        frame = np.where(lip_mask[None] > 0, mouth[:, None, None], frame)
        video[i] = frame
    video = np.clip(video, 0.0, 1.0)
    if channels == 1:
        video = video.mean(axis=1, keepdims=True)
    return SyntheticScene(
        reference_frame=video[0].copy(),
        video=video,
        audio=audio_features(amplitude, audio_dim, phases),
        amplitude=amplitude,
        face_mask=face_mask,
        lip_mask=lip_mask,
    )


def encode(pixels: np.ndarray) -> np.ndarray:
    return 2.0 * np.asarray(pixels) - 1.0


def decode(latents: np.ndarray) -> np.ndarray:
    return np.clip((np.asarray(latents) + 1.0) / 2.0, 0.0, 1.0)


def mouth_intensity(frames: np.ndarray, lip_mask: np.ndarray) -> np.ndarray:
    """Per-frame mean intensity inside ``lip_mask`` (frames are F×C×H×W)."""
    sel = lip_mask > 0
    return frames[:, :, sel].mean(axis=(1, 2))


# -- TNSR tensor files ---------------------------------------------------


def tensor_to_bytes(t) -> bytes:
    arr = t.data if isinstance(t, Tensor) else np.asarray(t)
    dtype = np.dtype(arr.dtype)
    if dtype not in _DTYPE_CODES:
        raise FormatError(f"unsupported dtype {dtype}")
    if arr.ndim > 255:
        raise FormatError(f"rank {arr.ndim} does not fit in one byte")
    header = _HEADER.pack(MAGIC, VERSION, _DTYPE_CODES[dtype], arr.ndim)
    dims = struct.pack(f"<{arr.ndim}Q", *arr.shape)
    payload = np.ascontiguousarray(arr, dtype=_DTYPES[_DTYPE_CODES[dtype]]).tobytes()
    return header + dims + payload


def tensor_from_bytes(buf: bytes) -> np.ndarray:
    if len(buf) < _HEADER.size:
        raise FormatError(f"file shorter than the {_HEADER.size}-byte header", len(buf))
    magic, version, code, rank = _HEADER.unpack_from(buf, 0)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}", 0)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    if code not in _DTYPES:
        raise FormatError(f"unknown dtype code {code}", 5)
    offset = _HEADER.size
    if len(buf) < offset + 8 * rank:
        raise FormatError("truncated dimension table", len(buf))
    dims = struct.unpack_from(f"<{rank}Q", buf, offset)
    offset += 8 * rank
    dtype = _DTYPES[code]
    expected = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
    if len(buf) - offset < expected:
        raise FormatError(f"truncated payload: expected {expected} bytes, found {len(buf) - offset}", len(buf))
    if len(buf) - offset > expected:
        raise FormatError(f"{len(buf) - offset - expected} trailing bytes after payload", offset + expected)
    arr = np.frombuffer(buf, dtype=dtype, count=int(np.prod(dims, dtype=np.int64)), offset=offset)
    return arr.reshape(dims).astype(dtype.newbyteorder("="))


def write_tensor(path, t) -> None:
    Path(path).write_bytes(tensor_to_bytes(t))


def read_tensor(path) -> np.ndarray:
    return tensor_from_bytes(Path(path).read_bytes())


# -- frame dumps ---------------------------------------------------------


def quantize(values: np.ndarray) -> np.ndarray:
    """Map [0, 1] to bytes with round-half-up: floor(v * 255 + 0.5)."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def frame_image_bytes(frame) -> bytes:
    arr = frame.data if isinstance(frame, Tensor) else np.asarray(frame)
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ConfigError(f"frame must be C×H×W with C in {{1, 3}}, got shape {arr.shape}")
    c, h, w = arr.shape
    kind = "P5" if c == 1 else "P6"
    pixels = quantize(np.transpose(arr, (1, 2, 0)))
    return f"{kind}\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def write_frame_image(path, frame) -> None:
    """Binary PGM (one channel) or PPM (three channels), 8-bit."""
    Path(path).write_bytes(frame_image_bytes(frame))


# -- scene bundles -------------------------------------------------------

_SCENE_FILES = ("reference_frame", "video", "audio", "amplitude", "face_mask", "lip_mask")


def save_scene(directory, scene: SyntheticScene, seed: int, name: str = "scene") -> dict:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    files = {}
    for key in _SCENE_FILES:
        fname = f"{name}.{key}.tnsr"
        write_tensor(directory / fname, getattr(scene, key))
        files[key] = fname
    f, c, h, w = scene.video.shape
    return {"name": name, "seed": seed, "frames": f, "channels": c, "height": h, "width": w,
            "audio_dim": scene.audio.shape[1], "files": files}


def load_scene(directory, entry: dict) -> SyntheticScene:
    directory = Path(directory)
    return SyntheticScene(**{key: read_tensor(directory / entry["files"][key]) for key in _SCENE_FILES})


def write_manifest(directory, entries: list[dict], extra: dict | None = None) -> Path:
    path = Path(directory) / "manifest.json"
    doc = {"scenes": entries, **(extra or {})}
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return path


def load_scenes(directory) -> list[SyntheticScene]:
    directory = Path(directory)
    doc = json.loads((directory / "manifest.json").read_text())
    return [load_scene(directory, e) for e in doc["scenes"]]
