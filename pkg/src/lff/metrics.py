"""Drift and sync measurements on generated sequences.

Colour difference is CIEDE2000 on sRGB input: companded sRGB is linearised,
mapped to XYZ with the D65 matrix, then to CIELAB against the D65 white.
"""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass

import numpy as np

from lff.data import decode, mouth_intensity
from lff.errors import ConfigError, DimensionError, DomainError, UndefinedCorrelation

# sRGB (IEC 61966-2-1) primaries to XYZ, D65 reference white
SRGB_TO_XYZ = np.array([
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
])
D65_WHITE = np.array([0.95047, 1.0, 1.08883])


def srgb_to_linear(c):
    c = np.asarray(c, dtype=np.float64)
    return np.where(c <= 0.04045, c / 12.92, ((c + 0.055) / 1.055) ** 2.4)


def srgb_to_lab(rgb):
    """CIELAB of sRGB triples in [0, 1]; the last axis holds the channels."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.shape[-1] != 3:
        raise DimensionError(f"expected RGB triples on the last axis, got shape {rgb.shape}")
    if np.any(rgb < 0) or np.any(rgb > 1) or not np.all(np.isfinite(rgb)):
        raise DomainError("sRGB channels must lie in [0, 1]")
    xyz = srgb_to_linear(rgb) @ SRGB_TO_XYZ.T / D65_WHITE
    eps, kappa = 216 / 24389, 24389 / 27
    f = np.where(xyz > eps, np.cbrt(xyz), (kappa * xyz + 16) / 116)
    L = 116 * f[..., 1] - 16
    a = 500 * (f[..., 0] - f[..., 1])
    b = 200 * (f[..., 1] - f[..., 2])
    return np.stack([L, a, b], axis=-1)


def delta_e00(lab1, lab2, kL: float = 1.0, kC: float = 1.0, kH: float = 1.0):
    """CIEDE2000 between CIELAB arrays (last axis L, a, b)."""
    lab1, lab2 = np.asarray(lab1, dtype=np.float64), np.asarray(lab2, dtype=np.float64)
    L1, a1, b1 = lab1[..., 0], lab1[..., 1], lab1[..., 2]
    L2, a2, b2 = lab2[..., 0], lab2[..., 1], lab2[..., 2]
    cbar = (np.hypot(a1, b1) + np.hypot(a2, b2)) / 2
    g = 0.5 * (1 - np.sqrt(cbar**7 / (cbar**7 + 25.0**7)))
    a1p, a2p = (1 + g) * a1, (1 + g) * a2
    c1p, c2p = np.hypot(a1p, b1), np.hypot(a2p, b2)
    h1p = np.degrees(np.arctan2(b1, a1p)) % 360
    h2p = np.degrees(np.arctan2(b2, a2p)) % 360
    h1p = np.where(c1p == 0, 0.0, h1p)
    h2p = np.where(c2p == 0, 0.0, h2p)

    dL = L2 - L1
    dC = c2p - c1p
    dh = h2p - h1p
    dh = np.where(dh > 180, dh - 360, np.where(dh < -180, dh + 360, dh))
    dh = np.where(c1p * c2p == 0, 0.0, dh)
    dH = 2 * np.sqrt(c1p * c2p) * np.sin(np.radians(dh / 2))

    Lbar = (L1 + L2) / 2
    cbarp = (c1p + c2p) / 2
    hsum = h1p + h2p
    hbar = np.where(np.abs(h1p - h2p) > 180, np.where(hsum < 360, hsum + 360, hsum - 360), hsum) / 2
    hbar = np.where(c1p * c2p == 0, hsum, hbar)
    tt = (1 - 0.17 * np.cos(np.radians(hbar - 30)) + 0.24 * np.cos(np.radians(2 * hbar))
          + 0.32 * np.cos(np.radians(3 * hbar + 6)) - 0.20 * np.cos(np.radians(4 * hbar - 63)))
    dtheta = 30 * np.exp(-(((hbar - 275) / 25) ** 2))
    rc = 2 * np.sqrt(cbarp**7 / (cbarp**7 + 25.0**7))
    sl = 1 + 0.015 * (Lbar - 50) ** 2 / np.sqrt(20 + (Lbar - 50) ** 2)
    sc = 1 + 0.045 * cbarp
    sh = 1 + 0.015 * cbarp * tt
    rt = -np.sin(np.radians(2 * dtheta)) * rc
    tl, tc, th = dL / (kL * sl), dC / (kC * sc), dH / (kH * sh)
    return np.sqrt(tl**2 + tc**2 + th**2 + rt * tc * th)


def ciede2000(rgb_a, rgb_b) -> float:
    """CIEDE2000 between two sRGB triples in [0, 1]."""
    return float(delta_e00(srgb_to_lab(rgb_a), srgb_to_lab(rgb_b)))


def frame_ciede(frame_a, frame_b) -> float:
    """Mean CIEDE2000 over pixels of two C×H×W sRGB frames."""
    frame_a, frame_b = np.asarray(frame_a), np.asarray(frame_b)
    if frame_a.shape != frame_b.shape or frame_a.ndim != 3 or frame_a.shape[0] != 3:
        raise DimensionError(f"frame_ciede needs two 3×H×W frames, got {frame_a.shape} and {frame_b.shape}")
    la = srgb_to_lab(np.moveaxis(frame_a, 0, -1))
    lb = srgb_to_lab(np.moveaxis(frame_b, 0, -1))
    return float(np.mean(delta_e00(la, lb)))


def clip_count(frames: int, clip_len: int) -> int:
    if clip_len < 1:
        raise ConfigError(f"clip_len must be >= 1, got {clip_len}")
    n = frames // clip_len
    if n < 2:
        raise ConfigError(f"drift needs at least 2 clips; {frames} frames with clip_len {clip_len} give {n}")
    return n


def latent_drift(frames, clip_len: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-clip ``|mean_i - mean_0|`` and ``|std_i - std_0|`` over all elements.

    A trailing partial clip is dropped.
    """
    frames = np.asarray(frames, dtype=np.float64)
    n = clip_count(frames.shape[0], clip_len)
    clips = frames[: n * clip_len].reshape((n, -1))
    means, stds = clips.mean(axis=1), clips.std(axis=1)
    return np.abs(means - means[0]), np.abs(stds - stds[0])


def pearson(x, y) -> float:
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DimensionError(f"pearson needs two equal-length vectors, got {x.shape} and {y.shape}")
    xc, yc = x - x.mean(), y - y.mean()
    sx, sy = np.sqrt(np.sum(xc * xc)), np.sqrt(np.sum(yc * yc))
    if sx == 0 or sy == 0:
        raise UndefinedCorrelation("correlation undefined: zero variance")
    return float(np.sum(xc * yc) / (sx * sy))


def sync_proxy(amplitude, frames, lip_mask) -> float:
    """Pearson correlation of audio amplitude with mean lip-region intensity per frame."""
    amplitude = np.asarray(amplitude, dtype=np.float64)
    frames = np.asarray(frames)
    if amplitude.shape[0] != frames.shape[0]:
        raise DimensionError(f"{amplitude.shape[0]} amplitude values for {frames.shape[0]} frames")
    if not np.any(np.asarray(lip_mask) > 0):
        raise ConfigError("lip mask is empty")
    return pearson(amplitude, mouth_intensity(frames, lip_mask))


@dataclass
class ClipRecord:
    clip: int
    mean_shift: float
    std_shift: float
    ciede: float
    sync_r: float


CSV_FIELDS = ("clip", "mean_shift", "std_shift", "ciede", "sync_r")


@dataclass
class DriftReport:
    records: list
    config: dict | None = None

    @property
    def final(self) -> ClipRecord:
        return self.records[-1]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=CSV_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in self.records:
            w.writerow({k: (repr(float(v)) if k != "clip" else v) for k, v in asdict(r).items()})
        return buf.getvalue()

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            fh.write(self.to_csv())

    @classmethod
    def read_csv(cls, path) -> "DriftReport":
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        return cls([ClipRecord(int(r["clip"]), float(r["mean_shift"]), float(r["std_shift"]),
                               float(r["ciede"]), float(r["sync_r"])) for r in rows])


def drift_report(latents, amplitude, lip_mask, clip_len: int, config: dict | None = None) -> DriftReport:
    """Per-clip drift, colour drift and sync for a generated latent sequence.

    Colour drift compares each clip's average decoded frame with the first
    clip's. A clip whose mouth or amplitude is constant gets ``sync_r = 0``.
    """
    latents = np.asarray(latents, dtype=np.float64)
    n = clip_count(latents.shape[0], clip_len)
    ms, ss = latent_drift(latents, clip_len)
    pix = decode(latents[: n * clip_len])
    amp = np.asarray(amplitude, dtype=np.float64)[: n * clip_len]
    first = pix[:clip_len].mean(axis=0)
    recs = []
    for i in range(n):
        sl = slice(i * clip_len, (i + 1) * clip_len)
        try:
            r = sync_proxy(amp[sl], pix[sl], lip_mask)
        except UndefinedCorrelation:
            r = 0.0
        recs.append(ClipRecord(i, float(ms[i]), float(ss[i]), frame_ciede(pix[sl].mean(axis=0), first), r))
    return DriftReport(recs, config)
