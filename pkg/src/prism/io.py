"""
Binary waveform and intensity files.

Each file ``name.bin`` has a JSON sidecar ``name.json``. Complex waveforms
are stored as little-endian float64 ``(re, im)`` pairs, one polarization
after the other. Intensity traces are stored as plain little-endian float64.
Round trips are bit-exact.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .waveform import DEFAULT_WAVELENGTH, ComplexWaveform, IntensityTrace

FORMAT_VERSION = 1


def _paths(path: str | Path) -> tuple[Path, Path]:
    p = Path(path)
    return p.with_suffix(".bin"), p.with_suffix(".json")


def save_waveform(w: ComplexWaveform, path: str | Path) -> tuple[Path, Path]:
    bin_path, meta_path = _paths(path)
    s = np.atleast_2d(w.samples)
    inter = np.empty(s.shape[:-1] + (2 * s.shape[-1],), dtype="<f8")
    inter[..., 0::2] = s.real
    inter[..., 1::2] = s.imag
    inter.tofile(bin_path)
    meta = {
        "kind": "complex_waveform",
        "format_version": FORMAT_VERSION,
        "sample_rate": w.sample_rate,
        "wavelength": w.center_wavelength,
        "length": len(w),
        "n_pol": w.n_pol,
        "dtype": "float64-le interleaved re,im",
    }
    meta_path.write_text(json.dumps(meta, indent=2))
    return bin_path, meta_path


def load_waveform(path: str | Path, meta: str | Path | None = None) -> ComplexWaveform:
    bin_path, meta_path = _paths(path)
    hdr = json.loads(Path(meta or meta_path).read_text())
    if hdr.get("kind") != "complex_waveform":
        raise ValueError(f"{meta or meta_path} does not describe a complex waveform")
    raw = np.fromfile(Path(path) if Path(path).suffix == ".bin" else bin_path, dtype="<f8")
    n, n_pol = int(hdr["length"]), int(hdr["n_pol"])
    if raw.size != 2 * n * n_pol:
        raise ValueError(f"expected {2 * n * n_pol} float64 values, found {raw.size}")
    raw = raw.reshape(n_pol, 2 * n)
    s = raw[:, 0::2] + 1j * raw[:, 1::2]
    return ComplexWaveform(s[0] if n_pol == 1 else s, float(hdr["sample_rate"]),
                           float(hdr.get("wavelength", DEFAULT_WAVELENGTH)))


def save_intensity(t: IntensityTrace, path: str | Path) -> tuple[Path, Path]:
    bin_path, meta_path = _paths(path)
    t.samples.astype("<f8").tofile(bin_path)
    meta = {
        "kind": "intensity_trace",
        "format_version": FORMAT_VERSION,
        "sample_rate": t.sample_rate,
        "length": len(t),
        "dtype": "float64-le",
        "meta": t.meta,
    }
    meta_path.write_text(json.dumps(meta, indent=2))
    return bin_path, meta_path


def load_intensity(path: str | Path, meta: str | Path | None = None) -> IntensityTrace:
    bin_path, meta_path = _paths(path)
    hdr = json.loads(Path(meta or meta_path).read_text())
    raw = np.fromfile(Path(path) if Path(path).suffix == ".bin" else bin_path, dtype="<f8")
    if raw.size != int(hdr["length"]):
        raise ValueError(f"expected {hdr['length']} float64 values, found {raw.size}")
    return IntensityTrace(raw, float(hdr["sample_rate"]), dict(hdr.get("meta", {})))
