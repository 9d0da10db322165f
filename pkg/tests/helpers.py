"""Shared test signal generators."""

import numpy as np

from prism.waveform import Constellation, FrameSpec, build_frame, shape_pulse


def band_limited(n: int, seed: int, fs: float = 60e9, bw: float = 33e9) -> np.ndarray:
    """Random complex samples confined to ``|f| <= bw / 2``."""
    r = np.random.default_rng(seed)
    x = r.standard_normal(n) + 1j * r.standard_normal(n)
    f = np.fft.fftfreq(n, 1 / fs)
    return np.fft.ifft(np.fft.fft(x) * (np.abs(f) <= bw / 2))


def qpsk_waveform(seed: int = 0, n_symbols: int = 256, overhead: float = 0.2, n_pol: int = 1):
    spec = FrameSpec(n_payload_symbols=n_symbols, pilot_overhead=overhead)
    frame = build_frame(seed, spec, Constellation.from_name("QPSK"), n_pol=n_pol)
    return frame, shape_pulse(frame.symbols[0] if n_pol == 1 else frame.symbols, spec)
