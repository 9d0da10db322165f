"""
Link and front-end impairments: chromatic dispersion, polarization mixing,
ASE noise loading at a target OSNR, square-law detection and converter
noise expressed as an effective number of bits.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft
from scipy.stats import unitary_group

from .waveform import C_LIGHT, DEFAULT_WAVELENGTH, ComplexWaveform, IntensityTrace

REFERENCE_BANDWIDTH = 12.5e9  # 0.1 nm at 1550 nm
SMF_PS_NM_KM = 8921.0 / 520.0


def dispersion_for_length(length_km: float, ps_nm_km: float = SMF_PS_NM_KM) -> float:
    return length_km * ps_nm_km


@dataclass(frozen=True)
class DispersionOperator:
    """Quadratic spectral phase filter.

    ``total_dispersion`` is in ps/nm. ``inverse=True`` realizes the
    conjugate (undo) filter.
    """

    total_dispersion: float
    center_wavelength: float = DEFAULT_WAVELENGTH
    inverse: bool = False

    @property
    def beta2l(self) -> float:
        """Accumulated GVD ``beta2 * L`` in s^2 (sign of the forward filter)."""
        d_si = self.total_dispersion * 1e-3  # ps/nm -> s/m
        return -d_si * self.center_wavelength**2 / (2 * np.pi * C_LIGHT)

    @property
    def signed_beta2l(self) -> float:
        return -self.beta2l if self.inverse else self.beta2l

    def inv(self) -> "DispersionOperator":
        return DispersionOperator(self.total_dispersion, self.center_wavelength, not self.inverse)

    def scaled(self, factor: float) -> "DispersionOperator":
        return DispersionOperator(self.total_dispersion * factor, self.center_wavelength, self.inverse)

    def response(self, n: int, sample_rate: float) -> np.ndarray:
        w = 2 * np.pi * sfft.fftfreq(n, 1 / sample_rate)
        return np.exp(-0.5j * self.signed_beta2l * w**2)

    def spread_symbols(self, bandwidth: float, baud: float) -> float:
        """Group-delay spread across ``bandwidth`` in units of symbol periods."""
        return abs(self.beta2l) * 2 * np.pi * bandwidth * baud


def apply_dispersion(w: ComplexWaveform, d: DispersionOperator) -> ComplexWaveform:
    if d.total_dispersion == 0:
        return w
    h = d.response(len(w), w.sample_rate)
    return w.with_samples(sfft.ifft(sfft.fft(w.samples, axis=-1) * h, axis=-1))


def optical_bandpass(w: ComplexWaveform, bandwidth: float | None) -> ComplexWaveform:
    """Ideal rectangular optical filter of two-sided width ``bandwidth`` (Hz)."""
    if bandwidth is None or bandwidth >= w.sample_rate:
        return w
    f = sfft.fftfreq(len(w), 1 / w.sample_rate)
    mask = np.abs(f) <= bandwidth / 2
    return w.with_samples(sfft.ifft(sfft.fft(w.samples, axis=-1) * mask, axis=-1))


@dataclass(frozen=True)
class PolarizationChannel:
    """Concatenation of (unitary rotation, DGD element) sections.

    Each section applies ``diag(exp(+j w tau/2), exp(-j w tau/2)) @ U``.
    A random channel is fully described by ``(seed, n_sections, dgd_total)``
    which is what ``to_dict`` stores.
    """

    rotations: tuple[np.ndarray, ...]
    dgds: tuple[float, ...]
    seed: int | None = None
    dgd_total: float | None = None
    loss_db: tuple[float, float] = (0.0, 0.0)

    @classmethod
    def identity(cls) -> "PolarizationChannel":
        return cls((np.eye(2, dtype=complex),), (0.0,))

    @classmethod
    def from_matrix(cls, m: np.ndarray, dgd: float = 0.0) -> "PolarizationChannel":
        return cls((np.asarray(m, dtype=complex),), (float(dgd),))

    @classmethod
    def rotation(cls, angle: float) -> "PolarizationChannel":
        c, s = math.cos(angle), math.sin(angle)
        return cls.from_matrix(np.array([[c, -s], [s, c]]))

    @classmethod
    def random(cls, seed: int, n_sections: int = 8, dgd_total: float = 5e-12) -> "PolarizationChannel":
        """Random PMD emulator; per-section DGD ``dgd_total / sqrt(n)`` so the
        RMS accumulated DGD equals ``dgd_total``."""
        rng = np.random.default_rng(seed)
        rots = tuple(unitary_group.rvs(2, random_state=rng) for _ in range(n_sections))
        tau = dgd_total / math.sqrt(n_sections) if n_sections else 0.0
        return cls(rots, (tau,) * n_sections, seed=seed, dgd_total=dgd_total)

    def jones(self, freqs: np.ndarray) -> np.ndarray:
        """Per-frequency Jones matrices, shape ``(len(freqs), 2, 2)``."""
        w = 2 * np.pi * np.asarray(freqs, dtype=float)
        j = np.broadcast_to(np.eye(2, dtype=complex), (w.size, 2, 2)).copy()
        for u, tau in zip(self.rotations, self.dgds):
            ph = np.exp(0.5j * w * tau)
            sec = u[None, :, :] * np.stack([ph, ph.conj()], axis=-1)[:, :, None]
            j = sec @ j
        if any(self.loss_db):
            g = 10 ** (-np.asarray(self.loss_db) / 20)
            j = g[None, :, None] * j
        return j

    def taps(self, n_taps: int, sample_rate: float) -> np.ndarray:
        """Centered FIR approximation ``h_pm[out, in, tap]`` at ``sample_rate``."""
        f = sfft.fftfreq(n_taps, 1 / sample_rate)
        h = sfft.ifft(self.jones(f), axis=0)
        return np.moveaxis(sfft.fftshift(h, axes=0), 0, -1)

    def to_dict(self) -> dict:
        if self.seed is not None:
            return {
                "kind": "random",
                "seed": self.seed,
                "n_sections": len(self.rotations),
                "dgd_total": self.dgd_total,
            }
        return {
            "kind": "explicit",
            "rotations": [[[z.real, z.imag] for z in u.ravel()] for u in self.rotations],
            "dgds": list(self.dgds),
            "loss_db": list(self.loss_db),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PolarizationChannel":
        if d["kind"] == "random":
            return cls.random(d["seed"], d["n_sections"], d["dgd_total"])
        rots = tuple(
            np.array([complex(re, im) for re, im in u]).reshape(2, 2) for u in d["rotations"]
        )
        return cls(rots, tuple(d["dgds"]), loss_db=tuple(d.get("loss_db", (0.0, 0.0))))


def pdl_db(matrices: np.ndarray) -> np.ndarray:
    """``20 log10(smax / smin)`` for a stack of 2x2 matrices."""
    sv = np.linalg.svd(np.asarray(matrices), compute_uv=False)
    with np.errstate(divide="ignore"):
        return 20 * np.log10(sv[..., 0] / sv[..., -1])


def apply_polarization_channel(
    wx: ComplexWaveform, wy: ComplexWaveform, ch: PolarizationChannel
) -> tuple[ComplexWaveform, ComplexWaveform]:
    if len(wx) != len(wy) or wx.sample_rate != wy.sample_rate:
        raise ValueError("polarization tributaries must share length and sample rate")
    f = sfft.fftfreq(len(wx), 1 / wx.sample_rate)
    j = ch.jones(f)
    spec = np.stack([sfft.fft(wx.samples), sfft.fft(wy.samples)], axis=-1)
    out = sfft.ifft(np.einsum("fij,fj->if", j, spec), axis=-1)
    return wx.with_samples(out[0]), wy.with_samples(out[1])


@dataclass(frozen=True)
class NoiseModel:
    """ASE loading target. ``target_osnr_db=None`` (or inf) means noiseless."""

    target_osnr_db: float | None = None
    reference_bandwidth: float = REFERENCE_BANDWIDTH
    enob: float | None = None

    @property
    def noiseless(self) -> bool:
        return self.target_osnr_db is None or math.isinf(self.target_osnr_db)


def snr_from_osnr(osnr_db: float, baud: float, n_pol: int = 1, b_ref: float = REFERENCE_BANDWIDTH) -> float:
    """Linear SNR per symbol: ``OSNR * 2 B_ref / (n_pol R_s)``."""
    return 10 ** (osnr_db / 10) * 2 * b_ref / (n_pol * baud)


def osnr_from_snr(snr: float, baud: float, n_pol: int = 1, b_ref: float = REFERENCE_BANDWIDTH) -> float:
    return 10 * np.log10(snr * n_pol * baud / (2 * b_ref))


def load_noise(
    w: ComplexWaveform | tuple[ComplexWaveform, ...],
    n: NoiseModel,
    rng: np.random.Generator,
):
    """Add circular white Gaussian noise over the whole simulation band.

    The ASE PSD per polarization is ``P_total / (2 B_ref OSNR)`` where
    ``P_total`` sums over all polarizations passed in, so dual-polarization
    signals share a single OSNR.
    """
    many = isinstance(w, (tuple, list))
    ws = tuple(w) if many else (w,)
    if n.noiseless:
        return tuple(ws) if many else w
    p_total = sum(x.power() * x.n_pol for x in ws)
    psd = p_total / (2 * n.reference_bandwidth * 10 ** (n.target_osnr_db / 10))
    out = []
    for x in ws:
        var = psd * x.sample_rate
        shape = x.samples.shape
        noise = rng.standard_normal(shape) + 1j * rng.standard_normal(shape)
        out.append(x.with_samples(x.samples + math.sqrt(var / 2) * noise))
    return tuple(out) if many else out[0]


def measure_osnr(
    ws: ComplexWaveform | tuple[ComplexWaveform, ...],
    signal_bandwidth: float,
    reference_bandwidth: float = REFERENCE_BANDWIDTH,
    guard: float = 0.05,
) -> float:
    """Estimate OSNR (dB) from the periodogram.

    The noise PSD is the mean periodogram level outside the signal band
    (with a relative ``guard``); signal power is in-band power minus the
    noise floor integrated over the band.
    """
    ws = tuple(ws) if isinstance(ws, (tuple, list)) else (ws,)
    p_sig = 0.0
    psd_sum = 0.0
    for x in ws:
        s = np.atleast_2d(x.samples)
        n = s.shape[-1]
        f = sfft.fftfreq(n, 1 / x.sample_rate)
        per = np.abs(sfft.fft(s, axis=-1)) ** 2 / n**2  # power per bin
        df = x.sample_rate / n
        inband = np.abs(f) <= signal_bandwidth / 2
        outband = np.abs(f) >= signal_bandwidth / 2 * (1 + guard)
        if not outband.any():
            raise ValueError("no noise-only bins: signal fills the simulation band")
        for row in per:
            psd = row[outband].mean() / df
            p_sig += row[inband].sum() - psd * df * inband.sum()
            psd_sum += psd
        # per-polarization PSDs average into one ASE PSD per pol
    n_rows = sum(np.atleast_2d(x.samples).shape[0] for x in ws)
    psd_pol = psd_sum / n_rows
    return float(10 * np.log10(p_sig / (2 * psd_pol * reference_bandwidth)))


def photodetect(w: ComplexWaveform) -> IntensityTrace:
    return IntensityTrace(np.abs(w.samples) ** 2, w.sample_rate)


def enob_noise_variance(full_scale: float, enob: float) -> float:
    """Noise power giving SINAD ``6.02 enob + 1.76`` dB for a sine spanning
    ``[0, full_scale]``."""
    sinad_db = 6.02 * enob + 1.76
    sine_power = (full_scale / 2) ** 2 / 2
    return sine_power / 10 ** (sinad_db / 10)


def quantize_enob(t: IntensityTrace, enob: float | None, rng: np.random.Generator) -> IntensityTrace:
    """Converter noise as additive white Gaussian noise; full scale = trace max."""
    if enob is None or math.isinf(enob):
        return t
    if enob <= 0:
        raise ValueError("enob must be positive")
    full_scale = float(np.max(t.samples))
    sigma = math.sqrt(enob_noise_variance(full_scale, enob))
    return IntensityTrace(t.samples + sigma * rng.standard_normal(t.samples.shape), t.sample_rate, t.meta)


def measure_sinad(x: np.ndarray, sample_rate: float, freq: float) -> float:
    """SINAD (dB) of a sampled sine at known ``freq`` via least-squares fit."""
    x = np.asarray(x, dtype=float)
    t = np.arange(x.size) / sample_rate
    basis = np.column_stack([np.cos(2 * np.pi * freq * t), np.sin(2 * np.pi * freq * t), np.ones_like(t)])
    coef, *_ = np.linalg.lstsq(basis, x, rcond=None)
    fit = basis @ coef
    resid = x - fit
    sig = (coef[0] ** 2 + coef[1] ** 2) / 2
    return float(10 * np.log10(sig / np.mean(resid**2)))


@dataclass(frozen=True)
class LinkConfig:
    """Serializable description of one channel realization."""

    length_km: float = 60.0
    ps_per_nm_per_km: float = SMF_PS_NM_KM
    pmd_sections: int = 8
    dgd_total: float = 0.0
    seed: int = 0
    rx_filter_bandwidth: float | None = None
    extra: dict = field(default_factory=dict, compare=False)

    @property
    def dispersion(self) -> float:
        return self.length_km * self.ps_per_nm_per_km
