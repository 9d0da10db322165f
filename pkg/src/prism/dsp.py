"""
Conventional coherent back end applied to retrieved fields.

Theory curve
------------
``theory_ber`` converts OSNR to SNR per symbol with
``SNR = OSNR * 2 * B_ref / (n_pol * R_s)`` (``B_ref = 12.5 GHz``) and uses
the Gray-coded AWGN bit error probability

* QPSK: ``Q(sqrt(SNR))``
* square M-QAM: ``(4 / log2 M) (1 - 1/sqrt(M)) Q(sqrt(3 SNR / (M - 1)))``
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence

import numpy as np
import scipy.fft as sfft
from scipy.signal import resample_poly
from scipy.special import erfc, erfcinv

from .channel import DispersionOperator, apply_dispersion, osnr_from_snr, snr_from_osnr
from .waveform import ComplexWaveform, Constellation, Modulation, SymbolFrame, demap_symbols


def compensate_cd(w: ComplexWaveform, link_cd: DispersionOperator) -> ComplexWaveform:
    return apply_dispersion(w, link_cd.inv())


def resample(w: ComplexWaveform, sample_rate: float, max_denominator: int = 1000) -> ComplexWaveform:
    """Polyphase resampling to ``sample_rate`` (Kaiser anti-alias filter)."""
    ratio = Fraction(sample_rate / w.sample_rate).limit_denominator(max_denominator)
    if ratio == 1:
        return w
    y = resample_poly(w.samples, ratio.numerator, ratio.denominator, axis=-1)
    return ComplexWaveform(y, w.sample_rate * ratio.numerator / ratio.denominator, w.center_wavelength)


# ---------------------------------------------------------------- theory


def qfunc(x):
    return 0.5 * erfc(np.asarray(x) / math.sqrt(2))


def ber_from_snr(snr, c: Constellation):
    snr = np.asarray(snr, dtype=float)
    if c.name is Modulation.QPSK:
        return qfunc(np.sqrt(snr))
    m = c.size
    k = c.bits_per_symbol
    return (4 / k) * (1 - 1 / math.sqrt(m)) * qfunc(np.sqrt(3 * snr / (m - 1)))


def theory_ber(osnr_db, c: Constellation, baud: float = 30e9, n_pol: int = 1):
    """Gray-coded AWGN BER at the given OSNR (0.1 nm reference)."""
    osnr_db = np.asarray(osnr_db, dtype=float)
    with np.errstate(over="ignore"):
        snr = snr_from_osnr(osnr_db, baud, n_pol)
    out = ber_from_snr(snr, c)
    return float(out) if out.ndim == 0 else out


def required_osnr(target_ber: float, c: Constellation, baud: float = 30e9, n_pol: int = 1) -> float:
    """OSNR (dB) at which ``theory_ber`` equals ``target_ber`` (closed-form inverse)."""
    if c.name is Modulation.QPSK:
        p, g = target_ber, 1.0
    else:
        p = target_ber * c.bits_per_symbol / (4 * (1 - 1 / math.sqrt(c.size)))
        g = (c.size - 1) / 3
    if not 0 < p < 0.5:
        raise ValueError(f"target BER {target_ber} is outside the range of the theory curve")
    snr = g * 2 * float(erfcinv(2 * p)) ** 2
    return float(osnr_from_snr(snr, baud, n_pol))


def osnr_at_ber(osnr_db: Sequence[float], ber: Sequence[float], target: float = 2e-2) -> float:
    """Interpolate a measured BER curve (log-BER vs OSNR) at ``target``.

    Returns ``nan`` when the curve never crosses the target.
    """
    o = np.asarray(osnr_db, dtype=float)
    y = np.log10(np.maximum(np.asarray(ber, dtype=float), 1e-9))
    t = math.log10(target)
    order = np.argsort(o)
    o, y = o[order], y[order]
    for k in range(len(o) - 1):
        if (y[k] - t) * (y[k + 1] - t) <= 0 and y[k] != y[k + 1]:
            return float(o[k] + (t - y[k]) * (o[k + 1] - o[k]) / (y[k + 1] - y[k]))
    return math.nan


# ---------------------------------------------------------------- BER


@dataclass
class BerReport:
    bit_errors: int
    bits_counted: int
    per_polarization: list[tuple[int, int]] = field(default_factory=list)

    def __post_init__(self):
        if self.bits_counted <= 0:
            raise ValueError("no bits counted")

    @property
    def ber(self) -> float:
        return self.bit_errors / self.bits_counted

    @property
    def inverted(self) -> bool:
        """BER above 1/2 means the decisions are systematically rotated."""
        return self.ber > 0.5

    def to_dict(self) -> dict:
        return {
            "bit_errors": self.bit_errors,
            "bits_counted": self.bits_counted,
            "ber": self.ber,
            "per_polarization": [list(p) for p in self.per_polarization],
        }


def count_ber(symbols: np.ndarray, frame: SymbolFrame, mask: np.ndarray | None = None) -> BerReport:
    """Gray-demap frame-aligned ``symbols`` (``(n_pol, n_symbols)``) and
    count errors on payload data symbols only (training and pilots
    excluded). ``mask`` optionally narrows the counted positions further.
    """
    symbols = np.atleast_2d(symbols)
    sel = frame.payload_mask if mask is None else frame.payload_mask & mask
    per = []
    for p in range(symbols.shape[0]):
        rx = demap_symbols(symbols[p, sel], frame.constellation)
        tx = frame.bits_of(p, sel)
        per.append((int(np.count_nonzero(rx != tx)), int(tx.size)))
    return BerReport(sum(e for e, _ in per), sum(n for _, n in per), per)


# ---------------------------------------------------------------- carrier phase


def _moving_sum(x: np.ndarray, window: int) -> np.ndarray:
    if window <= 1 or x.size == 0:
        return x.copy()
    half = window // 2
    cs = np.concatenate([[0], np.cumsum(x)])
    idx = np.arange(x.size)
    lo = np.clip(idx - half, 0, x.size)
    hi = np.clip(idx - half + window, 0, x.size)
    return cs[hi] - cs[lo]


def _nearest_points(y: np.ndarray, c: Constellation) -> np.ndarray:
    from .waveform import decide_symbols

    return decide_symbols(y, c)


def carrier_phase_recovery(
    symbols: np.ndarray,
    c: Constellation,
    window: int = 64,
    pilot_indices: np.ndarray | None = None,
    pilot_symbols: np.ndarray | None = None,
) -> np.ndarray:
    """Remove a slowly varying common phase.

    QPSK uses a sliding-window fourth-power (Viterbi-Viterbi) estimate;
    QAM uses decision-directed estimation seeded by the pilots. The
    ``pi/2`` ambiguity of the blind estimate is resolved locally from the
    nearest known pilots when they are supplied.
    """
    y = np.asarray(symbols, dtype=complex).ravel()
    have_pilots = pilot_indices is not None and len(pilot_indices) > 0
    if c.name is Modulation.QPSK:
        acc = _moving_sum(y**4, window)
        phi = np.unwrap(np.angle(-acc)) / 4
    else:
        if have_pilots:
            ref = np.zeros(y.size, dtype=complex)
            ref[pilot_indices] = y[pilot_indices] * np.conj(pilot_symbols)
            ps = _moving_sum(ref, max(window, 4 * int(np.diff(pilot_indices).mean() if len(pilot_indices) > 1 else 1)))
            phi = np.unwrap(np.angle(ps))
        else:
            phi = np.zeros(y.size)
        for _ in range(2):
            z = y * np.exp(-1j * phi)
            dd = y * np.conj(_nearest_points(z, c))
            phi = np.unwrap(np.angle(_moving_sum(dd, window)))
    out = y * np.exp(-1j * phi)
    if have_pilots:
        pilot_indices = np.asarray(pilot_indices)
        r = np.angle(out[pilot_indices] * np.conj(pilot_symbols))
        q = np.round(r / (np.pi / 2))
        # smooth quadrant decisions over neighbouring pilots to reject noise
        k = 5
        if q.size >= k:
            pad = np.pad(q, k // 2, mode="edge")
            q = np.median(np.lib.stride_tricks.sliding_window_view(pad, k), axis=-1)
        nearest = np.clip(np.searchsorted(pilot_indices, np.arange(y.size)), 0, len(pilot_indices) - 1)
        left = np.clip(nearest - 1, 0, len(pilot_indices) - 1)
        pick = np.where(
            np.abs(pilot_indices[left] - np.arange(y.size)) < np.abs(pilot_indices[nearest] - np.arange(y.size)),
            left, nearest)
        out = out * np.exp(-1j * (np.pi / 2) * q[pick])
    return out


# ---------------------------------------------------------------- MIMO


class EqualizerDiverged(RuntimeError):
    pass


@dataclass(frozen=True)
class EqualizerConfig:
    n_taps: int = 15
    block: int = 256
    mu_lms: float = 1e-3
    mu_cma: float = 1e-4
    lms_passes: int = 2
    divergence_ratio: float = 10.0


@dataclass
class EqualizerState:
    """Frequency-domain 2x2 taps ``W[out, in, bin]`` on a ``2 * block`` grid."""

    W: np.ndarray
    mode: str
    step_size: float
    n_taps: int
    block: int

    @classmethod
    def identity(cls, cfg: EqualizerConfig, n: int = 2) -> "EqualizerState":
        if cfg.n_taps > cfg.block:
            raise ValueError("n_taps must not exceed the block length")
        taps = np.zeros((n, n, 2 * cfg.block), dtype=complex)
        for i in range(n):
            taps[i, i, cfg.n_taps // 2] = 1.0
        return cls(sfft.fft(taps, axis=-1), "data_aided_lms", cfg.mu_lms, cfg.n_taps, cfg.block)

    @property
    def delay(self) -> int:
        return self.n_taps // 2

    def taps(self) -> np.ndarray:
        return sfft.ifft(self.W, axis=-1)[..., : self.n_taps]


@dataclass
class EqualizerResult:
    symbols: np.ndarray
    state: EqualizerState
    mse_trace: np.ndarray


def _fd_pass(x, W, cfg, mode, mu, desired=None, update=True, radius=1.0):
    """One overlap-save frequency-domain block LMS/CMA pass.

    ``x`` is ``(n_in, n)``; returns outputs ``(n_out, n)`` aligned with the
    input (the ``n_taps // 2`` tap delay is removed).
    """
    n_in, n = x.shape
    b = cfg.block
    nfft = 2 * b
    d = cfg.n_taps // 2
    n_blocks = -(-(n + d) // b)
    xp = np.concatenate([np.zeros((n_in, b), complex), x, np.zeros((n_in, n_blocks * b - n + b), complex)], axis=1)
    p_in = max(float(np.mean(np.abs(x) ** 2)), 1e-30)
    y_all = np.zeros((W.shape[0], n_blocks * b), dtype=complex)
    mse = []
    tapwin = np.zeros(nfft)
    tapwin[: cfg.n_taps] = 1.0
    for k in range(n_blocks):
        X = sfft.fft(xp[:, k * b : k * b + nfft], axis=-1)
        y = sfft.ifft(np.einsum("oif,if->of", W, X), axis=-1)[:, b:]
        y_all[:, k * b : (k + 1) * b] = y
        if float(np.mean(np.abs(y) ** 2)) > cfg.divergence_ratio * n_in * p_in:
            raise EqualizerDiverged(f"{mode} output power exceeded {cfg.divergence_ratio}x input at block {k}")
        if not update:
            continue
        if mode == "data_aided_lms":
            lo, hi = k * b - d, (k + 1) * b - d
            valid = np.zeros(b, dtype=bool)
            seg = np.arange(lo, hi)
            ok = (seg >= 0) & (seg < desired.shape[1])
            valid[ok] = True
            if not valid.any():
                continue
            e = np.zeros_like(y)
            e[:, ok] = desired[:, seg[ok]] - y[:, ok]
            mse.append(float(np.mean(np.abs(e[:, ok]) ** 2)))
        else:
            e = y * (radius - np.abs(y) ** 2)
            mse.append(float(np.mean(np.abs(radius - np.abs(y) ** 2) ** 2)))
        E = sfft.fft(np.concatenate([np.zeros_like(e), e], axis=-1), axis=-1)
        g = sfft.ifft(np.einsum("of,if->oif", E, X.conj()), axis=-1) * tapwin
        W = W + (mu / p_in) * sfft.fft(g, axis=-1)
    out = y_all[:, d : d + n]
    return out, W, mse


def mimo_equalize(
    rx: np.ndarray,
    frame: SymbolFrame,
    cfg: EqualizerConfig = EqualizerConfig(),
    state: EqualizerState | None = None,
) -> EqualizerResult:
    """2x2 frequency-domain equalizer: data-aided LMS over the training
    block, then CMA over the payload.

    ``rx`` is ``(2, n_symbols)`` at one sample per symbol, aligned with
    ``frame``. Returns equalized symbols for the whole frame.
    """
    rx = np.atleast_2d(np.asarray(rx, dtype=complex))
    n_in = rx.shape[0]
    scale = math.sqrt(n_in / max(float(np.sum(np.mean(np.abs(rx) ** 2, axis=-1))), 1e-30))
    x = rx * scale
    st = state or EqualizerState.identity(cfg, n_in)
    W = st.W
    n_tr = frame.spec.n_training_symbols
    trace = []
    if n_tr > 0:
        desired = frame.symbols[:, :n_tr]
        for _ in range(cfg.lms_passes):
            _, W, mse = _fd_pass(x[:, :n_tr], W, cfg, "data_aided_lms", cfg.mu_lms, desired)
            trace += mse
    r2 = float(np.mean(np.abs(frame.constellation.points) ** 4))
    if cfg.mu_cma > 0:
        _, W, mse = _fd_pass(x[:, n_tr:], W, cfg, "cma", cfg.mu_cma, radius=r2)
        trace += mse
    out, _, _ = _fd_pass(x, W, cfg, "cma", 0.0, update=False)
    final = EqualizerState(W, "cma" if cfg.mu_cma > 0 else "data_aided_lms",
                           cfg.mu_cma if cfg.mu_cma > 0 else cfg.mu_lms, cfg.n_taps, cfg.block)
    return EqualizerResult(out, final, np.asarray(trace))


# ---------------------------------------------------------------- overlap-save


@dataclass
class OverlapSaveInfo:
    n_blocks: int
    step: int
    discard: int
    padded_tail: int

    @property
    def flagged(self) -> bool:
        return self.padded_tail > 0


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("PRISM_THREADS", "1")))
    except ValueError:
        return 1


def overlap_save_run(
    traces: np.ndarray | Sequence[np.ndarray],
    block_len: int,
    operator: Callable[[np.ndarray, int], np.ndarray],
    save_fraction: float = 0.5,
    pad: str = "zeros",
    workers: int | None = None,
) -> tuple[np.ndarray, OverlapSaveInfo]:
    """Blockwise processing with edge discard.

    ``traces`` is ``(..., n)``; ``operator(block, start)`` receives a
    ``(..., block_len)`` slice (``start`` is the stream index of its first
    sample, negative for the lead-in) and returns an output of matching last
    dimension. The central ``save_fraction`` of every block is kept and the
    kept pieces tile the stream. ``pad`` is ``"zeros"`` or ``"wrap"`` (for
    periodic streams).
    """
    x = np.asarray(traces)
    if block_len <= 0 or block_len & (block_len - 1):
        raise ValueError("block_len must be a power of two")
    if not 0 < save_fraction <= 1:
        raise ValueError("save_fraction must lie in (0, 1]")
    n = x.shape[-1]
    step = int(block_len * save_fraction)
    discard = (block_len - step) // 2
    n_blocks = -(-n // step)
    tail = n_blocks * step - n
    total = n_blocks * step + block_len - step
    mode = "wrap" if pad == "wrap" else "constant"
    pad_width = [(0, 0)] * (x.ndim - 1) + [(discard, total - n - discard)]
    xp = np.pad(x, pad_width, mode=mode)
    starts = [k * step for k in range(n_blocks)]

    def work(k0):
        out = operator(xp[..., k0 : k0 + block_len], k0 - discard)
        return np.asarray(out)[..., discard : discard + step]

    n_workers = workers or _threads()
    if n_workers > 1:
        with ThreadPoolExecutor(n_workers) as ex:
            pieces = list(ex.map(work, starts))
    else:
        pieces = [work(k0) for k0 in starts]
    out = np.concatenate(pieces, axis=-1)[..., :n]
    return out, OverlapSaveInfo(n_blocks, step, discard, tail)
