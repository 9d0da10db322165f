"""
Transmit-side signal generation.

Constellations with Gray labels, framed symbol streams with pilots and a
training block, and raised-cosine pulse shaping onto a sampled field.

Gray labelling convention
-------------------------
Every format is built as a product of two Gray-labelled PAM axes. For an
``L``-level axis the level with index ``i`` (``i = 0`` is the most positive
level) is ``L - 1 - 2 i`` and carries the label ``i ^ (i >> 1)``. A symbol's
bit group is split in half: the leading half labels the in-phase axis, the
trailing half the quadrature axis. QPSK therefore maps ``00`` to
``(1 + 1j) / sqrt(2)``, ``01`` to ``(1 - 1j) / sqrt(2)``, ``10`` to
``(-1 + 1j) / sqrt(2)`` and ``11`` to ``(-1 - 1j) / sqrt(2)``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
import scipy.fft as sfft

C_LIGHT = 299_792_458.0
DEFAULT_WAVELENGTH = 1550e-9


class Modulation(str, enum.Enum):
    QPSK = "QPSK"
    QAM16 = "QAM16"
    QAM64 = "QAM64"


_ALIASES = {"16QAM": "QAM16", "64QAM": "QAM64", "16-QAM": "QAM16", "64-QAM": "QAM64"}
_BITS = {Modulation.QPSK: 2, Modulation.QAM16: 4, Modulation.QAM64: 6}


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.flags.writeable = False
    return arr


def _gray_axis(bits_per_axis: int) -> tuple[np.ndarray, np.ndarray]:
    """Return (levels indexed by label, label indexed by level index)."""
    n_levels = 2**bits_per_axis
    idx = np.arange(n_levels)
    labels = idx ^ (idx >> 1)
    levels_by_label = np.empty(n_levels)
    levels_by_label[labels] = n_levels - 1 - 2 * idx
    return levels_by_label, labels


@dataclass(frozen=True)
class Constellation:
    """Unit-average-power Gray-labelled constellation.

    ``points[k]`` is the symbol carrying the integer label ``k`` (bits read
    MSB first).
    """

    name: Modulation
    points: np.ndarray
    bits_per_symbol: int
    scale: float

    @classmethod
    def from_name(cls, name: str | Modulation) -> "Constellation":
        if isinstance(name, str):
            name = _ALIASES.get(name.upper(), name.upper())
        return _constellation(Modulation(name))

    @property
    def size(self) -> int:
        return self.points.size

    def rings(self) -> np.ndarray:
        return np.unique(np.round(np.abs(self.points), 12))


@lru_cache(maxsize=None)
def _constellation(mod: Modulation) -> Constellation:
    bps = _BITS[mod]
    half = bps // 2
    levels, _ = _gray_axis(half)
    labels = np.arange(2**bps)
    i_lab = labels >> half
    q_lab = labels & (2**half - 1)
    pts = levels[i_lab] + 1j * levels[q_lab]
    scale = 1.0 / np.sqrt(np.mean(np.abs(pts) ** 2))
    return Constellation(mod, _freeze(pts * scale), bps, float(scale))


def map_bits(bits: np.ndarray, c: Constellation) -> np.ndarray:
    """Map a flat bit array onto constellation symbols.

    Raises
    ------
    ValueError
        If the bit count is not a multiple of ``c.bits_per_symbol``.
    """
    bits = np.asarray(bits, dtype=np.uint8).ravel()
    k = c.bits_per_symbol
    if bits.size % k:
        raise ValueError(f"{bits.size} bits is not a multiple of {k} bits/symbol")
    groups = bits.reshape(-1, k)
    weights = 1 << np.arange(k - 1, -1, -1)
    return c.points[groups @ weights]


def demap_symbols(symbols: np.ndarray, c: Constellation) -> np.ndarray:
    """Hard-decision Gray demapping (per-axis slicing) back to bits."""
    symbols = np.asarray(symbols).ravel()
    half = c.bits_per_symbol // 2
    n_levels = 2**half
    _, label_of_index = _gray_axis(half)

    def axis_labels(v: np.ndarray) -> np.ndarray:
        u = v / c.scale
        idx = np.rint((n_levels - 1 - u) / 2).astype(np.int64)
        return label_of_index[np.clip(idx, 0, n_levels - 1)]

    lab = (axis_labels(symbols.real) << half) | axis_labels(symbols.imag)
    shifts = np.arange(c.bits_per_symbol - 1, -1, -1)
    return ((lab[:, None] >> shifts) & 1).astype(np.uint8).ravel()


def decide_symbols(symbols: np.ndarray, c: Constellation) -> np.ndarray:
    return map_bits(demap_symbols(symbols, c), c)


@dataclass(frozen=True)
class FrameSpec:
    n_training_symbols: int = 0
    n_payload_symbols: int = 2048
    pilot_overhead: float = 0.2
    baud_rate: float = 30e9
    samples_per_symbol: int = 2
    rolloff: float = 0.1
    # "constellation": pilots are ordinary constellation points;
    # "unit": pilots restricted to the ring closest to unit amplitude
    pilot_amplitude: str = "constellation"

    def __post_init__(self):
        if self.samples_per_symbol < 2:
            raise ValueError("samples_per_symbol must be >= 2")
        if not 0 <= self.rolloff <= 1:
            raise ValueError("rolloff must lie in [0, 1]")
        if not 0 <= self.pilot_overhead < 1:
            raise ValueError("pilot_overhead must lie in [0, 1)")
        if self.n_payload_symbols <= 0 or self.n_training_symbols < 0:
            raise ValueError("symbol counts must be positive")
        if self.pilot_amplitude not in ("constellation", "unit"):
            raise ValueError(f"unknown pilot_amplitude {self.pilot_amplitude!r}")

    @property
    def n_symbols(self) -> int:
        return self.n_training_symbols + self.n_payload_symbols

    @property
    def sample_rate(self) -> float:
        return self.baud_rate * self.samples_per_symbol

    @property
    def bandwidth(self) -> float:
        """Two-sided occupied bandwidth, ``(1 + rolloff) * baud``."""
        return (1 + self.rolloff) * self.baud_rate

    @property
    def pilot_spacing(self) -> int:
        return int(round(1 / self.pilot_overhead)) if self.pilot_overhead > 0 else 0

    @property
    def pilot_positions(self) -> np.ndarray:
        """Pilot indices relative to the start of the payload."""
        if self.pilot_overhead == 0:
            return np.zeros(0, dtype=np.int64)
        return np.arange(0, self.n_payload_symbols, self.pilot_spacing)


@dataclass(frozen=True)
class SymbolFrame:
    """Symbols and bits of one frame, shape ``(n_pol, n_symbols)``.

    The training block occupies the first ``spec.n_training_symbols``
    columns; ``pilot_mask`` marks payload pilots only.
    """

    spec: FrameSpec
    constellation: Constellation
    symbols: np.ndarray
    bit_truth: np.ndarray
    pilot_mask: np.ndarray

    @property
    def n_pol(self) -> int:
        return self.symbols.shape[0]

    @property
    def training_mask(self) -> np.ndarray:
        m = np.zeros(self.spec.n_symbols, dtype=bool)
        m[: self.spec.n_training_symbols] = True
        return m

    @property
    def payload_mask(self) -> np.ndarray:
        """Payload symbols carrying data (pilots excluded)."""
        return ~self.training_mask & ~self.pilot_mask

    @property
    def known_mask(self) -> np.ndarray:
        return self.training_mask | self.pilot_mask

    @property
    def pilot_indices(self) -> np.ndarray:
        return np.flatnonzero(self.pilot_mask)

    def bits_of(self, pol: int, mask: np.ndarray) -> np.ndarray:
        k = self.constellation.bits_per_symbol
        return self.bit_truth[pol].reshape(-1, k)[mask].ravel()


def _training_rng(seed: int) -> np.random.Generator:
    # fixed stream independent of the payload stream
    return np.random.default_rng([seed, 0x7E5])


def build_frame(
    seed: int, spec: FrameSpec, c: Constellation, n_pol: int = 1
) -> SymbolFrame:
    """Generate a reproducible frame: training block, then payload with pilots.

    The training block is drawn from its own generator so that it is a fixed
    known sequence for a given seed regardless of payload length.
    """
    k = c.bits_per_symbol
    pilot_mask = np.zeros(spec.n_symbols, dtype=bool)
    pilot_mask[spec.n_training_symbols + spec.pilot_positions] = True

    train_bits = _training_rng(seed).integers(
        0, 2, size=(n_pol, spec.n_training_symbols * k), dtype=np.uint8
    )
    rng = np.random.default_rng(seed)
    pay_bits = rng.integers(0, 2, size=(n_pol, spec.n_payload_symbols * k), dtype=np.uint8)

    if spec.pilot_amplitude == "unit" and spec.pilot_positions.size:
        rings = np.abs(c.points)
        allowed = np.flatnonzero(np.isclose(rings, rings[np.argmin(np.abs(rings - 1))]))
        n_p = spec.pilot_positions.size
        labels = allowed[rng.integers(0, allowed.size, size=(n_pol, n_p))]
        lab_bits = (labels[..., None] >> np.arange(k - 1, -1, -1)) & 1
        view = pay_bits.reshape(n_pol, spec.n_payload_symbols, k)
        view[:, spec.pilot_positions, :] = lab_bits

    bits = np.concatenate([train_bits, pay_bits], axis=1)
    symbols = np.stack([map_bits(b, c) for b in bits])
    return SymbolFrame(spec, c, _freeze(symbols), _freeze(bits), _freeze(pilot_mask))


@dataclass(frozen=True)
class ComplexWaveform:
    """Uniformly sampled complex baseband field.

    ``samples`` has shape ``(n,)`` for one polarization or ``(n_pol, n)``.
    """

    samples: np.ndarray
    sample_rate: float
    center_wavelength: float = DEFAULT_WAVELENGTH

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.complex128)
        if s.size == 0:
            raise ValueError("waveform must be non-empty")
        if not np.all(np.isfinite(s)):
            raise ValueError("waveform contains non-finite samples")
        object.__setattr__(self, "samples", _freeze(s))

    def __len__(self) -> int:
        return self.samples.shape[-1]

    @property
    def n_pol(self) -> int:
        return 1 if self.samples.ndim == 1 else self.samples.shape[0]

    def power(self) -> float:
        return float(np.mean(np.abs(self.samples) ** 2))

    def with_samples(self, samples: np.ndarray) -> "ComplexWaveform":
        return ComplexWaveform(samples, self.sample_rate, self.center_wavelength)

    def pol(self, k: int) -> "ComplexWaveform":
        if self.samples.ndim == 1:
            if k:
                raise IndexError(k)
            return self
        return self.with_samples(self.samples[k])


@dataclass(frozen=True)
class IntensityTrace:
    """Real, nonnegative photodetected sequence."""

    samples: np.ndarray
    sample_rate: float
    meta: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=np.float64)
        if s.size == 0:
            raise ValueError("trace must be non-empty")
        object.__setattr__(self, "samples", _freeze(s))

    def __len__(self) -> int:
        return self.samples.shape[-1]

    def normalized(self) -> np.ndarray:
        """Samples divided by their maximum."""
        peak = self.samples.max()
        return self.samples / peak if peak > 0 else self.samples.copy()


def raised_cosine_response(n: int, sample_rate: float, baud: float, rolloff: float) -> np.ndarray:
    """Raised-cosine amplitude response on the ``n``-point DFT grid (peak 1)."""
    f = np.abs(sfft.fftfreq(n, 1 / sample_rate))
    t = 1 / baud
    f1 = (1 - rolloff) / (2 * t)
    f2 = (1 + rolloff) / (2 * t)
    h = np.zeros(n)
    h[f <= f1] = 1.0
    if rolloff > 0:
        m = (f > f1) & (f < f2)
        h[m] = 0.5 * (1 + np.cos(np.pi * t / rolloff * (f[m] - f1)))
    return h


def shape_pulse(symbols: np.ndarray, spec: FrameSpec, wavelength: float = DEFAULT_WAVELENGTH) -> ComplexWaveform:
    """Raised-cosine pulse shaping by circular frequency-domain filtering.

    The output at sample ``k * samples_per_symbol`` equals ``symbols[k]``
    exactly (zero ISI at symbol instants), and the spectrum is strictly
    confined to ``|f| < (1 + rolloff) * baud / 2``. Works on ``(n_sym,)``
    or ``(n_pol, n_sym)`` input.
    """
    symbols = np.asarray(symbols, dtype=np.complex128)
    sps = spec.samples_per_symbol
    n = symbols.shape[-1] * sps
    up = np.zeros(symbols.shape[:-1] + (n,), dtype=np.complex128)
    up[..., ::sps] = symbols
    h = raised_cosine_response(n, spec.sample_rate, spec.baud_rate, spec.rolloff)
    # the folded response sums to sps, so scale to unit gain at symbol instants
    out = sfft.ifft(sfft.fft(up, axis=-1) * (h * sps), axis=-1)
    return ComplexWaveform(out, spec.sample_rate, wavelength)


def symbol_instants(waveform: np.ndarray, sps: int, offset: int = 0) -> np.ndarray:
    return np.asarray(waveform)[..., offset::sps]
