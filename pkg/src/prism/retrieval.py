"""
Dispersion-based phase retrieval.

A modified Gerchberg-Saxton loop recovers the complex field ``s`` from the
undispersed intensity ``a = |s|^2`` and the dispersed intensity
``b = |D s|^2``. One iteration performs, in order:

1. amplitude replacement in the undispersed plane: ``sqrt(a) * exp(j arg s)``
2. removal of the link dispersion ``h_CD``
3. pilot constraint at known symbol instants (phase, or phase and amplitude)
4. re-application of ``h_CD``
5. propagation through the retrieval dispersion ``D``
6. amplitude replacement with ``sqrt(b)``
7. back-propagation through ``D^-1``
8. rectangular band-limit of the spectrum

after which ``A_err = |a - |s'|^2|^2`` is evaluated per sample. Every
``reset_period`` iterations the phases of samples with ``A_err > epsilon``
are re-randomized to leave stagnation points.

Intensities enter the loop normalized by their maxima; the dispersed trace
is then rescaled so that both traces carry the same energy (``D`` is
all-pass, so any mismatch is a measurement artefact).
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.fft as sfft

from .channel import DispersionOperator
from .waveform import ComplexWaveform, IntensityTrace, SymbolFrame

_TINY = 1e-300


@dataclass(frozen=True)
class RetrievalConfig:
    """Knobs of the retrieval loop.

    ``epsilon`` is the per-sample escape threshold on ``A_err`` in units of
    max-normalized intensity squared; ``stop_tolerance`` is the mean-``A_err``
    level that ends the run early (``None`` reuses ``epsilon``, ``0``
    disables early stopping). ``bandwidth`` is the two-sided width of the
    spectral mask in Hz; ``None`` takes it from the frame.
    """

    epsilon: float = 2e-3
    reset_period: int = 500
    max_escapes: int = 40
    max_iterations: int | None = None
    stop_tolerance: float | None = None
    retrieval_dispersion: DispersionOperator = DispersionOperator(650.0)
    link_cd: DispersionOperator = DispersionOperator(0.0)
    bandwidth: float | None = None
    pilot_constraint: str = "phase_only"
    init: str = "random_uniform_phase"
    keep_best: bool = True

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if self.reset_period < 1:
            raise ValueError("reset_period must be >= 1")
        if self.retrieval_dispersion.total_dispersion == 0:
            raise ValueError("retrieval dispersion must be nonzero")
        if self.pilot_constraint not in ("phase_only", "full_field"):
            raise ValueError(f"unknown pilot_constraint {self.pilot_constraint!r}")
        if self.init not in ("random_uniform_phase", "provided"):
            raise ValueError(f"unknown init {self.init!r}")

    @property
    def iteration_budget(self) -> int:
        if self.max_iterations is not None:
            return self.max_iterations
        return self.reset_period * max(self.max_escapes, 1)

    @property
    def stop_level(self) -> float:
        return self.epsilon if self.stop_tolerance is None else self.stop_tolerance

    def with_(self, **kw) -> "RetrievalConfig":
        return replace(self, **kw)


@dataclass(frozen=True)
class PilotSet:
    """Known field values at sample ``indices`` of the CD-free plane.

    ``values`` are in the physical units of the undispersed trace (so that
    ``|values|^2`` is comparable with ``a``).
    """

    indices: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "indices", np.asarray(self.indices, dtype=np.int64))
        object.__setattr__(self, "values", np.asarray(self.values, dtype=np.complex128))
        if self.indices.shape != self.values.shape:
            raise ValueError("pilot indices and values differ in shape")

    @classmethod
    def empty(cls) -> "PilotSet":
        return cls(np.zeros(0, dtype=np.int64), np.zeros(0, dtype=complex))

    def __len__(self) -> int:
        return self.indices.size

    def shifted(self, offset: int, n: int, margin: int = 0) -> "PilotSet":
        """Re-index into a window starting at ``offset`` of length ``n``."""
        idx = self.indices - offset
        keep = (idx >= margin) & (idx < n - margin)
        return PilotSet(idx[keep], self.values[keep])


def rc_power_factor(rolloff: float) -> float:
    """Mean power of a raised-cosine waveform per unit symbol energy."""
    return 1 - rolloff / 4


def pilots_from_frame(frame: SymbolFrame, pol: int = 0, mean_power: float = 1.0, include_training: bool = False) -> PilotSet:
    """Pilot constraint for one polarization of a single-pol style frame.

    Symbol values are scaled so that a waveform of ``mean_power`` carrying
    unit-energy symbols reproduces them at its symbol instants.
    """
    mask = frame.pilot_mask | (frame.training_mask if include_training else False)
    idx = np.flatnonzero(mask)
    g = math.sqrt(mean_power / rc_power_factor(frame.spec.rolloff))
    return PilotSet(idx * frame.spec.samples_per_symbol, frame.symbols[pol, idx] * g)


@dataclass
class RetrievalState:
    """Current estimate of the undispersed field and loop counters."""

    s_est: np.ndarray
    iteration: int = 0
    escapes_done: int = 0
    a_err: np.ndarray | None = None

    @property
    def mean_a_err(self) -> float:
        return float(np.mean(self.a_err)) if self.a_err is not None else math.inf


@dataclass
class RetrievalReport:
    mean_a_err_trace: np.ndarray
    converged: bool
    iterations_used: int
    escapes_done: int
    final_mean_a_err: float
    best_iteration: int
    escape_iterations: list[int] = field(default_factory=list)
    symbol_a_err: np.ndarray | None = None
    delta_theta: np.ndarray | None = None
    element_trace: np.ndarray | None = None

    @property
    def mean_a_err_db(self) -> float:
        return 10 * math.log10(max(self.final_mean_a_err, _TINY))

    def write_csv(self, path: str | Path) -> None:
        """Per-iteration convergence trace (iteration, mean_a_err_db, escapes_done)."""
        esc = np.searchsorted(np.asarray(self.escape_iterations), np.arange(1, self.mean_a_err_trace.size + 1), side="left")
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "mean_a_err_db", "escapes_done"])
            for i, (v, e) in enumerate(zip(self.mean_a_err_trace, esc), start=1):
                w.writerow([i, f"{v:.6f}", int(e)])


class _Plan:
    """Precomputed frequency responses for one block geometry."""

    def __init__(self, n: int, sample_rate: float, cfg: RetrievalConfig, bandwidth: float | None,
                 dispersions: Sequence[DispersionOperator] | None = None):
        self.n = n
        f = sfft.fftfreq(n, 1 / sample_rate)
        mask = np.ones(n) if bandwidth is None else (np.abs(f) <= bandwidth / 2).astype(float)
        self.mask = mask
        link = cfg.link_cd.response(n, sample_rate)
        self.has_link = cfg.link_cd.total_dispersion != 0
        self.cd_off = link.conj()
        els = list(dispersions) if dispersions else [cfg.retrieval_dispersion]
        self.fwd = []
        self.back = []
        for d in els:
            h = d.response(n, sample_rate)
            self.fwd.append(h * link)
            self.back.append(h.conj() * mask)
        self.plain_fwd = [d.response(n, sample_rate) for d in els]


def _phasor(x: np.ndarray) -> np.ndarray:
    return x / np.maximum(np.abs(x), _TINY)


def _iterate(est, sa, sb, plan: _Plan, pil_idx, pil_val, full_field: bool, element: int = 0, b_free=None):
    """One GS cycle; returns the new undispersed-plane estimate."""
    f = sa * _phasor(est)
    if pil_idx.size:
        u = sfft.ifft(sfft.fft(f) * plan.cd_off) if plan.has_link else f
        if full_field:
            u[pil_idx] = pil_val
        else:
            u[pil_idx] = np.abs(u[pil_idx]) * pil_val
        d = sfft.ifft(sfft.fft(u) * plan.fwd[element])
    else:
        d = sfft.ifft(sfft.fft(f) * plan.plain_fwd[element])
    if b_free is None:
        d = sb * _phasor(d)
    else:
        d = np.where(b_free, d, sb * _phasor(d))
    return sfft.ifft(sfft.fft(d) * plan.back[element])


def _normalize(a: np.ndarray, b: np.ndarray, b_valid=None) -> tuple[np.ndarray, np.ndarray, float]:
    a_peak = float(a.max())
    if a_peak <= 0:
        raise ValueError("undispersed trace is identically zero")
    an = a / a_peak
    bn = b / max(float(b.max()), _TINY)
    sel = slice(None) if b_valid is None else b_valid
    bn = bn * (an[sel].mean() / max(bn[sel].mean(), _TINY))
    return an, bn, a_peak


def _as_array(t) -> np.ndarray:
    return np.asarray(t.samples if isinstance(t, IntensityTrace) else t, dtype=np.float64)


def _resolve_pilots(pilots, cfg, an, a_peak, sps: int | None):
    if pilots is None:
        return PilotSet.empty()
    if isinstance(pilots, SymbolFrame):
        pilots = pilots_from_frame(pilots, 0, float(np.mean(an)) * a_peak)
    vals = pilots.values / math.sqrt(a_peak)
    if cfg.pilot_constraint == "phase_only":
        vals = _phasor(vals)
    return PilotSet(pilots.indices, vals)


def _bandwidth(cfg: RetrievalConfig, pilots) -> float | None:
    if cfg.bandwidth is not None:
        return cfg.bandwidth
    if isinstance(pilots, SymbolFrame):
        return pilots.spec.bandwidth
    return None


def gs_iteration(
    state: RetrievalState,
    a: IntensityTrace,
    b: IntensityTrace,
    cfg: RetrievalConfig,
    pilots: SymbolFrame | PilotSet | None = None,
) -> RetrievalState:
    """Run one full GS cycle and return the updated state.

    ``state.s_est`` lives in max-normalized units (``|s|^2`` comparable with
    ``a / max(a)``).
    """
    av, bv = _as_array(a), _as_array(b)
    if not (av.shape == bv.shape == state.s_est.shape):
        raise ValueError("traces and estimate must have equal length")
    an, bn, peak = _normalize(av, bv)
    plan = _Plan(av.size, a.sample_rate, cfg, _bandwidth(cfg, pilots))
    ps = _resolve_pilots(pilots, cfg, an, peak, None)
    est = _iterate(state.s_est, _amp(an), _amp(bn), plan, ps.indices, ps.values,
                   cfg.pilot_constraint == "full_field")
    err = (an - np.abs(est) ** 2) ** 2
    return RetrievalState(est, state.iteration + 1, state.escapes_done, err)


def escape_local_minimum(state: RetrievalState, cfg: RetrievalConfig, rng: np.random.Generator) -> RetrievalState:
    """Re-randomize the phase of samples whose ``A_err`` exceeds ``epsilon``."""
    bad = state.a_err > cfg.epsilon
    if not bad.any():
        return state
    est = state.s_est.copy()
    est[bad] = np.abs(est[bad]) * np.exp(1j * rng.uniform(-np.pi, np.pi, int(bad.sum())))
    return RetrievalState(est, state.iteration, state.escapes_done + 1, state.a_err)


def _amp(x: np.ndarray) -> np.ndarray:
    # converter noise can push intensities below zero
    return np.sqrt(np.maximum(x, 0.0))


def _initial(cfg, an, rng, init_field):
    if cfg.init == "provided":
        if init_field is None:
            raise ValueError("init='provided' needs an initial field")
        return _amp(an) * _phasor(np.asarray(init_field, dtype=complex))
    return _amp(an) * np.exp(1j * rng.uniform(-np.pi, np.pi, an.size))


def _symbol_diagnostics(est, an, truth, sps, offset=0):
    sym_err = ((an - np.abs(est) ** 2) ** 2)[offset::sps]
    dth = None
    if truth is not None:
        t = np.asarray(truth.samples if isinstance(truth, ComplexWaveform) else truth)
        dth = np.abs(np.angle(est[offset::sps] * np.conj(t[offset::sps])))
    return sym_err, dth


def _run_loop(an, bn, plan, ps, cfg, rng, est, schedule=None, b_free=None, escapes=True):
    sa, sb = _amp(an), _amp(bn)
    full = cfg.pilot_constraint == "full_field"
    budget = cfg.iteration_budget if schedule is None else len(schedule)
    stop = cfg.stop_level
    trace = np.empty(budget)
    best = (math.inf, est, 0)
    escape_its = []
    it = 0
    err = None
    for it in range(1, budget + 1):
        el = 0 if schedule is None else int(schedule[it - 1])
        est = _iterate(est, sa, sb, plan, ps.indices, ps.values, full, el, b_free)
        err = (an - (est.real**2 + est.imag**2)) ** 2
        m = float(err.mean())
        trace[it - 1] = m
        if m < best[0]:
            best = (m, est, it)
        if stop > 0 and m < stop:
            break
        if escapes and it % cfg.reset_period == 0 and it < budget and len(escape_its) < cfg.max_escapes:
            bad = err > cfg.epsilon
            if bad.any():
                k = int(bad.sum())
                est = est.copy()
                est[bad] = np.abs(est[bad]) * np.exp(1j * rng.uniform(-np.pi, np.pi, k))
            escape_its.append(it)
    trace = trace[:it]
    if cfg.keep_best and best[0] < trace[-1]:
        final_m, est, best_it = best
        err = (an - np.abs(est) ** 2) ** 2
    else:
        final_m, best_it = trace[-1], it
    return est, err, trace, escape_its, final_m, best_it


def run_retrieval(
    a: IntensityTrace,
    b: IntensityTrace,
    cfg: RetrievalConfig,
    pilots: SymbolFrame | PilotSet | None = None,
    truth: ComplexWaveform | None = None,
    rng: np.random.Generator | None = None,
    init_field: np.ndarray | None = None,
    samples_per_symbol: int | None = None,
    b_valid: np.ndarray | None = None,
) -> tuple[ComplexWaveform, RetrievalReport]:
    """Recover the undispersed field from ``a`` and ``b``.

    Returns the field in the physical units of ``a`` (``|s|^2 ~ a``) and a
    report. Non-convergence is reported, not raised. When ``truth`` (the
    field whose intensity is ``a``) is given, ``delta_theta`` holds the
    per-symbol absolute phase error.

    ``b_valid`` marks samples where the dispersed measurement is trusted;
    elsewhere the dispersed-plane amplitude is left free (used for block
    edges under overlap-save processing).
    """
    rng = np.random.default_rng() if rng is None else rng
    av, bv = _as_array(a), _as_array(b)
    if av.shape != bv.shape:
        raise ValueError("intensity traces differ in length")
    an, bn, peak = _normalize(av, bv, b_valid)
    sps = samples_per_symbol or (pilots.spec.samples_per_symbol if isinstance(pilots, SymbolFrame) else 2)
    plan = _Plan(av.size, a.sample_rate, cfg, _bandwidth(cfg, pilots))
    ps = _resolve_pilots(pilots, cfg, an, peak, sps)
    est0 = _initial(cfg, an, rng, init_field)
    b_free = None if b_valid is None else ~np.asarray(b_valid, dtype=bool)
    est, err, trace, esc, final_m, best_it = _run_loop(an, bn, plan, ps, cfg, rng, est0, b_free=b_free)
    sym_err, dth = _symbol_diagnostics(est, an, truth, sps)
    stop = cfg.stop_level
    report = RetrievalReport(
        mean_a_err_trace=10 * np.log10(np.maximum(trace, _TINY)),
        converged=bool(stop > 0 and final_m < stop),
        iterations_used=trace.size,
        escapes_done=len(esc),
        final_mean_a_err=float(final_m),
        best_iteration=best_it,
        escape_iterations=esc,
        symbol_a_err=sym_err,
        delta_theta=dth,
    )
    return ComplexWaveform(est * math.sqrt(peak), a.sample_rate), report


@dataclass(frozen=True)
class ProjectionSet:
    """Dispersive elements ``D_n = n * delta`` (n = 1..N) with their traces."""

    delta_dispersion: float
    traces: tuple[IntensityTrace, ...]
    schedule: str = "scheme1"
    combined_split: float = 0.5
    center_wavelength: float = 1550e-9

    def __post_init__(self):
        if len(self.traces) < 2:
            raise ValueError("need at least two dispersive elements")
        if self.schedule not in ("scheme1", "scheme2", "combined"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    @property
    def n_elements(self) -> int:
        return len(self.traces)

    @property
    def dispersive_elements(self) -> list[DispersionOperator]:
        return [DispersionOperator(n * self.delta_dispersion, self.center_wavelength)
                for n in range(1, self.n_elements + 1)]

    def element_schedule(self, total: int) -> np.ndarray:
        """Element index used at each of ``total`` iterations."""
        n = self.n_elements

        def s1(k):
            return np.arange(k) % n

        def s2(k):
            per = k // n
            out = np.repeat(np.arange(n), per)
            return np.concatenate([out, np.full(k - out.size, n - 1)])

        if self.schedule == "scheme1":
            return s1(total)
        if self.schedule == "scheme2":
            return s2(total)
        k1 = int(round(total * self.combined_split))
        return np.concatenate([s1(k1), s2(total - k1)])


def run_multi_projection(
    a: IntensityTrace,
    ps: ProjectionSet,
    cfg: RetrievalConfig,
    pilots: SymbolFrame | PilotSet | None = None,
    truth: ComplexWaveform | None = None,
    rng: np.random.Generator | None = None,
) -> tuple[ComplexWaveform, RetrievalReport]:
    """Alternate the GS loop over several dispersed planes.

    The total budget ``cfg.iteration_budget`` (``N * M``) is spent following
    ``ps.schedule``; the estimate always carries over between elements.
    Phase resets are not applied.
    """
    rng = np.random.default_rng() if rng is None else rng
    av = _as_array(a)
    an = av / av.max()
    peak = float(av.max())
    bns = []
    for t in ps.traces:
        bv = _as_array(t)
        if bv.shape != av.shape:
            raise ValueError("intensity traces differ in length")
        bns.append(_normalize(av, bv)[1])
    plan = _Plan(av.size, a.sample_rate, cfg, _bandwidth(cfg, pilots), ps.dispersive_elements)
    pil = _resolve_pilots(pilots, cfg, an, peak, None)
    schedule = ps.element_schedule(cfg.iteration_budget)
    est = _initial(cfg, an, rng, None)
    sa = _amp(an)
    sbs = [_amp(x) for x in bns]
    full = cfg.pilot_constraint == "full_field"
    trace = np.empty(schedule.size)
    stop = cfg.stop_tolerance or 0.0
    best = (math.inf, est, 0)
    it = 0
    for it, el in enumerate(schedule, start=1):
        est = _iterate(est, sa, sbs[el], plan, pil.indices, pil.values, full, int(el))
        m = float(np.mean((an - np.abs(est) ** 2) ** 2))
        trace[it - 1] = m
        if m < best[0]:
            best = (m, est, it)
        if stop > 0 and m < stop:
            break
    trace = trace[:it]
    if cfg.keep_best and best[0] < trace[-1]:
        final_m, est, best_it = best
    else:
        final_m, best_it = trace[-1], it
    sps = pilots.spec.samples_per_symbol if isinstance(pilots, SymbolFrame) else 2
    sym_err, dth = _symbol_diagnostics(est, an, truth, sps)
    report = RetrievalReport(
        mean_a_err_trace=10 * np.log10(np.maximum(trace, _TINY)),
        converged=bool(stop > 0 and final_m < stop),
        iterations_used=trace.size,
        escapes_done=0,
        final_mean_a_err=float(final_m),
        best_iteration=best_it,
        symbol_a_err=sym_err,
        delta_theta=dth,
        element_trace=schedule[: trace.size],
    )
    return ComplexWaveform(est * math.sqrt(peak), a.sample_rate), report


@dataclass(frozen=True)
class DispersionEstimate:
    operator: DispersionOperator
    grid: np.ndarray
    correlation: np.ndarray
    low_confidence: bool


def _pearson(x: np.ndarray, y: np.ndarray) -> float:
    x = x - x.mean()
    y = y - y.mean()
    den = math.sqrt(float(x @ x) * float(y @ y))
    return float(x @ y) / den if den > 0 else 0.0


def estimate_b2(
    a: IntensityTrace,
    x: ComplexWaveform,
    search_grid: tuple[float, float] | np.ndarray = (0.0, 2000.0),
    step: float = 10.0,
    flat_tolerance: float = 1e-3,
) -> DispersionEstimate:
    """Find the link dispersion maximizing corr(a, |h_CD * x|^2).

    ``search_grid`` is either ``(start, stop)`` in ps/nm (sampled every
    ``step``) or an explicit array. The best grid point is refined by a
    parabola through its neighbours. A correlation curve whose spread is
    below ``flat_tolerance`` is flagged low-confidence.
    """
    if isinstance(search_grid, tuple):
        grid = np.arange(search_grid[0], search_grid[1] + step / 2, step)
    else:
        grid = np.asarray(search_grid, dtype=float)
    av = _as_array(a)
    xs = np.asarray(x.samples)
    spec = sfft.fft(xs)
    w = 2 * np.pi * sfft.fftfreq(xs.size, 1 / x.sample_rate)
    corr = np.empty(grid.size)
    for k, d in enumerate(grid):
        op = DispersionOperator(float(d), x.center_wavelength)
        y = sfft.ifft(spec * np.exp(-0.5j * op.beta2l * w**2))
        corr[k] = _pearson(av, np.abs(y) ** 2)
    k = int(np.argmax(corr))
    best = float(grid[k])
    if 0 < k < grid.size - 1:
        y0, y1, y2 = corr[k - 1], corr[k], corr[k + 1]
        den = y0 - 2 * y1 + y2
        if den < 0:
            h = grid[k + 1] - grid[k]
            best += float(np.clip(0.5 * (y0 - y2) / den, -0.5, 0.5) * h)
    low = bool(np.ptp(corr) < flat_tolerance)
    return DispersionEstimate(DispersionOperator(best, x.center_wavelength), grid, corr, low)


def dispersion_margin(d: DispersionOperator, bandwidth: float, sample_rate: float) -> int:
    """Samples over which ``d`` smears a band of two-sided width ``bandwidth``."""
    if d.total_dispersion == 0:
        return 0
    spread = abs(d.beta2l) * 2 * np.pi * bandwidth
    return int(math.ceil(spread * sample_rate / 2)) + 2


@dataclass
class BlockwiseResult:
    field: ComplexWaveform
    reports: list[RetrievalReport]
    padded_tail: int

    @property
    def converged_fraction(self) -> float:
        return float(np.mean([r.converged for r in self.reports])) if self.reports else 0.0

    @property
    def mean_a_err_db(self) -> float:
        return float(np.mean([r.mean_a_err_db for r in self.reports]))

    @property
    def iterations(self) -> int:
        return int(sum(r.iterations_used for r in self.reports))


def retrieve_blockwise(
    a: IntensityTrace,
    b: IntensityTrace,
    cfg: RetrievalConfig,
    pilots: PilotSet,
    bandwidth: float,
    block_len: int = 1024,
    save_fraction: float = 0.5,
    seed: int = 0,
    pad: str = "zeros",
    workers: int | None = None,
    init_field: np.ndarray | None = None,
    free_ends: bool = False,
) -> BlockwiseResult:
    """Overlap-save phase retrieval over a long capture.

    Inside each block, pilots closer to the block edge than the link-CD
    spread and dispersed-plane samples closer than the retrieval-dispersion
    spread are not enforced, since the circular propagation used within a
    block is wrong there.

    ``init_field`` (full-length, any scale) warm-starts every block from its
    phase instead of random phases.

    ``free_ends`` applies the same margins at the two ends of the stream, for
    windows cut out of a longer capture.
    """
    from .dsp import overlap_save_run

    fs = a.sample_rate
    cfg = cfg.with_(bandwidth=bandwidth) if cfg.bandwidth is None else cfg
    link_margin = dispersion_margin(cfg.link_cd, bandwidth, fs)
    b_margin = dispersion_margin(cfg.retrieval_dispersion, bandwidth, fs)
    b_valid = np.zeros(block_len, dtype=bool)
    b_valid[b_margin : block_len - b_margin] = True
    n = len(a)
    stacked = np.stack([np.asarray(a.samples), np.asarray(b.samples)])
    reports: dict[int, RetrievalReport] = {}
    if init_field is not None:
        init = np.asarray(init_field, dtype=complex)
        stacked = np.stack([stacked[0] + 0j, stacked[1] + 0j, init])
        cfg = cfg.with_(init="provided")

    def op(block, start):
        ab, bb = block[0].real, block[1].real
        guess = block[2] if init_field is not None else None
        if not np.any(ab > 0):
            return np.zeros(block_len, dtype=complex)
        if pad == "wrap":
            idx = pilots.indices
            shifted = PilotSet(np.concatenate([idx - n, idx, idx + n]), np.tile(pilots.values, 3))
        else:
            shifted = pilots
        if free_ends:
            inner = (shifted.indices >= link_margin) & (shifted.indices < n - link_margin)
            shifted = PilotSet(shifted.indices[inner], shifted.values[inner])
            pos = start + np.arange(block_len)
            valid = b_valid & (pos >= b_margin) & (pos < n - b_margin)
        else:
            valid = b_valid
        local = shifted.shifted(start, block_len, link_margin)
        est, rep = run_retrieval(
            IntensityTrace(ab, fs), IntensityTrace(bb, fs), cfg, local,
            rng=np.random.default_rng([seed, start + block_len]), init_field=guess, b_valid=valid,
        )
        reports[start] = rep
        return est.samples

    out, info = overlap_save_run(stacked, block_len, op, save_fraction, pad=pad, workers=workers)
    reps = [reports[k] for k in sorted(reports)]
    return BlockwiseResult(ComplexWaveform(out, fs), reps, info.padded_tail)
