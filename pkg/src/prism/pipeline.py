"""End-to-end simulation chains (transmitter -> link -> receiver -> BER)."""

from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import channel as ch
from . import polrx
from .dsp import (
    BerReport,
    EqualizerConfig,
    EqualizerDiverged,
    carrier_phase_recovery,
    compensate_cd,
    count_ber,
    mimo_equalize,
)
from .retrieval import RetrievalConfig, RetrievalReport, retrieve_blockwise, run_retrieval
from .waveform import ComplexWaveform, Constellation, FrameSpec, IntensityTrace, build_frame, shape_pulse

EPSILON_FLOOR = 5e-4


@dataclass(frozen=True)
class SinglePolParams:
    """One single-polarization simulation point."""

    modulation: str = "QPSK"
    n_symbols: int = 2048
    baud: float = 30e9
    samples_per_symbol: int = 2
    rolloff: float = 0.1
    pilot_overhead: float = 0.2
    pilot_constraint: str = "phase_only"
    length_km: float = 60.0
    ps_per_nm_per_km: float = ch.SMF_PS_NM_KM
    retrieval_dispersion: float = 650.0
    osnr_db: float | None = None
    enob: float | None = None
    rx_filter_bandwidth: float | None = None
    # estimation errors injected into the receiver's knowledge of h_CD and D
    link_cd_error: float = 0.0
    retrieval_dispersion_error: float = 0.0
    # None: calibrate from optimum-start runs (see calibrate_epsilon)
    epsilon: float | None = 2e-3
    stop_tolerance: float | None = 0.0
    reset_period: int = 500
    max_escapes: int = 40
    max_iterations: int | None = None
    init: str = "random_uniform_phase"

    @property
    def link_dispersion(self) -> float:
        return self.length_km * self.ps_per_nm_per_km

    def retrieval_config(self) -> RetrievalConfig:
        return RetrievalConfig(
            epsilon=self.epsilon if self.epsilon is not None else calibrate_epsilon(self),
            reset_period=self.reset_period,
            max_escapes=self.max_escapes,
            max_iterations=self.max_iterations,
            stop_tolerance=self.stop_tolerance,
            retrieval_dispersion=ch.DispersionOperator(self.retrieval_dispersion + self.retrieval_dispersion_error),
            link_cd=ch.DispersionOperator(self.link_dispersion + self.link_cd_error),
            pilot_constraint=self.pilot_constraint,
            init=self.init,
        )

    def frame_spec(self) -> FrameSpec:
        return FrameSpec(
            n_training_symbols=0,
            n_payload_symbols=self.n_symbols,
            pilot_overhead=self.pilot_overhead,
            baud_rate=self.baud,
            samples_per_symbol=self.samples_per_symbol,
            rolloff=self.rolloff,
        )

    def with_(self, **kw) -> "SinglePolParams":
        return replace(self, **kw)


@dataclass
class SinglePolCapture:
    frame: object
    received: ComplexWaveform  # field at the undispersed photodiode
    a: ch.IntensityTrace
    b: ch.IntensityTrace


@dataclass
class SinglePolResult:
    ber: float
    bit_errors: int
    bits_counted: int
    report: RetrievalReport
    wall_time_s: float
    extra: dict = field(default_factory=dict)

    def row(self) -> dict:
        return {
            "ber": self.ber,
            "mean_a_err_db": self.report.mean_a_err_db,
            "iterations": self.report.iterations_used,
            "converged": self.report.converged,
        }


def capture_single_pol(p: SinglePolParams, seed: int) -> SinglePolCapture:
    """Transmit, propagate and detect one frame; deterministic per seed."""
    c = Constellation.from_name(p.modulation)
    spec = p.frame_spec()
    frame = build_frame(seed, spec, c)
    tx = shape_pulse(frame.symbols[0], spec)
    rx = ch.apply_dispersion(tx, ch.DispersionOperator(p.link_dispersion))
    rng = np.random.default_rng([seed, 1])
    rx = ch.load_noise(rx, ch.NoiseModel(p.osnr_db), rng)
    rx = ch.optical_bandpass(rx, p.rx_filter_bandwidth)
    a = ch.photodetect(rx)
    b = ch.photodetect(ch.apply_dispersion(rx, ch.DispersionOperator(p.retrieval_dispersion)))
    if p.enob is not None:
        a = ch.quantize_enob(a, p.enob, rng)
        b = ch.quantize_enob(b, p.enob, rng)
    return SinglePolCapture(frame, rx, a, b)


def calibrate_epsilon(
    p: SinglePolParams,
    quantile: float = 0.9,
    seeds: tuple[int, ...] = (100, 101),
    iterations: int = 300,
    floor: float = EPSILON_FLOOR,
) -> float:
    """Escape threshold matched to the noise level of a scenario.

    Runs the loop from the true received phase (no escapes) on calibration
    seeds and returns the ``quantile`` of the per-sample ``A_err`` it settles
    at, averaged over seeds. Samples above that level are then treated as
    stuck. Never below ``floor`` so that noiseless runs keep a finite
    threshold.
    """
    q = []
    for s in seeds:
        pc = p.with_(epsilon=1.0, init="provided", max_escapes=0, max_iterations=iterations, stop_tolerance=0.0)
        cap = capture_single_pol(pc, s)
        est, _ = run_retrieval(cap.a, cap.b, pc.retrieval_config(), cap.frame, init_field=cap.received.samples)
        peak = cap.a.samples.max()
        err = (cap.a.samples / peak - np.abs(est.samples) ** 2 / peak) ** 2
        q.append(float(np.quantile(err, quantile)))
    return max(float(np.mean(q)), floor)


def recover_symbols(field_est: ComplexWaveform, frame, link_cd: ch.DispersionOperator, pol: int = 0) -> np.ndarray:
    """CD-compensate, sample at symbol instants, normalize on the pilots and
    remove the residual carrier phase."""
    sps = frame.spec.samples_per_symbol
    y = compensate_cd(field_est, link_cd).samples[::sps]
    pil = frame.pilot_indices
    ref = frame.symbols[pol, pil]
    if pil.size:
        g = np.vdot(ref, y[pil]) / np.vdot(ref, ref)
        y = y / abs(g)
    else:
        y = y / math.sqrt(np.mean(np.abs(y) ** 2))
    return carrier_phase_recovery(y, frame.constellation, pilot_indices=pil if pil.size else None,
                                  pilot_symbols=ref if pil.size else None)


def simulate_single_pol(p: SinglePolParams, seed: int, cfg: RetrievalConfig | None = None) -> SinglePolResult:
    t0 = time.perf_counter()
    cap = capture_single_pol(p, seed)
    cfg = cfg or p.retrieval_config()
    init = cap.received.samples if cfg.init == "provided" else None
    est, rep = run_retrieval(
        cap.a, cap.b, cfg, cap.frame, truth=cap.received,
        rng=np.random.default_rng([seed, 2]), init_field=init,
    )
    sym = recover_symbols(est, cap.frame, ch.DispersionOperator(p.link_dispersion + p.link_cd_error))
    ber = count_ber(sym[None, :], cap.frame)
    return SinglePolResult(ber.ber, ber.bit_errors, ber.bits_counted, rep, time.perf_counter() - t0)


# ---------------------------------------------------------------- dual polarization


@dataclass(frozen=True)
class DualPolParams:
    """Polarization-diversity link (520 km equivalent by default)."""

    modulation: str = "QPSK"
    n_training_symbols: int = 2048
    n_payload_symbols: int = 4096
    baud: float = 30e9
    samples_per_symbol: int = 2
    rolloff: float = 0.1
    pilot_overhead: float = 0.2
    link_dispersion: float = 8921.0
    pmd_sections: int = 8
    dgd_total: float = 5e-12
    # None: a new fiber realization per seed; otherwise all captures share one
    fiber_seed: int | None = None
    osnr_db: float | None = 28.0
    retrieval_dispersion: float = 650.0
    n_joint_iters: int = 6
    training_pilot_spacing: int = 2
    training_iterations: int = 1000
    warm_start: bool = True
    payload_iterations: int = 10000
    epsilon: float = 5e-4
    reset_period: int = 500
    block_len: int = 1024
    n_taps: int = 64
    initial_unitary_seed: int | None = None
    equalizer: EqualizerConfig = EqualizerConfig()

    def frame_spec(self) -> FrameSpec:
        return FrameSpec(
            n_training_symbols=self.n_training_symbols,
            n_payload_symbols=self.n_payload_symbols,
            pilot_overhead=self.pilot_overhead,
            baud_rate=self.baud,
            samples_per_symbol=self.samples_per_symbol,
            rolloff=self.rolloff,
        )

    @property
    def link_cd(self) -> ch.DispersionOperator:
        return ch.DispersionOperator(self.link_dispersion)

    def retrieval_config(self, iterations: int) -> RetrievalConfig:
        return RetrievalConfig(
            epsilon=self.epsilon,
            reset_period=self.reset_period,
            max_iterations=iterations,
            stop_tolerance=0.0,
            retrieval_dispersion=ch.DispersionOperator(self.retrieval_dispersion),
            link_cd=self.link_cd,
            bandwidth=self.frame_spec().bandwidth,
        )

    def with_(self, **kw) -> "DualPolParams":
        return replace(self, **kw)


@dataclass
class DualPolCapture:
    frame: object
    channel: ch.PolarizationChannel
    received: ComplexWaveform  # (2, n) field at the photodiodes
    quad: polrx.QuadIntensityCapture


@dataclass
class DualPolResult:
    ber: BerReport
    estimate: polrx.ChannelMatrixEstimate
    pdl_trace: list[float]
    mean_a_err_db: float
    iterations: int
    converged_fraction: float
    wall_time_s: float
    diverged: bool = False

    def row(self) -> dict:
        return {
            "ber": self.ber.ber,
            "mean_a_err_db": self.mean_a_err_db,
            "iterations": self.iterations,
            "converged": self.converged_fraction,
        }


def capture_dual_pol(p: DualPolParams, seed: int) -> DualPolCapture:
    c = Constellation.from_name(p.modulation)
    spec = p.frame_spec()
    frame = build_frame(seed, spec, c, n_pol=2)
    tx = [ch.apply_dispersion(shape_pulse(frame.symbols[k], spec), p.link_cd) for k in range(2)]
    pc = ch.PolarizationChannel.random(seed if p.fiber_seed is None else p.fiber_seed, p.pmd_sections, p.dgd_total)
    rx = ch.apply_polarization_channel(tx[0], tx[1], pc)
    rx = ch.load_noise(rx, ch.NoiseModel(p.osnr_db), np.random.default_rng([seed, 1]))
    d = ch.DispersionOperator(p.retrieval_dispersion)
    a = [ch.photodetect(r) for r in rx]
    b = [ch.photodetect(ch.apply_dispersion(r, d)) for r in rx]
    quad = polrx.QuadIntensityCapture(a[0], b[0], a[1], b[1], (d, d))
    field_ = ComplexWaveform(np.stack([r.samples for r in rx]), rx[0].sample_rate)
    return DualPolCapture(frame, pc, field_, quad)


def dual_pol_backend(fields: ComplexWaveform, frame, link_cd: ch.DispersionOperator, eq: EqualizerConfig) -> BerReport:
    """CD compensation, 2x2 equalization, carrier recovery and BER."""
    sps = frame.spec.samples_per_symbol
    y = compensate_cd(fields, link_cd).samples[:, ::sps]
    s = mimo_equalize(y, frame, eq).symbols
    pil = frame.pilot_indices
    out = [
        carrier_phase_recovery(s[k], frame.constellation, pilot_indices=pil if pil.size else None,
                               pilot_symbols=frame.symbols[k, pil] if pil.size else None)
        for k in range(2)
    ]
    return count_ber(np.stack(out), frame)


def simulate_dual_pol(p: DualPolParams, seed: int, workers: int | None = None) -> DualPolResult:
    """Joint channel estimation on the training block, then overlap-save
    retrieval of the whole capture and conventional DSP."""
    t0 = time.perf_counter()
    cap = capture_dual_pol(p, seed)
    frame = cap.frame
    u_seed = p.initial_unitary_seed if p.initial_unitary_seed is not None else seed + 7919
    joint = polrx.joint_estimation_loop(
        cap.quad, frame, p.retrieval_config(p.training_iterations), p.n_joint_iters, p.link_cd,
        p.n_taps, u_seed, p.training_pilot_spacing, p.block_len, seed=seed, workers=workers,
        warm_start=p.warm_start,
    )
    est = joint.estimate
    pilots = polrx.training_pilots(est, frame, p.training_pilot_spacing, include_payload_pilots=True)
    cfg = p.retrieval_config(p.payload_iterations)
    outs, reps = [], []
    for k in range(2):
        a, b = cap.quad.branch(k)
        r = retrieve_blockwise(a, b, cfg, pilots[k], cfg.bandwidth, p.block_len, seed=seed * 1000 + 900 + k,
                               workers=workers)
        outs.append(r.field.samples)
        reps.append(r)
    fields = ComplexWaveform(np.stack(outs), cap.quad.sample_rate)
    diverged = False
    try:
        ber = dual_pol_backend(fields, frame, p.link_cd, p.equalizer)
    except EqualizerDiverged:
        diverged = True
        bits = int(frame.bits_of(0, frame.payload_mask & ~frame.pilot_mask).size) * 2
        ber = BerReport(bits // 2, bits)
    blocks = [r for rep in reps for r in rep.reports]
    return DualPolResult(
        ber=ber,
        estimate=est,
        pdl_trace=joint.pdl_trace,
        mean_a_err_db=float(np.mean([r.mean_a_err_db for r in reps])),
        iterations=int(sum(r.iterations_used for r in blocks)),
        converged_fraction=float(np.mean([r.converged for r in blocks])) if blocks else 0.0,
        wall_time_s=time.perf_counter() - t0,
        diverged=diverged,
    )


def params_dict(p) -> dict:
    return asdict(p)
