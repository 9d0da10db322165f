"""
Polarization-diversity front end.

Four intensity traces (undispersed and dispersed, per PBS output) are
turned into two full fields by phase retrieval, and the 2x2 fiber coupling
response is estimated from the training block. Because intensities carry no
absolute phase, every estimate is put in a canonical gauge: each output row
is rotated so that its dominant zero-frequency coefficient is real positive.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.fft as sfft
from scipy.stats import unitary_group

from .channel import DispersionOperator, apply_dispersion, pdl_db
from .retrieval import PilotSet, RetrievalConfig, rc_power_factor, retrieve_blockwise
from .waveform import ComplexWaveform, IntensityTrace, SymbolFrame


class RankDeficientTraining(ValueError):
    pass


@dataclass(frozen=True)
class QuadIntensityCapture:
    a_x: IntensityTrace
    b_x: IntensityTrace
    a_y: IntensityTrace
    b_y: IntensityTrace
    retrieval_dispersion: tuple[DispersionOperator, DispersionOperator] = (
        DispersionOperator(650.0),
        DispersionOperator(650.0),
    )

    def __post_init__(self):
        n = {len(t) for t in (self.a_x, self.b_x, self.a_y, self.b_y)}
        if len(n) != 1:
            raise ValueError("all four traces must have equal length")
        for t in (self.a_x, self.b_x, self.a_y, self.b_y):
            if np.any(t.samples < 0):
                raise ValueError("intensity traces must be nonnegative")

    @property
    def sample_rate(self) -> float:
        return self.a_x.sample_rate

    def branch(self, pol: int) -> tuple[IntensityTrace, IntensityTrace]:
        return (self.a_x, self.b_x) if pol == 0 else (self.a_y, self.b_y)


@dataclass
class ChannelMatrixEstimate:
    """Symbol-spaced 2x2 responses.

    ``h_pm[out, in, tap]`` is centered: tap ``k`` has delay ``k - center``
    symbols. ``h`` re-applies the link dispersion to ``h_pm`` on an
    ``n_fft``-point grid. ``H_pm`` is the DFT of the centered ``h_pm``.
    """

    h_pm: np.ndarray
    baud: float
    link_cd: DispersionOperator = DispersionOperator(0.0)
    n_fft: int = 256
    iteration: int = 0
    delay: int = 0
    pdl_aggregate: str = "mean"
    diagnostics: dict = field(default_factory=dict)

    @property
    def n_taps(self) -> int:
        return self.h_pm.shape[-1]

    @property
    def center(self) -> int:
        return self.n_taps // 2

    @property
    def freqs(self) -> np.ndarray:
        return sfft.fftfreq(self.n_fft, 1 / self.baud)

    @property
    def H_pm(self) -> np.ndarray:
        nf = max(self.n_fft, self.n_taps)
        pad = np.zeros(self.h_pm.shape[:2] + (nf,), dtype=complex)
        pad[..., : self.n_taps] = self.h_pm
        return sfft.fft(np.roll(pad, -self.center, axis=-1), axis=-1)

    @property
    def h(self) -> np.ndarray:
        cd = self.link_cd.response(max(self.n_fft, self.n_taps), self.baud)
        return sfft.fftshift(sfft.ifft(self.H_pm * cd, axis=-1), axes=-1)

    @property
    def pdl_db(self) -> float:
        return compute_pdl(self, self.pdl_aggregate)

    def to_dict(self) -> dict:
        return {
            "baud": self.baud,
            "link_cd_ps_nm": self.link_cd.total_dispersion,
            "center_wavelength": self.link_cd.center_wavelength,
            "n_fft": self.n_fft,
            "n_taps": self.n_taps,
            "iteration": self.iteration,
            "delay": self.delay,
            "pdl_db": self.pdl_db,
        }

    def save(self, path: str | Path) -> None:
        """JSON header ``<path>.json`` plus little-endian complex128 taps ``<path>.bin``."""
        path = Path(path)
        path.with_suffix(".json").write_text(json.dumps(self.to_dict(), indent=2))
        self.h_pm.astype("<c16").tofile(path.with_suffix(".bin"))

    @classmethod
    def load(cls, path: str | Path) -> "ChannelMatrixEstimate":
        path = Path(path)
        hdr = json.loads(path.with_suffix(".json").read_text())
        taps = np.fromfile(path.with_suffix(".bin"), dtype="<c16").reshape(2, 2, hdr["n_taps"])
        cd = DispersionOperator(hdr["link_cd_ps_nm"], hdr["center_wavelength"])
        return cls(taps, hdr["baud"], cd, hdr["n_fft"], hdr["iteration"], hdr["delay"])


def _canonical_gauge(h: np.ndarray) -> np.ndarray:
    dc = h.sum(axis=-1)
    out = h.copy()
    for o in range(h.shape[0]):
        i = int(np.argmax(np.abs(dc[o])))
        if abs(dc[o, i]) > 0:
            out[o] *= np.exp(-1j * np.angle(dc[o, i]))
    return out


def _convolve_symbols(h: np.ndarray, x: np.ndarray) -> np.ndarray:
    """``y[o, k] = sum_i sum_l h[o, i, l] x[i, k - l + center]`` (zero outside)."""
    n_taps = h.shape[-1]
    c = n_taps // 2
    n = x.shape[-1]
    y = np.zeros((h.shape[0], n), dtype=complex)
    for o in range(h.shape[0]):
        for i in range(h.shape[1]):
            full = np.convolve(x[i], h[o, i])
            y[o] = y[o] + full[c : c + n]
    return y


def _design_matrix(x: np.ndarray, n_taps: int) -> np.ndarray:
    c = n_taps // 2
    n_in, n = x.shape
    cols = []
    for i in range(n_in):
        xp = np.concatenate([np.zeros(n_taps), x[i], np.zeros(n_taps)])
        for l in range(n_taps):
            s = n_taps + c - l
            cols.append(xp[s : s + n])
    return np.stack(cols, axis=1)


def _align(y: np.ndarray, x: np.ndarray, max_lag: int) -> int:
    """Lag maximizing total cross-correlation magnitude between outputs and inputs."""
    n = y.shape[-1]
    nfft = sfft.next_fast_len(2 * n)
    Y = sfft.fft(y, nfft, axis=-1)
    X = sfft.fft(x, nfft, axis=-1)
    score = np.zeros(nfft)
    for o in range(y.shape[0]):
        for i in range(x.shape[0]):
            score += np.abs(sfft.ifft(Y[o] * X[i].conj())) ** 2
    lags = np.concatenate([np.arange(0, max_lag + 1), np.arange(-max_lag, 0)])
    return int(lags[np.argmax(score[lags])])


def estimate_h_symbols(
    y: np.ndarray,
    x: np.ndarray,
    n_taps: int = 64,
    ridge: float = 1e-12,
    align: bool = True,
    max_lag: int = 32,
    edge: int = 0,
) -> tuple[np.ndarray, int, float]:
    """Regularized least-squares MIMO FIR fit ``y ~ h * x`` at symbol rate.

    Returns ``(h_pm, delay, nmse)``. ``edge`` symbols at each end are left
    out of the fit.
    """
    y = np.atleast_2d(y)
    x = np.atleast_2d(x)
    delay = _align(y, x, max_lag) if align else 0
    if delay:
        x = np.roll(x, delay, axis=-1)
    a = _design_matrix(x, n_taps)
    sl = slice(edge + n_taps, x.shape[-1] - edge - n_taps)
    a = a[sl]
    g = a.conj().T @ a
    scale = np.real(np.trace(g)) / g.shape[0]
    if scale <= 0:
        raise RankDeficientTraining("training block carries no energy")
    cond = np.linalg.cond(g)
    if not np.isfinite(cond) or cond > 1e12:
        raise RankDeficientTraining(f"training matrix is rank deficient (condition number {cond:.3g})")
    rhs = a.conj().T @ y[:, sl].T
    coef = np.linalg.solve(g + ridge * scale * np.eye(g.shape[0]), rhs)
    h = coef.T.reshape(y.shape[0], x.shape[0], n_taps)
    resid = y[:, sl].T - a @ coef
    nmse = float(np.sum(np.abs(resid) ** 2) / max(np.sum(np.abs(y[:, sl]) ** 2), 1e-300))
    return h, delay, nmse


def estimate_h(
    received_training: ComplexWaveform,
    sent_training: SymbolFrame,
    link_cd: DispersionOperator = DispersionOperator(0.0),
    n_taps: int = 64,
    ridge: float = 1e-12,
    align: bool = True,
    edge: int | None = None,
    gauge: bool = False,
) -> ChannelMatrixEstimate:
    """Estimate the coupling matrix from received training fields.

    ``received_training`` holds both polarizations, ``(2, n)`` samples at
    ``samples_per_symbol`` of the frame, covering at least the training
    block. The link dispersion is removed digitally before the fit so the
    fitted taps are ``h_pm``.
    """
    spec = sent_training.spec
    sps = spec.samples_per_symbol
    n_tr = spec.n_training_symbols
    if n_tr == 0:
        raise RankDeficientTraining("frame has no training block")
    y = np.atleast_2d(apply_dispersion(received_training, link_cd.inv()).samples)[:, ::sps][:, :n_tr]
    x = sent_training.symbols[:, :n_tr]
    if edge is None:
        edge = 0 if link_cd.total_dispersion == 0 else int(
            math.ceil(abs(link_cd.beta2l) * 2 * math.pi * spec.bandwidth * spec.baud_rate)) + 4
    h, delay, nmse = estimate_h_symbols(y, x, n_taps, ridge, align, edge=edge)
    if gauge:
        h = _canonical_gauge(h)
    return ChannelMatrixEstimate(h, spec.baud_rate, link_cd, delay=delay, diagnostics={"nmse": nmse})


def compute_pdl(est: ChannelMatrixEstimate, aggregate: str = "mean", band: float | None = None) -> float:
    """PDL (dB) from the singular values of ``H_pm`` aggregated over frequency.

    Returns ``inf`` when the response is singular somewhere in band.
    """
    H = np.moveaxis(est.H_pm, -1, 0)
    f = sfft.fftfreq(H.shape[0], 1 / est.baud)
    if band is not None:
        H = H[np.abs(f) <= band / 2]
    p = pdl_db(H)
    if not np.all(np.isfinite(p)):
        return math.inf
    if aggregate == "mean":
        return float(np.mean(p))
    if aggregate == "max":
        return float(np.max(p))
    if aggregate == "median":
        return float(np.median(p))
    raise ValueError(f"unknown aggregate {aggregate!r}")


def propagate_pilots(est: ChannelMatrixEstimate, p: np.ndarray) -> np.ndarray:
    """Predict received symbol-instant values of a known symbol stream.

    ``p`` is ``(2, n)``; unknown positions should be zero.
    """
    return _convolve_symbols(est.h_pm, np.atleast_2d(np.asarray(p, dtype=complex)))


def initial_estimate(seed: int | None, baud: float, link_cd: DispersionOperator, n_taps: int, scale: float = 1.0) -> ChannelMatrixEstimate:
    """Random (or identity, ``seed=None``) unitary single-tap start; zero PDL."""
    u = np.eye(2, dtype=complex) if seed is None else unitary_group.rvs(2, random_state=np.random.default_rng(seed))
    h = np.zeros((2, 2, n_taps), dtype=complex)
    h[..., n_taps // 2] = u * scale
    return ChannelMatrixEstimate(_canonical_gauge(h), baud, link_cd)


@dataclass
class JointEstimationResult:
    estimate: ChannelMatrixEstimate
    history: list[ChannelMatrixEstimate]
    fields: ComplexWaveform | None
    reports: list = field(default_factory=list)

    @property
    def pdl_trace(self) -> list[float]:
        return [e.pdl_db for e in self.history]


def training_pilots(
    est: ChannelMatrixEstimate,
    frame: SymbolFrame,
    spacing: int,
    include_payload_pilots: bool = False,
) -> list[PilotSet]:
    """Per-polarization pilot constraints from the current estimate.

    Inside the training block every ``spacing``-th symbol is constrained
    to ``h_pm`` applied to the full (known) training sequence; payload pilots
    use the pilot-only stream.
    """
    sps = frame.spec.samples_per_symbol
    n_tr = frame.spec.n_training_symbols
    known = np.zeros_like(frame.symbols)
    known[:, :n_tr] = frame.symbols[:, :n_tr]
    pred_train = propagate_pilots(est, known)
    idx = np.arange(0, n_tr, max(spacing, 1))
    values = [pred_train[:, idx]]
    indices = [idx]
    if include_payload_pilots and frame.pilot_indices.size:
        pil = np.zeros_like(frame.symbols)
        pil[:, frame.pilot_indices] = frame.symbols[:, frame.pilot_indices]
        pred_pay = propagate_pilots(est, pil)
        indices.append(frame.pilot_indices)
        values.append(pred_pay[:, frame.pilot_indices])
    idx_all = np.concatenate(indices)
    vals = np.concatenate(values, axis=1)
    return [PilotSet(idx_all * sps, vals[p]) for p in range(2)]


def joint_estimation_loop(
    cap: QuadIntensityCapture,
    frame: SymbolFrame,
    cfg: RetrievalConfig,
    n_iters: int = 6,
    link_cd: DispersionOperator = DispersionOperator(0.0),
    n_taps: int = 64,
    initial_seed: int | None = 0,
    pilot_spacing: int = 2,
    block_len: int = 1024,
    seed: int = 0,
    pad: str = "zeros",
    workers: int | None = None,
    warm_start: bool = True,
    refine_iterations: int | None = None,
    init_fields: ComplexWaveform | None = None,
) -> JointEstimationResult:
    """Iterate retrieval -> LS estimation -> pilot prediction on the training block.

    Starts from a unitary matrix. With ``warm_start`` every pass after the
    first starts from the previous pass's fields and runs
    ``refine_iterations`` (default: the full budget). Retrieval failures are
    carried in the per-pass reports; the loop always runs ``n_iters`` passes.
    """
    if n_iters < 1:
        raise ValueError("n_iters must be >= 1")
    spec = frame.spec
    sps = spec.samples_per_symbol
    n_tr = spec.n_training_symbols
    n_samp = n_tr * sps
    cfg = cfg.with_(link_cd=link_cd, bandwidth=cfg.bandwidth or spec.bandwidth)
    mean_a = 0.5 * (cap.a_x.samples[:n_samp].mean() + cap.a_y.samples[:n_samp].mean())
    g = math.sqrt(mean_a / rc_power_factor(spec.rolloff))
    est = initial_estimate(initial_seed, spec.baud_rate, link_cd, n_taps, scale=g)
    # the cut at the block ends leaves the dispersed traces inconsistent there
    spread = max(d.spread_symbols(spec.bandwidth, spec.baud_rate) for d in cap.retrieval_dispersion)
    spread += link_cd.spread_symbols(spec.bandwidth, spec.baud_rate)
    edge = int(math.ceil(spread)) + 4
    history = []
    reports = []
    fields = init_fields
    for it in range(1, n_iters + 1):
        pilots = training_pilots(est, frame, pilot_spacing)
        warm = fields is not None and (warm_start or it == 1)
        outs = []
        for pol in range(2):
            a, b = cap.branch(pol)
            pol_cfg = cfg.with_(retrieval_dispersion=cap.retrieval_dispersion[pol])
            if warm and refine_iterations is not None:
                pol_cfg = pol_cfg.with_(max_iterations=refine_iterations)
            a_tr = IntensityTrace(a.samples[:n_samp], a.sample_rate)
            b_tr = IntensityTrace(b.samples[:n_samp], b.sample_rate)
            res = retrieve_blockwise(a_tr, b_tr, pol_cfg, pilots[pol], pol_cfg.bandwidth, block_len,
                                     seed=seed * 1000 + it * 10 + pol, pad=pad, workers=workers,
                                     init_field=fields.samples[pol][:n_samp] if warm else None, free_ends=True)
            outs.append(res.field.samples)
            reports.append(res)
        fields = ComplexWaveform(np.stack(outs), cap.sample_rate)
        new = estimate_h(fields, frame, link_cd, n_taps, align=False, edge=edge, gauge=True)
        new.iteration = it
        history.append(new)
        est = new
    return JointEstimationResult(est, history, fields, reports)


def write_channel_report(est: ChannelMatrixEstimate, path: str | Path) -> None:
    """Time/frequency magnitude tables of ``h_pm`` / ``H_pm`` as CSV."""
    H = est.H_pm
    f = sfft.fftfreq(H.shape[-1], 1 / est.baud)
    order = np.argsort(f)
    with open(path, "w") as fh:
        fh.write("freq_hz,H_xx,H_xy,H_yx,H_yy\n")
        for k in order:
            fh.write(f"{f[k]:.6e}," + ",".join(f"{abs(H[o, i, k]):.6e}" for o in range(2) for i in range(2)) + "\n")
