"""Dual-polarization front end: LS channel estimation, PDL, pilot
prediction and the joint estimation loop."""

import math

import numpy as np
import pytest
import scipy.fft as sfft
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import unitary_group

from prism import channel as ch
from prism import polrx
from prism.retrieval import RetrievalConfig
from prism.waveform import ComplexWaveform, Constellation, FrameSpec, build_frame, shape_pulse

QPSK = Constellation.from_name("QPSK")


def _frame(seed=0, n_tr=1024, n_pay=256):
    return build_frame(seed, FrameSpec(n_training_symbols=n_tr, n_payload_symbols=n_pay, pilot_overhead=0.1),
                       QPSK, n_pol=2)


def _received(frame, pc, link=ch.DispersionOperator(0.0)):
    spec = frame.spec
    tx = [ch.apply_dispersion(shape_pulse(frame.symbols[k], spec), link) for k in range(2)]
    x, y = ch.apply_polarization_channel(tx[0], tx[1], pc)
    return ComplexWaveform(np.stack([x.samples, y.samples]), x.sample_rate)


def _single_tap(h_pm):
    return h_pm[..., h_pm.shape[-1] // 2]


# ---------------------------------------------------------------- LS estimate


def test_identity_channel_recovered():
    f = _frame()
    est = polrx.estimate_h(_received(f, ch.PolarizationChannel.identity()), f, n_taps=16)
    target = np.zeros_like(est.h_pm)
    target[..., est.center] = np.eye(2)
    assert np.max(np.abs(est.h_pm - target)) < 1e-8
    assert est.delay == 0
    assert est.diagnostics["nmse"] < 1e-15


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_random_unitary_recovered(seed):
    u = unitary_group.rvs(2, random_state=np.random.default_rng(seed))
    f = _frame(seed)
    est = polrx.estimate_h(_received(f, ch.PolarizationChannel.from_matrix(u)), f, n_taps=16)
    H = np.moveaxis(est.H_pm, -1, 0)
    assert np.max(np.abs(H - u[None])) < 1e-6
    assert est.pdl_db < 0.2


def test_link_dispersion_removed_before_fit():
    u = unitary_group.rvs(2, random_state=np.random.default_rng(9))
    f = _frame(n_tr=2048)
    link = ch.DispersionOperator(8921.0)
    est = polrx.estimate_h(_received(f, ch.PolarizationChannel.from_matrix(u), link), f, link, n_taps=16)
    assert np.max(np.abs(_single_tap(est.h_pm) - u)) < 1e-3
    assert est.pdl_db < 0.2


def test_diagonal_pdl():
    f = _frame()
    est = polrx.estimate_h(_received(f, ch.PolarizationChannel.from_matrix(np.diag([1.0, 0.5]))), f, n_taps=16)
    assert est.pdl_db == pytest.approx(20 * math.log10(2), abs=1e-3)
    assert polrx.compute_pdl(est, "max") == pytest.approx(6.0206, abs=1e-3)


def test_pmd_channel_low_pdl_and_nmse():
    f = _frame(n_tr=2048)
    pc = ch.PolarizationChannel.random(4, 8, 5e-12)
    est = polrx.estimate_h(_received(f, pc), f, n_taps=32)
    assert est.pdl_db < 0.2
    assert est.diagnostics["nmse"] < 1e-6


def test_H_pm_is_dft_of_centered_taps():
    r = np.random.default_rng(0)
    h = r.standard_normal((2, 2, 9)) + 1j * r.standard_normal((2, 2, 9))
    est = polrx.ChannelMatrixEstimate(h, 30e9, n_fft=64)
    f = np.arange(64)
    k = np.arange(9) - 4
    ref = np.einsum("oil,fl->oif", h, np.exp(-2j * np.pi * np.outer(f, k) / 64))
    assert np.max(np.abs(est.H_pm - ref)) < 1e-10


def test_singular_channel_reports_infinite_pdl():
    h = np.zeros((2, 2, 5), complex)
    h[0, 0, 2] = 1
    assert polrx.ChannelMatrixEstimate(h, 30e9).pdl_db == math.inf


def test_rank_deficient_training_raises():
    f = _frame()
    x = np.zeros_like(f.symbols[:, :1024])
    y = np.zeros_like(x)
    with pytest.raises(polrx.RankDeficientTraining):
        polrx.estimate_h_symbols(y, x, 8)
    # identical tributaries cannot separate the two inputs
    x2 = np.stack([f.symbols[0, :1024]] * 2)
    with pytest.raises(polrx.RankDeficientTraining):
        polrx.estimate_h_symbols(x2, x2, 8, align=False)
    with pytest.raises(polrx.RankDeficientTraining):
        polrx.estimate_h(_received(_frame(n_tr=0), ch.PolarizationChannel.identity()), _frame(n_tr=0))


def test_replay_nmse():
    # predicting with the fitted taps reproduces the fitted training samples
    r = np.random.default_rng(3)
    f = _frame(n_tr=2048)
    h = (r.standard_normal((2, 2, 7)) + 1j * r.standard_normal((2, 2, 7))) * np.exp(-np.abs(np.arange(7) - 3))
    x = f.symbols[:, :2048]
    y = polrx._convolve_symbols(h, x)
    h_hat, delay, nmse = polrx.estimate_h_symbols(y, x, 7, align=False)
    assert nmse < 1e-10
    assert delay == 0
    est = polrx.ChannelMatrixEstimate(h_hat, 30e9)
    pred = polrx.propagate_pilots(est, x)
    assert np.linalg.norm(pred - y) / np.linalg.norm(y) < 1e-5


def test_alignment_finds_delay():
    f = _frame(n_tr=2048)
    x = f.symbols[:, :2048]
    y = np.roll(x, 5, axis=-1)
    _, delay, _ = polrx.estimate_h_symbols(y, x, 8)
    assert delay == 5


def test_canonical_gauge_removes_row_phase():
    f = _frame()
    rot = np.diag(np.exp(1j * np.array([0.7, -2.1])))
    a = polrx.estimate_h(_received(f, ch.PolarizationChannel.from_matrix(rot)), f, n_taps=8, gauge=True)
    b = polrx.estimate_h(_received(f, ch.PolarizationChannel.identity()), f, n_taps=8, gauge=True)
    np.testing.assert_allclose(a.h_pm, b.h_pm, atol=1e-8)
    dc = a.h_pm.sum(axis=-1)
    assert np.allclose(np.imag([dc[0, 0], dc[1, 1]]), 0, atol=1e-12)


def test_h_adds_link_dispersion():
    h = np.zeros((2, 2, 8), complex)
    h[0, 0, 4] = h[1, 1, 4] = 1
    est = polrx.ChannelMatrixEstimate(h, 30e9, ch.DispersionOperator(1000.0), n_fft=128)
    H = sfft.fft(sfft.ifftshift(est.h, axes=-1), axis=-1)
    np.testing.assert_allclose(H[0, 0], ch.DispersionOperator(1000.0).response(128, 30e9), atol=1e-12)


# ---------------------------------------------------------------- pilot prediction


def test_propagate_identity_and_swap():
    f = _frame()
    p = f.symbols[:, :512]
    h = np.zeros((2, 2, 5), complex)
    h[0, 0, 2] = h[1, 1, 2] = 1
    np.testing.assert_allclose(polrx.propagate_pilots(polrx.ChannelMatrixEstimate(h, 30e9), p), p, atol=1e-15)
    h = np.zeros((2, 2, 5), complex)
    h[0, 1, 2] = h[1, 0, 2] = 1
    np.testing.assert_allclose(polrx.propagate_pilots(polrx.ChannelMatrixEstimate(h, 30e9), p), p[::-1], atol=1e-15)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_unitary_prediction_preserves_power(seed):
    u = unitary_group.rvs(2, random_state=np.random.default_rng(seed))
    h = np.zeros((2, 2, 3), complex)
    h[..., 1] = u
    p = _frame(seed % 50).symbols[:, :256]
    q = polrx.propagate_pilots(polrx.ChannelMatrixEstimate(h, 30e9), p)
    assert abs(np.sum(np.abs(q) ** 2) - np.sum(np.abs(p) ** 2)) < 1e-10 * np.sum(np.abs(p) ** 2)


def test_training_pilots_layout():
    f = _frame(n_tr=64, n_pay=200)
    est = polrx.initial_estimate(None, 30e9, ch.DispersionOperator(0.0), 8)
    ps = polrx.training_pilots(est, f, 2, include_payload_pilots=True)
    sps = f.spec.samples_per_symbol
    assert len(ps) == 2
    n = 32 + f.pilot_indices.size
    assert ps[0].indices.size == n
    np.testing.assert_array_equal(ps[0].indices[:32], np.arange(0, 64, 2) * sps)
    np.testing.assert_allclose(ps[1].values[:32], f.symbols[1, 0:64:2], atol=1e-15)


def test_initial_estimate_is_unitary():
    est = polrx.initial_estimate(3, 30e9, ch.DispersionOperator(0.0), 16, scale=2.0)
    assert est.pdl_db < 1e-9
    u = _single_tap(est.h_pm) / 2.0
    np.testing.assert_allclose(u @ u.conj().T, np.eye(2), atol=1e-12)


# ---------------------------------------------------------------- persistence


def test_save_load_roundtrip(tmp_path):
    r = np.random.default_rng(0)
    h = r.standard_normal((2, 2, 12)) + 1j * r.standard_normal((2, 2, 12))
    est = polrx.ChannelMatrixEstimate(h, 32e9, ch.DispersionOperator(123.0), n_fft=128, iteration=4, delay=-2)
    est.save(tmp_path / "est")
    back = polrx.ChannelMatrixEstimate.load(tmp_path / "est")
    np.testing.assert_array_equal(back.h_pm, h)
    assert (back.baud, back.n_fft, back.iteration, back.delay) == (32e9, 128, 4, -2)
    assert back.link_cd.total_dispersion == 123.0
    polrx.write_channel_report(est, tmp_path / "h.csv")
    assert (tmp_path / "h.csv").read_text().count("\n") == 129


def test_capture_validation():
    t = ch.photodetect(ComplexWaveform(np.ones(8, complex), 60e9))
    s = ch.photodetect(ComplexWaveform(np.ones(9, complex), 60e9))
    with pytest.raises(ValueError):
        polrx.QuadIntensityCapture(t, t, t, s)


# ---------------------------------------------------------------- joint loop


def _quad(frame, pc, d=ch.DispersionOperator(650.0)):
    rx = _received(frame, pc)
    a = [ch.photodetect(rx.pol(k)) for k in range(2)]
    b = [ch.photodetect(ch.apply_dispersion(rx.pol(k), d)) for k in range(2)]
    return polrx.QuadIntensityCapture(a[0], b[0], a[1], b[1], (d, d))


def test_joint_loop_identity_fixed_point():
    # noiseless identity channel, started from the true estimate and fields;
    # block truncation against the rectangular mask limits how still it stays
    f = _frame(n_tr=512, n_pay=16)
    pc = ch.PolarizationChannel.identity()
    cap = _quad(f, pc)
    cfg = RetrievalConfig(epsilon=1e-3, reset_period=100, max_iterations=300, stop_tolerance=0.0)
    res = polrx.joint_estimation_loop(cap, f, cfg, n_iters=3, n_taps=8, initial_seed=None, block_len=1024,
                                      init_fields=_received(f, pc))
    assert len(res.history) == 3 and len(res.pdl_trace) == 3
    h = [e.h_pm / np.abs(_single_tap(e.h_pm)).max() for e in res.history]
    assert max(np.max(np.abs(h[k + 1] - h[k])) for k in range(2)) < 2e-3
    np.testing.assert_allclose(_single_tap(h[-1]), np.eye(2), atol=2e-3)
    assert res.pdl_trace[-1] < 0.05
    assert res.fields.n_pol == 2


def test_joint_loop_from_random_start():
    f = _frame(n_tr=512, n_pay=16)
    cap = _quad(f, ch.PolarizationChannel.identity())
    cfg = RetrievalConfig(epsilon=1e-3, reset_period=100, max_iterations=300, stop_tolerance=0.0)
    res = polrx.joint_estimation_loop(cap, f, cfg, n_iters=2, n_taps=8, initial_seed=None, block_len=1024)
    h = _single_tap(res.estimate.h_pm)
    np.testing.assert_allclose(np.abs(h) / np.abs(h).max(), np.eye(2), atol=0.05)
    assert res.pdl_trace[-1] < 0.5


def test_joint_loop_validates_passes():
    f = _frame(n_tr=64, n_pay=16)
    with pytest.raises(ValueError):
        polrx.joint_estimation_loop(_quad(f, ch.PolarizationChannel.identity()), f, RetrievalConfig(), n_iters=0)
