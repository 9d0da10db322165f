"""Command-line entry point: ``prism <verb> ...``.

Exit codes: 0 success, 2 configuration error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import channel as ch
from . import harness, io, polrx
from .dsp import required_osnr, theory_ber
from .retrieval import RetrievalConfig, run_retrieval
from .waveform import Constellation, FrameSpec, build_frame

EXIT_OK, EXIT_CONFIG, EXIT_IO = 0, 2, 3

_FRAME_KEYS = {f for f in FrameSpec.__dataclass_fields__}


def _read_json(path: str) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise harness.ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as e:
        raise harness.ConfigError(f"{path}: invalid JSON ({e})") from None


def retrieval_config_from_dict(d: dict) -> RetrievalConfig:
    """Dispersions are given in ps/nm."""
    d = dict(d)
    for k in ("retrieval_dispersion", "link_cd"):
        if k in d:
            d[k] = ch.DispersionOperator(float(d[k]))
    try:
        return RetrievalConfig(**d)
    except TypeError as e:
        raise harness.ConfigError(f"retrieval: {e}") from None


def frame_from_dict(d: dict, n_pol: int = 1):
    d = dict(d)
    seed = int(d.pop("seed", 0))
    c = Constellation.from_name(d.pop("modulation", "QPSK"))
    unknown = set(d) - _FRAME_KEYS
    if unknown:
        raise harness.ConfigError(f"frame: unknown key(s) {sorted(unknown)}")
    return build_frame(seed, FrameSpec(**d), c, n_pol=n_pol)


def cmd_simulate(args) -> int:
    s = harness.Scenario.load(args.config)
    out = Path(args.out or s.outputs.get("dir", "results"))
    trace = out / "traces" if (args.trace_convergence or s.outputs.get("trace_convergence")) else None
    if trace is not None:
        try:
            trace.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise harness.ReportError(str(e)) from e
    rows = harness.run_scenario(s, workers=args.workers, trace_dir=trace)
    csv_path, json_path = harness.emit_report(rows, out, s)
    for r in rows:
        flag = f"  [{r.error}]" if r.error else ""
        print(f"{r.scenario_id} seed={r.seed} {s.sweep_variable}={r.sweep_value} ber={r.ber:.3e} "
              f"a_err={r.mean_a_err_db:.1f} dB iters={r.iterations}{flag}")
    print(f"wrote {csv_path} and {json_path}")
    return EXIT_OK


def cmd_retrieve(args) -> int:
    cfg_doc = _read_json(args.config)
    try:
        a = io.load_intensity(args.a, args.meta)
        b = io.load_intensity(args.b, args.meta)
    except (OSError, ValueError) as e:
        print(f"error: cannot read intensity traces: {e}", file=sys.stderr)
        return EXIT_IO
    cfg = retrieval_config_from_dict(cfg_doc.get("retrieval", {}))
    pilots = frame_from_dict(cfg_doc["frame"]) if "frame" in cfg_doc else None
    rng = np.random.default_rng(int(cfg_doc.get("seed", 0)))
    est, rep = run_retrieval(a, b, cfg, pilots, rng=rng)
    out = Path(args.out)
    try:
        io.save_waveform(est, out)
        if args.trace_convergence:
            rep.write_csv(out.with_name(out.stem + "_trace.csv"))
    except OSError as e:
        raise harness.ReportError(str(e)) from e
    print(f"mean A_err {rep.mean_a_err_db:.2f} dB after {rep.iterations_used} iterations "
          f"({rep.escapes_done} escapes, converged={rep.converged})")
    return EXIT_OK


def cmd_estimate_channel(args) -> int:
    cfg_doc = _read_json(args.config)
    try:
        rx = io.load_waveform(args.rx, args.meta)
    except (OSError, ValueError) as e:
        print(f"error: cannot read waveform: {e}", file=sys.stderr)
        return EXIT_IO
    if rx.n_pol != 2:
        raise harness.ConfigError("estimate-channel needs a two-polarization waveform")
    if "frame" not in cfg_doc:
        raise harness.ConfigError("config needs a 'frame' section describing the training symbols")
    frame = frame_from_dict(cfg_doc["frame"], n_pol=2)
    link = ch.DispersionOperator(float(cfg_doc.get("link_dispersion", 0.0)))
    est = polrx.estimate_h(rx, frame, link, n_taps=int(cfg_doc.get("n_taps", 64)), gauge=True)
    try:
        est.save(args.out)
        polrx.write_channel_report(est, Path(args.out).with_suffix(".csv"))
    except OSError as e:
        raise harness.ReportError(str(e)) from e
    print(f"PDL {est.pdl_db:.3f} dB, delay {est.delay} symbols")
    return EXIT_OK


def cmd_theory(args) -> int:
    c = Constellation.from_name(args.modulation)
    osnr = np.arange(args.osnr_min, args.osnr_max + args.step / 2, args.step)
    ber = theory_ber(osnr, c, args.baud, args.n_pol)
    lines = ["osnr_db,ber"] + [f"{o!r},{b!r}" for o, b in zip(osnr.tolist(), np.atleast_1d(ber).tolist())]
    text = "\n".join(lines) + "\n"
    if args.out:
        try:
            Path(args.out).write_text(text)
        except OSError as e:
            raise harness.ReportError(str(e)) from e
    else:
        sys.stdout.write(text)
    req = required_osnr(args.target_ber, c, args.baud, args.n_pol)
    print(f"required OSNR for BER {args.target_ber:g}: {req:.2f} dB", file=sys.stderr)
    return EXIT_OK


def cmd_report(args) -> int:
    rows = harness.load_rows(args.input)
    if not rows:
        raise harness.ConfigError(f"{args.input} holds no rows")
    summary = harness.summarize(rows)
    text = "sweep_value,n_seeds,n_failed,mean_ber,mean_a_err_db\n" + "".join(
        f"{s['sweep_value']},{s['n_seeds']},{s['n_failed']},{s['mean_ber']!r},{s['mean_a_err_db']!r}\n"
        for s in summary)
    if args.out:
        try:
            Path(args.out).write_text(text)
        except OSError as e:
            raise harness.ReportError(str(e)) from e
    sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="prism", description="Intensity-only coherent receiver simulator")
    sub = p.add_subparsers(dest="verb", required=True)

    s = sub.add_parser("simulate", help="run an end-to-end scenario")
    s.add_argument("--config", required=True)
    s.add_argument("--out")
    s.add_argument("--workers", type=int)
    s.add_argument("--trace-convergence", action="store_true", help="write per-iteration A_err CSVs")
    s.set_defaults(func=cmd_simulate)

    r = sub.add_parser("retrieve", help="run phase retrieval on stored intensity traces")
    r.add_argument("--a", required=True)
    r.add_argument("--b", required=True)
    r.add_argument("--meta")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--trace-convergence", action="store_true")
    r.set_defaults(func=cmd_retrieve)

    e = sub.add_parser("estimate-channel", help="least-squares 2x2 channel estimate from a training capture")
    e.add_argument("--rx", required=True)
    e.add_argument("--meta")
    e.add_argument("--config", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_estimate_channel)

    t = sub.add_parser("theory", help="emit the AWGN theory BER curve")
    t.add_argument("--modulation", default="QPSK")
    t.add_argument("--baud", type=float, default=30e9)
    t.add_argument("--n-pol", type=int, default=1)
    t.add_argument("--osnr-min", type=float, default=0.0)
    t.add_argument("--osnr-max", type=float, default=30.0)
    t.add_argument("--step", type=float, default=0.5)
    t.add_argument("--target-ber", type=float, default=2e-2)
    t.add_argument("--out")
    t.set_defaults(func=cmd_theory)

    rp = sub.add_parser("report", help="summarize a result table per sweep value")
    rp.add_argument("--in", dest="input", required=True)
    rp.add_argument("--out")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except harness.ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (harness.ReportError, OSError) as e:
        print(f"I/O error: {e}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
