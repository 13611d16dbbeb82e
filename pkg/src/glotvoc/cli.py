"""Command-line surface: table building, synthesis, fitting, benchmarking.

Subcommands exit nonzero with a one-line diagnostic on stderr; output
files created by a failing invocation are removed. Delimited outputs
(loss CSVs, bench JSON, table CSV) get a rendered figure next to them
unless --no-figures is given.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import report
from .bench import run_benchmark
from .glottal import (
    DEFAULT_ROW_COUNT,
    DEFAULT_ROW_LENGTH,
    RD_MAX,
    RD_MIN,
    build_wavetables,
    export_wavetables_csv,
    load_wavetables,
    save_wavetables,
)
from .opt import (
    AdamConfig,
    FitDivergedError,
    LossWeights,
    fit_params,
    fit_phase_offset,
)
from .synth import (
    SynthParams,
    load_offsets,
    load_params,
    offset_hop,
    read_wav,
    render,
    render_with_offset,
    save_offsets,
    save_params,
    write_wav,
)

__all__ = ["main"]


class CliError(RuntimeError):
    def __init__(self, message: str, code: int = 1):
        super().__init__(message)
        self.code = code


class _Outputs:
    """Tracks files a command creates so failures can clean them up."""

    def __init__(self) -> None:
        self.paths: list[Path] = []

    def claim(self, path) -> Path:
        p = Path(path)
        self.paths.append(p)
        return p

    def discard_all(self) -> None:
        for p in self.paths:
            try:
                p.unlink(missing_ok=True)
            except OSError:
                pass


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="glotvoc",
        description="Glottal-flow wavetable vocoder: build tables, synthesize, "
        "fit parameters to audio, and benchmark.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("tables", help="build and store a glottal pulse table")
    p.add_argument("--k", type=int, default=DEFAULT_ROW_COUNT, help="row count")
    p.add_argument("--l", type=int, default=DEFAULT_ROW_LENGTH, help="samples per row")
    p.add_argument("--rd-min", type=float, default=RD_MIN)
    p.add_argument("--rd-max", type=float, default=RD_MAX)
    p.add_argument("--out", required=True, help="output table file")
    p.add_argument("--csv", help="also dump the rows as CSV")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("synth", help="render audio from a parameter file")
    p.add_argument("--params", required=True)
    p.add_argument("--tables", required=True)
    p.add_argument("--out", required=True, help="output WAV")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--offsets", help="phase-offset track file")
    p.add_argument("--stems", action="store_true", help="also write the two stems")
    p.add_argument("--threads", type=int, default=1)

    p = sub.add_parser("fit", help="fit parameters or phase offsets to a target")
    p.add_argument("--target", required=True, help="target WAV")
    p.add_argument("--tables", required=True)
    p.add_argument("--mode", choices=("params", "phase"), default="params")
    p.add_argument("--init", help="initial parameter file")
    p.add_argument("--init-random", action="store_true")
    p.add_argument("--init-offsets", choices=("random", "zero"), default="random")
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--restarts", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--w-msstft", type=float, default=1.0)
    p.add_argument("--w-l2", type=float, default=0.0)
    p.add_argument("--out", required=True, help="fitted parameters / offsets file")
    p.add_argument("--trace", help="loss trace CSV (default: <out>_trace.csv)")
    p.add_argument("--no-figures", action="store_true")

    p = sub.add_parser("bench", help="measure the synthesis real-time factor")
    p.add_argument("--tables", required=True)
    p.add_argument("--duration", type=float, default=10.0, help="seconds")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--json", help="write the report as JSON")
    p.add_argument("--no-figures", action="store_true")
    return parser


def _cmd_tables(args, outputs: _Outputs) -> int:
    if args.rd_min >= args.rd_max:
        raise CliError("--rd-min must be smaller than --rd-max", code=2)
    tables = build_wavetables(args.k, args.l, args.rd_min, args.rd_max)
    save_wavetables(tables, outputs.claim(args.out))
    energies = np.sum(tables.data**2, axis=1)
    print(f"wrote {tables.row_count}x{tables.row_length} table to {args.out}")
    print(
        f"rd range [{tables.rd_values[0]:.4g}, {tables.rd_values[-1]:.4g}], "
        f"negative peaks aligned at column {tables.align_index}"
    )
    print(
        f"row energy min/max: {energies.min():.12f}/{energies.max():.12f}, "
        f"max |row sum|/peak: "
        f"{np.max(np.abs(tables.data.sum(axis=1)) / np.abs(tables.data).max(axis=1)):.3g}"
    )
    if args.csv:
        export_wavetables_csv(tables, outputs.claim(args.csv))
        print(f"wrote CSV dump to {args.csv}")
        if not args.no_figures:
            fig = report.figure_path(args.csv)
            report.save_wavetable_figure(tables, outputs.claim(fig))
            print(f"wrote figure to {fig}")
    elif not args.no_figures:
        fig = report.figure_path(args.out)
        report.save_wavetable_figure(tables, outputs.claim(fig))
        print(f"wrote figure to {fig}")
    return 0


def _cmd_synth(args, outputs: _Outputs) -> int:
    params, _ = load_params(args.params)
    tables = load_wavetables(args.tables)
    if args.offsets:
        offsets, off_sr = load_offsets(args.offsets)
        if off_sr != params.sample_rate:
            raise CliError(
                f"sample-rate mismatch: offsets at {off_sr} Hz, "
                f"parameters at {params.sample_rate} Hz"
            )
        out = render_with_offset(
            params, tables, offsets, noise_seed=args.seed, workers=args.threads
        )
    else:
        out = render(params, tables, noise_seed=args.seed, workers=args.threads)
    write_wav(outputs.claim(args.out), out.audio, params.sample_rate)
    print(
        f"wrote {out.audio.shape[0]} samples "
        f"({out.audio.shape[0] / params.sample_rate:.3f} s) to {args.out}"
    )
    if args.stems:
        base = Path(args.out)
        harm_path = base.with_suffix(".harmonic.wav")
        noise_path = base.with_suffix(".noise.wav")
        write_wav(outputs.claim(harm_path), out.harmonic, params.sample_rate)
        write_wav(outputs.claim(noise_path), out.noise, params.sample_rate)
        print(f"wrote stems to {harm_path} and {noise_path}")
    return 0


def _random_init(n_samples: int, sample_rate: int, seed: int) -> SynthParams:
    # mid-range starting point: 150 Hz voiced, gentle gains, near-flat filters
    hop = 120
    n_frames = max(1, n_samples // hop)
    rng = np.random.Generator(np.random.Philox(key=[seed, 0x1417]))
    sections = 11
    return SynthParams(
        freq=np.full(n_frames, 150.0 / sample_rate),
        voicing=np.ones(n_frames),
        harm_gain=np.full(n_frames, 0.1),
        noise_gain=np.full(n_frames, 0.01),
        rd_index=np.full(-(-n_frames // 10), 0.5),
        harm_biquads=rng.normal(0.0, 0.1, (n_frames, sections, 2)),
        noise_biquads=rng.normal(0.0, 0.1, (n_frames, sections, 2)),
        hop=hop,
        sample_rate=sample_rate,
    )


def _cmd_fit(args, outputs: _Outputs) -> int:
    target, target_sr = read_wav(args.target)
    tables = load_wavetables(args.tables)
    if args.mode == "phase" and not args.init:
        raise CliError("--mode phase needs --init (the parameters to align)", code=2)
    if not args.init and not args.init_random:
        raise CliError("provide --init FILE or --init-random", code=2)

    if args.init:
        init, _ = load_params(args.init)
    else:
        init = _random_init(target.shape[0], target_sr, args.seed)
    if init.sample_rate != target_sr:
        raise CliError(
            f"sample-rate mismatch: target at {target_sr} Hz, "
            f"parameters at {init.sample_rate} Hz"
        )
    if init.n_samples != target.shape[0]:
        raise CliError(
            f"target length {target.shape[0]} does not match the parameter "
            f"render length {init.n_samples}"
        )

    cfg = AdamConfig(learning_rate=args.lr, steps=args.steps)
    trace_path = Path(args.trace) if args.trace else Path(args.out).with_name(
        Path(args.out).stem + "_trace.csv"
    )

    if args.mode == "phase":
        zero_init = None
        if args.init_offsets == "zero":
            n_points = -(-init.n_samples // offset_hop(init.sample_rate))
            zero_init = np.zeros(n_points)
        fit = fit_phase_offset(
            init,
            tables,
            target,
            cfg,
            seed=args.seed,
            restarts=args.restarts,
            init=zero_init,
        )
        save_offsets(fit.offsets, outputs.claim(args.out), init.sample_rate)
        report.write_loss_csv(outputs.claim(trace_path), fit.traces[int(np.argmin(fit.final_losses))])
        restarts_path = trace_path.with_name(trace_path.stem + "_restarts.csv")
        report.write_restart_csv(outputs.claim(restarts_path), fit.final_losses)
        print(
            f"final L2 over {args.restarts} restart(s): "
            f"min {fit.min_loss:.6g}, max {fit.max_loss:.6g}"
        )
        print(f"wrote offsets to {args.out}, traces to {trace_path}")
        if not args.no_figures:
            fig = report.figure_path(trace_path)
            report.save_loss_figure(fit.traces, outputs.claim(fig))
            print(f"wrote figure to {fig}")
        return 0

    weights = LossWeights(msstft=args.w_msstft, l2=args.w_l2)
    try:
        result = fit_params(target, init, tables, weights, cfg, seed=args.seed)
    except FitDivergedError as exc:
        # deliberately not claimed: the partial trace must survive the failure
        report.write_loss_csv(trace_path, exc.trace)
        raise CliError(f"{exc} (partial trace saved to {trace_path})") from exc
    save_params(result.params, outputs.claim(args.out), table_ref=str(args.tables))
    report.write_loss_csv(outputs.claim(trace_path), result.trace)
    print(f"final loss {result.trace[-1]:.6g} after {args.steps} steps")
    print(f"wrote fitted parameters to {args.out}, trace to {trace_path}")
    if not args.no_figures:
        fig = report.figure_path(trace_path)
        report.save_loss_figure([result.trace], outputs.claim(fig))
        print(f"wrote figure to {fig}")
    return 0


def _cmd_bench(args, outputs: _Outputs) -> int:
    if args.duration <= 0.0:
        raise CliError("--duration must be positive", code=2)
    tables = load_wavetables(args.tables)
    rep = run_benchmark(
        tables, args.duration, threads=args.threads, repeats=args.repeats
    )
    rtf = rep.rtf_values
    print(f"{'duration_s':<16}{rep.duration:.3f}")
    print(f"{'sample_rate':<16}{rep.sample_rate}")
    print(f"{'threads':<16}{rep.threads}")
    print(f"{'repeats':<16}{rep.repeats}")
    print(f"{'stage':<16}{'median_s':>10}{'share':>9}")
    total_med = float(np.median(rep.totals))
    for name, value in rep.stage_medians.items():
        print(f"{name:<16}{value:>10.4f}{value / total_med:>8.1%}")
    print(f"{'total':<16}{total_med:>10.4f}")
    print(
        f"{'rtf':<16}min {rtf.min():.4f}  median {np.median(rtf):.4f}  "
        f"max {rtf.max():.4f}"
    )
    if args.json:
        with open(outputs.claim(args.json), "w", encoding="utf-8") as fh:
            json.dump(rep.as_dict(), fh, indent=2)
        print(f"wrote JSON report to {args.json}")
        if not args.no_figures:
            fig = report.figure_path(args.json)
            report.save_bench_figure(rep, outputs.claim(fig))
            print(f"wrote figure to {fig}")
    return 0


_HANDLERS = {
    "tables": _cmd_tables,
    "synth": _cmd_synth,
    "fit": _cmd_fit,
    "bench": _cmd_bench,
}


def main(argv=None) -> int:
    try:
        args = _build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    outputs = _Outputs()
    try:
        return _HANDLERS[args.command](args, outputs)
    except CliError as exc:
        outputs.discard_all()
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except Exception as exc:  # noqa: BLE001  one-line diagnostic, no traceback
        outputs.discard_all()
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
