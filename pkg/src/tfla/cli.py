"""Command-line entry point.

Exit codes: 0 pass, 1 check failure, 2 usage or configuration error.
CSV floats are written with 17 significant digits.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import statistics
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .chunkwise import chunkwise_backward, chunkwise_forward
from .core import Dims, GeometryError, NumericError, ParameterError, Rng, exponent_monitor, make_inputs, max_abs_diff
from .gradcheck import check_gradcheck_dims, compare, fd_gradients
from .parallel import check_normalizer, parallel_forward
from .perfmodel import (
    Bound,
    Formulation,
    Mode,
    PerfParams,
    RegistryError,
    Shape,
    accelerator_registry,
    arithmetic_intensity,
    brute_force_flop_optimal,
    brute_force_runtime_optimal,
    flop_optimal_chunk_size,
    flops_chunkwise,
    flops_parallel,
    flops_recurrent,
    is_extension,
    lookup_accelerator,
    memops,
    roofline,
    runtime_optimal_chunk_size,
    state_bytes,
    theoretical_runtime,
)
from .recurrent import run_recurrent
from .tiled import BlockConfig, tfla_backward, tfla_forward
from .transfer import transfer_scan

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2


class ConfigError(Exception):
    pass


@dataclass
class RunReport:
    command: str
    config: dict
    metrics: dict
    tolerance: float
    passed: bool = field(default=False)

    @classmethod
    def judge(cls, command: str, config: dict, metrics: dict, tolerance: float) -> "RunReport":
        return cls(command, config, metrics, tolerance, all(v < tolerance for v in metrics.values()))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["pass"] = d.pop("passed")
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        d = json.loads(text)
        return cls(d["command"], d["config"], d["metrics"], d["tolerance"], d["pass"])


def fmt(x) -> str:
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    if isinstance(x, (float, np.floating)):
        return format(float(x), ".17g")
    return str(x)


def write_csv(rows, header, out: str | None, comments=()) -> None:
    buf = io.StringIO()
    for c in comments:
        buf.write(f"# {c}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([fmt(x) for x in row])
    emit(buf.getvalue(), out)


def emit(text: str, out: str | None) -> None:
    if out is None or out == "-":
        sys.stdout.write(text)
        return
    try:
        Path(out).write_text(text, encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"cannot write {out}: {err}") from err


def _dims(args) -> Dims:
    return Dims(T=args.T, L=args.L, d_qk=args.dqk, d_hv=args.dhv, n_head=args.heads, n_batch=args.batch)


def _blocks(args, dims: Dims) -> BlockConfig:
    blocks = BlockConfig(*args.blocks) if args.blocks else BlockConfig.default(dims)
    blocks.check(dims)
    return blocks


# --- verify / gradcheck ------------------------------------------------------


def cmd_verify(args) -> int:
    dims = _dims(args)
    dims.check_chunked()
    blocks = _blocks(args, dims)
    x = make_inputs(dims, Rng(args.seed))
    with exponent_monitor() as stats:
        outs = {
            "recurrent": run_recurrent(x, dims, args.variant).h_tilde,
            "parallel": parallel_forward(x, dims, args.variant),
            "chunkwise": chunkwise_forward(x, dims, args.variant)[0],
            "tiled": tfla_forward(x, dims, blocks, args.variant)[0],
        }
    names = list(outs)
    metrics = {f"{a}-{b}": max_abs_diff(outs[a], outs[b]) for i, a in enumerate(names) for b in names[i + 1 :]}
    metrics["exp_arg_violations"] = float(stats.violations)
    config = {**dataclasses.asdict(dims), "variant": args.variant, "seed": args.seed, "blocks": list(blocks.as_tuple())}
    report = RunReport.judge("verify", config, metrics, args.tol)
    emit(report.to_json() + "\n", args.out)
    return EXIT_OK if report.passed else EXIT_FAIL


def cmd_gradcheck(args) -> int:
    dims = _dims(args)
    check_gradcheck_dims(dims)
    blocks = _blocks(args, dims)
    x = make_inputs(dims, Rng(args.seed), gate_scale=1.0)
    rng = Rng(args.seed + 1).generator()
    dH = np.zeros(x.v.shape) if args.zero_dh else rng.standard_normal(x.v.shape)
    numeric = fd_gradients(x, args.variant, dH, step=args.fd_step)
    h, states, stats = chunkwise_forward(x, dims, args.variant)
    ref = chunkwise_backward(x, dims, args.variant, dH, (states, stats)).as_dict()
    _, t_states, t_stats = tfla_forward(x, dims, blocks, args.variant)
    tiled = tfla_backward(x, dims, blocks, args.variant, dH, (t_states, t_stats)).as_dict()
    metrics = {f"chunkwise.{k}": v for k, v in compare(ref, numeric).items()}
    metrics.update({f"tiled.{k}": v for k, v in compare(tiled, numeric).items()})
    config = {
        **dataclasses.asdict(dims),
        "variant": args.variant,
        "seed": args.seed,
        "fd_step": args.fd_step,
        "blocks": list(blocks.as_tuple()),
        "zero_dh": bool(args.zero_dh),
    }
    report = RunReport.judge("gradcheck", config, metrics, args.tol)
    emit(report.to_json() + "\n", args.out)
    return EXIT_OK if report.passed else EXIT_FAIL


# --- transfer ----------------------------------------------------------------


def cmd_transfer(args) -> int:
    normalizer = args.normalizer or ("default" if args.variant == "exp" else "ones")
    check_normalizer(args.variant, normalizer)
    dims = Dims(T=args.T, d_qk=args.dqk, d_hv=args.dhv)
    if args.out not in (None, "-"):
        # fail before the scan, not after it
        parent = Path(args.out).resolve().parent
        if not parent.is_dir():
            raise ConfigError(f"cannot write {args.out}: no such directory")
    grid = transfer_scan(
        args.variant,
        normalizer,
        args.eps,
        i_range=tuple(args.i_range),
        f_range=tuple(args.f_range),
        n_points=args.steps,
        dims=dims,
        rng=Rng(args.seed),
    )
    write_csv(grid.rows(), ["i_pre", "f_pre", "gain_before", "gain_after"], args.out)
    return EXIT_OK


# --- perf --------------------------------------------------------------------


def _perf_inputs(args):
    shape = Shape.from_pqk(args.dhv, args.pqk, T=args.T, n_head=args.heads, n_batch=args.batch)
    params = PerfParams(F_causal=args.fcausal, bytes_Cmn=args.bytes_cmn)
    return shape, params


def _accel(args):
    return lookup_accelerator(args.accel, accelerator_registry(args.accel_file))


def _L_values(args) -> list[int]:
    if args.L:
        values = args.L
    else:
        values = []
        L = 1
        while L <= args.T:
            values.append(L)
            L *= 2
    for L in values:
        if L < 1:
            raise ParameterError(f"chunk size must be >= 1, got {L}")
    return values


def cmd_perf(args) -> int:
    shape, params = _perf_inputs(args)
    sub = args.perf_command
    if sub == "flops":
        f = Formulation(args.formulation)
        if f is Formulation.CHUNKWISE:
            rows = [flops_chunkwise(shape, params, args.variant, args.mode, L) for L in _L_values(args)]
            Ls = _L_values(args)
        else:
            fn = flops_parallel if f is Formulation.PARALLEL else flops_recurrent
            rows, Ls = [fn(shape, params, args.variant, args.mode)], [""]
        items = list(rows[0].items)
        write_csv(([L, r.flops, *r.items.values()] for L, r in zip(Ls, rows)), ["L", "flops", *items], args.out)
    elif sub == "memops":
        f = Formulation(args.formulation)
        Ls = _L_values(args) if f is Formulation.CHUNKWISE else [""]
        rows = ([L, *memops(shape, params, args.variant, f, L or 1)] for L in Ls)
        write_csv(rows, ["L", "bytes_loaded", "bytes_stored", "bytes_total"], args.out)
    elif sub == "runtime":
        accel = _accel(args)
        comments = [f"accelerator={accel.name}", f"bound={args.bound}"]
        if is_extension(args.variant):
            comments.append("extension=exp variant substituted into the sig runtime template")
        rows = ([L, theoretical_runtime(shape, params, accel, L, args.variant, args.bound)] for L in _L_values(args))
        write_csv(rows, ["L", "runtime_seconds"], args.out, comments)
    elif sub == "intensity":
        accel = _accel(args)
        rows = ([L, arithmetic_intensity(shape, params, L, args.variant)] for L in _L_values(args))
        comments = [f"accelerator={accel.name}", f"accelerator_intensity={fmt(accel.intensity)}"]
        write_csv(rows, ["L", "algorithm_intensity"], args.out, comments)
    elif sub == "roofline":
        accel = _accel(args)
        rows = []
        for L in _L_values(args):
            intensity = arithmetic_intensity(shape, params, L, args.variant)
            rows.append([L, intensity, roofline(accel, intensity)])
        write_csv(rows, ["L", "algorithm_intensity", "attainable_flops_per_s"], args.out, [f"accelerator={accel.name}"])
    elif sub == "optimal-chunk":
        result = {"d_hv": args.dhv, "p_qk": args.pqk, "F_causal": args.fcausal}
        if args.mode in ("flop", "both"):
            result["flop_closed_form"] = flop_optimal_chunk_size(args.dhv, args.pqk, args.fcausal)
            result["flop_brute_force"] = brute_force_flop_optimal(args.dhv, args.pqk, args.fcausal)
        if args.mode in ("runtime", "both"):
            accel = _accel(args)
            result["accelerator"] = accel.name
            result["accelerator_intensity"] = accel.intensity
            result["bytes_Cmn"] = args.bytes_cmn
            result["runtime_closed_form"] = runtime_optimal_chunk_size(args.dhv, args.pqk, args.fcausal, args.bytes_cmn, accel.intensity)
            result["runtime_brute_force"] = brute_force_runtime_optimal(args.dhv, args.pqk, args.fcausal, args.bytes_cmn, accel)
        emit(json.dumps(result, indent=2, sort_keys=True) + "\n", args.out)
    return EXIT_OK


# --- bench -------------------------------------------------------------------


def cmd_bench(args) -> int:
    if args.repeats < 3:
        raise ParameterError(f"--repeats must be >= 3, got {args.repeats}")
    rows = []
    for impl in args.impl:
        for L in args.L:
            dims = Dims(T=args.T, L=L, d_qk=args.dqk, d_hv=args.dhv, n_head=args.heads)
            dims.check_chunked()
            x = make_inputs(dims, Rng(args.seed))
            if impl == "chunkwise":
                run = lambda: chunkwise_forward(x, dims, args.variant)  # noqa: E731
            else:
                blocks = BlockConfig.default(dims)
                run = lambda: tfla_forward(x, dims, blocks, args.variant)  # noqa: E731
            for _ in range(args.warmup):
                run()
            times = []
            for _ in range(args.repeats):
                t0 = time.perf_counter()
                run()
                times.append(time.perf_counter() - t0)
            shape = Shape(d_hv=args.dhv, d_qk=args.dqk, T=args.T, n_head=args.heads)
            rows.append([impl, L, statistics.median(times), state_bytes(shape, PerfParams(), args.variant, L)])
    write_csv(rows, ["impl", "L", "median_seconds", "peak_bytes_estimate"], args.out)
    return EXIT_OK


# --- parser ------------------------------------------------------------------


def _add_dims(p, T, L, dqk, dhv, heads=1):
    p.add_argument("--T", type=int, default=T)
    p.add_argument("--L", type=int, default=L)
    p.add_argument("--dqk", type=int, default=dqk)
    p.add_argument("--dhv", type=int, default=dhv)
    p.add_argument("--heads", type=int, default=heads)
    p.add_argument("--batch", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--blocks", type=int, nargs=4, metavar=("B_LHQ", "B_LKV", "B_DQK", "B_DHV"))
    p.add_argument("--out")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="tfla", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify", help="compare all four forward formulations")
    p.add_argument("--variant", choices=["exp", "sig"], default="exp")
    _add_dims(p, T=128, L=16, dqk=32, dhv=64, heads=2)
    p.add_argument("--tol", type=float, default=1e-8)
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("gradcheck", help="backward passes against central differences")
    p.add_argument("--variant", choices=["exp", "sig"], default="sig")
    _add_dims(p, T=16, L=4, dqk=4, dhv=4)
    p.add_argument("--fd-step", type=float, default=1e-6)
    p.add_argument("--tol", type=float, default=1e-5)
    p.add_argument("--zero-dh", action="store_true", help="use dH = 0")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("transfer", help="gain grid over constant gate pre-activations")
    p.add_argument("--variant", choices=["exp", "sig"], default="exp")
    p.add_argument("--normalizer", help="default: 'default' for exp, 'ones' for sig")
    p.add_argument("--eps", type=float, default=1e-6)
    p.add_argument("--i-range", type=float, nargs=2, default=[-12.0, 8.0])
    p.add_argument("--f-range", type=float, nargs=2, default=[-5.0, 12.0])
    p.add_argument("--steps", type=int, default=50)
    p.add_argument("--T", type=int, default=512)
    p.add_argument("--dqk", type=int, default=128)
    p.add_argument("--dhv", type=int, default=128)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_transfer)

    perf = sub.add_parser("perf", help="analytical cost model")
    perf_sub = perf.add_subparsers(dest="perf_command", required=True)
    for name in ("flops", "memops", "runtime", "intensity", "roofline", "optimal-chunk"):
        q = perf_sub.add_parser(name)
        q.add_argument("--variant", choices=["exp", "sig"], default="sig")
        q.add_argument("--dhv", type=float, default=512)
        q.add_argument("--pqk", type=float, default=0.5)
        q.add_argument("--fcausal", type=float, default=0.5)
        q.add_argument("--T", type=int, default=8192)
        q.add_argument("--heads", type=int, default=8)
        q.add_argument("--batch", type=int, default=8)
        q.add_argument("--bytes-cmn", type=int, default=4, choices=[2, 4])
        q.add_argument("--accel", default="H100 SXM")
        q.add_argument("--accel-file")
        q.add_argument("--L", type=int, nargs="+", help="chunk sizes (default: powers of two up to T)")
        q.add_argument("--out")
        if name in ("flops", "memops"):
            q.add_argument("--formulation", choices=[f.value for f in Formulation], default="chunkwise")
        if name == "flops":
            q.add_argument("--mode", choices=[m.value for m in Mode], default="simplified")
        if name == "runtime":
            q.add_argument("--bound", choices=[b.value for b in Bound], default="sum")
        if name == "optimal-chunk":
            q.add_argument("--mode", choices=["flop", "runtime", "both"], default="both")
        q.set_defaults(func=cmd_perf)

    p = sub.add_parser("bench", help="CPU wall-clock of the chunkwise and tiled forward passes")
    p.add_argument("--impl", nargs="+", choices=["chunkwise", "tiled"], default=["chunkwise", "tiled"])
    p.add_argument("--variant", choices=["exp", "sig"], default="sig")
    p.add_argument("--T", type=int, default=256)
    p.add_argument("--dqk", type=int, default=32)
    p.add_argument("--dhv", type=int, default=64)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--L", type=int, nargs="+", default=[16, 32, 64])
    p.add_argument("--repeats", type=int, default=30)
    p.add_argument("--warmup", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, GeometryError, ParameterError, RegistryError, NumericError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
