"""Command-line front end.

Commands: generate (synthetic model + calibration batches), quantize (one
method, writes an artifact), compare (both methods, overhead deltas), and
convergence-report (per-sweep loss traces). Every run echoes its parsed
configuration so it can be reproduced exactly. Reports go to stdout as
key=value lines; --csv adds delimited output, and the report commands render
a matplotlib figure next to the CSV unless told not to.

Exit codes: 0 success, 2 usage, 3 file I/O or container format, 4 numeric or
calibration failure. Failures print a single machine-parseable line of the
form "error[category]: message" to stderr.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import dataclass
from pathlib import Path

from .container import (
    KIND_CALIBRATION,
    KIND_MODEL,
    load_checkpoint,
    save_quantized,
)
from .errors import (
    ArgumentError,
    CalibrationError,
    CorruptFileError,
    FactorizationError,
    FormatVersionError,
    ModelSpecError,
    NumericError,
    ShapeError,
)
from .harness import (
    QuantizeConfig,
    SyntheticModelSpec,
    compare_methods,
    quantize_model,
    render_comparison_report,
    render_pipeline_report,
    validate_config,
    write_generated,
    write_report_csv,
    write_trace_csv,
)
from .plots import save_comparison_plot, save_convergence_plot

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERIC = 4


@dataclass(frozen=True)
class RunConfig:
    """Parsed CLI flags for one invocation, in echo-ready form."""

    command: str
    options: tuple[tuple[str, object], ...]

    @classmethod
    def from_namespace(cls, args: argparse.Namespace) -> "RunConfig":
        skip = {"command", "func"}
        options = tuple(sorted((k, v) for k, v in vars(args).items() if k not in skip))
        return cls(command=args.command, options=options)

    def echo_lines(self) -> list[str]:
        lines = [f"cli.command={self.command}"]
        lines.extend(f"cli.{key}={value}" for key, value in self.options)
        return lines


def parse_layers(text: str) -> tuple[tuple[int, int], ...]:
    """Parse "64x64,32x64" into ((64, 64), (32, 64)) as (c_out, c_in) pairs."""
    shapes = []
    for part in text.split(","):
        part = part.strip()
        pieces = part.lower().split("x")
        if len(pieces) != 2:
            raise ArgumentError(f"bad layer shape {part!r}, expected COUTxCIN")
        try:
            c_out, c_in = int(pieces[0]), int(pieces[1])
        except ValueError:
            raise ArgumentError(f"bad layer shape {part!r}, expected integers") from None
        if c_out < 1 or c_in < 1:
            raise ArgumentError(f"layer shape {part!r} must be positive")
        shapes.append((c_out, c_in))
    return tuple(shapes)


def parse_dist(text: str) -> tuple:
    """Parse "gaussian:1.0" or "uniform:-1:1" into a distribution tuple."""
    pieces = text.split(":")
    kind = pieces[0].strip().lower()
    try:
        params = [float(p) for p in pieces[1:]]
    except ValueError:
        raise ArgumentError(f"bad distribution parameters in {text!r}") from None
    if kind == "gaussian" and len(params) == 1:
        return ("gaussian", params[0])
    if kind == "uniform" and len(params) == 2:
        return ("uniform", params[0], params[1])
    raise ArgumentError(
        f"bad distribution {text!r}, expected gaussian:SIGMA or uniform:LOW:HIGH"
    )


def _engine_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--model", required=True, help="model checkpoint path")
    parser.add_argument("--calib", required=True, help="calibration batches path")
    parser.add_argument("--bits", type=int, default=4, help="code width in bits")
    parser.add_argument("--group-size", type=int, default=128,
                        help="columns per quantization group")
    parser.add_argument("--block-size", type=int, default=128,
                        help="columns per refinement block")
    parser.add_argument("--percdamp", type=float, default=0.01,
                        help="Hessian damping as a fraction of mean(diag)")
    parser.add_argument("--iters", type=int, default=5, help="refinement sweep budget")
    parser.add_argument("--alpha", type=float, default=0.01,
                        help="interpolation step toward each block's projected solution")
    parser.add_argument("--early-stop-tol", type=float, default=1e-6,
                        help="relative loss-decrease threshold; negative disables")
    parser.add_argument("--curvature", choices=("global", "instance"), default="global",
                        help="normal-equations matrix for block solves")
    parser.add_argument("--sequential-prop", choices=("on", "off"), default="on",
                        help="calibrate each layer on the previous layer's quantized outputs")
    parser.add_argument("--refit-grids", action="store_true",
                        help="refit grids from each block's proposed solution")
    parser.add_argument("--csv", default=None, help="write per-layer CSV here")
    parser.add_argument("--plot", default=None, help="figure output path")
    parser.add_argument("--no-plot", action="store_true", help="skip figure rendering")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rpiq",
        description="Two-stage post-training weight quantization with "
                    "residual-projected block refinement.",
    )
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    fmt = argparse.ArgumentDefaultsHelpFormatter

    gen = sub.add_parser("generate", formatter_class=fmt,
                         help="draw a synthetic model and calibration batches")
    gen.add_argument("--out", default=".", help="output directory")
    gen.add_argument("--seed", type=int, default=0, help="generator seed")
    gen.add_argument("--layers", default="64x64,64x64",
                     help="comma-separated COUTxCIN layer shapes")
    gen.add_argument("--k", type=int, default=8, help="number of calibration batches")
    gen.add_argument("--rows", type=int, default=128, help="rows per calibration batch")
    gen.add_argument("--weight-dist", default="gaussian:1.0",
                     help="weight distribution (gaussian:SIGMA or uniform:LOW:HIGH)")
    gen.add_argument("--act-dist", default="gaussian:1.0",
                     help="activation distribution (gaussian:SIGMA or uniform:LOW:HIGH)")
    gen.set_defaults(func=cmd_generate)

    quant = sub.add_parser("quantize", formatter_class=fmt,
                           help="quantize a checkpoint and write the artifact")
    _engine_flags(quant)
    quant.add_argument("--method", choices=("gptq", "rpiq"), default="rpiq",
                       help="stage-1 only (gptq) or stage 1 + refinement (rpiq)")
    quant.add_argument("--out", required=True, help="artifact output path")
    quant.add_argument("--store-snapshot", action="store_true",
                       help="embed the calibration instance in the artifact")
    quant.add_argument("--trace-csv", default=None, help="write convergence traces here")
    quant.set_defaults(func=cmd_quantize)

    comp = sub.add_parser("compare", formatter_class=fmt,
                          help="run both methods and report overhead deltas")
    _engine_flags(comp)
    comp.add_argument("--out-gptq", default=None, help="optional stage-1 artifact path")
    comp.add_argument("--out-rpiq", default=None, help="optional refined artifact path")
    comp.add_argument("--store-snapshot", action="store_true",
                      help="embed the calibration instance in the artifacts")
    comp.add_argument("--trace-csv", default=None, help="write convergence traces here")
    comp.set_defaults(func=cmd_compare)

    conv = sub.add_parser("convergence-report", formatter_class=fmt,
                          help="refine and export per-sweep loss traces")
    _engine_flags(conv)
    conv.add_argument("--store-snapshot", action="store_true",
                      help=argparse.SUPPRESS)
    conv.set_defaults(func=cmd_convergence)
    return parser


def _engine_config(args: argparse.Namespace, method: str) -> QuantizeConfig:
    tol = args.early_stop_tol
    cfg = QuantizeConfig(
        method=method,
        bits=args.bits,
        group_size=args.group_size,
        block_size=args.block_size,
        percdamp=args.percdamp,
        iters=args.iters,
        alpha=args.alpha,
        early_stop_tol=None if tol is not None and tol < 0 else tol,
        curvature=args.curvature,
        sequential_prop=args.sequential_prop == "on",
        refit_grids=args.refit_grids,
        store_snapshot=getattr(args, "store_snapshot", False),
    )
    validate_config(cfg)
    return cfg


def _load_inputs(args: argparse.Namespace):
    manifest, matrices = load_checkpoint(args.model)
    if manifest.kind != KIND_MODEL:
        raise CorruptFileError(f"{args.model}: expected kind=model, found {manifest.kind!r}")
    cal_manifest, cal_matrices = load_checkpoint(args.calib)
    if cal_manifest.kind != KIND_CALIBRATION:
        raise CorruptFileError(
            f"{args.calib}: expected kind=calibration, found {cal_manifest.kind!r}"
        )
    return list(matrices.items()), list(cal_matrices.values())


def _figure_path(args: argparse.Namespace) -> str | None:
    if args.no_plot:
        return None
    if args.plot:
        return args.plot
    if args.csv:
        return str(Path(args.csv).with_suffix(".png"))
    return None


def cmd_generate(args: argparse.Namespace) -> int:
    spec = SyntheticModelSpec(
        shapes=parse_layers(args.layers),
        weight_dist=parse_dist(args.weight_dist),
        act_dist=parse_dist(args.act_dist),
        seed=args.seed,
        batches=args.k,
        rows=args.rows,
    )
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    model_path = out / "model.rpiq"
    calib_path = out / "calib.rpiq"
    write_generated(spec, model_path, calib_path)
    for line in RunConfig.from_namespace(args).echo_lines():
        print(line)
    print(f"generate.model={model_path}")
    print(f"generate.calib={calib_path}")
    return EXIT_OK


def cmd_quantize(args: argparse.Namespace) -> int:
    cfg = _engine_config(args, args.method)
    model, batches = _load_inputs(args)
    result = quantize_model(model, batches, cfg)
    save_quantized(result.artifact, args.out)
    for line in RunConfig.from_namespace(args).echo_lines():
        print(line)
    print(render_pipeline_report(result))
    print(f"artifact={args.out}")
    if args.csv:
        write_report_csv(result.layer_reports, args.csv)
        print(f"csv={args.csv}")
    if args.trace_csv:
        write_trace_csv(result.traces, args.trace_csv)
        print(f"trace_csv={args.trace_csv}")
    figure = _figure_path(args)
    if figure:
        save_convergence_plot({n: t.gamma for n, t in result.traces.items()}, figure)
        print(f"figure={figure}")
    return EXIT_OK


def cmd_compare(args: argparse.Namespace) -> int:
    cfg = _engine_config(args, "rpiq")
    model, batches = _load_inputs(args)
    report = compare_methods(model, batches, cfg)
    if args.out_gptq:
        save_quantized(report.run_gptq.artifact, args.out_gptq)
    if args.out_rpiq:
        save_quantized(report.run_rpiq.artifact, args.out_rpiq)
    for line in RunConfig.from_namespace(args).echo_lines():
        print(line)
    print(render_comparison_report(report))
    if args.csv:
        write_report_csv(report.rows, args.csv)
        print(f"csv={args.csv}")
    if args.trace_csv:
        write_trace_csv(report.run_rpiq.traces, args.trace_csv)
        print(f"trace_csv={args.trace_csv}")
    figure = _figure_path(args)
    if figure:
        save_comparison_plot(report.rows, figure)
        print(f"figure={figure}")
    return EXIT_OK


def cmd_convergence(args: argparse.Namespace) -> int:
    if not args.csv:
        raise ArgumentError("convergence-report requires --csv")
    cfg = _engine_config(args, "rpiq")
    model, batches = _load_inputs(args)
    result = quantize_model(model, batches, cfg)
    for line in RunConfig.from_namespace(args).echo_lines():
        print(line)
    print(render_pipeline_report(result))
    write_trace_csv(result.traces, args.csv)
    print(f"trace_csv={args.csv}")
    figure = _figure_path(args)
    if figure:
        save_convergence_plot({n: t.gamma for n, t in result.traces.items()}, figure)
        print(f"figure={figure}")
    return EXIT_OK


def _fail(category: str, exc: BaseException, code: int) -> int:
    message = str(exc).replace("\n", " ")
    print(f"error[{category}]: {message}", file=sys.stderr)
    return code


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        code = exc.code if isinstance(exc.code, int) else EXIT_USAGE
        return EXIT_OK if code == 0 else EXIT_USAGE
    try:
        return args.func(args)
    except (ArgumentError, ModelSpecError) as exc:
        return _fail("usage", exc, EXIT_USAGE)
    except (CorruptFileError, FormatVersionError, OSError) as exc:
        return _fail("io", exc, EXIT_IO)
    except (CalibrationError, FactorizationError, NumericError, ShapeError) as exc:
        return _fail("numeric", exc, EXIT_NUMERIC)


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
