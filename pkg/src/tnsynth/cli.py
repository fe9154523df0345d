"""Command-line interface for tree tensor-network structure search.

Exit codes:
  0  success
  1  semantic failure (a split cannot execute, or verify exceeds eps)
  2  input error (malformed file, bad flag value, unknown index name)
  3  unsupported tensor order
  4  internal invariant violation
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path
from typing import Dict, List, Optional

from tnsynth.dsl import (
    ExecState,
    Program,
    exec_program,
    format_program,
    is_valid,
    parse_program,
    program_from_network,
    sketch,
)
from tnsynth.errors import (
    ExecutionFailure,
    InvalidArgument,
    InvalidState,
    ShapeMismatch,
    UnsupportedOrder,
)
from tnsynth.fileio import (
    FormatError,
    edge_list,
    load_network,
    node_sizes,
    read_tensor,
    save_network,
    write_tensor,
)
from tnsynth.network import relative_error, topology_text
from tnsynth.ranksearch import DEFAULT_BIN_FRACTION, complete_sketch
from tnsynth.search import (
    RANK_STRATEGIES,
    SearchConfig,
    SearchResult,
    decompose_with_topology,
    default_threads,
    generate_synthetic,
    ht_baseline,
    search_structure,
    tt_baseline,
)
from tnsynth.tensor import Tensor, canonical

logger = logging.getLogger("tnsynth")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_INPUT = 2
EXIT_UNSUPPORTED = 3
EXIT_INTERNAL = 4

# verify accepts a measured error up to eps plus this absolute slack
VERIFY_SLACK = 1e-9


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _free_names(t: Tensor) -> Dict[str, int]:
    return {ix.name: ix.id for ix in t.indices}


def _id_names(t: Tensor) -> Dict[int, str]:
    return {ix.id: ix.name for ix in t.indices}


def build_report(t: Tensor, res: SearchResult, config: Dict,
                 network_dir: Optional[str] = None) -> Dict:
    """JSON-compatible summary of a result (see README for the schema)."""
    g = res.network
    names = _id_names(t)
    report = {
        "method": res.method,
        "input_shape": list(t.shape),
        "index_names": [ix.name for ix in t.indices],
        "eps": res.eps,
        "config": config,
        "achieved_rel_error": res.achieved_rel_error,
        "compression_ratio": res.compression_ratio,
        "input_size": t.size,
        "network_size": g.size(),
        "predicted_cost": res.predicted_cost,
        "nodes": node_sizes(g),
        "edges": edge_list(g),
        "program": format_program(res.program, names).splitlines(),
        "topology": topology_text(g).splitlines(),
        "timings": res.timings,
        "sketch_count": res.sketch_count,
        "exec_count": res.exec_count,
    }
    if network_dir is not None:
        report["network_dir"] = str(Path(network_dir).resolve())
    return report


def _emit(t: Tensor, res: SearchResult, args, config: Dict) -> int:
    if args.save_network:
        save_network(res.network, args.save_network,
                     {"eps": res.eps, "method": res.method,
                      "achieved_rel_error": res.achieved_rel_error})
    report = build_report(t, res, config, args.save_network)
    text = json.dumps(report, indent=2)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    if res.achieved_rel_error > res.eps + VERIFY_SLACK:
        raise CliError(
            f"result error {res.achieved_rel_error:.3e} exceeds eps {res.eps}",
            EXIT_INTERNAL,
        )
    logger.info("%s: ratio %.4g, rel error %.3e, size %d",
                res.method, res.compression_ratio, res.achieved_rel_error,
                res.network.size())
    return EXIT_OK


def _load_input(path) -> Tensor:
    return canonical(read_tensor(path))


def _parse_dims(text: str) -> List[int]:
    try:
        dims = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise CliError(f"bad --dims {text!r}", EXIT_INPUT) from None
    if not dims or any(n < 1 for n in dims):
        raise CliError(f"bad --dims {text!r}", EXIT_INPUT)
    return dims


def _config(args, cfg: SearchConfig = None) -> Dict:
    out = {"command": args.command, "eps": args.eps}
    if cfg is not None:
        out.update(topk=cfg.k, max_splits=cfg.max_splits,
                   bin_fraction=cfg.bin_fraction, seed=cfg.seed,
                   threads=cfg.parallelism, rank_strategy=cfg.rank_strategy)
    return out


def _search_config(args) -> SearchConfig:
    threads = args.threads if args.threads is not None else default_threads()
    return SearchConfig(
        eps=args.eps, k=args.topk, max_splits=args.max_splits,
        bin_fraction=args.bin_fraction, seed=args.seed, parallelism=threads,
        rank_strategy=args.rank_strategy,
    )


def cmd_search(args) -> int:
    t = _load_input(args.input)
    cfg = _search_config(args)
    res = search_structure(t, cfg)
    return _emit(t, res, args, _config(args, cfg))


def cmd_generate(args) -> int:
    dims = _parse_dims(args.dims)
    if args.rank_min < 1 or args.rank_min > args.rank_max:
        raise CliError(
            f"need 1 <= rank-min <= rank-max, got {args.rank_min}, {args.rank_max}",
            EXIT_INPUT,
        )
    if len(dims) < 2:
        raise CliError("need at least two dimensions", EXIT_INPUT)
    t, gt = generate_synthetic(len(dims), dims, (args.rank_min, args.rank_max),
                               args.seed)
    write_tensor(args.out, t)
    if args.truth:
        names = _id_names(t)
        truth = {
            "dims": dims,
            "seed": args.seed,
            "rank_range": [args.rank_min, args.rank_max],
            "size": gt.size(),
            "compression_ratio": t.size / gt.size(),
            "edges": edge_list(gt),
            "program": format_program(program_from_network(gt), names).splitlines(),
        }
        Path(args.truth).write_text(json.dumps(truth, indent=2) + "\n")
    logger.info("wrote %s (%d values)", args.out, t.size)
    return EXIT_OK


def cmd_verify(args) -> int:
    t = _load_input(args.data)
    target = Path(args.target)
    eps = args.eps
    declared = None
    if target.is_file():
        try:
            report = json.loads(target.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise CliError(f"cannot read report {target}: {exc}", EXIT_INPUT) from None
        if "network_dir" not in report:
            raise CliError("report has no saved network (use --save-network)",
                           EXIT_INPUT)
        net_dir = Path(report["network_dir"])
        eps = eps if eps is not None else report.get("eps")
        declared = report.get("achieved_rel_error")
    elif target.is_dir():
        net_dir = target
    else:
        raise CliError(f"{target} does not exist", EXIT_INPUT)
    g, meta = load_network(net_dir, [ix.name for ix in t.indices])
    if eps is None:
        eps = meta.get("eps")
    if eps is None:
        raise CliError("eps unknown: pass --eps", EXIT_INPUT)
    for ix in g.free_indices:
        if ix.size != t.index(ix.id).size:
            raise CliError(
                f"index {ix.name} has size {ix.size} in the network but "
                f"{t.index(ix.id).size} in the data", EXIT_INPUT)
    err = relative_error(g, t)
    print(json.dumps({
        "achieved_rel_error": err,
        "declared_rel_error": declared,
        "eps": eps,
        "network_size": g.size(),
        "input_size": t.size,
        "compression_ratio": t.size / g.size(),
        "nodes": node_sizes(g),
        "within_eps": err <= eps + VERIFY_SLACK,
    }, indent=2))
    if err > eps + VERIFY_SLACK:
        logger.error("relative error %.6e exceeds eps %g", err, eps)
        return EXIT_FAILURE
    return EXIT_OK


def cmd_baseline(args) -> int:
    t = _load_input(args.input)
    if args.method == "tt":
        res = tt_baseline(t, args.eps)
    elif args.method == "ht":
        res = ht_baseline(t, args.eps)
    else:
        raise CliError(f"unknown baseline method {args.method!r}", EXIT_INPUT)
    return _emit(t, res, args, dict(_config(args), method=args.method))


def _report_sketch(path, t: Tensor) -> Program:
    try:
        report = json.loads(Path(path).read_text())
        lines = report["program"]
    except (OSError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise CliError(f"cannot read program from {path}: {exc}", EXIT_INPUT) from None
    p = parse_program("\n".join(lines), _free_names(t))
    return sketch(p.blocks)


def cmd_reuse(args) -> int:
    t = _load_input(args.input)
    s = _report_sketch(args.sketch_from, t)
    cfg = _search_config(args)
    res = decompose_with_topology(t, s, args.eps, cfg)
    return _emit(t, res, args, dict(_config(args, cfg), sketch_from=str(args.sketch_from)))


def cmd_run_program(args) -> int:
    t = _load_input(args.input)
    try:
        text = Path(args.program).read_text()
    except OSError as exc:
        raise CliError(f"cannot read {args.program}: {exc}", EXIT_INPUT) from None
    p = parse_program(text, _free_names(t))
    start = time.perf_counter()
    predicted = None
    if not p.complete:
        if not is_valid(p):
            raise CliError("program blocks are not compatible; holes cannot be "
                           "completed", EXIT_FAILURE)
        p, predicted = complete_sketch(p, t, args.eps)
    st = exec_program(p, ExecState.initial(t, args.eps))
    g = st.network
    err = relative_error(g, t)
    res = SearchResult(
        network=g, program=p, eps=args.eps, achieved_rel_error=err,
        compression_ratio=t.size / g.size(),
        predicted_cost=predicted if predicted is not None else g.size(),
        timings={"total": time.perf_counter() - start},
        sketch_count=0, exec_count=1, method="run-program",
    )
    return _emit(t, res, args, dict(_config(args), program=str(args.program)))


def _add_output(p: argparse.ArgumentParser) -> None:
    p.add_argument("--out", help="report path (JSON); stdout when omitted")
    p.add_argument("--save-network", metavar="DIR",
                   help="write each factor as node_<id>.tnsr plus topology.txt")


def _add_search_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--topk", type=int, default=1,
                   help="number of best-predicted candidates to execute (default 1)")
    p.add_argument("--max-splits", type=int, default=None,
                   help="longest sketch to enumerate (default min(2d-3, 6))")
    p.add_argument("--bin-fraction", type=float, default=DEFAULT_BIN_FRACTION,
                   help="truncation-option spacing as a fraction of the budget")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None,
                   help="worker threads (default: $TNSYNTH_THREADS or 1)")
    p.add_argument("--rank-strategy", choices=RANK_STRATEGIES, default="constraint",
                   help="'equal' gives every split the same error share")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tnsynth",
        description="Find compact tree tensor networks for dense tensors.",
        epilog=("exit codes: 0 ok, 1 semantic failure, 2 input error, "
                "3 unsupported order, 4 internal error"),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("search", help="search for the smallest tree network")
    p.add_argument("input")
    p.add_argument("--eps", type=float, required=True,
                   help="relative Frobenius error bound in (0, 1)")
    _add_search_flags(p)
    _add_output(p)
    p.set_defaults(func=cmd_search)

    p = sub.add_parser("generate", help="write a random tree-structured tensor")
    p.add_argument("--dims", required=True, help="comma-separated sizes, e.g. 16,18,20,22")
    p.add_argument("--rank-min", type=int, default=2)
    p.add_argument("--rank-max", type=int, default=5)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--truth", help="ground-truth description (JSON)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("verify", help="recontract a saved network and check its error")
    p.add_argument("data")
    p.add_argument("target", help="network directory or report with network_dir")
    p.add_argument("--eps", type=float, default=None,
                   help="override the declared eps")
    p.set_defaults(func=cmd_verify)

    p = sub.add_parser("baseline", help="tensor-train or hierarchical Tucker decomposition")
    p.add_argument("input")
    p.add_argument("--method", required=True, help="tt or ht")
    p.add_argument("--eps", type=float, required=True)
    _add_output(p)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("reuse", help="decompose with the topology from an earlier report")
    p.add_argument("input")
    p.add_argument("--sketch-from", required=True, metavar="REPORT")
    p.add_argument("--eps", type=float, required=True)
    _add_search_flags(p)
    _add_output(p)
    p.set_defaults(func=cmd_reuse)

    p = sub.add_parser("run-program", help="execute a split program file")
    p.add_argument("input")
    p.add_argument("program")
    p.add_argument("--eps", type=float, required=True,
                   help="error budget each split must respect")
    _add_output(p)
    p.set_defaults(func=cmd_run_program)
    return parser


def _check_eps(args) -> None:
    eps = getattr(args, "eps", None)
    if eps is not None and not 0 < eps < 1:
        raise CliError(f"--eps must lie in (0, 1), got {eps}", EXIT_INPUT)


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_INPUT
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        _check_eps(args)
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ExecutionFailure as exc:
        where = f" at expression {exc.expr_index}" if exc.expr_index is not None else ""
        print(f"error: split failed{where}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except UnsupportedOrder as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_UNSUPPORTED
    except (FormatError, InvalidArgument, ShapeMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except InvalidState as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # pragma: no cover - last-resort guard
        logger.exception("unexpected failure")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
