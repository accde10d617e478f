"""Command line entry point: ``dlcert <subcommand> ...``.

Reports are written as JSON with sorted keys. ``certify`` exits with 0 for
GlobalMin, 2 for Saddle and 3 for NotCritical; any error exits with 1.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from dlcert.certify import classify
from dlcert.errors import DlcertError
from dlcert.escape import witness_ascent
from dlcert.harness import (
    ExperimentSpec,
    MODELS,
    GdConfig,
    end_to_end_experiment,
    model_from_name,
    train,
)
from dlcert.linalg import DEFAULT_TOL
from dlcert.network import Dims, load_instance, load_weights, save_instance, save_weights
from dlcert.probe import Sampler, check_theorem3, check_theorem4, load_pipeline
from dlcert.relaxed import solve

logger = logging.getLogger("dlcert")


def _json_default(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def dumps(data) -> str:
    return json.dumps(data, indent=2, sort_keys=True, default=_json_default) + "\n"


def write_json(path, data) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(dumps(data))


def _read_json(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise DlcertError(f"cannot read {path}: {exc}") from exc


def _tolerances(args):
    tol = DEFAULT_TOL
    changes = {}
    if getattr(args, "tol_rank", None) is not None:
        changes["rank_rel_tol"] = args.tol_rank
    if getattr(args, "tol_grad", None) is not None:
        changes["grad_tol"] = args.tol_grad
    if getattr(args, "tol_subspace", None) is not None:
        changes["subspace_tol"] = args.tol_subspace
    return replace(tol, **changes) if changes else tol


def cmd_solve_relaxed(args) -> int:
    inst = load_instance(args.instance)
    write_json(args.out, solve(inst, args.k).to_json())
    return 0


def cmd_certify(args) -> int:
    tol = _tolerances(args)
    inst = load_instance(args.instance, tol=tol)
    W = load_weights(args.weights)
    cert = classify(W, inst, tol, p=args.p)
    write_json(args.out, cert.to_json())
    return cert.exit_code


def cmd_escape(args) -> int:
    inst = load_instance(args.instance)
    W = load_weights(args.weights)
    witness = witness_ascent(W, inst, args.epsilon, args.seed)
    data = witness.to_json()
    data["epsilon"] = args.epsilon
    write_json(args.out, data)
    if args.point_out:
        save_weights(witness.point, args.point_out, inst.m)
    return 0


def _parse_dims(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"dims must be comma-separated integers, got {text!r}")


def cmd_train(args) -> int:
    dims = Dims(args.dims, args.m)
    cfg = GdConfig.from_json(_read_json(args.cfg)) if args.cfg else GdConfig()
    model = model_from_name(args.model, dims, args.seed, noise_sigma=args.noise_sigma)
    W, inst, report = train(dims, model, args.seed, cfg, args.init_scale,
                            escape=args.escape, epsilon=args.epsilon)
    write_json(args.out, report.to_json())
    if args.save:
        save_weights(W, Path(args.save) / "weights", inst.m)
        save_instance(inst, Path(args.save) / "instance")
    return 0


def cmd_experiment(args) -> int:
    spec = ExperimentSpec.from_json(_read_json(args.spec))
    result = end_to_end_experiment(spec)
    out = Path(args.out)
    write_json(out / "report.json", result)
    write_json(out / "summary.json", result["summary"])
    return 0


def cmd_probe(args) -> int:
    pipe = load_pipeline(args.pipeline)
    s = Sampler(args.samples, args.seed, args.scale)
    if args.theorem == 3:
        report = check_theorem3(pipe, s, args.margin)
    else:
        if args.j is None:
            raise DlcertError("--j is required for --theorem 4")
        report = check_theorem4(pipe, args.j, s, (args.eps1, args.eps2))
    write_json(args.out, report.to_json())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dlcert", description="Certify critical points of deep linear networks.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("solve-relaxed", help="closed-form rank-constrained regression")
    p.add_argument("--instance", required=True)
    p.add_argument("--k", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_solve_relaxed)

    p = sub.add_parser("certify", help="classify a weight stack")
    p.add_argument("--weights", required=True)
    p.add_argument("--instance", required=True)
    p.add_argument("--tol-rank", type=float)
    p.add_argument("--tol-grad", type=float)
    p.add_argument("--tol-subspace", type=float)
    p.add_argument("--p", type=int, help="bottleneck index (default: lowest narrowest layer)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_certify)

    p = sub.add_parser("escape", help="ascent witness at a saddle")
    p.add_argument("--weights", required=True)
    p.add_argument("--instance", required=True)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--point-out", help="directory for the witness weights")
    p.set_defaults(func=cmd_escape)

    p = sub.add_parser("train", help="generate an instance, run gradient descent, certify")
    p.add_argument("--dims", type=_parse_dims, required=True)
    p.add_argument("--m", type=int, required=True)
    p.add_argument("--model", default="generic", choices=list(MODELS))
    p.add_argument("--noise-sigma", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--cfg")
    p.add_argument("--init-scale", type=float, default=1.0)
    p.add_argument("--escape", action="store_true", help="attach an ascent witness on a Saddle verdict")
    p.add_argument("--epsilon", type=float, default=1e-3)
    p.add_argument("--save", help="directory for the final weights and the instance")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("experiment", help="run a multi-trial experiment from a JSON spec")
    p.add_argument("--spec", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("probe-nonlinear", help="sampled checks on a nonlinear pipeline")
    p.add_argument("--pipeline", required=True)
    p.add_argument("--theorem", type=int, choices=[3, 4], required=True)
    p.add_argument("--j", type=int)
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--scale", type=float, default=1.0)
    p.add_argument("--margin", type=float, default=1e-6)
    p.add_argument("--eps1", type=float, default=1e-6)
    p.add_argument("--eps2", type=float, default=1e-6)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_probe)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except Exception as exc:
        if args.verbose:
            logger.exception("command failed")
        print(f"dlcert: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
