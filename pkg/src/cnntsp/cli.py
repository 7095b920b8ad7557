"""Command line: ``cnntsp generate | train | solve | eval``."""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import baselines, search
from .errors import CheckpointError, InstanceTooLarge, TspError
from .instances import (
    TspInstance,
    generate_uniform,
    load_tsplib,
    normalize_instance,
    optimality_gap,
    per_instance_gaps,
    read_dataset,
    tour_length,
    validate_tour,
    write_dataset,
)
from .model import CNNTransformer
from .training import RunConfig, train

log = logging.getLogger("cnntsp")

WORKERS_ENV = "CNNTSP_WORKERS"


def _default_workers() -> int:
    try:
        return max(1, int(os.environ.get(WORKERS_ENV, "1")))
    except ValueError:
        return 1


def _emit(record: dict) -> None:
    print(json.dumps(record, sort_keys=True))


def cmd_generate(args) -> int:
    instances = generate_uniform(args.n, args.count, args.seed)
    out = Path(args.out)
    write_dataset(out, instances, meta={"n": args.n, "count": args.count, "seed": args.seed})
    _emit({"command": "generate", "out": str(out), "n": args.n, "count": args.count, "seed": args.seed})
    return 0


def cmd_train(args) -> int:
    try:
        data = json.loads(Path(args.config).read_text())
        run = RunConfig.from_dict(data)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read config {args.config}: {exc}", file=sys.stderr)
        return 2
    except (TspError, TypeError) as exc:
        print(f"error: invalid config {args.config}: {exc}", file=sys.stderr)
        return 2
    result = train(run, args.out_dir, progress=args.verbose)
    _emit({
        "command": "train",
        "out_dir": str(args.out_dir),
        "checkpoint": str(result.checkpoint),
        "epochs": len(result.stats),
        "config": run.to_dict(),
    })
    return 0


def _solve_one(model, inst: TspInstance, args) -> tuple[tuple, float]:
    t0 = time.perf_counter()
    if args.decoder == "greedy":
        tour = search.greedy_decode(inst, model, clamp_k=True)
    elif args.decoder == "sample":
        tour = search.sample_decode(inst, model, args.samples, args.seed, clamp_k=True)
    else:
        tour = search.beam_search(inst, model, args.beam_width, args.select, clamp_k=True)
    return tour.order, time.perf_counter() - t0


def cmd_solve(args) -> int:
    try:
        model = CNNTransformer.load(args.checkpoint)
    except (OSError, CheckpointError) as exc:
        print(f"error: cannot load checkpoint {args.checkpoint}: {exc}", file=sys.stderr)
        return 2
    except RuntimeError as exc:  # state-dict shape mismatches
        print(f"error: checkpoint {args.checkpoint} is incompatible: {exc}", file=sys.stderr)
        return 2

    raw = None
    name = None
    if args.tsplib:
        problem = load_tsplib(args.tsplib)
        instances = [normalize_instance(problem)]
        raw = problem.raw_coords
        name = problem.name
    else:
        instances = read_dataset(args.dataset)

    decoder_meta = {
        "decoder": args.decoder,
        "beam_width": args.beam_width if args.decoder == "beam" else None,
        "select": args.select if args.decoder == "beam" else None,
        "samples": args.samples if args.decoder == "sample" else None,
        "seed": args.seed,
        "checkpoint": str(args.checkpoint),
        "model": model.config.to_dict(),
        "source": str(args.tsplib or args.dataset),
    }
    workers = args.workers or _default_workers()
    done = 0
    complete = False
    with open(args.out, "w") as fh:
        try:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                # map preserves input order regardless of completion order
                for i, (inst, (order, secs)) in enumerate(
                        zip(instances, pool.map(lambda x: _solve_one(model, x, args), instances))):
                    problem = validate_tour(order, inst.n)
                    if problem is not None:
                        raise TspError(f"instance {i}: decoder produced an invalid tour: {problem}")
                    rec = {
                        "index": i,
                        "tour": list(order),
                        "decoder": decoder_meta,
                        "seconds": secs,
                        "coords": inst.coords.tolist(),
                    }
                    if raw is not None:
                        rec["name"] = name
                        rec["length"] = tour_length(raw, order)
                        rec["normalized_length"] = tour_length(inst, order)
                        rec["units"] = "raw"
                    else:
                        rec["length"] = tour_length(inst, order)
                        rec["units"] = "normalized"
                    fh.write(json.dumps(rec) + "\n")
                    done += 1
            complete = True
        except TspError as exc:
            print(f"error: {exc}", file=sys.stderr)
        finally:
            fh.write(json.dumps({"trailer": {"complete": complete, "count": done,
                                             "expected": len(instances), "decoder": decoder_meta}}) + "\n")
    _emit({"command": "solve", "out": str(args.out), "count": done, "complete": complete})
    return 0 if complete else 1


def read_results(path) -> tuple[list[dict], dict]:
    results, trailer = [], {}
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if "trailer" in rec:
                trailer = rec["trailer"]
            else:
                results.append(rec)
    return results, trailer


def read_lengths(path) -> list[float]:
    out = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            rec = json.loads(line)
            if isinstance(rec, dict):
                if "trailer" in rec:
                    continue
                rec = rec["length"]
            out.append(float(rec))
    return out


def cmd_eval(args) -> int:
    results, trailer = read_results(args.results)
    if not results:
        print(f"error: no results in {args.results}", file=sys.stderr)
        return 2
    pred = [float(r["length"]) for r in results]
    if args.reference == "held_karp":
        refs = []
        for r in results:
            coords = np.asarray(r["coords"], dtype=np.float64)
            if len(coords) > baselines.HELD_KARP_MAX_N:
                print(f"error: held_karp reference is limited to n <= {baselines.HELD_KARP_MAX_N} "
                      f"(exact DP needs O(n 2^n) memory); instance {r.get('index')} has n={len(coords)}. "
                      f"Pass a lengths file instead.", file=sys.stderr)
                return 2
            if r.get("units") == "raw":
                print("error: held_karp reference needs normalized-unit results", file=sys.stderr)
                return 2
            refs.append(baselines.held_karp(coords).length)
    else:
        refs = read_lengths(args.reference)
        if len(refs) != len(pred):
            print(f"error: {len(pred)} results but {len(refs)} reference lengths", file=sys.stderr)
            return 2
    report = {
        "command": "eval",
        "results": str(args.results),
        "reference": args.reference,
        "count": len(pred),
        "mean_length": float(np.mean(pred)),
        "mean_reference_length": float(np.mean(refs)),
        "gap_percent": optimality_gap(pred, refs),
        "per_instance_gaps": per_instance_gaps(pred, refs),
        "reference_lengths": refs,
        "results_complete": bool(trailer.get("complete", False)),
        "decoder": trailer.get("decoder"),
    }
    if args.out:
        Path(args.out).write_text(json.dumps(report, indent=2) + "\n")
    summary = {k: report[k] for k in ("command", "count", "mean_length", "mean_reference_length", "gap_percent")}
    _emit(summary)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="cnntsp", description="CNN-Transformer TSP solver")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a JSONL dataset of uniform random instances")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train with REINFORCE and a greedy rollout baseline")
    t.add_argument("--config", required=True, help="run config JSON")
    t.add_argument("--out-dir", required=True)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("solve", help="decode instances with a checkpoint")
    s.add_argument("--checkpoint", required=True)
    src = s.add_mutually_exclusive_group(required=True)
    src.add_argument("--dataset")
    src.add_argument("--tsplib")
    s.add_argument("--decoder", choices=("greedy", "sample", "beam"), default="greedy")
    s.add_argument("--beam-width", "-B", type=int, default=16)
    s.add_argument("--select", choices=search.SELECT_RULES, default="max_prob")
    s.add_argument("--samples", type=int, default=64)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--workers", type=int, default=None, help=f"defaults to ${WORKERS_ENV} or 1")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_solve)

    e = sub.add_parser("eval", help="optimality gap of a results file")
    e.add_argument("--results", required=True)
    e.add_argument("--reference", required=True, help="'held_karp' or a lengths JSONL file")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InstanceTooLarge as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (OSError, TspError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
