"""Reference adapter for the external score protocol.

Serves the exact analytic score of a registry benchmark (or the zero
score) over stdin/stdout, one JSON object per line::

    python -m mlmc_diffusion.score_server --benchmark gauss-4d --T0 32 --L 12

The schedule is rebuilt from the same ``T0, M, L`` as the sampler so both
sides agree on every grid time.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .registry import get_benchmark
from .schedules import LevelGrid
from .scores import analytic_score, prior_target


def _score_fn(args):
    if args.zero:
        return lambda x, t: np.zeros_like(x)
    b = get_benchmark(args.benchmark, args.registry)
    grid = LevelGrid(args.T0 or b.default_T0(), args.M, args.L)
    sched = b.schedule(grid.schedule_steps)
    target = b.problem if b.target == "posterior" else prior_target(b.problem.prior)
    model = analytic_score(target, sched)
    return lambda x, t: model.evaluate(x, t)


def serve(fn, stdin=sys.stdin, stdout=sys.stdout) -> None:
    for line in stdin:
        if not line.strip():
            continue
        req = json.loads(line)
        s = fn(np.asarray(req["x"], dtype=float), int(req["t"]))
        stdout.write(json.dumps({"id": req["id"], "score": [float(v) for v in s]}) + "\n")
        stdout.flush()


def main(argv=None) -> None:
    p = argparse.ArgumentParser(description="analytic score adapter (line-delimited JSON)")
    p.add_argument("--benchmark", default="gauss-4d")
    p.add_argument("--registry")
    p.add_argument("--T0", type=int)
    p.add_argument("--M", type=int, default=2)
    p.add_argument("--L", type=int, default=12)
    p.add_argument("--zero", action="store_true", help="always answer with the zero vector")
    args = p.parse_args(argv)
    serve(_score_fn(args))


if __name__ == "__main__":
    main()
