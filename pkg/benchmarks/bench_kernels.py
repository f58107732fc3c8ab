"""Compare the numba-compiled kernels against the pure-Python fallback.

Each backend runs in its own interpreter (the switch is read at import), so
the Python numbers include no compiled helpers. Usage:

    python3 benchmarks/bench_kernels.py [--repeat N]
"""

from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time

import numpy as np


def _time(fn, repeat):
    fn()  # warm-up (and JIT compile)
    best = np.inf
    for _ in range(3):
        t0 = time.perf_counter()
        for _ in range(repeat):
            fn()
        best = min(best, (time.perf_counter() - t0) / repeat)
    return best


def worker(repeat: int) -> dict:
    from cimpc import _backend
    from cimpc.contact import gauss_seidel_kernel, point_kernel
    from cimpc.model import RobotModel, _evaluate
    from cimpc.stepper import step, step_jacobians

    rng = np.random.default_rng(0)
    model = RobotModel()
    x = model.stance_state().x.copy()
    x[model.nv:] = rng.normal(scale=0.2, size=model.nv)
    q, qd = x[: model.nv], x[model.nv:]
    u = np.zeros(model.n_joints)

    problems = []
    for dim in (2, 3):
        L = rng.normal(size=(dim, dim))
        G = L @ L.T + 0.5 * np.eye(dim)
        c = rng.normal(size=dim)
        c[-1] = -abs(c[-1])
        problems.append((G, c, dim))
    J = rng.normal(size=(8, 7))
    W = J @ J.T + 0.1 * np.eye(8)
    vfree = rng.normal(size=8)
    vfree[1::2] = -np.abs(vfree[1::2])

    cases = {
        "point_kernel dim2": lambda: point_kernel(problems[0][0], problems[0][1], 0.8, 2),
        "point_kernel dim3": lambda: point_kernel(problems[1][0], problems[1][1], 0.8, 3),
        "gauss_seidel 4 contacts": lambda: gauss_seidel_kernel(W, vfree, np.zeros(4), 0.8, 2, 50, 1e-10),
        "model terms + partials": lambda: _evaluate(q, qd, model, 2),
        "step": lambda: step(model, x, u, 0.025),
        "step + jacobians": lambda: step_jacobians(model, x, u, 0.025, 0.25),
    }
    sig = {
        "point2": point_kernel(problems[0][0], problems[0][1], 0.8, 2)[0].tolist(),
        "point3": point_kernel(problems[1][0], problems[1][1], 0.8, 3)[0].tolist(),
        "step": step(model, x, u, 0.025).next_state.x.tolist(),
    }
    return {
        "numba": _backend.USE_NUMBA,
        "seconds": {k: _time(f, repeat) for k, f in cases.items()},
        "signature": sig,
    }


def _run(no_numba: bool, repeat: int) -> dict:
    env = dict(os.environ)
    if no_numba:
        env["CIMPC_NO_NUMBA"] = "1"
    else:
        env.pop("CIMPC_NO_NUMBA", None)
    out = subprocess.run(
        [sys.executable, __file__, "--worker", "--repeat", str(repeat)],
        env=env, check=True, capture_output=True, text=True,
    )
    return json.loads(out.stdout.strip().splitlines()[-1])


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=50)
    ap.add_argument("--worker", action="store_true", help=argparse.SUPPRESS)
    args = ap.parse_args()
    if args.worker:
        print(json.dumps(worker(args.repeat)))
        return
    fast = _run(False, args.repeat)
    slow = _run(True, max(1, args.repeat // 5))
    if not fast["numba"] or slow["numba"]:
        raise SystemExit("backend switch did not take effect")
    drift = max(
        float(np.max(np.abs(np.subtract(fast["signature"][k], slow["signature"][k])))) for k in fast["signature"]
    )
    print(f"{'case':<26}{'numba (us)':>12}{'python (us)':>14}{'speedup':>10}")
    for k, t_fast in fast["seconds"].items():
        t_slow = slow["seconds"][k]
        print(f"{k:<26}{t_fast * 1e6:>12.1f}{t_slow * 1e6:>14.1f}{t_slow / t_fast:>9.1f}x")
    print(f"max result difference between backends: {drift:.2e}")


if __name__ == "__main__":
    main()
