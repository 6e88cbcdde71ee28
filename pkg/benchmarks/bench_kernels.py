"""Compare the compiled and pure-Python kernel backends.

    python benchmarks/bench_kernels.py [--repeat N]

Times the vehicle sub-stepping loop (one 800 s run at 100 Hz) and the
model profile fit over a coarse (tm, tstar) grid, checks both backends
agree, and prints a small table.
"""
import argparse
import time

import numpy as np

from mgvsim import kernels
from mgvsim.resilience import ModelParams, simulate_model
from mgvsim.vehicle import VehicleState, _pack, load_route, load_vehicle_params


def bench_vehicle(mod, params, route, n_events=8000):
    a = params.arrays
    ends, grade, crr = route.arrays(params)
    state = _pack(VehicleState(coolant_temp=90.0), route)
    t0 = time.perf_counter()
    for k in range(n_events):
        thr = 0.3 + 0.5 * ((k // 50) % 2)
        mod.vehicle_advance(state, thr, 0.0, (k // 600) % 2, a["consts"], a["rpm_knots"], a["torque"],
                            a["hp"], a["bsfc"], a["ratios"], a["up"], a["down"], ends, grade, crr, 0.01, 10)
    return time.perf_counter() - t0, state.copy()


def bench_profile(mod, stride=10):
    s = simulate_model(ModelParams(0.008, 0.048, 307.0, 408.0))
    f = np.ascontiguousarray(s.v + np.random.default_rng(0).normal(0, 0.02, len(s.v)))
    n = len(f)
    cells = [(i, j) for i in range(0, n - 1, stride) for j in range(i + stride, n, stride)]
    ii = np.array([c[0] for c in cells], dtype=np.int64)
    jj = np.array([c[1] for c in cells], dtype=np.int64)
    t0 = time.perf_counter()
    out = mod.profile_cells(f, 1.0, 1.0, ii, jj, 1.0, 22, 1)
    return time.perf_counter() - t0, out, len(cells)


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--repeat", type=int, default=3)
    args = ap.parse_args()
    params, route = load_vehicle_params(), load_route(5)
    backends = kernels.backends()
    if "cython" not in backends:
        print("compiled backend not built; only the pure-Python backend is available")
    results = {}
    for name, mod in backends.items():
        tv = min(bench_vehicle(mod, params, route)[0] for _ in range(args.repeat))
        tp, out, ncell = min((bench_profile(mod) for _ in range(args.repeat)), key=lambda r: r[0])
        results[name] = (tv, tp, bench_vehicle(mod, params, route)[1], out)
    print(f"{'backend':<8} {'vehicle 800 s':>14} {'profile ' + str(ncell) + ' cells':>20}")
    for name, (tv, tp, _, _) in results.items():
        print(f"{name:<8} {tv:>13.3f}s {tp:>19.3f}s")
    if len(results) == 2:
        (tv_c, tp_c, st_c, out_c), (tv_p, tp_p, st_p, out_p) = results["cython"], results["python"]
        print(f"speed-up: vehicle x{tv_p / tv_c:.1f}, profile x{tp_p / tp_c:.1f}")
        print(f"max state difference: {np.max(np.abs(st_c - st_p)):.3e}")
        print(f"max profile SSE difference: {np.max(np.abs(out_c[2] - out_p[2])):.3e}")


if __name__ == "__main__":
    main()
