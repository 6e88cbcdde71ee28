import os
import subprocess
import sys

import numpy as np
import pytest

from mgvsim import BACKEND, kernels, _kernels_py
from mgvsim.resilience import ModelParams, simulate_model
from mgvsim.vehicle import VehicleState, _pack, load_route, load_vehicle_params

compiled = kernels.backends().get("cython")
needs_compiled = pytest.mark.skipif(compiled is None, reason="compiled extension not built")


def _drive(mod, n=600):
    p, route = load_vehicle_params(), load_route(3)
    a = p.arrays
    ends, grade, crr = route.arrays(p)
    state = _pack(VehicleState(coolant_temp=88.0), route)
    trace = []
    for k in range(n):
        thr = 0.9 if (k // 40) % 3 else 0.2
        brk = 0.3 if k % 97 == 0 else 0.0
        mod.vehicle_advance(state, thr, brk, (k // 150) % 2, a["consts"], a["rpm_knots"], a["torque"],
                            a["hp"], a["bsfc"], a["ratios"], a["up"], a["down"], ends, grade, crr, 0.01, 10)
        trace.append(state.copy())
    return np.array(trace)


def test_backend_is_reported():
    assert BACKEND in ("cython", "python")
    assert "python" in kernels.backends()


@needs_compiled
def test_vehicle_advance_backends_bit_identical():
    assert np.array_equal(_drive(compiled), _drive(_kernels_py))


@needs_compiled
def test_profile_cells_backends_agree():
    s = simulate_model(ModelParams(0.01, 0.05, 250.0, 420.0))
    f = np.ascontiguousarray(s.v + np.random.default_rng(3).normal(0, 0.02, len(s.v)))
    cells = [(i, j) for i in range(0, 800, 25) for j in range(i + 25, 801, 25)]
    ii = np.array([c[0] for c in cells], dtype=np.int64)
    jj = np.array([c[1] for c in cells], dtype=np.int64)
    out_c = compiled.profile_cells(f, 1.0, 1.0, ii, jj, 1.0, 30, 2)
    out_p = _kernels_py.profile_cells(f, 1.0, 1.0, ii, jj, 1.0, 30, 2)
    # summation order differs, so the line searches can stop at slightly
    # different rates where the error surface is flat; the error itself agrees
    np.testing.assert_allclose(out_c[2], out_p[2], rtol=1e-9, atol=1e-10)
    np.testing.assert_allclose(out_c[0], out_p[0], atol=1e-5)
    np.testing.assert_allclose(out_c[1], out_p[1], atol=1e-5)


@pytest.mark.parametrize("mod", [m for m in kernels.backends().values()])
def test_interp(mod):
    xs = np.array([0.0, 1.0, 3.0])
    ys = np.array([10.0, 20.0, 0.0])
    assert mod.interp(-1.0, xs, ys) == 10.0
    assert mod.interp(0.5, xs, ys) == 15.0
    assert mod.interp(2.0, xs, ys) == 10.0
    assert mod.interp(5.0, xs, ys) == 0.0


def test_profile_cells_recovers_rates_at_true_cell():
    s = simulate_model(ModelParams(0.008, 0.048, 307.0, 408.0))
    f = np.ascontiguousarray(s.v)
    m0, b0, sse = kernels.profile_cells(f, 1.0, 1.0, np.array([307], dtype=np.int64),
                                        np.array([408], dtype=np.int64), 1.0, 60, 4)
    assert m0[0] == pytest.approx(0.008, abs=1e-6)
    assert b0[0] == pytest.approx(0.048, abs=1e-6)
    assert sse[0] < 1e-10


def test_env_var_forces_pure_python():
    env = dict(os.environ, MGVSIM_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import mgvsim; print(mgvsim.BACKEND)"],
                         capture_output=True, text=True, env=env, check=True)
    assert out.stdout.strip() == "python"
