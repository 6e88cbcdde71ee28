# cython: language_level=3
"""Compiled inner loops: vehicle physics sub-stepping and the per-cell
profile fit of the malware/bonware functionality model.

Every function here has a line-for-line twin in ``_kernels_py.py``; keep the
two in step (same operation order, no fast-math) so results agree to
rounding error.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport exp, log, sin, cos, atan, M_PI

cnp.import_array()

cdef enum:
    S_T = 0
    S_POS = 1
    S_SPEED = 2
    S_GEAR = 3
    S_RPM = 4
    S_FUEL = 5
    S_ODO = 6
    S_COOLANT = 7
    S_LAST_SHIFT = 8
    S_WORK = 9
    S_SEG = 10
    S_FUEL_G = 11

cdef enum:
    C_MASS = 0
    C_CIRC = 1
    C_IDLE = 2
    C_REDLINE = 3
    C_FAN_HP = 4
    C_FAN_PEN = 5
    C_DENSITY = 6
    C_CDA = 7
    C_G = 8
    C_BRAKE_MAX = 9
    C_TAU_COOL = 10
    C_TAU_HEAT = 11
    C_T_FAN = 12
    C_T_BASE = 13
    C_T_GAIN = 14
    C_SHIFT_HOLD = 15

cdef double KW_PER_HP = 0.7457


cdef inline double _interp(double v, double[::1] xs, double[::1] ys) noexcept nogil:
    cdef Py_ssize_t n = xs.shape[0]
    cdef Py_ssize_t i
    if v <= xs[0]:
        return ys[0]
    if v >= xs[n - 1]:
        return ys[n - 1]
    i = 0
    while xs[i + 1] < v:
        i += 1
    return ys[i] + (ys[i + 1] - ys[i]) * (v - xs[i]) / (xs[i + 1] - xs[i])


def interp(double v, double[::1] xs, double[::1] ys):
    return _interp(v, xs, ys)


def vehicle_advance(double[::1] state, double throttle, double brake, int fan_on,
                    double[::1] consts, double[::1] rpm_knots, double[::1] torque,
                    double[::1] hp, double[::1] bsfc, double[::1] ratios,
                    double[::1] up_rpm, double[::1] down_rpm, double[::1] seg_end,
                    double[::1] seg_grade, double[::1] seg_crr, double dt, int n_steps):
    """Advance ``state`` in place by up to ``n_steps`` Euler steps.

    Returns the number of steps taken; fewer than ``n_steps`` means the end
    of the route was reached.
    """
    cdef Py_ssize_t n_gears = ratios.shape[0]
    cdef Py_ssize_t n_seg = seg_end.shape[0]
    cdef Py_ssize_t seg, g
    cdef int k, taken = n_steps
    cdef double mass = consts[C_MASS], circ = consts[C_CIRC]
    cdef double idle = consts[C_IDLE], redline = consts[C_REDLINE]
    cdef double grav = consts[C_G]
    cdef double t, pos, v, road_rpm, rpm, tq, pw, bs, pen, drive, theta
    cdef double f_grade, f_roll, f_aero, f_brake, f_motive, acc, delivered
    cdef double grams, t_eq, tau, temp
    with nogil:
        for k in range(n_steps):
            t = state[S_T]
            pos = state[S_POS]
            v = state[S_SPEED]
            g = <Py_ssize_t>state[S_GEAR]
            seg = <Py_ssize_t>state[S_SEG]
            while seg < n_seg - 1 and pos >= seg_end[seg]:
                seg += 1
            if pos >= seg_end[n_seg - 1]:
                state[S_SEG] = seg
                taken = k
                break
            state[S_SEG] = seg

            road_rpm = v / circ * ratios[g] * 60.0
            if t - state[S_LAST_SHIFT] >= consts[C_SHIFT_HOLD]:
                if g < n_gears - 1 and road_rpm >= up_rpm[g]:
                    g += 1
                    state[S_LAST_SHIFT] = t
                elif g > 0 and road_rpm <= down_rpm[g]:
                    g -= 1
                    state[S_LAST_SHIFT] = t
                road_rpm = v / circ * ratios[g] * 60.0
            rpm = road_rpm if road_rpm > idle else idle

            tq = _interp(rpm, rpm_knots, torque)
            pw = _interp(rpm, rpm_knots, hp)
            bs = _interp(rpm, rpm_knots, bsfc)
            pen = (1.0 - consts[C_FAN_PEN]) if fan_on else 1.0
            if road_rpm >= redline:
                # governor cuts fuel above redline
                drive = 0.0
                delivered = 0.0
            else:
                drive = tq * throttle * ratios[g] * pen / (circ / (2.0 * M_PI))
                delivered = pw * throttle * pen

            theta = atan(seg_grade[seg])
            f_grade = mass * grav * sin(theta)
            f_roll = seg_crr[seg] * mass * grav * cos(theta)
            f_aero = consts[C_CDA] * v * v
            f_brake = brake * consts[C_BRAKE_MAX]
            f_motive = drive - f_grade
            if v <= 0.0 and f_motive <= f_roll + f_brake:
                acc = 0.0
            else:
                acc = (drive - f_grade - f_roll - f_aero - f_brake) / mass
            v = v + acc * dt
            if v < 0.0:
                v = 0.0
            pos = pos + v * dt

            grams = (delivered + (consts[C_FAN_HP] if fan_on else 0.0)) * KW_PER_HP * bs * dt / 3600.0
            state[S_FUEL_G] += grams
            state[S_FUEL] += grams / (1000.0 * consts[C_DENSITY])
            state[S_WORK] += delivered * KW_PER_HP * dt / 3600.0

            temp = state[S_COOLANT]
            if fan_on:
                t_eq = consts[C_T_FAN]
            else:
                t_eq = consts[C_T_BASE] + consts[C_T_GAIN] * throttle
            tau = consts[C_TAU_COOL] if temp > t_eq else consts[C_TAU_HEAT]
            temp = temp + (t_eq - temp) / tau * dt
            if temp < -40.0:
                temp = -40.0
            elif temp > 150.0:
                temp = 150.0
            state[S_COOLANT] = temp

            state[S_T] = t + dt
            state[S_POS] = pos
            state[S_ODO] += v * dt
            state[S_SPEED] = v
            state[S_GEAR] = g
            state[S_RPM] = rpm
    return taken


cdef double _sse(const double[::1] f, double h, double fn, Py_ssize_t i, Py_ssize_t j,
                 double m0, double b0, double pre, bint decay_part) noexcept nogil:
    cdef Py_ssize_t n = f.shape[0]
    cdef Py_ssize_t k
    cdef double acc = 0.0, d, val, q, p, gap
    q = exp(-m0 * h)
    val = fn
    for k in range(i, j):
        if decay_part:
            d = f[k] - val
            acc += d * d
        val *= q
    gap = fn - val
    p = exp(-b0 * h)
    for k in range(j, n):
        d = f[k] - (fn - gap)
        acc += d * d
        gap *= p
    if decay_part:
        acc += pre
    return acc


cdef double _golden(const double[::1] f, double h, double fn, Py_ssize_t i, Py_ssize_t j,
                    double other, double pre, bint over_m0, double lo, double hi,
                    int iters) noexcept nogil:
    cdef double invphi = 0.6180339887498949
    cdef double a = lo, b = hi, c, d, fc, fd
    cdef int it
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    if over_m0:
        fc = _sse(f, h, fn, i, j, c, other, pre, True)
        fd = _sse(f, h, fn, i, j, d, other, pre, True)
    else:
        fc = _sse(f, h, fn, i, j, other, c, pre, False)
        fd = _sse(f, h, fn, i, j, other, d, pre, False)
    for it in range(iters):
        if fc <= fd:
            b = d
            d = c
            fd = fc
            c = b - invphi * (b - a)
            if over_m0:
                fc = _sse(f, h, fn, i, j, c, other, pre, True)
            else:
                fc = _sse(f, h, fn, i, j, other, c, pre, False)
        else:
            a = c
            c = d
            fc = fd
            d = a + invphi * (b - a)
            if over_m0:
                fd = _sse(f, h, fn, i, j, d, other, pre, True)
            else:
                fd = _sse(f, h, fn, i, j, other, d, pre, False)
    return 0.5 * (a + b)


def profile_cells(const double[::1] f, double h, double fn, const long[::1] tm_idx,
                  const long[::1] ts_idx, double rate_hi, int iters, int rounds):
    """Best (M0, B0) and SSE for each (onset index, switch index) cell."""
    cdef Py_ssize_t n = f.shape[0]
    cdef Py_ssize_t ncell = tm_idx.shape[0]
    cdef Py_ssize_t c, i, j, k
    cdef int r
    cdef double m0, b0, num, den, s, y, f1, rr, gap0
    cdef cnp.ndarray[double, ndim=1] out_m = np.empty(ncell)
    cdef cnp.ndarray[double, ndim=1] out_b = np.empty(ncell)
    cdef cnp.ndarray[double, ndim=1] out_s = np.empty(ncell)
    cdef double[::1] pre_sq = np.empty(n + 1)
    cdef double[::1] om = out_m, ob = out_b, osse = out_s
    pre_sq[0] = 0.0
    for k in range(n):
        pre_sq[k + 1] = pre_sq[k] + (f[k] - fn) * (f[k] - fn)
    with nogil:
        for c in range(ncell):
            i = tm_idx[c]
            j = ts_idx[c]
            # log-linear starting points
            num = 0.0
            den = 0.0
            for k in range(i, j):
                y = f[k] / fn
                if y > 0.0:
                    s = (k - i) * h
                    num += s * log(y)
                    den += s * s
            m0 = -num / den if den > 0.0 else 0.0
            if m0 < 0.0:
                m0 = 0.0
            if m0 > rate_hi:
                m0 = rate_hi
            f1 = fn * exp(-m0 * (j - i) * h)
            gap0 = fn - f1
            num = 0.0
            den = 0.0
            if gap0 > 0.0:
                for k in range(j, n):
                    rr = (fn - f[k]) / gap0
                    if rr > 0.0 and rr < 1.0:
                        s = (k - j) * h
                        num += s * log(rr)
                        den += s * s
            b0 = -num / den if den > 0.0 else 0.0
            if b0 < 0.0:
                b0 = 0.0
            if b0 > rate_hi:
                b0 = rate_hi
            for r in range(rounds):
                m0 = _golden(f, h, fn, i, j, b0, pre_sq[i], True, 0.0, rate_hi, iters)
                b0 = _golden(f, h, fn, i, j, m0, pre_sq[i], False, 0.0, rate_hi, iters)
            om[c] = m0
            ob[c] = b0
            osse[c] = _sse(f, h, fn, i, j, m0, b0, pre_sq[i], True)
    return out_m, out_b, out_s
