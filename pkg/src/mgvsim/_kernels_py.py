"""Pure-Python/numpy twin of ``_kernels.pyx``.

``vehicle_advance`` mirrors the compiled loop statement by statement;
``profile_cells`` is vectorised over cells with numpy instead.
"""
import math

import numpy as np

S_T, S_POS, S_SPEED, S_GEAR, S_RPM, S_FUEL, S_ODO, S_COOLANT, S_LAST_SHIFT, S_WORK, S_SEG, S_FUEL_G = range(12)
N_STATE = 12

(C_MASS, C_CIRC, C_IDLE, C_REDLINE, C_FAN_HP, C_FAN_PEN, C_DENSITY, C_CDA, C_G,
 C_BRAKE_MAX, C_TAU_COOL, C_TAU_HEAT, C_T_FAN, C_T_BASE, C_T_GAIN, C_SHIFT_HOLD) = range(16)
N_CONSTS = 16

KW_PER_HP = 0.7457


def interp(v, xs, ys):
    n = len(xs)
    if v <= xs[0]:
        return float(ys[0])
    if v >= xs[n - 1]:
        return float(ys[n - 1])
    i = 0
    while xs[i + 1] < v:
        i += 1
    return float(ys[i] + (ys[i + 1] - ys[i]) * (v - xs[i]) / (xs[i + 1] - xs[i]))


def vehicle_advance(state, throttle, brake, fan_on, consts, rpm_knots, torque, hp, bsfc,
                    ratios, up_rpm, down_rpm, seg_end, seg_grade, seg_crr, dt, n_steps):
    # lists are much faster than ndarray indexing for scalar loops
    c = consts.tolist()
    xs, tqs, hps, bss = rpm_knots.tolist(), torque.tolist(), hp.tolist(), bsfc.tolist()
    ratios_l, up_l, down_l = ratios.tolist(), up_rpm.tolist(), down_rpm.tolist()
    ends, grades, crrs = seg_end.tolist(), seg_grade.tolist(), seg_crr.tolist()
    n_gears = len(ratios_l)
    n_seg = len(ends)
    mass, circ = c[C_MASS], c[C_CIRC]
    idle, redline = c[C_IDLE], c[C_REDLINE]
    grav = c[C_G]
    s = state.tolist()
    taken = n_steps
    for k in range(n_steps):
        t = s[S_T]
        pos = s[S_POS]
        v = s[S_SPEED]
        g = int(s[S_GEAR])
        seg = int(s[S_SEG])
        while seg < n_seg - 1 and pos >= ends[seg]:
            seg += 1
        if pos >= ends[n_seg - 1]:
            s[S_SEG] = seg
            taken = k
            break
        s[S_SEG] = seg

        road_rpm = v / circ * ratios_l[g] * 60.0
        if t - s[S_LAST_SHIFT] >= c[C_SHIFT_HOLD]:
            if g < n_gears - 1 and road_rpm >= up_l[g]:
                g += 1
                s[S_LAST_SHIFT] = t
            elif g > 0 and road_rpm <= down_l[g]:
                g -= 1
                s[S_LAST_SHIFT] = t
            road_rpm = v / circ * ratios_l[g] * 60.0
        rpm = road_rpm if road_rpm > idle else idle

        tq = interp(rpm, xs, tqs)
        pw = interp(rpm, xs, hps)
        bs = interp(rpm, xs, bss)
        pen = (1.0 - c[C_FAN_PEN]) if fan_on else 1.0
        if road_rpm >= redline:
            drive = 0.0
            delivered = 0.0
        else:
            drive = tq * throttle * ratios_l[g] * pen / (circ / (2.0 * math.pi))
            delivered = pw * throttle * pen

        theta = math.atan(grades[seg])
        f_grade = mass * grav * math.sin(theta)
        f_roll = crrs[seg] * mass * grav * math.cos(theta)
        f_aero = c[C_CDA] * v * v
        f_brake = brake * c[C_BRAKE_MAX]
        f_motive = drive - f_grade
        if v <= 0.0 and f_motive <= f_roll + f_brake:
            acc = 0.0
        else:
            acc = (drive - f_grade - f_roll - f_aero - f_brake) / mass
        v = v + acc * dt
        if v < 0.0:
            v = 0.0
        pos = pos + v * dt

        grams = (delivered + (c[C_FAN_HP] if fan_on else 0.0)) * KW_PER_HP * bs * dt / 3600.0
        s[S_FUEL_G] += grams
        s[S_FUEL] += grams / (1000.0 * c[C_DENSITY])
        s[S_WORK] += delivered * KW_PER_HP * dt / 3600.0

        temp = s[S_COOLANT]
        if fan_on:
            t_eq = c[C_T_FAN]
        else:
            t_eq = c[C_T_BASE] + c[C_T_GAIN] * throttle
        tau = c[C_TAU_COOL] if temp > t_eq else c[C_TAU_HEAT]
        temp = temp + (t_eq - temp) / tau * dt
        if temp < -40.0:
            temp = -40.0
        elif temp > 150.0:
            temp = 150.0
        s[S_COOLANT] = temp

        s[S_T] = t + dt
        s[S_POS] = pos
        s[S_ODO] += v * dt
        s[S_SPEED] = v
        s[S_GEAR] = g
        s[S_RPM] = rpm
    state[:] = s
    return taken


# -- model profile fit -----------------------------------------------------

_CHUNK = 256
_INVPHI = 0.6180339887498949


def _sse_batch(f, h, fn, i, j, m0, b0, pre, decay_part):
    n = f.shape[0]
    k = np.arange(n)[None, :]
    i = i[:, None]
    j = j[:, None]
    decay_mask = (k >= i) & (k < j)
    rec_mask = k >= j
    f1 = fn * np.exp(-m0[:, None] * h * (j - i))
    gap = (fn - f1) * np.exp(-b0[:, None] * h * np.maximum(k - j, 0))
    rec = np.where(rec_mask, f[None, :] - (fn - gap), 0.0)
    acc = np.sum(rec * rec, axis=1)
    if decay_part:
        val = fn * np.exp(-m0[:, None] * h * np.maximum(k - i, 0))
        dec = np.where(decay_mask, f[None, :] - val, 0.0)
        acc = acc + np.sum(dec * dec, axis=1) + pre
    return acc


def _golden_batch(f, h, fn, i, j, other, pre, over_m0, hi, iters):
    a = np.zeros(len(i))
    b = np.full(len(i), hi)

    def sse(x):
        if over_m0:
            return _sse_batch(f, h, fn, i, j, x, other, pre, True)
        return _sse_batch(f, h, fn, i, j, other, x, pre, False)

    c = b - _INVPHI * (b - a)
    d = a + _INVPHI * (b - a)
    fc, fd = sse(c), sse(d)
    for _ in range(iters):
        left = fc <= fd
        # left: b=d, d=c, fd=fc, new c ; right: a=c, c=d, fc=fd, new d
        b = np.where(left, d, b)
        a = np.where(left, a, c)
        new_c = np.where(left, b - _INVPHI * (b - a), d)
        new_d = np.where(left, c, a + _INVPHI * (b - a))
        new_fc = np.where(left, np.nan, fd)
        new_fd = np.where(left, fc, np.nan)
        probe = np.where(left, new_c, new_d)
        val = sse(probe)
        c, d = new_c, new_d
        fc = np.where(left, val, new_fc)
        fd = np.where(left, new_fd, val)
    return 0.5 * (a + b)


def profile_cells(f, h, fn, tm_idx, ts_idx, rate_hi, iters, rounds):
    f = np.ascontiguousarray(f, dtype=float)
    tm_idx = np.asarray(tm_idx, dtype=np.int64)
    ts_idx = np.asarray(ts_idx, dtype=np.int64)
    n = f.shape[0]
    pre_sq = np.concatenate([[0.0], np.cumsum((f - fn) ** 2)])
    out_m = np.empty(len(tm_idx))
    out_b = np.empty(len(tm_idx))
    out_s = np.empty(len(tm_idx))
    y = f / fn
    with np.errstate(divide="ignore", invalid="ignore"):
        logy = np.where(y > 0, np.log(np.where(y > 0, y, 1.0)), 0.0)
    k = np.arange(n)[None, :]
    for start in range(0, len(tm_idx), _CHUNK):
        i = tm_idx[start : start + _CHUNK]
        j = ts_idx[start : start + _CHUNK]
        ii, jj = i[:, None], j[:, None]
        s = (k - ii) * h
        mask = (k >= ii) & (k < jj) & (y[None, :] > 0)
        num = np.sum(np.where(mask, s * logy[None, :], 0.0), axis=1)
        den = np.sum(np.where(mask, s * s, 0.0), axis=1)
        m0 = np.clip(np.where(den > 0, -num / np.where(den > 0, den, 1.0), 0.0), 0.0, rate_hi)
        gap0 = fn - fn * np.exp(-m0 * (j - i) * h)
        with np.errstate(divide="ignore", invalid="ignore"):
            rr = (fn - f[None, :]) / gap0[:, None]
            ok = (k >= jj) & (rr > 0) & (rr < 1) & (gap0[:, None] > 0)
            s2 = (k - jj) * h
            num = np.sum(np.where(ok, s2 * np.log(np.where(ok, rr, 1.0)), 0.0), axis=1)
            den = np.sum(np.where(ok, s2 * s2, 0.0), axis=1)
        b0 = np.clip(np.where(den > 0, -num / np.where(den > 0, den, 1.0), 0.0), 0.0, rate_hi)
        pre = pre_sq[i]
        for _ in range(rounds):
            m0 = _golden_batch(f, h, fn, i, j, b0, pre, True, rate_hi, iters)
            b0 = _golden_batch(f, h, fn, i, j, m0, pre, False, rate_hi, iters)
        out_m[start : start + _CHUNK] = m0
        out_b[start : start + _CHUNK] = b0
        out_s[start : start + _CHUNK] = _sse_batch(f, h, fn, i, j, m0, b0, pre, True)
    return out_m, out_b, out_s
