# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled closed-loop step kernel.

Mirrors ``simengine.run_python`` operation for operation on flat arrays
produced by ``simengine.pack_spec``.
"""
import numpy as np
cimport numpy as cnp
from libc.math cimport sin, cos, sqrt, fmod, fabs, fmax, isfinite, NAN, ceil

cnp.import_array()

cdef double TWO_PI = 6.283185307179586
cdef double PHASE_SHIFT = 6.283185307179586 / 3.0

# plant vector layout
cdef enum:
    P_LBAR1 = 0
    P_RBAR1 = 1
    P_R2 = 2
    P_L2 = 3
    P_C = 4
    P_ALPHA = 5
    P_BETA = 6
    P_R = 7
    P_LINV = 16


cdef inline double wrap(double th) nogil:
    cdef double w = fmod(th, TWO_PI)
    if w < 0.0:
        w += TWO_PI
    if w >= TWO_PI:
        w = 0.0
    return w


cdef inline void park3(double th, double* x, double* out) nogil:
    cdef double s0 = sin(th), s1 = sin(th - PHASE_SHIFT), s2 = sin(th + PHASE_SHIFT)
    cdef double c0 = cos(th), c1 = cos(th - PHASE_SHIFT), c2 = cos(th + PHASE_SHIFT)
    out[0] = (2.0 / 3.0) * (s0 * x[0] + s1 * x[1] + s2 * x[2])
    out[1] = (2.0 / 3.0) * (c0 * x[0] + c1 * x[1] + c2 * x[2])
    out[2] = (x[0] + x[1] + x[2]) / 3.0


cdef inline void ipark3(double th, double* y, double* out) nogil:
    out[0] = sin(th) * y[0] + cos(th) * y[1] + y[2]
    out[1] = sin(th - PHASE_SHIFT) * y[0] + cos(th - PHASE_SHIFT) * y[1] + y[2]
    out[2] = sin(th + PHASE_SHIFT) * y[0] + cos(th + PHASE_SHIFT) * y[1] + y[2]


cdef inline void matvec(double* M, double* x, double* out) nogil:
    cdef int i
    for i in range(3):
        out[i] = M[3 * i] * x[0] + M[3 * i + 1] * x[1] + M[3 * i + 2] * x[2]


cdef inline double excess(double* x) nogil:
    cdef double tot = 0.0, e
    cdef int i
    for i in range(3):
        e = fabs(x[i]) - 1.0
        if e > 0.0:
            tot += e
    return tot


cdef inline double clamp1(double x) nogil:
    if x > 1.0:
        return 1.0
    if x < -1.0:
        return -1.0
    return x


# duty limiter schemes; keep in sync with control.SATURATION_SCHEMES
cdef enum:
    SAT_ABC = 0
    SAT_DQ = 1
    SAT_VECTOR = 2


cdef inline double absmax3(double* x) nogil:
    return fmax(fmax(fabs(x[0]), fabs(x[1])), fabs(x[2]))


cdef void duty_pi(double th, double kp, double ki, double* integral, double* e,
                  double dt, double* duty, int scheme) nogil:
    cdef double cand[3]
    cdef double u[3]
    cdef double u_old[3]
    cdef double abc[3]
    cdef double abc_old[3]
    cdef double m_new, m_old
    cdef int i
    for i in range(3):
        cand[i] = integral[i] + e[i] * dt
        u[i] = kp * e[i] + ki * cand[i]
        u_old[i] = kp * e[i] + ki * integral[i]
    if scheme == SAT_DQ:
        for i in range(3):
            if fabs(u[i]) <= 1.0 or u[i] * e[i] < 0.0:
                integral[i] = cand[i]
            u[i] = clamp1(u[i])
        ipark3(th, u, abc)
    elif scheme == SAT_VECTOR:
        ipark3(th, u, abc)
        m_new = absmax3(abc)
        if m_new > 1.0:
            ipark3(th, u_old, abc_old)
            m_old = absmax3(abc_old)
            if m_old <= 1.0 or m_new <= m_old:
                for i in range(3):
                    integral[i] = cand[i]
            for i in range(3):
                abc[i] = abc[i] / m_new
        else:
            for i in range(3):
                integral[i] = cand[i]
    else:
        ipark3(th, u, abc)
        ipark3(th, u_old, abc_old)
        m_old = excess(abc_old)
        if m_old == 0.0 or excess(abc) <= m_old:
            for i in range(3):
                integral[i] = cand[i]
    for i in range(3):
        duty[i] = clamp1(abc[i])


cdef void plant_rhs(double* pl, double* Rm, double* Linv, double* x, double* Vin, double* Il,
                    double* D1, double* D2, double* dx) nogil:
    """State derivative; ``x`` = [I1, I2, I3, vC]."""
    cdef double beta = pl[P_BETA]
    cdef double IR[3]
    cdef double V[3]
    cdef double RI1[3]
    cdef double RI2[3]
    cdef double RI3[3]
    cdef double RIl[3]
    cdef double Rbar2_I2[3]
    cdef double tmp[3]
    cdef double vC = x[9]
    cdef double ab = pl[P_ALPHA] * beta
    cdef int i
    for i in range(3):
        IR[i] = -beta * x[i] + x[3 + i] - x[6 + i] - Il[i]
    matvec(Rm, IR, V)
    matvec(Rm, x, RI1)
    matvec(Rm, x + 3, RI2)
    matvec(Rm, x + 6, RI3)
    matvec(Rm, Il, RIl)
    # (R2 I + R) I2, evaluated row-wise like the dense product
    for i in range(3):
        tmp[0] = Rm[3 * i]
        tmp[1] = Rm[3 * i + 1]
        tmp[2] = Rm[3 * i + 2]
        tmp[i] = pl[P_R2] + Rm[3 * i + i]
        Rbar2_I2[i] = tmp[0] * x[3] + tmp[1] * x[4] + tmp[2] * x[5]
    for i in range(3):
        dx[i] = (-pl[P_RBAR1] * x[i] + beta * V[i] - ab * Vin[i] + D1[i] * vC) / pl[P_LBAR1]
        dx[3 + i] = (beta * RI1[i] - Rbar2_I2[i] + RI3[i] + RIl[i] + D2[i] * vC) / pl[P_L2]
    matvec(Linv, V, dx + 6)
    dx[9] = (-(D1[0] * x[0] + D1[1] * x[1] + D1[2] * x[2])
             - (D2[0] * x[3] + D2[1] * x[4] + D2[2] * x[5])) / pl[P_C]


cdef inline void src_waves(double th, double vpk, double ipk, double* Vin, double* Il) nogil:
    cdef double t0 = sin(th), t1 = sin(th - PHASE_SHIFT), t2 = sin(th + PHASE_SHIFT)
    Vin[0] = vpk * t0
    Vin[1] = vpk * t1
    Vin[2] = vpk * t2
    Il[0] = ipk * t0
    Il[1] = ipk * t1
    Il[2] = ipk * t2


cdef double profile(double[::1] tp, double[::1] fp, double t) nogil:
    cdef Py_ssize_t n = tp.shape[0]
    cdef Py_ssize_t i = 0
    if t <= tp[0]:
        return fp[0]
    if t >= tp[n - 1]:
        return fp[n - 1]
    while tp[i + 1] < t:
        i += 1
    return fp[i] + (fp[i + 1] - fp[i]) * (t - tp[i]) / (tp[i + 1] - tp[i])


def run_kernel(double[:, ::1] out, double[::1] plant, double[::1] gains, double[::1] refs,
               double[::1] droop, double[::1] sources, cnp.int64_t[::1] activation,
               cnp.int64_t[::1] ev_steps, cnp.int64_t[::1] ev_kinds, double[:, ::1] ev_data,
               double[::1] tp, double[::1] fp, double[::1] x0, double dt, long long nsteps,
               long long decimation, int rk4, long long window, int sat1, int sat2):
    """Integrate the closed loop; returns ``(n_records, status, fail_step)``."""
    cdef double pl[7]
    cdef double Rm[9]
    cdef double Linv[9]
    cdef double x[10]
    cdef double xs[10]
    cdef double k1[10]
    cdef double k2[10]
    cdef double k3[10]
    cdef double k4[10]
    cdef double Vin[3]
    cdef double Il[3]
    cdef double IR[3]
    cdef double V[3]
    cdef double Ib[3]
    cdef double Iload[3]
    cdef double Vdq[3]
    cdef double Ibdq[3]
    cdef double Ildq[3]
    cdef double I3dq[3]
    cdef double I2dq[3]
    cdef double e[3]
    cdef double ref[3]
    cdef double D1[3]
    cdef double D2[3]
    cdef double int1[3]
    cdef double int2[3]
    cdef double int6[3]
    cdef double int3 = 0.0, int4 = 0.0, int5 = 0.0
    cdef double kp1 = gains[0], ki1 = gains[1], kp2 = gains[2], ki2 = gains[3]
    cdef double kp3 = gains[4], ki3 = gains[5], kp4 = gains[6], ki4 = gains[7]
    cdef double kp5 = gains[8], ki5 = gains[9], kp6 = gains[10], ki6 = gains[11]
    cdef double gamma = gains[12]
    cdef double vC_star = refs[0], i2q_ref = refs[1], i20_ref = refs[2], Qbar_star = refs[3]
    cdef double v_ref = refs[4]
    cdef double f0 = droop[0], df_max = droop[1], P0 = droop[2], Pmin = droop[3]
    cdef double Pmax = droop[4], v0 = droop[5]
    cdef double vin_pk = sources[0], i_pk = sources[1]
    cdef double vin_scale = 1.0
    cdef double limit = 2.0 * vC_star
    cdef double beta, t, f, th = 0.0, w, h
    cdef double P_load, P_grid, Qbar, P_star, v_star, i2d, i2q, kf, df, err, cand, s, rms
    cdef double Vpk
    cdef long long k, r = 0, ev_i = 0, n_ev = ev_steps.shape[0]
    cdef long long a_vr = activation[0], a_pf = activation[1], a_fr = activation[2]
    cdef long long a_pb = activation[3]
    cdef int i, status = 0
    cdef long long fail_step = -1
    cdef bint ok
    # rolling window ring buffer
    cdef double[::1] wbuf = np.zeros(max(window, 1))
    cdef long long wcap = max(window, 1), wcount = 0, whead = 0, wsince = 0, j
    cdef double wsum = 0.0, old, total

    for i in range(7):
        pl[i] = plant[i]
    for i in range(9):
        Rm[i] = plant[P_R + i]
        Linv[i] = plant[P_LINV + i]
    for i in range(10):
        x[i] = x0[i]
    for i in range(3):
        int1[i] = 0.0
        int2[i] = 0.0
        int6[i] = 0.0
    beta = pl[P_BETA]

    with nogil:
        for k in range(nsteps):
            t = k * dt
            # events
            while ev_i < n_ev and ev_steps[ev_i] <= k:
                if ev_kinds[ev_i] == 0:
                    vin_scale = vin_scale * ev_data[ev_i, 0]
                else:
                    for i in range(9):
                        Rm[i] = ev_data[ev_i, i]
                        Linv[i] = ev_data[ev_i, 9 + i]
                ev_i += 1
            f = profile(tp, fp, t)
            Vpk = vin_pk * vin_scale
            src_waves(th, Vpk, i_pk, Vin, Il)
            for i in range(3):
                IR[i] = -beta * x[i] + x[3 + i] - x[6 + i] - Il[i]
            matvec(Rm, IR, V)
            for i in range(3):
                Ib[i] = -beta * x[i]
                Iload[i] = IR[i] + x[6 + i] + Il[i]

            # measurements in dq0
            park3(th, V, Vdq)
            park3(th, Ib, Ibdq)
            park3(th, Iload, Ildq)
            P_load = 1.5 * (Vdq[0] * Ildq[0] + Vdq[1] * Ildq[1])
            P_grid = 1.5 * (Vdq[0] * Ibdq[0] + Vdq[1] * Ibdq[1])
            Qbar = 1.5 * (Vdq[1] * Ibdq[0] - Vdq[0] * Ibdq[1])

            # droop and frequency loop
            df = f - f0
            if df >= 0.0:
                kf = (Pmax - P0) / df_max
            else:
                kf = (P0 - Pmin) / df_max
            P_star = P0 + kf * df
            if P_star < Pmin:
                P_star = Pmin
            if P_star > Pmax:
                P_star = Pmax
            if k >= a_fr:
                err = P_star - P_load
                int5 = int5 + err * dt
                v_star = v0 + (kp5 * err + ki5 * int5)
            else:
                v_star = v_ref

            # DC link
            err = x[9] - vC_star
            int3 = int3 + err * dt
            i2d = kp3 * err + ki3 * int3

            # power factor
            if k >= a_pf:
                park3(th, x + 6, I3dq)
                err = Qbar_star - Qbar
                int4 = int4 + err * dt
                i2q = I3dq[1] + (kp4 * err + ki4 * int4)
            else:
                i2q = i2q_ref

            # rolling RMS of the grid d-current
            if wcount == wcap:
                old = wbuf[whead]
                wsum -= old * old
                wbuf[whead] = Ibdq[0]
                whead = (whead + 1) % wcap
            else:
                wbuf[(whead + wcount) % wcap] = Ibdq[0]
                wcount += 1
            wsum += Ibdq[0] * Ibdq[0]
            wsince += 1
            if wsince >= wcap:
                total = 0.0
                for j in range(wcount):
                    old = wbuf[(whead + j) % wcap]
                    total += old * old
                wsum = total
                wsince = 0
            s = wsum
            if s < 0.0:
                s = 0.0
            rms = sqrt(s / wcount)

            if k >= a_pb:
                e[0] = Ibdq[0] - rms
                e[1] = Ibdq[1]
                e[2] = Ibdq[2]
                for i in range(3):
                    int6[i] = int6[i] + e[i] * dt
                    ref[i] = kp6 * e[i] + ki6 * int6[i]
                ref[0] += gamma * i2d
            else:
                ref[0] = i2d
                ref[1] = i2q
                ref[2] = i20_ref

            # inner loops
            if k >= a_vr:
                e[0] = Vdq[0] - v_star
                e[1] = Vdq[1]
                e[2] = Vdq[2]
                duty_pi(th, kp1, ki1, int1, e, dt, D1, sat1)
            else:
                D1[0] = 0.0
                D1[1] = 0.0
                D1[2] = 0.0
            park3(th, x + 3, I2dq)
            for i in range(3):
                e[i] = ref[i] - I2dq[i]
            duty_pi(th, kp2, ki2, int2, e, dt, D2, sat2)

            if k % decimation == 0:
                out[r, 0] = t
                for i in range(3):
                    out[r, 1 + i] = Vin[i]
                    out[r, 4 + i] = x[i]
                    out[r, 7 + i] = x[3 + i]
                    out[r, 10 + i] = x[6 + i]
                    out[r, 13 + i] = V[i]
                    out[r, 16 + i] = Vdq[i]
                    out[r, 19 + i] = Ibdq[i]
                    out[r, 23 + i] = D1[i]
                    out[r, 26 + i] = D2[i]
                out[r, 22] = x[9]
                out[r, 29] = P_load
                out[r, 30] = Qbar
                s = sqrt(P_grid * P_grid + Qbar * Qbar)
                out[r, 31] = P_grid / s if s > 0.0 else NAN
                out[r, 32] = f
                out[r, 33] = P_star
                out[r, 34] = v_star
                r += 1

            # integrate with duties held
            if rk4 == 0:
                plant_rhs(pl, Rm, Linv, x, Vin, Il, D1, D2, k1)
                for i in range(10):
                    x[i] = x[i] + dt * k1[i]
            else:
                w = TWO_PI * f
                h = 0.5 * dt
                plant_rhs(pl, Rm, Linv, x, Vin, Il, D1, D2, k1)
                for i in range(10):
                    xs[i] = x[i] + h * k1[i]
                src_waves(th + h * w, Vpk, i_pk, Vin, Il)
                plant_rhs(pl, Rm, Linv, xs, Vin, Il, D1, D2, k2)
                for i in range(10):
                    xs[i] = x[i] + h * k2[i]
                plant_rhs(pl, Rm, Linv, xs, Vin, Il, D1, D2, k3)
                for i in range(10):
                    xs[i] = x[i] + dt * k3[i]
                src_waves(th + dt * w, Vpk, i_pk, Vin, Il)
                plant_rhs(pl, Rm, Linv, xs, Vin, Il, D1, D2, k4)
                for i in range(10):
                    x[i] = x[i] + (dt / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])

            ok = fabs(x[9]) <= limit
            for i in range(10):
                if not isfinite(x[i]):
                    ok = False
            if not ok:
                status = 1
                fail_step = k
                break
            th = wrap(th + TWO_PI * f * dt)
    return r, status, fail_step
