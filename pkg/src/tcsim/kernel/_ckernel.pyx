# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled event kernel.

A line-by-line C transcription of ``transport.py``, ``pair_state.py``,
``cross_sections.py``, ``digitizer.py`` and ``rng.py``.  Every expression
keeps the Python evaluation order and uses the same libm functions, so the
two backends agree bit for bit (the build disables FMA contraction).
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, log, exp, cos, sin, acos, atan2, floor, NAN, isnan, INFINITY, M_PI
from libc.stdint cimport uint64_t, int64_t, int32_t, int16_t, int8_t
from libc.stdlib cimport malloc, calloc, realloc, free
from libc.string cimport memcpy, memset

from ._layout import RECORD_DTYPE, EVENT_DTYPE, HIT_DTYPE

cnp.import_array()

NAME = "cython"

DEF MAXREC = 512
DEF MAX_STEPS = 200
DEF MAX_TRIES = 1000000
DEF MAXVOL = 8

cdef double TWO_PI = 2.0 * M_PI
cdef double HALF_PI = 0.5 * M_PI
cdef double INV_2_53 = 1.0 / 9007199254740992.0
cdef double MASS = 511.0
cdef double DEGEN = 1e-9

cdef enum:
    ENT = 0
    FD = 1
    UNPOL = 2
    SEPARABLE = 3

cdef enum:
    ROLE_NONE = 0
    ROLE_INTERMEDIATE = 1
    ROLE_FIRST = 2
    ROLE_SECOND = 3
    ROLE_FREE = 4


class SamplerFault(RuntimeError):
    pass


# ---------------------------------------------------------------- structs

ctypedef struct rec_t:
    int64_t event
    double edep, x, y, z, theta, phi_lab, phi_photon, pol_x, pol_y, pol_z
    int16_t seq, pixel
    int8_t photon, level, volume, kind, role

ctypedef struct ev_t:
    int64_t event
    double weight, esc_e1, esc_e2, t_ics, t1, t2, p1_lab, p2_lab, p1_ph, p2_ph
    int32_t n_records, n_hits, degenerate
    int8_t label, escaped1, escaped2

ctypedef struct hit_t:
    int64_t event
    double energy, u, v
    int16_t pixel
    int8_t volume

ctypedef struct rng_t:
    uint64_t s0, s1, s2, s3

ctypedef struct photon_t:
    double E
    double d[3]
    double pol[3]
    int has_pol
    double fref[3]
    int level
    int pid
    int alive
    int escaped
    double esc_e
    double pos[3]
    int steps
    int awaiting

ctypedef struct pending_t:
    int pid
    double mu, k_before, k_after
    double d_before[3]
    double d_after[3]
    double pol_before[3]
    double phi_or

ctypedef struct world_t:
    int nvol
    int vtype[MAXVOL]
    int vid[MAXVOL]
    double center[MAXVOL][3]
    double u[MAXVOL][3]
    double v[MAXVOL][3]
    double w[MAXVOL][3]
    double half[MAXVOL][3]
    double radius[MAXVOL]
    int vmat[MAXVOL]
    int npu[MAXVOL]
    int npv[MAXVOL]
    double pitch[MAXVOL]
    int scd_index
    const double* me
    const double* mle
    const double* mpe
    const double* mco
    const int* moff
    double frac[4]
    double mu_lo, mu_hi, ics_lo, ics_hi, threshold
    int mode, sphere, sphere_ics, chain, force_scd, isotropic, keep, digitize

ctypedef struct event_t:
    rng_t rng
    photon_t g[2]
    int consumed
    int has_pending
    pending_t pend
    int degenerate
    double weight
    int nrec
    rec_t rec[MAXREC]
    int64_t index
    double axis[3]
    int fault


# ---------------------------------------------------------------- rng

cdef inline uint64_t rotl(uint64_t x, int k) nogil:
    return (x << k) | (x >> (64 - k))

cdef inline uint64_t splitmix(uint64_t* x) nogil:
    cdef uint64_t z
    x[0] = x[0] + <uint64_t>0x9E3779B97F4A7C15ULL
    z = x[0]
    z = (z ^ (z >> 30)) * <uint64_t>0xBF58476D1CE4E5B9ULL
    z = (z ^ (z >> 27)) * <uint64_t>0x94D049BB133111EBULL
    return z ^ (z >> 31)

cdef inline void rng_seed(rng_t* r, uint64_t seed, uint64_t event, uint64_t stream) nogil:
    cdef uint64_t x = seed ^ (event * <uint64_t>0x9E3779B97F4A7C15ULL) ^ (stream * <uint64_t>0xD1B54A32D192ED03ULL)
    r.s0 = splitmix(&x)
    r.s1 = splitmix(&x)
    r.s2 = splitmix(&x)
    r.s3 = splitmix(&x)

cdef inline uint64_t rng_next(rng_t* r) nogil:
    cdef uint64_t result = rotl(r.s1 * 5, 7) * 9
    cdef uint64_t t = r.s1 << 17
    r.s2 ^= r.s0
    r.s3 ^= r.s1
    r.s1 ^= r.s2
    r.s0 ^= r.s3
    r.s2 ^= t
    r.s3 = rotl(r.s3, 45)
    return result

cdef inline double urand(rng_t* r) nogil:
    return <double>(rng_next(r) >> 11) * INV_2_53

cdef inline double nrand(rng_t* r) nogil:
    cdef double u1 = urand(r)
    cdef double u2 = urand(r)
    return sqrt(-2.0 * log(1.0 - u1)) * cos(2.0 * M_PI * u2)


# ---------------------------------------------------------------- vectors

cdef inline double dot3(const double* a, const double* b) nogil:
    return a[0] * b[0] + a[1] * b[1] + a[2] * b[2]

cdef inline void cross3(const double* a, const double* b, double* out) nogil:
    cdef double x = a[1] * b[2] - a[2] * b[1]
    cdef double y = a[2] * b[0] - a[0] * b[2]
    cdef double z = a[0] * b[1] - a[1] * b[0]
    out[0] = x
    out[1] = y
    out[2] = z

cdef inline void unit3(double* a) nogil:
    cdef double n = sqrt(a[0] * a[0] + a[1] * a[1] + a[2] * a[2])
    a[0] = a[0] / n
    a[1] = a[1] / n
    a[2] = a[2] / n

cdef inline void copy3(const double* a, double* out) nogil:
    out[0] = a[0]
    out[1] = a[1]
    out[2] = a[2]

cdef inline double wrap(double phi) nogil:
    while phi >= M_PI:
        phi -= TWO_PI
    while phi < -M_PI:
        phi += TWO_PI
    return phi

cdef inline void any_perp(const double* d, double* out) nogil:
    cdef double ax = d[0] if d[0] >= 0 else -d[0]
    cdef double ay = d[1] if d[1] >= 0 else -d[1]
    cdef double az = d[2] if d[2] >= 0 else -d[2]
    cdef double e[3]
    e[0] = 0.0
    e[1] = 0.0
    e[2] = 0.0
    if ax <= ay and ax <= az:
        e[0] = 1.0
    elif ay <= az:
        e[1] = 1.0
    else:
        e[2] = 1.0
    cdef double p = dot3(e, d)
    out[0] = e[0] - p * d[0]
    out[1] = e[1] - p * d[1]
    out[2] = e[2] - p * d[2]
    unit3(out)

cdef inline int reject(const double* pol, const double* d, double* out) nogil:
    """Returns 1 when degenerate."""
    cdef double p = dot3(pol, d)
    cdef double v[3]
    v[0] = pol[0] - p * d[0]
    v[1] = pol[1] - p * d[1]
    v[2] = pol[2] - p * d[2]
    cdef double n = sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2])
    if n < DEGEN:
        any_perp(d, out)
        return 1
    out[0] = v[0] / n
    out[1] = v[1] / n
    out[2] = v[2] / n
    return 0

cdef inline void scatter_dir(const double* d, const double* f, double mu, double phi, double* out) nogil:
    cdef double x = 1.0 - mu * mu
    cdef double st = sqrt(x if x > 0.0 else 0.0)
    cdef double cp = cos(phi)
    cdef double sp = sin(phi)
    cdef double e2[3]
    cross3(d, f, e2)
    cdef double a = st * cp
    cdef double b = st * sp
    out[0] = a * f[0] + b * e2[0] + mu * d[0]
    out[1] = a * f[1] + b * e2[1] + mu * d[1]
    out[2] = a * f[2] + b * e2[2] + mu * d[2]
    unit3(out)


# ---------------------------------------------------------------- physics

cdef inline double kp_of(double k, double mu) nogil:
    return k / (1.0 + (k / MASS) * (1.0 - mu))

cdef inline double kn_mu(double k, double mu) nogil:
    cdef double eps = kp_of(k, mu) / k
    return eps * eps * (eps + 1.0 / eps - (1.0 - mu * mu))

cdef inline double kn_F(double u, double kappa) nogil:
    cdef double lu = log(u)
    return (-0.5 / (u * u) + lu - (2.0 / kappa) * (lu + 1.0 / u)
            + (u - 2.0 * lu - 1.0 / u) / (kappa * kappa))

cdef inline double kn_int(double k, double lo, double hi) nogil:
    cdef double kappa = k / MASS
    cdef double ulo = 1.0 + kappa * (1.0 - lo)
    cdef double uhi = 1.0 + kappa * (1.0 - hi)
    return (kn_F(ulo, kappa) - kn_F(uhi, kappa)) / kappa

cdef inline double kn_window(double k, double lo, double hi) nogil:
    return kn_int(k, lo, hi) / kn_int(k, -1.0, 1.0)

cdef double sample_mu(double k, rng_t* r, double lo, double hi, int* fault) nogil:
    cdef double width = hi - lo
    cdef double mu
    cdef int i
    for i in range(MAX_TRIES):
        mu = lo + width * urand(r)
        if 2.0 * urand(r) < kn_mu(k, mu):
            return mu
    fault[0] = 1
    return 1.0

cdef double phi_pol(double k, double mu, rng_t* r, int* fault) nogil:
    cdef double eps = kp_of(k, mu) / k
    cdef double alpha = eps + 1.0 / eps
    cdef double s2 = 2.0 * (1.0 - mu * mu)
    cdef double phi, c
    cdef int i
    for i in range(MAX_TRIES):
        phi = TWO_PI * urand(r) - M_PI
        c = cos(phi)
        if alpha * urand(r) < alpha - s2 * c * c:
            return phi
    fault[0] = 1
    return 0.0

cdef double dphi_cond(double k1, double mu1, double k2p, double mu2, rng_t* r, int* fault) nogil:
    cdef double e1 = kp_of(k1, mu1) / k1
    cdef double e2 = kp_of(k2p, mu2) / k2p
    cdef double a1 = e1 + 1.0 / e1
    cdef double a2 = e2 + 1.0 / e2
    cdef double s1 = 1.0 - mu1 * mu1
    cdef double s2 = 1.0 - mu2 * mu2
    cdef double base = a1 * a2 - a1 * s2 - a2 * s1
    cdef double mod = 2.0 * s1 * s2
    cdef double env = base + mod
    cdef double dphi, s
    cdef int i
    for i in range(MAX_TRIES):
        dphi = TWO_PI * urand(r) - M_PI
        s = sin(dphi)
        if env * urand(r) < base + mod * s * s:
            return dphi
    fault[0] = 1
    return 0.0


# ---------------------------------------------------------------- materials / geometry

cdef inline double loglog(double a, double b, double t) nogil:
    cdef double la
    if a > 0.0 and b > 0.0:
        la = log(a)
        return exp(la + t * (log(b) - la))
    return a + t * (b - a)

cdef void mat_mu(world_t* W, int m, double energy, double* mpe, double* mco) nogil:
    cdef int off = W.moff[m]
    cdef int n = W.moff[m + 1] - off
    cdef const double* e = W.me + off
    cdef int lo, hi, mid, i
    cdef double t
    if energy <= e[0] or energy >= e[n - 1]:
        i = 0 if energy <= e[0] else n - 1
        mpe[0] = W.mpe[off + i]
        mco[0] = W.mco[off + i]
        return
    lo = 0
    hi = n - 1
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if e[mid] <= energy:
            lo = mid
        else:
            hi = mid
    t = (log(energy) - W.mle[off + lo]) / (W.mle[off + hi] - W.mle[off + lo])
    mpe[0] = loglog(W.mpe[off + lo], W.mpe[off + hi], t)
    mco[0] = loglog(W.mco[off + lo], W.mco[off + hi], t)

cdef int ray_vol(world_t* W, int i, const double* o, const double* d, double* t0, double* t1) nogil:
    cdef double q[3]
    cdef double tin, tout, oc, dc, a, b, h, bb, c, disc, sq
    cdef int j
    cdef const double* ax
    q[0] = o[0] - W.center[i][0]
    q[1] = o[1] - W.center[i][1]
    q[2] = o[2] - W.center[i][2]
    if W.vtype[i] == 1:
        bb = dot3(q, d)
        c = dot3(q, q) - W.radius[i] * W.radius[i]
        disc = bb * bb - c
        if disc < 0.0:
            return 0
        sq = sqrt(disc)
        a = -bb - sq
        b = -bb + sq
        if b <= 0.0:
            return 0
        t0[0] = a if a > 0.0 else 0.0
        t1[0] = b
        return 1
    tin = -INFINITY
    tout = INFINITY
    for j in range(3):
        if j == 0:
            ax = W.u[i]
        elif j == 1:
            ax = W.v[i]
        else:
            ax = W.w[i]
        h = W.half[i][j]
        oc = dot3(q, ax)
        dc = dot3(d, ax)
        if dc == 0.0:
            if oc < -h or oc > h:
                return 0
            continue
        a = (-h - oc) / dc
        b = (h - oc) / dc
        if a > b:
            a, b = b, a
        if a > tin:
            tin = a
        if b < tout:
            tout = b
    if tout < tin or tout <= 0.0:
        return 0
    t0[0] = tin if tin > 0.0 else 0.0
    t1[0] = tout
    return 1

cdef int pixel_of(world_t* W, int i, const double* p) nogil:
    cdef double q[3]
    cdef double lu, lv
    cdef int col, row
    if W.vtype[i] == 1 or W.npu[i] == 0:
        return 0
    q[0] = p[0] - W.center[i][0]
    q[1] = p[1] - W.center[i][1]
    q[2] = p[2] - W.center[i][2]
    lu = dot3(q, W.u[i])
    lv = dot3(q, W.v[i])
    col = <int>floor((lu + W.half[i][0]) / W.pitch[i])
    row = <int>floor((lv + W.half[i][1]) / W.pitch[i])
    if col < 0:
        col = 0
    if col > W.npu[i] - 1:
        col = W.npu[i] - 1
    if row < 0:
        row = 0
    if row > W.npv[i] - 1:
        row = W.npv[i] - 1
    return row * W.npu[i] + col


# ---------------------------------------------------------------- pair state

cdef inline double local_to_oriented(int pid, double phi) nogil:
    if pid == 1:
        return wrap(-phi)
    return wrap(phi - HALF_PI)

cdef inline double oriented_to_local(int pid, double psi) nogil:
    if pid == 1:
        return wrap(-psi)
    return wrap(psi + HALF_PI)

cdef inline double frame_azimuth(int pid, const double* d_old, const double* fref, const double* d_new) nogil:
    cdef double e2[3]
    cross3(d_old, fref, e2)
    cdef double phi = atan2(dot3(d_new, e2), dot3(d_new, fref))
    if pid == 1:
        return wrap(-phi)
    return wrap(phi)

cdef void assign_pol(const double* pol_in, const double* d_out, double k, double kp, rng_t* r, double* out) nogil:
    cdef double cpar[3]
    cdef double cperp[3]
    reject(pol_in, d_out, cpar)
    cross3(d_out, cpar, cperp)
    cdef double cp = dot3(cpar, pol_in)
    cdef double cq = dot3(cperp, pol_in)
    cdef double base = kp / k + k / kp - 2.0
    cdef double w1 = base + 4.0 * cp * cp
    cdef double w2 = base + 4.0 * cq * cq
    if urand(r) * (w1 + w2) < w1:
        copy3(cpar, out)
    else:
        copy3(cperp, out)

cdef inline void transport_vec(event_t* E, double* v, const double* d) nogil:
    cdef double out[3]
    if reject(v, d, out):
        E.degenerate += 1
    copy3(out, v)

cdef void apply_scatter(event_t* E, photon_t* ph, double mu, double phi, const double* ref,
                        double* d_old, double* k, double* kp, double* phi_ph) nogil:
    cdef double dn[3]
    cdef double refc[3]
    copy3(ref, refc)
    k[0] = ph.E
    kp[0] = kp_of(k[0], mu)
    copy3(ph.d, d_old)
    scatter_dir(d_old, refc, mu, phi, dn)
    phi_ph[0] = frame_azimuth(ph.pid, d_old, ph.fref, dn)
    transport_vec(E, ph.fref, dn)
    ph.E = kp[0]
    copy3(dn, ph.d)
    ph.level += 1

cdef void resolve(event_t* E, int pid, double k, double kp, const double* d_old,
                  const double* d_new, const double* pol_before) nogil:
    cdef pending_t* f = &E.pend
    cdef photon_t* pa = &E.g[f.pid - 1]
    cdef photon_t* pb = &E.g[pid - 1]
    assign_pol(f.pol_before, f.d_after, f.k_before, f.k_after, &E.rng, pa.pol)
    pa.has_pol = 1
    assign_pol(pol_before, d_new, k, kp, &E.rng, pb.pol)
    pb.has_pol = 1
    pa.awaiting = 0
    pb.awaiting = 0
    E.consumed = 1
    E.has_pending = 0

cdef void release_pending(event_t* E) nogil:
    if not E.has_pending:
        return
    cdef pending_t* f = &E.pend
    cdef photon_t* pa = &E.g[f.pid - 1]
    cdef photon_t* pb = &E.g[2 - f.pid]
    assign_pol(f.pol_before, f.d_after, f.k_before, f.k_after, &E.rng, pa.pol)
    pa.has_pol = 1
    pa.awaiting = 0
    pb.awaiting = 0
    E.consumed = 1
    E.has_pending = 0

cdef int scatter(world_t* W, event_t* E, int pid, double mu, int intermediate,
                 double* phi_ph_out, double* pol_out, int* has_pol_out) nogil:
    """Pair-state scatter; returns the role."""
    cdef photon_t* ph = &E.g[pid - 1]
    cdef double pol_before[3]
    cdef double d_old[3]
    cdef double k, kp, phi, phi_ph, dphi
    cdef int had_pol = ph.has_pol
    cdef int mode = W.mode
    copy3(ph.pol, pol_before)
    has_pol_out[0] = had_pol
    copy3(pol_before, pol_out)
    if mode == ENT and intermediate and not E.consumed:
        phi = TWO_PI * urand(&E.rng) - M_PI
        apply_scatter(E, ph, mu, phi, pol_before, d_old, &k, &kp, &phi_ph)
        copy3(pol_before, ph.pol)
        transport_vec(E, ph.pol, ph.d)
        phi_ph_out[0] = phi_ph
        return ROLE_INTERMEDIATE
    if (mode == ENT or mode == FD) and not E.consumed:
        if not E.has_pending:
            if mode == FD:
                phi = phi_pol(ph.E, mu, &E.rng, &E.fault)
            else:
                phi = TWO_PI * urand(&E.rng) - M_PI
            apply_scatter(E, ph, mu, phi, pol_before, d_old, &k, &kp, &phi_ph)
            E.pend.pid = pid
            E.pend.mu = mu
            E.pend.k_before = k
            E.pend.k_after = kp
            copy3(d_old, E.pend.d_before)
            copy3(ph.d, E.pend.d_after)
            copy3(pol_before, E.pend.pol_before)
            E.pend.phi_or = local_to_oriented(pid, phi)
            E.has_pending = 1
            ph.has_pol = 0
            ph.awaiting = 1
            phi_ph_out[0] = phi_ph
            return ROLE_FIRST
        dphi = dphi_cond(E.pend.k_before, E.pend.mu, ph.E, mu, &E.rng, &E.fault)
        phi = oriented_to_local(pid, wrap(E.pend.phi_or + dphi))
        apply_scatter(E, ph, mu, phi, pol_before, d_old, &k, &kp, &phi_ph)
        resolve(E, pid, k, kp, d_old, ph.d, pol_before)
        phi_ph_out[0] = phi_ph
        return ROLE_SECOND
    if not had_pol:
        phi = TWO_PI * urand(&E.rng) - M_PI
        apply_scatter(E, ph, mu, phi, ph.fref, d_old, &k, &kp, &phi_ph)
        phi_ph_out[0] = phi_ph
        return ROLE_FREE
    phi = phi_pol(ph.E, mu, &E.rng, &E.fault)
    apply_scatter(E, ph, mu, phi, pol_before, d_old, &k, &kp, &phi_ph)
    assign_pol(pol_before, ph.d, k, kp, &E.rng, ph.pol)
    phi_ph_out[0] = phi_ph
    return ROLE_FREE


# ---------------------------------------------------------------- transport

cdef void add_record(world_t* W, event_t* E, int pid, int vi, const double* p, int kind, double edep,
                     int level, double theta, double phi_lab, double phi_ph, int role,
                     const double* pol, int has_pol) nogil:
    if E.nrec >= MAXREC:
        E.fault = 2
        return
    cdef rec_t* r = &E.rec[E.nrec]
    r.event = E.index
    r.edep = edep
    r.x = p[0]
    r.y = p[1]
    r.z = p[2]
    r.theta = theta
    r.phi_lab = phi_lab
    r.phi_photon = phi_ph
    if has_pol:
        r.pol_x = pol[0]
        r.pol_y = pol[1]
        r.pol_z = pol[2]
    else:
        r.pol_x = NAN
        r.pol_y = NAN
        r.pol_z = NAN
    r.seq = E.nrec
    r.pixel = pixel_of(W, vi, p)
    r.photon = pid
    r.level = level
    r.volume = W.vid[vi]
    r.kind = kind
    r.role = role
    E.nrec += 1

cdef void escape(event_t* E, int pid) nogil:
    cdef photon_t* ph = &E.g[pid - 1]
    ph.alive = 0
    ph.escaped = 1
    ph.esc_e = ph.E

cdef int compton(world_t* W, event_t* E, int pid, int vi, const double* p, double mu) nogil:
    cdef photon_t* ph = &E.g[pid - 1]
    cdef int level = ph.level
    cdef int intermediate = 0
    cdef double phi_ph
    cdef double pol[3]
    cdef int has_pol
    if W.mode == ENT:
        if W.sphere:
            intermediate = W.sphere_ics and pid == 2 and level == 0
        else:
            intermediate = W.vid[vi] == 2
    cdef double k = ph.E
    cdef int role = scatter(W, E, pid, mu, intermediate, &phi_ph, pol, &has_pol)
    add_record(W, E, pid, vi, p, 0, k - ph.E, level, acos(mu), atan2(ph.d[1], ph.d[0]),
               phi_ph, role, pol, has_pol)
    return role

cdef int next_hit(world_t* W, event_t* E, photon_t* ph, int* vi_out, double* p_out,
                  double* mpe_out, double* mco_out) nogil:
    cdef double t0s[MAXVOL]
    cdef double t1s[MAXVOL]
    cdef int idx[MAXVOL]
    cdef int n = 0
    cdef int i, j, ti
    cdef double a, b, tt0, tt1, mpe, mco, mt, s, t
    for i in range(W.nvol):
        if not ray_vol(W, i, ph.pos, ph.d, &a, &b):
            continue
        if b <= a:
            continue
        # stable insertion by entry distance
        j = n
        while j > 0 and t0s[j - 1] > a:
            t0s[j] = t0s[j - 1]
            t1s[j] = t1s[j - 1]
            idx[j] = idx[j - 1]
            j -= 1
        t0s[j] = a
        t1s[j] = b
        idx[j] = i
        n += 1
    for j in range(n):
        i = idx[j]
        tt0 = t0s[j]
        tt1 = t1s[j]
        mat_mu(W, W.vmat[i], ph.E, &mpe, &mco)
        mt = mpe + mco
        s = -log(1.0 - urand(&E.rng)) / mt
        if s < tt1 - tt0:
            t = tt0 + s
            p_out[0] = ph.pos[0] + t * ph.d[0]
            p_out[1] = ph.pos[1] + t * ph.d[1]
            p_out[2] = ph.pos[2] + t * ph.d[2]
            vi_out[0] = i
            mpe_out[0] = mpe
            mco_out[0] = mco
            return 1
    return 0

cdef int forced_hit(world_t* W, event_t* E, photon_t* ph, int vi, double* p_out,
                    double* mpe_out, double* mco_out, double* prob) nogil:
    cdef double t0, t1, mpe, mco, mt, p, s, t
    if not ray_vol(W, vi, ph.pos, ph.d, &t0, &t1):
        return 0
    if t1 <= t0:
        return 0
    mat_mu(W, W.vmat[vi], ph.E, &mpe, &mco)
    mt = mpe + mco
    p = 1.0 - exp(-mt * (t1 - t0))
    s = -log(1.0 - urand(&E.rng) * p) / mt
    t = t0 + s
    p_out[0] = ph.pos[0] + t * ph.d[0]
    p_out[1] = ph.pos[1] + t * ph.d[1]
    p_out[2] = ph.pos[2] + t * ph.d[2]
    mpe_out[0] = mpe
    mco_out[0] = mco
    prob[0] = p
    return 1

cdef int step(world_t* W, event_t* E, int pid) nogil:
    cdef photon_t* ph = &E.g[pid - 1]
    cdef int vi = -1
    cdef int got = 0
    cdef double p[3]
    cdef double mpe, mco, prob, mu
    ph.steps += 1
    if ph.steps > MAX_STEPS:
        E.fault = 3
        ph.alive = 0
        return -1
    if W.force_scd and pid == 2 and ph.steps == 1 and W.scd_index >= 0:
        if forced_hit(W, E, ph, W.scd_index, p, &mpe, &mco, &prob):
            E.weight *= prob
            vi = W.scd_index
            got = 1
    if not got:
        got = next_hit(W, E, ph, &vi, p, &mpe, &mco)
    if not got:
        escape(E, pid)
        return -1
    copy3(p, ph.pos)
    if urand(&E.rng) * (mpe + mco) < mpe:
        add_record(W, E, pid, vi, p, 1, ph.E, ph.level, NAN, NAN, NAN, 0, ph.pol, 0)
        ph.E = 0.0
        ph.alive = 0
        return -1
    mu = sample_mu(ph.E, &E.rng, -1.0, 1.0, &E.fault)
    return compton(W, E, pid, vi, p, mu)

cdef void run(world_t* W, event_t* E, int pid, int until_analyzing) nogil:
    cdef int role
    while E.g[pid - 1].alive and not E.fault:
        role = step(W, E, pid)
        if until_analyzing and role > ROLE_INTERMEDIATE:
            return

cdef void forced_step(world_t* W, event_t* E, int pid, double lo, double hi) nogil:
    cdef photon_t* ph = &E.g[pid - 1]
    cdef double p[3]
    cdef double mpe, mco, prob, k, mu
    if not forced_hit(W, E, ph, 0, p, &mpe, &mco, &prob):
        E.fault = 4
        return
    copy3(p, ph.pos)
    k = ph.E
    E.weight *= prob * (mco / (mpe + mco)) * kn_window(k, lo, hi)
    mu = sample_mu(k, &E.rng, lo, hi, &E.fault)
    compton(W, E, pid, 0, p, mu)

cdef void init_event(world_t* W, event_t* E, uint64_t seed, int64_t index) nogil:
    cdef double axis[3]
    cdef double cz, ph, x, st, psi, c, s
    cdef double b1[3]
    cdef double b2[3]
    cdef double e1[3]
    cdef double e2[3]
    cdef int i
    rng_seed(&E.rng, seed, <uint64_t>index, 0)
    E.index = index
    E.consumed = 0
    E.has_pending = 0
    E.degenerate = 0
    E.weight = 1.0
    E.nrec = 0
    E.fault = 0
    if W.isotropic:
        cz = 2.0 * urand(&E.rng) - 1.0
        ph = TWO_PI * urand(&E.rng)
        x = 1.0 - cz * cz
        st = sqrt(x if x > 0.0 else 0.0)
        axis[0] = st * cos(ph)
        axis[1] = st * sin(ph)
        axis[2] = cz
    else:
        axis[0] = 0.0
        axis[1] = 0.0
        axis[2] = 1.0
    copy3(axis, E.axis)
    psi = TWO_PI * urand(&E.rng) - M_PI
    any_perp(axis, b1)
    cross3(axis, b1, b2)
    c = cos(psi)
    s = sin(psi)
    e1[0] = c * b1[0] + s * b2[0]
    e1[1] = c * b1[1] + s * b2[1]
    e1[2] = c * b1[2] + s * b2[2]
    cross3(axis, e1, e2)
    for i in range(2):
        E.g[i].E = 511.0
        E.g[i].level = 0
        E.g[i].pid = i + 1
        E.g[i].alive = 1
        E.g[i].escaped = 0
        E.g[i].esc_e = 0.0
        E.g[i].pos[0] = 0.0
        E.g[i].pos[1] = 0.0
        E.g[i].pos[2] = 0.0
        E.g[i].steps = 0
        E.g[i].awaiting = 0
        copy3(b1, E.g[i].fref)
    E.g[0].d[0] = -axis[0]
    E.g[0].d[1] = -axis[1]
    E.g[0].d[2] = -axis[2]
    copy3(axis, E.g[1].d)
    if W.mode == UNPOL:
        E.consumed = 1
        E.g[0].has_pol = 0
        E.g[1].has_pol = 0
        E.g[0].pol[0] = NAN
        E.g[0].pol[1] = NAN
        E.g[0].pol[2] = NAN
        copy3(E.g[0].pol, E.g[1].pol)
    else:
        E.consumed = 1 if W.mode == SEPARABLE else 0
        E.g[0].has_pol = 1
        E.g[1].has_pol = 1
        copy3(e1, E.g[0].pol)
        copy3(e2, E.g[1].pol)

cdef void simulate(world_t* W, event_t* E) nogil:
    if W.chain != 0:
        forced_step(W, E, 1, W.mu_lo, W.mu_hi)
        if W.chain == 2 and not E.fault:
            forced_step(W, E, 2, W.ics_lo, W.ics_hi)
        if not E.fault:
            forced_step(W, E, 2, W.mu_lo, W.mu_hi)
        release_pending(E)
        escape(E, 1)
        escape(E, 2)
        return
    run(W, E, 1, 1)
    run(W, E, 2, 1)
    release_pending(E)
    run(W, E, 1, 0)
    run(W, E, 2, 0)


# ---------------------------------------------------------------- labels & digitization

cdef int classify(event_t* E) nogil:
    cdef int i, j
    cdef int n1 = 0
    cdef int n2 = 0
    cdef int v1[MAXREC]
    cdef int k1[MAXREC]
    cdef int v2[MAXREC]
    cdef int k2[MAXREC]
    cdef int distinct = 1
    cdef int has0 = 0
    cdef int has1 = 0
    cdef rec_t* r
    if E.nrec == 0:
        return 0
    for i in range(E.nrec):
        r = &E.rec[i]
        if r.volume != 0 and r.volume != 1 and r.volume != 2:
            return 0
        if r.photon == 1:
            v1[n1] = r.volume
            k1[n1] = r.kind
            n1 += 1
        else:
            v2[n2] = r.volume
            k2[n2] = r.kind
            n2 += 1
        if r.volume == 0:
            has0 = 1
        if r.volume == 1:
            has1 = 1
        for j in range(i):
            if E.rec[j].volume == r.volume and E.rec[j].pixel == r.pixel:
                distinct = 0
    cdef int clean1 = n1 == 2 and v1[0] == 1 and k1[0] == 0 and v1[1] == 1 and k1[1] == 1
    if clean1 and distinct:
        if (n2 == 3 and v2[0] == 2 and k2[0] == 0 and v2[1] == 0 and k2[1] == 0
                and v2[2] == 0 and k2[2] == 1):
            return 1
        if n2 == 2 and v2[0] == 0 and k2[0] == 0 and v2[1] == 0 and k2[1] == 1:
            return 2
    if has0 and has1 and not distinct:
        return 3
    return 0

cdef void summary(world_t* W, event_t* E, ev_t* out) nogil:
    cdef double t_ics = NAN, t1 = NAN, t2 = NAN, p1l = NAN, p2l = NAN, p1p = NAN, p2p = NAN
    cdef int n2 = 0
    cdef int i
    cdef rec_t* r
    for i in range(E.nrec):
        r = &E.rec[i]
        if r.kind != 0:
            continue
        if r.photon == 1:
            if isnan(t1) and (W.sphere or r.volume == 1):
                t1 = r.theta
                p1l = r.phi_lab
                p1p = r.phi_photon
            continue
        if W.sphere:
            n2 += 1
            if W.sphere_ics and n2 == 1:
                t_ics = r.theta
            elif (n2 == 2 or not W.sphere_ics) and isnan(t2):
                t2 = r.theta
                p2l = r.phi_lab
                p2p = r.phi_photon
        else:
            if r.volume == 2 and isnan(t_ics):
                t_ics = r.theta
            elif r.volume == 0 and isnan(t2):
                t2 = r.theta
                p2l = r.phi_lab
                p2p = r.phi_photon
    if W.sphere and not W.sphere_ics:
        t_ics = 0.0
    out.t_ics = t_ics
    out.t1 = t1
    out.t2 = t2
    out.p1_lab = p1l
    out.p2_lab = p2l
    out.p1_ph = p1p
    out.p2_ph = p2p

cdef int vol_index(world_t* W, int vid) nogil:
    cdef int i
    for i in range(W.nvol):
        if W.vid[i] == vid:
            return i
    return -1

cdef int digitize(world_t* W, event_t* E, uint64_t seed, hit_t* hits, int* n0, int* n1) nogil:
    cdef int keys_v[MAXREC]
    cdef int keys_p[MAXREC]
    cdef double sums[MAXREC]
    cdef int nk = 0
    cdef int i, j, found, vi, row, col
    cdef rec_t* r
    cdef rng_t rng
    cdef double e, es, frac, sigma, x
    cdef int nh = 0
    n0[0] = 0
    n1[0] = 0
    for i in range(E.nrec):
        r = &E.rec[i]
        if r.volume != 0 and r.volume != 1 and r.volume != 2:
            continue
        found = -1
        for j in range(nk):
            if keys_v[j] == r.volume and keys_p[j] == r.pixel:
                found = j
                break
        if found < 0:
            keys_v[nk] = r.volume
            keys_p[nk] = r.pixel
            sums[nk] = 0.0
            found = nk
            nk += 1
        sums[found] += r.edep
    rng_seed(&rng, seed, <uint64_t>E.index, 1)
    cdef double kept[MAXREC]
    cdef int ok[MAXREC]
    for j in range(nk):
        e = sums[j]
        frac = W.frac[keys_v[j]]
        if frac == 0.0:
            es = e
        else:
            sigma = frac * sqrt(MASS * e) / 2.35482
            x = e + sigma * nrand(&rng)
            es = x if x > 0.0 else 0.0
        kept[j] = es
        ok[j] = not (es < W.threshold)
    # output order: SCD, DM0, DM1 (each in order of first deposit)
    cdef int g
    cdef int order[3]
    order[0] = 2
    order[1] = 0
    order[2] = 1
    for g in range(3):
        for j in range(nk):
            if not ok[j] or keys_v[j] != order[g]:
                continue
            hits[nh].event = E.index
            hits[nh].energy = kept[j]
            hits[nh].pixel = keys_p[j]
            hits[nh].volume = keys_v[j]
            hits[nh].u = 0.0
            hits[nh].v = 0.0
            if keys_v[j] != 2:
                vi = vol_index(W, keys_v[j])
                row = keys_p[j] // W.npu[vi]
                col = keys_p[j] - row * W.npu[vi]
                hits[nh].u = -W.half[vi][0] + (col + 0.5) * W.pitch[vi]
                hits[nh].v = -W.half[vi][1] + (row + 0.5) * W.pitch[vi]
            if keys_v[j] == 0:
                n0[0] += 1
            elif keys_v[j] == 1:
                n1[0] += 1
            nh += 1
    return nh


# ---------------------------------------------------------------- buffers & entry points

cdef struct growbuf:
    char* data
    Py_ssize_t n
    Py_ssize_t cap
    Py_ssize_t item

cdef int buf_reserve(growbuf* b, Py_ssize_t extra) nogil:
    cdef Py_ssize_t cap
    cdef char* p
    if b.n + extra <= b.cap:
        return 0
    cap = b.cap * 2 if b.cap > 0 else 1024
    while cap < b.n + extra:
        cap *= 2
    p = <char*>realloc(b.data, cap * b.item)
    if p == NULL:
        return -1
    # zero the new tail so struct padding is deterministic
    memset(p + b.cap * b.item, 0, (cap - b.cap) * b.item)
    b.data = p
    b.cap = cap
    return 0

cdef object buf_to_array(growbuf* b, object dtype):
    arr = np.empty(b.n, dtype=dtype)
    cdef cnp.ndarray a = arr
    if b.n:
        memcpy(cnp.PyArray_DATA(a), b.data, b.n * b.item)
    return arr


def layout_sizes():
    return sizeof(rec_t), sizeof(ev_t), sizeof(hit_t)


cdef void fill_world(world_t* W, dict a):
    cdef int i, j
    cdef int n = len(a["vid"])
    if n > MAXVOL:
        raise ValueError("too many volumes")
    W.nvol = n
    W.scd_index = -1
    for i in range(n):
        W.vtype[i] = a["vtype"][i]
        W.vid[i] = a["vid"][i]
        if W.vid[i] == 2:
            W.scd_index = i
        for j in range(3):
            W.center[i][j] = a["center"][i, j]
            W.u[i][j] = a["axes"][i, 0, j]
            W.v[i][j] = a["axes"][i, 1, j]
            W.w[i][j] = a["axes"][i, 2, j]
            W.half[i][j] = a["half"][i, j]
        W.radius[i] = a["radius"][i]
        W.vmat[i] = a["vmat"][i]
        W.npu[i] = a["npu"][i]
        W.npv[i] = a["npv"][i]
        W.pitch[i] = a["pitch"][i]
    for j in range(4):
        W.frac[j] = a["frac"][j]
    sc = a["scalars"]
    W.mu_lo = sc[0]
    W.mu_hi = sc[1]
    W.ics_lo = sc[2]
    W.ics_hi = sc[3]
    W.threshold = sc[4]
    fl = a["flags"]
    W.mode = fl[0]
    W.sphere = fl[1]
    W.sphere_ics = fl[2]
    W.chain = fl[3]
    W.force_scd = fl[4]
    W.isotropic = fl[5]
    W.keep = fl[6]
    W.digitize = fl[7]


def simulate_batch(params, Py_ssize_t start, Py_ssize_t count):
    """Simulate events ``start .. start+count-1``; same contract as the Python backend."""
    cdef world_t W
    a = params.arrays
    fill_world(&W, a)
    cdef cnp.ndarray me = a["mat_e"]
    cdef cnp.ndarray mle = a["mat_le"]
    cdef cnp.ndarray mpe = a["mat_pe"]
    cdef cnp.ndarray mco = a["mat_co"]
    cdef cnp.ndarray moff = a["mat_off"]
    W.me = <const double*>cnp.PyArray_DATA(me)
    W.mle = <const double*>cnp.PyArray_DATA(mle)
    W.mpe = <const double*>cnp.PyArray_DATA(mpe)
    W.mco = <const double*>cnp.PyArray_DATA(mco)
    W.moff = <const int*>cnp.PyArray_DATA(moff)
    cdef uint64_t seed = <uint64_t>(int(params.seed) & 0xFFFFFFFFFFFFFFFF)
    cdef event_t* E = <event_t*>calloc(1, sizeof(event_t))
    cdef hit_t* hbuf = <hit_t*>calloc(MAXREC, sizeof(hit_t))
    cdef growbuf rb, eb, hb
    rb.data = NULL; rb.n = 0; rb.cap = 0; rb.item = sizeof(rec_t)
    eb.data = NULL; eb.n = 0; eb.cap = 0; eb.item = sizeof(ev_t)
    hb.data = NULL; hb.n = 0; hb.cap = 0; hb.item = sizeof(hit_t)
    cdef Py_ssize_t i
    cdef int nh, n0, n1, fault = 0, oom = 0
    cdef int64_t bad = -1
    cdef ev_t* ev
    try:
        with nogil:
            for i in range(start, start + count):
                init_event(&W, E, seed, i)
                simulate(&W, E)
                if E.fault:
                    fault = E.fault
                    bad = i
                    break
                nh = 0
                n0 = 0
                n1 = 0
                if not W.sphere and W.digitize:
                    nh = digitize(&W, E, seed, hbuf, &n0, &n1)
                if W.keep == 1 and nh == 0:
                    continue
                if W.keep == 2 and not (n0 == 2 and n1 == 2):
                    continue
                if buf_reserve(&eb, 1) or buf_reserve(&rb, E.nrec) or buf_reserve(&hb, nh):
                    oom = 1
                    break
                ev = (<ev_t*>eb.data) + eb.n
                ev.event = i
                ev.weight = E.weight
                ev.esc_e1 = E.g[0].esc_e
                ev.esc_e2 = E.g[1].esc_e
                summary(&W, E, ev)
                ev.n_records = E.nrec
                ev.n_hits = nh
                ev.degenerate = E.degenerate
                ev.label = classify(E)
                ev.escaped1 = E.g[0].escaped
                ev.escaped2 = E.g[1].escaped
                eb.n += 1
                if W.keep == 3:
                    continue
                memcpy((<rec_t*>rb.data) + rb.n, E.rec, E.nrec * sizeof(rec_t))
                rb.n += E.nrec
                memcpy((<hit_t*>hb.data) + hb.n, hbuf, nh * sizeof(hit_t))
                hb.n += nh
        if oom:
            raise MemoryError("kernel output buffers")
        if fault:
            raise SamplerFault(f"event {bad}: kernel fault code {fault}")
        return {"records": buf_to_array(&rb, RECORD_DTYPE),
                "events": buf_to_array(&eb, EVENT_DTYPE),
                "hits": buf_to_array(&hb, HIT_DTYPE)}
    finally:
        free(E)
        free(hbuf)
        free(rb.data)
        free(eb.data)
        free(hb.data)


def sample_theta_batch(double k, Py_ssize_t n, seed):
    cdef rng_t r
    cdef int fault = 0
    cdef Py_ssize_t i
    out = np.empty(n)
    cdef double[::1] o = out
    rng_seed(&r, <uint64_t>(int(seed) & 0xFFFFFFFFFFFFFFFF), 0, 2)
    with nogil:
        for i in range(n):
            o[i] = acos(sample_mu(k, &r, -1.0, 1.0, &fault))
    if fault:
        raise SamplerFault("Klein-Nishina rejection loop exhausted")
    return out


def sample_phi_batch(double k, double theta, Py_ssize_t n, seed):
    cdef rng_t r
    cdef int fault = 0
    cdef Py_ssize_t i
    cdef double mu = cos(theta)
    out = np.empty(n)
    cdef double[::1] o = out
    rng_seed(&r, <uint64_t>(int(seed) & 0xFFFFFFFFFFFFFFFF), 0, 2)
    with nogil:
        for i in range(n):
            o[i] = phi_pol(k, mu, &r, &fault)
    if fault:
        raise SamplerFault("polarized azimuth rejection loop exhausted")
    return out


def sample_dphi_batch(double k1, double theta1, double k2p, double theta2p, Py_ssize_t n, seed):
    cdef rng_t r
    cdef int fault = 0
    cdef Py_ssize_t i
    cdef double m1 = cos(theta1)
    cdef double m2 = cos(theta2p)
    out = np.empty(n)
    cdef double[::1] o = out
    rng_seed(&r, <uint64_t>(int(seed) & 0xFFFFFFFFFFFFFFFF), 0, 2)
    with nogil:
        for i in range(n):
            o[i] = dphi_cond(k1, m1, k2p, m2, &r, &fault)
    if fault:
        raise SamplerFault("conditional Delta-phi rejection loop exhausted")
    return out
