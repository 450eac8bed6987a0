"""Hot numerical kernels with a numba path and a pure-numpy fallback.

Both paths implement the same algorithms; the numba path is used when numba
imports cleanly and the environment variable ``NOON_FARADAY_NO_NUMBA`` is not
set to a truthy value. ``BACKEND`` reports the active choice.

Kernels
-------
faddeeva
    Faddeeva function w(z) for Im z >= 0 (Weideman rational expansion, N=40).
single_photon_fi
    Fisher information and scattering of a batch of single-photon
    (input, projective analyzer) configurations through a circularly
    diagonal channel, from transmissions sampled at B-h, B, B+h. The
    derivative is a central difference of the transmissions, propagated
    exactly through the probabilities.
pair_residuals
    Weighted residuals of a coincidence-count model that is linear in the
    (unnormalized) two-photon density matrix.
"""

import os

import numpy as np

_FLAG = os.environ.get("NOON_FARADAY_NO_NUMBA", "").strip().lower()
_DISABLED = _FLAG not in ("", "0", "false", "no")

try:
    if _DISABLED:
        raise ImportError
    import numba

    HAVE_NUMBA = True
except ImportError:
    numba = None
    HAVE_NUMBA = False

BACKEND = "numba" if HAVE_NUMBA else "numpy"

PROB_FLOOR = 1e-12


def _weideman_coefficients(n_terms):
    m = 2 * n_terms
    k = np.arange(-m + 1, m)
    scale = np.sqrt(n_terms / np.sqrt(2.0))
    t = scale * np.tan(k * np.pi / m / 2.0)
    f = np.concatenate([[0.0], np.exp(-(t**2)) * (scale**2 + t**2)])
    a = np.real(np.fft.fft(np.fft.fftshift(f))) / (2 * m)
    return np.ascontiguousarray(a[1 : n_terms + 1][::-1]), float(scale)


_WD_COEF, _WD_L = _weideman_coefficients(40)
_INV_SQRT_PI = 1.0 / np.sqrt(np.pi)


# ---------------------------------------------------------------------------
# numpy implementations
# ---------------------------------------------------------------------------


def faddeeva_numpy(z):
    z = np.asarray(z, dtype=np.complex128)
    den = _WD_L - 1j * z
    zz = (_WD_L + 1j * z) / den
    p = np.zeros_like(zz)
    for c in _WD_COEF:
        p = p * zz + c
    return 2.0 * p / den**2 + _INV_SQRT_PI / den


def _analyzer_amplitudes_numpy(angles, tp, tm):
    a, b, c, d = angles[:, 0], angles[:, 1], angles[:, 2], angles[:, 3]
    amp_p = tp * np.cos(0.5 * a)
    amp_m = tm * np.exp(1j * b) * np.sin(0.5 * a)
    ph = np.exp(-1j * d)
    u = np.cos(0.5 * c) * amp_p + ph * np.sin(0.5 * c) * amp_m
    v = np.sin(0.5 * c) * amp_p - ph * np.cos(0.5 * c) * amp_m
    return u, v


def _fi_term_numpy(p, dp, q):
    """dp^2/p, or its zero-probability limit 4 q (q = |d amplitude|^2 weight).

    Cauchy-Schwarz gives dp^2 <= 4 p q exactly, so the ratio is clipped at
    4 q; near p ~ 1e-12 rounding in p would otherwise leak into the sum.
    """
    low = p < PROB_FLOOR
    safe = np.where(low, 1.0, p)
    return np.where(low, 4.0 * q, np.minimum(dp * dp / safe, 4.0 * q))


def single_photon_fi_numpy(angles, t_plus, t_minus, step, s_plus, s_minus, include_noclick=False):
    """Batch FI and scattering; see module docstring.

    ``t_plus``/``t_minus`` hold transmissions at (B-h, B, B+h). The central
    difference is taken on the transmissions and pushed through the
    (linear) analyzer amplitudes, so dP = 2 Re(conj(u) du) stays accurate at
    fringe zeros.
    """
    angles = np.atleast_2d(np.asarray(angles, dtype=np.float64))
    dtp = (t_plus[2] - t_plus[0]) / (2.0 * step)
    dtm = (t_minus[2] - t_minus[0]) / (2.0 * step)
    u, v = _analyzer_amplitudes_numpy(angles, t_plus[1], t_minus[1])
    du, dv = _analyzer_amplitudes_numpy(angles, dtp, dtm)
    pu, pv = np.abs(u) ** 2, np.abs(v) ** 2
    dpu, dpv = 2.0 * np.real(np.conj(u) * du), 2.0 * np.real(np.conj(v) * dv)
    fi = _fi_term_numpy(pu, dpu, np.abs(du) ** 2) + _fi_term_numpy(pv, dpv, np.abs(dv) ** 2)
    if include_noclick:
        pm = 1.0 - pu - pv
        dpm = -dpu - dpv
        fi = fi + np.where(pm < PROB_FLOOR, 0.0, dpm * dpm / np.where(pm < PROB_FLOOR, 1.0, pm))
    w_plus = np.cos(0.5 * angles[:, 0]) ** 2
    scat = w_plus * s_plus + (1.0 - w_plus) * s_minus
    return fi, scat


def pair_residuals_numpy(params, kmat, counts, t_int, sqrt_w, scale):
    g = _lower_from_params_numpy(params)
    rho = g.conj().T @ g
    probs = np.real(np.einsum("kiab,ab->ki", kmat, rho))
    model = scale * t_int[:, None] * probs
    return ((counts - model) / sqrt_w).ravel()


def _lower_from_params_numpy(params):
    dim = int(round(np.sqrt(len(params))))
    g = np.zeros((dim, dim), dtype=np.complex128)
    g[np.diag_indices(dim)] = params[:dim]
    rows, cols = np.tril_indices(dim, -1)
    n_off = len(rows)
    g[rows, cols] = params[dim : dim + n_off] + 1j * params[dim + n_off : dim + 2 * n_off]
    return g


# ---------------------------------------------------------------------------
# numba implementations
# ---------------------------------------------------------------------------

if HAVE_NUMBA:

    @numba.njit(cache=True, nogil=True)
    def _faddeeva_scalar(z, coef, scale):
        den = scale - 1j * z
        zz = (scale + 1j * z) / den
        p = 0j
        for c in coef:
            p = p * zz + c
        return 2.0 * p / (den * den) + _INV_SQRT_PI / den

    @numba.njit(cache=True, nogil=True)
    def _faddeeva_flat(z, coef, scale, out):
        for i in range(z.size):
            out[i] = _faddeeva_scalar(z[i], coef, scale)

    def faddeeva_numba(z):
        z = np.asarray(z, dtype=np.complex128)
        flat = np.ascontiguousarray(z).ravel()
        out = np.empty_like(flat)
        _faddeeva_flat(flat, _WD_COEF, _WD_L, out)
        return out.reshape(z.shape)

    @numba.njit(cache=True, nogil=True)
    def _fi_term_scalar(p, dp, q):
        if p < PROB_FLOOR:
            return 4.0 * q
        return min(dp * dp / p, 4.0 * q)

    @numba.njit(cache=True, nogil=True)
    def _single_fi_kernel(angles, t_plus, t_minus, step, s_plus, s_minus, include_noclick, fi, scat):
        tp = t_plus[1]
        tm = t_minus[1]
        dtp = (t_plus[2] - t_plus[0]) / (2.0 * step)
        dtm = (t_minus[2] - t_minus[0]) / (2.0 * step)
        for n in range(angles.shape[0]):
            ca = np.cos(0.5 * angles[n, 0])
            sa = np.sin(0.5 * angles[n, 0])
            cc = np.cos(0.5 * angles[n, 2])
            sc = np.sin(0.5 * angles[n, 2])
            eb = np.exp(1j * angles[n, 1])
            ed = np.exp(-1j * angles[n, 3])
            u = cc * tp * ca + ed * sc * tm * eb * sa
            v = sc * tp * ca - ed * cc * tm * eb * sa
            du = cc * dtp * ca + ed * sc * dtm * eb * sa
            dv = sc * dtp * ca - ed * cc * dtm * eb * sa
            pu = u.real * u.real + u.imag * u.imag
            pv = v.real * v.real + v.imag * v.imag
            dpu = 2.0 * (u.real * du.real + u.imag * du.imag)
            dpv = 2.0 * (v.real * dv.real + v.imag * dv.imag)
            total = _fi_term_scalar(pu, dpu, du.real * du.real + du.imag * du.imag)
            total += _fi_term_scalar(pv, dpv, dv.real * dv.real + dv.imag * dv.imag)
            if include_noclick:
                pm = 1.0 - pu - pv
                if pm >= PROB_FLOOR:
                    total += (dpu + dpv) ** 2 / pm
            fi[n] = total
            scat[n] = ca * ca * s_plus + (1.0 - ca * ca) * s_minus

    def single_photon_fi_numba(angles, t_plus, t_minus, step, s_plus, s_minus, include_noclick=False):
        angles = np.ascontiguousarray(np.atleast_2d(np.asarray(angles, dtype=np.float64)))
        fi = np.empty(angles.shape[0])
        scat = np.empty(angles.shape[0])
        _single_fi_kernel(
            angles,
            np.asarray(t_plus, dtype=np.complex128),
            np.asarray(t_minus, dtype=np.complex128),
            float(step),
            float(s_plus),
            float(s_minus),
            bool(include_noclick),
            fi,
            scat,
        )
        return fi, scat

    @numba.njit(cache=True, nogil=True)
    def _pair_residuals_kernel(params, kmat, counts, t_int, sqrt_w, scale, out):
        dim = kmat.shape[2]
        g = np.zeros((dim, dim), dtype=np.complex128)
        for i in range(dim):
            g[i, i] = params[i]
        n_off = dim * (dim - 1) // 2
        idx = 0
        for r in range(1, dim):
            for c in range(r):
                g[r, c] = params[dim + idx] + 1j * params[dim + n_off + idx]
                idx += 1
        rho = np.zeros((dim, dim), dtype=np.complex128)
        for a in range(dim):
            for b in range(dim):
                acc = 0j
                for r in range(dim):
                    acc += np.conj(g[r, a]) * g[r, b]
                rho[a, b] = acc
        n_pts = kmat.shape[0]
        n_out = kmat.shape[1]
        for k in range(n_pts):
            for i in range(n_out):
                acc = 0.0
                for a in range(dim):
                    for b in range(dim):
                        acc += (kmat[k, i, a, b] * rho[a, b]).real
                model = scale * t_int[k] * acc
                out[k * n_out + i] = (counts[k, i] - model) / sqrt_w[k, i]

    def pair_residuals_numba(params, kmat, counts, t_int, sqrt_w, scale):
        out = np.empty(counts.size)
        _pair_residuals_kernel(
            np.asarray(params, dtype=np.float64), kmat, counts, t_int, sqrt_w, float(scale), out
        )
        return out

    faddeeva = faddeeva_numba
    single_photon_fi = single_photon_fi_numba
    pair_residuals = pair_residuals_numba
else:
    faddeeva = faddeeva_numpy
    single_photon_fi = single_photon_fi_numpy
    pair_residuals = pair_residuals_numpy
