"""Coincidence-count simulation and two-photon state reconstruction.

The pair probabilities are linear in the density matrix,
``P_i(B) = Re sum_ab K_iab(B) rho_ab``, so the fit works with a fixed stack
of kernels ``K`` per dataset.

Gauge. Photon exchange commutes with the cell and with the HH/HV/VV
detectors, so coherences between the singlet and the symmetric subspace
never reach the data. The fit is done in the exchange-adapted basis
(|++>, psi+, |-->, psi-) with those coherences fixed at zero:
``A = G^dagger G`` with ``G`` block lower-triangular (3x3 plus 1x1), 10 real
parameters. ``A`` carries the pair flux: ``R0 = Tr A`` and ``rho = A / R0``.
"""

from __future__ import annotations

import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional

import numpy as np
from scipy.optimize import least_squares, minimize

from . import kernels
from .metrology import as_channel, pair_fisher
from .polarimetry import (
    CIRC,
    TwoPhotonState,
    best_noon_phase,
    pair_povm,
    state_fidelity,
    state_metrics,
)

PAIR_COLUMNS = ("N_HH", "N_HV", "N_VV")
SINGLES_COLUMNS = ("N_H", "N_V")
BASE_HEADER = ("B_mT", "t_int_s") + PAIR_COLUMNS
MIN_POINTS = 8
N_PARAMS = 10

_S2 = 1.0 / np.sqrt(2.0)
# columns: exchange-adapted basis vectors in CIRC coordinates
EXCHANGE_BASIS = np.array(
    [
        [1.0, 0, 0, 0],
        [0, _S2, 0, _S2],
        [0, _S2, 0, -_S2],
        [0, 0, 1.0, 0],
    ],
    dtype=complex,
)


class TomographyError(RuntimeError):
    pass


class DatasetFormatError(ValueError):
    def __init__(self, message: str, line: Optional[int] = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


# ---------------------------------------------------------------------------
# dataset
# ---------------------------------------------------------------------------


@dataclass
class CoincidenceDataset:
    B: np.ndarray
    t_int: np.ndarray
    counts: np.ndarray
    singles: Optional[np.ndarray] = None
    temperature: Optional[float] = None
    config: Dict[str, object] = field(default_factory=dict)
    R0: Optional[float] = None
    # field column as read from a file, written back verbatim (T -> mT is not exact)
    B_mT: Optional[np.ndarray] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.B = np.asarray(self.B, dtype=float)
        self.t_int = np.asarray(self.t_int, dtype=float)
        self.counts = np.asarray(self.counts, dtype=float)
        n = self.B.size
        if self.counts.shape != (n, 3) or self.t_int.shape != (n,):
            raise ValueError("counts must be (n, 3) and t_int (n,) for n field points")
        if self.singles is not None:
            self.singles = np.asarray(self.singles, dtype=float)
            if self.singles.shape != (n, 2):
                raise ValueError("singles must be (n, 2)")
            if np.any(self.singles < 0) or not np.all(np.isfinite(self.singles)):
                raise ValueError("singles counts must be finite and non-negative")
        if np.any(self.counts < 0) or not np.all(np.isfinite(self.counts)):
            raise ValueError("counts must be finite and non-negative")
        if np.any(self.t_int <= 0):
            raise ValueError("integration times must be positive")
        if np.unique(self.B).size != n:
            raise ValueError("field values must be distinct")

    def __len__(self):
        return self.B.size

    @property
    def total_counts(self) -> float:
        return float(self.counts.sum())

    def to_csv(self) -> str:
        buf = io.StringIO()
        if self.temperature is not None:
            buf.write(f"# temperature_C={self.temperature!r}\n")
        if self.R0 is not None:
            buf.write(f"# R0_pairs_per_s={self.R0!r}\n")
        cols = list(BASE_HEADER) + (list(SINGLES_COLUMNS) if self.singles is not None else [])
        buf.write(",".join(cols) + "\n")
        mT = self.B * 1e3
        if self.B_mT is not None and np.array_equal(np.asarray(self.B_mT) * 1e-3, self.B):
            mT = self.B_mT
        for k in range(len(self)):
            row = [repr(float(mT[k])), repr(float(self.t_int[k]))]
            vals = list(self.counts[k]) + (list(self.singles[k]) if self.singles is not None else [])
            row += [_fmt_count(v) for v in vals]
            buf.write(",".join(row) + "\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "CoincidenceDataset":
        """Parse the CSV format; problems raise DatasetFormatError with a line number."""
        meta = {}
        header = None
        rows = []
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.strip()
            if not line:
                continue
            if line.startswith("#"):
                body = line[1:].strip()
                if "=" in body:
                    key, _, val = body.partition("=")
                    try:
                        meta[key.strip()] = float(val)
                    except ValueError:
                        raise DatasetFormatError(f"bad metadata value {val.strip()!r}", lineno)
                continue
            cells = [c.strip() for c in line.split(",")]
            if header is None:
                if tuple(cells) not in (BASE_HEADER, BASE_HEADER + SINGLES_COLUMNS):
                    raise DatasetFormatError(
                        "header must be " + ",".join(BASE_HEADER) + "[," + ",".join(SINGLES_COLUMNS) + "]",
                        lineno,
                    )
                header = cells
                continue
            if len(cells) != len(header):
                raise DatasetFormatError(f"expected {len(header)} fields, got {len(cells)}", lineno)
            try:
                vals = [float(c) for c in cells]
            except ValueError as exc:
                raise DatasetFormatError(f"not a number: {exc}", lineno)
            if not all(math.isfinite(v) for v in vals):
                raise DatasetFormatError("non-finite value", lineno)
            if vals[1] <= 0:
                raise DatasetFormatError("integration time must be positive", lineno)
            if any(v < 0 for v in vals[2:]):
                raise DatasetFormatError("counts must be non-negative", lineno)
            if any(r[0] == vals[0] for r, _ in rows):
                raise DatasetFormatError(f"duplicate field value {cells[0]}", lineno)
            rows.append((vals, lineno))
        if header is None:
            raise DatasetFormatError("missing header", None)
        if not rows:
            raise DatasetFormatError("no data rows", None)
        arr = np.array([r for r, _ in rows])
        return cls(
            B=arr[:, 0] * 1e-3,
            t_int=arr[:, 1],
            counts=arr[:, 2:5],
            singles=arr[:, 5:7] if arr.shape[1] == 7 else None,
            temperature=meta.get("temperature_C"),
            R0=meta.get("R0_pairs_per_s"),
            B_mT=arr[:, 0].copy(),
        )

    @classmethod
    def read(cls, path) -> "CoincidenceDataset":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_csv(fh.read())


def _fmt_count(v: float) -> str:
    return str(int(v)) if float(v).is_integer() else repr(float(v))


# ---------------------------------------------------------------------------
# forward model
# ---------------------------------------------------------------------------


def _diag_pairs(tp, tm):
    return np.stack([tp * tp, tp * tm, tm * tp, tm * tm], axis=-1)


def pair_kernels(channel, B) -> np.ndarray:
    """K[k, i, a, b] with P_i(B_k) = Re sum_ab K[k, i, a, b] rho_ab (CIRC basis)."""
    B = np.asarray(B, dtype=float)
    if hasattr(channel, "prefetch"):
        channel.prefetch(B)
    tcs = [channel(b) for b in B]
    d = _diag_pairs(np.array([t.t_plus for t in tcs]), np.array([t.t_minus for t in tcs]))
    elems = np.stack(list(pair_povm().circ().values()))
    # Tr[Pi D rho D^dag] = sum_ab Pi_ba D_a conj(D_b) rho_ab
    return np.einsum("iba,ka,kb->kiab", elems, d, d.conj())


def singles_kernels(channel, B) -> np.ndarray:
    """Kernels for singles counts (either photon reaching an H or V detector)."""
    B = np.asarray(B, dtype=float)
    tcs = [channel(b) for b in B]
    t = np.stack([[t.t_plus for t in tcs], [t.t_minus for t in tcs]], axis=-1)
    u = np.array([[1.0, 1.0], [1.0j, -1.0j]]) / np.sqrt(2.0)
    proj = []
    for vec in (np.array([1.0, 0]), np.array([0, 1.0])):
        p = u.conj().T @ np.outer(vec, vec) @ u
        proj.append(p)
    eye = np.eye(2)
    out = np.zeros((len(B), 2, 4, 4), dtype=complex)
    for k in range(len(B)):
        t1 = np.kron(np.diag(t[k]), eye)
        t2 = np.kron(eye, np.diag(t[k]))
        for j, p in enumerate(proj):
            op = t1.conj().T @ np.kron(p, eye) @ t1 + t2.conj().T @ np.kron(eye, p) @ t2
            out[k, j] = op.T
    return out


def expected_counts(state: TwoPhotonState, channel, B, R0: float, t_int) -> np.ndarray:
    K = pair_kernels(channel, B)
    P = np.real(np.einsum("kiab,ab->ki", K, state.circ))
    return R0 * np.asarray(t_int, dtype=float)[:, None] * P


def simulate_counts(state: TwoPhotonState, channel, B_grid, R0: float, t_int, seed: int = 0,
                    noiseless: bool = False, include_singles: bool = False,
                    temperature: Optional[float] = None) -> CoincidenceDataset:
    """Poisson coincidence counts with means R0 * t_int * P_i(B).

    ``noiseless`` returns the means themselves (float counts).
    """
    if not R0 > 0:
        raise ValueError("R0 must be positive")
    B_grid = np.asarray(B_grid, dtype=float)
    t_int = np.broadcast_to(np.asarray(t_int, dtype=float), B_grid.shape).copy()
    if np.any(t_int <= 0):
        raise ValueError("t_int must be positive")
    lam = expected_counts(state, channel, B_grid, R0, t_int)
    lam_s = None
    if include_singles:
        Ks = singles_kernels(channel, B_grid)
        lam_s = R0 * t_int[:, None] * np.real(np.einsum("kjab,ab->kj", Ks, state.circ))
    if noiseless:
        counts, singles = lam, lam_s
    else:
        rng = np.random.default_rng(seed)
        counts = rng.poisson(lam).astype(float)
        singles = rng.poisson(lam_s).astype(float) if include_singles else None
    return CoincidenceDataset(B_grid, t_int, counts, singles, temperature=temperature, R0=R0)


# ---------------------------------------------------------------------------
# parametrization
# ---------------------------------------------------------------------------

_TRIL = np.tril_indices(3, -1)


def params_to_matrix(params) -> np.ndarray:
    """10 reals -> A = G^dagger G in the exchange-adapted basis (4x4, PSD)."""
    params = np.asarray(params, dtype=float)
    g = np.zeros((4, 4), dtype=complex)
    g[0, 0], g[1, 1], g[2, 2], g[3, 3] = params[:4]
    g[_TRIL] = params[4:7] + 1j * params[7:10]
    return g.conj().T @ g


def matrix_to_params(A: np.ndarray) -> np.ndarray:
    """Inverse of :func:`params_to_matrix` for a PSD matrix with zero exchange coherences."""
    A = 0.5 * (A + A.conj().T)
    sym = A[:3, :3]
    # A = G^dag G with G lower triangular  <=>  flip(A) = L L^dag with L lower
    flip = sym[::-1, ::-1]
    w = np.linalg.eigvalsh(flip)
    jitter = max(0.0, -w.min()) + 1e-15 * max(1.0, abs(w).max())
    L = np.linalg.cholesky(flip + jitter * np.eye(3))
    g = L[::-1, ::-1].conj().T
    phases = np.exp(-1j * np.angle(np.diag(g)))
    g = phases[:, None] * g
    out = np.empty(N_PARAMS)
    out[:3] = np.real(np.diag(g))
    out[3] = math.sqrt(max(A[3, 3].real, 0.0))
    out[4:7] = g[_TRIL].real
    out[7:10] = g[_TRIL].imag
    return out


def exchange_to_circ(A: np.ndarray) -> np.ndarray:
    return EXCHANGE_BASIS @ A @ EXCHANGE_BASIS.conj().T


def circ_to_exchange(rho: np.ndarray) -> np.ndarray:
    return EXCHANGE_BASIS.conj().T @ rho @ EXCHANGE_BASIS


def _full_params(p10):
    # embed into the generic 16-parameter lower-triangular layout of the kernel
    out = np.zeros(16)
    out[:4] = p10[:4]
    # tril(4, -1) order: (1,0) (2,0) (2,1) (3,0) (3,1) (3,2)
    out[4:7] = p10[4:7]
    out[10:13] = p10[7:10]
    return out


class _Objective:
    def __init__(self, kmat_ex, counts, t_int, scale, singles_k=None, singles=None):
        self.kmat = np.ascontiguousarray(kmat_ex)
        self.counts = np.ascontiguousarray(counts)
        self.t_int = np.ascontiguousarray(t_int)
        self.sqrt_w = np.sqrt(np.maximum(self.counts, 1.0))
        self.scale = scale
        self.singles_k = singles_k
        self.singles = singles
        if singles is not None:
            self.sqrt_ws = np.sqrt(np.maximum(singles, 1.0))

    def residuals(self, p10):
        r = kernels.pair_residuals(_full_params(p10), self.kmat, self.counts, self.t_int, self.sqrt_w, self.scale)
        if self.singles is None:
            return r
        rs = kernels.pair_residuals(
            _full_params(p10), self.singles_k, self.singles, self.t_int, self.sqrt_ws, self.scale
        )
        return np.concatenate([r, rs])

    def chi2(self, p10) -> float:
        r = self.residuals(p10)
        return float(r @ r)


def _to_exchange_kernels(K):
    # P = Re sum_cd K_cd rho_cd with rho = V rho_ex V^dag
    V = EXCHANGE_BASIS
    return np.einsum("kicd,ca,db->kiab", K, V, V.conj())


# ---------------------------------------------------------------------------
# reconstruction
# ---------------------------------------------------------------------------


@dataclass
class TomographyResult:
    state: TwoPhotonState
    R0: float
    chi2: float
    residuals: np.ndarray
    params: np.ndarray
    scale: float
    metrics: Dict[str, float]
    phi: float
    restart_chi2: List[float]
    restart_spread: float
    singular_values: np.ndarray
    identifiable: bool
    converged: bool
    fi_band: Optional[Dict[str, float]] = None

    def to_dict(self) -> dict:
        rho = self.state.circ
        return {
            "basis": CIRC,
            "rho_real": rho.real.tolist(),
            "rho_imag": rho.imag.tolist(),
            "R0": self.R0,
            "chi2": self.chi2,
            "n_residuals": int(self.residuals.size),
            "metrics": dict(self.metrics),
            "phi": self.phi,
            "restart_chi2": [float(c) for c in self.restart_chi2],
            "restart_spread": self.restart_spread,
            "worst_direction_sigma": float(1.0 / max(float(np.min(self.singular_values)), 1e-300)),
            "identifiable": self.identifiable,
            "converged": self.converged,
            "fi_band": None if self.fi_band is None else dict(self.fi_band),
        }


def _initial_params(rng, n):
    x = rng.normal(size=N_PARAMS)
    x[:4] = np.abs(x[:4]) + 0.1
    return x / math.sqrt(n)


FLAT_SIGMA = 0.1


def _hermitian_directions():
    # orthonormal real basis of the allowed exchange-adapted matrices:
    # 4 populations and the 3 complex coherences of the symmetric block
    out = []
    for i in range(4):
        E = np.zeros((4, 4), dtype=complex)
        E[i, i] = 1.0
        out.append(E)
    for i, j in ((1, 0), (2, 0), (2, 1)):
        E = np.zeros((4, 4), dtype=complex)
        E[i, j] = E[j, i] = _S2
        out.append(E)
        E = np.zeros((4, 4), dtype=complex)
        E[i, j], E[j, i] = 1j * _S2, -1j * _S2
        out.append(E)
    return out


def _design_singular_values(obj: "_Objective", R0: float) -> np.ndarray:
    """Singular values of the weighted linear map rho -> counts.

    The inverse of each is the 1-sigma error of a unit direction in
    density-matrix space, so it does not depend on the rank of the estimate.
    """
    blocks = [(obj.kmat, obj.sqrt_w)]
    if obj.singles is not None:
        blocks.append((obj.singles_k, obj.sqrt_ws))
    cols = []
    for E in _hermitian_directions():
        parts = []
        for K, sw in blocks:
            P = np.real(np.einsum("kiab,ab->ki", K, E))
            parts.append((R0 * obj.t_int[:, None] * P / sw).ravel())
        cols.append(np.concatenate(parts))
    return np.linalg.svd(np.array(cols).T, compute_uv=False)


def reconstruct(dataset: CoincidenceDataset, config, n_starts: int = 8, seed: int = 0, threads: int = 1,
                use_singles: bool = False, frequency: Optional[float] = None,
                tol: float = 1e-14, max_nfev: int = 4000) -> TomographyResult:
    """Weighted least-squares state reconstruction.

    chi^2 = sum (N - R0 t P(B; rho))^2 / max(N, 1) over physical rho (by
    construction) and R0 > 0. Restarts use independent child seeds and are
    reduced in order, so the result does not depend on ``threads``.
    """
    if len(dataset) < MIN_POINTS:
        raise TomographyError(f"need at least {MIN_POINTS} field points, got {len(dataset)}")
    if n_starts < 1:
        raise ValueError("n_starts must be positive")
    if use_singles and dataset.singles is None:
        raise TomographyError("dataset has no singles counts")
    channel = as_channel(config, frequency)
    K = _to_exchange_kernels(pair_kernels(channel, dataset.B))
    # rough flux from the lossless sum rule, so that parameters are O(1)
    trans = np.real(np.einsum("kiaa->k", K))
    scale = float(dataset.counts.sum() / max(np.sum(dataset.t_int * trans / 4.0), 1e-300))
    scale = scale if scale > 0 else 1.0
    Ks = None
    if use_singles:
        Ks = np.ascontiguousarray(_to_exchange_kernels(singles_kernels(channel, dataset.B)))
    obj = _Objective(K, dataset.counts, dataset.t_int, scale, Ks, dataset.singles if use_singles else None)

    streams = np.random.SeedSequence(seed).spawn(n_starts)
    starts = [_initial_params(np.random.default_rng(s), 4) for s in streams]

    def run(x0):
        return least_squares(obj.residuals, x0, method="trf", xtol=tol, ftol=tol, gtol=tol, max_nfev=max_nfev)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            fits = list(pool.map(run, starts))
    else:
        fits = [run(x) for x in starts]

    chis = [float(2.0 * f.cost) for f in fits]
    best = int(np.argmin(chis))
    fit = fits[best]
    A = params_to_matrix(fit.x)
    R0 = float(np.real(np.trace(A))) * scale
    rho = exchange_to_circ(A / np.real(np.trace(A)))
    rho = 0.5 * (rho + rho.conj().T)
    rho = rho / np.real(np.trace(rho))
    state = TwoPhotonState(rho, CIRC)

    # identifiability: spread among restarts that reach the optimum, and
    # directions in state space the data leave unconstrained
    tol_chi = 1e-6 * max(1.0, chis[best]) + 1e-9
    good = [f for f, c in zip(fits, chis) if c <= chis[best] + tol_chi]
    spread = 0.0
    for f in good:
        Af = params_to_matrix(f.x)
        rf = exchange_to_circ(Af / np.real(np.trace(Af)))
        spread = max(spread, 0.5 * float(np.sum(np.abs(np.linalg.eigvalsh(rf - rho)))))
    sv = _design_singular_values(obj, R0)
    flat = int(np.sum(1.0 / np.maximum(sv, 1e-300) > FLAT_SIGMA))
    identifiable = spread < 1e-3 and flat == 0

    phi = best_noon_phase(state)
    metrics = state_metrics(state, phi)
    return TomographyResult(
        state=state, R0=R0, chi2=chis[best], residuals=fit.fun, params=fit.x, scale=scale,
        metrics=metrics, phi=phi, restart_chi2=chis, restart_spread=spread, singular_values=sv,
        identifiable=identifiable, converged=bool(fit.success),
    )


# ---------------------------------------------------------------------------
# FI error band
# ---------------------------------------------------------------------------


def constrained_extremes(value, chi2, x0, chi2_min: float, delta: float, directions=None,
                         penalty: float = 1e4, rounds: int = 3, maxiter: int = 4000):
    """Smallest and largest ``value(x)`` subject to ``chi2(x) <= chi2_min + delta``.

    Penalty-augmented Nelder-Mead started at ``x0``; the reported extremes
    are the best *feasible* points seen, so the band always contains
    ``value(x0)`` when ``x0`` is feasible. ``directions`` (rows) set the
    initial simplex, typically principal axes of the chi^2 curvature scaled
    to the delta contour.
    """
    x0 = np.asarray(x0, dtype=float)
    v0 = float(value(x0))
    limit = chi2_min + delta + 1e-9 * max(1.0, abs(chi2_min))
    if directions is None:
        directions = 1e-2 * np.eye(x0.size)
    norm = abs(v0) if v0 != 0 else 1.0
    out = {}
    for sense in (-1.0, 1.0):
        best = [v0, x0.copy()]

        def f(x):
            v = float(value(x))
            c = float(chi2(x))
            excess = c - limit
            if excess <= 0 and sense * v > sense * best[0]:
                best[0] = v
                best[1] = np.array(x)
            pen = 0.0 if excess <= 0 else excess / max(delta, 1e-12)
            return -sense * v / norm + penalty * pen * pen + (pen if excess > 0 else 0.0)

        x = x0.copy()
        for r in range(rounds):
            simplex = np.vstack([x, x + directions]) if r == 0 else None
            opts = {"xatol": 1e-10, "fatol": 1e-12, "maxiter": maxiter}
            if simplex is not None:
                opts["initial_simplex"] = simplex
            minimize(f, x, method="Nelder-Mead", options=opts)
            x = best[1].copy()
            if delta <= 0:
                break
        out["max" if sense > 0 else "min"] = best[0]
    return out["min"], out["max"]


def fi_error_band(result: TomographyResult, dataset: CoincidenceDataset, config, B_eval: float,
                  delta: float = 1.0, step: float = 1e-5, frequency: Optional[float] = None,
                  use_singles: bool = False) -> Dict[str, float]:
    """Range of the pair FI at ``B_eval`` over states with chi^2 <= chi^2_min + delta."""
    if delta < 0:
        raise ValueError("delta must be non-negative")
    channel = as_channel(config, frequency)
    K = _to_exchange_kernels(pair_kernels(channel, dataset.B))
    Ks = np.ascontiguousarray(_to_exchange_kernels(singles_kernels(channel, dataset.B))) if use_singles else None
    obj = _Objective(K, dataset.counts, dataset.t_int, result.scale, Ks,
                     dataset.singles if use_singles else None)
    x0 = np.asarray(result.params, dtype=float)
    chi0 = obj.chi2(x0)

    def fi_of(x):
        A = params_to_matrix(x)
        tr = np.real(np.trace(A))
        rho = exchange_to_circ(A / tr)
        rho = 0.5 * (rho + rho.conj().T)
        return pair_fisher(_RawState(rho), channel, B_eval, step).total

    # initial simplex along curvature axes, scaled to the delta contour
    J = np.asarray(result_jacobian(obj, x0))
    H = J.T @ J
    w, V = np.linalg.eigh(H)
    w = np.maximum(w, 1e-12 * max(w.max(), 1e-300))
    dirs = (V * np.sqrt(max(delta, 1e-12) / w)).T
    lo, hi = constrained_extremes(fi_of, obj.chi2, x0, chi0, delta, dirs)
    fi0 = fi_of(x0)
    return {"B_T": float(B_eval), "delta": float(delta), "fi": fi0, "fi_min": lo, "fi_max": hi}


class _RawState:
    """Duck-typed state for hot loops (skips validation of trusted matrices)."""

    def __init__(self, rho):
        self.circ = rho


def result_jacobian(obj: _Objective, x, h: float = 1e-7):
    r0 = obj.residuals(x)
    J = np.empty((r0.size, x.size))
    for j in range(x.size):
        e = np.zeros_like(x)
        e[j] = h * max(1.0, abs(x[j]))
        J[:, j] = (obj.residuals(x + e) - obj.residuals(x - e)) / (2 * e[j])
    return J


def fidelity_to(result: TomographyResult, truth: TwoPhotonState) -> float:
    return state_fidelity(result.state.circ, truth.circ)
