"""Fisher information, scattering damage and the single-photon benchmark.

All fields are in tesla and FI in T^-2. A *channel* is any callable
``channel(B) -> coefficients`` whose result exposes ``t_plus``, ``t_minus``
and the 85Rb factors ``t85_plus``, ``t85_minus`` (see
:class:`noon_faraday.atomic.CellChannel`).
"""

from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional

import numpy as np
from scipy.optimize import minimize, minimize_scalar
from scipy.stats import qmc

from . import kernels
from .atomic import CellChannel, CellConfig
from .polarimetry import (
    LosslessChannel,
    PovmSet,
    SinglePhotonState,
    TwoPhotonState,
    analyzer_povm,
    pair_kernel,
    pair_povm,
    rotate_input,
    single_kernel,
)

DEFAULT_STEP = 1e-5
PROB_FLOOR = kernels.PROB_FLOOR
OBJECTIVES = ("fi", "fi_per_scatter")


class MetrologyError(RuntimeError):
    pass


def as_channel(source, frequency: Optional[float] = None, lossless: bool = False):
    """Accept a CellConfig or an existing channel callable."""
    ch = CellChannel(source, frequency) if isinstance(source, CellConfig) else source
    return LosslessChannel(ch) if lossless else ch


# ---------------------------------------------------------------------------
# Fisher information
# ---------------------------------------------------------------------------


@dataclass
class FisherPoint:
    total: float
    terms: np.ndarray
    probabilities: np.ndarray
    derivatives: np.ndarray


def fisher_information(prob_fn: Callable[[float], np.ndarray], B: float, step: float = DEFAULT_STEP,
                       floor: float = PROB_FLOOR) -> FisherPoint:
    """Classical FI sum_i (dP_i/dB)^2 / P_i by central differences of P.

    Outcomes with P_i below ``floor`` use the one-sided limit
    4 (d sqrt(P_i)/dB)^2, finite at fringe zeros where P ~ (B - B0)^2.
    """
    if not step > 0:
        raise ValueError("step must be positive")
    pm, p0, pp = (np.asarray(prob_fn(b), dtype=float) for b in (B - step, B, B + step))
    if not (np.all(np.isfinite(pm)) and np.all(np.isfinite(p0)) and np.all(np.isfinite(pp))):
        raise MetrologyError(f"non-finite probability near B={B!r}")
    dp = (pp - pm) / (2.0 * step)
    low = p0 < floor
    terms = np.empty_like(p0)
    terms[~low] = dp[~low] ** 2 / p0[~low]
    fwd = np.sqrt(np.maximum(pp[low], 0.0)) - np.sqrt(np.maximum(p0[low], 0.0))
    terms[low] = 4.0 * (fwd / step) ** 2
    return FisherPoint(float(np.sum(terms)), terms, p0, dp)


def _chain_rule_point(P, dP, Q, floor=PROB_FLOOR, noclick=False) -> FisherPoint:
    P = np.asarray(P, dtype=float)
    dP = np.asarray(dP, dtype=float)
    Q = np.asarray(Q, dtype=float)
    if noclick:
        P = np.append(P, 1.0 - P.sum())
        dP = np.append(dP, -dP.sum())
        Q = np.append(Q, 0.0)
    if not (np.all(np.isfinite(P)) and np.all(np.isfinite(dP))):
        raise MetrologyError("non-finite probability or derivative")
    terms = kernels._fi_term_numpy(P, dP, Q)
    if noclick and P[-1] < floor:
        terms[-1] = 0.0
    return FisherPoint(float(np.sum(terms)), terms, P, dP)


def _coefficient_derivatives(channel, B, step):
    tm_, t0, tp_ = channel(B - step), channel(B), channel(B + step)
    t = np.array([t0.t_plus, t0.t_minus], dtype=complex)
    dt = (np.array([tp_.t_plus, tp_.t_minus]) - np.array([tm_.t_plus, tm_.t_minus])) / (2.0 * step)
    return t, dt


def pair_fisher(state: TwoPhotonState, channel, B: float, step: float = DEFAULT_STEP,
                include_noclick: bool = False, povm: Optional[PovmSet] = None) -> FisherPoint:
    """Pair FI with dP_i = 2 Re Tr[Pi_i dT rho T^dagger].

    dT comes from a central difference of t+/- (step ``step``), so the
    derivative of each probability is exact given dt; at P_i = 0 the term
    takes its limit 4 Tr[Pi_i dT rho dT^dagger].
    """
    povm = pair_povm() if povm is None else povm
    (tp, tm), (dtp, dtm) = _coefficient_derivatives(channel, B, step)
    d0 = np.array([tp * tp, tp * tm, tm * tp, tm * tm])
    d1 = np.array([2 * tp * dtp, dtp * tm + tp * dtm, dtm * tp + tm * dtp, 2 * tm * dtm])
    rho = state.circ
    elems = np.stack(list(povm.circ().values()))
    out0 = d0[:, None] * rho * d0.conj()[None, :]
    mixed = d1[:, None] * rho * d0.conj()[None, :]
    out1 = d1[:, None] * rho * d1.conj()[None, :]
    P = np.real(np.einsum("iba,ab->i", elems, out0))
    dP = 2.0 * np.real(np.einsum("iba,ab->i", elems, mixed))
    Q = np.real(np.einsum("iba,ab->i", elems, out1))
    return _chain_rule_point(P, dP, Q, noclick=include_noclick)


def single_fisher(state: SinglePhotonState, channel, B: float, step: float = DEFAULT_STEP,
                  analyzer_angle: float = 0.0, include_noclick: bool = False) -> FisherPoint:
    """Single-photon analogue of :func:`pair_fisher` for a linear analyzer."""
    povm = analyzer_povm(analyzer_angle)
    t, dt = _coefficient_derivatives(channel, B, step)
    rho = state.circ
    elems = np.stack(list(povm.circ().values()))
    P = np.real(np.einsum("iba,ab->i", elems, t[:, None] * rho * t.conj()[None, :]))
    dP = 2.0 * np.real(np.einsum("iba,ab->i", elems, dt[:, None] * rho * t.conj()[None, :]))
    Q = np.real(np.einsum("iba,ab->i", elems, dt[:, None] * rho * dt.conj()[None, :]))
    return _chain_rule_point(P, dP, Q, noclick=include_noclick)


def _with_noclick(p: np.ndarray) -> np.ndarray:
    return np.append(p, 1.0 - p.sum())


def pair_probability_function(state: TwoPhotonState, channel, povm: Optional[PovmSet] = None,
                              include_noclick: bool = False):
    rho = state.circ
    povm = pair_povm() if povm is None else povm

    def prob(B):
        tc = channel(B)
        p = pair_kernel(rho, tc.t_plus, tc.t_minus, povm)[0]
        return _with_noclick(p) if include_noclick else p

    return prob


def single_probability_function(state: SinglePhotonState, channel, analyzer_angle: float = 0.0,
                                include_noclick: bool = False):
    rho = state.circ

    def prob(B):
        tc = channel(B)
        p = single_kernel(rho, tc.t_plus, tc.t_minus, analyzer_angle)[0]
        return _with_noclick(p) if include_noclick else p

    return prob


# ---------------------------------------------------------------------------
# scattering
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScatteringOperator:
    """Diagonal CIRC-basis scattering operator built from the 85Rb factors."""

    s_plus: float
    s_minus: float

    def __post_init__(self):
        for s in (self.s_plus, self.s_minus):
            if not -1e-15 <= s <= 1.0 + 1e-15:
                raise ValueError("single-photon scattering must lie in [0, 1]")

    @classmethod
    def from_coefficients(cls, tc) -> "ScatteringOperator":
        return cls(1.0 - abs(tc.t85_plus) ** 2, 1.0 - abs(tc.t85_minus) ** 2)

    @property
    def single(self) -> np.ndarray:
        return np.array([self.s_plus, self.s_minus])

    @property
    def pair(self) -> np.ndarray:
        s = self.single
        return (s[:, None] + s[None, :]).ravel()


def scattering_mean(state, op: ScatteringOperator) -> float:
    """Mean number of scattering events, Tr[rho Pi_scat] on the pre-cell state."""
    diag = np.real(np.diag(state.circ))
    weights = op.pair if diag.size == 4 else op.single
    return float(np.dot(diag, weights))


# ---------------------------------------------------------------------------
# curves
# ---------------------------------------------------------------------------


@dataclass
class FisherCurve:
    B: np.ndarray
    probabilities: np.ndarray
    derivatives: np.ndarray
    terms: np.ndarray
    fi: np.ndarray
    scattering: np.ndarray
    outcomes: tuple

    @property
    def fi_over_s(self) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.scattering > 0, self.fi / self.scattering, np.inf)


def fisher_curve(state, channel, B_grid, step: float = DEFAULT_STEP, include_noclick: bool = False,
                 analyzer_angle: float = 0.0) -> FisherCurve:
    """FI and scattering of a pair (or single-photon) state over a field grid."""
    B_grid = np.asarray(B_grid, dtype=float)
    if hasattr(channel, "prefetch"):
        channel.prefetch(np.concatenate([B_grid - step, B_grid, B_grid + step]))
    if isinstance(state, TwoPhotonState):
        pts = [pair_fisher(state, channel, b, step, include_noclick) for b in B_grid]
        outcomes = tuple(pair_povm().names)
    else:
        pts = [single_fisher(state, channel, b, step, analyzer_angle, include_noclick) for b in B_grid]
        outcomes = tuple(analyzer_povm(analyzer_angle).names)
    if include_noclick:
        outcomes = outcomes + ("none",)
    scat = np.array([scattering_mean(state, ScatteringOperator.from_coefficients(channel(b))) for b in B_grid])
    return FisherCurve(
        B=B_grid,
        probabilities=np.array([p.probabilities for p in pts]),
        derivatives=np.array([p.derivatives for p in pts]),
        terms=np.array([p.terms for p in pts]),
        fi=np.array([p.total for p in pts]),
        scattering=scat,
        outcomes=outcomes,
    )


# ---------------------------------------------------------------------------
# standard quantum limit
# ---------------------------------------------------------------------------


@dataclass
class SqlResult:
    B: float
    objective: str
    input_angles: np.ndarray
    analyzer_angles: np.ndarray
    fi: float
    scattering: float
    restarts: int
    restart_values: List[float]
    converged: List[bool]
    seed: int

    @property
    def fi_per_scatter(self) -> float:
        return self.fi / self.scattering if self.scattering > 0 else math.inf

    @property
    def value(self) -> float:
        return self.fi if self.objective == "fi" else self.fi_per_scatter

    def to_dict(self) -> dict:
        return {
            "B_T": self.B,
            "objective": self.objective,
            "input_angles": [float(x) for x in self.input_angles],
            "analyzer_angles": [float(x) for x in self.analyzer_angles],
            "fi": self.fi,
            "scattering": self.scattering,
            "fi_per_scatter": None if math.isinf(self.fi_per_scatter) else self.fi_per_scatter,
            "restarts": self.restarts,
            "restart_values": [float(v) for v in self.restart_values],
            "converged": [bool(c) for c in self.converged],
            "seed": self.seed,
        }


class SingleConfigurationFI:
    """FI and scattering of (input angles, analyzer angles) configurations at one B.

    Angles are ``(a, b, c, d)``: input ``cos(a/2)|+> + e^{ib} sin(a/2)|->``
    and an analyzer whose first port projects on the analogous state built
    from ``(c, d)``.
    """

    def __init__(self, channel, B: float, step: float = DEFAULT_STEP, include_noclick: bool = False):
        tcs = [channel(B - step), channel(B), channel(B + step)]
        self.t_plus = np.array([t.t_plus for t in tcs], dtype=complex)
        self.t_minus = np.array([t.t_minus for t in tcs], dtype=complex)
        op = ScatteringOperator.from_coefficients(tcs[1])
        self.s_plus, self.s_minus = op.s_plus, op.s_minus
        self.step = step
        self.include_noclick = include_noclick

    def __call__(self, angles):
        return kernels.single_photon_fi(
            angles, self.t_plus, self.t_minus, self.step, self.s_plus, self.s_minus, self.include_noclick
        )

    def objective(self, angles, objective: str) -> np.ndarray:
        fi, s = self(angles)
        if objective == "fi":
            return fi
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(s > 0, fi / s, np.inf)


def sobol_starts(n: int, seed: int) -> np.ndarray:
    """Scrambled Sobol points mapped to (a, b, c) in [0, pi]x[0, 2pi)x[0, pi]."""
    m = int(math.ceil(math.log2(max(n, 1))))
    pts = qmc.Sobol(d=3, scramble=True, seed=seed).random_base2(m)[:n]
    return pts * np.array([np.pi, 2 * np.pi, np.pi])


def _full_angles(x):
    # only b - d enters the probabilities (the channel is diagonal in CIRC),
    # so the analyzer azimuth is pinned to zero during the search
    x = np.atleast_2d(x)
    return np.column_stack([x, np.zeros(len(x))])


def _local_search(fn, x0, xatol, fatol, maxiter):
    res = minimize(fn, x0, method="Nelder-Mead",
                   options={"xatol": xatol, "fatol": fatol, "maxiter": maxiter, "maxfev": 4 * maxiter})
    return res


def sql_optimize(B: float, channel, objective: str = "fi", n_starts: int = 16, seed: int = 0,
                 step: float = DEFAULT_STEP, include_noclick: bool = False, tol: float = 1e-10,
                 maxiter: int = 20000, threads: int = 1, frequency: Optional[float] = None) -> SqlResult:
    """Best single-photon FI (or FI per scatter) over pure inputs and projective analyzers.

    Multi-start Nelder-Mead from ``n_starts`` scrambled Sobol points. The
    objective is normalized by the best starting value so ``tol`` acts as a
    relative tolerance. Restarts are independent and reduced in start order,
    so results do not depend on ``threads``.
    """
    if objective not in OBJECTIVES:
        raise ValueError(f"objective must be one of {OBJECTIVES}")
    if n_starts < 1:
        raise ValueError("n_starts must be positive")
    channel = as_channel(channel, frequency)
    model = SingleConfigurationFI(channel, B, step, include_noclick)
    starts = sobol_starts(n_starts, seed)
    start_vals = model.objective(_full_angles(starts), objective)
    if np.any(np.isinf(start_vals)):
        raise MetrologyError("scattering vanishes; per-scatter objective is unbounded")
    scale = float(np.max(start_vals))
    if not scale > 0:
        scale = 1.0

    def negative(x):
        return -float(model.objective(_full_angles(x), objective)[0]) / scale

    def run(x0):
        return _local_search(negative, x0, tol, tol, maxiter)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(run, starts))
    else:
        results = [run(x) for x in starts]

    values = [-r.fun * scale for r in results]
    converged = [bool(r.success) for r in results]
    best = int(np.argmax(values))
    if not converged[best]:
        raise MetrologyError(f"SQL optimizer did not converge at B={B}: {results[best].message}")
    x = _canonical_angles(_full_angles(results[best].x)[0])
    fi, s = model(x[None, :])
    return SqlResult(
        B=float(B), objective=objective, input_angles=x[:2], analyzer_angles=x[2:],
        fi=float(fi[0]), scattering=float(s[0]), restarts=n_starts, restart_values=values,
        converged=converged, seed=seed,
    )


def _canonical_angles(x):
    x = np.array(x, dtype=float)
    x[[1, 3]] = np.mod(x[[1, 3]], 2 * np.pi)
    return x


def sql_curve(B_grid, channel, objective: str = "fi", **kwargs) -> List[SqlResult]:
    channel = as_channel(channel, kwargs.pop("frequency", None))
    step = kwargs.get("step", DEFAULT_STEP)
    B_grid = np.asarray(B_grid, dtype=float)
    if hasattr(channel, "prefetch"):
        channel.prefetch(np.concatenate([B_grid - step, B_grid, B_grid + step]))
    return [sql_optimize(b, channel, objective, **kwargs) for b in B_grid]


# ---------------------------------------------------------------------------
# NOON input rotation and advantage ratios
# ---------------------------------------------------------------------------


def _pair_fi_and_s(state, channel, B, step, include_noclick):
    fi = pair_fisher(state, channel, B, step, include_noclick).total
    s = scattering_mean(state, ScatteringOperator.from_coefficients(channel(B)))
    return fi, s


def optimize_input_rotation(state: TwoPhotonState, channel, B: float, objective: str = "fi",
                            step: float = DEFAULT_STEP, include_noclick: bool = False,
                            n_grid: int = 360) -> float:
    """Polarization rotation beta (applied before the cell) maximizing the objective.

    Rotating both photons by beta advances the NOON phase by 2 beta, so
    beta in [0, pi/2) covers every phase. Grid scan, then bounded refinement.
    """
    def value(beta):
        fi, s = _pair_fi_and_s(rotate_input(state, beta), channel, B, step, include_noclick)
        if objective == "fi":
            return fi
        return fi / s if s > 0 else math.inf

    grid = np.linspace(0.0, 0.5 * np.pi, n_grid, endpoint=False)
    vals = np.array([value(g) for g in grid])
    if np.all(np.isinf(vals)):
        return 0.0
    g0 = grid[int(np.argmax(vals))]
    h = grid[1] - grid[0]
    res = minimize_scalar(lambda b: -value(b), bounds=(g0 - h, g0 + h), method="bounded",
                          options={"xatol": 1e-10})
    return float(res.x) if -res.fun >= vals.max() else float(g0)


@dataclass(frozen=True)
class EfficiencyModel:
    eta_det: float = 0.95
    eta_path: float = 0.984

    def __post_init__(self):
        for v in (self.eta_det, self.eta_path):
            if not 0.0 < v <= 1.0:
                raise ValueError("efficiencies must lie in (0, 1]")

    @property
    def eta_ex(self) -> float:
        return self.eta_det * self.eta_path


def apply_extrinsic_efficiency(values: Dict[str, float], model: EfficiencyModel) -> Dict[str, float]:
    """Scale pair FI by eta^2 and single-photon FI by eta, then rebuild the ratios.

    ``values`` needs ``fi_noon``, ``fi_sql`` and optionally ``fis_noon``,
    ``fis_sql`` (FI per scatter). Scattering happens inside the cell and is
    not rescaled.
    """
    eta = model.eta_ex
    out = {"fi_noon": values["fi_noon"] * eta**2, "fi_sql": values["fi_sql"] * eta}
    out["per_photon"] = out["fi_noon"] / (2.0 * out["fi_sql"])
    if values.get("fis_noon") is not None and values.get("fis_sql") is not None:
        out["fis_noon"] = values["fis_noon"] * eta**2
        out["fis_sql"] = values["fis_sql"] * eta
        out["per_scatter"] = out["fis_noon"] / out["fis_sql"]
    return out


@dataclass
class AdvantageReport:
    B: float
    per_photon: float
    per_scatter: Optional[float]
    per_scatter_pure85: Optional[float]
    fi_noon: float
    fi_sql: float
    fis_noon: Optional[float]
    fis_sql: Optional[float]
    fis_noon_pure85: Optional[float]
    fis_sql_pure85: Optional[float]
    rotations: Dict[str, float]
    sql: Dict[str, SqlResult]
    efficiency: EfficiencyModel
    adjusted: Dict[str, float] = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "B_T": self.B,
            "per_photon": self.per_photon,
            "per_scatter": self.per_scatter,
            "per_scatter_pure85": self.per_scatter_pure85,
            "fi_noon": self.fi_noon,
            "fi_sql": self.fi_sql,
            "fis_noon": self.fis_noon,
            "fis_sql": self.fis_sql,
            "fis_noon_pure85": self.fis_noon_pure85,
            "fis_sql_pure85": self.fis_sql_pure85,
            "input_rotations": dict(self.rotations),
            "eta_det": self.efficiency.eta_det,
            "eta_path": self.efficiency.eta_path,
            "eta_ex": self.efficiency.eta_ex,
            "adjusted": dict(self.adjusted),
            "sql": {k: v.to_dict() for k, v in self.sql.items()},
        }
        return out


def advantage_ratios(B: float, config, state: TwoPhotonState, frequency: Optional[float] = None,
                     lossless: bool = False, include_noclick: bool = False, optimize_rotation: bool = True,
                     efficiency: Optional[EfficiencyModel] = None, n_starts: int = 16, seed: int = 0,
                     step: float = DEFAULT_STEP, threads: int = 1, pure85_config=None) -> AdvantageReport:
    """NOON-versus-SQL advantage per photon and per scattered photon.

    ``config`` is a CellConfig (the pure-85Rb variant is derived from it) or
    a channel; with a bare channel, pass ``pure85_config`` explicitly or the
    pure-85Rb ratio is skipped. Each SQL is optimized for its own objective;
    with ``optimize_rotation`` the NOON input polarization is also rotated
    to its best orientation for each objective.
    """
    efficiency = EfficiencyModel() if efficiency is None else efficiency
    channel = as_channel(config, frequency, lossless)
    if isinstance(config, CellConfig) and pure85_config is None:
        pure85_config = config.pure_rb85()
    if hasattr(channel, "prefetch"):
        channel.prefetch([B - step, B, B + step])

    kw = dict(n_starts=n_starts, seed=seed, step=step, include_noclick=include_noclick, threads=threads)

    def noon_value(ch, objective):
        beta = optimize_input_rotation(state, ch, B, objective, step, include_noclick) if optimize_rotation else 0.0
        fi, s = _pair_fi_and_s(rotate_input(state, beta), ch, B, step, include_noclick)
        return beta, fi, s

    beta_fi, fi_noon, _ = noon_value(channel, "fi")
    sql_fi = sql_optimize(B, channel, "fi", **kw)
    rotations = {"fi": beta_fi}
    sql = {"fi": sql_fi}
    per_photon = fi_noon / (2.0 * sql_fi.fi)

    fis_noon = fis_sql = per_scatter = None
    s_probe = ScatteringOperator.from_coefficients(channel(B))
    if s_probe.s_plus > 0 or s_probe.s_minus > 0:
        beta_s, fi_s, s_s = noon_value(channel, "fi_per_scatter")
        rotations["fi_per_scatter"] = beta_s
        sql["fi_per_scatter"] = sql_optimize(B, channel, "fi_per_scatter", **kw)
        fis_noon = fi_s / s_s
        fis_sql = sql["fi_per_scatter"].fi_per_scatter
        per_scatter = fis_noon / fis_sql

    fis_noon85 = fis_sql85 = per_scatter85 = None
    if pure85_config is not None and not lossless:
        ch85 = as_channel(pure85_config, getattr(channel, "frequency", frequency))
        if hasattr(ch85, "prefetch"):
            ch85.prefetch([B - step, B, B + step])
        beta85, fi85, s85 = noon_value(ch85, "fi_per_scatter")
        rotations["fi_per_scatter_pure85"] = beta85
        sql["fi_per_scatter_pure85"] = sql_optimize(B, ch85, "fi_per_scatter", **kw)
        fis_noon85 = fi85 / s85
        fis_sql85 = sql["fi_per_scatter_pure85"].fi_per_scatter
        per_scatter85 = fis_noon85 / fis_sql85

    report = AdvantageReport(
        B=float(B), per_photon=per_photon, per_scatter=per_scatter, per_scatter_pure85=per_scatter85,
        fi_noon=fi_noon, fi_sql=sql_fi.fi, fis_noon=fis_noon, fis_sql=fis_sql,
        fis_noon_pure85=fis_noon85, fis_sql_pure85=fis_sql85, rotations=rotations, sql=sql,
        efficiency=efficiency,
    )
    report.adjusted = apply_extrinsic_efficiency(
        {"fi_noon": fi_noon, "fi_sql": sql_fi.fi, "fis_noon": fis_noon, "fis_sql": fis_sql}, efficiency
    )
    return report


def magnetic_uncertainty(fi, M):
    """Cramer-Rao field uncertainty (fi * M)^-1/2; inf where fi == 0."""
    fi = np.asarray(fi, dtype=float)
    M = np.asarray(M, dtype=float)
    if np.any(fi < 0):
        raise ValueError("Fisher information must be non-negative")
    if np.any(M < 1):
        raise ValueError("M must be at least 1")
    with np.errstate(divide="ignore"):
        out = np.where(fi > 0, 1.0 / np.sqrt(np.where(fi > 0, fi, 1.0) * M), np.inf)
    return float(out) if out.ndim == 0 else out
