"""Polarization states, the lossy Faraday channel and detection probabilities.

Conventions (used everywhere in the package):

* ``|L> = (|H> + i|V>)/sqrt(2)`` is sigma-plus, ``|R> = (|H> - i|V>)/sqrt(2)``
  is sigma-minus. The CIRC basis orders one photon as (+, -); pairs as
  (++, +-, -+, --). The HV basis orders pairs as (HH, HV, VH, VV).
* A Faraday rotation by theta multiplies the sigma+/- amplitudes by
  exp(-/+ i theta), so a cell with coefficients t+/- rotates linear
  polarization by ``0.5 * arg(t- / t+)``.
* ``|N_phi> = (|2_L 0_R> + exp(2i phi)|0_L 2_R>)/sqrt(2)``, i.e.
  ``(|++> + exp(2i phi)|-->)/sqrt(2)`` in the two-mode 4x4 representation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, Optional, Sequence

import numpy as np
from scipy import linalg
from scipy.optimize import curve_fit

HV = "HV"
CIRC = "CIRC"
BASES = (HV, CIRC)

TOL_HERM = 1e-12
TOL_TRACE = 1e-12
TOL_PSD = -1e-10

# columns are |L>, |R> written in (H, V) coordinates
U_CIRC_TO_HV = np.array([[1.0, 1.0], [1.0j, -1.0j]]) / np.sqrt(2.0)
UU_CIRC_TO_HV = np.kron(U_CIRC_TO_HV, U_CIRC_TO_HV)


class StateError(ValueError):
    pass


def _change(mat: np.ndarray, src: str, dst: str) -> np.ndarray:
    if src == dst:
        return mat
    u = U_CIRC_TO_HV if mat.shape[0] == 2 else UU_CIRC_TO_HV
    if src == CIRC and dst == HV:
        return u @ mat @ u.conj().T
    if src == HV and dst == CIRC:
        return u.conj().T @ mat @ u
    raise StateError(f"unknown basis {src!r} -> {dst!r}")


def _check_density(rho: np.ndarray, dim: int) -> None:
    if rho.shape != (dim, dim):
        raise StateError(f"density matrix must be {dim}x{dim}, got {rho.shape}")
    if np.max(np.abs(rho - rho.conj().T)) > TOL_HERM:
        raise StateError("density matrix is not Hermitian")
    if abs(np.trace(rho) - 1.0) > TOL_TRACE:
        raise StateError(f"trace is {np.trace(rho).real}, expected 1")
    if np.min(np.linalg.eigvalsh(rho)) < TOL_PSD:
        raise StateError("density matrix has a negative eigenvalue")


@dataclass(frozen=True)
class _State:
    rho: np.ndarray
    basis: str = CIRC

    _dim = 0

    def __post_init__(self):
        if self.basis not in BASES:
            raise StateError(f"basis must be one of {BASES}")
        rho = np.array(self.rho, dtype=np.complex128)
        rho.setflags(write=False)
        object.__setattr__(self, "rho", rho)
        _check_density(rho, self._dim)

    def to(self, basis: str):
        return type(self)(_change(self.rho, self.basis, basis), basis)

    @property
    def circ(self) -> np.ndarray:
        return _change(self.rho, self.basis, CIRC)

    @property
    def hv(self) -> np.ndarray:
        return _change(self.rho, self.basis, HV)

    @property
    def purity(self) -> float:
        return float(np.real(np.trace(self.rho @ self.rho)))


@dataclass(frozen=True)
class TwoPhotonState(_State):
    _dim = 4

    @classmethod
    def pure(cls, vec, basis: str = CIRC) -> "TwoPhotonState":
        vec = np.asarray(vec, dtype=np.complex128)
        vec = vec / np.linalg.norm(vec)
        return cls(np.outer(vec, vec.conj()), basis)


@dataclass(frozen=True)
class SinglePhotonState(_State):
    _dim = 2

    @classmethod
    def pure(cls, vec, basis: str = HV) -> "SinglePhotonState":
        vec = np.asarray(vec, dtype=np.complex128)
        vec = vec / np.linalg.norm(vec)
        return cls(np.outer(vec, vec.conj()), basis)

    @classmethod
    def linear(cls, angle: float) -> "SinglePhotonState":
        """Linear polarization at ``angle`` from H towards V."""
        return cls.pure([np.cos(angle), np.sin(angle)], HV)

    @classmethod
    def from_angles(cls, polar: float, azimuth: float) -> "SinglePhotonState":
        """Pure state cos(polar/2)|+> + exp(i azimuth) sin(polar/2)|->."""
        return cls.pure([np.cos(0.5 * polar), np.exp(1j * azimuth) * np.sin(0.5 * polar)], CIRC)


@dataclass(frozen=True)
class PovmSet:
    elements: Dict[str, np.ndarray]
    basis: str = HV

    def __post_init__(self):
        dims = {np.shape(e) for e in self.elements.values()}
        if len(dims) != 1:
            raise StateError("POVM elements must share one shape")
        total = 0
        for name, e in self.elements.items():
            e = np.asarray(e, dtype=np.complex128)
            if np.min(np.linalg.eigvalsh(0.5 * (e + e.conj().T))) < TOL_PSD:
                raise StateError(f"POVM element {name} is not positive")
            total = total + e
        if np.min(np.linalg.eigvalsh(np.eye(total.shape[0]) - total)) < TOL_PSD:
            raise StateError("POVM elements sum to more than the identity")

    @property
    def names(self):
        return tuple(self.elements)

    def circ(self) -> Dict[str, np.ndarray]:
        return {k: _change(np.asarray(v, complex), self.basis, CIRC) for k, v in self.elements.items()}


PAIR_OUTCOMES = ("HH", "HV", "VV")


def pair_povm() -> PovmSet:
    """Coincidence outcomes HH, HV (either order) and VV."""
    return PovmSet(
        {
            "HH": np.diag([1.0, 0, 0, 0]),
            "HV": np.diag([0, 1.0, 1.0, 0]),
            "VV": np.diag([0, 0, 0, 1.0]),
        },
        HV,
    )


def analyzer_povm(angle: float = 0.0) -> PovmSet:
    """Two-port linear analyzer rotated by ``angle`` (outcomes H', V')."""
    h = np.array([np.cos(angle), np.sin(angle)])
    v = np.array([-np.sin(angle), np.cos(angle)])
    return PovmSet({"H": np.outer(h, h), "V": np.outer(v, v)}, HV)


@dataclass(frozen=True)
class TransferOperator:
    """Diagonal (in CIRC) amplitude operator of the cell for one or two photons."""

    diagonal: np.ndarray

    @classmethod
    def pair(cls, tc) -> "TransferOperator":
        tp, tm = complex(tc.t_plus), complex(tc.t_minus)
        return cls(np.array([tp * tp, tp * tm, tm * tp, tm * tm]))

    @classmethod
    def single(cls, tc) -> "TransferOperator":
        return cls(np.array([complex(tc.t_plus), complex(tc.t_minus)]))

    @property
    def matrix(self) -> np.ndarray:
        return np.diag(self.diagonal)

    def in_basis(self, basis: str) -> np.ndarray:
        return _change(self.matrix, CIRC, basis)


def make_noon_state(phi: float, p: float = 1.0, singlet: float = 0.0) -> TwoPhotonState:
    """NOON state mixed with white noise on the symmetric (triplet) subspace.

    ``p = 1`` gives ``(|2_L 0_R> + exp(2i phi)|0_L 2_R>)/sqrt(2)``. An
    optional ``singlet`` weight is taken out of the noise part to model
    distinguishable photons. NOON fidelity is ``p + (1 - p - singlet)/3``.
    """
    if not 0.0 <= p <= 1.0:
        raise StateError("p must lie in [0, 1]")
    if not 0.0 <= singlet <= 1.0 - p:
        raise StateError("singlet weight must lie in [0, 1 - p]")
    noise = (1.0 - p - singlet) * symmetric_identity() / 3.0
    rho = p * noon_projector(phi) + noise + singlet * np.outer(singlet_vector(), singlet_vector())
    return TwoPhotonState(rho, CIRC)


def noon_fidelity_knob(fidelity: float, singlet: float = 0.0) -> float:
    """Mixing weight p giving the requested NOON fidelity."""
    p = (3.0 * fidelity - 1.0 + singlet) / 2.0
    if not 0.0 <= p <= 1.0 - singlet:
        raise StateError("fidelity not reachable with this singlet weight")
    return p


def noon_vector(phi: float) -> np.ndarray:
    return np.array([1.0, 0, 0, np.exp(2j * phi)]) / np.sqrt(2.0)


def noon_projector(phi: float) -> np.ndarray:
    v = noon_vector(phi)
    return np.outer(v, v.conj())


def singlet_vector() -> np.ndarray:
    """Two-photon polarization singlet in CIRC coordinates."""
    return np.array([0, 1.0, -1.0, 0]) / np.sqrt(2.0)


def symmetric_identity() -> np.ndarray:
    return np.eye(4) - np.outer(singlet_vector(), singlet_vector())


def rotate_input(state, beta: float):
    """Rotate the linear polarization of every photon by ``beta``.

    For a NOON state this maps phi -> phi + 2 beta (up to global phase).
    """
    r = np.array([np.exp(-1j * beta), np.exp(1j * beta)])
    if isinstance(state, TwoPhotonState):
        r = np.kron(r, r)
    rho = r[:, None] * state.circ * r.conj()[None, :]
    return type(state)(rho, CIRC).to(state.basis)


def outcome_probabilities(state: TwoPhotonState, T: TransferOperator, povm: Optional[PovmSet] = None):
    """P_i = Tr[Pi_i T rho T^dagger] for each POVM element."""
    povm = pair_povm() if povm is None else povm
    if T.diagonal.size != state.rho.shape[0]:
        raise StateError("transfer operator and state dimensions differ")
    out_state = T.diagonal[:, None] * state.circ * T.diagonal.conj()[None, :]
    return {k: float(np.real(np.trace(e @ out_state))) for k, e in povm.circ().items()}


def single_probabilities(state: SinglePhotonState, tc, analyzer_angle: float = 0.0):
    """Analyzer probabilities {H', V'} for one photon through the cell."""
    return outcome_probabilities(state, TransferOperator.single(tc), analyzer_povm(analyzer_angle))


def reduced_state(state: TwoPhotonState) -> SinglePhotonState:
    """Single-photon marginal averaged over both photons."""
    r = state.circ.reshape(2, 2, 2, 2)
    first = np.einsum("ajbj->ab", r)
    second = np.einsum("jajb->ab", r)
    return SinglePhotonState(0.5 * (first + second), CIRC)


def pair_kernel(state_circ: np.ndarray, tp, tm, povm: Optional[PovmSet] = None) -> np.ndarray:
    """Vectorized pair probabilities over arrays of t+/-; shape (n, n_outcomes)."""
    povm = pair_povm() if povm is None else povm
    tp = np.atleast_1d(tp)
    tm = np.atleast_1d(tm)
    diag = np.stack([tp * tp, tp * tm, tm * tp, tm * tm], axis=-1)
    elems = np.stack(list(povm.circ().values()))
    out = diag[:, :, None] * state_circ[None] * diag.conj()[:, None, :]
    return np.real(np.einsum("iba,nab->ni", elems, out))


def single_kernel(state_circ: np.ndarray, tp, tm, analyzer_angle: float = 0.0) -> np.ndarray:
    povm = analyzer_povm(analyzer_angle)
    tp = np.atleast_1d(tp)
    tm = np.atleast_1d(tm)
    diag = np.stack([tp, tm], axis=-1)
    elems = np.stack(list(povm.circ().values()))
    out = diag[:, :, None] * state_circ[None] * diag.conj()[:, None, :]
    return np.real(np.einsum("iba,nab->ni", elems, out))


# ---------------------------------------------------------------------------
# channels
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class _Coefficients:
    t_plus: complex
    t_minus: complex
    t85_plus: complex = 1.0
    t85_minus: complex = 1.0
    t87_plus: complex = 1.0
    t87_minus: complex = 1.0

    @property
    def rotation(self) -> float:
        return 0.5 * float(np.angle(self.t_minus / self.t_plus))


class RotationChannel:
    """Lossless channel rotating polarization by ``theta(B)``."""

    def __init__(self, theta: Callable[[float], float]):
        self.theta = theta

    def __call__(self, B: float):
        th = float(self.theta(B))
        return _Coefficients(np.exp(-1j * th), np.exp(1j * th))


class LosslessChannel:
    """Keeps only the phases of another channel's coefficients."""

    def __init__(self, base):
        self.base = base

    def __call__(self, B: float):
        tc = self.base(B)
        unit = lambda t: t / abs(t)  # noqa: E731
        return _Coefficients(
            unit(tc.t_plus), unit(tc.t_minus), unit(tc.t85_plus), unit(tc.t85_minus),
            unit(tc.t87_plus), unit(tc.t87_minus),
        )

    def prefetch(self, fields) -> None:
        if hasattr(self.base, "prefetch"):
            self.base.prefetch(fields)


# ---------------------------------------------------------------------------
# fringes and metrics
# ---------------------------------------------------------------------------


@dataclass
class FringeTable:
    B: np.ndarray
    pair: np.ndarray
    singles: Optional[np.ndarray]
    R0: float
    outcomes: Sequence[str] = PAIR_OUTCOMES
    singles_outcomes: Sequence[str] = ("H", "V")

    @property
    def pair_rates(self) -> np.ndarray:
        return self.R0 * self.pair

    @property
    def singles_rates(self) -> Optional[np.ndarray]:
        # two photons per pair can each reach a singles detector
        return None if self.singles is None else 2.0 * self.R0 * self.singles

    def column(self, name: str) -> np.ndarray:
        if name in self.outcomes:
            return self.pair[:, list(self.outcomes).index(name)]
        if self.singles is not None and name in self.singles_outcomes:
            return self.singles[:, list(self.singles_outcomes).index(name)]
        raise KeyError(name)


def fringe_scan(
    state: TwoPhotonState,
    channel,
    B_grid,
    R0: float = 1.0,
    include_singles: bool = True,
    singles_state: Optional[SinglePhotonState] = None,
) -> FringeTable:
    """Coincidence and singles probabilities over a monotone field grid.

    Singles use the pair's one-photon marginal unless ``singles_state`` is
    given. No background is added.
    """
    B_grid = np.asarray(B_grid, dtype=float)
    if B_grid.size > 1 and not (np.all(np.diff(B_grid) > 0) or np.all(np.diff(B_grid) < 0)):
        raise StateError("B grid must be strictly monotone")
    if hasattr(channel, "prefetch"):
        channel.prefetch(B_grid)
    tcs = [channel(b) for b in B_grid]
    tp = np.array([t.t_plus for t in tcs])
    tm = np.array([t.t_minus for t in tcs])
    pair = pair_kernel(state.circ, tp, tm)
    singles = None
    if include_singles:
        one = reduced_state(state) if singles_state is None else singles_state
        singles = single_kernel(one.circ, tp, tm)
    return FringeTable(B_grid, pair, singles, float(R0))


def visibility(signal) -> float:
    signal = np.asarray(signal, dtype=float)
    hi, lo = signal.max(), signal.min()
    return float((hi - lo) / (hi + lo)) if hi + lo > 0 else 0.0


def fit_fringe_period(x, y) -> float:
    """Period of the best-fit sinusoid ``a + b cos(2 pi x / period + c)``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    span = x[-1] - x[0]
    yc = y - y.mean()
    # coarse start from a dense periodogram, then least squares
    trial = np.linspace(span / 20.0, 4.0 * span, 4000)
    power = [
        np.abs(np.sum(yc * np.exp(-2j * np.pi * x / per))) for per in trial
    ]
    p0 = trial[int(np.argmax(power))]
    phase0 = -np.angle(np.sum(yc * np.exp(-2j * np.pi * x / p0)))

    def model(xx, a, b, per, c):
        return a + b * np.cos(2 * np.pi * xx / per + c)

    popt, _ = curve_fit(model, x, y, p0=[y.mean(), yc.std() * np.sqrt(2), p0, phase0], maxfev=20000)
    return float(abs(popt[2]))


def state_fidelity(rho: np.ndarray, sigma: np.ndarray) -> float:
    """Uhlmann fidelity (Tr sqrt(sqrt(rho) sigma sqrt(rho)))^2."""
    s = linalg.sqrtm(rho)
    inner = linalg.sqrtm(s @ sigma @ s)
    return float(np.real(np.trace(inner)) ** 2)


def state_metrics(state: TwoPhotonState, phi: float) -> Dict[str, float]:
    """Purity, NOON fidelity at ``phi`` and singlet overlap."""
    rho = state.circ
    n = noon_vector(phi)
    s = singlet_vector()
    return {
        "purity": state.purity,
        "noon_fidelity": float(np.real(n.conj() @ rho @ n)),
        "distinguishability": float(np.real(s.conj() @ rho @ s)),
    }


def best_noon_phase(state: TwoPhotonState, n_grid: int = 720) -> float:
    """Phase phi maximizing the NOON fidelity (grid then golden refinement)."""
    from scipy.optimize import minimize_scalar

    grid = np.linspace(0.0, np.pi, n_grid, endpoint=False)
    vals = [state_metrics(state, g)["noon_fidelity"] for g in grid]
    g0 = grid[int(np.argmax(vals))]
    step = np.pi / n_grid
    res = minimize_scalar(
        lambda p: -state_metrics(state, p)["noon_fidelity"],
        bounds=(g0 - step, g0 + step),
        method="bounded",
        options={"xatol": 1e-12},
    )
    return float(np.mod(res.x, np.pi))
