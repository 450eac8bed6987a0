"""Magneto-optical response of a two-isotope rubidium vapor on the D1 line.

Energies are in Hz (E/h), fields in tesla, temperatures in degrees Celsius at
the public surface and kelvin internally, lengths in metres. Polarization
labels follow the photon: ``+`` is sigma-plus (drives m_e = m_g + 1 for a field
along the propagation axis), ``-`` is sigma-minus.
"""

from __future__ import annotations

import dataclasses
import functools
from dataclasses import dataclass, field
from importlib import resources
from typing import Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
import tomli
from scipy import constants as sc
from scipy.integrate import simpson

from . import kernels

GROUND = "5S1/2"
EXCITED = "5P1/2"
MANIFOLDS = (GROUND, EXCITED)

MU_B_HZ = sc.physical_constants["Bohr magneton in Hz/T"][0]
TORR = sc.torr

J_ELECTRON = 0.5


class AtomicModelError(ValueError):
    pass


# ---------------------------------------------------------------------------
# constants
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IsotopeConstants:
    label: int
    nuclear_spin: float
    g_J_ground: float
    g_J_excited: float
    g_I: float
    A_ground: float
    A_excited: float
    d1_frequency: float
    linewidth: float
    mass: float
    reduced_dipole: float
    abundance: float

    def __post_init__(self):
        expected = {85: 2.5, 87: 1.5}
        if self.label in expected and self.nuclear_spin != expected[self.label]:
            raise AtomicModelError(f"Rb{self.label} must have I={expected[self.label]}")
        for name in ("d1_frequency", "linewidth", "mass", "A_ground", "A_excited"):
            if not getattr(self, name) > 0:
                raise AtomicModelError(f"{name} must be positive")
        if not 0.0 <= self.abundance <= 1.0:
            raise AtomicModelError("abundance must lie in [0, 1]")

    @property
    def dim(self) -> int:
        """Size of the |m_J, m_I> product basis of one J=1/2 manifold."""
        return int(round(2 * (2 * self.nuclear_spin + 1)))

    def g_J(self, manifold: str) -> float:
        return self.g_J_ground if manifold == GROUND else self.g_J_excited

    def A(self, manifold: str) -> float:
        return self.A_ground if manifold == GROUND else self.A_excited


DEFAULT_ABUNDANCE = {85: 0.995, 87: 0.005}


@functools.lru_cache(maxsize=None)
def _read_table(path: Optional[str]) -> dict:
    if path is None:
        text = resources.files("noon_faraday").joinpath("data/rb_constants.toml").read_text()
    else:
        with open(path, "r", encoding="utf-8") as fh:
            text = fh.read()
    return tomli.loads(text)


def constants_table(path: Optional[str] = None) -> dict:
    """Raw constants table (value/unit/source entries) as parsed from TOML."""
    return _read_table(path)


def load_isotopes(path: Optional[str] = None, abundances: Optional[Mapping[int, float]] = None):
    """Return ``{85: IsotopeConstants, 87: IsotopeConstants}`` from the table."""
    table = _read_table(path)
    abundances = dict(DEFAULT_ABUNDANCE if abundances is None else abundances)
    out = {}
    for key in ("rb85", "rb87"):
        entry = table[key]
        label = int(entry["label"])
        values = {k: float(v["value"]) for k, v in entry.items() if isinstance(v, dict)}
        out[label] = IsotopeConstants(label=label, abundance=abundances.get(label, 0.0), **values)
    return out


def vapor_pressure_constants(path: Optional[str] = None) -> Dict[str, float]:
    return {k: float(v["value"]) for k, v in _read_table(path)["vapor_pressure"].items()}


# ---------------------------------------------------------------------------
# level structure
# ---------------------------------------------------------------------------


def _spin_matrices(s):
    m = np.arange(s, -s - 1, -1)
    jz = np.diag(m)
    jp = np.zeros((len(m), len(m)))
    for k in range(1, len(m)):
        jp[k - 1, k] = np.sqrt(s * (s + 1) - m[k] * (m[k] + 1))
    return jz, jp, jp.T.copy()


@functools.lru_cache(maxsize=None)
def _operators(nuclear_spin: float):
    jz, jp, jm = _spin_matrices(J_ELECTRON)
    iz, ip, im = _spin_matrices(nuclear_spin)
    one_j = np.eye(2)
    one_i = np.eye(iz.shape[0])
    JZ = np.kron(jz, one_i)
    IZ = np.kron(one_j, iz)
    JdotI = JZ @ IZ + 0.5 * (np.kron(jp, im) + np.kron(jm, ip))
    m_j = np.repeat(np.diag(jz), iz.shape[0])
    m_i = np.tile(np.diag(iz), 2)
    # sigma-plus/minus absorption operators in units of <J||d||J'> (Wigner-Eckart,
    # J = J' = 1/2 so d_q is proportional to the spherical components of J)
    d_plus = np.sqrt(2.0 / 3.0) * np.kron(jp, one_i)
    d_minus = np.sqrt(2.0 / 3.0) * np.kron(jm, one_i)
    d_pi = (2.0 / np.sqrt(3.0)) * JZ
    return JZ, IZ, JdotI, m_j, m_i, d_plus, d_minus, d_pi


def hamiltonian(isotope: IsotopeConstants, manifold: str, B) -> np.ndarray:
    """Hyperfine plus Zeeman Hamiltonian (Hz) in the |m_J, m_I> basis.

    The fine-structure energy is a constant offset per manifold and is carried
    separately (see ``manifold_centroid``). Accepts scalar or array ``B`` and
    returns an array of shape ``B.shape + (dim, dim)``.
    """
    if manifold not in MANIFOLDS:
        raise AtomicModelError(f"unknown manifold {manifold!r}")
    JZ, IZ, JdotI, *_ = _operators(isotope.nuclear_spin)
    B = np.asarray(B, dtype=float)
    zeeman = MU_B_HZ * (isotope.g_J(manifold) * JZ + isotope.g_I * IZ)
    return isotope.A(manifold) * JdotI + B[..., None, None] * zeeman


def manifold_centroid(isotope: IsotopeConstants, manifold: str) -> float:
    return 0.0 if manifold == GROUND else isotope.d1_frequency


@dataclass(frozen=True)
class LevelDiagram:
    """Eigenstates of one manifold at one field.

    ``energies`` are relative to the manifold's hyperfine centroid; add
    ``centroid`` for the absolute value. ``vectors[:, k]`` is the k-th
    eigenvector in the ``basis`` ordering of (m_J, m_I) pairs.
    """

    isotope: int
    manifold: str
    B: float
    energies: np.ndarray
    vectors: np.ndarray
    m_total: np.ndarray
    basis: Tuple[Tuple[float, float], ...]
    centroid: float

    @property
    def absolute_energies(self) -> np.ndarray:
        return self.energies + self.centroid


def _eigensystem(isotope: IsotopeConstants, manifold: str, B, sort: bool = False):
    """Batched diagonalization over a 1-D array of fields.

    The Hamiltonian conserves m_J + m_I, so each m-block is diagonalized on
    its own; this keeps eigenvectors of different m from mixing at crossings.
    Returns energies (nB, d), vectors (nB, d, d) and the m label of each
    eigenvector. Unsorted output is in block order, so labels are the same for
    every field; ``sort=True`` orders each field's levels by energy.
    """
    B = np.atleast_1d(np.asarray(B, dtype=float))
    H = hamiltonian(isotope, manifold, B)
    _, _, _, m_j, m_i, *_ = _operators(isotope.nuclear_spin)
    m_tot = m_j + m_i
    d = H.shape[-1]
    energies = np.empty((B.size, d))
    vectors = np.zeros((B.size, d, d))
    labels = np.empty(d)
    col = 0
    for m in np.unique(m_tot):
        idx = np.flatnonzero(m_tot == m)
        w, v = np.linalg.eigh(H[:, idx[:, None], idx[None, :]])
        k = len(idx)
        energies[:, col : col + k] = w
        vectors[:, idx, col : col + k] = v
        labels[col : col + k] = m
        col += k
    m_labels = np.broadcast_to(labels, energies.shape)
    if sort:
        order = np.argsort(energies, axis=1, kind="stable")
        energies = np.take_along_axis(energies, order, axis=1)
        vectors = np.take_along_axis(vectors, order[:, None, :], axis=2)
        m_labels = labels[order]
    big = np.argmax(np.abs(vectors), axis=1)
    sign = np.sign(np.take_along_axis(vectors, big[:, None, :], axis=1))
    vectors = vectors * sign
    return energies, vectors, m_labels


def diagonalize_levels(isotope: IsotopeConstants, manifold: str, B: float) -> LevelDiagram:
    """Field-dependent eigenstates of the 5S1/2 or 5P1/2 manifold."""
    if manifold not in MANIFOLDS:
        raise AtomicModelError(f"unknown manifold {manifold!r}")
    if not np.isfinite(B) or B < 0:
        raise AtomicModelError("B must be finite and non-negative")
    energies, vectors, m_labels = _eigensystem(isotope, manifold, [B], sort=True)
    _, _, _, m_j, m_i, *_ = _operators(isotope.nuclear_spin)
    return LevelDiagram(
        isotope=isotope.label,
        manifold=manifold,
        B=float(B),
        energies=energies[0],
        vectors=vectors[0],
        m_total=m_labels[0],
        basis=tuple(zip(m_j.tolist(), m_i.tolist())),
        centroid=manifold_centroid(isotope, manifold),
    )


def breit_rabi(isotope: IsotopeConstants, B: float, g_J: Optional[float] = None) -> np.ndarray:
    """Closed-form ground-manifold energies (Hz) for J=1/2, sorted ascending."""
    I = isotope.nuclear_spin
    g_J = isotope.g_J_ground if g_J is None else g_J
    dE = isotope.A_ground * (I + 0.5)
    x = (g_J - isotope.g_I) * MU_B_HZ * B / dE
    out = []
    for m in np.arange(-I - 0.5, I + 1.0):
        base = -dE / (2 * (2 * I + 1)) + isotope.g_I * MU_B_HZ * m * B
        if abs(m) == I + 0.5:
            out.append(base + 0.5 * dE * (1 + np.sign(m) * x))
            continue
        root = np.sqrt(1 + 4 * m * x / (2 * I + 1) + x * x)
        out.append(base + 0.5 * dE * root)
        out.append(base - 0.5 * dE * root)
    return np.sort(np.array(out))


# ---------------------------------------------------------------------------
# transitions
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Transition:
    frequency: float
    sigma_plus: float
    sigma_minus: float
    ground_index: int
    excited_index: int


def _transition_arrays(isotope: IsotopeConstants, B, polarization: str):
    """Frequency offsets from the D1 centroid and strengths, flattened per field.

    Strengths are |<e|d_q|g>|^2 / N_g in units of |<J||d||J'>|^2, i.e. already
    weighted by a uniform ground-state population. Only structurally allowed
    pairs (m_e = m_g + q) are returned. Shapes are (nB, n_pairs).
    """
    eg, vg, mg = _eigensystem(isotope, GROUND, B)
    ee, ve, me = _eigensystem(isotope, EXCITED, B)
    *_, d_plus, d_minus, d_pi = _operators(isotope.nuclear_spin)
    op, q = {"+": (d_plus, 1.0), "-": (d_minus, -1.0), "pi": (d_pi, 0.0)}[polarization]
    amp = np.einsum("bie,ij,bjg->beg", ve, op, vg)
    mask = me[0][:, None] == mg[0][None, :] + q
    n_g = vg.shape[1]
    offsets = ee[:, :, None] - eg[:, None, :]
    strengths = amp**2 / n_g
    return offsets[:, mask], strengths[:, mask], np.argwhere(mask)


def transition_table(isotope: IsotopeConstants, B: float, threshold: float = 1e-14):
    """Ground->excited transitions with non-zero sigma+ or sigma- strength."""
    if not np.isfinite(B) or B < 0:
        raise AtomicModelError("B must be finite and non-negative")
    eg, vg, _ = _eigensystem(isotope, GROUND, [B], sort=True)
    ee, ve, _ = _eigensystem(isotope, EXCITED, [B], sort=True)
    *_, d_plus, d_minus, _ = _operators(isotope.nuclear_spin)
    n_g = vg.shape[1]
    sp = (ve[0].T @ d_plus @ vg[0]) ** 2 / n_g
    sm = (ve[0].T @ d_minus @ vg[0]) ** 2 / n_g
    rows = []
    for e in range(ee.shape[1]):
        for g in range(eg.shape[1]):
            if sp[e, g] > threshold or sm[e, g] > threshold:
                freq = isotope.d1_frequency + ee[0, e] - eg[0, g]
                rows.append(Transition(freq, float(sp[e, g]), float(sm[e, g]), g, e))
    return rows


# ---------------------------------------------------------------------------
# line shape and vapor
# ---------------------------------------------------------------------------


def voigt_profile(detuning, doppler_width: float, natural_width: float):
    """Complex Voigt line shape <1/(delta - k v - i Gamma/2)> over velocities.

    ``detuning`` is the resonance minus the probe frequency (Hz), so the real
    (dispersive) part is positive on the red side. ``doppler_width`` is the
    Gaussian standard deviation (Hz), ``natural_width`` the Lorentzian FWHM
    (Hz). The imaginary part integrates to pi for any widths.
    """
    if doppler_width < 0 or not natural_width > 0:
        raise AtomicModelError("need doppler_width >= 0 and natural_width > 0")
    detuning = np.asarray(detuning, dtype=float)
    if doppler_width == 0:
        return 1.0 / (detuning - 0.5j * natural_width)
    s = np.sqrt(2.0) * doppler_width
    z = (detuning + 0.5j * natural_width) / s
    return 1j * np.sqrt(np.pi) / s * np.conj(kernels.faddeeva(z))


def doppler_width(isotope: IsotopeConstants, temperature_c: float, frequency: float) -> float:
    """Gaussian standard deviation (Hz) of the Doppler shift along the beam."""
    T = temperature_c + sc.zero_Celsius
    return frequency / sc.c * np.sqrt(sc.k * T / isotope.mass)


def vapor_pressure(temperature_c: float) -> float:
    """Saturated Rb vapor pressure (Pa), solid below the melting point."""
    p = vapor_pressure_constants()
    T = temperature_c + sc.zero_Celsius
    if T < p["melting_point"]:
        log_p = p["solid_a"] - p["solid_b"] / T
    else:
        log_p = p["liquid_a"] - p["liquid_b"] / T
    return 10.0**log_p * TORR


def vapor_density(temperature_c: float) -> float:
    """Total Rb number density (m^-3) at saturated vapor pressure."""
    if not 0.0 <= temperature_c <= 150.0:
        raise AtomicModelError("temperature must lie in [0, 150] degC")
    T = temperature_c + sc.zero_Celsius
    return vapor_pressure(temperature_c) / (sc.k * T)


# ---------------------------------------------------------------------------
# cell
# ---------------------------------------------------------------------------


def _default_species():
    iso = load_isotopes()
    return (iso[85], iso[87])


@dataclass(frozen=True)
class CellConfig:
    length: float = 0.075
    temperature: float = 70.0
    species: Tuple[IsotopeConstants, ...] = field(default_factory=_default_species)
    field_drop: float = 0.15
    slices: int = 51
    density_scale: float = 1.0

    def __post_init__(self):
        if not self.length > 0:
            raise AtomicModelError("cell length must be positive")
        if self.slices < 3 or self.slices % 2 == 0:
            raise AtomicModelError("slices must be odd and >= 3")
        if not 0.0 <= self.field_drop < 1.0:
            raise AtomicModelError("field_drop must lie in [0, 1)")
        if not 0.0 <= self.temperature <= 150.0:
            raise AtomicModelError("temperature must lie in [0, 150] degC")
        total = sum(s.abundance for s in self.species)
        if abs(total - 1.0) > 1e-9:
            raise AtomicModelError(f"abundances sum to {total}, expected 1")
        if self.density_scale < 0:
            raise AtomicModelError("density_scale must be non-negative")

    @property
    def labels(self) -> Tuple[int, ...]:
        return tuple(s.label for s in self.species)

    def isotope(self, label: int) -> IsotopeConstants:
        for s in self.species:
            if s.label == label:
                return s
        raise KeyError(label)

    def with_abundances(self, abundances: Mapping[int, float]) -> "CellConfig":
        species = tuple(
            dataclasses.replace(s, abundance=float(abundances[s.label]))
            for s in self.species
            if abundances.get(s.label, 0.0) > 0.0
        )
        return dataclasses.replace(self, species=species)

    def pure_rb85(self) -> "CellConfig":
        """Same cell with the 87Rb contaminant removed (all vapor is 85Rb)."""
        return self.with_abundances({85: 1.0})

    def field_profile(self, B_center):
        """Slice positions z >= 0 (m) and B(z) for each centre value.

        The profile is even in z, so only the half cell [0, L/2] is sampled;
        ``slices`` Simpson nodes cover that half.
        """
        z = np.linspace(0.0, 0.5 * self.length, self.slices)
        shape = 1.0 - self.field_drop * (2.0 * z / self.length) ** 2
        return z, np.multiply.outer(np.asarray(B_center, dtype=float), shape)


def noon_frequency(isotopes: Optional[Mapping[int, IsotopeConstants]] = None) -> float:
    """Frequency (Hz) of the 87Rb D1 F=2 -> F'=1 line at zero field."""
    rb87 = (isotopes or load_isotopes())[87]
    I = rb87.nuclear_spin

    def hfs(A, F, J=0.5):
        return 0.5 * A * (F * (F + 1) - I * (I + 1) - J * (J + 1))

    return rb87.d1_frequency + hfs(rb87.A_excited, 1) - hfs(rb87.A_ground, 2)


def _susceptibility(isotope, density, temperature_c, frequency, B, polarization="+"):
    """chi_q for one isotope; ``B`` (nB,) and ``frequency`` (nf,) -> (nB, nf)."""
    B = np.atleast_1d(np.asarray(B, dtype=float))
    frequency = np.atleast_1d(np.asarray(frequency, dtype=float))
    offsets, strengths, _ = _transition_arrays(isotope, B, polarization)
    sigma = doppler_width(isotope, temperature_c, float(np.mean(frequency)))
    detuning = (isotope.d1_frequency - frequency)[None, None, :] + offsets[:, :, None]
    shape = voigt_profile(detuning, sigma, isotope.linewidth)
    pref = density * isotope.reduced_dipole**2 / (2.0 * np.pi * sc.epsilon_0 * sc.hbar)
    return pref * np.einsum("bj,bjf->bf", strengths, shape)


def index_contributions(config: CellConfig, frequency, B):
    """Per-isotope (n+ - 1, n- - 1) arrays of shape (nB, nf).

    The sigma-minus response at field B is taken as the sigma-plus response at
    -B (mirror symmetry of the Zeeman Hamiltonian), which makes n+ = n- exact
    at B = 0.
    """
    B = np.atleast_1d(np.asarray(B, dtype=float))
    n_total = vapor_density(config.temperature) * config.density_scale
    out = {}
    both = np.concatenate([B, -B])
    for iso in config.species:
        chi = _susceptibility(iso, n_total * iso.abundance, config.temperature, frequency, both)
        out[iso.label] = (0.5 * chi[: B.size], 0.5 * chi[B.size :])
    return out


def complex_index(config: CellConfig, frequency: float, B: float):
    """Complex refractive indices ``{label: (n_plus, n_minus)}`` at one field."""
    if B < 0:
        raise AtomicModelError("B must be non-negative")
    contrib = index_contributions(config, [frequency], [B])
    return {k: (1.0 + p[0, 0], 1.0 + m[0, 0]) for k, (p, m) in contrib.items()}


@dataclass(frozen=True)
class TransferCoefficients:
    t_plus: complex
    t_minus: complex
    t85_plus: complex = 1.0
    t85_minus: complex = 1.0
    t87_plus: complex = 1.0
    t87_minus: complex = 1.0

    @property
    def rotation(self) -> float:
        """Faraday rotation angle (rad), positive for t+ lagging t-."""
        return 0.5 * float(np.angle(self.t_minus / self.t_plus))


def _phase_integrals(config: CellConfig, frequency, B_center):
    """Per isotope and polarization: i k * integral (n - 1) dz, shape (nB, nf)."""
    B_center = np.atleast_1d(np.asarray(B_center, dtype=float))
    frequency = np.atleast_1d(np.asarray(frequency, dtype=float))
    z, prof = config.field_profile(B_center)
    # repeated field values (B = 0, shared grid points) are evaluated once
    fields, inverse = np.unique(prof.ravel(), return_inverse=True)
    contrib = index_contributions(config, frequency, fields)
    k = 2.0 * np.pi * frequency / sc.c
    out = {}
    for label, (dn_p, dn_m) in contrib.items():
        pair = []
        for dn in (dn_p, dn_m):
            dn = dn.reshape(fields.size, frequency.size)[inverse.ravel()]
            dn = dn.reshape(B_center.size, z.size, frequency.size)
            integral = 2.0 * simpson(dn, x=z, axis=1)
            pair.append(1j * k[None, :] * integral)
        out[label] = tuple(pair)
    return out


def cell_transmission(config: CellConfig, frequency: float, B_center: float) -> TransferCoefficients:
    """Amplitude transmission of the cell for sigma+/sigma- light.

    The common vacuum phase is dropped; only the atomic contribution is kept.
    """
    if B_center < 0:
        raise AtomicModelError("B_center must be non-negative")
    grid = cell_transmission_grid(config, frequency, [B_center])
    return TransferCoefficients(**{k: complex(v[0]) for k, v in grid.items()})


def cell_transmission_grid(config: CellConfig, frequency: float, B_centers) -> Dict[str, np.ndarray]:
    """Vectorized ``cell_transmission`` over field centres; dict of arrays."""
    phases = _phase_integrals(config, [frequency], B_centers)
    n = np.atleast_1d(B_centers).size
    out = {"t_plus": np.ones(n, complex), "t_minus": np.ones(n, complex)}
    for label in (85, 87):
        if label in phases:
            tp = np.exp(phases[label][0][:, 0])
            tm = np.exp(phases[label][1][:, 0])
        else:
            tp = tm = np.ones(n, complex)
        out[f"t{label}_plus"] = tp
        out[f"t{label}_minus"] = tm
        out["t_plus"] = out["t_plus"] * tp
        out["t_minus"] = out["t_minus"] * tm
    return out


def transmission_spectrum(config: CellConfig, frequencies, B_center: float):
    """Intensity transmission vs probe frequency for linearly polarized light.

    Returns ``(T, t_plus, t_minus)``; T = (|t+|^2 + |t-|^2) / 2.
    """
    phases = _phase_integrals(config, frequencies, [B_center])
    tp = np.ones(np.size(frequencies), complex)
    tm = np.ones(np.size(frequencies), complex)
    for p, m in phases.values():
        tp = tp * np.exp(p[0])
        tm = tm * np.exp(m[0])
    return 0.5 * (np.abs(tp) ** 2 + np.abs(tm) ** 2), tp, tm


class CellChannel:
    """Transfer coefficients of a configured cell as a function of field.

    Evaluations are memoized per field value, so finite differences around a
    point reuse the centre evaluation.
    """

    def __init__(self, config: CellConfig, frequency: Optional[float] = None):
        self.config = config
        self.frequency = noon_frequency() if frequency is None else float(frequency)
        self._cache: Dict[float, TransferCoefficients] = {}

    def __call__(self, B: float) -> TransferCoefficients:
        key = float(B)
        hit = self._cache.get(key)
        if hit is None:
            hit = cell_transmission(self.config, self.frequency, abs(key))
            if key < 0:
                hit = mirror_coefficients(hit)
            if len(self._cache) > 4096:
                self._cache.clear()
            self._cache[key] = hit
        return hit

    def prefetch(self, fields: Sequence[float]) -> None:
        """Evaluate many fields in one vectorized pass and cache them."""
        fields = [float(b) for b in fields if float(b) not in self._cache]
        if not fields:
            return
        grid = cell_transmission_grid(self.config, self.frequency, np.abs(fields))
        for i, b in enumerate(fields):
            tc = TransferCoefficients(**{k: complex(v[i]) for k, v in grid.items()})
            self._cache[b] = mirror_coefficients(tc) if b < 0 else tc


def mirror_coefficients(tc: TransferCoefficients) -> TransferCoefficients:
    """Coefficients at -B given those at B (sigma+ <-> sigma- swap)."""
    return TransferCoefficients(
        tc.t_minus, tc.t_plus, tc.t85_minus, tc.t85_plus, tc.t87_minus, tc.t87_plus
    )
