"""Differentiable electromagnetic evaluation of traced paths.

Coefficients are computed once at the carrier frequency; the band enters
only through the per-path delay. Material parameters may be plain floats or
``autodiff.Var`` nodes, in which case every output is differentiable with
respect to them.

Conventions:

* Both antennas are isotropic and vertically polarized: the field leaving
  the transmitter is the unit vector in the plane of the z axis and the
  departure direction, perpendicular to the latter (x axis if the ray is
  vertical). The receiver projects onto the same construction for the
  arrival direction.
* At a specular bounce the field is split into the component along
  ``s = k_in x n`` (TE) and along ``p = s x k`` (TM), each scaled by its
  Fresnel coefficient and by ``sqrt(1 - S^2)``; the remainder of the energy
  is the diffuse share.
* A scattered path ends with a Lambertian tap of amplitude
  ``S |Gamma| sqrt(cos(theta_s)/pi) sqrt(rho^2 cos(theta_i)) lambda / (4 pi d1 d2)``
  where ``|Gamma|`` is the polarization-weighted reflection magnitude of the
  incident field, ``d1`` the unfolded distance from the transmitter and ``d2``
  the distance to the receiver. Its phase follows the total path length.
* Diffracted paths contribute nothing.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .paths import InteractionKind, PathSet, PropagationPath
from .scene import MaterialParams

C0 = 299_792_458.0
EPS0 = 8.8541878128e-12

_SPEC = int(InteractionKind.SPECULAR)
_SCAT = int(InteractionKind.SCATTER)
_DIFF = int(InteractionKind.DIFFRACTION)


@dataclass(frozen=True)
class EmConfig:
    center_frequency: float = 8e9
    bandwidth: float = 1.5e9
    num_freq_samples: int = 129
    scatter_cell_size: float = 0.0625  # side of the area a scattered path stands for, metres

    def __post_init__(self):
        if not self.center_frequency > 0:
            raise ValueError("center_frequency must be positive")
        if not self.bandwidth > 0:
            raise ValueError("bandwidth must be positive")
        if self.num_freq_samples < 2:
            raise ValueError("num_freq_samples must be at least 2")
        if not self.scatter_cell_size > 0:
            raise ValueError("scatter_cell_size must be positive")

    @property
    def wavelength(self) -> float:
        return C0 / self.center_frequency

    @property
    def spacing(self) -> float:
        return self.bandwidth / (self.num_freq_samples - 1)

    @property
    def frequencies(self) -> np.ndarray:
        """Absolute sample frequencies, evenly spanning the band around the carrier."""
        return self.center_frequency - self.bandwidth / 2 + self.spacing * np.arange(self.num_freq_samples)

    @property
    def tap_delays(self) -> np.ndarray:
        return np.arange(self.num_freq_samples) / (self.num_freq_samples * self.spacing)


# --------------------------------------------------------------------------- scalar laws


def _wrap(*xs):
    any_var = any(isinstance(x, ad.Var) for x in xs)
    return any_var, [x if isinstance(x, ad.Var) else ad.const(x) for x in xs]


def complex_permittivity(relative_permittivity, conductivity, frequency: float):
    """``eta = eps_r - j sigma / (2 pi f eps0)``; Var in, Var out."""
    if not frequency > 0:
        raise ValueError("frequency must be positive")
    any_var, (eps, sig) = _wrap(relative_permittivity, conductivity)
    out = eps + sig * (-1j / (2 * math.pi * frequency * EPS0))
    return out if any_var else out.value


def fresnel_reflection(eta, cos_theta_i, polarization: str):
    """Fresnel reflection coefficient for ``polarization`` in {"TE", "TM"}."""
    pol = polarization.upper()
    if pol not in ("TE", "TM"):
        raise ValueError("polarization must be 'TE' or 'TM'")
    c = np.asarray(ad.value(cos_theta_i), dtype=np.float64)
    if np.any(c < -1e-12) or np.any(c > 1 + 1e-12):
        raise ValueError("cos_theta_i must lie in [0, 1]")
    any_var, (eta_v, cos_v) = _wrap(eta, cos_theta_i)
    eta_v = eta_v + 0j
    root = ad.sqrt(eta_v - (1.0 - cos_v * cos_v))
    if pol == "TE":
        out = (cos_v - root) / (cos_v + root)
    else:
        out = (eta_v * cos_v - root) / (eta_v * cos_v + root)
    return out if any_var else out.value


# --------------------------------------------------------------------------- geometry


def _unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v / np.where(n > 0, n, 1.0)


def vertical_polarization(k: np.ndarray) -> np.ndarray:
    """Unit vector perpendicular to ``k`` in the plane spanned by z and ``k``."""
    k = np.asarray(k, dtype=np.float64)
    z = np.broadcast_to([0.0, 0.0, 1.0], k.shape)
    u = z - (k * z).sum(-1, keepdims=True) * k
    bad = np.linalg.norm(u, axis=-1) < 1e-9
    if np.any(bad):
        x = np.broadcast_to([1.0, 0.0, 0.0], k.shape)
        ux = x - (k * x).sum(-1, keepdims=True) * k
        u = np.where(bad[..., None], ux, u)
    return _unit(u)


@dataclass
class PathGeometry:
    """Material-independent quantities of a path set, computed once."""

    n: np.ndarray  # (P,)
    kind: np.ndarray  # (P, K)
    material: np.ndarray  # (P, K) clipped to >= 0
    length: np.ndarray  # (P,)
    cos_i: np.ndarray  # (P, K)
    cos_s: np.ndarray  # (P, K) outgoing angle cosine (used by scattering)
    s: np.ndarray  # (P, K, 3)
    p_in: np.ndarray  # (P, K, 3)
    p_out: np.ndarray  # (P, K, 3)
    d_before: np.ndarray  # (P, K) unfolded distance from TX to the interaction
    d_after: np.ndarray  # (P, K) distance from the interaction to the next vertex
    e_tx: np.ndarray  # (P, 3)
    u_rx: np.ndarray  # (P, 3)
    last_kind: np.ndarray  # (P,) kind of the final interaction, -1 for LOS

    @property
    def delays(self) -> np.ndarray:
        return self.length / C0

    def __len__(self):
        return len(self.n)


def path_geometry(paths: PathSet) -> PathGeometry:
    P = len(paths)
    K = max(paths.width, 1)
    ps = paths.widen(K)
    slot = np.arange(K)[None, :] < ps.n[:, None]
    pts = np.where(slot[..., None], ps.point, ps.end[:, None, :])
    verts = np.concatenate([ps.start[:, None], pts, ps.end[:, None]], axis=1)  # (P, K+2, 3)
    seg = np.diff(verts, axis=1)  # (P, K+1, 3)
    seg_len = np.linalg.norm(seg, axis=2)
    dirs = _unit(seg)
    k_in = dirs[:, :-1]
    k_out = dirs[:, 1:]
    normal = _unit(ps.normal)
    # face the normal toward the incoming wave
    flip = (k_in * normal).sum(-1) > 0
    normal = np.where(flip[..., None], -normal, normal)
    cos_i = np.clip(-(k_in * normal).sum(-1), 0.0, 1.0)
    cos_s = np.clip((k_out * normal).sum(-1), 0.0, 1.0)
    s = np.cross(k_in, normal)
    weak = np.linalg.norm(s, axis=-1) < 1e-9
    if np.any(weak):
        # normal incidence: any direction perpendicular to the ray spans the plane
        alt = vertical_polarization(k_in)
        s = np.where(weak[..., None], alt, s)
    s = _unit(s)
    p_in = np.cross(s, k_in)
    p_out = np.cross(s, k_out)
    csum = np.cumsum(seg_len, axis=1)
    d_before = csum[:, :-1]
    d_after = seg_len[:, 1:]
    n = ps.n
    first = dirs[:, 0]
    last = dirs[np.arange(P), n] if P else np.zeros((0, 3))
    last_kind = np.where(n > 0, ps.kind[np.arange(P), np.maximum(n - 1, 0)], -1) if P else np.zeros(0, int)
    cos_i = np.where(slot, cos_i, 1.0)
    return PathGeometry(
        n=n, kind=np.where(slot, ps.kind, -1), material=np.where(slot, np.maximum(ps.material_label, 0), 0),
        length=seg_len.sum(axis=1), cos_i=cos_i, cos_s=np.where(slot, cos_s, 0.0), s=s, p_in=p_in, p_out=p_out,
        d_before=d_before, d_after=d_after, e_tx=vertical_polarization(first), u_rx=vertical_polarization(last),
        last_kind=np.asarray(last_kind, dtype=np.int64),
    )


# --------------------------------------------------------------------------- materials


@dataclass
class MaterialArrays:
    """Per-material parameters as flat arrays or Vars, indexed by dense material label."""

    relative_permittivity: object
    conductivity: object
    scattering_coefficient: object

    @classmethod
    def from_table(cls, table: dict[int, MaterialParams]) -> MaterialArrays:
        if not table:
            return cls(np.zeros(0), np.zeros(0), np.zeros(0))
        n = max(table) + 1
        eps = np.ones(n)
        sig = np.zeros(n)
        sc = np.zeros(n)
        for k, m in table.items():
            eps[k], sig[k], sc[k] = m.relative_permittivity, m.conductivity, m.scattering_coefficient
        return cls(eps, sig, sc)

    def __len__(self):
        return len(ad.value(self.relative_permittivity))


def _check_materials(paths: PathSet, table) -> None:
    if isinstance(table, dict):
        used = set(np.unique(paths.material_label[paths.kind != _DIFF]).tolist()) - {-1} if len(paths) else set()
        missing = sorted(used - set(table))
        if missing:
            raise KeyError(f"unknown material label(s) {missing}")


def _as_arrays(materials) -> MaterialArrays:
    if isinstance(materials, MaterialArrays):
        return materials
    if isinstance(materials, dict):
        return MaterialArrays.from_table(materials)
    raise TypeError("materials must be a label -> MaterialParams map or MaterialArrays")


# --------------------------------------------------------------------------- coefficients


def coefficients_var(geom: PathGeometry, materials: MaterialArrays, config: EmConfig = EmConfig()) -> ad.Var:
    """Complex path coefficients (P,) as a Var differentiable in the material parameters."""
    P = len(geom)
    if P == 0:
        return ad.const(np.zeros(0, complex))
    _, (eps, sig, sc) = _wrap(materials.relative_permittivity, materials.conductivity,
                              materials.scattering_coefficient)
    eta = complex_permittivity(eps, sig, config.center_frequency)
    lam = config.wavelength
    E = ad.const(geom.e_tx.astype(complex))
    K = geom.kind.shape[1]
    scat_amp = None
    for k in range(K):
        spec = geom.kind[:, k] == _SPEC
        scat = geom.kind[:, k] == _SCAT
        if not (spec.any() or scat.any()):
            continue
        m = geom.material[:, k]
        eta_k = ad.take(eta, m)
        S_k = ad.take(sc, m)
        g_te = fresnel_reflection(eta_k, geom.cos_i[:, k], "TE")
        g_tm = fresnel_reflection(eta_k, geom.cos_i[:, k], "TM")
        se = ad.sum(E * geom.s[:, k], axis=1)
        pe = ad.sum(E * geom.p_in[:, k], axis=1)
        if spec.any():
            f = ad.sqrt(1.0 - S_k * S_k)
            e_new = (ad.reshape(f * g_te * se, (P, 1)) * geom.s[:, k]
                     + ad.reshape(f * g_tm * pe, (P, 1)) * geom.p_out[:, k])
            E = ad.where(spec[:, None], e_new, E)
        if scat.any():
            gamma = ad.sqrt(ad.abs2(g_te) * ad.abs2(se) + ad.abs2(g_tm) * ad.abs2(pe) + 1e-300)
            d1 = geom.d_before[:, k]
            d2 = geom.d_after[:, k]
            geo = (np.sqrt(geom.cos_s[:, k] / math.pi) * np.sqrt(config.scatter_cell_size ** 2 * geom.cos_i[:, k])
                   * lam / (4 * math.pi * np.where(scat, d1 * d2, 1.0)))
            amp = S_k * gamma * geo
            scat_amp = amp if scat_amp is None else ad.where(scat, amp, scat_amp)
    phase = np.exp(-2j * math.pi * geom.length / lam)
    spread = lam / (4 * math.pi * geom.length)
    a_spec = ad.sum(E * geom.u_rx, axis=1) * (spread * phase)
    out = a_spec
    if scat_amp is not None:
        out = ad.where(geom.last_kind == _SCAT, scat_amp * phase, out)
    diff = (geom.kind == _DIFF).any(axis=1)
    if diff.any():
        out = ad.where(diff, np.zeros(P, complex), out)
    return out


def path_coefficients(paths: PathSet | list[PropagationPath], materials, config: EmConfig = EmConfig()) -> np.ndarray:
    ps = paths if isinstance(paths, PathSet) else PathSet.from_paths(list(paths))
    _check_materials(ps, materials)
    return np.asarray(coefficients_var(path_geometry(ps), _as_arrays(materials), config).value)


def path_coefficient(path: PropagationPath, materials, config: EmConfig = EmConfig()) -> complex:
    return complex(path_coefficients([path], materials, config)[0])


# --------------------------------------------------------------------------- channel synthesis


def frequency_matrix(delays: np.ndarray, config: EmConfig = EmConfig()) -> np.ndarray:
    """``(M, P)`` matrix of ``exp(-j 2 pi (f_m - f_c) tau_p)``."""
    offsets = config.frequencies - config.center_frequency
    return np.exp(-2j * math.pi * np.outer(offsets, np.asarray(delays, dtype=np.float64)))


def channel_var(coeffs: ad.Var, freq_matrix: np.ndarray) -> tuple[ad.Var, ad.Var]:
    """(CFR, band-limited CIR) from coefficient Var and a precomputed frequency matrix."""
    cfr = ad.matmul(freq_matrix, coeffs)
    return cfr, ad.ifft(cfr)


@dataclass
class ChannelImpulseResponse:
    delays: np.ndarray  # per path, seconds
    coefficients: np.ndarray  # per path, complex
    frequencies: np.ndarray  # Hz
    cfr: np.ndarray
    cir: np.ndarray  # band-limited taps
    tap_delays: np.ndarray

    @property
    def taps(self) -> list[tuple[float, complex]]:
        return list(zip(self.delays.tolist(), self.coefficients.tolist()))

    @property
    def pdp(self) -> np.ndarray:
        return np.abs(self.cir) ** 2

    @property
    def energy(self) -> float:
        return float(self.pdp.sum())

    def write_cir_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["delay_s", "re", "im", "power_db"])
            power = self.pdp
            with np.errstate(divide="ignore"):
                db = np.where(power > 0, 10 * np.log10(np.where(power > 0, power, 1.0)), -np.inf)
            for t, h, p in zip(self.tap_delays, self.cir, db):
                w.writerow([repr(float(t)), repr(float(h.real)), repr(float(h.imag)), repr(float(p))])

    def write_cfr_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["freq_hz", "re", "im"])
            for f, h in zip(self.frequencies, self.cfr):
                w.writerow([repr(float(f)), repr(float(h.real)), repr(float(h.imag))])


def synthesize_from_taps(delays, coefficients, config: EmConfig = EmConfig()) -> ChannelImpulseResponse:
    delays = np.asarray(delays, dtype=np.float64).reshape(-1)
    coefficients = np.asarray(coefficients, dtype=complex).reshape(-1)
    cfr = frequency_matrix(delays, config) @ coefficients if len(delays) else np.zeros(config.num_freq_samples, complex)
    return ChannelImpulseResponse(delays, coefficients, config.frequencies, cfr, np.fft.ifft(cfr), config.tap_delays)


def synthesize_cir(paths: PathSet | list[PropagationPath], materials, config: EmConfig = EmConfig()
                   ) -> ChannelImpulseResponse:
    """Taps, CFR, band-limited CIR and PDP of one link's paths (empty input gives a zero channel)."""
    ps = paths if isinstance(paths, PathSet) else PathSet.from_paths(list(paths))
    if len(ps) == 0:
        return synthesize_from_taps([], [], config)
    a = path_coefficients(ps, materials, config)
    return synthesize_from_taps(path_geometry(ps).delays, a, config)


def write_csvs(cir: ChannelImpulseResponse, prefix) -> tuple[Path, Path]:
    prefix = Path(prefix)
    a = prefix.with_name(prefix.name + "_cir.csv")
    b = prefix.with_name(prefix.name + "_cfr.csv")
    cir.write_cir_csv(a)
    cir.write_cfr_csv(b)
    return a, b


def read_cir_csv(path, config: EmConfig | None = None) -> np.ndarray:
    """Complex taps from a file written by ``write_cir_csv``.

    With ``config`` the tap delays must match its grid, otherwise ValueError.
    """
    delays = []
    taps = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        missing = {"delay_s", "re", "im"} - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing column(s) {sorted(missing)}")
        for row in reader:
            delays.append(float(row["delay_s"]))
            taps.append(complex(float(row["re"]), float(row["im"])))
    taps = np.asarray(taps, dtype=complex)
    if config is not None:
        grid = config.tap_delays
        if len(delays) != len(grid) or not np.allclose(delays, grid, rtol=1e-9, atol=1e-18):
            raise ValueError(f"{path}: tap grid does not match {config.num_freq_samples} samples over "
                             f"{config.bandwidth:g} Hz")
    return taps
