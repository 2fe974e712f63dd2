"""Learning per-material parameters from channel impulse responses.

Each material has three unconstrained raw values mapped to physical ranges:
``eps_r = 1 + softplus(raw)``, ``sigma = softplus(raw)``, ``S = sigmoid(raw)``.
Training samples one receiver per iteration, synthesizes its band-limited CIR
from the frozen path geometry and takes an Adam step on the normalized
squared error against the reference taps.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .em import EmConfig, MaterialArrays, PathGeometry, channel_var, coefficients_var, frequency_matrix, path_geometry
from .paths import PathSet
from .scene import MaterialParams

log = logging.getLogger(__name__)

INIT_PERMITTIVITY = 3.0
INIT_CONDUCTIVITY = 0.01
INIT_SCATTERING = 0.3


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.01
    iterations: int = 5000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.iterations < 0:
            raise ValueError("iterations must be non-negative")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if not self.eps > 0:
            raise ValueError("eps must be positive")


# --------------------------------------------------------------------------- constraints


def softplus_inverse(y):
    y = np.asarray(y, dtype=np.float64)
    return y + np.log(-np.expm1(-y))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


def raw_from_params(eps_r, sigma, S) -> np.ndarray:
    """Raw values reproducing the given physical parameters; shape ``(n, 3)``."""
    return np.stack([softplus_inverse(np.asarray(eps_r) - 1.0), softplus_inverse(sigma), logit(S)], axis=-1)


def initial_raw(num_materials: int) -> np.ndarray:
    ones = np.ones(num_materials)
    return raw_from_params(INIT_PERMITTIVITY * ones, INIT_CONDUCTIVITY * ones, INIT_SCATTERING * ones)


def constrain(raw: ad.Var) -> MaterialArrays:
    return MaterialArrays(
        1.0 + ad.softplus(raw[:, 0]),
        ad.softplus(raw[:, 1]),
        ad.sigmoid(raw[:, 2]),
    )


def physical(raw: np.ndarray) -> np.ndarray:
    """Physical ``(eps_r, sigma, S)`` rows for raw values (no tape)."""
    raw = np.asarray(raw, dtype=np.float64)
    return np.stack([1.0 + np.logaddexp(0.0, raw[..., 0]), np.logaddexp(0.0, raw[..., 1]),
                     np.exp(-np.logaddexp(0.0, -raw[..., 2]))], axis=-1)


def params_table(raw: np.ndarray) -> dict[int, MaterialParams]:
    return {i: MaterialParams(*map(float, row)) for i, row in enumerate(physical(raw))}


# --------------------------------------------------------------------------- loss


def cir_loss(h, h_hat):
    """``||h - h_hat||^2 / ||h_hat||^2``; Var in, Var out."""
    hv, tv = ad.value(h), ad.value(h_hat)
    if hv.shape != tv.shape:
        raise ValueError(f"CIR grids differ: {hv.shape} vs {tv.shape}")
    den = float(np.sum(np.abs(tv) ** 2))
    if den <= 0:
        raise ValueError("reference CIR has zero energy")
    if isinstance(h, ad.Var) or isinstance(h_hat, ad.Var):
        diff = (h if isinstance(h, ad.Var) else ad.const(h)) - h_hat
        return ad.sum(ad.abs2(diff)) * (1.0 / den)
    return float(np.sum(np.abs(hv - tv) ** 2) / den)


# --------------------------------------------------------------------------- optimizer


class Adam:
    def __init__(self, shape, config: TrainConfig):
        self.cfg = config
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        c = self.cfg
        self.t += 1
        self.m = c.beta1 * self.m + (1 - c.beta1) * grad
        self.v = c.beta2 * self.v + (1 - c.beta2) * grad * grad
        m_hat = self.m / (1 - c.beta1 ** self.t)
        v_hat = self.v / (1 - c.beta2 ** self.t)
        return params - c.learning_rate * m_hat / (np.sqrt(v_hat) + c.eps)


# --------------------------------------------------------------------------- training


@dataclass
class Link:
    """Frozen geometry of one receiver plus its reference CIR."""

    rx: int
    geometry: PathGeometry
    freq_matrix: np.ndarray
    target: np.ndarray

    def cir(self, materials: MaterialArrays, em_config: EmConfig) -> ad.Var:
        a = coefficients_var(self.geometry, materials, em_config)
        return channel_var(a, self.freq_matrix)[1]


def make_link(rx: int, paths: PathSet, target_cir, em_config: EmConfig = EmConfig()) -> Link:
    geom = path_geometry(paths)
    target = np.asarray(target_cir, dtype=complex)
    if target.shape != (em_config.num_freq_samples,):
        raise ValueError(f"reference CIR for rx {rx} has {target.shape} taps, expected {em_config.num_freq_samples}")
    return Link(rx, geom, frequency_matrix(geom.delays, em_config), target)


def simulate_cir(paths: PathSet, raw_or_table, em_config: EmConfig = EmConfig()) -> np.ndarray:
    """Band-limited CIR of a path set under given materials (raw array or label table)."""
    mats = (MaterialArrays.from_table(raw_or_table) if isinstance(raw_or_table, dict)
            else MaterialArrays(*physical(raw_or_table).T))
    if len(paths) == 0:
        return np.zeros(em_config.num_freq_samples, complex)
    geom = path_geometry(paths)
    return np.asarray(channel_var(coefficients_var(geom, mats, em_config), frequency_matrix(geom.delays, em_config))[1].value)


@dataclass
class TrainingHistory:
    labels: list[int]  # material ids in file numbering, one per row of the parameter arrays
    loss: np.ndarray  # (T,) loss at each iteration, NaN when the sampled RX had no paths
    rx: np.ndarray  # (T,) sampled receiver
    params: np.ndarray  # (T + 1, n, 3) physical parameters before each step and after the last
    raw: np.ndarray  # (n, 3) final raw values
    used: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))  # material appears on some path

    @property
    def final(self) -> dict[int, MaterialParams]:
        return {i: MaterialParams(*map(float, row)) for i, row in enumerate(self.params[-1])}

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            head = ["iteration", "loss"]
            for lab in self.labels:
                head += [f"label_{lab}_relative_permittivity", f"label_{lab}_conductivity",
                         f"label_{lab}_scattering_coefficient"]
            w.writerow(head)
            for it in range(len(self.loss)):
                row = [it, repr(float(self.loss[it]))]
                for m in range(len(self.labels)):
                    row += [repr(float(v)) for v in self.params[it, m]]
                w.writerow(row)


def loss_and_grad(link: Link, raw: np.ndarray, em_config: EmConfig) -> tuple[float, np.ndarray]:
    leaf = ad.Var(np.array(raw, dtype=np.float64))
    loss = cir_loss(link.cir(constrain(leaf), em_config), link.target)
    loss.backward()
    grad = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
    return float(loss.value), grad


def train(links: dict[int, Link], num_materials: int, config: TrainConfig = TrainConfig(),
          em_config: EmConfig = EmConfig(), num_receivers: int | None = None, init_raw: np.ndarray | None = None,
          labels: list[int] | None = None) -> TrainingHistory:
    """Adam on raw material parameters, one uniformly sampled receiver per iteration.

    ``links`` maps receiver index to its frozen geometry and reference; receivers
    in ``range(num_receivers)`` without a link are sampled too and skipped with
    a warning.
    """
    n_rx = num_receivers if num_receivers is not None else (max(links) + 1 if links else 0)
    if n_rx <= 0:
        raise ValueError("no receivers to train on")
    raw = initial_raw(num_materials) if init_raw is None else np.array(init_raw, dtype=np.float64)
    if raw.shape != (num_materials, 3):
        raise ValueError("init_raw must have shape (num_materials, 3)")
    rng = np.random.default_rng(config.seed)
    opt = Adam(raw.shape, config)
    T = config.iterations
    losses = np.full(T, np.nan)
    picks = np.zeros(T, dtype=np.int64)
    params = np.zeros((T + 1, num_materials, 3))
    params[0] = physical(raw)
    used = np.zeros(num_materials, bool)
    for link in links.values():
        g = link.geometry
        used[np.unique(g.material[g.kind >= 0])] = True
    for it in range(T):
        j = int(rng.integers(n_rx))
        picks[it] = j
        link = links.get(j)
        if link is None or len(link.geometry) == 0:
            log.warning("iteration %d: receiver %d has no paths, skipped", it, j)
        else:
            losses[it], grad = loss_and_grad(link, raw, em_config)
            raw = opt.step(raw, grad)
        p = physical(raw)
        assert (p[:, 0] >= 1).all() and (p[:, 1] >= 0).all() and ((p[:, 2] >= 0) & (p[:, 2] <= 1)).all()
        params[it + 1] = p
    return TrainingHistory(list(range(num_materials)) if labels is None else list(labels), losses, picks, params,
                           raw, used)


def total_loss(links: dict[int, Link], raw: np.ndarray, em_config: EmConfig = EmConfig()) -> float:
    """Mean loss over all links (diagnostic, no gradient)."""
    vals = [loss_and_grad(link, raw, em_config)[0] for link in links.values() if len(link.geometry)]
    return float(np.mean(vals)) if vals else math.nan
