"""Importance proposals over transmission-model parameters.

Two proposal-building strategies live here.  The pilot strategy reweights a
set of pilot simulations so that frequently observed equilibrium prevalences
do not dominate, and excludes parameter regions producing implausibly high
prevalence.  The population strategy adapts a tabulated proposal over host
population sizes so that every pixel population in a reference range ends up
with a comparable effective sample size; the required range is covered by
the proposal support plus a linearly decaying tail above it.

Bank sampling combines the adapted population proposal with tabulated joint
draws of the vector-to-host ratio and the exposure aggregation parameter,
and a uniform importation rate.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

__all__ = [
    "ParameterVector",
    "PilotProposal",
    "PopulationPrior",
    "TabulatedProposal",
    "VhkGrid",
    "adapt_population_proposal",
    "build_pilot_proposal",
    "default_vh_k_grid",
    "load_vh_k_grid",
    "population_prior_density",
    "sample_bank",
]

IMPORTATION_RATE_MAX = 0.0005  # per host per month, upper end of the uniform prior


@dataclass(frozen=True)
class ParameterVector:
    """One draw of the spatially varying transmission-model parameters."""

    population: int
    vector_host_ratio: float
    aggregation_k: float
    importation_rate: float

    def __post_init__(self):
        if self.population < 1:
            raise ValueError("population must be at least 1")
        if not (
            np.isfinite(self.vector_host_ratio)
            and np.isfinite(self.aggregation_k)
            and np.isfinite(self.importation_rate)
        ):
            raise ValueError("parameters must be finite")
        if self.vector_host_ratio <= 0 or self.aggregation_k <= 0 or self.importation_rate < 0:
            raise ValueError("rates must be positive (importation may be zero)")


@dataclass(frozen=True)
class PopulationPrior:
    """Log-normal prior on the simulated population size of one pixel."""

    reported_population: float
    log_sd: float

    def __post_init__(self):
        if self.reported_population < 1:
            raise ValueError("reported population must be at least 1")
        if not self.log_sd > 0:
            raise ValueError("log-scale standard deviation must be positive")

    def density(self, n) -> np.ndarray:
        return population_prior_density(n, self.reported_population, self.log_sd)


def population_prior_density(n, reported_population: float, log_sd: float) -> np.ndarray:
    """Log-normal density of a population size n around the reported value."""
    n = np.asarray(n, dtype=float)
    if np.any(n < 1):
        raise ValueError("population sizes must be at least 1")
    z = (np.log(n) - np.log(reported_population)) / log_sd
    return np.exp(-0.5 * z * z) / (n * log_sd * np.sqrt(2.0 * np.pi))


@dataclass(frozen=True)
class TabulatedProposal:
    """Discrete proposal given by probability mass on an increasing support."""

    support: np.ndarray
    mass: np.ndarray

    def __post_init__(self):
        support = np.asarray(self.support)
        mass = np.asarray(self.mass, dtype=float)
        if support.ndim != 1 or support.shape != mass.shape or support.size == 0:
            raise ValueError("support and mass must be matching non-empty 1-d arrays")
        if np.any(np.diff(support) <= 0):
            raise ValueError("support must increase strictly")
        if np.any(mass < 0.0) or abs(mass.sum() - 1.0) > 1e-9:
            raise ValueError("mass must be non-negative and sum to 1")
        if abs(mass.sum() - 1.0) > 1e-12:
            mass = mass / mass.sum()
        object.__setattr__(self, "support", support)
        object.__setattr__(self, "mass", mass)

    def density(self, n) -> np.ndarray:
        """Probability mass at n; zero off the support."""
        n = np.asarray(n)
        idx = np.searchsorted(self.support, n)
        idx_clipped = np.minimum(idx, self.support.size - 1)
        hit = self.support[idx_clipped] == n
        out = np.where(hit, self.mass[idx_clipped], 0.0)
        return out

    def sample(self, rng: np.random.Generator, size: int) -> np.ndarray:
        return rng.choice(self.support, size=size, p=self.mass)


# ---------------------------------------------------------------------------
# Pilot-based proposal over arbitrary parameter vectors
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class PilotProposal:
    """Proposal built by flattening the prevalence distribution of pilot runs.

    Pilot draws come uniformly from the prior; each pilot parameter vector is
    resampled with probability inversely proportional to how often its
    equilibrium prevalence bin was observed, and bins above the prevalence
    cap get zero mass.  Stage-1 weights against the prior are proportional to
    the inverse multiplier of the draw's bin.
    """

    thetas: tuple
    prevalences: np.ndarray
    bin_edges: np.ndarray
    bin_multipliers: np.ndarray

    @property
    def draw_probabilities(self) -> np.ndarray:
        raw = self.bin_multipliers[self._bins(self.prevalences)]
        return raw / raw.sum()

    def _bins(self, prevalence) -> np.ndarray:
        idx = np.searchsorted(self.bin_edges, np.asarray(prevalence), side="right") - 1
        return np.clip(idx, 0, self.bin_edges.size - 2)

    def sample(self, rng: np.random.Generator, size: int) -> list:
        idx = rng.choice(len(self.thetas), size=size, p=self.draw_probabilities)
        return [self.thetas[i] for i in idx]

    def prior_to_proposal_ratio(self, prevalence) -> np.ndarray:
        """Unnormalised prior/proposal ratio for draws at the given prevalences.

        Raises where the proposal assigns zero mass (excluded prevalences),
        since the ratio is undefined there.
        """
        mult = self.bin_multipliers[self._bins(prevalence)]
        if np.any(mult <= 0.0):
            raise ValueError("prevalence outside proposal support")
        return 1.0 / mult


def build_pilot_proposal(
    pilot_draws: Sequence[tuple],
    max_observed_prevalence: float = 1.0,
    n_bins: int = 50,
) -> PilotProposal:
    """Construct the prevalence-flattening proposal from pilot simulations.

    ``pilot_draws`` holds (parameter vector, equilibrium prevalence) pairs
    sampled uniformly from the prior.  Bins of the prevalence axis observed
    often receive proportionally smaller resampling multipliers; bins above
    ``max_observed_prevalence`` are excluded outright.
    """
    if len(pilot_draws) == 0:
        raise ValueError("empty pilot set")
    thetas = tuple(theta for theta, _ in pilot_draws)
    prevalences = np.array([p for _, p in pilot_draws], dtype=float)
    if np.any((prevalences < 0.0) | (prevalences > 1.0)):
        raise ValueError("pilot prevalences must lie in [0, 1]")
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    idx = np.clip(np.searchsorted(edges, prevalences, side="right") - 1, 0, n_bins - 1)
    freq = np.bincount(idx, minlength=n_bins) / prevalences.size
    multipliers = np.zeros(n_bins)
    occupied = freq > 0.0
    multipliers[occupied] = 1.0 / freq[occupied]
    centers = (edges[:-1] + edges[1:]) / 2.0
    multipliers[centers > max_observed_prevalence] = 0.0
    if not np.any(multipliers > 0.0):
        raise ValueError("prevalence cap excludes every pilot draw")
    return PilotProposal(
        thetas=thetas,
        prevalences=prevalences,
        bin_edges=edges,
        bin_multipliers=multipliers,
    )


# ---------------------------------------------------------------------------
# Adaptive population proposal
# ---------------------------------------------------------------------------

def _pixel_ess_profile(
    support: np.ndarray,
    log_support: np.ndarray,
    refs: np.ndarray,
    log_refs: np.ndarray,
    sigma: float,
    q: np.ndarray,
    chunk: int = 256,
) -> tuple[np.ndarray, np.ndarray]:
    """Per-reference-pixel ESS under q, and its prior-weighted profile over n.

    A pixel with reported population N receives, per simulation, the
    large-bank effective sample size 1 / sum_m pi_N(m)^2 / q(m) where pi_N is
    its normalised log-normal population prior tabulated on the support.  The
    profile attributes those pixel ESS values to each support point n by
    averaging them with weights pi_N(n), i.e. by how much a size-n simulation
    matters to each pixel.
    """
    inv_q = 1.0 / q
    ess_refs = np.empty(refs.size)
    numer = np.zeros(support.size)
    denom = np.zeros(support.size)
    inv_support = 1.0 / support
    for start in range(0, refs.size, chunk):
        stop = min(start + chunk, refs.size)
        z = (log_support[None, :] - log_refs[start:stop, None]) / sigma
        p = np.exp(-0.5 * z * z) * inv_support[None, :]
        p /= p.sum(axis=1, keepdims=True)
        ess_chunk = 1.0 / ((p * p) @ inv_q)
        ess_refs[start:stop] = ess_chunk
        numer += ess_chunk @ p
        denom += p.sum(axis=0)
    profile = np.full(support.size, ess_refs.max())
    reached = denom > 0.0
    profile[reached] = numer[reached] / denom[reached]
    return ess_refs, profile


def adapt_population_proposal(
    log_sd: float,
    population_range: tuple[int, int] = (260, 10_000),
    iterations: int = 10,
    tail_to: int = 11_550,
    reference_stride: int = 1,
    reference_populations: np.ndarray | None = None,
) -> TabulatedProposal:
    """Flatten pixel effective sample sizes by iterating q <- q / ESS.

    Starting from a flat proposal over the pixel population range, each
    iteration divides the proposal by the ESS profile it induces across the
    reference pixel populations and renormalises, so population sizes serving
    poorly-covered pixels gain mass.  Population sizes above the range, up to
    ``tail_to``, get mass decreasing linearly to zero, covering the upper
    tails of the log-normal priors with fewer simulations.

    ``reference_stride`` thins the reference pixel populations used to probe
    the ESS (the profile is interpolated in log-population back onto the full
    support); 1 evaluates every population in the range.  An explicit
    ``reference_populations`` array replaces the strided default, for
    adapting to a known finite set of pixels.
    """
    lo, hi = population_range
    if not (1 <= lo < hi):
        raise ValueError("population range must satisfy 1 <= lo < hi")
    if tail_to <= hi:
        raise ValueError("tail must extend beyond the population range")
    if iterations < 0:
        raise ValueError("iterations must be non-negative")
    support = np.arange(lo, hi + 1, dtype=np.int64)
    log_support = np.log(support.astype(float))
    if reference_populations is not None:
        refs = np.unique(np.asarray(reference_populations, dtype=np.int64))
        if refs.size == 0 or refs[0] < lo or refs[-1] > hi:
            raise ValueError("reference populations must lie inside the population range")
    else:
        refs = support[::reference_stride]
    log_refs = np.log(refs.astype(float))

    q = np.full(support.size, 1.0 / support.size)
    for _ in range(iterations):
        if np.any(q <= 0.0):
            raise ValueError("proposal developed a support hole (zero mass inside the range)")
        _, profile = _pixel_ess_profile(support, log_support, refs, log_refs, log_sd, q)
        q = q / profile
        q /= q.sum()

    tail = np.arange(hi + 1, tail_to + 1, dtype=np.int64)
    tail_mass = q[-1] * (tail_to - tail).astype(float) / float(tail_to - hi)
    full_support = np.concatenate((support, tail))
    full_mass = np.concatenate((q, tail_mass))
    return TabulatedProposal(support=full_support, mass=full_mass / full_mass.sum())


def pixel_ess_under_proposal(
    proposal: TabulatedProposal, reported_population: float, log_sd: float
) -> float:
    """Large-bank per-simulation ESS a pixel would get from this proposal.

    Prior mass beyond the proposal support does not contribute; the linear
    tail exists precisely to keep that truncation negligible.
    """
    prior = population_prior_density(proposal.support, reported_population, log_sd)
    prior = prior / prior.sum()
    covered = proposal.mass > 0.0
    ratio = np.zeros_like(prior)
    ratio[covered] = prior[covered] ** 2 / proposal.mass[covered]
    return float(1.0 / ratio.sum())


# ---------------------------------------------------------------------------
# Joint prior grid for vector-to-host ratio and aggregation parameter
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class VhkGrid:
    """Tabulated joint prior over (vector-to-host ratio, aggregation k)."""

    vector_host_ratio: np.ndarray
    aggregation_k: np.ndarray
    mass: np.ndarray

    def __post_init__(self):
        vh = np.asarray(self.vector_host_ratio, dtype=float)
        k = np.asarray(self.aggregation_k, dtype=float)
        mass = np.asarray(self.mass, dtype=float)
        if not (vh.shape == k.shape == mass.shape) or vh.ndim != 1 or vh.size == 0:
            raise ValueError("grid columns must be matching non-empty 1-d arrays")
        if np.any(mass < 0.0) or mass.sum() <= 0.0:
            raise ValueError("grid mass must be non-negative with positive total")
        if abs(mass.sum() - 1.0) > 1e-12:
            mass = mass / mass.sum()
        object.__setattr__(self, "vector_host_ratio", vh)
        object.__setattr__(self, "aggregation_k", k)
        object.__setattr__(self, "mass", mass)

    def sample(self, rng: np.random.Generator, size: int) -> tuple[np.ndarray, np.ndarray]:
        idx = rng.choice(self.mass.size, size=size, p=self.mass)
        return self.vector_host_ratio[idx], self.aggregation_k[idx]


def default_vh_k_grid(n_vh: int = 24, n_k: int = 24) -> VhkGrid:
    """Default joint grid: log-spaced axes with positively correlated mass.

    The ranges (vector-to-host ratio 1 to 150, aggregation 0.01 to 3) span
    from settings that cannot sustain transmission to hyperendemic ones, and
    the positive log-scale correlation ties intense transmission to more
    evenly spread exposure.  Applications with their own evidence should load
    a custom grid instead.
    """
    vh_axis = np.geomspace(1.0, 150.0, n_vh)
    k_axis = np.geomspace(0.01, 3.0, n_k)
    vh, k = np.meshgrid(vh_axis, k_axis, indexing="ij")
    x = (np.log(vh) - np.log(12.0)) / 1.3
    y = (np.log(k) - np.log(0.25)) / 1.2
    rho = 0.6
    quad = (x * x - 2.0 * rho * x * y + y * y) / (1.0 - rho * rho)
    mass = np.exp(-0.5 * quad)
    return VhkGrid(
        vector_host_ratio=vh.ravel(), aggregation_k=k.ravel(), mass=mass.ravel()
    )


def load_vh_k_grid(path: str | Path | None = None) -> VhkGrid:
    """Load a joint (V/H, k) grid from CSV, or the packaged default."""
    if path is None:
        ref = resources.files("maplink").joinpath("data/vh_k_grid.csv")
        with resources.as_file(ref) as p:
            return load_vh_k_grid(p)
    vh, k, mass = [], [], []
    with open(path, newline="") as fh:
        for row in csv.DictReader(filter(lambda ln: not ln.startswith("#"), fh)):
            vh.append(float(row["vector_host_ratio"]))
            k.append(float(row["aggregation_k"]))
            mass.append(float(row["mass"]))
    return VhkGrid(
        vector_host_ratio=np.array(vh), aggregation_k=np.array(k), mass=np.array(mass)
    )


def save_vh_k_grid(grid: VhkGrid, path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        fh.write("# schema: maplink/vh-k-grid v1\n")
        writer = csv.writer(fh)
        writer.writerow(["vector_host_ratio", "aggregation_k", "mass"])
        for vh, k, m in zip(grid.vector_host_ratio, grid.aggregation_k, grid.mass):
            writer.writerow([repr(float(vh)), repr(float(k)), repr(float(m))])


# ---------------------------------------------------------------------------
# Bank sampling
# ---------------------------------------------------------------------------

def sample_bank(
    population_proposal: TabulatedProposal,
    vh_k_prior: VhkGrid,
    j: int,
    seed: int,
    importation_max: float = IMPORTATION_RATE_MAX,
) -> list[ParameterVector]:
    """Draw J parameter vectors, component-wise independent, reproducibly.

    Draw order is fixed (population, then the joint V/H and k index, then the
    importation rate) so a seed pins the bank exactly.
    """
    if j < 1:
        raise ValueError("need at least one draw")
    rng = np.random.default_rng(np.random.SeedSequence(seed))
    populations = population_proposal.sample(rng, j)
    vh, k = vh_k_prior.sample(rng, j)
    importation = rng.uniform(0.0, importation_max, size=j)
    return [
        ParameterVector(
            population=int(populations[i]),
            vector_host_ratio=float(vh[i]),
            aggregation_k=float(k[i]),
            importation_rate=float(importation[i]),
        )
        for i in range(j)
    ]
