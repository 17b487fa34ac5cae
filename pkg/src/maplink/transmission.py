"""Stochastic individual-based model of lymphatic filariasis transmission.

Humans carry male and female adult worm burdens, a microfilariae (mf) blood
concentration, an individual mosquito-bite risk and a treatment history.
Worm acquisition follows per-host Poisson processes whose rate scales with
the current infectious-larvae availability in the mosquito population; mf
follow a linear birth-death equation integrated exactly within each step;
the mosquito side is collapsed to its quasi-equilibrium L3 load.  Mass drug
administration kills a fraction of each treated host's mf, permanently
sterilises a fraction of their worms, and briefly suppresses mf production.
A small importation rate keeps the endemic equilibrium from collapsing to
the empty state.

The simulation advances in fixed steps of one month, matching the per-month
units of the rate parameters.  One simulation owns its state and its random
generator outright, so banks of simulations parallelise trivially.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, replace
from typing import Literal, Sequence

import numpy as np

from .proposal import ParameterVector

__all__ = [
    "ModelParams",
    "PopulationState",
    "Scenario",
    "acquisition_rate",
    "apply_mda",
    "equilibrium_l3",
    "importation_decay_from_pilot",
    "initial_state",
    "larvae_uptake",
    "mf_prevalence",
    "population_uptake",
    "run_scenario",
    "run_to_equilibrium",
    "step",
]

MAX_AGE_MONTHS = 1200.0  # hard demographic cut-off at 100 years


@dataclass(frozen=True)
class ModelParams:
    """Fixed-across-space model parameters (monthly rates).

    The four spatially varying inputs (population size, vector-to-host
    ratio, exposure aggregation, importation rate) travel separately in a
    :class:`~maplink.proposal.ParameterVector`.
    """

    bites_per_mosquito: float = 10.0        # lambda
    psi1: float = 0.414                     # L3 leaving mosquito per bite
    psi2: float = 0.32                      # L3 entering host
    s2: float = 0.00275                     # L3 developing into adult worms
    worm_death_rate: float = 0.0104         # mu
    mf_production_rate: float = 0.2         # alpha, per fertile female worm
    mf_death_rate: float = 0.1              # gamma
    uptake_fraction: float = 0.37           # mosquitoes infected per infective bite
    mosquito_death_rate: float = 5.0        # sigma
    mda_mf_kill: float = 0.95               # chi_1
    mda_worm_sterilise: float = 0.55        # kappa_1
    adherence_correlation: float = 0.35     # rho, systematic adherence
    human_death_rate: float = 1.0 / 600.0   # tau; mean lifetime 50 years
    exposure_ramp_months: float = 108.0     # h(a) saturates at age nine
    # larval uptake curve (shared saturation scale for both vector genera);
    # the slope is stated per mf per 20 uL, putting the half-rise of the
    # curve at the mf densities of moderately infected hosts
    uptake_r1: float = 2.75
    uptake_kappa_s1: float = 4.395
    uptake_r2: float = 2.75
    uptake_kappa_s2: float = 4.395
    species: Literal["anopheles", "culex"] = "anopheles"
    mf_detection_threshold: float = 1.0     # per 20 uL
    mf_suppression_months: float = 6.0      # post-treatment production pause
    l3_coupling: Literal["scaled", "none"] = "scaled"
    l3_reference: float | None = None       # None: the saturated L3 load (see below)
    burn_in_months: int = 1200
    seed_worms_per_sex: float = 4.0         # initial burden scale for the burn-in

    def __post_init__(self):
        for name in (
            "bites_per_mosquito",
            "worm_death_rate",
            "mf_death_rate",
            "mosquito_death_rate",
            "human_death_rate",
            "exposure_ramp_months",
        ):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.mf_production_rate < 0:  # zero is the pure-decay limit
            raise ValueError("mf_production_rate must be non-negative")
        for name in ("psi1", "psi2", "s2", "uptake_fraction", "mda_mf_kill",
                     "mda_worm_sterilise", "adherence_correlation"):
            value = getattr(self, name)
            if not 0.0 <= value <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")

    def saturation_l3(self) -> float:
        """L3 load when every blood meal saturates the uptake curve."""
        ks = self.uptake_kappa_s2 if self.species == "anopheles" else self.uptake_kappa_s1
        return equilibrium_l3(ks, self)

    def l3_availability_reference(self) -> float:
        """Normaliser for the larval availability factor.

        The per-month worm acquisition rate is calibrated to a fully
        infectious mosquito population; scaling by L*/reference with the
        saturated L3 load as the default reference keeps that calibration at
        saturation and shuts transmission down as infectious larvae vanish.
        """
        return self.saturation_l3() if self.l3_reference is None else self.l3_reference


@dataclass
class PopulationState:
    """Complete per-host state of one simulated community."""

    age: np.ndarray                 # months
    bite_risk: np.ndarray
    male_fertile: np.ndarray        # int64 worm counts
    male_sterile: np.ndarray
    female_fertile: np.ndarray
    female_sterile: np.ndarray
    mf: np.ndarray                  # per 20 uL
    suppressed_until: np.ndarray    # months; -inf when never treated
    treated_last: np.ndarray        # bool, last-round treatment decision
    mda_rounds: int = 0
    larvae_mean: float = 0.0        # quasi-equilibrium L3 per mosquito
    time: float = 0.0               # months

    @property
    def size(self) -> int:
        return self.age.size

    @property
    def male_worms(self) -> np.ndarray:
        return self.male_fertile + self.male_sterile

    @property
    def female_worms(self) -> np.ndarray:
        return self.female_fertile + self.female_sterile

    def copy(self) -> "PopulationState":
        return copy.deepcopy(self)


def _stationary_ages(rng: np.random.Generator, n: int, tau: float) -> np.ndarray:
    # exponential(tau) truncated at the age cut-off, the stationary age
    # profile of the replacement process
    u = rng.uniform(size=n)
    return -np.log1p(-u * (1.0 - np.exp(-tau * MAX_AGE_MONTHS))) / tau


def initial_state(
    theta: ParameterVector,
    params: ModelParams,
    rng: np.random.Generator,
    seed_worms_per_sex: float | None = None,
) -> PopulationState:
    """Community with stationary ages, gamma bite risks and seeded infection.

    Worm pairing makes the uninfected state locally stable, so the burn-in
    must start above the transmission breakpoint to find the endemic
    equilibrium where one exists; where none does, the seeded infection dies
    out during the burn-in.  Initial burdens are Poisson with mean
    proportional to each host's relative exposure (``seed_worms_per_sex``
    per host on average; zero starts the community uninfected), and mf start
    at their conditional equilibrium so larval uptake is immediate.
    """
    n = theta.population
    w0 = params.seed_worms_per_sex if seed_worms_per_sex is None else seed_worms_per_sex
    age = _stationary_ages(rng, n, params.human_death_rate)
    bite_risk = rng.gamma(theta.aggregation_k, 1.0 / theta.aggregation_k, size=n)
    exposure = bite_risk * exposure_by_age(age, params)
    male = np.zeros(n, dtype=np.int64)
    female = np.zeros(n, dtype=np.int64)
    mf = np.zeros(n)
    if w0 > 0.0 and exposure.mean() > 0.0:
        lam = w0 * exposure / exposure.mean()
        male = rng.poisson(lam)
        female = rng.poisson(lam)
        producing = (male > 0) & (female > 0)
        mf = np.where(
            producing, params.mf_production_rate * female / params.mf_death_rate, 0.0
        )
    return PopulationState(
        age=age,
        bite_risk=bite_risk,
        male_fertile=male,
        male_sterile=np.zeros(n, dtype=np.int64),
        female_fertile=female,
        female_sterile=np.zeros(n, dtype=np.int64),
        mf=mf,
        suppressed_until=np.full(n, -np.inf),
        treated_last=np.zeros(n, dtype=bool),
    )


def exposure_by_age(age_months, params: ModelParams) -> np.ndarray:
    """h(a): linear ramp from zero at birth, saturating at one."""
    return np.minimum(np.asarray(age_months, dtype=float) / params.exposure_ramp_months, 1.0)


def acquisition_rate(
    bite_risk, age_months, theta: ParameterVector, params: ModelParams
) -> np.ndarray:
    """Base per-sex adult worm acquisition rate, per month.

    0.5 * lambda * b_i * (V/H) * psi1 * psi2 * s2 * h(a); the larval
    availability factor is applied separately inside :func:`step`.
    """
    return (
        0.5
        * params.bites_per_mosquito
        * np.asarray(bite_risk, dtype=float)
        * theta.vector_host_ratio
        * params.psi1
        * params.psi2
        * params.s2
        * exposure_by_age(age_months, params)
    )


def larvae_uptake(mf_per_20ul, params: ModelParams, species: str | None = None) -> np.ndarray:
    """Larvae developing in a mosquito after a blood meal at mf density m.

    Anopheles uptake is squared-saturating (facilitation: vanishing slope at
    low density); culex saturates linearly (limitation: maximal slope at low
    density).  Both are zero at zero and level off at their saturation value.
    """
    m = np.asarray(mf_per_20ul, dtype=float)
    if np.any(m < 0.0):
        raise ValueError("mf density must be non-negative")
    kind = species or params.species
    if kind == "anopheles":
        ks = params.uptake_kappa_s2
        return ks * (1.0 - np.exp(-params.uptake_r2 * m / ks)) ** 2
    if kind == "culex":
        ks = params.uptake_kappa_s1
        return ks * (1.0 - np.exp(-params.uptake_r1 * m / ks))
    raise ValueError(f"unknown vector species {kind!r}")


def population_uptake(state: PopulationState, params: ModelParams) -> float:
    """Bite-risk-weighted mean larval uptake over the community."""
    uptake = larvae_uptake(state.mf, params)
    return float(np.dot(uptake, state.bite_risk) / state.bite_risk.sum())


def equilibrium_l3(mean_uptake: float, params: ModelParams) -> float:
    """Quasi-equilibrium L3 per mosquito: lambda g L-tilde / (sigma + lambda psi1)."""
    return (
        params.bites_per_mosquito
        * params.uptake_fraction
        * mean_uptake
        / (params.mosquito_death_rate + params.bites_per_mosquito * params.psi1)
    )


def mf_prevalence(state: PopulationState, params: ModelParams) -> float:
    """Fraction of hosts with detectable mf."""
    return float(np.mean(state.mf >= params.mf_detection_threshold))


def step(
    state: PopulationState,
    theta: ParameterVector,
    params: ModelParams,
    rng: np.random.Generator,
    dt: float = 1.0,
    importation_rate: float | None = None,
) -> PopulationState:
    """Advance the community by one time step (in place).

    Update order: larval availability from current mf; worm acquisitions and
    deaths; exact-exponential mf update from the new worm burden; ageing,
    death and replacement; importation.  ``importation_rate`` overrides the
    bank parameter so interventions can decay it over time.
    """
    if not dt > 0.0:
        raise ValueError("dt must be positive")
    n = state.size
    alpha_imp = theta.importation_rate if importation_rate is None else importation_rate

    # mosquito side at quasi-equilibrium
    state.larvae_mean = equilibrium_l3(population_uptake(state, params), params)
    if params.l3_coupling == "scaled":
        availability = state.larvae_mean / params.l3_availability_reference()
    else:
        availability = 1.0

    # adult worm dynamics
    rate = acquisition_rate(state.bite_risk, state.age, theta, params) * availability * dt
    state.male_fertile += rng.poisson(rate)
    state.female_fertile += rng.poisson(rate)
    p_die = -np.expm1(-params.worm_death_rate * dt)
    state.male_fertile = rng.binomial(state.male_fertile, 1.0 - p_die)
    state.male_sterile = rng.binomial(state.male_sterile, 1.0 - p_die)
    state.female_fertile = rng.binomial(state.female_fertile, 1.0 - p_die)
    state.female_sterile = rng.binomial(state.female_sterile, 1.0 - p_die)

    # mf: dM/dt = production - gamma M, solved exactly over the step with the
    # updated worm burden held fixed
    producing = (state.female_fertile > 0) & (state.male_fertile > 0)
    suppressed = state.time < state.suppressed_until
    production = np.where(
        producing & ~suppressed, params.mf_production_rate * state.female_fertile, 0.0
    )
    decay = np.exp(-params.mf_death_rate * dt)
    state.mf = state.mf * decay + production / params.mf_death_rate * (1.0 - decay)

    # demography: constant hazard plus the hard age cut-off, replacement keeps
    # the population size constant
    state.age += dt
    died = (rng.uniform(size=n) < -np.expm1(-params.human_death_rate * dt)) | (
        state.age >= MAX_AGE_MONTHS
    )
    n_dead = int(died.sum())
    if n_dead:
        state.age[died] = 0.0
        state.bite_risk[died] = rng.gamma(
            theta.aggregation_k, 1.0 / theta.aggregation_k, size=n_dead
        )
        state.male_fertile[died] = 0
        state.male_sterile[died] = 0
        state.female_fertile[died] = 0
        state.female_sterile[died] = 0
        state.mf[died] = 0.0
        state.suppressed_until[died] = -np.inf
        state.treated_last[died] = False

    # importation: each event hands one adult worm of random sex to a random host
    n_events = rng.poisson(alpha_imp * n * dt)
    if n_events:
        hosts = rng.integers(0, n, size=n_events)
        sexes = rng.integers(0, 2, size=n_events)
        np.add.at(state.male_fertile, hosts[sexes == 0], 1)
        np.add.at(state.female_fertile, hosts[sexes == 1], 1)

    state.time += dt
    return state


def apply_mda(
    state: PopulationState,
    coverage: float,
    params: ModelParams,
    rng: np.random.Generator,
    mf_kill: float | None = None,
    worm_sterilise: float | None = None,
) -> PopulationState:
    """One round of mass drug administration (in place).

    Treatment choices persist across rounds: with adherence correlation rho,
    a host repeats its previous decision with elevated probability while the
    marginal coverage stays exactly at the requested level.  Treated hosts
    lose a fraction of their mf, have a fraction of their worms permanently
    sterilised, and pause mf production for the configured window.
    """
    if not 0.0 <= coverage <= 1.0:
        raise ValueError("coverage must lie in [0, 1]")
    chi = params.mda_mf_kill if mf_kill is None else mf_kill
    kappa = params.mda_worm_sterilise if worm_sterilise is None else worm_sterilise
    rho = params.adherence_correlation

    u = rng.uniform(size=state.size)
    if state.mda_rounds == 0:
        treated = u < coverage
    else:
        p_prev = coverage + rho * (1.0 - coverage)   # repeat treatment
        p_new = coverage * (1.0 - rho)               # switch into treatment
        treated = np.where(state.treated_last, u < p_prev, u < p_new)

    if np.any(treated):
        state.mf[treated] *= 1.0 - chi
        for pool_from, pool_to in (
            ("male_fertile", "male_sterile"),
            ("female_fertile", "female_sterile"),
        ):
            fertile = getattr(state, pool_from)
            moved = rng.binomial(fertile[treated], kappa)
            fertile[treated] -= moved
            getattr(state, pool_to)[treated] += moved
        state.suppressed_until[treated] = state.time + params.mf_suppression_months

    state.treated_last = treated
    state.mda_rounds += 1
    return state


def run_to_equilibrium(
    theta: ParameterVector,
    params: ModelParams,
    seed,
    burn_in_months: int | None = None,
    seed_worms_per_sex: float | None = None,
) -> tuple[float, PopulationState]:
    """Burn a fresh community in to its pre-control endemic equilibrium."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    state = initial_state(theta, params, rng, seed_worms_per_sex=seed_worms_per_sex)
    months = params.burn_in_months if burn_in_months is None else burn_in_months
    for _ in range(months):
        step(state, theta, params, rng)
    return mf_prevalence(state, params), state


@dataclass(frozen=True)
class Scenario:
    """An intervention programme: timed MDA rounds over a horizon of years.

    ``importation_decay`` holds one multiplier per simulated year applied to
    the importation rate (year 0 first); it typically comes from
    :func:`importation_decay_from_pilot`.
    """

    name: str
    years: int
    rounds: tuple[tuple[int, float], ...] = ()
    mf_kill: float | None = None
    worm_sterilise: float | None = None
    importation_decay: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.years < 1:
            raise ValueError("horizon must be at least one year")
        months = [m for m, _ in self.rounds]
        if months != sorted(months):
            raise ValueError("round times must increase")
        if any(not 0.0 <= c <= 1.0 for _, c in self.rounds):
            raise ValueError("coverage must lie in [0, 1]")
        if self.importation_decay is not None and len(self.importation_decay) < self.years:
            raise ValueError("need one importation multiplier per year")

    @classmethod
    def none(cls, years: int = 5) -> "Scenario":
        return cls(name="none", years=years)

    @classmethod
    def annual(cls, coverage: float, years: int = 5, n_rounds: int | None = None,
               name: str | None = None) -> "Scenario":
        n_rounds = years if n_rounds is None else n_rounds
        rounds = tuple((12 * i, coverage) for i in range(n_rounds))
        return cls(name=name or f"aMDA{round(coverage * 100)}", years=years, rounds=rounds)

    @classmethod
    def biannual(cls, coverage: float, years: int = 5, n_rounds: int | None = None,
                 name: str | None = None) -> "Scenario":
        n_rounds = 2 * years if n_rounds is None else n_rounds
        rounds = tuple((6 * i, coverage) for i in range(n_rounds))
        return cls(name=name or f"bMDA{round(coverage * 100)}", years=years, rounds=rounds)

    def with_decay(self, decay: Sequence[float]) -> "Scenario":
        return replace(self, importation_decay=tuple(float(x) for x in decay))


def run_scenario(
    eq_state: PopulationState,
    scenario: Scenario,
    theta: ParameterVector,
    params: ModelParams,
    seed,
) -> np.ndarray:
    """Simulate an intervention from equilibrium; yearly mf prevalences.

    Returns ``years + 1`` values; index 0 is the pre-intervention baseline.
    The input state is not modified.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    state = eq_state.copy()
    rounds = dict(scenario.rounds)
    trajectory = np.empty(scenario.years + 1)
    trajectory[0] = mf_prevalence(state, params)
    for month in range(scenario.years * 12):
        if month in rounds:
            apply_mda(
                state,
                rounds[month],
                params,
                rng,
                mf_kill=scenario.mf_kill,
                worm_sterilise=scenario.worm_sterilise,
            )
        year = month // 12
        decay = 1.0 if scenario.importation_decay is None else scenario.importation_decay[year]
        step(state, theta, params, rng, importation_rate=theta.importation_rate * decay)
        if (month + 1) % 12 == 0:
            trajectory[(month + 1) // 12] = mf_prevalence(state, params)
    return trajectory


def importation_decay_from_pilot(pilot_trajectories: np.ndarray) -> np.ndarray:
    """Yearly importation multipliers from constant-importation pilot runs.

    The multiplier for a year is the mean pilot prevalence that year divided
    by the mean pilot baseline prevalence, capped at one: importation falls
    in proportion to the prevalence reduction the intervention achieved.
    """
    traj = np.asarray(pilot_trajectories, dtype=float)
    if traj.ndim != 2 or traj.shape[1] < 2:
        raise ValueError("need an (n_simulations, years+1) trajectory array")
    means = traj.mean(axis=0)
    if means[0] <= 0.0:
        return np.ones(traj.shape[1])
    return np.minimum(means / means[0], 1.0)
