"""Synthetic repeated-count data with known truth.

The generator builds a site by survey by year array of counts.  Site
covariates x1 and x2 and the survey-level covariate x4 are centred
uniforms on (-0.5, 0.5); the year covariate x3 is an equally spaced
grid scaled to [-0.5, 0.5].  Abundance follows

    log lambda[s, k] = b0 + b1 x1[s] + b2 x2[s] + b3 x3[k]

with N[s, k] negative binomial (size theta) or Poisson.  Detection uses

    logit p = a0 + a1 x1[s] + a4 x4

where x4 is either the survey-specific value or its per-(site, year)
mean.  Counts are generated under both detection models from the same
latent N, so a fit can be run against data whose detection covariate
varies within a (site, year) while the model only sees the mean, or
against the correctly specified pairing.

Draw order is fixed and documented: the covariate stream draws x1, x2,
x4; the abundance stream draws N; the count stream draws the mean-model
counts then the survey-model counts.  Three independent streams keep
each block reproducible even if another block changes shape.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .errors import ModelError
from .model import DesignMatrices, MixtureFamily, ObservationTable


@dataclass(frozen=True)
class SimConfig:
    """Generator settings; defaults give 72 sites x 3 surveys x 9 years."""

    n_sites: int = 72
    n_surveys: int = 3
    n_years: int = 9
    beta: tuple[float, float, float, float] = (2.0, 2.0, -3.0, 1.0)
    alpha: tuple[float, float, float] = (1.0, -2.0, 1.0)
    theta: float | None = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.n_sites < 1 or self.n_surveys < 1 or self.n_years < 1:
            raise ModelError("n_sites, n_surveys and n_years must be positive")
        if len(self.beta) != 4 or len(self.alpha) != 3:
            raise ModelError("beta must have 4 entries and alpha 3")
        if self.theta is not None and not self.theta > 0:
            raise ModelError("theta must be positive or None for Poisson abundances")

    @property
    def family(self) -> MixtureFamily:
        return MixtureFamily.POISSON if self.theta is None else MixtureFamily.NEGBIN


@dataclass(frozen=True)
class SimOutput:
    """Simulated tables, designs, covariates, and the latent truth.

    Rows are ordered year-major and site-minor: row = year * n_sites + site.
    ``table_mean``/``designs_mean`` pair counts generated from the
    averaged detection covariate with the matching design;
    ``table_survey``/``designs_survey`` use the survey-specific
    covariate.  Fitting ``designs_mean`` against ``table_survey``
    misstates detection whenever x4 varies between surveys.
    """

    config: SimConfig
    table_mean: ObservationTable
    table_survey: ObservationTable
    designs_mean: DesignMatrices
    designs_survey: DesignMatrices
    true_lambda: np.ndarray
    true_n: np.ndarray
    x1: np.ndarray
    x2: np.ndarray
    x3: np.ndarray
    x4: np.ndarray
    x4_mean: np.ndarray


def _centered_uniform(rng, size):
    x = rng.uniform(-0.5, 0.5, size=size)
    return x - x.mean()


def simulate(config: SimConfig = SimConfig()) -> SimOutput:
    """Generate one dataset; fully determined by ``config.seed``."""
    s, j, k = config.n_sites, config.n_surveys, config.n_years
    rng_cov, rng_n, rng_y = (
        np.random.default_rng(ss) for ss in np.random.SeedSequence(config.seed).spawn(3)
    )

    x1 = _centered_uniform(rng_cov, s)
    x2 = _centered_uniform(rng_cov, s)
    x4 = _centered_uniform(rng_cov, (s, j, k))
    x4_mean = x4.mean(axis=1)
    if k == 1:
        x3 = np.zeros(1)
    else:
        years = np.arange(1, k + 1, dtype=float)
        x3 = (years - years.mean()) / np.max(years - years.mean()) / 2.0

    b0, b1, b2, b3 = config.beta
    a0, a1, a4 = config.alpha
    lam = np.exp(b0 + b1 * x1[:, None] + b2 * x2[:, None] + b3 * x3[None, :])
    if config.theta is None:
        n_latent = rng_n.poisson(lam)
    else:
        n_latent = rng_n.negative_binomial(
            config.theta, config.theta / (config.theta + lam)
        )

    logit_base = a0 + a1 * x1[:, None, None]
    p_mean = expit(logit_base + a4 * x4_mean[:, None, :])
    p_survey = expit(logit_base + a4 * x4)
    counts_mean = rng_y.binomial(n_latent[:, None, :], p_mean, size=(s, j, k))
    counts_survey = rng_y.binomial(n_latent[:, None, :], p_survey, size=(s, j, k))

    # flatten (site, survey, year) -> rows of (year, site) with survey columns
    def to_rows(arr):
        return arr.transpose(2, 0, 1).reshape(k * s, j)

    site = np.tile(np.arange(1, s + 1), k)
    year = np.repeat(np.arange(1, k + 1), s)
    table_mean = ObservationTable(counts=to_rows(counts_mean).astype(float), site=site, year=year)
    table_survey = ObservationTable(
        counts=to_rows(counts_survey).astype(float), site=site, year=year
    )

    ones = np.ones(k * s)
    abundance = np.column_stack(
        [ones, np.tile(x1, k), np.tile(x2, k), np.repeat(x3, s)]
    )
    a_names = ("(Intercept)", "x1", "x2", "x3")

    def detection_design(x4_cells):
        design = np.empty((k * s, j, 3))
        design[:, :, 0] = 1.0
        design[:, :, 1] = np.tile(x1, k)[:, None]
        design[:, :, 2] = x4_cells
        return design

    x4_rows = to_rows(x4)
    x4_mean_rows = x4_mean.T.reshape(k * s)[:, None] * np.ones((1, j))
    designs_survey = DesignMatrices(
        abundance_design=abundance,
        detection_design=detection_design(x4_rows),
        abundance_names=a_names,
        detection_names=("(Intercept)", "x1.p", "x4"),
    )
    designs_mean = DesignMatrices(
        abundance_design=abundance,
        detection_design=detection_design(x4_mean_rows),
        abundance_names=a_names,
        detection_names=("(Intercept)", "x1.p", "x4.m"),
    )

    return SimOutput(
        config=config,
        table_mean=table_mean,
        table_survey=table_survey,
        designs_mean=designs_mean,
        designs_survey=designs_survey,
        true_lambda=lam.T.reshape(k * s),
        true_n=n_latent.T.reshape(k * s).astype(float),
        x1=x1,
        x2=x2,
        x3=x3,
        x4=x4,
        x4_mean=x4_mean,
    )
