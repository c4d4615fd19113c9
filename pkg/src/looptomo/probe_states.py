"""Coherent probe ensembles and their photon-number representation.

The probe set is a list of coherent states with known mean photon numbers.
Their photon-number statistics are Poissonian, so the ensemble is fully
described by a matrix of Poisson rows truncated at a common dimension.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .errors import ConfigError

_LN_SQRT_2PI = 0.5 * math.log(2.0 * math.pi)

#: Completeness a truncated probe row is expected to retain.
ROW_COMPLETENESS_TOL = 1e-9


def _stirling_correction(n: np.ndarray) -> np.ndarray:
    """ln n! - [n ln n - n + 0.5 ln(2 pi n)] for n >= 1, to ~1e-16 absolute."""
    n = np.asarray(n, dtype=float)
    out = np.empty_like(n)
    small = n < 16
    ns = n[small]
    out[small] = gammaln(ns + 1.0) - ((ns + 0.5) * np.log(ns) - ns + _LN_SQRT_2PI)
    nl = n[~small]
    nn = nl * nl
    # truncated Stirling series; next term < 1e-16 for n >= 16
    out[~small] = (
        1 / 12.0
        - (1 / 360.0 - (1 / 1260.0 - (1 / 1680.0 - 1 / (1188.0 * nn)) / nn) / nn) / nn
    ) / nl
    return out


def _poisson_deviance(x: np.ndarray, mu: float) -> np.ndarray:
    """x*ln(x/mu) + mu - x for x > 0, without cancellation near x = mu."""
    x = np.asarray(x, dtype=float)
    out = x * np.log(x / mu) + mu - x
    near = np.abs(x - mu) < 0.1 * (x + mu)
    if np.any(near):
        xn = x[near]
        v = (xn - mu) / (xn + mu)
        s = (xn - mu) * v
        ej = 2.0 * xn * v
        v2 = v * v
        for j in range(1, 13):  # |v| < 0.1 so terms shrink by 1e-2 per step
            ej = ej * v2
            s = s + ej / (2 * j + 1)
        out[near] = s
    return out


def poisson_pmf(counts: np.ndarray, mean_photon: float) -> np.ndarray:
    """Poisson probability mass at the given photon numbers.

    Evaluated through the saddle-point (deviance) form, which stays accurate
    to ~1e-14 relative near the mode even for means of order 1e5, where the
    plain ``exp(i ln mu - mu - lgamma(i+1))`` expression loses digits to
    cancellation between large terms.
    """
    if mean_photon < 0:
        raise ValueError(f"mean_photon must be >= 0, got {mean_photon}")
    counts = np.asarray(counts)
    out = np.zeros(counts.shape, dtype=float)
    if mean_photon == 0.0:
        out[counts == 0] = 1.0
        return out
    zero = counts == 0
    out[zero] = math.exp(-mean_photon)
    pos = counts[~zero].astype(float)
    if pos.size:
        dev = _poisson_deviance(pos, mean_photon)
        out[~zero] = np.exp(-_stirling_correction(pos) - dev) / np.sqrt(
            2.0 * math.pi * pos
        )
    return out


def poisson_row(mean_photon: float, truncation_dim: int) -> np.ndarray:
    """Poisson pmf on photon numbers 0..truncation_dim as a dense row."""
    if truncation_dim < 0:
        raise ValueError(f"truncation_dim must be >= 0, got {truncation_dim}")
    return poisson_pmf(np.arange(truncation_dim + 1), mean_photon)


def default_truncation(max_mean: float, tail_sigmas: float = 6.0) -> int:
    """Truncation that keeps tail_sigmas standard deviations above max_mean."""
    if max_mean < 0:
        raise ValueError(f"max_mean must be >= 0, got {max_mean}")
    return math.ceil(max_mean + tail_sigmas * math.sqrt(max_mean))


@dataclass(frozen=True)
class CoherentProbe:
    """One probe: a coherent state of known mean photon number."""

    mean_photon: float
    label: int = 0

    def __post_init__(self):
        if self.mean_photon < 0:
            raise ValueError(f"mean_photon must be >= 0, got {self.mean_photon}")


@dataclass(frozen=True)
class ProbeEnsemble:
    """Ordered set of coherent probes plus the shared truncation dimension."""

    probes: tuple[CoherentProbe, ...]
    truncation_dim: int
    tail_sigmas: float = 6.0

    def __post_init__(self):
        if not self.probes:
            raise ConfigError("probe ensemble must contain at least one probe")
        object.__setattr__(self, "probes", tuple(self.probes))
        needed = default_truncation(self.max_mean, self.tail_sigmas)
        if self.truncation_dim < needed:
            raise ConfigError(
                f"truncation_dim {self.truncation_dim} below "
                f"{needed} = max_mean + {self.tail_sigmas} sigma"
            )

    @property
    def max_mean(self) -> float:
        return max(p.mean_photon for p in self.probes)

    @property
    def means(self) -> np.ndarray:
        return np.array([p.mean_photon for p in self.probes])

    def __len__(self) -> int:
        return len(self.probes)

    @classmethod
    def from_means(
        cls,
        means,
        truncation_dim: int | None = None,
        tail_sigmas: float = 6.0,
    ) -> "ProbeEnsemble":
        probes = tuple(CoherentProbe(float(m), d) for d, m in enumerate(means))
        if not probes:
            raise ConfigError("probe ensemble must contain at least one probe")
        if truncation_dim is None:
            truncation_dim = default_truncation(
                max(p.mean_photon for p in probes), tail_sigmas
            )
        return cls(probes, truncation_dim, tail_sigmas)

    @classmethod
    def quadratic(
        cls,
        count: int = 71,
        truncation_dim: int | None = 5328,
        tail_sigmas: float = 6.0,
    ) -> "ProbeEnsemble":
        """Quadratically spaced means d^2 for d in [0, count).

        The default truncation 5328 reproduces the standard 71-probe set;
        pass ``truncation_dim=None`` to fall back to the 6-sigma formula.
        """
        return cls.from_means(
            [float(d * d) for d in range(count)], truncation_dim, tail_sigmas
        )


@dataclass(frozen=True)
class ProbeMatrix:
    """Stacked Poisson rows of an ensemble, one probe per row.

    Carries the generating means so operations that re-derive the matrix
    under perturbed amplitudes (Monte-Carlo error bands) need no extra input.
    """

    values: np.ndarray
    mean_photons: np.ndarray
    truncation_dim: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        means = np.asarray(self.mean_photons, dtype=float)
        if values.ndim != 2 or values.shape != (means.size, self.truncation_dim + 1):
            raise ConfigError(
                f"probe matrix shape {values.shape} does not match "
                f"{means.size} probes x truncation {self.truncation_dim}"
            )
        values.flags.writeable = False
        means.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mean_photons", means)

    @property
    def n_probes(self) -> int:
        return self.values.shape[0]

    def row_deficits(self) -> np.ndarray:
        """1 - sum of each row: probability mass lost to truncation."""
        return 1.0 - self.values.sum(axis=1)


def build_probe_matrix(ensemble: ProbeEnsemble) -> ProbeMatrix:
    """Evaluate the Poisson row of every probe at the ensemble truncation.

    Emits a warning when a truncated row retains less than
    ``1 - ROW_COMPLETENESS_TOL`` of its mass; the 6-sigma rule guarantees
    that only for the largest probe of a wide ensemble, not for an isolated
    mid-range mean.
    """
    means = ensemble.means
    trunc = ensemble.truncation_dim
    values = np.vstack([poisson_row(m, trunc) for m in means])
    deficit = 1.0 - values.sum(axis=1)
    worst = deficit.max()
    if worst > ROW_COMPLETENESS_TOL:
        bad = int(np.argmax(deficit))
        warnings.warn(
            f"probe {bad} (mean {means[bad]:g}) loses {worst:.2e} of its mass "
            f"to truncation at {trunc}",
            stacklevel=2,
        )
    return ProbeMatrix(values, means, trunc)
