"""Physics of the fiber-loop click detector and the outcome transform.

An input pulse is split into a train of time-bins with geometrically
decaying intensity; a binary (click / no-click) detector watches every bin.
The detector outcome is the number of occupied bins, so a Fock input |i>
produces a Poisson binomial distribution over outcomes whose per-bin
success probabilities follow from three physical parameters: the
out-coupling reflectivity, the loop round-trip efficiency and the
detection efficiency.

This module provides the per-bin probabilities, the Poisson binomial
transform (both the exponential-cost enumeration and the discrete-Fourier
closed form), model POVM construction at arbitrary truncation, and a
stochastic pulse simulator used as the synthetic data source.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from .probe_states import poisson_pmf
from .tomography import POVMSet

#: Typical per-bin dark-click probability of the real device (per 2 ns bin).
TYPICAL_DARK_PROB = 3e-8

#: Subset enumeration is refused above this many bins.
BRUTEFORCE_MAX_BINS = 20

_SIM_CHUNK = 1 << 20  # pulses per simulator chunk; fixed so seeds reproduce


@dataclass(frozen=True)
class LoopParams:
    """Physical model parameters of the loop detector.

    reflectivity
        Out-coupling reflectivity of the loop beam splitter, in (0, 1).
    loop_efficiency
        Transmission of one loop round trip, in [0, 1].
    det_efficiency
        Detection efficiency seen by every output pulse, in [0, 1].
    n_bins
        Number of time-bins kept before truncating the pulse train.
    bin_period_ns
        Round-trip time between bins; metadata only.
    """

    reflectivity: float
    loop_efficiency: float
    det_efficiency: float
    n_bins: int
    bin_period_ns: float = 156.0

    def __post_init__(self):
        if not 0.0 < self.reflectivity < 1.0:
            raise ValueError(f"reflectivity must be in (0,1), got {self.reflectivity}")
        if not 0.0 <= self.loop_efficiency <= 1.0:
            raise ValueError(
                f"loop_efficiency must be in [0,1], got {self.loop_efficiency}"
            )
        if not 0.0 <= self.det_efficiency <= 1.0:
            raise ValueError(
                f"det_efficiency must be in [0,1], got {self.det_efficiency}"
            )
        if self.n_bins < 1:
            raise ValueError(f"n_bins must be >= 1, got {self.n_bins}")

    @property
    def n_outcomes(self) -> int:
        return self.n_bins + 1

    def with_bins(self, n_bins: int) -> "LoopParams":
        return LoopParams(
            self.reflectivity,
            self.loop_efficiency,
            self.det_efficiency,
            n_bins,
            self.bin_period_ns,
        )


def per_photon_bin_probs(params: LoopParams) -> np.ndarray:
    """Single-photon click probability of each bin.

    Bin 1 is the directly reflected pulse, q_1 = R * eta_det; later bins
    carry one in-coupling, j-1 round trips and one out-coupling, so
    q_j = (1-R)^2 eta_det / R * (R eta_loop)^(j-1) and successive bins
    decay by exactly R * eta_loop.
    """
    r = params.reflectivity
    q = np.empty(params.n_bins)
    q[0] = r * params.det_efficiency
    if params.n_bins > 1:
        base = (1.0 - r) ** 2 * params.det_efficiency / r
        j = np.arange(2, params.n_bins + 1)
        q[1:] = base * (r * params.loop_efficiency) ** (j - 1)
    return q


def bin_click_prob_fock(params: LoopParams, bin_index: int, n_photons: int) -> float:
    """Probability that bin j clicks for a Fock input of n_photons.

    bin_index is 1-based. Each photon reaches the bin independently, so
    the click probability is 1 - (1 - q_j)^i, evaluated in log space to
    stay exact for photon numbers up to 1e6 and beyond.
    """
    if not 1 <= bin_index <= params.n_bins:
        raise ValueError(f"bin_index {bin_index} outside 1..{params.n_bins}")
    if n_photons < 0:
        raise ValueError(f"n_photons must be >= 0, got {n_photons}")
    q = per_photon_bin_probs(params)[bin_index - 1]
    return float(-np.expm1(n_photons * np.log1p(-q)))


def bin_click_prob_coherent(
    params: LoopParams, mean_photon: float, bin_index: int
) -> float:
    """Probability that bin j clicks for a coherent input of given mean.

    The Poisson mixture of 1 - (1-q)^i collapses to 1 - exp(-mu q), which
    avoids any Fock truncation and is what makes means of order 1e5 cheap.
    """
    if not 1 <= bin_index <= params.n_bins:
        raise ValueError(f"bin_index {bin_index} outside 1..{params.n_bins}")
    if mean_photon < 0:
        raise ValueError(f"mean_photon must be >= 0, got {mean_photon}")
    q = per_photon_bin_probs(params)[bin_index - 1]
    return float(-np.expm1(-mean_photon * q))


def coherent_bin_probs(params: LoopParams, mean_photon: float) -> np.ndarray:
    """Vector of 1 - exp(-mu q_j) over all bins."""
    if mean_photon < 0:
        raise ValueError(f"mean_photon must be >= 0, got {mean_photon}")
    return -np.expm1(-mean_photon * per_photon_bin_probs(params))


def _validate_probs(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    if p.ndim != 1:
        raise ValueError("probability vector must be one-dimensional")
    if p.size and (p.min() < 0.0 or p.max() > 1.0):
        raise ValueError("bin probabilities must lie in [0, 1]")
    return p


def poisson_binomial_bruteforce(p, n: int) -> float:
    """Exact subset-enumeration probability of n successes.

    Cost grows as the binomial coefficient, so inputs longer than
    BRUTEFORCE_MAX_BINS are refused. Kept as the independent oracle for
    poisson_binomial_closed.
    """
    p = _validate_probs(p)
    nb = p.size
    if nb > BRUTEFORCE_MAX_BINS:
        raise ValueError(
            f"enumeration over {nb} bins refused (limit {BRUTEFORCE_MAX_BINS})"
        )
    if not 0 <= n <= nb:
        raise ValueError(f"n={n} outside 0..{nb}")
    comp = 1.0 - p
    total = 0.0
    for subset in itertools.combinations(range(nb), n):
        term = 1.0
        chosen = set(subset)
        for j in range(nb):
            term *= p[j] if j in chosen else comp[j]
        total += term
    return total


def poisson_binomial_pmf(p) -> np.ndarray:
    """Full Poisson binomial pmf over 0..len(p) successes.

    Discrete-Fourier closed form: with C = exp(2 pi i / (N+1)), the pmf is
    the inverse transform of the characteristic products
    prod_j (1 + (C^l - 1) p_j). Roundoff leaves imaginary residue below
    1e-10 (checked) and sub-1e-15 negative excursions (clamped to 0).
    """
    p = _validate_probs(p)
    nb = p.size
    if nb == 0:
        return np.array([1.0])
    roots = np.exp(2j * np.pi * np.arange(nb + 1) / (nb + 1))
    z = np.prod(1.0 + (roots[:, None] - 1.0) * p[None, :], axis=1)
    spectrum = np.fft.fft(z)
    if np.abs(spectrum.imag).max() / (nb + 1) > 1e-10:
        raise ArithmeticError("imaginary residue above 1e-10 in closed form")
    return np.clip(spectrum.real / (nb + 1), 0.0, 1.0)


def poisson_binomial_closed(p, n: int) -> float:
    """Closed-form Poisson binomial probability of n successes."""
    p = _validate_probs(p)
    if not 0 <= n <= p.size:
        raise ValueError(f"n={n} outside 0..{p.size}")
    return float(poisson_binomial_pmf(p)[n])


def _poisson_binomial_pmf_rows(pmat: np.ndarray) -> np.ndarray:
    """Row-wise closed form: (rows, nb) probabilities -> (rows, nb+1) pmfs."""
    rows, nb = pmat.shape
    roots = np.exp(2j * np.pi * np.arange(nb + 1) / (nb + 1))
    z = np.ones((rows, nb + 1), dtype=complex)
    for j in range(nb):
        z *= 1.0 + (roots[None, :] - 1.0) * pmat[:, j : j + 1]
    return np.clip(np.fft.fft(z, axis=1).real / (nb + 1), 0.0, 1.0)


def fock_bin_prob_rows(params: LoopParams, photon_numbers: np.ndarray) -> np.ndarray:
    """Matrix of bin click probabilities, one row per Fock photon number."""
    q = per_photon_bin_probs(params)
    i = np.asarray(photon_numbers, dtype=float)[:, None]
    return -np.expm1(i * np.log1p(-q[None, :]))


def fock_outcome_distribution(params: LoopParams, n_photons: int) -> np.ndarray:
    """Outcome distribution (occupied-bin counts) for a Fock input."""
    if n_photons < 0:
        raise ValueError(f"n_photons must be >= 0, got {n_photons}")
    probs = fock_bin_prob_rows(params, np.array([n_photons]))
    return _poisson_binomial_pmf_rows(probs)[0]


def model_povm_rows(
    params: LoopParams, photon_numbers: np.ndarray
) -> np.ndarray:
    """Model POVM rows for the given photon numbers, (len, n_bins+1)."""
    return _poisson_binomial_pmf_rows(fock_bin_prob_rows(params, photon_numbers))


def build_model_povm(
    params: LoopParams, truncation_dim: int, chunk_rows: int = 100_000
) -> POVMSet:
    """Model POVM on Fock states 0..truncation_dim.

    Rows are computed independently in chunks, so truncations up to 1e6
    photon numbers need no more transient memory than one chunk of complex
    characteristic products.
    """
    if truncation_dim < 0:
        raise ValueError(f"truncation_dim must be >= 0, got {truncation_dim}")
    n_rows = truncation_dim + 1
    theta = np.empty((n_rows, params.n_outcomes))
    for start in range(0, n_rows, chunk_rows):
        stop = min(start + chunk_rows, n_rows)
        theta[start:stop] = model_povm_rows(params, np.arange(start, stop))
    return POVMSet(theta)


@dataclass(frozen=True)
class ClickSample:
    """Result of a joint pulse-train simulation."""

    bin_counts: np.ndarray
    outcome_counts: np.ndarray
    n_pulses: int

    @property
    def bin_probabilities(self) -> np.ndarray:
        return self.bin_counts / self.n_pulses

    @property
    def outcome_frequencies(self) -> np.ndarray:
        return self.outcome_counts / self.n_pulses


def _effective_click_probs(
    params: LoopParams, mean_photon: float, dark_prob: float
) -> np.ndarray:
    if dark_prob < 0 or dark_prob >= 1:
        raise ValueError(f"dark_prob must be in [0,1), got {dark_prob}")
    c = coherent_bin_probs(params, mean_photon)
    if dark_prob:
        c = 1.0 - (1.0 - c) * (1.0 - dark_prob)
    return c


def simulate_bin_clicks(
    params: LoopParams,
    mean_photon: float,
    n_pulses: int,
    seed: int,
    dark_prob: float = 0.0,
) -> ClickSample:
    """Simulate n_pulses pulse trains with independent per-bin clicks.

    Every (pulse, bin) pair is an independent Bernoulli trial, which makes
    the joint occupied-bin histogram exactly the Poisson binomial of the
    marginal rates. Chunking is fixed-size so a given seed reproduces the
    identical sample regardless of available memory.
    """
    if n_pulses < 1:
        raise ValueError(f"n_pulses must be >= 1, got {n_pulses}")
    c = _effective_click_probs(params, mean_photon, dark_prob)
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    bin_counts = np.zeros(params.n_bins, dtype=np.int64)
    outcome_counts = np.zeros(params.n_outcomes, dtype=np.int64)
    done = 0
    while done < n_pulses:
        chunk = min(_SIM_CHUNK, n_pulses - done)
        occupied = np.zeros(chunk, dtype=np.int16)
        for j in range(params.n_bins):
            clicks = rng.random(chunk) < c[j]
            bin_counts[j] += int(clicks.sum())
            occupied += clicks
        outcome_counts += np.bincount(occupied, minlength=params.n_outcomes)
        done += chunk
    return ClickSample(bin_counts, outcome_counts, n_pulses)


def simulate_bin_totals(
    params: LoopParams,
    mean_photon: float,
    n_pulses: int,
    seed: int,
    dark_prob: float = 0.0,
) -> np.ndarray:
    """Per-bin click totals only, via one binomial draw per bin.

    Marginally identical to simulate_bin_clicks but constant-cost in
    n_pulses; use it when the joint occupied-bin histogram is not needed
    (bright-state runs, very large pulse counts).
    """
    if n_pulses < 1:
        raise ValueError(f"n_pulses must be >= 1, got {n_pulses}")
    c = _effective_click_probs(params, mean_photon, dark_prob)
    rng = np.random.default_rng(np.random.SeedSequence([seed]))
    return rng.binomial(n_pulses, c).astype(np.int64)


def mean_occupied_bins(params: LoopParams, mean_photon: float) -> float:
    """Expected number of occupied bins for a coherent input."""
    return float(coherent_bin_probs(params, mean_photon).sum())


def coherent_outcome_distribution(
    params: LoopParams, mean_photon: float
) -> np.ndarray:
    """Outcome distribution for a coherent input, via the analytic rates."""
    return poisson_binomial_pmf(coherent_bin_probs(params, mean_photon))


def fock_sum_bin_prob(
    params: LoopParams,
    mean_photon: float,
    bin_index: int,
    tail_sigmas: float = 8.0,
) -> float:
    """Poisson-weighted Fock sum for one bin; oracle for the analytic form.

    The window extends tail_sigmas standard deviations around the mean with
    a fixed pad of 32 so small means keep negligible truncation error.
    """
    if mean_photon == 0:
        return 0.0
    lo = max(0, math.floor(mean_photon - tail_sigmas * math.sqrt(mean_photon)))
    hi = math.ceil(mean_photon + tail_sigmas * math.sqrt(mean_photon)) + 32
    i = np.arange(lo, hi + 1)
    weights = poisson_pmf(i, mean_photon)
    q = per_photon_bin_probs(params)[bin_index - 1]
    return float(weights @ (-np.expm1(i * np.log1p(-q))))
