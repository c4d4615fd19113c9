"""Readers and writers for the on-disk artifact formats.

All floats are serialized with repr-style shortest round-trip precision
(%.17g in CSV), so identical inputs produce byte-identical files.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .detector_model import LoopParams
from .errors import ConfigError, DataError
from .ingest import OutcomeMatrix, TimeTagHistogram
from .model_fit import FitResult
from .probe_states import ProbeEnsemble
from .tomography import POVMSet, ReconstructionReport, UncertaintyBand

_FLOAT_FMT = "%.17g"


def _load_json(path) -> dict:
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc})") from exc


# -- model parameters ---------------------------------------------------------

def save_params(params: LoopParams, path) -> None:
    doc = {
        "R": params.reflectivity,
        "eta_loop": params.loop_efficiency,
        "eta_det": params.det_efficiency,
        "n_bins": params.n_bins,
        "bin_period_ns": params.bin_period_ns,
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_params(path) -> LoopParams:
    doc = _load_json(path)
    try:
        return LoopParams(
            reflectivity=float(doc["R"]),
            loop_efficiency=float(doc["eta_loop"]),
            det_efficiency=float(doc["eta_det"]),
            n_bins=int(doc["n_bins"]),
            bin_period_ns=float(doc.get("bin_period_ns", 156.0)),
        )
    except KeyError as exc:
        raise ConfigError(f"{path}: missing parameter {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


# -- probe ensembles ----------------------------------------------------------

def save_ensemble(ensemble: ProbeEnsemble, path) -> None:
    doc = {
        "probes": [
            {"label": p.label, "mean_photon": p.mean_photon} for p in ensemble.probes
        ],
        "truncation_dim": ensemble.truncation_dim,
        "tail_sigmas": ensemble.tail_sigmas,
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_ensemble(path) -> ProbeEnsemble:
    doc = _load_json(path)
    if isinstance(doc, list):
        doc = {"probes": doc}
    try:
        means = [float(p["mean_photon"]) for p in doc["probes"]]
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"{path}: malformed probe list") from exc
    return ProbeEnsemble.from_means(
        means,
        truncation_dim=doc.get("truncation_dim"),
        tail_sigmas=float(doc.get("tail_sigmas", 6.0)),
    )


# -- histograms ---------------------------------------------------------------

def save_histogram_csv(hist: TimeTagHistogram, path) -> None:
    lines = ["bin_width_ps,t0_ps"]
    lines.append(f"{_FLOAT_FMT % hist.bin_width_ps},{_FLOAT_FMT % hist.t0_ps}")
    lines.extend(str(c) for c in hist.counts)
    Path(path).write_text("\n".join(lines) + "\n")


def load_histogram_csv(path) -> TimeTagHistogram:
    lines = Path(path).read_text().splitlines()
    if len(lines) < 3 or lines[0].strip() != "bin_width_ps,t0_ps":
        raise ConfigError(f"{path}: not a histogram CSV")
    try:
        bw, t0 = (float(x) for x in lines[1].split(","))
        counts = np.array([int(x) for x in lines[2:] if x.strip()], dtype=np.int64)
    except ValueError as exc:
        raise DataError(f"{path}: {exc}") from exc
    return TimeTagHistogram(counts, bw, t0)


def save_histogram_json(hist: TimeTagHistogram, path) -> None:
    doc = {
        "bin_width_ps": hist.bin_width_ps,
        "t0_ps": hist.t0_ps,
        "counts": [int(c) for c in hist.counts],
    }
    Path(path).write_text(json.dumps(doc) + "\n")


def load_histogram_json(path) -> TimeTagHistogram:
    doc = _load_json(path)
    try:
        return TimeTagHistogram(
            np.asarray(doc["counts"], dtype=np.int64),
            float(doc["bin_width_ps"]),
            float(doc.get("t0_ps", 1000.0)),
        )
    except KeyError as exc:
        raise ConfigError(f"{path}: missing field {exc}") from exc


def load_histogram(path) -> TimeTagHistogram:
    path = Path(path)
    if path.suffix.lower() == ".json":
        return load_histogram_json(path)
    return load_histogram_csv(path)


# -- run manifests ------------------------------------------------------------

def save_manifest(
    runs: list[dict],
    path,
    seed: int,
    dark_prob: float = 0.0,
    n_bins: int | None = None,
    bin_period_ns: float = 156.0,
) -> None:
    """runs: [{"histogram": relpath, "n_pulses": int, "label": int,
    "mean_photon": float}, ...]"""
    doc = {"seed": seed, "dark_prob": dark_prob, "runs": runs}
    if n_bins is not None:
        doc["n_bins"] = n_bins
        doc["bin_period_ns"] = bin_period_ns
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_manifest(path) -> dict:
    doc = _load_json(path)
    if "runs" not in doc or not doc["runs"]:
        raise ConfigError(f"{path}: manifest has no runs")
    return doc


# -- outcome matrices ---------------------------------------------------------

def save_outcome_matrix(matrix: OutcomeMatrix, path) -> None:
    n_out = matrix.n_outcomes
    header = "n_pulses," + ",".join(f"outcome_{n}" for n in range(n_out))
    lines = [header]
    for pulses, row in zip(matrix.n_pulses, matrix.values):
        lines.append(str(int(pulses)) + "," + ",".join(_FLOAT_FMT % v for v in row))
    Path(path).write_text("\n".join(lines) + "\n")


def load_outcome_matrix(path) -> OutcomeMatrix:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("n_pulses,outcome_0"):
        raise ConfigError(f"{path}: not an outcome matrix CSV")
    pulses = []
    rows = []
    for line in lines[1:]:
        if not line.strip():
            continue
        cells = line.split(",")
        pulses.append(int(cells[0]))
        rows.append([float(x) for x in cells[1:]])
    if not rows:
        raise DataError(f"{path}: no outcome rows")
    return OutcomeMatrix(np.asarray(rows), np.asarray(pulses))


# -- POVM sets ----------------------------------------------------------------

def save_povm_csv(povm: POVMSet, path) -> None:
    n_out = povm.n_outcomes
    header = (
        "fock_index,"
        + ",".join(f"outcome_{n}" for n in range(n_out))
        + ",supported"
    )
    supported = (
        povm.supported
        if povm.supported is not None
        else np.ones(povm.truncation_dim + 1, dtype=bool)
    )
    lines = [header]
    for i, (row, sup) in enumerate(zip(povm.theta, supported)):
        lines.append(
            f"{i}," + ",".join(_FLOAT_FMT % v for v in row) + f",{int(sup)}"
        )
    Path(path).write_text("\n".join(lines) + "\n")


def load_povm_csv(path) -> POVMSet:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("fock_index,outcome_0"):
        raise ConfigError(f"{path}: not a POVM CSV")
    rows = []
    supported = []
    for line in lines[1:]:
        if not line.strip():
            continue
        cells = line.split(",")
        rows.append([float(x) for x in cells[1:-1]])
        supported.append(bool(int(cells[-1])))
    if not rows:
        raise DataError(f"{path}: no POVM rows")
    return POVMSet(np.asarray(rows), np.asarray(supported))


def save_report(report: ReconstructionReport, path) -> None:
    doc = {
        "objective": report.objective,
        "residual": report.residual,
        "penalty": report.penalty,
        "smoothness": report.smoothness,
        "iterations": report.iterations,
        "converged": report.converged,
        "grad_norm": report.grad_norm,
        "wall_time_s": report.wall_time_s,
        "epsilon": report.epsilon,
        "n_unsupported": report.n_unsupported,
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def save_band(band: UncertaintyBand, path) -> None:
    n_out = band.lo.shape[1]
    header = "fock_index," + ",".join(
        f"lo_{n},hi_{n}" for n in range(n_out)
    )
    lines = [header]
    for i, (lo, hi) in enumerate(zip(band.lo, band.hi)):
        cells = []
        for n in range(n_out):
            cells.append(_FLOAT_FMT % lo[n])
            cells.append(_FLOAT_FMT % hi[n])
        lines.append(f"{i}," + ",".join(cells))
    Path(path).write_text("\n".join(lines) + "\n")


def load_band(path) -> tuple[np.ndarray, np.ndarray]:
    lines = Path(path).read_text().splitlines()
    if not lines or not lines[0].startswith("fock_index,lo_0"):
        raise ConfigError(f"{path}: not a band CSV")
    lo_rows, hi_rows = [], []
    for line in lines[1:]:
        if not line.strip():
            continue
        vals = [float(x) for x in line.split(",")[1:]]
        lo_rows.append(vals[0::2])
        hi_rows.append(vals[1::2])
    return np.asarray(lo_rows), np.asarray(hi_rows)


# -- fit results and estimates ------------------------------------------------

def save_fit_result(result: FitResult, path) -> None:
    doc = {
        "params": {
            "R": result.params.reflectivity,
            "eta_loop": result.params.loop_efficiency,
            "eta_det": result.params.det_efficiency,
            "n_bins": result.params.n_bins,
            "bin_period_ns": result.params.bin_period_ns,
        },
        "residual": result.residual,
        "uncertainties": {
            "R": result.uncertainties[0],
            "eta_loop": result.uncertainties[1],
            "eta_det": result.uncertainties[2],
        },
        "converged": result.converged,
        "warnings": list(result.warnings),
        "n_evaluations": result.n_evaluations,
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_fit_params(path) -> LoopParams:
    doc = _load_json(path)
    p = doc.get("params", doc)
    return LoopParams(
        reflectivity=float(p["R"]),
        loop_efficiency=float(p["eta_loop"]),
        det_efficiency=float(p["eta_det"]),
        n_bins=int(p["n_bins"]),
        bin_period_ns=float(p.get("bin_period_ns", 156.0)),
    )


def save_estimate(estimate, path) -> None:
    doc = {
        "mean_photon": estimate.mean_photon,
        "residual": estimate.residual,
        "confidence_interval": list(estimate.confidence_interval),
        "method": estimate.method,
        "curvature_interval": list(estimate.curvature_interval),
        "bootstrap_interval": (
            list(estimate.bootstrap_interval)
            if estimate.bootstrap_interval is not None
            else None
        ),
        "n_bootstrap": estimate.n_bootstrap,
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")
