"""
Serialization of parameters and fit results.

The parameter document has the keys, in this order::

    schema_version, omega {label: value} in packed Ω order, hazards [{cause, times, jumps, counts}]

with hazard times increasing. A fit result document adds ``converged``, ``iterations``,
``loglik_trace``, ``timings``, ``op_count`` and ``se`` ({label: value or null}).
"""
import json
import math
from pathlib import Path

import numpy as np
import pandas as pd
from loguru import logger

from .data_model import ModelSpec
from .em_driver import FitResult
from .errors import SchemaError
from .params import BaselineHazard, Params, omega_labels, pack_omega, unpack_omega

SCHEMA_VERSION = 1
Z_95 = 1.96


def _number(x: float) -> float | None:
    return None if x is None or math.isnan(x) else float(x)


def params_to_dict(params: Params, spec: ModelSpec) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "omega": dict(zip(omega_labels(spec), map(float, pack_omega(params)))),
        "hazards": [
            {
                "cause": k + 1,
                "times": h.times[::-1].tolist(),
                "jumps": h.jumps[::-1].tolist(),
                "counts": h.counts[::-1].tolist(),
            }
            for k, h in enumerate(params.hazards)
        ],
    }


def params_from_dict(data: dict, spec: ModelSpec) -> Params:
    """
    Inverse of :func:`params_to_dict`.

    Raises:
        SchemaError: If the document lacks keys or labels do not match the specification.
    """
    try:
        if data["schema_version"] != SCHEMA_VERSION:
            raise SchemaError(f"Unsupported schema version {data['schema_version']}")
        omega = data["omega"]
        labels = omega_labels(spec)
        if set(omega) != set(labels):
            missing = sorted(set(labels) - set(omega))
            raise SchemaError(f"Parameter labels do not match the model specification: {missing}")
        hazards = tuple(
            BaselineHazard(
                times=np.array(h["times"], dtype=float)[::-1],
                jumps=np.array(h["jumps"], dtype=float)[::-1],
                counts=np.array(h["counts"], dtype=int)[::-1],
            )
            for h in sorted(data.get("hazards", []), key=lambda h: h["cause"])
        )
    except (KeyError, TypeError) as e:
        raise SchemaError(f"Malformed parameter document: {e}") from e
    return unpack_omega(np.array([omega[label] for label in labels], dtype=float), spec, hazards)


def read_params(path: str | Path, spec: ModelSpec) -> Params:
    """Read parameters from a parameter or fit-result JSON document."""
    with open(path) as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise SchemaError(f"Cannot parse {path}: {e}") from e
    if "params" in data:
        data = data["params"]
    return params_from_dict(data, spec).check(spec)


def fit_result_to_dict(result: FitResult, spec: ModelSpec) -> dict:
    return {
        "schema_version": SCHEMA_VERSION,
        "converged": result.converged,
        "iterations": result.iterations,
        "loglik_trace": [float(x) for x in result.loglik_trace],
        "timings": {phase: float(seconds) for phase, seconds in result.timings.items()},
        "op_count": int(result.op_count),
        "params": params_to_dict(result.params, spec),
        "se": {label: _number(se) for label, se in zip(result.labels, result.se)},
    }


def estimates_frame(result: FitResult) -> pd.DataFrame:
    """One row per Ω component with its 95% Wald interval."""
    estimates = result.estimates
    frame = pd.DataFrame(
        {
            "parameter": result.labels,
            "estimate": estimates,
            "se": result.se,
            "ci_lower": estimates - Z_95 * result.se,
            "ci_upper": estimates + Z_95 * result.se,
        }
    )
    frame.insert(0, "schema_version", SCHEMA_VERSION)
    return frame


def write_fit_result(result: FitResult, spec: ModelSpec, json_file: str | Path, csv_file: str | Path):
    with open(json_file, "w") as f:
        json.dump(fit_result_to_dict(result, spec), f, indent=2)
    estimates_frame(result).to_csv(csv_file, index=False)
    logger.info(f"Wrote {json_file} and {csv_file}")
