"""
Monte Carlo parameter-recovery studies and scan-versus-naive benchmarks.
"""
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np
import pandas as pd
from loguru import logger
from tqdm import tqdm

from .em_driver import FitOptions, fit
from .errors import JointModelError
from .params import omega_labels, pack_omega
from .signals import replicate_finished
from .simulate import ScenarioConfig, generate

SCHEMA_VERSION = 1
Z_95 = 1.96


def _run_replicate(
    scn: ScenarioConfig, index: int, stream: np.random.SeedSequence, opts: FitOptions
) -> tuple[np.ndarray, np.ndarray] | None:
    spec = scn.model_spec()
    try:
        ds = generate(scn, stream)
        result = fit(ds, spec, opts)
    except JointModelError as e:
        logger.warning(f"Replicate {index} failed: {e}")
        replicate_finished.send(scn, replicate=index, ok=False, error=str(e))
        return None
    replicate_finished.send(scn, replicate=index, ok=True, error=None)
    return result.estimates, result.se


def summarize_replicates(
    truth: np.ndarray, estimates: np.ndarray, se: np.ndarray, labels: list[str]
) -> pd.DataFrame:
    """
    Bias, empirical SD, median SE and 95% Wald coverage (in %) per parameter.

    Args:
        truth (np.ndarray): True Ω.
        estimates (np.ndarray): Estimates, one row per successful replicate.
        se (np.ndarray): Standard errors, same shape as ``estimates``.
        labels (list[str]): Parameter labels.

    Returns:
        pd.DataFrame: Columns ``schema_version, parameter, truth, bias, sd, se, cp, replicates``.
            ``sd`` is NaN with fewer than two replicates.
    """
    estimates = np.atleast_2d(estimates)
    se = np.atleast_2d(se)
    R = len(estimates)
    with np.errstate(invalid="ignore"):
        covered = np.abs(estimates - truth) <= Z_95 * se
    frame = pd.DataFrame(
        {
            "parameter": labels,
            "truth": truth,
            "bias": estimates.mean(axis=0) - truth if R else np.nan,
            "sd": estimates.std(axis=0, ddof=1) if R > 1 else np.nan,
            "se": np.nanmedian(se, axis=0) if R else np.nan,
            "cp": 100 * covered.mean(axis=0) if R else np.nan,
            "replicates": R,
        }
    )
    if R:
        frame.loc[np.isnan(se).all(axis=0), "cp"] = np.nan
    frame.insert(0, "schema_version", SCHEMA_VERSION)
    return frame


def replicate_study(
    scn: ScenarioConfig,
    replicates: int,
    seed: int,
    opts: FitOptions | None = None,
    threads: int = 1,
    progress: bool = True,
) -> tuple[pd.DataFrame, int]:
    """
    Repeated generate → fit cycles and their summary statistics.

    Replicate r uses the r-th stream spawned from ``seed``. Failed replicates are logged, excluded
    from the summary and counted.

    Args:
        scn (ScenarioConfig): Data-generating scenario.
        replicates (int): Number of replicates R.
        seed (int): Root seed.
        opts (FitOptions, optional): Fit settings for every replicate.
        threads (int): Replicates run in parallel on this many threads.
        progress (bool): Show a progress bar.

    Returns:
        tuple[pd.DataFrame, int]: Summary table and number of failed replicates.
    """
    opts = opts or FitOptions()
    streams = np.random.SeedSequence(seed).spawn(replicates)

    def run(r: int):
        return _run_replicate(scn, r, streams[r], opts)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as executor:
            outcomes = list(
                tqdm(executor.map(run, range(replicates)), total=replicates, disable=not progress)
            )
    else:
        outcomes = [run(r) for r in tqdm(range(replicates), disable=not progress)]

    succeeded = [outcome for outcome in outcomes if outcome is not None]
    failures = replicates - len(succeeded)
    if failures:
        logger.warning(f"{failures} of {replicates} replicates failed and were excluded")

    spec = scn.model_spec()
    labels = omega_labels(spec)
    truth = pack_omega(scn.true_params())
    if succeeded:
        estimates = np.array([e for e, _ in succeeded])
        se = np.array([s for _, s in succeeded])
    else:
        estimates = se = np.empty((0, len(labels)))
    return summarize_replicates(truth, estimates, se, labels), failures


def benchmark(
    scn: ScenarioConfig,
    sizes: list[int],
    engine_names: list[str],
    seed: int,
    opts: FitOptions | None = None,
) -> pd.DataFrame:
    """
    Wall time and scan operation counts of one fit per (n, engine).

    The same dataset is fitted by every engine for a given n.

    Returns:
        pd.DataFrame: Columns ``schema_version, n, engine, wall_ms, op_count, iterations``.
    """
    opts = opts or FitOptions(threads=1)
    spec = scn.model_spec()
    records = []
    for n in sizes:
        ds = generate(scn, seed, n=n)
        for name in engine_names:
            start = time.perf_counter()
            result = fit(ds, spec, replace(opts, engine=name))
            wall_ms = 1000 * (time.perf_counter() - start)
            logger.info(f"n={n} engine={name}: {wall_ms:.0f} ms, {result.op_count} scan operations")
            records.append(
                {
                    "schema_version": SCHEMA_VERSION,
                    "n": n,
                    "engine": name,
                    "wall_ms": wall_ms,
                    "op_count": result.op_count,
                    "iterations": result.iterations,
                }
            )
    return pd.DataFrame.from_records(records)
