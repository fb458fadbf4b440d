__all__ = (
    "BiomarkerSpec",
    "ModelSpec",
    "Dataset",
    "load_dataset",
    "write_dataset",
    "build_designs",
    "Params",
    "BaselineHazard",
    "init_params",
    "pack_omega",
    "unpack_omega",
    "omega_labels",
    "engines",
    "make_engine",
    "posterior_mode",
    "e_step",
    "m_step",
    "FitOptions",
    "FitResult",
    "fit",
    "standard_errors",
    "ScenarioConfig",
    "default_scenario",
    "generate",
    "replicate_study",
    "benchmark",
    "read_params",
    "write_fit_result",
)

from loguru import logger

from .data_model import BiomarkerSpec, Dataset, ModelSpec, build_designs, load_dataset, write_dataset
from .params import BaselineHazard, Params, init_params, omega_labels, pack_omega, unpack_omega
from .riskset_scan import engines, make_engine
from .posterior import e_step, posterior_mode
from .mstep import m_step
from .em_driver import FitOptions, FitResult, fit
from .stderr import standard_errors
from .simulate import ScenarioConfig, default_scenario, generate
from .study import benchmark, replicate_study
from .convert import read_params, write_fit_result

# library users opt in with logger.enable("jm_scan"), the command line does so itself
logger.disable("jm_scan")


# trace EM progress and replicate outcomes in the log
def _init_signals():
    from .signals import em_iteration_finished, replicate_finished

    em_iteration_finished.connect(_log_em_iteration)
    replicate_finished.connect(_log_replicate)


def _log_em_iteration(_, iteration, loglik, criterion, params):
    logger.info(f"EM iteration {iteration}: log-likelihood {loglik:.4f}, max relative change {criterion:.2e}")


def _log_replicate(_, replicate, ok, error):
    if ok:
        logger.debug(f"Replicate {replicate} finished")
    else:
        logger.debug(f"Replicate {replicate} excluded: {error}")


_init_signals()
