"""Model families with closed-form coordinate updates."""
from .base import FisherBundle, Model
from .gmm import GmmModel, gmm_elbo, gmm_em, gmm_fisher_bundle, gmm_update, mixture_loglik
from .normal import NormalModel, normal_elbo, normal_update
from .probit import (BLOCK, FACTORIZED, ProbitModel, probit_elbo, probit_fisher_bundle,
                     probit_mle, probit_projection, probit_update_block,
                     probit_update_factorized)
from .sbm import SbmModel, sbm_elbo, sbm_update
from .target import GaussianTarget

__all__ = [
    "FisherBundle", "Model", "GmmModel", "gmm_elbo", "gmm_em", "gmm_fisher_bundle", "gmm_update",
    "mixture_loglik", "NormalModel", "normal_elbo", "normal_update", "BLOCK", "FACTORIZED",
    "ProbitModel", "probit_elbo", "probit_fisher_bundle", "probit_mle", "probit_projection",
    "probit_update_block",
    "probit_update_factorized", "SbmModel", "sbm_elbo", "sbm_update", "GaussianTarget",
    "mle_and_loglik", "fisher_bundle",
]


def mle_and_loglik(model, **kwargs):
    """Maximum-likelihood estimate and maximal marginal log-likelihood.

    Normal: closed form. Probit: Newton. GMM: multi-start EM. SBM: the
    variational mean of a converged fit, passed as ``state=``, with the
    plug-in likelihood.
    """
    if isinstance(model, SbmModel):
        state = kwargs.get("state")
        if state is None:
            from ..engine import run_cavi, Schedule, PARALLEL
            state, _ = run_cavi(model, model.initial_state(kwargs.get("seed", 0)), Schedule(PARALLEL))
        return state.parameter_factors[0].mean(), model.plugin_loglik(state)
    return model.mle(**kwargs)


def fisher_bundle(model, theta_star, **kwargs) -> FisherBundle:
    """Information bundle at ``theta_star`` (analytic or Monte Carlo per family)."""
    if isinstance(model, SbmModel):
        from ..core import UsageError
        raise UsageError("the SBM has no tractable Fisher information")
    return model.fisher_bundle(theta_star, **kwargs)
