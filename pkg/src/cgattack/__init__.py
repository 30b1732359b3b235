"""Flow-guided black-box adversarial attacks at desk scale."""

from .attack import AttackConfig, AttackResult, cg_attack, project_ball
from .classifier import AdvLossSpec, ClassifierModel, QueryOracle, adv_loss, train_classifier
from .cmaes import CmaConfig, ask, cma_init, tell
from .energy import EnergyModel, KLTrainConfig, kl_gradient, pretrain_flow
from .experiment import DeskConfig, ExperimentReport, build_scenario, run_campaign, run_experiment
from .flow import CondFlow, FlowConfig
from .latent import DctDecoder

__all__ = [
    "AdvLossSpec", "AttackConfig", "AttackResult", "ClassifierModel", "CmaConfig", "CondFlow", "DctDecoder",
    "DeskConfig", "EnergyModel", "ExperimentReport", "FlowConfig", "KLTrainConfig", "QueryOracle", "adv_loss",
    "ask", "build_scenario", "cg_attack", "cma_init", "kl_gradient", "pretrain_flow", "project_ball",
    "run_campaign", "run_experiment", "tell", "train_classifier",
]
