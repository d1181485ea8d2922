"""Bandit-driven routing of frozen source representations into a target network."""

from .bandit import BanditState, alpha_schedule
from .errors import ConfigError, GraphError, ShapeError
from .harness import ExperimentConfig, ablate_ops, gen_sinc, gen_sine, pretrain_source, run_experiment, sweep_samples
from .numgrad import DenseBlock, LayeredNet, Tensor, cosine_lr, forward, grad_check, make_mlp, sgd_step
from .routing import NULL, RouteParamStore, RoutingAction, SourceTransform, aggregate, build_action_space, routed_forward, transform
from .transfer import Dataset, TrainSettings, evaluate_gain, make_run, run_transfer, shape_reward, train_epoch

__version__ = "0.1.0"
