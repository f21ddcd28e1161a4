"""Interactive imitation learning gated by stochastic reach-tubes."""

from .envs import make_system, rollout
from .gating import DoubtGateConfig, TubeGateConfig
from .policies import OptimConfig, default_expert, default_novice
from .reachtube import ReachTube, TubeConfig, TubeSlice, build_tube, membership
from .dagger import TrainConfig, lazydagger_train, tubedagger_train
from .safety import ellipsoid_contained, tube_contained

__version__ = "0.1.0"
