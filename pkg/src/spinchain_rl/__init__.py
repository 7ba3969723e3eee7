"""Reinforcement learning and quasi-Newton control of spin-chain state transfer."""

from .dynamics import ChainSpec, ContractError, Controller, fidelity, fidelity_and_gradient
from .env import EnvConfig, SpinChainEnv
from .noise import NoiseConfig

__all__ = [
    "ChainSpec", "ContractError", "Controller", "EnvConfig", "NoiseConfig", "SpinChainEnv",
    "fidelity", "fidelity_and_gradient",
]
__version__ = "0.1.0"
