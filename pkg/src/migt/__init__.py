"""Gated instance-attention transformer policy for portfolio management, trained with PPO."""

from .autodiff import Tensor, backward, grad_check
from .backtest import BaselineStrategy, MetricsConfig, PolicyStrategy, all_metrics, run_backtest
from .env import EnvConfig, PortfolioEnv
from .indicators import IndicatorConfig, compute_features
from .market_data import PanelData, load_ohlcv, synth_market
from .policy import AttentionConfig, MIGTPolicy, PolicyConfig, load_checkpoint, save_checkpoint
from .ppo import PPOConfig, train

__all__ = [
    "AttentionConfig", "BaselineStrategy", "EnvConfig", "IndicatorConfig", "MIGTPolicy", "MetricsConfig",
    "PPOConfig", "PanelData", "PolicyConfig", "PolicyStrategy", "PortfolioEnv", "Tensor", "all_metrics",
    "backward", "compute_features", "grad_check", "load_checkpoint", "load_ohlcv", "run_backtest",
    "save_checkpoint", "synth_market", "train",
]
__version__ = "0.1.0"
