"""Line-streaming encoder/decoder CNN with a recursive bottleneck: model, streaming engine, codec and cost model."""

from .config import NetworkConfig, fir_ablation_config, load_config, reference_config
from .errors import MagicError
from .model import MagicModel, build_model, forward
from .streaming import plan_schedule, stream_infer

__version__ = "0.1.0"

__all__ = [
    "MagicError", "MagicModel", "NetworkConfig", "build_model", "fir_ablation_config",
    "forward", "load_config", "plan_schedule", "reference_config", "stream_infer",
]
