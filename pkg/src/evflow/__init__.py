"""Self-supervised optical flow from event streams with spiking and recurrent toy networks."""

from .events import EventPartition, parse_events, partition_fixed_count, rasterize_counts, synth_translating_scene
from .loss import TrainPartition, contrast_loss, total_flow_loss
from .network import Network, build_firenet, build_toy_firenet
from .train import TrainConfig, train_loop

__version__ = "0.1.0"

__all__ = [
    "EventPartition",
    "Network",
    "TrainConfig",
    "TrainPartition",
    "build_firenet",
    "build_toy_firenet",
    "contrast_loss",
    "parse_events",
    "partition_fixed_count",
    "rasterize_counts",
    "synth_translating_scene",
    "total_flow_loss",
    "train_loop",
]
