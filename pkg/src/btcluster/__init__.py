"""Flow-level simulation of BitTorrent swarms deployed on a cluster, plus an
analytical capacity planner for such experiments.

Rates are bytes/s throughout; config files use decimal MB (1e6 bytes).
"""

from .agent import AgentParams, PeerConfig
from .config import ExperimentConfig, dump_config, load_config, parse_config
from .engine import SimConfig, Simulation, SimSummary, aggregated_bandwidth, average_download_rate, run
from .metrics import MetricsSink, native_traffic_share, native_upload_fraction, write_streams
from .netfluid import NodeSpec, allocate_rates, control_delay, progressive_fill
from .planner import ExperimentPlan, check_constraints, naive_fit, naive_max_peers, traffic_matrix
from .protocol import TorrentMeta, piece_layout_v4, piece_layout_v5, upload_slots
from .tracker import Tracker

__version__ = "0.1.0"

__all__ = [
    "AgentParams",
    "PeerConfig",
    "ExperimentConfig",
    "dump_config",
    "load_config",
    "parse_config",
    "SimConfig",
    "Simulation",
    "SimSummary",
    "aggregated_bandwidth",
    "average_download_rate",
    "run",
    "MetricsSink",
    "native_traffic_share",
    "native_upload_fraction",
    "write_streams",
    "NodeSpec",
    "allocate_rates",
    "control_delay",
    "progressive_fill",
    "ExperimentPlan",
    "check_constraints",
    "naive_fit",
    "naive_max_peers",
    "traffic_matrix",
    "TorrentMeta",
    "piece_layout_v4",
    "piece_layout_v5",
    "upload_slots",
    "Tracker",
]
