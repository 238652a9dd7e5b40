import numpy as np
import pytest

from btcluster.agent import AgentParams, PeerConfig
from btcluster.engine import (
    ConfigError,
    SimConfig,
    Simulation,
    SimulationError,
    aggregated_bandwidth,
    average_download_rate,
)
from btcluster.metrics import MetricsSink
from btcluster.netfluid import NodeSpec
from btcluster.protocol import KiB, MiB, TorrentMeta, piece_layout_v4

MB = 1e6


def _nodes(*ids):
    return [NodeSpec(i, 500 * MB, 125 * MB, 125 * MB) for i in ids]


def _swarm(n=10, size=4 * MiB, ul=5 * MB, dl=5 * MB, strategy="rarest", seed=3, **kw):
    peers = [PeerConfig(i + 1, "n%d" % (i % 2), max_upload=ul, max_download=dl, piece_strategy=strategy)
             for i in range(n)]
    return SimConfig(nodes=_nodes("n0", "n1", "s"), torrent=TorrentMeta.from_sizes(size, 256 * KiB, 64 * KiB),
                     peers=peers, seed=PeerConfig(0, "s", max_upload=5 * MB, slots=4), rng_seed=seed,
                     **{"control_floor": 5e-4, **kw})


class TickOracle:
    """Checks conservation and bookkeeping invariants after every tick."""

    def __init__(self):
        self.ticks = 0

    def __call__(self, sim, k):
        self.ticks += 1
        ags = sim.agents
        arr = sim.arrays
        up = sum(a.bytes_up for a in ags)
        down = sum(a.bytes_down for a in ags)
        assert up == down
        assert int(sim.links.bytes.sum()) == up
        for a in ags:
            assert a.down_native + a.down_foreign == a.bytes_down
            assert a.bytes_down <= arr.meta.file_size
        # recount availability from scratch
        for a in sim.active:
            expect = np.zeros(arr.meta.piece_count, dtype=np.int64)
            for b in a.buddies:
                expect += arr.known[a.node_idx, b]
            np.testing.assert_array_equal(a.avail, expect)
        # nobody hears about pieces that were never completed
        for d in range(sim.N):
            assert not (arr.known[d] & ~arr.have).any()
        assert not (arr.have & ~arr.started).any()
        assert np.all(arr.got <= arr.slice_counts)
        np.testing.assert_array_equal(arr.have, arr.got == arr.slice_counts)
        for a in ags:
            open_ok = np.zeros_like(a.want)
            for p, free in a.open_pieces.items():
                open_ok[p] = bool(free)
            np.testing.assert_array_equal(a.want, ~a.started | open_ok)
        _flows, _rates, usage = sim.last_rates
        assert np.all(usage <= sim.capacity * (1 + 1e-9) + 1e-6)


@pytest.mark.parametrize("strategy", ["rarest", "random"])
def test_conservation_every_tick(strategy):
    oracle = TickOracle()
    summary = Simulation(_swarm(strategy=strategy), on_tick=oracle).run()
    assert oracle.ticks == summary.ticks > 0
    assert summary.all_finished
    assert summary.bytes_up_total == summary.bytes_down_total == 10 * summary.file_size


def test_leavers_keep_oracles():
    cfg = _swarm()
    cfg.peers[:4] = [PeerConfig(p.peer_id, p.node, p.max_upload, p.max_download, leave_after=0.0)
                     for p in cfg.peers[:4]]
    sink = MetricsSink()
    summary = Simulation(cfg, sink, on_tick=TickOracle()).run()
    assert summary.all_finished
    assert sum(e.kind == "left" for e in sink.events) >= 1


def test_single_leecher_transfer_time():
    """Only the seed's 5 MB/s upload limits: about size / 5 MB/s, within one rechoke period."""
    cfg = SimConfig(nodes=_nodes("a", "b"), torrent=piece_layout_v4(256 * MiB, 64 * KiB, 512 * KiB),
                    peers=[PeerConfig(1, "b")], seed=PeerConfig(0, "a", max_upload=5 * MB))
    summary = Simulation(cfg).run()
    oracle = 256 * MiB / (5 * MB)
    finish = summary.leechers[0].finish_time
    assert oracle <= finish <= oracle + cfg.params.rechoke_period


def test_download_capped_swarm_rate():
    peers = [PeerConfig(i, "a", max_download=5 * MB) for i in range(1, 11)]
    cfg = SimConfig(nodes=_nodes("a", "s"), torrent=piece_layout_v4(256 * MiB, 64 * KiB, 512 * KiB),
                    peers=peers, seed=PeerConfig(0, "s", max_upload=5 * MB), rng_seed=1)
    summary = Simulation(cfg).run()
    assert summary.all_finished
    assert 4 * MB <= average_download_rate(summary) <= 5 * MB


def test_no_leechers():
    cfg = _swarm(n=0)
    summary = Simulation(cfg).run()
    assert summary.leechers == [] and summary.ticks <= 1
    with pytest.raises(ValueError):
        average_download_rate(summary)


def test_aggregate_is_rate_times_peers():
    summary = Simulation(_swarm()).run()
    assert aggregated_bandwidth(summary) == pytest.approx(10 * average_download_rate(summary))
    assert aggregated_bandwidth(summary, "leechers") == aggregated_bandwidth(summary)


def test_same_seed_same_run():
    a, b = MetricsSink(), MetricsSink()
    Simulation(_swarm(seed=11), a).run()
    Simulation(_swarm(seed=11), b).run()
    assert a.snapshots == b.snapshots and a.events == b.events
    c = MetricsSink()
    Simulation(_swarm(seed=12), c).run()
    assert c.snapshots != a.snapshots


def test_duration_and_budget():
    summary = Simulation(_swarm(duration=2.0)).run()
    assert summary.end_time == pytest.approx(2.0)
    assert not summary.all_finished
    with pytest.raises(SimulationError):
        Simulation(_swarm(max_ticks=5)).run()


@pytest.mark.parametrize("change", [
    dict(tick=0), dict(snapshot_s=0.25, tick=0.1), dict(control_floor=0.0), dict(duration=-1.0),
])
def test_invalid_config(change):
    with pytest.raises(ConfigError):
        Simulation(_swarm(**change))


def test_unknown_node_and_unbounded_seed():
    cfg = _swarm()
    cfg.peers[0] = PeerConfig(1, "nowhere")
    with pytest.raises(ConfigError):
        Simulation(cfg)
    cfg = _swarm()
    cfg.seed = PeerConfig(0, "s")
    with pytest.raises(ConfigError):
        Simulation(cfg)


def test_events_lifecycle_order():
    sink = MetricsSink()
    Simulation(_swarm(n=4), sink).run()
    for pid in range(1, 5):
        kinds = [e.kind for e in sink.events if e.peer_id == pid]
        assert kinds[0] == "started"
        assert kinds.index("joined") < kinds.index("download-finished")
        assert kinds.count("piece-complete") == 16
        assert kinds[-1] == "download-finished"


def test_agent_params_default_slots():
    assert PeerConfig(1, "a").upload_slots() == 7
    assert PeerConfig(1, "a", max_upload=5 * MB).upload_slots() == 54
    assert PeerConfig(1, "a", slots=3).upload_slots() == 3
    with pytest.raises(ValueError):
        PeerConfig(1, "a", piece_strategy="sequential")
    assert AgentParams().pipeline_depth > 0
