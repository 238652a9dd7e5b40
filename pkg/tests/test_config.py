from pathlib import Path

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from btcluster.config import (
    ConfigError,
    ExperimentConfig,
    NodeEntry,
    PeerGroup,
    SeedSection,
    SimSection,
    TorrentSection,
    dump_config,
    load_config,
    parse_config,
)
from btcluster.engine import ConfigError as EngineConfigError
from btcluster.planner import traffic_matrix

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

MINIMAL = """\
[cluster]
nodes = a, s
loopback_MBps = 500
nic_ul_MBps = 125
nic_dl_MBps = 125

[torrent]
file_size_MB = 16

[peers.a]
count = 3
node = a
ul_cap_MBps = 5

[seedpeer]
node = s
ul_cap_MBps = 5
"""


def test_minimal_defaults():
    cfg = parse_config(MINIMAL)
    (g,) = cfg.groups
    assert g.dl_cap_MBps is None and g.slots is None and g.strategy == "rarest"
    assert cfg.sim == SimSection()
    sim = cfg.to_sim_config()
    assert len(sim.peers) == 3 and sim.seed.max_upload == 5e6
    assert sim.torrent.file_size == 16_000_000


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.ini")), ids=lambda p: p.name)
def test_bundled_configs_load(path):
    cfg = load_config(path)
    assert parse_config(dump_config(cfg)) == cfg
    cfg.to_sim_config().validate()


def test_reference_plan_from_config():
    plan = load_config(CONFIGS / "plan_t40.ini").to_plan()
    assert plan.m == (40, 40)
    assert traffic_matrix(plan)[0, 1] / 1e6 == pytest.approx(86.1, abs=0.1)


@pytest.mark.parametrize("edit,line,needle", [
    (("ul_cap_MBps = 5\n\n[seedpeer]", "ul_cap_MBps = fast\n\n[seedpeer]"), 13, "not a valid float"),
    (("count = 3", "count = 3\ncolour = red"), 12, "unknown key"),
    (("[torrent]", "[bogus]\nx = 1\n\n[torrent]"), 7, "unknown section"),
    (("node = a\n", "node = z\n"), 12, "unknown node"),
    (("file_size_MB = 16", "file_size_MB = -1"), 8, "positive"),
    (("count = 3", "count = 3\ncount = 4"), 12, None),
])
def test_errors_carry_line_numbers(edit, line, needle):
    text = MINIMAL.replace(*edit, 1)
    with pytest.raises(ConfigError) as info:
        parse_config(text, source="x.ini")
    assert info.value.line == line
    assert str(info.value).startswith(f"x.ini:{line}:")
    if needle:
        assert needle in str(info.value)


def test_missing_section_and_hierarchy():
    with pytest.raises(ConfigError) as info:
        parse_config(MINIMAL.replace("[seedpeer]", "[plan]\nobserved_rate_MBps = 1\n\n[x]"))
    assert isinstance(info.value, EngineConfigError)
    with pytest.raises(ConfigError, match="seedpeer"):
        parse_config(MINIMAL.split("[seedpeer]")[0])


def test_piece_size_only_for_v4():
    with pytest.raises(ConfigError, match="v4"):
        parse_config(MINIMAL.replace("file_size_MB = 16", "file_size_MB = 16\npiece_rule = v5\npiece_size_KiB = 512"))


def test_with_helpers():
    cfg = parse_config(MINIMAL)
    assert cfg.with_seed(9).sim.rng_seed == 9
    assert cfg.with_peers_per_group(7).groups[0].count == 7
    assert cfg.groups[0].count == 3


names = st.text("abcdefghij0123456789", min_size=1, max_size=6)
pos = st.floats(0.001, 1e4, allow_nan=False, allow_infinity=False)
cap = st.one_of(st.none(), pos)


@st.composite
def configs(draw):
    node_ids = draw(st.lists(names, min_size=1, max_size=4, unique=True))
    nodes = tuple(NodeEntry(n, draw(pos), draw(pos), draw(pos)) for n in node_ids)
    rule = draw(st.sampled_from(["v4", "v5"]))
    torrent = TorrentSection(
        file_size_MB=draw(st.floats(0.01, 5000)),
        slice_size_KiB=draw(st.sampled_from([16, 64])),
        piece_rule=rule,
        piece_size_KiB=draw(st.sampled_from([None, 256, 512, 1024])) if rule == "v4" else None,
    )
    groups = tuple(
        PeerGroup(name=g, count=draw(st.integers(0, 500)), node=draw(st.sampled_from(node_ids)),
                  ul_cap_MBps=draw(cap), dl_cap_MBps=draw(cap), slots=draw(st.one_of(st.none(), st.integers(1, 60))),
                  strategy=draw(st.sampled_from(["rarest", "random"])), join_s=draw(st.floats(0, 100)),
                  leave_after_s=draw(st.one_of(st.none(), st.floats(0, 100))))
        for g in draw(st.lists(names, max_size=3, unique=True))
    )
    seed = SeedSection(draw(st.sampled_from(node_ids)), draw(pos), draw(st.one_of(st.none(), st.integers(1, 10))))
    sim = SimSection(
        tick_s=draw(pos), rechoke_s=draw(pos), snapshot_s=draw(pos), rng_seed=draw(st.integers(0, 2 ** 64 - 1)),
        duration=draw(st.one_of(st.none(), pos)), control_floor=draw(st.floats(1e-6, 1)),
        base_latency_s=draw(st.floats(0, 1)), pipeline_depth=draw(st.integers(1, 64)),
        optimistic_unchoke=draw(st.booleans()), join_spread_s=draw(st.floats(0, 100)),
        max_ticks=draw(st.integers(1, 10 ** 7)),
    )
    return ExperimentConfig(nodes, torrent, groups, seed, sim, draw(st.one_of(st.none(), pos)))


@settings(max_examples=150, deadline=None)
@given(configs())
def test_dump_parse_round_trip(cfg):
    text = dump_config(cfg)
    assert parse_config(text) == cfg
    assert dump_config(parse_config(text)) == text
