import pytest

from backend.config import emit_scenario, load_scenario, parse_document, parse_scenario, with_overrides
from backend.errors import ConfigError

from .conftest import make_scenario, scenario_text


def test_minimal_document_fills_defaults():
    cfg = make_scenario()
    assert cfg.topology.proxies == 1
    assert cfg.server.mu == 500.0
    assert cfg.timers.t1 == 0.5
    assert cfg.link.loss == 0.08
    assert cfg.call.setup_timeout == 32.0
    assert cfg.run.control_tick == 0.5
    assert cfg.run.warmup == 5.0
    assert cfg.controller.name == "none"
    assert [(s.start, s.end, s.rate) for s in cfg.workload.segments] == [(0.0, 10.0, 10.0)]
    assert cfg.node_ids == ["uac1", "p1", "uas"]


def test_derived_defaults_follow_t1():
    cfg = make_scenario(timers__t1=1.0, timers__t2=8.0)
    assert cfg.run.control_tick == 1.0
    assert cfg.call.setup_timeout == 64.0


def test_comments_and_blank_lines_are_ignored():
    cfg = parse_scenario("# tandem\n\ntopology.proxies = 2   # two hops\nrun.duration = 5\nrun.seed = 3\n")
    assert cfg.topology.proxies == 2
    assert cfg.run.seed == 3


@pytest.mark.parametrize("proxies", [1, 2])
def test_proxy_count_parses_from_text(proxies):
    cfg = parse_scenario(f"topology.proxies = {proxies}\nrun.duration = 5\nrun.seed = 1\n")
    assert cfg.topology.proxies == proxies
    assert cfg.node_ids[-2] == f"p{proxies}"


def test_per_node_overrides():
    cfg = make_scenario(topology__proxies=2, server__p2__mu=400, server__uas__mu=900, server__buffer=50)
    assert cfg.server.mu_for("p1") == 500.0
    assert cfg.server.mu_for("p2") == 400.0
    assert cfg.server.mu_for("uas") == 900.0
    assert cfg.server.buffer_for("p2") == 50


def test_user_agents_are_unlimited_unless_configured():
    cfg = make_scenario(topology__alternate=True)
    assert cfg.server.mu_for("uas") is None
    assert cfg.server.mu_for("uas-alt") is None
    assert "uas-alt" in cfg.node_ids


def test_cluster_topology_ids():
    cfg = make_scenario(topology__cluster=3, server__cluster__mu=200)
    assert cfg.node_ids == ["uac1", "p1", "c1", "c2", "c3"]
    assert cfg.server.mu_for("cluster") == 200.0


def test_segments_and_slowdowns_parse():
    cfg = make_scenario(
        topology__proxies=2,
        run__duration=90,
        workload__segments="0:30:50, 30:90:80",
        workload__slowdown="p2:30:90:0.5",
    )
    assert [(s.start, s.end, s.rate) for s in cfg.workload.segments] == [(0, 30, 50), (30, 90, 80)]
    slowdown = cfg.workload.slowdown[0]
    assert (slowdown.node, slowdown.start, slowdown.end, slowdown.multiplier) == ("p2", 30, 90, 0.5)


def test_controller_parameters_are_typed():
    cfg = make_scenario(controller__name="rtqc", controller__p_min=0.3)
    assert cfg.controller.name == "rtqc"
    assert cfg.controller.params.p_min == 0.3
    assert cfg.controller.params.q_rmax == 500.0


@pytest.mark.parametrize(
    "keys,key,message",
    [
        ({"controller__name": "magic"}, "controller.name", "unknown controller"),
        ({"controller__name": "rtqc", "controller__p_min": 1.5}, "controller.p_min", ""),
        ({"controller__name": "bangbang", "controller__width": 3}, "controller.width", "unknown key"),
        ({"server__colour": "red"}, "server.colour", "unknown key"),
        ({"link__loss": 2}, "link.loss", ""),
        ({"timers__t1": 1.0, "timers__t2": 0.5}, "timers", "t2"),
        ({"workload__slowdown": "p9:1:2:0.5"}, "scenario", "unknown node"),
        ({"workload__segments": "0:20:5"}, "scenario", "beyond run.duration"),
        ({"fluid__enabled": True}, "scenario", "two-proxy"),
        ({"topology__proxies": 3}, "topology.proxies", ""),
    ],
)
def test_invalid_values_name_their_key(keys, key, message):
    with pytest.raises(ConfigError) as info:
        make_scenario(**keys)
    assert info.value.key == key
    assert message in str(info.value)


@pytest.mark.parametrize("missing", ["topology.proxies", "run.duration", "run.seed"])
def test_required_keys(missing):
    text = "\n".join(line for line in scenario_text().splitlines() if not line.startswith(missing))
    with pytest.raises(ConfigError) as info:
        parse_scenario(text)
    assert info.value.key == missing
    assert "required key missing" in str(info.value)


def test_duplicate_and_malformed_lines():
    with pytest.raises(ConfigError) as info:
        parse_document("run.seed = 1\nrun.seed = 2\n")
    assert info.value.key == "run.seed"
    with pytest.raises(ConfigError) as info:
        parse_document("run.seed = 1\nnot a pair\n")
    assert info.value.key == "line 2"


def test_emitted_document_parses_back_to_the_same_config():
    cfg = make_scenario(
        topology__proxies=2,
        server__p2__mu=400,
        server__p2__buffer=30,
        server__retry_after=2.5,
        workload__segments="0:5:20, 5:10:40",
        workload__slowdown="p2:2:8:0.5",
        controller__name="rrrc",
        controller__setpoint=0.2,
        fluid__enabled=True,
    )
    assert parse_scenario(emit_scenario(cfg)) == cfg


def test_overrides_revalidate_and_rederive():
    cfg = make_scenario(run__duration=20)
    seeded = with_overrides(cfg, run={"seed": 9})
    assert seeded.run.seed == 9
    assert seeded.workload == cfg.workload

    slower = with_overrides(cfg, timers={"t1": 1.0, "t2": 8.0})
    assert slower.run.control_tick == 1.0
    assert slower.call.setup_timeout == 64.0

    with pytest.raises(ConfigError):
        with_overrides(cfg, link={"loss": -1})


def test_workload_signature_ignores_the_controller():
    a = make_scenario(controller__name="bangbang")
    b = make_scenario(controller__name="rtqc")
    assert a.workload_signature() == b.workload_signature()
    assert a.workload_signature() != make_scenario(link__loss=0.1).workload_signature()


def test_missing_file_is_a_config_error(tmp_path):
    with pytest.raises(ConfigError) as info:
        load_scenario(str(tmp_path / "absent.conf"))
    assert info.value.key == "scenario"


def test_bundled_scenarios_load():
    import os

    root = os.path.join(os.path.dirname(__file__), "..", "data", "scenarios")
    for name in ("tandem_slowdown", "overload150", "cluster"):
        cfg = load_scenario(os.path.join(root, f"{name}.conf"))
        assert cfg.run.duration > 0
