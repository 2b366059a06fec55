import pytest
import yaml

from vbft.errors import InvalidScenario, ParseError
from vbft.scenario import bundled_scenarios, load_scenario, loads_scenario, parse_scenario, resolve

BASE = {
    "n": 4,
    "f": 1,
    "gst": 0,
    "delta": 10,
    "timeout_initial": 80,
    "batch_size": 4,
    "clients": 1,
    "requests_per_client": 2,
    "adversary": [],
}


def doc(**changes):
    d = dict(BASE)
    for k, v in changes.items():
        if v is None:
            d.pop(k)
        else:
            d[k] = v
    return d


def test_honest_f1_loads():
    sc = load_scenario(resolve("honest_f1"))
    assert (sc.config.n, sc.config.f) == (4, 1)
    assert sc.honest == (0, 1, 2, 3) and not sc.byzantine
    assert sc.net.delay_post_gst == (10, 10)


def test_minimal_document():
    sc = parse_scenario(doc(), "mini")
    assert sc.name == "mini" and sc.until_height is None and sc.net.pre_gst == "chaos"


@pytest.mark.parametrize(
    "changes,field",
    [
        ({"n": 5}, "n"),
        ({"n": 7, "f": 1}, "n"),
        ({"f": -1}, "f"),
        ({"adversary": [{"node": 0, "behavior": "Crash"}, {"node": 1, "behavior": "Equivocate"}]}, "adversary"),
        ({"adversary": [{"node": 0, "behavior": "Crash"}, {"node": 0, "behavior": "Honest"}]}, "adversary"),
        ({"adversary": [{"node": 4, "behavior": "Crash"}]}, "adversary[0].node"),
        ({"adversary": [{"node": 0, "behavior": "Teleport"}]}, "adversary[0].behavior"),
        ({"adversary": [{"node": 0, "behavior": "Crash", "extra": 1}]}, "adversary[0]"),
        ({"batch_size": 0}, "batch_size"),
        ({"delta": "ten"}, "delta"),
        ({"gst": True}, "gst"),
        ({"clients": None}, "clients"),
        ({"colour": "blue"}, "colour"),
        ({"net": {"rules": [{"action": "explode"}]}}, "net.rules[0].action"),
        ({"net": {"warp": 1}}, "net"),
        ({"run": {"until_height": 0}}, "run.until_height"),
        ({"run": {"timeout_multiplier": 0.5}}, "run.timeout_multiplier"),
    ],
)
def test_invalid_scenarios_name_the_field(changes, field):
    with pytest.raises(InvalidScenario) as err:
        parse_scenario(doc(**changes))
    assert err.value.field == field


def test_honest_entries_do_not_count_toward_f():
    sc = parse_scenario(doc(adversary=[{"node": 0, "behavior": "Honest"}, {"node": 1, "behavior": "Crash"}]))
    assert sc.byzantine == frozenset({1})


def test_link_rules_and_run_keys():
    sc = parse_scenario(
        doc(
            net={"pre_gst": "calm", "rules": [{"action": "drop", "src": [0], "kinds": ["Vote"], "end": 50}]},
            run={"until_height": 3, "max_events": 99, "client_timeout": 7},
        )
    )
    (rule,) = sc.net.rules
    assert rule.src == (0,) and rule.kinds == ("Vote",) and rule.end == 50
    assert (sc.until_height, sc.max_events, sc.client_timeout) == (3, 99, 7)


@pytest.mark.parametrize("text", ["n: [1\n", "- just\n- a list\n", "42\n"])
def test_parse_errors(text):
    with pytest.raises(ParseError):
        loads_scenario(text)


def test_missing_file_is_parse_error(tmp_path):
    with pytest.raises(ParseError):
        load_scenario(tmp_path / "nope.yaml")
    with pytest.raises(ParseError):
        resolve("no_such_scenario")


def test_resolve_accepts_paths(tmp_path):
    p = tmp_path / "s.yaml"
    p.write_text(yaml.safe_dump(doc()))
    assert resolve(str(p)) == p
    assert load_scenario(p).name == "s"


@pytest.mark.parametrize("name", sorted(bundled_scenarios()))
def test_bundled_scenarios_load(name):
    sc = load_scenario(bundled_scenarios()[name])
    assert sc.name == name
    assert len(sc.byzantine) <= sc.config.f
