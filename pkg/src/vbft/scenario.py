"""YAML scenario files.

Required top-level keys::

    n, f, gst, delta, timeout_initial, batch_size, clients,
    requests_per_client, adversary: [{node, behavior, params}]

Optional keys: ``name``; ``net`` (``fixed_delay``, ``pre_gst``,
``drop_rate``, ``pre_gst_delay``, ``rules``) for pre-GST shaping; and
``run`` (``until_height``, ``max_events``, ``client_timeout``,
``timeout_multiplier``) for the stop rule and workload knobs.
"""

from __future__ import annotations

from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from .core import Config
from .errors import InvalidScenario, ParseError
from .simnet import BEHAVIORS, AdversaryEntry, LinkRule, NetModel, Scenario

REQUIRED = (
    "n", "f", "gst", "delta", "timeout_initial", "batch_size", "clients", "requests_per_client", "adversary",
)
OPTIONAL = ("name", "net", "run")
NET_KEYS = ("fixed_delay", "pre_gst", "drop_rate", "pre_gst_delay", "rules")
RUN_KEYS = ("until_height", "max_events", "client_timeout", "timeout_multiplier")
RULE_KEYS = ("action", "src", "dst", "kinds", "extra", "start", "end")


def _int(field: str, value: Any, low: int = 0) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise InvalidScenario(field, f"expected an integer, got {value!r}")
    if value < low:
        raise InvalidScenario(field, f"must be >= {low}, got {value}")
    return value


def _mapping(field: str, value: Any, allowed: tuple[str, ...]) -> dict:
    if value is None:
        return {}
    if not isinstance(value, dict):
        raise InvalidScenario(field, "expected a mapping")
    unknown = sorted(set(value) - set(allowed))
    if unknown:
        raise InvalidScenario(field, f"unknown key(s) {unknown}")
    return value


def _ids(field: str, value: Any, limit: int):
    if value is None:
        return None
    if not isinstance(value, list):
        raise InvalidScenario(field, "expected a list of node ids")
    return tuple(_int(field, v) for v in value)


def _rule(i: int, raw: Any, limit: int) -> LinkRule:
    field = f"net.rules[{i}]"
    raw = _mapping(field, raw, RULE_KEYS)
    action = raw.get("action")
    if action not in ("drop", "delay"):
        raise InvalidScenario(f"{field}.action", "must be 'drop' or 'delay'")
    kinds = raw.get("kinds") or []
    if not isinstance(kinds, list) or not all(isinstance(k, str) for k in kinds):
        raise InvalidScenario(f"{field}.kinds", "expected a list of message type names")
    end = raw.get("end")
    return LinkRule(
        action,
        _ids(f"{field}.src", raw.get("src"), limit),
        _ids(f"{field}.dst", raw.get("dst"), limit),
        tuple(kinds),
        _int(f"{field}.extra", raw.get("extra", 0)),
        _int(f"{field}.start", raw.get("start", 0)),
        float("inf") if end is None else _int(f"{field}.end", end),
    )


def parse_scenario(data: Any, name: str = "") -> Scenario:
    """Validate an already-parsed YAML document."""
    if not isinstance(data, dict):
        raise ParseError("scenario must be a mapping at the top level")
    missing = [k for k in REQUIRED if k not in data]
    if missing:
        raise InvalidScenario(missing[0], "required key is missing")
    unknown = sorted(set(data) - set(REQUIRED) - set(OPTIONAL))
    if unknown:
        raise InvalidScenario(unknown[0], "unknown key")

    n = _int("n", data["n"], 1)
    f = _int("f", data["f"])
    if n != 3 * f + 1:
        raise InvalidScenario("n", f"n must equal 3f+1 (n={n}, f={f})")
    gst = _int("gst", data["gst"])
    delta = _int("delta", data["delta"], 1)
    run = _mapping("run", data.get("run"), RUN_KEYS)
    mult = run.get("timeout_multiplier", 2)
    if isinstance(mult, bool) or not isinstance(mult, (int, float)) or mult < 1:
        raise InvalidScenario("run.timeout_multiplier", "must be a number >= 1")
    config = Config(
        n, f, gst,
        _int("timeout_initial", data["timeout_initial"], 1),
        mult,
        _int("batch_size", data["batch_size"], 1),
    )

    adv_raw = data["adversary"] or []
    if not isinstance(adv_raw, list):
        raise InvalidScenario("adversary", "expected a list")
    adversary = []
    for i, entry in enumerate(adv_raw):
        field = f"adversary[{i}]"
        entry = _mapping(field, entry, ("node", "behavior", "params"))
        node = _int(f"{field}.node", entry.get("node"))
        if node >= n:
            raise InvalidScenario(f"{field}.node", f"node {node} is not a replica id below n={n}")
        behavior = entry.get("behavior")
        if behavior not in BEHAVIORS:
            raise InvalidScenario(f"{field}.behavior", f"unknown behavior {behavior!r}; choose from {list(BEHAVIORS)}")
        params = entry.get("params") or {}
        if not isinstance(params, dict):
            raise InvalidScenario(f"{field}.params", "expected a mapping")
        adversary.append(AdversaryEntry(node, behavior, tuple(sorted(params.items()))))
    nodes = [a.node for a in adversary]
    if len(set(nodes)) != len(nodes):
        raise InvalidScenario("adversary", "a node appears more than once")
    faulty = [a for a in adversary if a.behavior != "Honest"]
    if len(faulty) > f:
        raise InvalidScenario("adversary", f"{len(faulty)} Byzantine nodes exceed f={f}")

    net_raw = _mapping("net", data.get("net"), NET_KEYS)
    rules = net_raw.get("rules") or []
    if not isinstance(rules, list):
        raise InvalidScenario("net.rules", "expected a list")
    kw = {}
    if "pre_gst" in net_raw:
        kw["pre_gst"] = net_raw["pre_gst"]
    if "drop_rate" in net_raw:
        kw["drop_rate"] = net_raw["drop_rate"]
    if "pre_gst_delay" in net_raw:
        pair = net_raw["pre_gst_delay"]
        if not isinstance(pair, list) or len(pair) != 2:
            raise InvalidScenario("net.pre_gst_delay", "expected [low, high]")
        kw["delay_pre_gst"] = (_int("net.pre_gst_delay", pair[0], 1), _int("net.pre_gst_delay", pair[1], 1))
    try:
        base = NetModel.standard(gst, delta, bool(net_raw.get("fixed_delay", False)))
        net = NetModel(
            gst=gst,
            delta=delta,
            delay_post_gst=base.delay_post_gst,
            delay_pre_gst=kw.get("delay_pre_gst", base.delay_pre_gst),
            drop_rate=kw.get("drop_rate", base.drop_rate),
            pre_gst=kw.get("pre_gst", base.pre_gst),
            rules=tuple(_rule(i, r, n) for i, r in enumerate(rules)),
        )
    except (ValueError, TypeError) as exc:
        raise InvalidScenario("net", str(exc)) from exc

    until = run.get("until_height")
    timeout = run.get("client_timeout")
    return Scenario(
        config=config,
        net=net,
        adversary=tuple(adversary),
        clients=_int("clients", data["clients"]),
        requests_per_client=_int("requests_per_client", data["requests_per_client"]),
        client_timeout=None if timeout is None else _int("run.client_timeout", timeout, 1),
        until_height=None if until is None else _int("run.until_height", until, 1),
        max_events=_int("run.max_events", run.get("max_events", 200_000), 1),
        name=str(data.get("name", name)),
    )


def load_scenario(path) -> Scenario:
    """Read and validate a scenario file.

    The returned :class:`Scenario` bundles the config, network model,
    adversary entries and client workload.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ParseError(f"cannot read {path}: {exc}") from exc
    return loads_scenario(text, path.stem)


def loads_scenario(text: str, name: str = "") -> Scenario:
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ParseError(f"invalid YAML: {exc}") from exc
    return parse_scenario(data, name)


def bundled_scenarios() -> dict[str, Path]:
    """Scenario files shipped with the package, keyed by stem."""
    root = resources.files("vbft") / "scenarios"
    return {Path(p.name).stem: Path(str(p)) for p in root.iterdir() if p.name.endswith(".yaml")}


def resolve(name_or_path: str) -> Path:
    """Accept either a path or the name of a bundled scenario."""
    p = Path(name_or_path)
    if p.exists():
        return p
    bundled = bundled_scenarios()
    if name_or_path in bundled:
        return bundled[name_or_path]
    raise ParseError(f"no such scenario file or bundled scenario: {name_or_path}")
