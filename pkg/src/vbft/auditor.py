"""Offline trace checker.

The auditor reads nothing but the trace: the header names the scenario,
which nodes are honest and the key seed, so it rebuilds the public keys and
re-verifies every certificate it sees.  It never imports replica code.
"""

from __future__ import annotations

import json
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Optional

from .certificates import genesis_block
from .core import Config, QuorumCert, from_record
from .crypto import Keyring
from .errors import EncodingError, MalformedTrace

HELD = "HELD"
VIOLATED_WITH_EQUIVOCATION = "VIOLATED-WITH-EQUIVOCATION"
VIOLATED = "VIOLATED"

BLACKLIST_WINDOW = 3


@dataclass(slots=True)
class PropertyResult:
    name: str
    ok: bool
    detail: str = ""
    counterexamples: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"name": self.name, "ok": self.ok, "detail": self.detail, "counterexamples": self.counterexamples}


@dataclass(slots=True)
class Report:
    properties: list = field(default_factory=list)
    s_safety: dict = field(default_factory=dict)
    metrics: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return all(p.ok for p in self.properties)

    def get(self, name: str) -> PropertyResult:
        for p in self.properties:
            if p.name == name:
                return p
        raise KeyError(name)

    def merge(self, other: "Report") -> "Report":
        self.properties.extend(other.properties)
        self.s_safety.update(other.s_safety)
        self.metrics.update(other.metrics)
        return self

    def to_dict(self) -> dict:
        return {
            "ok": self.ok,
            "properties": [p.to_dict() for p in self.properties],
            "s_safety": {str(k): v for k, v in sorted(self.s_safety.items())},
            "metrics": self.metrics,
        }


def _fail(name: str, detail: str, cex: Iterable[int]) -> PropertyResult:
    return PropertyResult(name, False, detail, sorted(set(cex))[:20])


# ---------------------------------------------------------------------------
# trace parsing


def load_trace(path) -> list[dict]:
    try:
        with open(path, encoding="utf-8") as fh:
            return parse_trace(fh.read())
    except OSError as exc:
        raise MalformedTrace(f"cannot read trace: {exc}") from exc


def parse_trace(text: str) -> list[dict]:
    out = []
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
        except json.JSONDecodeError as exc:
            raise MalformedTrace(f"line {lineno}: {exc.msg}") from exc
        if not isinstance(rec, dict) or "ev" not in rec:
            raise MalformedTrace(f"line {lineno}: record without an 'ev' field")
        out.append(rec)
    check_shape(out)
    return out


_REQUIRED = {
    "Commit": ("node", "seq", "hash", "parent", "qc", "step"),
    "Revoke": ("node", "seq", "hash"),
    "ViewEnter": ("node", "view", "primary"),
    "Blacklist": ("node", "culprit"),
    "Proof": ("node", "culprit", "view", "seq"),
    "Reply": ("node", "client", "ct", "seq", "hash"),
    "Confirm": ("client", "ct", "seq", "hash"),
    "Propose": ("node", "view", "seq", "hash", "step"),
}


def check_shape(trace: list[dict]) -> None:
    if not trace or trace[0].get("ev") != "Header":
        raise MalformedTrace("trace must start with a Header record")
    head = trace[0]
    for key in ("scenario", "honest", "key_seed", "clients"):
        if key not in head:
            raise MalformedTrace(f"header lacks {key!r}")
    for i, rec in enumerate(trace):
        for key in _REQUIRED.get(rec["ev"], ()):
            if key not in rec:
                raise MalformedTrace(f"record {i} ({rec['ev']}) lacks {key!r}")


class _Context:
    def __init__(self, trace: list[dict]):
        check_shape(trace)
        self.trace = trace
        head = trace[0]
        sc = head["scenario"]
        c = sc["config"]
        try:
            self.config = Config(
                c["n"], c["f"], c.get("gst", 0), c.get("timeout_initial", 80), c.get("timeout_multiplier", 2),
                c.get("batch_size", 16),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise MalformedTrace(f"bad config in header: {exc}") from exc
        self.f = self.config.f
        self.quorum = self.config.quorum
        self.honest = frozenset(head["honest"])
        self.gst = sc.get("net", {}).get("gst", self.config.gst)
        self.delta = sc.get("net", {}).get("delta", 10)
        self.adversary = {a["node"]: a["behavior"] for a in sc.get("adversary", [])}
        ids = range(self.config.n + len(head["clients"]))
        self.keyring, _ = Keyring.derive(ids, head["key_seed"])
        self.genesis_hash = genesis_block().hash.hex()

    def events(self, *kinds: str):
        for i, rec in enumerate(self.trace):
            if rec["ev"] in kinds:
                yield i, rec


def _context(trace) -> _Context:
    return trace if isinstance(trace, _Context) else _Context(trace)


# ---------------------------------------------------------------------------
# safety


def audit_safety(trace, config: Optional[Config] = None) -> Report:
    """Certificates, chain linkage, R-safety and conditional S-safety."""
    ctx = _context(trace)
    report = Report()

    bad_qc = []
    # signature checks are cached; the certified (hash, seq) is compared per record
    qc_cache: dict[str, Optional[tuple[str, int]]] = {}
    for i, rec in ctx.events("Commit"):
        key = json.dumps(rec["qc"], sort_keys=True)
        if key not in qc_cache:
            try:
                qc = from_record(rec["qc"])
                sig_ok = isinstance(qc, QuorumCert) and ctx.keyring.verify_qc(qc, ctx.quorum)
                qc_cache[key] = (qc.block_hash.hex(), qc.seq) if sig_ok else None
            except (EncodingError, KeyError, TypeError, ValueError, AttributeError):
                qc_cache[key] = None
        ok = qc_cache[key] == (rec["hash"], rec["seq"])
        if not ok:
            bad_qc.append(i)
    report.properties.append(
        _fail("qc_valid", f"{len(bad_qc)} commits carry an invalid QC", bad_qc)
        if bad_qc
        else PropertyResult("qc_valid", True, f"{len(qc_cache)} distinct QCs verified")
    )

    chains: dict[int, list[str]] = defaultdict(lambda: [ctx.genesis_hash])
    broken = []
    for i, rec in ctx.events("Commit", "Revoke"):
        chain = chains[rec["node"]]
        if rec["ev"] == "Commit":
            if rec["seq"] != len(chain) or rec["parent"] != chain[-1]:
                broken.append(i)
            chain.append(rec["hash"])
        else:
            if rec["seq"] != len(chain) - 1 or chain[-1] != rec["hash"]:
                broken.append(i)
            elif len(chain) > 1:
                chain.pop()
    report.properties.append(
        _fail("linkage", "commit or revoke does not match the node's chain", broken)
        if broken
        else PropertyResult("linkage", True)
    )

    # committed-ever sets by honest nodes, per (seq, hash)
    committers: dict[tuple[int, str], set[int]] = defaultdict(set)
    first_commit: dict[tuple[int, str], int] = {}
    r_bad = []
    revoked: dict[tuple[int, str], list[int]] = defaultdict(list)
    for i, rec in ctx.events("Commit", "Revoke"):
        if rec["node"] not in ctx.honest:
            continue
        key = (rec["seq"], rec["hash"])
        if rec["ev"] == "Commit":
            committers[key].add(rec["node"])
            first_commit.setdefault(key, i)
        else:
            revoked[key].append(i)
            if len(committers[key]) >= ctx.f + 1:
                r_bad.append(i)
    by_seq: dict[int, list[str]] = defaultdict(list)
    for (seq, h), nodes in committers.items():
        by_seq[seq].append(h)
    for seq, hashes in by_seq.items():
        strong = [h for h in hashes if len(committers[(seq, h)]) >= ctx.f + 1]
        if len(strong) > 1:
            r_bad.extend(first_commit[(seq, h)] for h in strong)
    report.properties.append(
        _fail("r_safety", "a block held by f+1 honest nodes was contradicted or revoked", r_bad)
        if r_bad
        else PropertyResult("r_safety", True)
    )

    proofs = {(rec["view"], rec["seq"]) for _, rec in ctx.events("Proof")}
    headers: dict[str, int] = {}
    for _, rec in ctx.events("Commit"):
        headers[rec["hash"]] = rec.get("view", -1)
    s_bad = []
    for seq in sorted(by_seq):
        hashes = by_seq[seq]
        if len(hashes) <= 1:
            report.s_safety[seq] = HELD
            continue
        views = {headers[h] for h in hashes}
        tainted = any((v, seq) in proofs for v in views)
        # Every conflicting block except at most one survivor stayed with <= f honest nodes.
        weak = sum(1 for h in hashes if len(committers[(seq, h)]) <= ctx.f)
        if tainted and weak >= len(hashes) - 1:
            report.s_safety[seq] = VIOLATED_WITH_EQUIVOCATION
        else:
            report.s_safety[seq] = VIOLATED
            s_bad.extend(first_commit[(seq, h)] for h in hashes)
    legal = sum(1 for v in report.s_safety.values() if v == VIOLATED_WITH_EQUIVOCATION)
    report.properties.append(
        _fail("s_safety", "conflicting commits without an equivocation proof", s_bad)
        if s_bad
        else PropertyResult("s_safety", True, f"{legal} seq(s) with legal revocation")
    )
    report.metrics["revocations"] = sum(len(v) for v in revoked.values())
    return report


# ---------------------------------------------------------------------------
# clients


def audit_client(trace) -> Report:
    """Every confirmation is backed by 2f+1 replies and never undone."""
    ctx = _context(trace)
    replies: dict[tuple, set[int]] = defaultdict(set)
    confirms = []
    bad = []
    for i, rec in enumerate(ctx.trace):
        ev = rec["ev"]
        if ev == "Reply":
            replies[(rec["client"], rec["ct"], rec["seq"], rec["hash"])].add(rec["node"])
        elif ev == "Confirm":
            key = (rec["client"], rec["ct"], rec["seq"], rec["hash"])
            if len(replies[key]) < ctx.quorum:
                bad.append(i)
            confirms.append((i, key))
    confirmed_at: dict[tuple[int, str], int] = {}
    confirmed_keys: dict[tuple[int, int], tuple[int, int]] = {}
    for i, (client, t, seq, h) in confirms:
        confirmed_at.setdefault((seq, h), i)
        prev = confirmed_keys.setdefault((client, t), (seq, i))
        if prev[0] != seq:
            bad.append(i)
    for i, rec in ctx.events("Revoke", "Commit"):
        if rec["node"] not in ctx.honest:
            continue
        if rec["ev"] == "Revoke":
            at = confirmed_at.get((rec["seq"], rec["hash"]))
            if at is not None and at < i:
                bad.append(i)
        else:
            for client, t in rec.get("keys", ()):
                seen = confirmed_keys.get((client, t))
                if seen is not None and seen[1] < i and seen[0] != rec["seq"]:
                    bad.append(i)
    report = Report()
    report.properties.append(
        _fail("client", "confirmation not backed by replies or later undone", bad)
        if bad
        else PropertyResult("client", True, f"{len(confirms)} confirmations checked")
    )
    report.metrics["confirms"] = len(confirms)
    return report


# ---------------------------------------------------------------------------
# liveness


def audit_liveness(trace, config: Optional[Config] = None, blacklist_window: int = BLACKLIST_WINDOW) -> Report:
    ctx = _context(trace)
    report = Report()
    f = ctx.f

    # Height progress over windows of f+1 view changes after GST.  A view
    # is post-GST when its first honest entry is at or after GST, and counts
    # as entered once f+1 honest nodes are in it (fewer cannot form a quorum).
    best = 0
    members: dict[int, set[int]] = defaultdict(set)
    opened: dict[int, int] = {}
    first_entry: dict[int, tuple[int, int]] = {}
    for i, rec in ctx.events("Commit", "ViewEnter"):
        if rec["node"] not in ctx.honest:
            continue
        if rec["ev"] == "Commit":
            best = max(best, rec["seq"])
            continue
        view = rec["view"]
        opened.setdefault(view, rec["t"])
        members[view].add(rec["node"])
        if view not in first_entry and len(members[view]) >= min(f + 1, len(ctx.honest)):
            first_entry[view] = (i, best)
    post = sorted(
        (v, idx, h) for v, (idx, h) in first_entry.items() if opened[v] >= ctx.gst and v > 0
    )
    stalled = []
    for k in range(len(post) - (f + 1)):
        v0, _, h0 = post[k]
        v1, idx1, h1 = post[k + f + 1]
        if h1 <= h0:
            stalled.append(idx1)
    report.properties.append(
        _fail("progress", f"no commit across {f + 1} consecutive post-GST view changes", stalled)
        if stalled
        else PropertyResult("progress", True, f"{len(post)} post-GST views")
    )

    # Backoff: consecutive timeouts without a commit in between double.
    last: dict[int, float] = {}
    bad_backoff = []
    mult = ctx.config.timeout_multiplier
    for i, rec in ctx.events("Timeout", "Commit", "Revoke"):
        node = rec["node"]
        if node not in ctx.honest:
            continue
        if rec["ev"] == "Timeout":
            prev = last.get(node)
            if prev is not None and rec["timeout"] != prev * mult:
                bad_backoff.append(i)
            last[node] = rec["timeout"]
        elif rec["ev"] == "Commit":
            last.pop(node, None)
    report.properties.append(
        _fail("backoff", "timeout did not grow by the multiplier", bad_backoff)
        if bad_backoff
        else PropertyResult("backoff", True)
    )

    # Blacklisting within the window, never a blacklisted primary, and no
    # revocation once every equivocator is blacklisted everywhere.
    views_seen: list[tuple[int, int]] = []  # (record index, view) of first honest entries
    for v, (idx, _) in first_entry.items():
        views_seen.append((idx, v))
    views_seen.sort()
    proof_at: dict[int, int] = {}
    for i, rec in ctx.events("Proof"):
        if rec["node"] in ctx.honest:
            proof_at.setdefault(rec["culprit"], i)
    blacklisted: dict[int, set[int]] = defaultdict(set)
    first_black: dict[int, int] = {}
    bad_black = []
    bad_primary = []
    bad_revoke = []
    equivocators = {n for n, b in ctx.adversary.items() if b == "Equivocate"}
    all_black_at: Optional[int] = None
    for i, rec in ctx.events("Blacklist", "ViewEnter", "Revoke"):
        node = rec["node"]
        if node not in ctx.honest:
            continue
        if rec["ev"] == "Blacklist":
            blacklisted[node].add(rec["culprit"])
            first_black.setdefault(rec["culprit"], i)
            if rec["culprit"] not in equivocators and rec["culprit"] in ctx.honest:
                bad_black.append(i)
            if (
                all_black_at is None
                and equivocators
                and all(equivocators <= blacklisted[h] for h in ctx.honest)
            ):
                all_black_at = i
        elif rec["ev"] == "ViewEnter":
            if rec["primary"] in blacklisted[node]:
                bad_primary.append(i)
        elif all_black_at is not None:
            bad_revoke.append(i)
    pending = []
    for culprit, at in proof_at.items():
        done = first_black.get(culprit)
        limit = done if done is not None else len(ctx.trace)
        # Only view changes after GST count; before it nothing is bounded.
        changes = sum(1 for idx, _ in views_seen if at < idx < limit and ctx.trace[idx]["t"] >= ctx.gst)
        if changes > blacklist_window:
            bad_black.append(at)
        elif done is None:
            pending.append(culprit)
    report.properties.append(
        _fail("blacklisting", "equivocator not blacklisted in time (or honest node blacklisted)", bad_black)
        if bad_black
        else PropertyResult("blacklisting", True, f"proofs={sorted(proof_at)} pending={sorted(pending)}")
    )
    report.properties.append(
        _fail("blacklisted_primary", "a blacklisted node became primary", bad_primary)
        if bad_primary
        else PropertyResult("blacklisted_primary", True)
    )
    report.properties.append(
        _fail("no_revoke_after_blacklist", "revocation after every equivocator was blacklisted", bad_revoke)
        if bad_revoke
        else PropertyResult("no_revoke_after_blacklist", True)
    )

    # Post-GST delivery bound for honest senders (needs message records).
    late = []
    for i, rec in ctx.events("Send"):
        if rec["t"] >= ctx.gst and rec["src"] in ctx.honest:
            if rec["due"] is None or rec["due"] - rec["t"] > ctx.delta:
                late.append(i)
    report.properties.append(
        _fail("delivery_bound", "post-GST message from an honest node exceeded delta", late)
        if late
        else PropertyResult("delivery_bound", True)
    )
    report.metrics["views_entered"] = len(first_entry)
    report.metrics["blacklisted"] = sorted(first_black)
    return report


# ---------------------------------------------------------------------------
# latency


def audit_latency(trace) -> dict:
    """Message-step depth histograms for commits, confirms and view changes."""
    ctx = _context(trace)
    proposed: dict[str, int] = {}
    commit_depth: Counter = Counter()
    confirm_depth: Counter = Counter()
    first_propose: dict[int, int] = {}
    enter_step: dict[int, int] = {}
    for _, rec in enumerate(ctx.trace):
        ev = rec["ev"]
        if ev == "Propose":
            proposed[rec["hash"]] = rec["step"]
            first_propose.setdefault(rec["view"], rec["step"])
        elif ev == "Commit" and rec["node"] in ctx.honest and rec["hash"] in proposed:
            commit_depth[rec["step"] - proposed[rec["hash"]]] += 1
        elif ev == "Confirm" and rec["hash"] in proposed:
            confirm_depth[rec["step"] - proposed[rec["hash"]]] += 1
        elif ev == "ViewEnter" and rec["node"] == rec["primary"] and rec["view"] > 0:
            # The primary enters as it broadcasts the NEW-VIEW.
            enter_step.setdefault(rec["view"], rec["step"])
    vc_cost = Counter()
    for view, step in enter_step.items():
        if view in first_propose:
            vc_cost[first_propose[view] - step] += 1

    def hist(c: Counter) -> dict:
        return {str(k): c[k] for k in sorted(c)}

    def mode(c: Counter):
        return c.most_common(1)[0][0] if c else None

    return {
        "commit_depth": hist(commit_depth),
        "confirm_depth": hist(confirm_depth),
        "view_change_steps": hist(vc_cost),
        "commit_depth_mode": mode(commit_depth),
        "confirm_depth_mode": mode(confirm_depth),
    }


def audit(trace) -> Report:
    """All four audits; ``report.ok`` is the overall verdict."""
    ctx = _context(trace)
    report = audit_safety(ctx)
    report.merge(audit_client(ctx))
    report.merge(audit_liveness(ctx))
    report.metrics["latency"] = audit_latency(ctx)
    return report
