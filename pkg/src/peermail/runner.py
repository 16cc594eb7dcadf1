"""Scenario execution: builds the world, runs the clock, emits artifacts.

Artifacts are byte-stable for a fixed (scenario, seed): the event log
(with one pass/fail line per ASSERT), a sorted key=value metrics file,
and mailbox/ledger dumps.  Exit code 0 means the run reached quiescence
with every assertion passing; 1 means an assertion failed; 2 means the
scenario itself was invalid.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from . import gossip, wire
from .gossip import ledger_consensus_check
from .node import Node, SendError
from .scenario import Directive, Scenario
from .simnet import ScenarioError, SimNetwork

MAX_EVENTS = 400_000

_SETUP_KINDS = {
    "NODE", "IDENTITY", "HOST", "GATEWAY", "CONTACT", "EXCHANGE-KEYS",
    "ONLINE", "LINK-LATENCY", "PARTITION", "LIST-CREATE", "LIST-JOIN", "LIST-LINK",
}
_TIMED_KINDS = {"SEND", "LIST-POST", "INJECT", "REVOKE"}


@dataclass
class ListConfig:
    mode: str
    ledger: bool
    jitter: int
    members: dict[str, str] = field(default_factory=dict)  # node name -> identity
    directions: dict[str, str] = field(default_factory=dict)
    links: list[tuple[str, str]] = field(default_factory=list)
    tree_dirty: bool = False


@dataclass
class RunResult:
    exit_code: int
    log_text: str
    metrics_text: str
    mailboxes_text: str
    ledgers_text: str
    failures: list[str] = field(default_factory=list)


class ScenarioRunner:
    """Drives one scenario over a fresh simulated network."""

    def __init__(self, scenario: Scenario, seed: int = 0):
        self.scenario = scenario
        self.seed = seed
        self.net = SimNetwork(seed=seed)
        self.nodes: dict[str, Node] = {}
        self.lists: dict[str, ListConfig] = {}
        self.tags: dict[str, str | None] = {}
        self.online_accum: dict[str, list[tuple[int, int]]] = {}
        self.failures: list[str] = []

    # ------------------------------------------------------------------

    def run(self) -> RunResult:
        for directive in self.scenario.directives:
            kind = directive.kind
            if kind in _SETUP_KINDS:
                self._setup(directive)
            elif kind in _TIMED_KINDS:
                t = directive.args["t"]
                self.net.schedule_action(
                    t, lambda d=directive: self._action(d), label=directive.raw
                )
            elif kind == "RUN":
                self._build_trees()
                until = directive.args["until"]
                if until is None:
                    self.net.run_to_quiescence(max_events=MAX_EVENTS)
                else:
                    self.net.run_until(until)
            elif kind == "ASSERT":
                self._evaluate_assert(directive)
            else:  # pragma: no cover - parser rejects unknown kinds
                raise ScenarioError(f"unhandled directive {kind}")
        self._build_trees()
        self.net.run_to_quiescence(max_events=MAX_EVENTS)
        exit_code = 1 if self.failures else 0
        return RunResult(
            exit_code=exit_code,
            log_text=self._log_text(),
            metrics_text=self._metrics_text(),
            mailboxes_text=self._mailboxes_text(),
            ledgers_text=self._ledgers_text(),
            failures=list(self.failures),
        )

    # ------------------------------------------------------------------
    # setup directives

    def _setup(self, d: Directive) -> None:
        getattr(self, "_do_" + d.kind.replace("-", "_").lower())(d.args)

    def _do_node(self, a) -> None:
        self.nodes[a["name"]] = Node(a["name"], self.net)

    def _do_identity(self, a) -> None:
        self.nodes[a["node"]].add_identity(a["name"], a["seed"], a["localpart"])

    def _do_host(self, a) -> None:
        self.nodes[a["node"]].host_account(a["localpart"])

    def _do_gateway(self, a) -> None:
        self.nodes[a["node"]].set_gateway(a["host"])

    def _address(self, node_name: str, ident: str) -> str:
        return self.nodes[node_name].identities[ident].address.render()

    def _sole_identity_address(self, node_name: str) -> str:
        identities = self.nodes[node_name].identities
        if len(identities) != 1:
            raise ScenarioError(
                f"{node_name} has {len(identities)} identities; cannot resolve implicitly"
            )
        return next(iter(identities.values())).address.render()

    def _do_contact(self, a) -> None:
        node = self.nodes[a["node"]]
        book = node.book_for(a["ident"])
        source = a["source"]
        if "literal" in source:
            address = source["literal"]
            display = address.split("@")[0]
        else:
            address = self._address(source["node"], source["ident"])
            display = source["node"]
        via = self._sole_identity_address(a["via"]) if a["via"] else None
        book.add_contact(address, display, introduced_by=via)

    def _do_exchange_keys(self, a) -> None:
        node_a, node_b = self.nodes[a["a"]], self.nodes[a["b"]]
        ident_a = node_a.identities[a["ai"]]
        ident_b = node_b.identities[a["bi"]]
        book_a = node_a.books[ident_a.address.render()]
        book_b = node_b.books[ident_b.address.render()]
        book_a.add_contact(ident_b.address.render(), a["b"])
        book_a.record_key(ident_b.address.render(), ident_b.mail.public)
        book_b.add_contact(ident_a.address.render(), a["a"])
        book_b.record_key(ident_a.address.render(), ident_a.mail.public)

    def _do_online(self, a) -> None:
        intervals = self.online_accum.setdefault(a["node"], [])
        intervals.append((a["start"], a["end"]))
        self.net.set_online(a["node"], intervals)

    def _do_link_latency(self, a) -> None:
        self.net.set_latency(a["a"], a["b"], a["units"])

    def _do_partition(self, a) -> None:
        self.net.add_partition(a["start"], a["end"], set(a["groups"][0]), set(a["groups"][1]))

    def _do_list_create(self, a) -> None:
        self.lists[a["name"]] = ListConfig(mode=a["mode"], ledger=a["ledger"], jitter=a["jitter"])

    def _do_list_join(self, a) -> None:
        config = self.lists[a["name"]]
        self.nodes[a["node"]].join_list(
            a["name"], a["ident"], mode=config.mode, ledger=config.ledger, jitter=config.jitter
        )
        config.members[a["node"]] = a["ident"]
        config.directions[a["node"]] = a["direction"]

    def _do_list_link(self, a) -> None:
        config = self.lists[a["name"]]
        name_a, name_b = a["a"], a["b"]
        addr_a = self._address(name_a, config.members[name_a])
        addr_b = self._address(name_b, config.members[name_b])
        dir_a = config.directions[name_a]
        dir_b = config.directions[name_b]
        a_to_b = dir_a in ("both", "to-list") and dir_b in ("both", "from-list")
        b_to_a = dir_b in ("both", "to-list") and dir_a in ("both", "from-list")
        self.nodes[name_a].lists[a["name"]].add_link(addr_b, outbound=a_to_b, inbound=b_to_a)
        self.nodes[name_b].lists[a["name"]].add_link(addr_a, outbound=b_to_a, inbound=a_to_b)
        config.links.append((name_a, name_b))
        if config.mode == "tree":
            config.tree_dirty = True

    def _build_trees(self) -> None:
        for name, config in self.lists.items():
            if config.mode != "tree" or not config.tree_dirty:
                continue
            graph: dict[str, list[str]] = {}
            for member, ident in config.members.items():
                address = self._address(member, ident)
                graph[address] = sorted(self.nodes[member].lists[name].links)
            tree_edges = gossip.build_tree(graph)
            incident: dict[str, list[str]] = {address: [] for address in graph}
            for u, v in tree_edges:
                incident[u].append(v)
                incident[v].append(u)
            for member, ident in config.members.items():
                address = self._address(member, ident)
                self.nodes[member].lists[name].set_tree_links(incident[address])
            config.tree_dirty = False

    # ------------------------------------------------------------------
    # timed actions

    def _action(self, d: Directive) -> None:
        if d.kind == "SEND":
            self._act_send(d.args)
        elif d.kind == "LIST-POST":
            self._act_list_post(d.args)
        elif d.kind == "REVOKE":
            self._act_revoke(d.args)
        elif d.kind == "INJECT":
            self._act_inject(d.args)

    def _resolve_to(self, to: dict) -> str:
        if "literal" in to:
            return to["literal"]
        return self._address(to["node"], to["ident"])

    def _act_send(self, a) -> None:
        node = self.nodes[a["node"]]
        to = self._resolve_to(a["to"])
        try:
            report = node.compose_and_send(
                a["ident"], to, a["body"].encode(), mode=a["mode"], confirm=a["confirm"],
                client_ref=a["tag"],
            )
            if a["tag"]:
                self.tags[a["tag"]] = report.message_id
        except SendError:
            if a["tag"]:
                self.tags[a["tag"]] = None
            sender = self._address(a["node"], a["ident"])
            self.net.log_refused(sender, to, None)

    def _act_list_post(self, a) -> None:
        node = self.nodes[a["node"]]
        mid, _ = node.post_to_list(a["name"], a["ident"], a["body"].encode())
        if a["tag"]:
            self.tags[a["tag"]] = mid

    def _act_revoke(self, a) -> None:
        self.nodes[a["node"]].revoke_identity(a["ident"], a["kind"])

    # ------------------------------------------------------------------
    # injection (the adversarial primitive)

    def _expand_macro(self, value: str) -> str:
        while "{{" in value:
            start = value.index("{{")
            end = value.index("}}", start)
            parts = value[start + 2 : end].split(":")
            if parts[0] == "address" and len(parts) == 3:
                replacement = self._address(parts[1], parts[2])
            elif parts[0] == "reply-path" and len(parts) == 4:
                inner = self.nodes[parts[1]].identities[parts[2]].address
                replacement = wire.encode_reply_path(inner, parts[3])
            else:
                raise ScenarioError(f"unknown macro {{{{{':'.join(parts)}}}}}")
            value = value[:start] + replacement + value[end + 2 :]
        return value

    @staticmethod
    def _raw_serialize(headers: list[tuple[str, str]], body: bytes) -> bytes:
        # Unvalidated on purpose: INJECT may craft broken envelopes.
        out = bytearray()
        for name, value in headers:
            out += name.encode() + b": " + value.encode() + b"\r\n"
        out += b"\r\n" + body
        return bytes(out)

    def _member_state(self, list_name: str, node_name: str):
        config = self.lists[list_name]
        if node_name not in config.members:
            raise ScenarioError(f"{node_name} is not a member of {list_name}")
        node = self.nodes[node_name]
        return node, node.identities[config.members[node_name]], node.lists[list_name]

    def _inject_targets(self, list_name: str, from_node: str, to_param: str | None):
        config = self.lists[list_name]
        _, from_ident, from_state = self._member_state(list_name, from_node)
        if to_param in (None, "neighbours"):
            members_by_address = {
                self._address(m, i): m for m, i in config.members.items()
            }
            return [members_by_address[address] for address in from_state.links]
        if to_param == "*":
            return [m for m in config.members if m != from_node]
        return [to_param]

    def _act_inject(self, a) -> None:
        kind = a["inject"]
        p = a["params"]
        if kind == "deliver":
            self._inject_deliver(p)
            return
        list_name = p["list"]
        from_node, from_ident, from_state = self._member_state(list_name, p["from"])
        body = p.get("body", "tampered").encode()
        if kind == "tamper-body":
            index = p["index"]
            if index >= len(from_state.log):
                raise ScenarioError(f"list {list_name} log has no entry {index}")
            original = from_state.log[index]
            legit = from_state._countersigned(original)
            env = wire.replace_body(legit, body)
        elif kind == "chain-break":
            prev_index = p.get("prev", 0)
            if prev_index >= len(from_state.log):
                raise ScenarioError(f"list {list_name} log has no entry {prev_index}")
            stale_hash = wire.message_hash(from_state.log[prev_index])
            env = self._forged_post(from_state, from_ident, body, stale_hash)
        else:  # forge-author
            author_addr = self._address(p["author"], self.lists[list_name].members[p["author"]])
            author_mail = self.nodes[p["author"]].identities[
                self.lists[list_name].members[p["author"]]
            ].mail
            headers = [
                ("From", author_addr),
                ("To", author_addr),
                ("Date", str(self.net.clock)),
                ("List", list_name),
            ]
            env = wire.Envelope(headers=headers, body=body)
            env = wire.assign_message_id(env, "forged")
            env = wire.add_header(
                env, "Signature", wire.make_signature_value(author_mail.fingerprint, b"\x00" * 64)
            )
            from .identity import sign as _sign

            counter = _sign(from_ident.mail.secret, wire.countersign_bytes(env))
            env = wire.add_header(
                env, "Countersign", wire.make_signature_value(from_ident.mail.fingerprint, counter)
            )
        if p.get("tag"):
            self.tags[p["tag"]] = env.get("Message-ID")
        for target in self._inject_targets(list_name, p["from"], p.get("to")):
            target_node = self.nodes[target]
            target_address = self._address(target, self.lists[list_name].members[target])
            delivery = wire.replace_header(env, "To", target_address)
            self.net.inject_deliver(
                self.net.clock,
                from_ident.address.render(),
                target_node,
                target_address,
                wire.serialize(delivery),
                message_id=delivery.get("Message-ID"),
            )

    def _forged_post(self, state, ident, body: bytes, prev_hash: str):
        from .identity import sign as _sign

        headers = [
            ("From", state.my_address),
            ("To", state.my_address),
            ("Date", str(self.net.clock)),
            ("List", state.list_id),
            ("Prev-Hash", prev_hash),
        ]
        env = wire.Envelope(headers=headers, body=body)
        env = wire.assign_message_id(env, ident.address.label)
        signature = _sign(ident.mail.secret, wire.signing_bytes(env))
        env = wire.add_header(
            env, "Signature", wire.make_signature_value(ident.mail.fingerprint, signature)
        )
        counter = _sign(ident.mail.secret, wire.countersign_bytes(env))
        return wire.add_header(
            env, "Countersign", wire.make_signature_value(ident.mail.fingerprint, counter)
        )

    def _inject_deliver(self, p) -> None:
        target = self.nodes[p["to"]]
        headers = []
        body = p.get("body", "").encode()
        for name, value in p["headers"]:
            headers.append((name, self._expand_macro(value)))
        names = [name for name, _ in headers]
        env_headers = headers
        if "Message-ID" not in names:
            digest = hashlib.sha256(self._raw_serialize(headers, body)).hexdigest()
            env_headers = headers + [("Message-ID", f"{digest[:16]}@inject")]
        channel = None
        if p.get("from") and p["from"] != "external":
            channel = self._sole_identity_address(p["from"])
        elif p.get("channel"):
            channel = self._expand_macro(p["channel"])
        data = self._raw_serialize(env_headers, body)
        mid = dict(env_headers).get("Message-ID")
        if p.get("tag"):
            self.tags[p["tag"]] = mid
        to_shown = dict(env_headers).get("To", p["to"])
        self.net.inject_deliver(self.net.clock, channel, target, to_shown, data, message_id=mid)

    # ------------------------------------------------------------------
    # assertions

    def _resolve_tag(self, tag: str) -> str | None:
        mid = self.tags.get(tag)
        if mid is not None:
            return mid
        # Deferred sends record their id at the node when finally composed.
        for node in self.nodes.values():
            if tag in node.client_refs:
                return node.client_refs[tag]
        return None

    def _evaluate_assert(self, d: Directive) -> None:
        predicate = d.args["predicate"]
        args = d.args["args"]
        ok, detail = self._check(predicate, args)
        line = f"assert {d.raw[7:].strip()} outcome={'pass' if ok else 'fail'}"
        self.net.log.append(line)
        if not ok:
            self.failures.append(f"line {d.line}: {d.raw} ({detail})")

    def _check(self, predicate: str, args: list[str]) -> tuple[bool, str]:
        if predicate in ("delivered", "not-delivered"):
            node = self.nodes[args[0]]
            mid = self._resolve_tag(args[1])
            found = mid is not None and node.find_inbox_message(mid) is not None
            if predicate == "delivered":
                return found, f"message {mid} not in any inbox of {args[0]}"
            return not found, f"message {mid} unexpectedly delivered to {args[0]}"
        if predicate == "duplicates":
            node = self.nodes[args[0]]
            expected = int(args[1])
            return (
                node.duplicates_suppressed == expected,
                f"duplicates={node.duplicates_suppressed}, expected {expected}",
            )
        if predicate == "transmissions":
            mid = self._resolve_tag(args[0])
            actual = self.net.transmissions.get(mid, 0) if mid else 0
            expected = int(args[1])
            return actual == expected, f"transmissions={actual}, expected {expected}"
        if predicate == "consensus":
            report = self._consensus(args[0])
            expected = args[1] == "true"
            return report.ok == expected, report.detail
        if predicate == "inbox-count":
            node = self.nodes[args[0]]
            if len(args) == 3:
                actual = node.inbox_count(args[1])
                expected = int(args[2])
            else:
                actual = node.inbox_count()
                expected = int(args[1])
            return actual == expected, f"inbox-count={actual}, expected {expected}"
        if predicate == "bounced":
            node = self.nodes[args[0]]
            mid = self._resolve_tag(args[1])
            return (
                mid is not None and mid in node.bounces_received,
                f"no bounce for {mid} at {args[0]}",
            )
        raise ScenarioError(f"unknown predicate {predicate}")

    def _consensus(self, list_name: str):
        config = self.lists[list_name]
        states = [
            self.nodes[member].lists[list_name] for member in config.members
        ]
        return ledger_consensus_check(states)

    # ------------------------------------------------------------------
    # artifacts

    def _log_text(self) -> str:
        return "".join(line + "\n" for line in self.net.log)

    def _metrics_text(self) -> str:
        lines: list[str] = []
        latencies: dict[str, int] = {}
        for name in self.nodes:
            node = self.nodes[name]
            lines.append(f"bounces.{name}={len(node.bounces_received)}")
            lines.append(f"duplicates.{name}={node.duplicates_suppressed}")
            for messages in node.inbox.values():
                for message in messages:
                    mid = message.envelope.get("Message-ID")
                    date = message.envelope.get("Date")
                    if mid and date and date.isdigit() and mid not in latencies:
                        latencies[mid] = message.received_at - int(date)
            for mailbox in node.hosted.values():
                for hosted in mailbox:
                    mid = hosted.envelope.get("Message-ID")
                    date = hosted.envelope.get("Date")
                    if mid and date and date.isdigit() and mid not in latencies:
                        latencies[mid] = hosted.received_at - int(date)
        for mid, latency in latencies.items():
            lines.append(f"latency.{mid}={latency}")
        for mid, count in self.net.transmissions.items():
            lines.append(f"transmissions.{mid}={count}")
        for list_name in self.lists:
            report = self._consensus(list_name)
            lines.append(f"consensus.{list_name}={'true' if report.ok else 'false'}")
        return "".join(line + "\n" for line in sorted(lines))

    def _mailboxes_text(self) -> str:
        out: list[str] = []
        for name in self.nodes:
            node = self.nodes[name]
            for ident in node.identities.values():
                address = ident.address.render()
                out.append(f"node {name} identity {address}")
                for i, message in enumerate(node.inbox[address]):
                    env = message.envelope
                    verified = {True: "yes", False: "no", None: "unknown"}[message.verified]
                    body = message.body.decode("utf-8", errors="backslashreplace")
                    out.append(
                        f"  {i} id={env.get('Message-ID')} from={env.get('From')} "
                        f"t={message.received_at} verified={verified} body={body!r}"
                    )
            for localpart, mailbox in node.hosted.items():
                out.append(f"node {name} hosted {localpart}")
                for i, hosted in enumerate(mailbox):
                    env = hosted.envelope
                    out.append(
                        f"  {i} id={env.get('Message-ID')} from={env.get('From')} "
                        f"t={hosted.received_at} fetched={'yes' if hosted.fetched else 'no'}"
                    )
            if node.external_outbox:
                out.append(f"node {name} external-outbox")
                for i, (to, env) in enumerate(node.external_outbox):
                    body = env.body.decode("utf-8", errors="backslashreplace")
                    out.append(
                        f"  {i} to={to} from={env.get('From')} id={env.get('Message-ID')} body={body!r}"
                    )
            if node.notices:
                out.append(f"node {name} notices")
                for i, notice in enumerate(node.notices):
                    out.append(f"  {i} {notice}")
        return "".join(line + "\n" for line in out)

    def _ledgers_text(self) -> str:
        out: list[str] = []
        for list_name, config in self.lists.items():
            for member in config.members:
                state = self.nodes[member].lists[list_name]
                out.append(f"list {list_name} member {state.my_address} head={state.head_hash}")
                for position, env in enumerate(state.log):
                    out.append(
                        f"{position}\t{env.get('Message-ID')}\t{wire.message_hash(env)}\t{env.get('From')}"
                    )
        return "".join(line + "\n" for line in out)


def run_scenario(scenario: Scenario, seed: int = 0) -> RunResult:
    """Execute a parsed scenario; ScenarioError escapes as exit code 2."""
    runner = ScenarioRunner(scenario, seed=seed)
    return runner.run()
