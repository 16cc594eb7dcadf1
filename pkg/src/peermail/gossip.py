"""Decentralised mailing lists over pairwise member links.

A list has no server: members hold pairwise links, and a message floods
link by link, each member passing a newly accepted message to its other
neighbours and discarding duplicates.  Every list message is signed by its
original author and countersigned by the neighbour that delivered it, so a
member can authenticate both the content and the hop.  A list may also run
a hash-chain ledger: each post commits to the hash of the previous one and
anything that breaks the chain is rejected for propagation.

Tree mode replaces flooding with forwarding along a spanning tree computed
from the global membership graph, cutting transmissions per message from
2E - V + 1 to V - 1.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Optional

from . import wire
from .addressbook import AddressBook
from .identity import MailKey, sign, verify
from .wire import GENESIS_HASH, Envelope


class GossipError(Exception):
    """Invalid list operation (non-member post, tree not built, ...)."""


class DisconnectedGraphError(GossipError):
    """The membership graph does not connect; lists the components."""

    def __init__(self, components: list[list[str]]):
        super().__init__(
            "membership graph is disconnected: "
            + " | ".join(",".join(c) for c in components)
        )
        self.components = components


@dataclass
class LinkPolicy:
    """Direction agreement for one pairwise link, from this member's side."""

    outbound: bool = True  # I forward list traffic to this neighbour
    inbound: bool = True  # this neighbour forwards list traffic to me


@dataclass
class ListResult:
    """Outcome of handling one incoming list message."""

    outcome: str  # accepted | duplicate | buffered | rejected
    reason: str = ""
    forwards: list[tuple[str, Envelope]] = field(default_factory=list)

    def log_token(self) -> str:
        if self.outcome == "accepted":
            return "ok"
        if self.outcome == "duplicate":
            return "dropped-dup"
        if self.outcome == "buffered":
            return "rejected:buffered"
        return f"rejected:{self.reason}"


class ListState:
    """One member's view of a list: links, accepted log, chain head."""

    def __init__(
        self,
        list_id: str,
        my_address: str,
        my_mail: MailKey,
        mode: str = "flood",
        ledger: bool = False,
        jitter: int = 0,
    ):
        if mode not in ("flood", "tree"):
            raise GossipError(f"unknown list mode {mode!r}")
        self.list_id = list_id
        self.my_address = my_address
        self.my_mail = my_mail
        self.mode = mode
        self.ledger = ledger
        self.jitter = jitter
        self.links: dict[str, LinkPolicy] = {}
        self.log: list[Envelope] = []
        self.log_ids: set[str] = set()
        self.accept_times: dict[str, int] = {}
        self.head_hash: str = GENESIS_HASH
        self.tree_links: Optional[list[str]] = None
        self.pending: Optional[tuple[Envelope, str]] = None
        self.accept_predicate: Optional[Callable[[Envelope], bool]] = None
        self._hash_positions: dict[str, int] = {}

    def add_link(self, address: str, outbound: bool = True, inbound: bool = True) -> None:
        self.links[address] = LinkPolicy(outbound=outbound, inbound=inbound)

    def set_tree_links(self, neighbours: list[str]) -> None:
        unknown = [n for n in neighbours if n not in self.links]
        if unknown:
            raise GossipError(f"tree neighbours not linked: {unknown}")
        self.tree_links = list(neighbours)

    def _targets(self, exclude: str | None) -> list[str]:
        if self.mode == "tree":
            if self.tree_links is None:
                raise GossipError(f"list {self.list_id}: tree not built")
            candidates = self.tree_links
        else:
            candidates = list(self.links)
        return [
            n
            for n in candidates
            if n != exclude and self.links[n].outbound
        ]

    def _my_label(self) -> str:
        return self.my_address.split("@")[1].split(".")[0]

    def _accept(self, env: Envelope, now: int) -> None:
        mid = env.get("Message-ID")
        digest = wire.message_hash(env)
        self.log.append(env)
        self.log_ids.add(mid)
        self.accept_times[mid] = now
        self._hash_positions[digest] = len(self.log) - 1
        self.head_hash = digest

    def _countersigned(self, env: Envelope) -> Envelope:
        stripped = wire.drop_header(env, "Countersign")
        signature = sign(self.my_mail.secret, wire.countersign_bytes(stripped))
        return wire.add_header(
            stripped,
            "Countersign",
            wire.make_signature_value(self.my_mail.fingerprint, signature),
        )


def post(state: ListState, body: bytes, now: int) -> tuple[Envelope, list[tuple[str, Envelope]]]:
    """Author a list message: sign, countersign as first hop, fan out.

    On a ledger list the message commits to the current head hash.
    Returns the accepted envelope and per-neighbour transmissions.
    """
    headers = [
        ("From", state.my_address),
        ("To", state.my_address),
        ("Date", str(now)),
        ("List", state.list_id),
    ]
    if state.ledger:
        headers.append(("Prev-Hash", state.head_hash))
    env = Envelope(headers=headers, body=body)
    env = wire.assign_message_id(env, state._my_label())
    signature = sign(state.my_mail.secret, wire.signing_bytes(env))
    env = wire.add_header(
        env, "Signature", wire.make_signature_value(state.my_mail.fingerprint, signature)
    )
    counter = sign(state.my_mail.secret, wire.countersign_bytes(env))
    env = wire.add_header(
        env, "Countersign", wire.make_signature_value(state.my_mail.fingerprint, counter)
    )
    state._accept(env, now)
    transmissions = [
        (neighbour, wire.replace_header(env, "To", neighbour))
        for neighbour in state._targets(exclude=None)
    ]
    return env, transmissions


def on_list_message(
    state: ListState,
    env: Envelope,
    received_from: str,
    book: AddressBook,
    now: int,
) -> ListResult:
    """Validate, dedup, chain-check, and forward one incoming list message.

    The delivering hop's countersignature is checked before the author
    signature: the first question about a forwarded message is whether the
    neighbour that handed it over vouches for these exact bytes.
    """
    policy = state.links.get(received_from)
    if policy is None or not policy.inbound:
        return ListResult("rejected", "not-a-neighbour")
    mid = env.get("Message-ID")
    author = env.get("From")
    if mid is None or author is None:
        return ListResult("rejected", "malformed")
    if env.get("Signature") is None:
        return ListResult("rejected", "bad-author-sig")

    counter_value = env.get("Countersign")
    if counter_value is None:
        return ListResult("rejected", "bad-countersign")
    try:
        _, counter_sig = wire.parse_signature_value(counter_value)
    except ValueError:
        return ListResult("rejected", "bad-countersign")
    neighbour = book.entries.get(received_from)
    if neighbour is None or neighbour.mail_public is None:
        return ListResult("rejected", "bad-countersign")
    if not verify(neighbour.mail_public, wire.countersign_bytes(env), counter_sig):
        return ListResult("rejected", "bad-countersign")

    try:
        _, author_sig = wire.parse_signature_value(env.get("Signature"))
    except ValueError:
        return ListResult("rejected", "bad-author-sig")
    if author == state.my_address:
        author_key = state.my_mail.public
    else:
        contact = book.entries.get(author)
        author_key = contact.mail_public if contact else None
    if author_key is None or not verify(author_key, wire.signing_bytes(env), author_sig):
        return ListResult("rejected", "bad-author-sig")

    if mid in state.log_ids or (state.pending and state.pending[0].get("Message-ID") == mid):
        return ListResult("duplicate")

    if state.ledger:
        claimed = env.get("Prev-Hash")
        if claimed is None:
            return ListResult("rejected", "chain-break")
        if claimed != state.head_hash:
            stale = claimed in state._hash_positions or (
                claimed == GENESIS_HASH and state.log
            )
            if stale:
                return ListResult("rejected", "chain-break")
            if state.pending is None:
                state.pending = (env, received_from)
                return ListResult("buffered")
            return ListResult("rejected", "chain-break")

    if state.accept_predicate is not None and not state.accept_predicate(env):
        return ListResult("rejected", "policy")

    forwards = _accept_and_forward(state, env, received_from, now)
    return ListResult("accepted", forwards=forwards)


def _accept_and_forward(
    state: ListState, env: Envelope, received_from: str, now: int
) -> list[tuple[str, Envelope]]:
    state._accept(env, now)
    outgoing = state._countersigned(env)
    forwards = [
        (neighbour, wire.replace_header(outgoing, "To", neighbour))
        for neighbour in state._targets(exclude=received_from)
    ]
    # A buffered out-of-order message may chain onto the new head.
    while state.pending is not None:
        pending_env, pending_from = state.pending
        if pending_env.get("Message-ID") in state.log_ids:
            state.pending = None
            continue
        if pending_env.get("Prev-Hash") != state.head_hash:
            break
        state.pending = None
        if state.accept_predicate is not None and not state.accept_predicate(pending_env):
            continue
        state._accept(pending_env, now)
        resigned = state._countersigned(pending_env)
        forwards.extend(
            (neighbour, wire.replace_header(resigned, "To", neighbour))
            for neighbour in state._targets(exclude=pending_from)
        )
    return forwards


def build_tree(graph: dict[str, list[str]]) -> list[tuple[str, str]]:
    """Deterministic spanning tree: BFS from the smallest address.

    Neighbours are visited in address order, so the same graph always
    yields the same tree.  Raises DisconnectedGraphError (listing the
    components) when the graph does not connect.
    """
    if not graph:
        return []
    nodes = sorted(graph)
    root = nodes[0]
    visited = {root}
    edges: list[tuple[str, str]] = []
    queue = deque([root])
    while queue:
        u = queue.popleft()
        for v in sorted(graph[u]):
            if v not in visited:
                visited.add(v)
                edges.append((u, v))
                queue.append(v)
    if len(visited) != len(nodes):
        raise DisconnectedGraphError(_components(graph))
    return edges


def _components(graph: dict[str, list[str]]) -> list[list[str]]:
    seen: set[str] = set()
    components = []
    for start in sorted(graph):
        if start in seen:
            continue
        component = []
        queue = deque([start])
        seen.add(start)
        while queue:
            u = queue.popleft()
            component.append(u)
            for v in sorted(graph[u]):
                if v not in seen:
                    seen.add(v)
                    queue.append(v)
        components.append(sorted(component))
    return components


@dataclass
class ConsensusReport:
    """Agreement across members' logs, with the fork point if they split."""

    ok: bool
    mode: str  # "ledger" (sequence + head) or "set" (membership only)
    fork_position: Optional[int]
    camps: dict[str, list[str]]
    detail: str

    def __bool__(self) -> bool:
        return self.ok


def ledger_consensus_check(states: list[ListState]) -> ConsensusReport:
    """Compare members' logs after quiescence.

    Ledger lists must agree on the exact message sequence and head hash;
    plain lists only on the set of messages.  On divergence the report
    names the first disagreeing position and groups members into camps.
    """
    if not states:
        return ConsensusReport(True, "ledger", None, {}, "no members")
    if all(s.ledger for s in states):
        sequences = {s.my_address: tuple(e.get("Message-ID") for e in s.log) for s in states}
        heads = {s.my_address: s.head_hash for s in states}
        if len(set(sequences.values())) == 1 and len(set(heads.values())) == 1:
            return ConsensusReport(True, "ledger", None, {}, "consistent")
        fork = 0
        seqs = list(sequences.values())
        while all(len(s) > fork for s in seqs) and len({s[fork] for s in seqs}) == 1:
            fork += 1
        camps: dict[str, list[str]] = {}
        for state in states:
            camps.setdefault(heads[state.my_address], []).append(state.my_address)
        return ConsensusReport(
            False, "ledger", fork, camps, f"logs fork at position {fork}"
        )
    id_sets = {s.my_address: frozenset(s.log_ids) for s in states}
    if len(set(id_sets.values())) == 1:
        return ConsensusReport(True, "set", None, {}, "consistent")
    camps = {}
    for state in states:
        key = ",".join(sorted(id_sets[state.my_address])) or "(empty)"
        camps.setdefault(key, []).append(state.my_address)
    return ConsensusReport(False, "set", None, camps, "message sets differ")


@dataclass
class FloodReport:
    """Result of propagating one post across a simulated membership graph."""

    message_id: str
    transmissions: int
    receipt_times: dict[str, Optional[int]]
    unreached: list[str]
    consensus: ConsensusReport


def run_flood(
    edges: list[tuple[int, int]],
    members: int,
    *,
    mode: str = "flood",
    ledger: bool = False,
    body: bytes = b"flood test message",
    author: int = 0,
    seed: int = 0,
    jitter: int = 0,
) -> FloodReport:
    """Build a simulated list over the given graph and propagate one post.

    Members are numbered 0..members-1 with deterministic key seeds and all
    pairwise keys exchanged; edges become symmetric list links.  Reports
    the transmission count, per-member receipt times, and any members the
    message never reached (possible only on a disconnected graph).
    """
    from .node import Node
    from .simnet import SimNetwork

    net = SimNetwork(seed=seed)
    nodes = []
    for i in range(members):
        node = Node(f"m{i:02d}", net)
        node.add_identity("id", seed=10_000 + i)
        nodes.append(node)
    addresses = [n.identities["id"].address.render() for n in nodes]
    for i, node in enumerate(nodes):
        book = node.books[addresses[i]]
        for j, peer in enumerate(nodes):
            if i == j:
                continue
            book.add_contact(addresses[j], display=peer.name)
            book.record_key(addresses[j], peer.identities["id"].mail.public)
    list_id = "floodtest"
    for node in nodes:
        node.join_list(list_id, "id", mode=mode, ledger=ledger, jitter=jitter)
    for i, j in edges:
        nodes[i].lists[list_id].add_link(addresses[j])
        nodes[j].lists[list_id].add_link(addresses[i])
    if mode == "tree":
        graph = {
            addresses[i]: sorted(nodes[i].lists[list_id].links) for i in range(members)
        }
        tree_edges = build_tree(graph)
        incident: dict[str, list[str]] = {a: [] for a in addresses}
        for u, v in tree_edges:
            incident[u].append(v)
            incident[v].append(u)
        for i in range(members):
            nodes[i].lists[list_id].set_tree_links(incident[addresses[i]])
    mid, _ = nodes[author].post_to_list(list_id, "id", body)
    net.run_to_quiescence(max_events=500_000)
    states = [n.lists[list_id] for n in nodes]
    receipt_times = {
        s.my_address: s.accept_times.get(mid) for s in states
    }
    unreached = [a for a, t in receipt_times.items() if t is None]
    return FloodReport(
        message_id=mid,
        transmissions=net.transmissions.get(mid, 0),
        receipt_times=receipt_times,
        unreached=unreached,
        consensus=ledger_consensus_check(states),
    )
