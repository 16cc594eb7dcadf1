"""Line-oriented scenario scripts: grammar, parser, and validation.

A scenario declares a world (nodes, identities, contacts, schedules,
lists), schedules timed actions (sends, posts, injections, revocations),
runs the clock, and asserts outcomes.  ``#`` starts a comment; blank
lines are ignored.  Directives may only reference previously declared
names, and every parse problem is reported with its line number.

Timed actions accept ``tag=<name>`` so later ASSERT directives can refer
to a message whose content-derived id is only known at run time.
"""

from __future__ import annotations

import shlex
from dataclasses import dataclass, field

SEND_MODES = ("direct-only", "carrier-fallback", "fan-out")
LIST_MODES = ("flood", "tree")
DIRECTIONS = ("both", "to-list", "from-list")
INJECT_KINDS = ("deliver", "tamper-body", "chain-break", "forge-author")
ASSERT_KINDS = (
    "delivered",
    "not-delivered",
    "duplicates",
    "transmissions",
    "consensus",
    "inbox-count",
    "bounced",
)


class ScenarioParseError(ValueError):
    def __init__(self, message: str, line: int):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass
class Directive:
    kind: str
    args: dict
    line: int
    raw: str


@dataclass
class Scenario:
    directives: list[Directive] = field(default_factory=list)


class _Parser:
    def __init__(self):
        self.nodes: set[str] = set()
        self.identities: dict[str, set[str]] = {}
        self.lists: dict[str, dict] = {}  # name -> {"members": set of node names}
        self.directives: list[Directive] = []

    def fail(self, message: str, line: int):
        raise ScenarioParseError(message, line)

    def need_node(self, name: str, line: int) -> str:
        if name not in self.nodes:
            self.fail(f"unknown node {name!r} (forward reference?)", line)
        return name

    def need_identity(self, node: str, ident: str, line: int) -> tuple[str, str]:
        self.need_node(node, line)
        if ident not in self.identities.get(node, set()):
            self.fail(f"unknown identity {ident!r} on node {node!r}", line)
        return node, ident

    def need_list(self, name: str, line: int) -> str:
        if name not in self.lists:
            self.fail(f"unknown list {name!r}", line)
        return name

    def need_int(self, token: str, line: int, what: str = "integer") -> int:
        try:
            return int(token)
        except ValueError:
            self.fail(f"expected {what}, got {token!r}", line)

    def parse(self, text: str) -> Scenario:
        for line_no, raw in enumerate(text.splitlines(), start=1):
            stripped = raw.strip()
            if not stripped or stripped.startswith("#"):
                continue
            try:
                tokens = shlex.split(stripped, comments=True)
            except ValueError as exc:
                self.fail(f"bad quoting: {exc}", line_no)
            if not tokens:
                continue
            keyword = tokens[0]
            handler = getattr(self, "_d_" + keyword.replace("-", "_").lower(), None)
            if handler is None or not keyword.isupper():
                self.fail(f"unknown directive {keyword!r}", line_no)
            args = handler(tokens[1:], line_no)
            self.directives.append(Directive(keyword, args, line_no, stripped))
        return Scenario(directives=self.directives)

    # -- declarations ---------------------------------------------------

    def _d_node(self, tokens, line):
        if len(tokens) != 1:
            self.fail("usage: NODE <name>", line)
        name = tokens[0]
        if name in self.nodes:
            self.fail(f"node {name!r} already declared", line)
        self.nodes.add(name)
        self.identities[name] = set()
        return {"name": name}

    def _d_identity(self, tokens, line):
        if len(tokens) < 3:
            self.fail("usage: IDENTITY <node> <name> seed=<k> [localpart=<x>]", line)
        node = self.need_node(tokens[0], line)
        name = tokens[1]
        if name in self.identities[node]:
            self.fail(f"identity {name!r} already declared on {node!r}", line)
        seed = None
        localpart = "user"
        for token in tokens[2:]:
            if token.startswith("seed="):
                seed = self.need_int(token[5:], line, "seed")
            elif token.startswith("localpart="):
                localpart = token[10:]
            else:
                self.fail(f"unexpected token {token!r}", line)
        if seed is None:
            self.fail("IDENTITY requires seed=<k>", line)
        self.identities[node].add(name)
        return {"node": node, "name": name, "seed": seed, "localpart": localpart}

    def _d_host(self, tokens, line):
        if len(tokens) != 2:
            self.fail("usage: HOST <node> <localpart>", line)
        return {"node": self.need_node(tokens[0], line), "localpart": tokens[1]}

    def _d_gateway(self, tokens, line):
        if len(tokens) != 2:
            self.fail("usage: GATEWAY <node> <hostname>", line)
        return {"node": self.need_node(tokens[0], line), "host": tokens[1]}

    def _d_contact(self, tokens, line):
        # CONTACT <node> <ident> <- <node> <ident> [via <node>]
        # CONTACT <node> <ident> <- <external-address> [via <node>]
        if len(tokens) < 4 or tokens[2] != "<-":
            self.fail("usage: CONTACT <node> <id> <- <node> <id> | <address> [via <node>]", line)
        node, ident = self.need_identity(tokens[0], tokens[1], line)
        rest = tokens[3:]
        if "@" in rest[0]:
            source = {"literal": rest[0]}
            rest = rest[1:]
        else:
            if len(rest) < 2:
                self.fail("CONTACT source needs <node> <id>", line)
            src_node, src_ident = self.need_identity(rest[0], rest[1], line)
            source = {"node": src_node, "ident": src_ident}
            rest = rest[2:]
        via = None
        if rest:
            if len(rest) != 2 or rest[0] != "via":
                self.fail("trailing tokens; expected [via <node>]", line)
            via = self.need_node(rest[1], line)
        return {"node": node, "ident": ident, "source": source, "via": via}

    def _d_exchange_keys(self, tokens, line):
        if len(tokens) != 4:
            self.fail("usage: EXCHANGE-KEYS <node> <id> <node> <id>", line)
        a, ai = self.need_identity(tokens[0], tokens[1], line)
        b, bi = self.need_identity(tokens[2], tokens[3], line)
        return {"a": a, "ai": ai, "b": b, "bi": bi}

    def _d_online(self, tokens, line):
        if len(tokens) != 3:
            self.fail("usage: ONLINE <node> <start> <end>", line)
        return {
            "node": self.need_node(tokens[0], line),
            "start": self.need_int(tokens[1], line),
            "end": self.need_int(tokens[2], line),
        }

    def _d_link_latency(self, tokens, line):
        if len(tokens) != 3:
            self.fail("usage: LINK-LATENCY <node> <node> <units>", line)
        return {
            "a": self.need_node(tokens[0], line),
            "b": self.need_node(tokens[1], line),
            "units": self.need_int(tokens[2], line),
        }

    def _d_partition(self, tokens, line):
        if len(tokens) < 4:
            self.fail("usage: PARTITION <start> <end> {a b} {c d}", line)
        start = self.need_int(tokens[0], line)
        end = self.need_int(tokens[1], line)
        groups = self._brace_groups(tokens[2:], line)
        if len(groups) != 2:
            self.fail("PARTITION needs exactly two {..} groups", line)
        for group in groups:
            for name in group:
                self.need_node(name, line)
        return {"start": start, "end": end, "groups": groups}

    def _brace_groups(self, tokens, line):
        groups, current = [], None
        for token in tokens:
            while token.startswith("{"):
                if current is not None:
                    self.fail("nested { in group", line)
                current = []
                token = token[1:]
            closes = 0
            while token.endswith("}"):
                closes += 1
                token = token[:-1]
            if token:
                if current is None:
                    self.fail(f"token {token!r} outside braces", line)
                current.append(token)
            for _ in range(closes):
                if current is None:
                    self.fail("unbalanced }", line)
                groups.append(current)
                current = None
        if current is not None:
            self.fail("unclosed {", line)
        return groups

    # -- timed actions ---------------------------------------------------

    def _d_send(self, tokens, line):
        # SEND <t> <node> <id> -> <to> [<id>] body="..." [mode] [confirm] [tag=x]
        if len(tokens) < 5:
            self.fail("usage: SEND <t> <node> <id> -> <to...> body=... [mode] [confirm] [tag=x]", line)
        t = self.need_int(tokens[0], line, "time")
        node, ident = self.need_identity(tokens[1], tokens[2], line)
        if tokens[3] != "->":
            self.fail("SEND needs '->' after the sender", line)
        rest = tokens[4:]
        if "@" in rest[0]:
            to = {"literal": rest[0]}
            rest = rest[1:]
        else:
            if len(rest) < 2:
                self.fail("SEND destination needs <node> <id> or a literal address", line)
            to_node, to_ident = self.need_identity(rest[0], rest[1], line)
            to = {"node": to_node, "ident": to_ident}
            rest = rest[2:]
        body = None
        mode = "carrier-fallback"
        confirm = False
        tag = None
        for token in rest:
            if token.startswith("body="):
                body = token[5:]
            elif token in SEND_MODES:
                mode = token
            elif token == "confirm":
                confirm = True
            elif token.startswith("tag="):
                tag = token[4:]
            else:
                self.fail(f"unexpected SEND token {token!r}", line)
        if body is None:
            self.fail("SEND requires body=\"...\"", line)
        return {
            "t": t, "node": node, "ident": ident, "to": to,
            "body": body, "mode": mode, "confirm": confirm, "tag": tag,
        }

    def _d_list_create(self, tokens, line):
        if not tokens:
            self.fail("usage: LIST-CREATE <name> mode=flood|tree [ledger] [jitter=K]", line)
        name = tokens[0]
        if name in self.lists:
            self.fail(f"list {name!r} already declared", line)
        mode = "flood"
        ledger = False
        jitter = 0
        for token in tokens[1:]:
            if token.startswith("mode="):
                mode = token[5:]
                if mode not in LIST_MODES:
                    self.fail(f"unknown list mode {mode!r}", line)
            elif token == "ledger":
                ledger = True
            elif token.startswith("jitter="):
                jitter = self.need_int(token[7:], line, "jitter")
            else:
                self.fail(f"unexpected token {token!r}", line)
        self.lists[name] = {"members": set()}
        return {"name": name, "mode": mode, "ledger": ledger, "jitter": jitter}

    def _d_list_join(self, tokens, line):
        if len(tokens) < 3:
            self.fail("usage: LIST-JOIN <list> <node> <id> [dir=...]", line)
        name = self.need_list(tokens[0], line)
        node, ident = self.need_identity(tokens[1], tokens[2], line)
        direction = "both"
        for token in tokens[3:]:
            if token.startswith("dir="):
                direction = token[4:]
                if direction not in DIRECTIONS:
                    self.fail(f"unknown direction {direction!r}", line)
            else:
                self.fail(f"unexpected token {token!r}", line)
        if node in self.lists[name]["members"]:
            self.fail(f"{node!r} already joined {name!r}", line)
        self.lists[name]["members"].add(node)
        return {"name": name, "node": node, "ident": ident, "direction": direction}

    def _d_list_link(self, tokens, line):
        if len(tokens) != 3:
            self.fail("usage: LIST-LINK <list> <node> <node>", line)
        name = self.need_list(tokens[0], line)
        a, b = tokens[1], tokens[2]
        for member in (a, b):
            if member not in self.lists[name]["members"]:
                self.fail(f"{member!r} has not joined list {name!r}", line)
        if a == b:
            self.fail("cannot link a member to itself", line)
        return {"name": name, "a": a, "b": b}

    def _d_list_post(self, tokens, line):
        if len(tokens) < 5:
            self.fail("usage: LIST-POST <t> <list> <node> <id> body=... [tag=x]", line)
        t = self.need_int(tokens[0], line, "time")
        name = self.need_list(tokens[1], line)
        node, ident = self.need_identity(tokens[2], tokens[3], line)
        if node not in self.lists[name]["members"]:
            self.fail(f"{node!r} has not joined list {name!r}", line)
        body = None
        tag = None
        for token in tokens[4:]:
            if token.startswith("body="):
                body = token[5:]
            elif token.startswith("tag="):
                tag = token[4:]
            else:
                self.fail(f"unexpected token {token!r}", line)
        if body is None:
            self.fail("LIST-POST requires body=\"...\"", line)
        return {"t": t, "name": name, "node": node, "ident": ident, "body": body, "tag": tag}

    def _d_inject(self, tokens, line):
        if len(tokens) < 2:
            self.fail("usage: INJECT <t> <kind> ...", line)
        t = self.need_int(tokens[0], line, "time")
        kind = tokens[1]
        if kind not in INJECT_KINDS:
            self.fail(f"unknown INJECT kind {kind!r}", line)
        params: dict = {"headers": []}
        for token in tokens[2:]:
            key, sep, value = token.partition("=")
            if not sep:
                self.fail(f"INJECT parameters must be key=value, got {token!r}", line)
            if key in ("to", "from", "list", "author", "tag", "body", "prev", "index", "channel"):
                params[key] = value
            elif key[:1].isupper():
                params["headers"].append((key, value))
            else:
                self.fail(f"unexpected INJECT parameter {key!r}", line)
        if kind == "deliver":
            if "to" not in params:
                self.fail("INJECT deliver requires to=<node>", line)
            self.need_node(params["to"], line)
        else:
            if "list" not in params or "from" not in params:
                self.fail(f"INJECT {kind} requires list=<name> and from=<node>", line)
            self.need_list(params["list"], line)
            self.need_node(params["from"], line)
            if kind == "tamper-body" and "index" not in params:
                self.fail("INJECT tamper-body requires index=<i>", line)
            if kind == "forge-author":
                if "author" not in params or "to" not in params:
                    self.fail("INJECT forge-author requires author=<node> to=<node>", line)
        for key in ("index", "prev"):
            if key in params:
                params[key] = self.need_int(params[key], line, key)
        return {"t": t, "inject": kind, "params": params}

    def _d_revoke(self, tokens, line):
        if len(tokens) < 3:
            self.fail("usage: REVOKE <t> <node> <id> [key]", line)
        t = self.need_int(tokens[0], line, "time")
        node, ident = self.need_identity(tokens[1], tokens[2], line)
        kind = "address"
        if len(tokens) > 3:
            if tokens[3] != "key" or len(tokens) > 4:
                self.fail("usage: REVOKE <t> <node> <id> [key]", line)
            kind = "key"
        return {"t": t, "node": node, "ident": ident, "kind": kind}

    def _d_run(self, tokens, line):
        until = None
        for token in tokens:
            if token.startswith("until="):
                until = self.need_int(token[6:], line, "time")
            else:
                self.fail(f"unexpected RUN token {token!r}", line)
        return {"until": until}

    def _d_assert(self, tokens, line):
        if not tokens:
            self.fail("ASSERT requires a predicate", line)
        kind = tokens[0]
        if kind not in ASSERT_KINDS:
            self.fail(f"unknown ASSERT predicate {kind!r}", line)
        args = tokens[1:]
        if kind in ("delivered", "not-delivered", "bounced"):
            if len(args) != 2:
                self.fail(f"usage: ASSERT {kind} <node> <tag>", line)
            self.need_node(args[0], line)
        elif kind == "duplicates":
            if len(args) != 2:
                self.fail("usage: ASSERT duplicates <node> <count>", line)
            self.need_node(args[0], line)
            self.need_int(args[1], line)
        elif kind == "transmissions":
            if len(args) != 2:
                self.fail("usage: ASSERT transmissions <tag> <count>", line)
            self.need_int(args[1], line)
        elif kind == "consensus":
            if len(args) != 2 or args[1] not in ("true", "false"):
                self.fail("usage: ASSERT consensus <list> true|false", line)
            self.need_list(args[0], line)
        elif kind == "inbox-count":
            if len(args) == 2:
                self.need_node(args[0], line)
                self.need_int(args[1], line)
            elif len(args) == 3:
                self.need_identity(args[0], args[1], line)
                self.need_int(args[2], line)
            else:
                self.fail("usage: ASSERT inbox-count <node> [<id>] <count>", line)
        return {"predicate": kind, "args": args}


def parse_scenario(text: str) -> Scenario:
    """Parse scenario text; raises ScenarioParseError naming the line."""
    return _Parser().parse(text)
