"""Record of a forward pass, replayed in reverse by ``training.bptt_backward``."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

from .errors import TapeError


@dataclass
class TapeNode:
    op: str
    name: str
    parents: tuple
    saved: dict = field(default_factory=dict)


class Tape:
    """Append-only list of nodes in execution order.

    Parents always precede their children, so walking the list backwards is a
    valid reverse topological order. A tape may be replayed once; saved
    tensors are released as the replay proceeds.
    """

    def __init__(self):
        self.nodes = []
        self._index = {}
        self.consumed = False
        self.complete = False
        self.output = None
        self.meta: dict[str, Any] = {}

    def record(self, op, name, parents=(), **saved):
        if self.complete:
            raise TapeError("cannot record onto a completed tape")
        for p in parents:
            if p not in self._index:
                raise TapeError(f"node {name!r} references unknown parent {p!r}")
        if name in self._index:
            raise TapeError(f"duplicate tape node {name!r}")
        node = TapeNode(op, name, tuple(parents), saved)
        self._index[name] = len(self.nodes)
        self.nodes.append(node)
        return node

    def finish(self, output):
        if output not in self._index:
            raise TapeError(f"unknown output node {output!r}")
        self.output = output
        self.complete = True

    def __len__(self):
        return len(self.nodes)

    def __getitem__(self, name):
        return self.nodes[self._index[name]]
