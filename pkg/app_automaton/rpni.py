"""
RPNI: prefix-tree acceptor plus red-blue state merging

PTA nodes are numbered breadth first with children in symbol order, so a
node id is its canonical (depth, lexicographic access string) rank. Red
states and blue candidates are always visited in that order, which makes
the learned automaton a pure function of the sample set.
"""

import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from common.errors import RejectedInputError
from common.trace_model import warning_labels

from .dfa import Dfa

Sample = Tuple[Tuple[int, ...], bool]


def labeled_samples(
    sequences: Sequence[Sequence[int]],
    outcomes: Sequence[int],
    horizon: Optional[int] = None,
    prefixes: bool = False,
) -> List[Sample]:
    """
    Full trajectories are positive iff the trajectory failed (outcome 0).
    With prefixes=True every prefix z_1..z_t is a sample, positive iff its
    warning label is 1.
    """
    if len(sequences) != len(outcomes):
        raise RejectedInputError(f"{len(sequences)} sequences vs {len(outcomes)} outcomes")
    samples: List[Sample] = []
    for symbols, outcome in zip(sequences, outcomes):
        symbols = tuple(int(z) for z in symbols)
        if not prefixes:
            samples.append((symbols, outcome == 0))
            continue
        if horizon is None:
            raise RejectedInputError("Prefix samples need a horizon")
        for t, label in enumerate(warning_labels(len(symbols), outcome, horizon), start=1):
            samples.append((symbols[:t], bool(label)))
    return samples


def ambiguity_filter(samples: Iterable[Sample]) -> Tuple[List[Sample], int]:
    """Drop every string seen with both labels; duplicates with one label collapse to one sample"""
    seen: Dict[Tuple[int, ...], set] = {}
    for symbols, label in samples:
        seen.setdefault(symbols, set()).add(label)
    kept = sorted((s, next(iter(labels))) for s, labels in seen.items() if len(labels) == 1)
    removed = sum(1 for labels in seen.values() if len(labels) > 1)
    return kept, removed


class _Hypothesis:
    """Mutable automaton over PTA node ids with an undo log for rejected merges"""

    def __init__(self, samples: Sequence[Sample]):
        children: List[Dict[int, int]] = [{}]
        labels: List[Optional[bool]] = [None]
        for symbols, label in samples:
            node = 0
            for z in symbols:
                nxt = children[node].get(z)
                if nxt is None:
                    nxt = len(children)
                    children[node][z] = nxt
                    children.append({})
                    labels.append(None)
                node = nxt
            labels[node] = label

        # renumber breadth first, symbols ascending
        order = [0]
        for node in order:
            order.extend(children[node][z] for z in sorted(children[node]))
        rank = {old: new for new, old in enumerate(order)}
        self.delta: List[Dict[int, int]] = [
            {z: rank[c] for z, c in sorted(children[old].items())} for old in order
        ]
        self.label: List[Optional[bool]] = [labels[old] for old in order]
        self._log: List[tuple] = []

    @property
    def size(self) -> int:
        return len(self.delta)

    def _set_label(self, node: int, value: bool) -> None:
        self._log.append(("label", node, self.label[node]))
        self.label[node] = value

    def _set_edge(self, node: int, symbol: int, target: int) -> None:
        self._log.append(("edge", node, symbol, self.delta[node].get(symbol)))
        self.delta[node][symbol] = target

    def _fold(self, red: int, blue: int) -> bool:
        stack = [(red, blue)]
        while stack:
            q, b = stack.pop()
            if self.label[b] is not None:
                if self.label[q] is None:
                    self._set_label(q, self.label[b])
                elif self.label[q] != self.label[b]:
                    return False
            for z, child in sorted(self.delta[b].items(), reverse=True):
                target = self.delta[q].get(z)
                if target is None:
                    self._set_edge(q, z, child)
                else:
                    stack.append((target, child))
        return True

    def try_merge(self, red: int, blue: int, incoming: Tuple[int, int]) -> bool:
        """Redirect blue's incoming edge (parent, symbol) to red and fold blue's subtree; undo on conflict"""
        self._log = []
        parent, symbol = incoming
        self._set_edge(parent, symbol, red)
        if self._fold(red, blue):
            return True
        for entry in reversed(self._log):
            if entry[0] == "label":
                self.label[entry[1]] = entry[2]
            elif entry[3] is None:
                del self.delta[entry[1]][entry[2]]
            else:
                self.delta[entry[1]][entry[2]] = entry[3]
        return False


@dataclass(frozen=True)
class RpniResult:
    states: Tuple[int, ...]                    # surviving PTA ids, canonical order
    delta: Tuple[Dict[int, int], ...]          # per surviving state, in new ids
    accepting: Tuple[bool, ...]
    pta_size: int
    merges: int


def rpni(samples: Sequence[Sample], alphabet_size: int) -> RpniResult:
    """Red-blue RPNI: a blue state merges into the first red state that stays consistent, else turns red"""
    for symbols, _ in samples:
        for z in symbols:
            if not 0 <= z < alphabet_size:
                raise RejectedInputError(f"Symbol {z} outside the alphabet of size {alphabet_size}")
    hyp = _Hypothesis(samples)
    red: List[int] = [0]
    merges = 0
    while True:
        red_set = set(red)
        incoming = {}
        for r in red:
            for z, c in hyp.delta[r].items():
                if c not in red_set:
                    incoming.setdefault(c, (r, z))
        if not incoming:
            break
        b = min(incoming)
        for r in red:
            if hyp.try_merge(r, b, incoming[b]):
                merges += 1
                break
        else:
            red.append(b)
            red.sort()

    rank = {node: i for i, node in enumerate(red)}
    delta = tuple({z: rank[c] for z, c in sorted(hyp.delta[node].items())} for node in red)
    accepting = tuple(bool(hyp.label[node]) for node in red)
    logging.info("[RPNI] Merged | pta=%s | states=%s | merges=%s", hyp.size, len(red), merges)
    return RpniResult(tuple(red), delta, accepting, hyp.size, merges)


def induce_dfa(
    sequences: Sequence[Sequence[int]],
    outcomes: Sequence[int],
    alphabet_size: int,
    horizon: Optional[int] = None,
    prefixes: bool = False,
    source_model_hash: str = "",
) -> Dfa:
    """Uncalibrated DFA from training symbol sequences, after the ambiguity filter"""
    samples, removed = ambiguity_filter(labeled_samples(sequences, outcomes, horizon, prefixes))
    if not samples:
        raise RejectedInputError("No induction samples left after the ambiguity filter")
    result = rpni(samples, alphabet_size)

    n = len(result.states)
    transitions = np.full((n + 1, alphabet_size), n, dtype=np.int64)
    for q, edges in enumerate(result.delta):
        for z, target in edges.items():
            transitions[q, z] = target
    logging.info("[RPNI] Induced DFA | samples=%s | ambiguous_removed=%s | states=%s",
                 len(samples), removed, n)
    return Dfa(
        alphabet_size=alphabet_size,
        transitions=transitions,
        accepting=result.accepting + (False,),
        source_model_hash=source_model_hash,
        info={
            "samples": len(samples),
            "positives": sum(1 for _, label in samples if label),
            "ambiguous_removed": removed,
            "pta_size": result.pta_size,
            "merges": result.merges,
            "prefix_samples": prefixes,
        },
    )
