"""A small SMILES codec for the organic subset.

Supported: vocabulary element symbols (upper case, or lower case for
aromatic ``b c n o p s``), bonds ``- = # :``, ring closures (``1``-``9`` and
``%nn``) and parenthesized branches.  Hydrogens stay implicit.  Brackets,
charges, isotopes, stereo marks and dot-disconnected parts are rejected.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import AnnotatedGraph, Skeleton


class SmilesError(ValueError):
    pass


AROMATIC_SYMBOLS = {"b": "B", "c": "C", "n": "N", "o": "O", "p": "P", "s": "S"}
BOND_SYMBOLS = {"-": "single", "=": "double", "#": "triple", ":": "aromatic"}


@dataclass(frozen=True)
class MolSpec:
    atom_vocab: tuple = ("C", "N", "O", "F")
    max_valence: tuple = (4, 3, 2, 1)
    bond_vocab: tuple = ("single", "double", "triple", "aromatic")
    bond_orders: tuple = (1.0, 2.0, 3.0, 1.5)
    name: str = field(default="custom", compare=False)

    def __post_init__(self):
        if not self.atom_vocab or not self.bond_vocab:
            raise ValueError("vocabularies must be non-empty")
        if len(self.atom_vocab) != len(self.max_valence):
            raise ValueError("one max valence per atom symbol")
        if len(self.bond_vocab) != len(self.bond_orders):
            raise ValueError("one bond order per bond type")

    @property
    def node_dim(self) -> int:
        return len(self.atom_vocab)

    @property
    def edge_dim(self) -> int:
        return len(self.bond_vocab)

    def atom_index(self, symbol: str) -> int:
        return self.atom_vocab.index(symbol)

    def bond_index(self, name: str) -> int:
        return self.bond_vocab.index(name)

    def to_dict(self) -> dict:
        return {"atom_vocab": list(self.atom_vocab), "max_valence": list(self.max_valence),
                "bond_vocab": list(self.bond_vocab), "bond_orders": list(self.bond_orders),
                "name": self.name}

    @classmethod
    def from_dict(cls, d: dict) -> "MolSpec":
        return cls(tuple(d["atom_vocab"]), tuple(d["max_valence"]), tuple(d["bond_vocab"]),
                   tuple(d["bond_orders"]), d.get("name", "custom"))


QM9 = MolSpec(name="qm9")
ZINC = MolSpec(
    atom_vocab=("C", "N", "O", "F", "P", "S", "Cl", "Br", "I"),
    max_valence=(4, 3, 2, 1, 5, 6, 1, 1, 1),
    name="zinc",
)
PRESETS = {"qm9": QM9, "zinc": ZINC}


def _tokenize(s: str, spec: MolSpec):
    """Yield ``(kind, value, position)`` tokens."""
    two_letter = {sym for sym in spec.atom_vocab if len(sym) == 2}
    i = 0
    while i < len(s):
        ch = s[i]
        if s[i:i + 2] in two_letter:
            yield "atom", (s[i:i + 2], False), i
            i += 2
        elif ch in spec.atom_vocab:
            yield "atom", (ch, False), i
            i += 1
        elif ch in AROMATIC_SYMBOLS and AROMATIC_SYMBOLS[ch] in spec.atom_vocab:
            yield "atom", (AROMATIC_SYMBOLS[ch], True), i
            i += 1
        elif ch in BOND_SYMBOLS:
            yield "bond", BOND_SYMBOLS[ch], i
            i += 1
        elif ch.isdigit():
            yield "ring", int(ch), i
            i += 1
        elif ch == "%":
            if len(s) < i + 3 or not s[i + 1:i + 3].isdigit():
                raise SmilesError(f"malformed ring label at position {i} in {s!r}")
            yield "ring", int(s[i + 1:i + 3]), i
            i += 3
        elif ch in "()":
            yield ch, None, i
            i += 1
        else:
            raise SmilesError(f"unsupported token {ch!r} at position {i} in {s!r}")


def _bridges(n: int, edges: list[tuple[int, int]]) -> set[int]:
    """Indices of edges that lie on no cycle."""
    adj: list[list[tuple[int, int]]] = [[] for _ in range(n)]
    for k, (i, j) in enumerate(edges):
        adj[i].append((j, k))
        adj[j].append((i, k))
    disc = [-1] * n
    low = [0] * n
    out: set[int] = set()
    timer = 0
    for root in range(n):
        if disc[root] != -1:
            continue
        disc[root] = low[root] = timer
        timer += 1
        stack = [(root, -1, iter(adj[root]))]
        while stack:
            v, via, it = stack[-1]
            for w, k in it:
                if k == via:
                    continue
                if disc[w] == -1:
                    disc[w] = low[w] = timer
                    timer += 1
                    stack.append((w, k, iter(adj[w])))
                    break
                low[v] = min(low[v], disc[w])
            else:
                stack.pop()
                if stack:
                    parent = stack[-1][0]
                    low[parent] = min(low[parent], low[v])
                    if low[v] > disc[parent]:
                        out.add(via)
    return out


def parse_smiles(s: str, spec: MolSpec = QM9) -> AnnotatedGraph:
    s = s.strip()
    if not s:
        raise SmilesError("empty SMILES string")
    atoms: list[tuple[str, bool]] = []
    bonds: list[tuple[int, int, str | None]] = []
    seen: set[tuple[int, int]] = set()
    stack: list[int] = []
    open_rings: dict[int, tuple[int, str | None, int]] = {}
    prev: int | None = None
    pending: str | None = None
    pending_pos = 0

    def add_bond(i, j, kind, pos):
        key = (min(i, j), max(i, j))
        if i == j or key in seen:
            raise SmilesError(f"invalid ring closure at position {pos} in {s!r}")
        seen.add(key)
        bonds.append((i, j, kind))

    for kind, value, pos in _tokenize(s, spec):
        if kind == "atom":
            atoms.append(value)
            idx = len(atoms) - 1
            if prev is not None:
                add_bond(prev, idx, pending, pos)
            elif pending is not None:
                raise SmilesError(f"bond symbol without a preceding atom at position {pending_pos} in {s!r}")
            prev, pending = idx, None
        elif kind == "bond":
            if pending is not None or prev is None:
                raise SmilesError(f"unexpected bond symbol at position {pos} in {s!r}")
            pending, pending_pos = value, pos
        elif kind == "ring":
            if prev is None:
                raise SmilesError(f"ring label before any atom at position {pos} in {s!r}")
            if value in open_rings:
                other, other_kind, _ = open_rings.pop(value)
                if pending and other_kind and pending != other_kind:
                    raise SmilesError(f"conflicting ring bond symbols at position {pos} in {s!r}")
                add_bond(other, prev, pending or other_kind, pos)
            else:
                open_rings[value] = (prev, pending, pos)
            pending = None
        elif kind == "(":
            if prev is None or pending is not None:
                raise SmilesError(f"unexpected '(' at position {pos} in {s!r}")
            stack.append(prev)
        elif kind == ")":
            if not stack or pending is not None:
                raise SmilesError(f"unbalanced ')' at position {pos} in {s!r}")
            prev = stack.pop()
    if pending is not None:
        raise SmilesError(f"dangling bond symbol at position {pending_pos} in {s!r}")
    if open_rings:
        label, (_, _, pos) = next(iter(open_rings.items()))
        raise SmilesError(f"unclosed ring bond {label} opened at position {pos} in {s!r}")
    if stack:
        raise SmilesError(f"unclosed branch in {s!r}")

    edge_list = [(i, j) for i, j, _ in bonds]
    acyclic = _bridges(len(atoms), edge_list)
    node_feats = np.zeros((len(atoms), spec.node_dim))
    for k, (sym, _) in enumerate(atoms):
        node_feats[k, spec.atom_index(sym)] = 1.0
    edge_feats = np.zeros((len(bonds), spec.edge_dim))
    for k, (i, j, b) in enumerate(bonds):
        if b is None:
            b = "aromatic" if atoms[i][1] and atoms[j][1] and k not in acyclic else "single"
        edge_feats[k, spec.bond_index(b)] = 1.0
    return AnnotatedGraph(Skeleton(len(atoms), edge_list), node_feats, edge_feats)


def _categories(feats: np.ndarray, what: str) -> np.ndarray:
    if feats.size == 0:
        return np.zeros(len(feats), dtype=np.int64)
    ok = np.isin(feats, (0.0, 1.0)).all(axis=1) & (feats.sum(axis=1) == 1)
    if not ok.all():
        raise SmilesError(f"{what} row {int(np.argmin(ok))} is not a one-hot vector")
    return feats.argmax(axis=1)


def write_smiles(g: AnnotatedGraph, spec: MolSpec = QM9) -> str:
    """Serialize a one-hot molecular graph.

    Disconnected graphs are joined with ``.``, which :func:`parse_smiles`
    rejects; callers keep those out of SMILES exports.
    """
    atom_cat = _categories(g.node_feats, "node_feats")
    bond_cat = _categories(g.edge_feats, "edge_feats") if g.skeleton.m else np.zeros(0, int)
    aromatic = spec.bond_vocab.index("aromatic") if "aromatic" in spec.bond_vocab else -1
    edges = [tuple(e) for e in g.edges.tolist()]
    acyclic = _bridges(g.n, edges)
    adj: list[list[tuple[int, int]]] = [[] for _ in range(g.n)]
    for k, (i, j) in enumerate(edges):
        adj[i].append((j, k))
        adj[j].append((i, k))
    is_arom = [False] * g.n
    for k, (i, j) in enumerate(edges):
        if bond_cat[k] == aromatic:
            is_arom[i] = is_arom[j] = True

    def atom_text(v):
        sym = spec.atom_vocab[atom_cat[v]]
        if is_arom[v] and sym.lower() in AROMATIC_SYMBOLS:
            return sym.lower()
        return sym

    def written_lower(v):
        return atom_text(v).islower()

    def bond_text(k, i, j):
        name = spec.bond_vocab[bond_cat[k]]
        both_lower = written_lower(i) and written_lower(j)
        if name == "aromatic":
            return "" if both_lower and k not in acyclic else ":"
        if name == "single":
            return "-" if both_lower and k not in acyclic else ""
        return {"double": "=", "triple": "#"}[name]

    # depth-first spanning tree; non-tree edges become ring closures
    visited = [False] * g.n
    parent_edge = [-1] * g.n
    order: list[int] = []
    tree_children: list[list[tuple[int, int]]] = [[] for _ in range(g.n)]
    closures: list[list[tuple[int, int]]] = [[] for _ in range(g.n)]
    used_edge = [False] * len(edges)
    for root in range(g.n):
        if visited[root]:
            continue
        order.append(root)
        stack = [root]
        visited[root] = True
        while stack:
            v = stack.pop()
            for w, k in sorted(adj[v], reverse=True):
                if used_edge[k]:
                    continue
                if not visited[w]:
                    visited[w] = True
                    used_edge[k] = True
                    parent_edge[w] = k
                    tree_children[v].append((w, k))
                    stack.append(w)
    for k in range(len(edges)):
        if not used_edge[k]:
            i, j = edges[k]
            closures[i].append((j, k))
            closures[j].append((i, k))

    free_labels = list(range(1, 100))
    label_of: dict[int, int] = {}
    out: list[str] = []
    emitted = [False] * g.n

    def walk(v):
        emitted[v] = True
        out.append(atom_text(v))
        for w, k in closures[v]:
            if k in label_of:
                lab = label_of.pop(k)
                out.append(_ring_text(lab))
                free_labels.append(lab)
                free_labels.sort()
            else:
                lab = free_labels.pop(0)
                label_of[k] = lab
                out.append(bond_text(k, v, w) + _ring_text(lab))
        kids = [(w, k) for w, k in tree_children[v]]
        for idx, (w, k) in enumerate(kids):
            last = idx == len(kids) - 1
            if not last:
                out.append("(")
            out.append(bond_text(k, v, w))
            walk(w)
            if not last:
                out.append(")")

    parts = []
    for root in order:
        out = []
        walk(root)
        parts.append("".join(out))
    return ".".join(parts)


def _ring_text(label: int) -> str:
    return str(label) if label < 10 else f"%{label:02d}"


def read_smiles_file(path, spec: MolSpec = QM9):
    """Yield ``(line_number, smiles)`` for non-empty lines of a (optionally gzipped) corpus."""
    import gzip

    opener = gzip.open if str(path).endswith(".gz") else open
    with opener(path, "rt", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            text = line.split()[0] if line.strip() else ""
            if text:
                yield lineno, text
