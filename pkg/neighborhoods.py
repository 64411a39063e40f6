"""
Dependency-neighborhood systems for locally dependent random fields.

A system carries, for every index i, nested sets A_i ⊆ B_i ⊆ C_i and, at the
strongest level, B_i ⊆ B_i* ⊆ C_i* ⊆ D_i*. Labels are opaque; internally every
set is stored as a frozenset of integer positions into ``indices``.
"""

import itertools
import json
from dataclasses import dataclass, field, replace
from enum import Enum
from functools import cached_property
from pathlib import Path
from typing import Any, Dict, FrozenSet, Hashable, Iterable, List, Mapping, Optional, Sequence, Set, Tuple, Union

import networkx as nx
import numpy as np
from scipy import sparse

from errors import CapabilityError, StructuralError
from logger import log_debug, log_info


class Level(Enum):
    """Local dependence levels, weakest first."""
    LD1 = "LD1"
    LD2 = "LD2"
    LD3 = "LD3"
    LD4STAR = "LD4*"

    @property
    def rank(self) -> int:
        return _LEVEL_RANK[self]

    def covers(self, other: "Level") -> bool:
        return self.rank >= other.rank


_LEVEL_RANK = {Level.LD1: 1, Level.LD2: 2, Level.LD3: 3, Level.LD4STAR: 4}

# Set names in nesting order, with the level that introduces them.
SET_NAMES = ("A", "B", "C", "Bstar", "Cstar", "Dstar")
_SET_LEVEL = {
    "A": Level.LD1,
    "B": Level.LD2,
    "C": Level.LD3,
    "Bstar": Level.LD4STAR,
    "Cstar": Level.LD4STAR,
    "Dstar": Level.LD4STAR,
}

PositionSets = Tuple[FrozenSet[int], ...]


@dataclass(frozen=True)
class Violation:
    """One failed invariant of a neighborhood system."""
    index: Hashable
    kind: str          # 'self_membership', 'nesting', 'outside_indices'
    detail: str

    def to_dict(self) -> Dict[str, Any]:
        return {'index': _json_label(self.index), 'kind': self.kind, 'detail': self.detail}


@dataclass(frozen=True)
class NeighborhoodSystem:
    """Nested neighborhoods over a finite index set."""
    indices: Tuple[Hashable, ...]
    level: Level
    a_sets: PositionSets
    b_sets: Optional[PositionSets] = None
    c_sets: Optional[PositionSets] = None
    bstar_sets: Optional[PositionSets] = None
    cstar_sets: Optional[PositionSets] = None
    dstar_sets: Optional[PositionSets] = None
    # Lattice metadata (shape, m) when built by lattice_m_dependent
    lattice: Optional[Tuple[Tuple[int, ...], int]] = field(default=None, compare=False)

    @property
    def n(self) -> int:
        return len(self.indices)

    @cached_property
    def position(self) -> Dict[Hashable, int]:
        """Label -> position lookup."""
        return {label: pos for pos, label in enumerate(self.indices)}

    def sets(self, name: str) -> PositionSets:
        """Position sets for one of A, B, C, Bstar, Cstar, Dstar."""
        value = {
            "A": self.a_sets,
            "B": self.b_sets,
            "C": self.c_sets,
            "Bstar": self.bstar_sets,
            "Cstar": self.cstar_sets,
            "Dstar": self.dstar_sets,
        }[name]
        if value is None:
            raise CapabilityError(
                f"set family {name} needs level {_SET_LEVEL[name].value}, system is {self.level.value}"
            )
        return value

    def has(self, name: str) -> bool:
        try:
            self.sets(name)
            return True
        except CapabilityError:
            return False

    def require(self, level: Level, purpose: str = ""):
        """Raise CapabilityError unless the system reaches ``level``."""
        if not self.level.covers(level):
            suffix = f" for {purpose}" if purpose else ""
            raise CapabilityError(f"level {level.value} required{suffix}, system is {self.level.value}")

    def label_set(self, name: str, label: Hashable) -> FrozenSet[Hashable]:
        """The named set of index ``label``, as labels."""
        positions = self.sets(name)[self.position[label]]
        return frozenset(self.indices[p] for p in positions)

    @cached_property
    def _matrices(self) -> Dict[str, sparse.csr_matrix]:
        return {}

    def membership(self, name: str) -> sparse.csr_matrix:
        """Sparse 0/1 matrix M with M[j, i] = 1 iff j belongs to the named set of i."""
        if name not in self._matrices:
            self._matrices[name] = _sets_to_matrix(self.sets(name), self.n)
        return self._matrices[name]

    def to_dict(self) -> Dict[str, Any]:
        """Serialize to the JSON document layout."""
        doc: Dict[str, Any] = {
            "level": self.level.value,
            "indices": [_json_label(label) for label in self.indices],
        }
        for name in SET_NAMES:
            if not self.has(name):
                continue
            doc[name] = {
                _label_key(self.indices[i]): [_json_label(self.indices[j]) for j in sorted(members)]
                for i, members in enumerate(self.sets(name))
            }
        if self.lattice is not None:
            doc["lattice"] = {"shape": list(self.lattice[0]), "m": self.lattice[1]}
        return doc

    def to_json(self) -> str:
        return json.dumps(self.to_dict())


def _sets_to_matrix(sets: PositionSets, n: int) -> sparse.csr_matrix:
    cols = np.repeat(np.arange(n), [len(s) for s in sets])
    rows = np.fromiter(itertools.chain.from_iterable(sets), dtype=np.int64, count=len(cols))
    data = np.ones(len(cols), dtype=np.int32)
    return sparse.csr_matrix((data, (rows, cols)), shape=(n, n))


def _matrix_to_sets(matrix: sparse.spmatrix) -> PositionSets:
    csc = sparse.csc_matrix(matrix)
    csc.eliminate_zeros()
    return tuple(
        frozenset(csc.indices[csc.indptr[i]:csc.indptr[i + 1]].tolist())
        for i in range(csc.shape[1])
    )


def _union_compose(outer: sparse.spmatrix, inner: sparse.spmatrix) -> sparse.csr_matrix:
    """Column i of the result is the union of outer-sets over members of inner-set i."""
    product = (outer @ inner).tocsr()
    product.data[:] = 1
    return product


# =============================================================================
# LABEL ENCODING
# =============================================================================

def _json_label(label: Hashable) -> Any:
    if isinstance(label, tuple):
        return [_json_label(x) for x in label]
    if isinstance(label, np.integer):
        return int(label)
    return label


def _label_key(label: Hashable) -> str:
    if isinstance(label, tuple):
        return ",".join(str(x) for x in label)
    return str(label)


def _parse_label(value: Any) -> Hashable:
    if isinstance(value, list):
        return tuple(_parse_label(x) for x in value)
    return value


# =============================================================================
# CONSTRUCTION
# =============================================================================

def _infer_level(family: Mapping[str, Optional[PositionSets]]) -> Level:
    if family.get("B") is None:
        return Level.LD1
    if family.get("C") is None:
        return Level.LD2
    if any(family.get(name) is None for name in ("Bstar", "Cstar", "Dstar")):
        return Level.LD3
    return Level.LD4STAR


def from_sets(
    indices: Sequence[Hashable],
    a_sets: Mapping[Hashable, Iterable[Hashable]],
    b_sets: Optional[Mapping[Hashable, Iterable[Hashable]]] = None,
    c_sets: Optional[Mapping[Hashable, Iterable[Hashable]]] = None,
    bstar_sets: Optional[Mapping[Hashable, Iterable[Hashable]]] = None,
    cstar_sets: Optional[Mapping[Hashable, Iterable[Hashable]]] = None,
    dstar_sets: Optional[Mapping[Hashable, Iterable[Hashable]]] = None,
    level: Optional[Level] = None,
) -> NeighborhoodSystem:
    """
    Build a system from label-keyed set mappings.

    Nesting is not enforced here (see validate); unknown labels are a
    StructuralError.
    """
    indices = tuple(indices)
    if len(set(indices)) != len(indices):
        raise StructuralError("duplicate index labels")
    position = {label: pos for pos, label in enumerate(indices)}

    def encode(name: str, mapping) -> Optional[PositionSets]:
        if mapping is None:
            return None
        out = []
        for label in indices:
            if label not in mapping:
                raise StructuralError(f"{name} set missing for index {label!r}")
            members = set()
            for member in mapping[label]:
                if member not in position:
                    raise StructuralError(f"{name}[{label!r}] references unknown index {member!r}")
                members.add(position[member])
            out.append(frozenset(members))
        extra = set(mapping) - set(position)
        if extra:
            raise StructuralError(f"{name} has sets for unknown indices {sorted(map(str, extra))}")
        return tuple(out)

    family = {
        "A": encode("A", a_sets),
        "B": encode("B", b_sets),
        "C": encode("C", c_sets),
        "Bstar": encode("Bstar", bstar_sets),
        "Cstar": encode("Cstar", cstar_sets),
        "Dstar": encode("Dstar", dstar_sets),
    }
    inferred = _infer_level(family)
    if level is None:
        level = inferred
    elif not inferred.covers(level):
        raise StructuralError(f"declared level {level.value} but only {inferred.value} sets given")

    keep = {name: (family[name] if level.covers(_SET_LEVEL[name]) else None) for name in SET_NAMES}
    return NeighborhoodSystem(
        indices=indices,
        level=level,
        a_sets=keep["A"],
        b_sets=keep["B"],
        c_sets=keep["C"],
        bstar_sets=keep["Bstar"],
        cstar_sets=keep["Cstar"],
        dstar_sets=keep["Dstar"],
    )


def from_dict(doc: Mapping[str, Any]) -> NeighborhoodSystem:
    """Inverse of NeighborhoodSystem.to_dict."""
    try:
        indices = [_parse_label(x) for x in doc["indices"]]
        level = Level(doc["level"])
    except (KeyError, ValueError) as e:
        raise StructuralError(f"malformed system document: {e}")
    by_key = {_label_key(label): label for label in indices}

    def decode(name: str):
        raw = doc.get(name)
        if raw is None:
            return None
        mapping = {}
        for key, members in raw.items():
            if key not in by_key:
                raise StructuralError(f"{name} has a set for unknown index {key!r}")
            mapping[by_key[key]] = [_parse_label(m) for m in members]
        return mapping

    system = from_sets(
        indices,
        decode("A"),
        decode("B"),
        decode("C"),
        decode("Bstar"),
        decode("Cstar"),
        decode("Dstar"),
        level=level,
    )
    lattice = doc.get("lattice")
    if lattice is not None:
        system = replace(system, lattice=(tuple(lattice["shape"]), int(lattice["m"])))
    return system


def from_json(text: str) -> NeighborhoodSystem:
    return from_dict(json.loads(text))


def save_system(system: NeighborhoodSystem, path: Union[str, Path]):
    Path(path).write_text(system.to_json(), encoding="utf-8")


def load_system(path: Union[str, Path]) -> NeighborhoodSystem:
    return from_json(Path(path).read_text(encoding="utf-8"))


# =============================================================================
# GRAPHS
# =============================================================================

def _coerce_label(token: str) -> Hashable:
    try:
        return int(token)
    except ValueError:
        return token


def parse_edge_list(text: str) -> nx.Graph:
    """
    Parse the edge-list format: one "u v" pair per line.

    A line with a single token declares an isolated vertex; '#' starts a comment.
    """
    graph = nx.Graph()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        tokens = line.split()
        if len(tokens) == 1:
            graph.add_node(_coerce_label(tokens[0]))
        elif len(tokens) == 2:
            u, v = (_coerce_label(t) for t in tokens)
            if u == v:
                graph.add_node(u)
            else:
                graph.add_edge(u, v)
        else:
            raise StructuralError(f"edge list line {lineno}: expected 'u v', got {raw!r}")
    return graph


def read_edge_list(path: Union[str, Path]) -> nx.Graph:
    return parse_edge_list(Path(path).read_text(encoding="utf-8"))


def _as_graph(
    adjacency: Union[nx.Graph, Mapping[Hashable, Iterable[Hashable]], Iterable[Tuple[Hashable, Hashable]]],
    vertices: Optional[Iterable[Hashable]] = None,
) -> nx.Graph:
    graph = nx.Graph()
    if vertices is not None:
        graph.add_nodes_from(vertices)
    known = set(graph.nodes) if vertices is not None else None

    if isinstance(adjacency, nx.Graph):
        items = adjacency.edges()
        if vertices is None:
            graph.add_nodes_from(adjacency.nodes)
        elif set(adjacency.nodes) - known:
            raise StructuralError("graph has vertices outside the declared vertex set")
    elif isinstance(adjacency, Mapping):
        items = [(u, v) for u, nbrs in adjacency.items() for v in nbrs]
        if vertices is None:
            graph.add_nodes_from(adjacency.keys())
    else:
        items = list(adjacency)

    for u, v in items:
        if known is not None and (u not in known or v not in known):
            missing = u if u not in known else v
            raise StructuralError(f"edge ({u!r}, {v!r}) references unknown vertex {missing!r}")
        if u == v:
            graph.add_node(u)
        else:
            graph.add_edge(u, v)
    return graph


def from_adjacency(
    adjacency: Union[nx.Graph, Mapping[Hashable, Iterable[Hashable]], Iterable[Tuple[Hashable, Hashable]]],
    vertices: Optional[Iterable[Hashable]] = None,
) -> NeighborhoodSystem:
    """
    LD1 system of a dependency graph: A_i = {i} ∪ graph-neighbors of i.

    ``adjacency`` is a networkx graph, a neighbor mapping or an edge iterable;
    the relation is symmetrized. With an explicit vertex set, edges that leave
    it raise StructuralError.
    """
    graph = _as_graph(adjacency, vertices)
    indices = tuple(graph.nodes)
    position = {label: pos for pos, label in enumerate(indices)}
    a_sets = tuple(
        frozenset([position[label]] + [position[v] for v in graph.neighbors(label)])
        for label in indices
    )
    return NeighborhoodSystem(indices=indices, level=Level.LD1, a_sets=a_sets)


def distance_graph(graph: nx.Graph, radius: int) -> nx.Graph:
    """Graph joining vertices at shortest-path distance 1..radius."""
    out = nx.Graph()
    out.add_nodes_from(graph.nodes)
    for source, lengths in nx.all_pairs_shortest_path_length(graph, cutoff=radius):
        for target, dist in lengths.items():
            if 0 < dist <= radius:
                out.add_edge(source, target)
    return out


# =============================================================================
# LATTICES
# =============================================================================

def _lattice_balls(shape: Tuple[int, ...], radius: int) -> PositionSets:
    """Sup-metric balls of ``radius`` around every site of the box, clipped to the box."""
    coords = np.array(list(itertools.product(*(range(e) for e in shape))), dtype=np.int64)
    balls = []
    for site in coords:
        ranges = [
            np.arange(max(0, c - radius), min(e, c + radius + 1))
            for c, e in zip(site, shape)
        ]
        grid = np.meshgrid(*ranges, indexing="ij")
        flat = np.ravel_multi_index(tuple(g.ravel() for g in grid), shape)
        balls.append(frozenset(flat.tolist()))
    return tuple(balls)


def lattice_m_dependent(shape: Sequence[int], m: int) -> NeighborhoodSystem:
    """
    LD4* system of an m-dependent field on a d-dimensional box.

    Radii: A m, B 2m, C 3m, B* 3m, C* 6m, D* 9m, all clipped to the box.
    Labels are coordinate tuples in row-major order.
    """
    shape = tuple(int(e) for e in shape)
    if not shape:
        raise StructuralError("lattice needs at least one dimension")
    if any(e < 1 for e in shape):
        raise StructuralError(f"every lattice extent must be >= 1, got {shape}")
    if m < 0:
        raise StructuralError(f"m must be >= 0, got {m}")

    indices = tuple(itertools.product(*(range(e) for e in shape)))
    cache: Dict[int, PositionSets] = {}

    def ball(r: int) -> PositionSets:
        if r not in cache:
            cache[r] = _lattice_balls(shape, r)
        return cache[r]

    log_debug(f"lattice_m_dependent shape={shape} m={m} n={len(indices)}")
    return NeighborhoodSystem(
        indices=indices,
        level=Level.LD4STAR,
        a_sets=ball(m),
        b_sets=ball(2 * m),
        c_sets=ball(3 * m),
        bstar_sets=ball(3 * m),
        cstar_sets=ball(6 * m),
        dstar_sets=ball(9 * m),
        lattice=(shape, m),
    )


# =============================================================================
# CLOSURE
# =============================================================================

def closure_extend(system: NeighborhoodSystem) -> NeighborhoodSystem:
    """
    Fill B, C, B*, C*, D* from A by the union rules

        B_i = ∪_{j∈A_i} A_j,   C_i = ∪_{j∈B_i} A_j,   B_i* = ∪_{j∈A_i} B_j,
        C_i* = ∪_{j∈B_i*} B_j, D_i* = ∪_{j∈C_i*} B_j.
    """
    for pos, members in enumerate(system.a_sets):
        if pos not in members:
            raise StructuralError(f"index {system.indices[pos]!r} is not in its own A set")
    if system.level is not Level.LD1:
        log_info(f"closure_extend: recomputing higher sets of a {system.level.value} system from A")

    a = _sets_to_matrix(system.a_sets, system.n)
    b = _union_compose(a, a)
    c = _union_compose(a, b)
    bstar = _union_compose(b, a)
    cstar = _union_compose(b, bstar)
    dstar = _union_compose(b, cstar)

    return NeighborhoodSystem(
        indices=system.indices,
        level=Level.LD4STAR,
        a_sets=system.a_sets,
        b_sets=_matrix_to_sets(b),
        c_sets=_matrix_to_sets(c),
        bstar_sets=_matrix_to_sets(bstar),
        cstar_sets=_matrix_to_sets(cstar),
        dstar_sets=_matrix_to_sets(dstar),
    )


# =============================================================================
# KAPPA STATISTICS
# =============================================================================

@dataclass(frozen=True)
class KappaStats:
    """Cardinality statistics consumed by the theorems. None = level too low."""
    kappa_nb: Optional[int]
    kappa_nc: Optional[int]
    kappa_dstar: Optional[int]
    kappa1: Optional[int]
    kappa2: Optional[int]

    def get(self, name: str) -> int:
        value = getattr(self, name)
        if value is None:
            raise CapabilityError(f"{name} is not available at this system's level")
        return value

    def to_dict(self) -> Dict[str, Optional[int]]:
        return {
            'kappa_nb': self.kappa_nb,
            'kappa_nc': self.kappa_nc,
            'kappa_dstar': self.kappa_dstar,
            'kappa1': self.kappa1,
            'kappa2': self.kappa2,
        }


def _row_counts(matrix: sparse.spmatrix) -> np.ndarray:
    csr = sparse.csr_matrix(matrix)
    return np.diff(csr.indptr)


def _max_self_or_inverse(system: NeighborhoodSystem, name: str) -> int:
    """max_i max(|S_i|, |{j : i ∈ S_j}|)."""
    matrix = system.membership(name)
    own = np.array([len(s) for s in system.sets(name)])
    inverse = _row_counts(matrix)
    return int(max(own.max(initial=0), inverse.max(initial=0)))


def kappa_stats(system: NeighborhoodSystem) -> KappaStats:
    """All κ statistics the system's level supports."""
    kappa_nb = kappa_nc = kappa_dstar = kappa1 = None

    if system.has("B"):
        b = system.membership("B")
        overlap = (b.T @ b).tocsr()
        kappa_nb = int(_row_counts(overlap).max(initial=0))

    if system.has("C"):
        b = system.membership("B")
        c = system.membership("C")
        # row i: {j : C_i ∩ B_j ≠ ∅}
        nc = (c.T @ b).tocsr()
        inverse_c = _row_counts(c)
        kappa_nc = int(max(_row_counts(nc).max(initial=0), inverse_c.max(initial=0)))
        kappa1 = _max_self_or_inverse(system, "C")

    if system.has("Dstar"):
        kappa_dstar = _max_self_or_inverse(system, "Dstar")

    return KappaStats(
        kappa_nb=kappa_nb,
        kappa_nc=kappa_nc,
        kappa_dstar=kappa_dstar,
        kappa1=kappa1,
        kappa2=kappa_dstar,
    )


def kappa(system: NeighborhoodSystem, name: str) -> int:
    """A single κ statistic; CapabilityError if the level is too low."""
    needed = {
        "kappa_nb": Level.LD2,
        "kappa_nc": Level.LD3,
        "kappa1": Level.LD3,
        "kappa_dstar": Level.LD4STAR,
        "kappa2": Level.LD4STAR,
    }
    if name not in needed:
        raise CapabilityError(f"unknown statistic {name}")
    system.require(needed[name], name)
    return kappa_stats(system).get(name)


def nc_sets(system: NeighborhoodSystem) -> PositionSets:
    """N(C_i) = {j : C_i ∩ B_j ≠ ∅} for every i."""
    system.require(Level.LD3, "N(C_i)")
    nc = (system.membership("C").T @ system.membership("B")).tocsr()
    nc.eliminate_zeros()
    return tuple(
        frozenset(nc.indices[nc.indptr[i]:nc.indptr[i + 1]].tolist()) for i in range(system.n)
    )


# =============================================================================
# PAIRS
# =============================================================================

@dataclass(frozen=True, eq=False)
class PairSet:
    """Ordered pairs (i, j) of positions with B_i ∩ B_j ≠ ∅, diagonal included."""
    rows: np.ndarray
    cols: np.ndarray
    indices: Tuple[Hashable, ...] = field(repr=False)

    def __len__(self) -> int:
        return len(self.rows)

    def labels(self) -> Set[Tuple[Hashable, Hashable]]:
        return {(self.indices[i], self.indices[j]) for i, j in zip(self.rows.tolist(), self.cols.tolist())}


def neighbor_pairs_b(system: NeighborhoodSystem) -> PairSet:
    """
    Pairs with overlapping B sets.

    Computed as the sparse product MᵀM of the B membership matrix, i.e. a join
    through the inverted index site -> {i : site ∈ B_i}; no all-pairs scan.
    """
    system.require(Level.LD2, "neighbor_pairs_b")
    b = system.membership("B")
    overlap = sparse.coo_matrix(b.T @ b)
    order = np.lexsort((overlap.col, overlap.row))
    return PairSet(
        rows=overlap.row[order].astype(np.int64),
        cols=overlap.col[order].astype(np.int64),
        indices=system.indices,
    )


# =============================================================================
# VALIDATION
# =============================================================================

def validate(system: NeighborhoodSystem) -> List[Violation]:
    """Every broken invariant; empty iff the system is well formed."""
    violations: List[Violation] = []
    n = system.n

    for name in SET_NAMES:
        if not system.has(name):
            continue
        for pos, members in enumerate(system.sets(name)):
            bad = [p for p in members if not 0 <= p < n]
            if bad:
                violations.append(Violation(system.indices[pos], "outside_indices", f"{name} has positions {bad}"))

    for pos, members in enumerate(system.a_sets):
        if pos not in members:
            violations.append(Violation(system.indices[pos], "self_membership", "i not in A_i"))

    chains = [("A", "B"), ("B", "C")]
    if system.level is Level.LD4STAR:
        chains += [("B", "Bstar"), ("Bstar", "Cstar"), ("Cstar", "Dstar")]
    for inner, outer in chains:
        if not (system.has(inner) and system.has(outer)):
            continue
        for pos, (small, big) in enumerate(zip(system.sets(inner), system.sets(outer))):
            missing = small - big
            if missing:
                labels = sorted(str(system.indices[p]) for p in missing)
                violations.append(Violation(
                    system.indices[pos], "nesting", f"{inner} ⊄ {outer}: missing {labels}"
                ))
    return violations
