"""
Standardized locally dependent random fields.

Every model carries its neighborhood system, a seeded block sampler, and where
tractable an exact enumerator and an exact covariance oracle. All randomness
flows from ``derive_seed(master, stream, index)``.
"""

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Callable, Dict, Hashable, List, Mapping, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
from scipy import sparse

from config import config
from errors import CapabilityError, DegeneracyError, StructuralError, UsageError
from logger import log_debug, log_info, log_warning
from neighborhoods import (
    Level,
    NeighborhoodSystem,
    closure_extend,
    distance_graph,
    from_adjacency,
    lattice_m_dependent,
    parse_edge_list,
    read_edge_list,
)

# Stream ids. Starred (independent copy) draws use stream + STAR_STREAM_OFFSET.
STREAM_SAMPLE = 0
STREAM_PILOT = 7
STAR_STREAM_OFFSET = 1 << 20


# =============================================================================
# SEEDING AND BLOCKS
# =============================================================================

def derive_seed(master: int, stream: int, index: int) -> np.random.SeedSequence:
    """The split function: (master seed, stream id, block index) -> substream."""
    return np.random.SeedSequence(entropy=int(master), spawn_key=(int(stream), int(index)))


def block_generator(master: int, stream: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(derive_seed(master, stream, index)))


def block_layout(replicates: int, chunk_size: Optional[int] = None) -> List[int]:
    """Replicate counts of consecutive blocks."""
    chunk = chunk_size or config.chunk_size
    full, rest = divmod(int(replicates), chunk)
    return [chunk] * full + ([rest] if rest else [])


def map_blocks(
    replicates: int,
    fn: Callable[[int, int], Any],
    threads: Optional[int] = None,
) -> List[Any]:
    """
    Evaluate ``fn(block_index, count)`` over the block layout.

    Results come back in block order whatever the worker count.
    """
    counts = block_layout(replicates)
    workers = threads or config.threads
    jobs = list(enumerate(counts))
    if workers <= 1 or len(jobs) <= 1:
        return [fn(index, count) for index, count in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda job: fn(*job), jobs))


# =============================================================================
# BASE DISTRIBUTIONS
# =============================================================================

class BaseDistribution(Enum):
    """Centred unit-variance primitive noise."""
    RADEMACHER = "rademacher"
    UNIFORM = "uniform"
    SHIFTED_EXPONENTIAL = "shifted-exponential"

    @classmethod
    def parse(cls, value) -> "BaseDistribution":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise StructuralError(f"unknown base distribution {value!r}")

    @property
    def is_discrete(self) -> bool:
        return self is BaseDistribution.RADEMACHER

    def draw(self, rng: np.random.Generator, size) -> np.ndarray:
        if self is BaseDistribution.RADEMACHER:
            return rng.integers(0, 2, size=size).astype(np.float64) * 2.0 - 1.0
        if self is BaseDistribution.UNIFORM:
            root3 = math.sqrt(3.0)
            return rng.uniform(-root3, root3, size=size)
        return rng.exponential(1.0, size=size) - 1.0


def _sign_patterns(k: int) -> np.ndarray:
    """All 2^k Rademacher vectors, shape (2^k, k)."""
    codes = np.arange(2 ** k, dtype=np.int64)[:, None]
    bits = (codes >> np.arange(k, dtype=np.int64)) & 1
    return 1.0 - 2.0 * bits.astype(np.float64)


# =============================================================================
# MODEL TYPES
# =============================================================================

@dataclass(frozen=True)
class Standardization:
    """Mean shift per index and global scale making W centred with unit variance."""
    shift: float = 0.0
    scale: float = 1.0
    exact: bool = True
    variance_estimate: Optional[float] = None
    variance_se: Optional[float] = None

    def to_dict(self) -> Dict[str, Any]:
        return {
            'scale': self.scale,
            'exact': self.exact,
            'variance_estimate': self.variance_estimate,
            'variance_se': self.variance_se,
        }


@dataclass(frozen=True, eq=False)
class Enumeration:
    """Exact finite law of the whole field: outcome vectors and probabilities."""
    values: np.ndarray   # (K, n)
    probs: np.ndarray    # (K,)

    def expect(self, per_outcome: np.ndarray) -> np.ndarray:
        """E of a per-outcome quantity (first axis = outcome)."""
        return np.tensordot(self.probs, per_outcome, axes=(0, 0))


@dataclass(frozen=True)
class Realization:
    """One standardized draw of the field."""
    values: np.ndarray
    provenance: str

    def __post_init__(self):
        if self.values.ndim != 1:
            raise StructuralError("realization values must be a vector")
        if not np.all(np.isfinite(self.values)):
            raise StructuralError("realization has non-finite values")

    @property
    def w(self) -> float:
        return float(self.values.sum())


Sampler = Callable[[np.random.Generator, int], np.ndarray]


@dataclass(frozen=True, eq=False)
class FieldModel:
    """Generative description of a standardized field {X_i}."""
    kind: str
    spec: Dict[str, Any]
    system: NeighborhoodSystem
    sampler: Sampler
    standardization: Standardization = field(default_factory=Standardization)
    enumerator: Optional[Callable[[], Enumeration]] = None
    outcome_count: Optional[int] = None
    covariance: Optional[Callable[[], sparse.csr_matrix]] = None
    w_sampler: Optional[Callable[[np.random.Generator, int], np.ndarray]] = None
    # (n_noise x n) 0/1 matrix: which primitives each X_i reads
    noise_incidence: Optional[sparse.csr_matrix] = None
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.system.n

    @property
    def can_enumerate(self) -> bool:
        return (
            self.enumerator is not None
            and self.outcome_count is not None
            and self.outcome_count <= config.exact_max_outcomes
        )

    def sample_block(self, master: int, stream: int, index: int, count: int) -> np.ndarray:
        """(count, n) standardized values of block ``index`` in ``stream``."""
        return self.sampler(block_generator(master, stream, index), count)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'kind': self.kind,
            'spec': self.spec,
            'n': self.n,
            'level': self.system.level.value,
            'standardization': self.standardization.to_dict(),
            'outcome_count': self.outcome_count,
            'metadata': self.metadata,
        }


# =============================================================================
# SAMPLING
# =============================================================================

def sample(model: FieldModel, seed: int) -> Realization:
    """Deterministic single realization for ``seed``."""
    values = model.sample_block(seed, STREAM_SAMPLE, 0, 1)[0]
    return Realization(values=values, provenance=f"seed={seed}/stream={STREAM_SAMPLE}/block=0")


def map_replicates(
    model: FieldModel,
    master: int,
    stream: int,
    replicates: int,
    fn: Callable[..., Any],
    paired: bool = False,
    threads: Optional[int] = None,
) -> List[Any]:
    """
    Apply ``fn(values)`` (or ``fn(values, star_values)`` when paired) to every block.

    Starred blocks are fully independent realizations from the offset stream.
    """
    def run_block(index: int, count: int):
        values = model.sample_block(master, stream, index, count)
        if not paired:
            return fn(values)
        star = model.sample_block(master, stream + STAR_STREAM_OFFSET, index, count)
        return fn(values, star)

    return map_blocks(replicates, run_block, threads)


def sample_w(model: FieldModel, master: int, stream: int, replicates: int, threads: Optional[int] = None) -> np.ndarray:
    """W over ``replicates`` draws, through the closed-form law when one exists."""
    if model.w_sampler is not None and config.use_w_fast_path:
        def run_block(index: int, count: int):
            return model.w_sampler(block_generator(master, stream, index), count)
        blocks = map_blocks(replicates, run_block, threads)
    else:
        blocks = map_replicates(model, master, stream, replicates, lambda values: values.sum(axis=1), threads=threads)
    return np.concatenate(blocks) if blocks else np.empty(0)


# =============================================================================
# ENUMERATION
# =============================================================================

def enumerate_field(model: FieldModel) -> Enumeration:
    """Full exact law of the field; CapabilityError if unavailable or too large."""
    if model.enumerator is None:
        raise CapabilityError(f"{model.kind} model has no exact enumerator")
    if model.outcome_count is None or model.outcome_count > config.exact_max_outcomes:
        raise CapabilityError(
            f"{model.kind} model has {model.outcome_count} outcomes, limit is {config.exact_max_outcomes}"
        )
    return model.enumerator()


def aggregate_atoms(w: np.ndarray, probs: np.ndarray, decimals: int = 12) -> List[Tuple[float, float]]:
    """Merge equal W values (to ``decimals``) into sorted (value, probability) atoms."""
    keys = np.round(w, decimals)
    uniq, inverse = np.unique(keys, return_inverse=True)
    mass = np.bincount(inverse, weights=probs, minlength=len(uniq))
    return [(float(v), float(p)) for v, p in zip(uniq, mass)]


def exact_enumerate(model: FieldModel) -> List[Tuple[float, float]]:
    """Atoms of W with their probabilities."""
    law = enumerate_field(model)
    atoms = aggregate_atoms(law.values.sum(axis=1), law.probs)
    total = sum(p for _, p in atoms)
    if abs(total - 1.0) > 1e-12:
        log_warning(f"exact_enumerate: probabilities sum to {total!r}")
    if model.standardization.exact:
        second = sum(p * v * v for v, p in atoms)
        if abs(second - 1.0) > 1e-9:
            log_warning(f"exact_enumerate: EW^2 = {second!r} for an exactly standardized model")
    return atoms


def covariance_matrix(model: FieldModel) -> sparse.csr_matrix:
    if model.covariance is None:
        raise CapabilityError(f"{model.kind} model has no covariance oracle")
    return model.covariance()


def structural_violations(model: FieldModel) -> List[Hashable]:
    """Indices i whose primitive noise overlaps the noise of some X_j, j ∉ A_i."""
    if model.noise_incidence is None:
        raise CapabilityError(f"{model.kind} model carries no noise incidence")
    inc = sparse.csr_matrix(model.noise_incidence, dtype=np.int64)
    shares = (inc.T @ inc).tocsr()
    bad = []
    for i in range(model.n):
        sharing = set(shares.indices[shares.indptr[i]:shares.indptr[i + 1]].tolist())
        if sharing - set(model.system.a_sets[i]):
            bad.append(model.system.indices[i])
    return bad


# =============================================================================
# SYSTEM HELPERS
# =============================================================================

def independence_system(n: int) -> NeighborhoodSystem:
    """All neighborhoods singletons, integer labels 0..n-1."""
    singletons = tuple(frozenset([i]) for i in range(n))
    return NeighborhoodSystem(
        indices=tuple(range(n)),
        level=Level.LD4STAR,
        a_sets=singletons,
        b_sets=singletons,
        c_sets=singletons,
        bstar_sets=singletons,
        cstar_sets=singletons,
        dstar_sets=singletons,
    )


def _rademacher_sum_sampler(count: int, scale: float) -> Callable[[np.random.Generator, int], np.ndarray]:
    """W = scale * (sum of ``count`` Rademacher signs), drawn as a centred binomial."""
    def draw(rng: np.random.Generator, reps: int) -> np.ndarray:
        heads = rng.binomial(count, 0.5, size=reps)
        return (2.0 * heads - count) * scale
    return draw


def _linear_model(
    kind: str,
    spec: Dict[str, Any],
    system: NeighborhoodSystem,
    incidence: sparse.csr_matrix,
    base: BaseDistribution,
    metadata: Optional[Dict[str, Any]] = None,
) -> FieldModel:
    """
    X = s · Lᵀ ε for a signed (n_noise x n) loading matrix L and i.i.d. noise ε.

    Scale s makes Var(W) = 1 exactly; covariance is s² LᵀL.
    """
    loading = sparse.csr_matrix(incidence, dtype=np.float64)
    n_noise = loading.shape[0]
    coverage = np.asarray(loading.sum(axis=1)).ravel()
    variance = float(np.dot(coverage, coverage))
    if variance <= 0:
        raise DegeneracyError(f"{kind}: Var(W) = 0 before scaling")
    scale = 1.0 / math.sqrt(variance)
    loading_t = sparse.csr_matrix(loading.T)

    def sampler(rng: np.random.Generator, count: int) -> np.ndarray:
        eps = base.draw(rng, (count, n_noise))
        return np.asarray(loading_t @ eps.T).T * scale

    def covariance() -> sparse.csr_matrix:
        return sparse.csr_matrix(loading_t @ loading) * (scale * scale)

    enumerator = None
    outcome_count = None
    if base.is_discrete and n_noise <= 62:
        outcome_count = 2 ** n_noise

        def enumerator() -> Enumeration:
            signs = _sign_patterns(n_noise)
            values = np.asarray(loading_t @ signs.T).T * scale
            probs = np.full(len(signs), 1.0 / len(signs))
            return Enumeration(values=values, probs=probs)

    incidence01 = sparse.csr_matrix(abs(loading))
    incidence01.data[:] = 1.0
    return FieldModel(
        kind=kind,
        spec=spec,
        system=system,
        sampler=sampler,
        standardization=Standardization(scale=scale, exact=True),
        enumerator=enumerator,
        outcome_count=outcome_count,
        covariance=covariance,
        noise_incidence=incidence01,
        metadata={'noise_count': n_noise, 'raw_variance': variance, **(metadata or {})},
    )


# =============================================================================
# MODEL FAMILIES
# =============================================================================

def iid_field(n: int, base="rademacher") -> FieldModel:
    """Independent baseline: X_i = ε_i / √n."""
    if n < 1:
        raise StructuralError(f"n must be >= 1, got {n}")
    base = BaseDistribution.parse(base)
    model = _linear_model(
        "iid",
        {'kind': 'iid', 'n': n, 'base': base.value},
        independence_system(n),
        sparse.identity(n, format="csr"),
        base,
    )
    if base is BaseDistribution.RADEMACHER:
        model = replace(model, w_sampler=_rademacher_sum_sampler(n, 1.0 / math.sqrt(n)))
    if n > 20:
        model = replace(model, enumerator=None, outcome_count=None)
    return model


def _forward_windows(shape: Tuple[int, ...], m: int) -> sparse.csr_matrix:
    """(n_noise x n) incidence: noise site k feeds X_i iff i_l <= k_l <= i_l + m for all l."""
    sites = list(itertools.product(*(range(e) for e in shape)))
    rows, cols = [], []
    for col, site in enumerate(sites):
        ranges = [range(c, min(e, c + m + 1)) for c, e in zip(site, shape)]
        for noise in itertools.product(*ranges):
            rows.append(np.ravel_multi_index(noise, shape))
            cols.append(col)
    n = len(sites)
    data = np.ones(len(rows), dtype=np.float64)
    return sparse.csr_matrix((data, (np.array(rows), np.array(cols))), shape=(n, n))


def moving_sum_field(shape: Sequence[int], m: int, base="rademacher") -> FieldModel:
    """
    m-dependent moving sums on a lattice box.

    X_i sums the noise over the forward window {j : i_l <= j_l <= i_l + m},
    clipped to the box, so fields at sup-distance > m share no noise.
    """
    shape = tuple(int(e) for e in shape)
    system = lattice_m_dependent(shape, m)
    base = BaseDistribution.parse(base)
    model = _linear_model(
        "moving_sum",
        {'kind': 'moving_sum', 'shape': list(shape), 'm': m, 'base': base.value},
        system,
        _forward_windows(shape, m),
        base,
        metadata={'dimension': len(shape)},
    )
    if model.n > 20:
        model = replace(model, enumerator=None, outcome_count=None)
    return model


def edge_sum_field(graph: nx.Graph, base="rademacher") -> FieldModel:
    """
    Dependency-graph field: X_i = s · Σ_{e ∋ i} ε_e over i.i.d. edge noise.

    Vertex sets joined by no edge share no noise, so the graph is a dependency
    graph; A_i is the closed neighborhood, higher sets by closure.
    """
    edges = list(graph.edges())
    if not edges:
        raise DegeneracyError("edge_sum field needs at least one edge")
    base = BaseDistribution.parse(base)
    ld1 = from_adjacency(graph)
    position = ld1.position
    rows = np.repeat(np.arange(len(edges)), 2)
    cols = np.array([position[v] for e in edges for v in e])
    incidence = sparse.csr_matrix(
        (np.ones(len(rows)), (rows, cols)), shape=(len(edges), ld1.n)
    )
    degrees = [d for _, d in graph.degree()]
    model = _linear_model(
        "edge_sum",
        {'kind': 'edge_sum', 'graph': graph_spec(graph), 'base': base.value},
        closure_extend(ld1),
        incidence,
        base,
        metadata={'max_degree': int(max(degrees)), 'vertices': ld1.n, 'edges': len(edges)},
    )
    if len(edges) > 20:
        model = replace(model, enumerator=None, outcome_count=None)
    return model


def local_maxima_moments(graph: nx.Graph) -> Tuple[int, float, float]:
    """(d, EW, σ²) of the local-maxima count on a d-regular graph."""
    degrees = {deg for _, deg in graph.degree()}
    if len(degrees) != 1:
        raise StructuralError(f"local maxima field needs a regular graph, degrees {sorted(degrees)}")
    d = degrees.pop()
    if d < 1:
        raise StructuralError("local maxima field needs degree >= 1")
    n = graph.number_of_nodes()
    ew = n / (d + 1)
    sigma2 = 0.0
    for i, lengths in nx.all_pairs_shortest_path_length(graph, cutoff=2):
        nbr_i = set(graph.neighbors(i))
        for j, dist in lengths.items():
            if dist == 2:
                s = len(nbr_i & set(graph.neighbors(j)))
                sigma2 += s / ((2 * d + 2 - s) * (d + 1) ** 2)
    return d, ew, sigma2


def local_maxima_field(graph: nx.Graph) -> FieldModel:
    """
    Centred, σ-scaled local-maximum indicators of i.i.d. continuous ranks.

    A_i is the distance-≤2 ball: X_i reads the ranks of {i} ∪ N_i.
    """
    d, ew, sigma2 = local_maxima_moments(graph)
    if sigma2 <= 0:
        raise DegeneracyError("local maxima count has zero variance on this graph")
    sigma = math.sqrt(sigma2)
    system = closure_extend(from_adjacency(distance_graph(graph, 2), vertices=list(graph.nodes)))
    nodes = list(system.indices)
    position = system.position
    n = len(nodes)
    nbr = np.array([[position[v] for v in graph.neighbors(u)] for u in nodes], dtype=np.int64)
    p_max = 1.0 / (d + 1)

    def indicators(ranks: np.ndarray) -> np.ndarray:
        return np.all(ranks[:, :, None] > ranks[:, nbr], axis=2).astype(np.float64)

    def sampler(rng: np.random.Generator, count: int) -> np.ndarray:
        ranks = rng.permuted(np.tile(np.arange(n), (count, 1)), axis=1)
        return (indicators(ranks) - p_max) / sigma

    def enumerator() -> Enumeration:
        ranks = np.array(list(itertools.permutations(range(n))), dtype=np.int64)
        values = (indicators(ranks) - p_max) / sigma
        return Enumeration(values=values, probs=np.full(len(ranks), 1.0 / len(ranks)))

    def covariance() -> sparse.csr_matrix:
        rows, cols, data = [], [], []
        for u, lengths in nx.all_pairs_shortest_path_length(graph, cutoff=2):
            nbr_u = set(graph.neighbors(u))
            for v, dist in lengths.items():
                if dist == 0:
                    value = d / (d + 1) ** 2
                elif dist == 1:
                    value = -1.0 / (d + 1) ** 2
                else:
                    s = len(nbr_u & set(graph.neighbors(v)))
                    value = s / ((2 * d + 2 - s) * (d + 1) ** 2)
                rows.append(position[u])
                cols.append(position[v])
                data.append(value / sigma2)
        return sparse.csr_matrix((data, (rows, cols)), shape=(n, n))

    # rank k feeds X_i iff k ∈ {i} ∪ N_i
    rank_rows = np.concatenate([np.arange(n), nbr.ravel()])
    rank_cols = np.concatenate([np.arange(n), np.repeat(np.arange(n), d)])
    closed = sparse.csr_matrix((np.ones(len(rank_rows)), (rank_rows, rank_cols)), shape=(n, n))
    return FieldModel(
        kind="local_maxima",
        spec={'kind': 'local_maxima', 'graph': graph_spec(graph)},
        system=system,
        sampler=sampler,
        standardization=Standardization(shift=p_max, scale=1.0 / sigma, exact=True),
        enumerator=enumerator,
        outcome_count=math.factorial(n),
        covariance=covariance,
        noise_incidence=closed,
        metadata={'degree': d, 'vertices': n, 'EW': ew, 'sigma2': sigma2},
    )


def erickson_pattern(n: int) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """
    Copy/independent pattern of the one-dependent sequence with o(n) variance.

    Returns (source, sign, b2) with X_k = sign[k]·ε[source[k]] and
    b2[k] = Var(X_1 + ... + X_{k+1}) exactly (integer arithmetic).
    """
    if n < 2:
        raise StructuralError(f"erickson sequence needs n >= 2, got {n}")
    source = np.empty(n, dtype=np.int64)
    sign = np.empty(n, dtype=np.int64)
    b2 = np.empty(n, dtype=np.int64)
    source[:2] = (0, 1)
    sign[:2] = 1
    b2[0], b2[1] = 1, 2
    coef = {0: 1, 1: 1}
    next_source = 2
    current = 2
    for k in range(2, n):
        # k terms so far with variance `current`; X_{k+1} copies -X_k iff B_k^2 > sqrt(k)
        if current * current > k:
            src = int(source[k - 1])
            sgn = -int(sign[k - 1])
            old = coef[src]
            coef[src] = old + sgn
            current += coef[src] ** 2 - old ** 2
        else:
            src = next_source
            sgn = 1
            next_source += 1
            coef[src] = 1
            current += 1
        source[k] = src
        sign[k] = sgn
        b2[k] = current
    return source, sign, b2


def _erickson_tight_system(source: np.ndarray) -> NeighborhoodSystem:
    n = len(source)
    blocks: Dict[int, List[int]] = {}
    for k, src in enumerate(source.tolist()):
        blocks.setdefault(src, []).append(k)
    sets = tuple(frozenset(blocks[src]) for src in source.tolist())
    return NeighborhoodSystem(
        indices=tuple(range(1, n + 1)),
        level=Level.LD4STAR,
        a_sets=sets,
        b_sets=sets,
        c_sets=sets,
        bstar_sets=sets,
        cstar_sets=sets,
        dstar_sets=sets,
    )


def erickson_field(n: int, neighborhoods: str = "window") -> FieldModel:
    """
    Rademacher version of the one-dependent sequence, W = S_n / B_n.

    ``neighborhoods="window"`` uses A_i = {i-1, i, i+1} closed upward;
    ``"tight"`` uses singletons for free terms and the cancelling pair otherwise.
    """
    source, sign, b2 = erickson_pattern(n)
    n_noise = int(source.max()) + 1
    if neighborhoods == "window":
        adjacency = [(k, k + 1) for k in range(1, n)]
        system = closure_extend(from_adjacency(adjacency, vertices=range(1, n + 1)))
    elif neighborhoods == "tight":
        system = _erickson_tight_system(source)
    else:
        raise StructuralError(f"unknown erickson neighborhoods {neighborhoods!r}")

    loading = sparse.csr_matrix(
        (sign.astype(np.float64), (source, np.arange(n))), shape=(n_noise, n)
    )
    model = _linear_model(
        "erickson",
        {'kind': 'erickson', 'n': n, 'neighborhoods': neighborhoods},
        system,
        loading,
        BaseDistribution.RADEMACHER,
        metadata={'B2': int(b2[-1])},
    )
    active = int(b2[-1])
    model = replace(model, w_sampler=_rademacher_sum_sampler(active, 1.0 / math.sqrt(active)))
    if n_noise > 20:
        model = replace(model, enumerator=None, outcome_count=None)
    return model


def pilot_standardize(model: FieldModel, samples: Optional[int] = None, seed: int = 0) -> FieldModel:
    """
    Centre and scale a model without covariance oracle from a pilot run.

    The estimated Var(W) and its standard error are recorded on the result.
    """
    samples = samples or config.pilot_samples
    blocks = map_replicates(model, seed, STREAM_PILOT, samples, lambda values: values)
    values = np.concatenate(blocks, axis=0)
    shift = values.mean(axis=0)
    w = (values - shift).sum(axis=1)
    var = float(np.mean(w * w))
    if var <= 0:
        raise DegeneracyError("pilot run found Var(W) = 0")
    var_se = float(np.sqrt(max(np.mean(w ** 4) - var * var, 0.0) / samples))
    scale = 1.0 / math.sqrt(var)
    raw = model.sampler
    log_info(f"pilot_standardize: Var(W) = {var:.6g} ± {var_se:.2g} from {samples} samples")

    def sampler(rng: np.random.Generator, count: int) -> np.ndarray:
        return (raw(rng, count) - shift) * scale

    return replace(
        model,
        sampler=sampler,
        standardization=Standardization(shift=0.0, scale=scale, exact=False,
                                        variance_estimate=var, variance_se=var_se),
        enumerator=None,
        outcome_count=None,
        covariance=None,
        w_sampler=None,
    )


# =============================================================================
# JSON MODEL SPECS
# =============================================================================

def graph_spec(graph: nx.Graph) -> Dict[str, Any]:
    return {
        'vertices': [v for v in graph.nodes],
        'edges': [[u, v] for u, v in graph.edges()],
    }


def graph_from_spec(spec: Mapping[str, Any]) -> nx.Graph:
    """Graph from {"cycle": n} | {"complete": n} | {"path": n} | {"edges": [...]} | {"edge_list": path}."""
    if "cycle" in spec:
        return nx.cycle_graph(int(spec["cycle"]))
    if "complete" in spec:
        return nx.complete_graph(int(spec["complete"]))
    if "path" in spec:
        return nx.path_graph(int(spec["path"]))
    if "edge_list" in spec:
        return read_edge_list(spec["edge_list"])
    if "edge_text" in spec:
        return parse_edge_list(spec["edge_text"])
    if "edges" in spec:
        graph = nx.Graph()
        graph.add_nodes_from(spec.get("vertices", []))
        for u, v in spec["edges"]:
            graph.add_edge(u, v)
        return graph
    raise UsageError("graph needs one of cycle, complete, path, edges, edge_list, edge_text", "model.graph")


def model_from_spec(spec: Mapping[str, Any]) -> FieldModel:
    """Build a model from its JSON document (``kind`` discriminator)."""
    kind = spec.get("kind")
    try:
        if kind == "iid":
            return iid_field(int(spec["n"]), spec.get("base", "rademacher"))
        if kind == "moving_sum":
            return moving_sum_field(spec["shape"], int(spec["m"]), spec.get("base", "rademacher"))
        if kind == "local_maxima":
            return local_maxima_field(graph_from_spec(spec["graph"]))
        if kind == "erickson":
            return erickson_field(int(spec["n"]), spec.get("neighborhoods", "window"))
        if kind == "edge_sum":
            return edge_sum_field(graph_from_spec(spec["graph"]), spec.get("base", "rademacher"))
    except KeyError as e:
        raise UsageError(f"missing parameter {e}", f"model.{e.args[0]}")
    raise UsageError(f"unknown kind {kind!r}", "model.kind")
