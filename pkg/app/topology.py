"""
# Topology

Communication graphs between clients and the gossip matrices built over them.

Every graph kind is a pure function of its `TopologySpec` and, for
`time_varying_k`, of the communication round. Gossip weights follow the
Metropolis-Hastings rule, which is symmetric and doubly stochastic on any
connected graph.
"""

from dataclasses import dataclass, field
from pathlib import Path

import networkx
import numpy as np
import scipy.linalg

from app import error, logging, rng
from app.models import (
    GossipClause,
    GossipClauseResult,
    TopologyDump,
    TopologyInfo,
    TopologyKind,
    TopologySpec,
    ValidationReport,
)

TIME_VARYING_ATTEMPTS: int = 100
TOLERANCE_ROW_SUM: float = 1e-12
TOLERANCE_EIGEN: float = 1e-9

logger = logging.get_logger()


@dataclass(frozen=True)
class Graph:
    m: int
    edges: frozenset[tuple[int, int]]

    @classmethod
    def from_networkx(cls, g: networkx.Graph, m: int) -> "Graph":
        edges = frozenset((min(i, j), max(i, j)) for i, j in g.edges() if i != j)
        return cls(m=m, edges=edges)

    def to_networkx(self) -> networkx.Graph:
        g = networkx.Graph()
        g.add_nodes_from(range(self.m))
        g.add_edges_from(self.edges)
        return g

    @property
    def degrees(self) -> np.ndarray:
        degrees = np.zeros(self.m, dtype=np.int64)
        for i, j in self.edges:
            degrees[i] += 1
            degrees[j] += 1
        return degrees

    def neighbors(self, i: int) -> set[int]:
        return {j if k == i else k for k, j in self.edges if i in (k, j)}

    def sorted_edges(self) -> list[tuple[int, int]]:
        return sorted(self.edges)


@dataclass(frozen=True, eq=False)
class MixingMatrix:
    w: np.ndarray
    lam: float
    graph: Graph | None = field(default=None)

    @property
    def m(self) -> int:
        return self.w.shape[0]

    @property
    def spectral_gap(self) -> float:
        return 1.0 - self.lam


# =========================================================================== #
#                                    GRAPHS                                   #
# =========================================================================== #


def _graph_exponential(m: int) -> networkx.Graph:
    g = networkx.empty_graph(m)
    hop = 1
    while hop < m:
        g.add_edges_from((i, (i + hop) % m) for i in range(m))
        hop *= 2
    return g


def _graph_grid(spec: TopologySpec) -> networkx.Graph:
    shape = spec.grid_shape
    if shape is None:
        raise error.ErrorTopologySpec(f"grid needs m = r x c with r, c >= 2, got m = {spec.m}")
    rows, columns = shape

    # row-major labels: node (i, j) becomes i * columns + j
    g = networkx.grid_2d_graph(rows, columns)
    return networkx.convert_node_labels_to_integers(g, ordering="sorted")


def _graph_time_varying(spec: TopologySpec, round: int) -> networkx.Graph:
    if spec.k is None or spec.k >= spec.m:
        raise error.ErrorTopologySpec(f"time_varying_k needs 1 <= k < m, got k = {spec.k}")

    for attempt in range(TIME_VARYING_ATTEMPTS):
        draw = rng.stream(spec.seed, rng.Stream.TOPOLOGY, round, attempt)
        g = networkx.empty_graph(spec.m)
        for i in range(spec.m):
            others = np.delete(np.arange(spec.m), i)
            partners = draw.choice(others, size=spec.k, replace=False)
            g.add_edges_from((i, int(j)) for j in partners)

        if networkx.is_connected(g):
            return g
        logger.debug(f"Topology - time_varying_k - round {round} - attempt {attempt} disconnected")

    raise error.ErrorTopologySpec(
        f"time_varying_k with k = {spec.k} produced no connected graph over {spec.m} clients "
        f"in {TIME_VARYING_ATTEMPTS} attempts, increase k"
    )


def build_graph(spec: TopologySpec, round: int = 0) -> Graph:
    """Deterministic graph for `(spec, round)`. Only `time_varying_k` reads
    `round`, every other kind is static.
    """
    match spec.kind:
        case TopologyKind.RING:
            g = networkx.cycle_graph(spec.m)
        case TopologyKind.GRID:
            g = _graph_grid(spec)
        case TopologyKind.EXPONENTIAL:
            g = _graph_exponential(spec.m)
        case TopologyKind.FULL:
            g = networkx.complete_graph(spec.m)
        case TopologyKind.TIME_VARYING_K:
            g = _graph_time_varying(spec, round)

    return Graph.from_networkx(g, spec.m)


# =========================================================================== #
#                                GOSSIP MATRIX                                #
# =========================================================================== #


def _second_eigenvalue(eigenvalues: np.ndarray) -> float:
    if eigenvalues.size < 2:
        return 0.0
    return float(max(abs(eigenvalues[-2]), abs(eigenvalues[0])))


def mixing_matrix(g: Graph) -> MixingMatrix:
    nx_graph = g.to_networkx()
    if not networkx.is_connected(nx_graph):
        raise error.ErrorDisconnectedGraph(
            g.m, networkx.number_connected_components(nx_graph)
        )

    degrees = g.degrees
    w = np.zeros((g.m, g.m), dtype=np.float64)
    for i, j in g.edges:
        weight = 1.0 / (1.0 + max(degrees[i], degrees[j]))
        w[i, j] = weight
        w[j, i] = weight
    np.fill_diagonal(w, 1.0 - w.sum(axis=1))
    w.setflags(write=False)

    eigenvalues = scipy.linalg.eigh(w, eigvals_only=True)
    return MixingMatrix(w=w, lam=_second_eigenvalue(eigenvalues), graph=g)


def spectral_gap(w: MixingMatrix) -> float:
    return w.spectral_gap


def consensus_projector(m: int) -> np.ndarray:
    return np.full((m, m), 1.0 / m)


def power_deviation(w: MixingMatrix, t: int) -> float:
    """Operator norm of W^t - P, bounded above by lambda^t"""
    if t < 0:
        raise error.ErrorInput(f"matrix power needs t >= 0, got {t}")

    deviation = np.linalg.matrix_power(w.w, t) - consensus_projector(w.m)
    deviation = 0.5 * (deviation + deviation.T)
    return float(np.max(np.abs(scipy.linalg.eigvalsh(deviation))))


# =========================================================================== #
#                                  VALIDATION                                 #
# =========================================================================== #


def _clause_graph(a: np.ndarray, graph: Graph | None) -> GossipClauseResult:
    negative = float(max(0.0, -a.min()))
    if graph is None:
        return GossipClauseResult(
            name=GossipClause.GRAPH,
            passed=negative == 0.0,
            deviation=negative,
            detail="no graph given, checked nonnegativity only",
        )

    mask = np.zeros_like(a, dtype=bool)
    for i, j in graph.edges:
        mask[i, j] = mask[j, i] = True
    off_diagonal = ~np.eye(a.shape[0], dtype=bool)

    stray = np.abs(a[off_diagonal & ~mask])
    missing = int(np.sum(a[mask] <= 0.0))
    deviation = max(negative, float(stray.max()) if stray.size else 0.0)
    return GossipClauseResult(
        name=GossipClause.GRAPH,
        passed=deviation == 0.0 and missing == 0,
        deviation=deviation,
        detail=f"{missing} edges without positive weight" if missing else "",
    )


def _clause_symmetry(a: np.ndarray) -> GossipClauseResult:
    deviation = float(np.max(np.abs(a - a.T)))
    return GossipClauseResult(
        name=GossipClause.SYMMETRY, passed=deviation == 0.0, deviation=deviation
    )


def _clause_stochastic(a: np.ndarray) -> GossipClauseResult:
    deviation = float(np.max(np.abs(a.sum(axis=1) - 1.0)))
    return GossipClauseResult(
        name=GossipClause.STOCHASTIC,
        passed=deviation <= TOLERANCE_ROW_SUM,
        deviation=deviation,
    )


def _clause_null_space(a: np.ndarray) -> GossipClauseResult:
    eigenvalues = scipy.linalg.eigvals(a)
    ones = int(np.sum(np.abs(eigenvalues - 1.0) <= TOLERANCE_EIGEN))
    fixed = float(np.max(np.abs(a @ np.ones(a.shape[0]) - 1.0)))
    return GossipClauseResult(
        name=GossipClause.NULL_SPACE,
        passed=ones == 1 and fixed <= TOLERANCE_EIGEN,
        deviation=max(float(abs(ones - 1)), fixed),
        detail=f"eigenvalue 1 has multiplicity {ones}",
    )


def _clause_spectral(a: np.ndarray) -> GossipClauseResult:
    eigenvalues = scipy.linalg.eigvalsh(0.5 * (a + a.T))
    above = float(eigenvalues[-1] - 1.0)
    below = float(-1.0 - eigenvalues[0])
    return GossipClauseResult(
        name=GossipClause.SPECTRAL,
        passed=bool(above <= TOLERANCE_EIGEN and eigenvalues[0] > -1.0 + TOLERANCE_EIGEN),
        deviation=max(0.0, above, below),
        detail=f"eigenvalues in [{eigenvalues[0]:.6g}, {eigenvalues[-1]:.6g}]",
    )


def validate_gossip(w: MixingMatrix | np.ndarray, graph: Graph | None = None) -> ValidationReport:
    """Checks every gossip-matrix property on any square matrix. Failures are
    reported, never raised.
    """
    if isinstance(w, MixingMatrix):
        graph = graph or w.graph
        w = w.w

    a = np.asarray(w, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise error.ErrorDimensionMismatch("gossip matrix", "square", a.shape)
    if graph is not None and graph.m != a.shape[0]:
        raise error.ErrorDimensionMismatch("gossip matrix", graph.m, a.shape[0])

    return ValidationReport(
        clauses=[
            _clause_graph(a, graph),
            _clause_symmetry(a),
            _clause_stochastic(a),
            _clause_null_space(a),
            _clause_spectral(a),
        ]
    )


# =========================================================================== #
#                                    DUMPS                                    #
# =========================================================================== #


def topology_dump(w: MixingMatrix) -> TopologyDump:
    edges = w.graph.sorted_edges() if w.graph is not None else []
    return TopologyDump(m=w.m, edges=edges, lam=w.lam, spectral_gap=w.spectral_gap)


def dump_topology(w: MixingMatrix, path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(topology_dump(w).model_dump_json(by_alias=True, indent=2))


def topology_info(spec: TopologySpec, round: int = 0) -> TopologyInfo:
    w = mixing_matrix(build_graph(spec, round))
    dump = topology_dump(w)
    return TopologyInfo(
        **dump.model_dump(),
        kind=spec.kind,
        round=round,
        validation=validate_gossip(w),
    )
