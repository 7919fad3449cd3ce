import math
from enum import Enum
from pathlib import Path
from typing import Annotated, Any, Self

import pydantic

# Desk-scale defaults. Full-scale runs (m=100, T=1000) are one flag away.
DEFAULT_M: int = 16
DEFAULT_T: int = 200
DEFAULT_K: int = 5
DEFAULT_Q: int = 1
DEFAULT_ETA0: float = 0.1
DEFAULT_ETA_DECAY: float = 0.998
DEFAULT_RHO: float = 0.01
DEFAULT_MU: float = 0.9
DEFAULT_BATCH_SIZE: int = 128
DEFAULT_SAMPLE_FRAC: float = 0.1
DEFAULT_SERVER_LR: float = 1.0
DEFAULT_L2: float = 5e-4
DEFAULT_HIDDEN: int = 16
DEFAULT_N: int = 2000
DEFAULT_D: int = 8
DEFAULT_CLASSES: int = 4
DEFAULT_SEP: float = 3.0
DEFAULT_ALPHA: float = 0.3
DEFAULT_CLASSES_PER_CLIENT: int = 2
DEFAULT_METRIC_EVERY: int = 10
DEFAULT_SWEEP_CAP: int = 500

SEED_MAX: int = (1 << 64) - 1

Seed = Annotated[int, pydantic.Field(ge=0, le=SEED_MAX, description="64-bit unsigned seed")]


class TopologyKind(str, Enum):
    RING = "ring"
    GRID = "grid"
    EXPONENTIAL = "exponential"
    FULL = "full"
    TIME_VARYING_K = "time_varying_k"


class PartitionKind(str, Enum):
    IID = "iid"
    DIRICHLET = "dirichlet"
    PATHOLOGICAL = "pathological"


class ModelKind(str, Enum):
    QUADRATIC = "quadratic"
    LOGISTIC = "logistic"
    MLP = "mlp"


class OptimizerKind(str, Enum):
    SGD = "sgd"
    SAM = "sam"
    MOMENTUM = "momentum"


class Algorithm(str, Enum):
    """Federated algorithms. The first five gossip over a topology, the last
    two aggregate sampled clients on a server.
    """

    DFEDSAM = "dfedsam"
    DFEDSAM_MGS = "dfedsam_mgs"
    DPSGD = "dpsgd"
    DFEDAVG = "dfedavg"
    DFEDAVGM = "dfedavgm"
    FEDAVG = "fedavg"
    FEDSAM = "fedsam"


class InitMode(str, Enum):
    SHARED = "shared"
    PER_CLIENT = "per-client"
    ZERO = "zero"


class GossipClause(str, Enum):
    GRAPH = "graph"
    SYMMETRY = "symmetry"
    STOCHASTIC = "stochastic"
    NULL_SPACE = "null_space"
    SPECTRAL = "spectral"


class _Config(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(extra="forbid", frozen=True)


def _as_dict(value: Any) -> Any:
    if isinstance(value, pydantic.BaseModel):
        return value.model_dump()
    if isinstance(value, dict):
        return dict(value)
    return value


# =========================================================================== #
#                                   TOPOLOGY                                  #
# =========================================================================== #


class TopologySpec(_Config):
    """Which communication graph to build over `m` clients."""

    kind: Annotated[
        TopologyKind, pydantic.Field(description="Graph family")
    ] = TopologyKind.EXPONENTIAL
    m: Annotated[int, pydantic.Field(ge=1, description="Number of clients")]
    k: Annotated[
        int | None,
        pydantic.Field(ge=1, description="Neighbor budget per client (time_varying_k only)"),
    ] = None
    seed: Seed = 0

    @property
    def grid_shape(self) -> tuple[int, int] | None:
        """Most-square factorisation r x c of m with 2 <= r <= c, if any"""
        for r in range(math.isqrt(self.m), 1, -1):
            if self.m % r == 0:
                return r, self.m // r
        return None

    @pydantic.model_validator(mode="after")
    def check_kind(self) -> Self:
        match self.kind:
            case TopologyKind.GRID:
                if self.grid_shape is None:
                    raise ValueError(
                        f"grid requires m = r x c with r, c >= 2, m = {self.m} has no such "
                        "factorisation (prime or < 4)"
                    )
            case TopologyKind.TIME_VARYING_K:
                if self.k is None:
                    raise ValueError("time_varying_k requires a neighbor budget k")
                if self.k >= self.m:
                    raise ValueError(f"time_varying_k requires k < m, got k={self.k}, m={self.m}")
        return self


class GossipClauseResult(pydantic.BaseModel):
    name: Annotated[GossipClause, pydantic.Field(description="Gossip-matrix property checked")]
    passed: bool
    deviation: Annotated[
        float, pydantic.Field(description="Measured violation, 0 when the clause holds exactly")
    ]
    detail: str = ""


class ValidationReport(pydantic.BaseModel):
    """Pass/fail for every gossip-matrix property, with measured deviations"""

    clauses: list[GossipClauseResult]

    @property
    def passed(self) -> bool:
        return all(clause.passed for clause in self.clauses)

    def clause(self, name: GossipClause) -> GossipClauseResult:
        return next(clause for clause in self.clauses if clause.name == name)


class TopologyDump(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(populate_by_name=True)

    m: int
    edges: list[tuple[int, int]]
    lam: Annotated[float, pydantic.Field(alias="lambda")]
    spectral_gap: float


class TopologyInfo(TopologyDump):
    kind: TopologyKind
    round: int
    validation: ValidationReport


# =========================================================================== #
#                                DATA AND MODEL                               #
# =========================================================================== #


class DatasetSpec(_Config):
    """Gaussian-blob classification data standing in for an image dataset"""

    n: Annotated[int, pydantic.Field(ge=1, description="Total samples, train + test")] = (
        DEFAULT_N
    )
    d: Annotated[int, pydantic.Field(ge=1, description="Feature dimension")] = DEFAULT_D
    classes: Annotated[int, pydantic.Field(ge=1, description="Number of classes")] = (
        DEFAULT_CLASSES
    )
    sep: Annotated[
        float, pydantic.Field(gt=0, description="Distance of each class mean from the origin")
    ] = DEFAULT_SEP
    seed: Seed = 0

    @pydantic.model_validator(mode="after")
    def check_size(self) -> Self:
        if self.n < 10 * self.classes:
            raise ValueError(f"need n >= 10 * classes = {10 * self.classes}, got n = {self.n}")
        return self


class PartitionSpec(_Config):
    kind: Annotated[
        PartitionKind, pydantic.Field(description="How train samples are split across clients")
    ] = PartitionKind.DIRICHLET
    alpha: Annotated[
        float, pydantic.Field(gt=0, description="Dirichlet concentration (dirichlet only)")
    ] = DEFAULT_ALPHA
    classes_per_client: Annotated[
        int, pydantic.Field(ge=1, description="Label pieces per client (pathological only)")
    ] = DEFAULT_CLASSES_PER_CLIENT
    m: Annotated[int, pydantic.Field(ge=1, description="Number of clients")]
    seed: Seed = 0


class ModelSpec(_Config):
    kind: Annotated[ModelKind, pydantic.Field(description="Model family")] = ModelKind.LOGISTIC
    d: Annotated[int, pydantic.Field(ge=1, description="Input dimension")]
    hidden: Annotated[
        int, pydantic.Field(ge=1, description="Hidden tanh units (mlp only)")
    ] = DEFAULT_HIDDEN
    classes: Annotated[int, pydantic.Field(ge=1, description="Output classes")]
    l2: Annotated[
        float, pydantic.Field(ge=0, description="Weight decay folded into the loss")
    ] = DEFAULT_L2
    curvature: Annotated[
        list[float] | None,
        pydantic.Field(description="Diagonal Hessian of the quadratic family, defaults to ones"),
    ] = None

    @property
    def p(self) -> int:
        match self.kind:
            case ModelKind.QUADRATIC:
                return self.d
            case ModelKind.LOGISTIC:
                return self.d * self.classes + self.classes
            case ModelKind.MLP:
                return (
                    self.d * self.hidden + self.hidden + self.hidden * self.classes + self.classes
                )

    @pydantic.model_validator(mode="after")
    def check_curvature(self) -> Self:
        if self.curvature is not None:
            if self.kind != ModelKind.QUADRATIC:
                raise ValueError("curvature only applies to the quadratic family")
            if len(self.curvature) != self.d:
                raise ValueError(f"curvature needs {self.d} entries, got {len(self.curvature)}")
            if any(h <= 0 for h in self.curvature):
                raise ValueError("curvature entries must be positive")
        return self


# =========================================================================== #
#                                  FEDERATION                                 #
# =========================================================================== #


class FedConfig(_Config):
    """One federated training run. Nested sections inherit `m`, `seed` and
    the data dimensions from the top level when they do not set them.
    """

    algorithm: Annotated[Algorithm, pydantic.Field(description="Federated algorithm")] = (
        Algorithm.DFEDSAM
    )
    m: Annotated[int, pydantic.Field(ge=1, description="Number of clients")] = DEFAULT_M
    T: Annotated[int, pydantic.Field(ge=1, description="Communication rounds")] = DEFAULT_T
    K: Annotated[int, pydantic.Field(ge=1, description="Local iterations per round")] = (
        DEFAULT_K
    )
    Q: Annotated[int, pydantic.Field(ge=1, description="Gossip steps per round")] = DEFAULT_Q
    eta0: Annotated[float, pydantic.Field(gt=0, description="Initial local step size")] = (
        DEFAULT_ETA0
    )
    eta_decay: Annotated[
        float, pydantic.Field(gt=0, le=1, description="Multiplicative step decay per round")
    ] = DEFAULT_ETA_DECAY
    rho: Annotated[float, pydantic.Field(ge=0, description="SAM perturbation radius")] = (
        DEFAULT_RHO
    )
    mu: Annotated[float, pydantic.Field(ge=0, lt=1, description="Heavy-ball momentum")] = (
        DEFAULT_MU
    )
    batch_size: Annotated[
        int, pydantic.Field(ge=1, description="Minibatch size, capped at the shard size")
    ] = DEFAULT_BATCH_SIZE
    sample_frac: Annotated[
        float,
        pydantic.Field(gt=0, le=1, description="Fraction of clients sampled (centralized only)"),
    ] = DEFAULT_SAMPLE_FRAC
    server_lr: Annotated[
        float, pydantic.Field(gt=0, description="Global step on the averaged update (centralized)")
    ] = DEFAULT_SERVER_LR
    seed: Seed = 0
    init: Annotated[InitMode, pydantic.Field(description="Initial client models")] = (
        InitMode.SHARED
    )
    mgs_fresh_graph: Annotated[
        bool,
        pydantic.Field(description="Time-varying topologies draw a new graph every gossip step"),
    ] = False
    pure_gossip: Annotated[
        bool, pydantic.Field(description="Skip local updates, only gossip (diagnostic)")
    ] = False
    data: DatasetSpec = DatasetSpec()
    topology: TopologySpec
    partition: PartitionSpec
    model: ModelSpec

    @pydantic.model_validator(mode="before")
    @classmethod
    def fill_nested(cls, data: Any) -> Any:
        if not isinstance(data, dict):
            return data

        data = dict(data)
        m = data.get("m", DEFAULT_M)
        seed = data.get("seed", 0)

        dataset = _as_dict(data.get("data", {}))
        if isinstance(dataset, dict):
            dataset.setdefault("seed", seed)
            data["data"] = dataset
        else:
            dataset = {}

        for section in ("topology", "partition"):
            nested = _as_dict(data.get(section, {}))
            if isinstance(nested, dict):
                nested.setdefault("m", m)
                nested.setdefault("seed", seed)
                data[section] = nested

        model = _as_dict(data.get("model", {}))
        if isinstance(model, dict):
            model.setdefault("d", dataset.get("d", DEFAULT_D))
            model.setdefault("classes", dataset.get("classes", DEFAULT_CLASSES))
            data["model"] = model

        return data

    @pydantic.model_validator(mode="after")
    def check_consistency(self) -> Self:
        if self.algorithm == Algorithm.DFEDSAM and self.Q != 1:
            raise ValueError(f"dfedsam gossips once per round (Q = 1), got Q = {self.Q}")
        if self.topology.m != self.m or self.partition.m != self.m:
            raise ValueError(
                f"client counts disagree: m = {self.m}, topology.m = {self.topology.m}, "
                f"partition.m = {self.partition.m}"
            )
        if self.model.kind != ModelKind.QUADRATIC:
            if self.model.d != self.data.d or self.model.classes != self.data.classes:
                raise ValueError(
                    f"model dims (d={self.model.d}, classes={self.model.classes}) do not match "
                    f"the data (d={self.data.d}, classes={self.data.classes})"
                )
        elif self.model.d != self.data.d:
            raise ValueError(f"quadratic model needs d = {self.data.d}, got {self.model.d}")
        if (
            self.partition.kind == PartitionKind.PATHOLOGICAL
            and self.partition.classes_per_client > self.data.classes
        ):
            raise ValueError(
                f"classes_per_client = {self.partition.classes_per_client} exceeds the "
                f"{self.data.classes} classes in the data"
            )
        return self

    def eta(self, t: int) -> float:
        return self.eta0 * self.eta_decay**t


class ExperimentConfig(_Config):
    fed: FedConfig = pydantic.Field(default_factory=lambda: FedConfig())
    output_dir: Annotated[
        Path | None, pydantic.Field(description="Run directory for config, metrics and summary")
    ] = None
    metric_every: Annotated[
        int, pydantic.Field(ge=1, description="Rounds between Hessian eigenvalue probes")
    ] = DEFAULT_METRIC_EVERY
    workers: Annotated[
        int, pydantic.Field(ge=1, description="Threads running client updates")
    ] = 1
    dump_topology: Path | None = None
    dump_partition: Path | None = None
    save_models: Path | None = None
    force: Annotated[bool, pydantic.Field(description="Overwrite an existing run")] = False


class SweepAxes(_Config):
    algorithm: list[Algorithm] | None = None
    topology: list[TopologyKind] | None = None
    Q: list[Annotated[int, pydantic.Field(ge=1)]] | None = None
    K: list[Annotated[int, pydantic.Field(ge=1)]] | None = None
    rho: list[Annotated[float, pydantic.Field(ge=0)]] | None = None
    alpha: list[Annotated[float, pydantic.Field(gt=0)]] | None = None
    m: list[Annotated[int, pydantic.Field(ge=1)]] | None = None
    seed: list[Seed] | None = None

    def items(self) -> list[tuple[str, list[Any]]]:
        return [
            (name, values)
            for name in type(self).model_fields
            if (values := getattr(self, name)) is not None
        ]

    @property
    def size(self) -> int:
        return math.prod(len(values) for _, values in self.items())


class SweepSpec(_Config):
    base: ExperimentConfig = pydantic.Field(default_factory=lambda: ExperimentConfig())
    axes: SweepAxes = SweepAxes()
    cap: Annotated[int, pydantic.Field(ge=1, description="Largest allowed run count")] = (
        DEFAULT_SWEEP_CAP
    )
    output_root: Path | None = None

    @pydantic.model_validator(mode="after")
    def check_cap(self) -> Self:
        if self.axes.size > self.cap:
            raise ValueError(f"sweep has {self.axes.size} runs, more than the cap of {self.cap}")
        return self


# =========================================================================== #
#                                    THEORY                                   #
# =========================================================================== #


class BoundInputs(_Config):
    """Inputs of the convergence bound. Assumption constants are user-supplied
    or probe estimates; `sigma_g` falls back to `beta` (sigma_g <= beta) when
    only the homogeneity parameter is known.
    """

    model_config = pydantic.ConfigDict(extra="forbid", frozen=True, populate_by_name=True)

    L: Annotated[float, pydantic.Field(gt=0, description="Gradient Lipschitz constant")]
    sigma_l: Annotated[float, pydantic.Field(ge=0, description="Local gradient noise")]
    sigma_g: Annotated[
        float | None, pydantic.Field(ge=0, description="Global gradient dissimilarity")
    ] = None
    beta: Annotated[float | None, pydantic.Field(ge=0, description="Homogeneity parameter")] = (
        None
    )
    f_gap: Annotated[float, pydantic.Field(ge=0, description="f(x_bar^1) - f*")]
    eta: Annotated[float, pydantic.Field(gt=0)]
    K: Annotated[int, pydantic.Field(ge=1)]
    T: Annotated[int, pydantic.Field(ge=1)]
    rho: Annotated[float, pydantic.Field(ge=0)]
    lam: Annotated[float, pydantic.Field(ge=0, lt=1, alias="lambda")]
    m: Annotated[int, pydantic.Field(ge=2)]
    Q: Annotated[int, pydantic.Field(ge=1)]

    @pydantic.model_validator(mode="after")
    def check_dissimilarity(self) -> Self:
        if self.sigma_g is None and self.beta is None:
            raise ValueError("one of sigma_g or beta is required")
        return self

    @property
    def sigma_g_effective(self) -> float:
        return self.sigma_g if self.sigma_g is not None else self.beta  # type: ignore

    @property
    def eta_max(self) -> float:
        return 1.0 / (10.0 * self.K * self.L)


class AssumptionEstimates(pydantic.BaseModel):
    """Probe estimates of the assumption constants for one config. Each one is
    a lower bound on the true supremum over parameter space.
    """

    L: Annotated[float, pydantic.Field(description="Largest Hessian spectral norm seen")]
    sigma_l: Annotated[float, pydantic.Field(description="Local minibatch gradient noise")]
    sigma_g: Annotated[float, pydantic.Field(description="Global gradient dissimilarity")]
    beta: Annotated[float, pydantic.Field(description="Homogeneity parameter")]
    probes: int


class BoundTerms(pydantic.BaseModel):
    first_term: float
    alpha: float
    beta: float
    phi: float
    total: float
    eta_max: float
    eta_flagged: Annotated[
        bool, pydantic.Field(description="eta exceeds 1/(10KL), the bound's step-size condition")
    ]


# =========================================================================== #
#                                   RECORDS                                   #
# =========================================================================== #


class MetricRecord(pydantic.BaseModel):
    """Metrics measured after communication round `t` (t = completed rounds)"""

    # NaN accuracies (quadratic family) survive a JSON round trip
    model_config = pydantic.ConfigDict(ser_json_inf_nan="constants")

    t: Annotated[int, pydantic.Field(ge=1)]
    train_loss: float
    test_loss: float
    train_acc: Annotated[float, pydantic.Field(description="NaN for the quadratic family")]
    test_acc: Annotated[float, pydantic.Field(description="NaN for the quadratic family")]
    consensus_dist: Annotated[float, pydantic.Field(ge=0)]
    grad_norm_sq: Annotated[float, pydantic.Field(ge=0)]
    eta_t: float
    hessian_eig: Annotated[
        float | None, pydantic.Field(description="Largest Hessian eigenvalue, every E rounds")
    ] = None
    comm_exchanges: Annotated[
        int, pydantic.Field(ge=0, description="Cumulative model transmissions")
    ] = 0


class RunStatus(str, Enum):
    OK = "ok"
    DIVERGED = "diverged"


class RunSummary(pydantic.BaseModel):
    model_config = pydantic.ConfigDict(ser_json_inf_nan="constants")

    algorithm: Algorithm
    seed: int
    status: RunStatus
    rounds_completed: int
    final: MetricRecord | None
    best_test_acc: float | None
    min_grad_norm_sq: float | None
    rate_slope: Annotated[
        float | None,
        pydantic.Field(
            description="Slope of log running-min grad_norm_sq against log t, None below "
            "20 rounds"
        ),
    ] = None
    generalization_gap: float | None
    wall_time_s: float
