from typing import Annotated

import fastapi

from .models import *

Kind = Annotated[
    TopologyKind,
    fastapi.Query(description="Graph family to build the gossip matrix over"),
]

Clients = Annotated[
    int,
    fastapi.Query(ge=1, le=1024, description="Number of clients (graph nodes)"),
]

Neighbors = Annotated[
    int | None,
    fastapi.Query(ge=1, description="Neighbor budget per client, time_varying_k only"),
]

TopologySeed = Annotated[
    int,
    fastapi.Query(ge=0, le=SEED_MAX, description="Seed of the time-varying graph stream"),
]

Round = Annotated[
    int,
    fastapi.Query(
        ge=0,
        description="Communication round, only changes the graph for time_varying_k",
    ),
]

RunName = Annotated[
    str,
    fastapi.Path(
        pattern=r"^[A-Za-z0-9_.\-]+$",
        description="Name of a run directory under the output root",
    ),
]
