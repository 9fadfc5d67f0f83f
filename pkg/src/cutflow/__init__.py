"""CutFEM topology optimization for laminar flow and species transport."""

__version__ = "0.1.0"

from .grid import BackgroundMesh, build_mesh, node_support  # noqa: F401
from .design import (  # noqa: F401
    DesignVector, FilterOperator, LevelSetMap, PortPrimitive,
    apply_filter, build_filter, ks_min, port_signed_distance,
)
from .cut import CutModel, build_cut_model, classify_elements  # noqa: F401
from .flow import FlowParams, assemble_flow  # noqa: F401
from .transport import (  # noqa: F401
    IndicatorParams, TransportParams, assemble_species, project_indicator,
    solve_indicator,
)
from .solve import SolveConfig, TimeSlot, linear_solve, march, newton_solve  # noqa: F401
from .criteria import CriterionSpec, ProblemSpec, evaluate_criterion  # noqa: F401
from .gcmma import GCMMA, GcmmaConfig  # noqa: F401
from .pipeline import ForwardModel, PhysicsConfig  # noqa: F401
