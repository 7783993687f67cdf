"""Distributed selection and tracking of optimal variational equilibria."""

from .backend import backend_name
from .errors import GneError
from .game import (
    BlackboxCost,
    BlackboxSelection,
    CommGraph,
    ConstraintSet,
    DiagQuadTerm,
    GameSpec,
    JointState,
    MatQuadTerm,
    ProxForm,
    QuadraticCost,
    SelectionFunction,
    SetForm,
    check_gradient,
    dual_disagreement,
    feasible_set_residual,
    kkt_residual,
    load_game,
)
from .hsdm import (
    BetaSchedule,
    RunTrace,
    StopRule,
    certify_selection,
    hsdm_solve,
    shrinkage_probe,
)
from .online import (
    GameSequence,
    TrackingReport,
    lemma_gamma,
    load_scenario,
    measure_variability,
    restarted_hsdm,
    tau_beta,
    tracking_bound,
    xi_identity_shrinkage,
)
from .operators import (
    FBFOperator,
    LipschitzEstimate,
    PFBOperator,
    StepSizes,
    apply_B,
    apply_C,
    build_operator,
    estimate_lipschitz,
    make_stepsizes,
    phi_norm,
    psi_norm,
    resolvent_A,
    t_fbf,
    t_pfb,
)
from .oracles import (
    OracleSolution,
    oracle_projection_game,
    oracle_selection_on_segment,
    oracle_unique_vgne,
)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
