"""Block-diagonalization flow and spectral analysis of perturbed spin-1
AKLT chains with open boundaries."""

__version__ = "0.1.0"

from .aklt import AkltChain, GroundSpace
from .chainops import (
    ChainOperator,
    LocalBlock,
    SiteRange,
    compose,
    conjugate,
    embed,
    spin1_generators,
)
from .flow import (
    FlowState,
    GapFailure,
    SeriesConfig,
    advance,
    final_boundary_step,
    init_flow,
    ledger_report,
    local_g,
    ls_diag,
    run_flow,
    verify_consistency,
    z_generator,
)
from .intervals import IntervalLabel, MacroLattice, validate
from .solvers import krylov_expmv, lowest_eigenpairs, operator_norm
