"""deepc-kit: data-enabled predictive control with a velocity-form variant.

Subpackages by responsibility: :mod:`deepc_kit.hankel` (data matrices),
:mod:`deepc_kit.qp` (ADMM solver), :mod:`deepc_kit.deepc` (QP assembly),
:mod:`deepc_kit.controller` (receding horizon), :mod:`deepc_kit.plants`
(simulators), :mod:`deepc_kit.bench_cli` (scenario runner).
"""

from .controller import ClosedLoopTrace, DeePCController, run_closed_loop
from .deepc import ControlSolution, DeePCParams, OnlineWindow
from .hankel import (
    DeltaHankelPartition,
    HankelPartition,
    ReducedBasis,
    Trajectory,
    build_hankel,
    build_mosaic,
    build_partition,
    check_collective_pe,
    check_pe,
    diff_trajectory,
    minimum_data_length,
    reduce_svd,
)
from .plants import (
    ExcitationConfig,
    LtiPlant,
    ReferenceSchedule,
    SoftArmPlant,
    collect_dataset,
    generate_excitation,
    random_lti,
)
from .qp import QpSolution, QuadraticProgram, SolverSettings, solve_qp

__version__ = "0.1.0"
