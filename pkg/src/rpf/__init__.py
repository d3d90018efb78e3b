"""Power-flow modeling on bus voltages and branch angle differences, with a
residual whose norm measures how far an operating condition is from
steady-state balance. Includes an iterative solver, dataset generation,
trainable surrogate models and control-adjustment tasks built on them.
"""

__version__ = "0.1.0"

from .errors import (
    AngleInconsistency,
    CaseSyntaxError,
    DegenerateCycle,
    DegenerateVoltage,
    FingerprintMismatch,
    FormatError,
    GenerationError,
    InfeasibleRegion,
    InfeasibleStart,
    LineSearchFailure,
    MissingSection,
    NonDescent,
    NonFiniteLoss,
    NotConverged,
    RpfError,
    ValidationError,
)
from .network import (
    Branch,
    Bus,
    Generator,
    Load,
    Network,
    build_network,
    case9,
    cycle_basis,
    load_injector_config,
    load_network,
    network_fingerprint,
    network_from_json,
    network_to_json,
    parse_matpower_case,
)
from .injectors import (
    branch_terminal_currents,
    generator_current,
    load_current,
)
from .residual import (
    ControlLayout,
    SlackSpec,
    VoltageState,
    assemble_residual,
    default_controls,
    flat_state,
    reconstruct_bus_angles,
    residual_jacobian,
    residual_labels,
    residual_norm,
    residual_rows,
    state_rows,
    ybus_matrix,
    ybus_oracle_mismatch,
)
from .solver import (
    FeasibleSolution,
    RpfSolution,
    SolverConfig,
    solve_feasible,
    solve_rpf,
)
from .dataset import (
    Dataset,
    DatasetRecord,
    SamplingConfig,
    dataset_columns,
    generate_dataset,
    load_dataset,
    rescale_to_lossless,
    sample_oc,
    save_dataset,
)
from .neural import (
    NeuralSolver,
    TrainConfig,
    TrainingReport,
    input_jacobian,
    load_model,
    predict,
    predict_residual_and_grad,
    save_model,
    train,
)
from .bim import (
    BimEncoding,
    bim_residual,
    bim_transform,
    decode,
    encode,
    predict_bim,
    train_bim,
    zero_mask,
)
from .po import (
    ControlPartition,
    DroopConfig,
    ExactPredictor,
    NeuralPredictor,
    OpfSpec,
    PoResult,
    grid_search_oracle,
    solve_po_opf,
    solve_po_pf,
    solve_po_qss,
)

__all__ = [name for name in dir() if not name.startswith("_")]
