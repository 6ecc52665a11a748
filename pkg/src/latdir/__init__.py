"""Lattice Markov chains: conductance fields, Dirichlet forms, heat kernels,
shortest-path diffusion coefficients, and trajectory simulation on (1/n)Z^d."""

from .lattice import (
    Box,
    GridFunction,
    LatticeScale,
    Site,
    bracket_n,
    euclid,
    extend,
    floor_embed,
    l1_steps,
    load_grid_function,
    norm_p,
    origin,
    restrict,
    save_grid_function,
    site,
)
from .conductance import (
    AssumptionReport,
    CallableField,
    ConductanceField,
    NearestNeighborField,
    RangeRestrictedField,
    SplitField,
    StableLikeField,
    TabulatedField,
    check_A1,
    check_A2,
    check_A3,
    field_from_config,
    field_hash,
    large_jump_intensity,
    load_tabulated_field,
    moment_M,
    nu,
    nu_with_remainder,
    resolve_eps,
    split,
)
from .dirichlet import (
    DaviesExponent,
    GeneratorMatrix,
    HeatKernelTable,
    apply_generator,
    assemble,
    auto_heat_kernel,
    carre_du_champ,
    davies_exponent,
    davies_off_diagonal_check,
    default_box_radius,
    energy,
    energy_nn,
    energy_split,
    heat_kernel,
    resolvent,
    scaled_kernel,
    truncated_kernel,
)
from .paths import (
    DiffusionField,
    PathEnsemble,
    a4_l1_error,
    diffusion_field,
    edge_weight,
    enumerate_paths,
    g_matrix,
    g_matrix_table,
    gradient_identity_residual,
    path_count,
    second_moment_matrix,
)
from .simulate import (
    ExitStats,
    JumpSampler,
    Trajectory,
    exit_probability,
    exit_profile,
    marginal_counts,
    scaled_trajectory,
    simulate,
    simulate_meyer,
    step_sampler,
    total_variation,
    wilson_interval,
)

__version__ = "0.1.0"
