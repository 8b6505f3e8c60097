"""Numerical laboratory for type II bubble concentration in the radial
energy-critical focusing wave equation on R^5."""

__version__ = "0.1.0"

from .radial import (  # noqa: F401
    RadialField,
    RadialGrid,
    SPHERE_AREA,
    StatePair,
    energy,
    ground_state,
    inner_product,
    laplacian,
    nonlinearity,
    norm,
    rescale,
)
from .profiles import (  # noqa: F401
    KAPPA_CLOSED_FORM,
    ProfileSet,
    apply_L,
    build_profile_set,
    compute_kappa,
    ground_eigenpair,
    reference_grid,
    second_solution,
    test_function_Z,
)
from .modulation import (  # noqa: F401
    ModState,
    RegimeMode,
    app_trajectory,
    cylinder_contains,
    formal_rhs,
    integrate_mod,
    lyapunov_l,
    shoot_unstable,
)
from .ansatz import Ansatz, build_ustar, cutoff_chi, vstar  # noqa: F401
from .functionals import (  # noqa: F401
    VirialWeight,
    coercivity_min,
    functional_H,
    functional_I,
    functional_J,
    pohozaev_check,
    virial_weight,
    weighted_grad_norm,
)
from .wavesim import (  # noqa: F401
    SimConfig,
    evolve,
    eps_decompose,
    extract_lambda,
    flat_power_benchmark,
    run_blowup_experiment,
)
