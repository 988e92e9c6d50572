"""Matrix-valued product integrals for interest-rate and life-insurance valuation."""
from .bondmarket import (BondCurve, ShortRateModel, bond_price, bond_prices, calibrate,
                         forward_rate, g2pp_prices, rho_from_prices, swap_rate, yield_curve)
from .emfit import FitConfig, WeightedSample, em_fit
from .errors import (ConvergenceError, DomainError, FitDegeneracyError, FitFailureError,
                     HazardUnavailable, MarkovLifeError, NonMonotoneCurveError, NumericError,
                     StructuralError)
from .gramcharlier import JacobiReference, gc_approximation, gc_cdf, gc_density, gc_quantile
from .lifeval import (PaymentSpec, ProductModel, build_product_model, equivalence_premium,
                      moment_stack, raw_moments_of_pv, reserve_matrix, thiele_solve)
from .matrixcore import PiecewiseMatrixFunction, prod_integral, van_loan
from .mcsim import SimulationConfig, simulate_pv
from .phasetype import PhaseTypeDist

__version__ = "0.1.0"
