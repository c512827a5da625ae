"""Gender segregation indices and wage-gap decompositions for labour-force microdata."""
from .exceptions import *  # noqa: F401,F403
from .frame import (  # noqa: F401
    Column,
    DesignMatrix,
    FormulaSpec,
    Frame,
    build_design,
    read_csv,
    real_wage,
    write_csv,
)
from .estimators import (  # noqa: F401
    FitResult,
    LassoBICRegressor,
    LassoPath,
    OLSRegressor,
    ProbitClassifier,
    ProbitMarginals,
    lasso_bic,
    ols,
    probit,
    probit_ame,
)
from .segregation import (  # noqa: F401
    SectorPanel,
    classify_dominance,
    duncan_index,
    rank_segregation,
    ssi,
)
from .shiftshare import shift_share  # noqa: F401
from .matching import balance, estimate_pscore, fit_pscore, ipw_ate, match_att  # noqa: F401
from .kbo import kbo_by_period, kbo_threefold, kbo_twofold  # noqa: F401
from .counterfactual import decompose_frame, decompose_wages, ecdf, ks_test  # noqa: F401
from .synthgen import DgpSpec, calibrate_to_paper, generate, ground_truth  # noqa: F401

__version__ = "0.1.0"
