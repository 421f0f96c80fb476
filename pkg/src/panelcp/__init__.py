"""Two-stage change-point detection for ultra-high-dimensional panel regression.

Stage 1 screens covariates with tilted current correlations (DTCCS, with SIS
and HOLP baselines); stage 2 finds the times at which the coefficients of the
screened covariates jump, using group LASSO/SCAD/MCP penalties on coefficient
differences.
"""
__version__ = "0.1.0"

from .errors import (  # noqa: E402
    DataError, DegenerateColumn, DivergedFit, InvalidInput, MalformedInput,
    NumericalError, PanelcpError, ParseError, RankWarning, RidgeFallbackWarning,
    ScenarioTooSmall, SingularFit, SingularTilt, UnbalancedPanel,
)
from .panel import (  # noqa: E402
    GroundTruth, PanelDataset, SimulationScenario, StackedDesign, load_panel_csv,
    simulate_panel, standardize_and_stack, write_panel_csv,
)
from .screen import ScreeningParams, ScreeningResult, dtccs_screen, holp_screen, screen, sis_screen  # noqa: E402
from .penalties import PenaltySpec  # noqa: E402
from .segment import (  # noqa: E402
    ChangePointResult, CumulativeDesign, GroupFit, build_cumulative_design,
    detect_change_points, group_coordinate_descent, post_select_refit,
)
