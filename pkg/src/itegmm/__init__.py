"""Individual treatment effects for short panels with several related
outcomes, estimated by GMM under an interactive fixed effects model."""

__version__ = "0.1.0"

from .bootstrap import BootstrapResult, bootstrap_effects, classify_significance, fit_all_cells
from .comparators import IfeFit, ScmWeights, ife_att, ife_fit, scm_att, scm_fit
from .design import CellIndex, DesignError, DesignMatrices, SplitSpec, build_design, enumerate_splits
from .gmm import EffectEstimates, GmmError, GmmFit, estimate_att, estimate_effects, gmm_step, gmm_two_step
from .lcm import LcmFit, estimate_lcm
from .panel import PanelDataset, PanelError, TreatmentLayout, derive_layout, load_panel, write_panel
from .select import SelectionReport, estimate_averaged, loo_mse, select_model
from .simlab import DgpConfig, MetricReport, generate, reproduce_table, run_comparison, run_scenario

__all__ = [
    "BootstrapResult", "CellIndex", "DesignError", "DesignMatrices", "DgpConfig",
    "EffectEstimates", "GmmError", "GmmFit", "IfeFit", "LcmFit", "MetricReport",
    "PanelDataset", "PanelError", "ScmWeights", "SelectionReport", "SplitSpec",
    "TreatmentLayout", "bootstrap_effects", "build_design", "classify_significance",
    "derive_layout", "enumerate_splits", "estimate_att", "estimate_averaged",
    "estimate_effects", "estimate_lcm", "fit_all_cells", "generate", "gmm_step",
    "gmm_two_step", "ife_att", "ife_fit", "load_panel", "loo_mse", "reproduce_table",
    "run_comparison", "run_scenario", "scm_att", "scm_fit", "select_model", "write_panel",
]
