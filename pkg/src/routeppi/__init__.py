"""routeppi: budget-aware predictor routing, active label sampling, and
prediction weighting for valid confidence intervals on a population mean."""

from .analytic import (avg_root_residual, ratio_r1, ratio_r2, var_ampi, var_asi,
                       width_reduction_pct)
from .core import (CalibrationResult, CostModel, Dataset, InfeasibleBudgetError,
                   IntervalEstimate, LabelSourceError, SamplingDecision,
                   SingularSystemError, SubsetFamily, TwoPopParams, subset_key)
from .datagen import (gen_specialized_pair, gen_synthetic_regression,
                      gen_two_population, make_noisy_predictor)
from .engine import (DeploymentOutcome, aipw_increments, asi_config,
                     confidence_interval, deploy, point_estimate,
                     variance_estimate)
from .harness import (CsvSchema, CsvSource, SweepConfig, SweepResult,
                      class_balance, load_csv_dataset, run_sweep,
                      viability_cutoff, write_sweep_csv)
from .optimizer import (BisectionConfig, FixedPointConfig, calibrate, clip_pi,
                        expected_spend, instance_cost, mu_closed_form, pi_star,
                        route, solve_lambda_wls, solve_mu)
from .uncertainty import (BoostedTreeModel, ConstantModel, CvGrid,
                          RegressionTree, ResidualOracle, UncertaintyConfig,
                          evaluate_uncertainty, fit_uncertainty, predict_u)

__version__ = "0.1.0"
