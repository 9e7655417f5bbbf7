from .metrics import MetricsReport, evaluate_clustering, kmeans_baseline
from .scenarios import ScenarioSpec, UnknownScenario, builtin_scenario, generate_dataset
from .study import (BootstrapResult, StudyReport, bootstrap_se, nontransmission_detection,
                    run_mc_study)
