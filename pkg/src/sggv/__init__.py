"""Shape-guided gradient voting for domain generalization, at desk scale."""

__version__ = "0.1.0"

from .aggregation import (AggregationOutcome, AgrRand, AgrSum, DeepAll,
                          GradientBundle, PCGrad, Sggv, aggregate, agr_rand,
                          agr_sum, deep_all, default_tau, pcgrad,
                          retained_proportion, sggv_vote)
from .data import DatasetSpec, DomainDataset, generate_dataset, load_image_folder
from .harness import ExperimentConfig, RunReport, run_experiment, sweep_tau
from .imageops import (ExampleTriple, JitterParams, color_jitter, laplace_edge,
                       make_triple, sobel_edge)
from .nn import (Architecture, ModelState, adam_step, default_architecture,
                 finite_diff_grad, forward, init_params, loss_and_grad)

__all__ = [
    "AggregationOutcome", "AgrRand", "AgrSum", "DeepAll", "GradientBundle",
    "PCGrad", "Sggv", "aggregate", "agr_rand", "agr_sum", "deep_all",
    "default_tau", "pcgrad", "retained_proportion", "sggv_vote",
    "DatasetSpec", "DomainDataset", "generate_dataset", "load_image_folder",
    "ExperimentConfig", "RunReport", "run_experiment", "sweep_tau",
    "ExampleTriple", "JitterParams", "color_jitter", "laplace_edge",
    "make_triple", "sobel_edge",
    "Architecture", "ModelState", "adam_step", "default_architecture",
    "finite_diff_grad", "forward", "init_params", "loss_and_grad",
]
