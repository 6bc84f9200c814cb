"""Learning k-dimensional coding schemes: reconstruction maps, encoders,
optimal-transport and rate-distortion oracles, and generalization bounds."""

from ._backend import BACKEND, available_backends
from .bounds import (
    BoundReport,
    CoveringFunction,
    EntropyIntegral,
    applicable_bounds,
    bound_cnn,
    bound_dense_deep,
    bound_dense_wide,
    bound_lemma21,
    bound_sigmoid,
    bound_thm_complexity,
    bound_thm_wasserstein,
    entropy_integral,
    maurey_logcover,
    maurey_sparsify,
    wasserstein_constant,
)
from .coding import (
    EncodeStrategy,
    TrainConfig,
    TrainingDivergence,
    empirical_risk,
    encode,
    encode_batch,
    erm_train,
    excess_risk_check,
    fit_pca,
    fit_vq_lloyd,
    loss_and_grad,
)
from .harness import ExperimentConfig, GapRecord, RateStudy, measure_gap, rate_study, sample
from .maps import (
    Activation,
    ArchitectureSpec,
    ConvLayer,
    ConvNet,
    DenseNet,
    LinearMap,
    eval_map,
    map_distance,
    map_from_dict,
    perturbation_bound,
)
from .ratedistortion import (
    RDProblem,
    blahut,
    cover_lower_bound,
    distortion_at_rate,
    rd_curve,
    rd_lower_bound_check,
)
from .spaces import Dataset, DataSpace, DiscreteMeasure, LatentSpace, ValidationError, covering_radius, eps_net
from .transport import (
    Coupling,
    NumericalError,
    best_pushforward,
    pollard_check,
    pushforward,
    risk_shift_bound,
    wasserstein,
    wasserstein_1d,
)

__version__ = "0.1.0"
