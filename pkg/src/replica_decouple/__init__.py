"""Replica-predicted decoupled scalar channels for MAP estimation, with Monte Carlo verification."""

__version__ = "0.1.0"

from .errors import ConfigurationError, DomainError, NumericError, ReplicaDecoupleError  # noqa: E402
from .spectral import Empirical, MarchenkoPastur, RTransform, ScaledProjector, law_from_dict  # noqa: E402
from .priors import prior_from_dict  # noqa: E402
from .scalar import scalar_map, utility_from_dict  # noqa: E402
from .rs import RsSolution, SolverOptions, rs_joint_moment, rs_predicted_channel, rs_solve  # noqa: E402
from .onersb import OneRsbOptions, OneRsbSolution, onersb_joint_moment, onersb_predicted_channel, onersb_solve  # noqa: E402,E501
from .channel import DecoupledChannel  # noqa: E402
from .finite_sim import HaarSpectral, IidGaussian, TrialConfig, run_trials, vector_map_solve  # noqa: E402
from .verify import JointSampleSet, build_report  # noqa: E402
from .config import load_config, parse_config  # noqa: E402
