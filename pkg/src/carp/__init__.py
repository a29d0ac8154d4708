"""Context-aware reliability prediction for black-box services."""

from .aggregate import AggregatedTensor, ObservedMatrix, aggregate, collapse_time
from .baselines import (BaselineModel, PMFModel, baseline_fit, baseline_predict, pmf_fit,
                        pmf_predict)
from .context import (ContextModel, FeatureVector, assign_context, build_features,
                      cluster_contexts)
from .data import (ReliabilityRecord, ReliabilityTensor, SplitSpec, SyntheticSpec,
                   load_records, split, synth_generate)
from .evaluation import EvalReport, mae, rmse, run_experiment
from .factorization import (ContextFactorModel, FactorPair, TrainConfig, TrainingError,
                            mf_gradients, mf_loss, mf_train, predict_entry,
                            train_context_models)
from .predict import (CarpModel, carp_build, carp_predict, carp_predict_at_slice,
                      load_bundle, save_bundle)

__version__ = "0.1.0"
