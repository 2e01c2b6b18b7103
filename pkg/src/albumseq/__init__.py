"""Person recognition in photo albums as sequence prediction.

A from-scratch recurrent model predicts identity labels one instance at a
time, conditioning each step on the previous label and the current
appearance feature, with an optional global scene feature at the initial
step. Includes training, ordering-fused inference, ablation baselines,
region fusion, a synthetic album generator, and a CLI.
"""

from .data import (AccuracyCells, DatasetError, GenConfig, Instance,
                   LabelVocabulary, MetricsReport, PhotoRecord, SplitPair,
                   concat_regions, evaluate, generate_synthetic, load_dataset,
                   load_vocabulary, protocol_report, save_dataset,
                   save_vocabulary, split_stats)
from .gradcheck import BlockResult, gradcheck_model, gradcheck_suite
from .inference import (FusionMode, OrderingPlan, PredictionResult,
                        appearance_only_train_eval, fuse_regions,
                        make_orderings, predict_instance, predict_photo,
                        predict_split, predict_split_fused, run_sequence)
from .layers import AUX_LABEL, EmbedMode, ValidationError
from .numcore import (AdamState, ShapeError, adam_step, child_rng,
                      derive_seed, finite_diff_grad, nll, one_hot, rel_error,
                      relu, sigmoid, softmax)
from .seqmodel import (ModelConfig, ModelParams, SequenceBatchItem,
                       backward_train, flatten_params, forward_train,
                       init_model_params, load_checkpoint, log_likelihood,
                       num_params, save_checkpoint, set_flat)
from .training import (TrainConfig, TrainReport, lr_schedule, shuffle_photo,
                       train)

__version__ = "0.1.0"
