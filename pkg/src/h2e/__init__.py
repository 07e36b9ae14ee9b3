"""Desk-scale lab for hard-to-easy noise identification on long-tailed data.

The package trains a small dense network on synthetic long-tailed datasets
with controllable label noise, identifies noisy annotations with an
environment-invariant scorer, softens them away via confidence-weighted
pair mixing, and rebalances the classifier head. Reference baselines
(plain training, post-hoc prior correction, loss-based filtering) and a
CLI for generating data, training, and reporting are included.
"""

from .envs import AugmentTier, Environment, augment, build_environments, draw_batch
from .evaluation import (MetricsReport, accuracy, baseline_ce, baseline_la,
                         baseline_smallloss, noise_detection_pr, shot_split)
from .identifier import (ConfidenceTable, Identifier, IrmConfig,
                         adjusted_logits, irm_penalty, rank_noise,
                         score_confidences, train_identifier)
from .nn import (Batch, Gradients, Layer, Network, backward,
                 balanced_softmax_loss, cross_entropy, forward, load_network,
                 make_network, save_network, sgd_step, softmax)
from .pipeline import (H2EConfig, MixPair, RunResult, commensurate_pairs,
                       mixup_finetune, run_h2e, stage2_train)
from .streams import named_rng
from .synthdata import (DatasetBundle, GenerativeSpec, SampleRecord,
                        build_bundle, inject_blue_noise, inject_red_noise,
                        longtail_counts, make_generative_spec, read_csv,
                        sample_clean, write_csv)
from .warmup import class_density, initial_weights, warmup_train

__version__ = "0.1.0"
