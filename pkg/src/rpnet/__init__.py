"""Residual pairwise networks and generative regularization for few-shot similarity learning."""

from .data import (ClassSplit, Dataset, Episode, PairBatch, augment, load_image_folder,
                   load_omniglot, make_split, random_augment, sample_episode,
                   sample_pair_batch, synthetic_blobs, synthetic_glyphs)
from .evaluation import (EvalConfig, EvalReport, model_scorer, pixel_distance_scorer,
                         predict, run_protocol)
from .models import (CorruptionConfig, DiscriminatorOutput, Generator, SimilarityModel,
                     SrpnConfig, build_siam1, build_siam2, build_srpn, build_wrn_siamese,
                     corrupt, discriminate, generate)
from .objectives import discriminator_loss, generator_loss, l2_penalty, similarity_loss
from .training import (TrainConfig, embedding_asymmetry, l2_schedule, lr_schedule,
                       mean_weight_ratio, train_adversarial, train_similarity)

__version__ = "0.1.0"
