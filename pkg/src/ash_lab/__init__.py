"""Semantic-conditioned adversarial stylization for domain-generalized segmentation, in numpy."""

from .domains import evaluate, gen_scene, gen_style, source_spec, target_spec
from .hallucination import AshNet, ash_loss, ash_params, hallucinate, perturb_style
from .nets import Discriminator, EncoderDecoder, SegNet, pretrain_autoencoder
from .stylization import adain, channel_stats, orthogonal_noise
from .training import Checkpoint, TrainConfig, train

__version__ = "0.1.0"
