"""Semi-supervised training with virtual adversarial directions and generated bad samples."""

from .badgen import BadGenHyper, BadSample, generate_bad_sample, l_fake, l_true
from .data import SslDataset, load_idx, make_clusters, ssl_split
from .nn import AdamState, MlpModel, adam_step, backprop, forward, he_init, softmax
from .trainer import FatConfig, EpochMetrics, evaluate, fat_step, train, warmup_lambda
from .vat import AdvDirection, VatHyper, adversarial_direction, kl_divergence, vat_loss

__version__ = "0.1.0"
