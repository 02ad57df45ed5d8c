from histobalance.gan.spade import SPADE, spade_modulation
from histobalance.gan.networks import (
    MultiScaleDiscriminator,
    SpadeGenerator,
    StyleEncoder,
    StyleVector,
)
from histobalance.gan.train import GanConfig, gan_generate, load_generator, train_gan

__all__ = [
    "SPADE",
    "spade_modulation",
    "SpadeGenerator",
    "StyleEncoder",
    "StyleVector",
    "MultiScaleDiscriminator",
    "GanConfig",
    "train_gan",
    "gan_generate",
    "load_generator",
]
