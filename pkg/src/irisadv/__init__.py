"""Adversarial attacks on Gabor iris codes through a trainable U-Net surrogate."""

from .attack import AttackConfig, AttackResult, run_attack
from .codec import FilterBank, IrisCode, IrisSample, encode, make_filter_bank
from .matcher import BitLocationSet, masked_hamming, subset_hamming, verify
from .surrogate import Surrogate, SurrogateConfig, bit_error_rate, train_surrogate
from .synth import generate_corpus

__all__ = [
    "AttackConfig", "AttackResult", "BitLocationSet", "FilterBank", "IrisCode", "IrisSample",
    "Surrogate", "SurrogateConfig", "bit_error_rate", "encode", "generate_corpus",
    "make_filter_bank", "masked_hamming", "run_attack", "subset_hamming", "train_surrogate", "verify",
]
