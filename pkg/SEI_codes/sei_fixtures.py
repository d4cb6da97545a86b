"""Small architectures and datasets shared by the unit tests."""

import os
import sys

sys.path.insert(0, os.path.dirname(os.path.dirname(os.path.abspath(__file__))))

from emitter_signals import ChannelConfig, generate_dataset
from sei_network import Architecture

SMALL_DIM = 8


def small_architecture(num_emitters=3, length=64, keep_prob=0.5, classifier_input="projection"):
    return Architecture(num_emitters=num_emitters, length=length, kernel_widths=(5, 3, 3), channels=(4, 6, 8),
                        projection_dims=(16, SMALL_DIM), predictor_dims=(16, SMALL_DIM), classifier_hidden=(8, 8),
                        keep_prob=keep_prob, classifier_input=classifier_input)


def small_pools(num_emitters=3, per_emitter=8, length=64, initial_labeled=6, test_fraction=0.25, seed=0,
                snr_db=20.0):
    pools, _ = generate_dataset(num_emitters, per_emitter, length, ChannelConfig(snr_db=snr_db), seed,
                                initial_labeled=initial_labeled, test_fraction=test_fraction)
    return pools
