"""Triplet-guided adversarial augmentation of mel-spectrograms for speech emotion recognition."""

from .dataset import DatasetManifest, UtteranceRecord, generate_toy_dataset, load_manifest
from .features import FeatureConfig, MelSpectrogram, compute_mel_spectrogram
from .losses import LossWeights
from .models import ModelBundle, ModelConfig, augment, project_l1
from .training import (TrainConfig, TrainState, checkpoint_load, checkpoint_save, run_phase_cycle,
                       train_augmentor)

__version__ = "0.1.0"
