"""Desk-scale unsupervised ASR: a reinforcement-learned boundary segmentation
policy iterated with an adversarially trained phoneme predictor, on synthetic
or precomputed feature matrices."""

__version__ = "0.1.0"
