"""Synthetic voxel responses with known ground truth, and synthetic ROI atlases."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..encoding import FeatureMatrix, ResponseMatrix
from ..errors import InputError
from ..roistats import STREAM_ROIS, RoiAtlas


@dataclass
class SyntheticResponses:
    responses: ResponseMatrix
    weights: np.ndarray  # (F, V) ground-truth readout on centred features
    signal: np.ndarray  # (S, V) noiseless responses
    noise_level: float


def synth_responses(features, n_voxels, noise_level, n_repeats, seed, subset_fraction=0.5):
    """Seeded linear readout of a random feature subset plus per-trial noise.

    Every voxel reads out a random subset of the (centred) feature columns
    with Gaussian weights, rescaled so its noiseless signal has unit sample
    variance across stimuli. Each trial adds independent Gaussian noise with
    standard deviation ``noise_level``, so the per-voxel signal-to-noise
    ratio is ``1 / noise_level``.
    """
    X = features.data if isinstance(features, FeatureMatrix) else np.asarray(features, dtype=np.float64)
    if noise_level < 0:
        raise InputError("noise_level must be >= 0")
    if n_repeats < 1 or n_voxels < 1:
        raise InputError("need at least one voxel and one repeat")
    rng = np.random.default_rng(seed)
    s, f = X.shape
    xc = X - X.mean(axis=0)
    n_sub = max(1, int(round(subset_fraction * f)))
    weights = np.zeros((f, n_voxels))
    for v in range(n_voxels):
        cols = rng.choice(f, size=n_sub, replace=False)
        weights[cols, v] = rng.normal(size=n_sub)
    signal = xc @ weights
    scale = signal.std(axis=0, ddof=1)
    scale[scale == 0] = 1.0
    weights /= scale
    signal = xc @ weights
    noise = rng.normal(scale=noise_level, size=(s, n_voxels, n_repeats)) if noise_level > 0 \
        else np.zeros((s, n_voxels, n_repeats))
    repeats = signal[:, :, None] + noise
    return SyntheticResponses(ResponseMatrix.from_repeats(repeats), weights, signal, float(noise_level))


def synth_atlas(n_voxels, seed, unassigned_fraction=0.0, names=None):
    """Random but balanced assignment of voxels to the stream ROIs."""
    names = dict(STREAM_ROIS if names is None else names)
    rng = np.random.default_rng(seed)
    ids = np.array(sorted(names))
    n_unassigned = int(round(unassigned_fraction * n_voxels))
    labels = np.zeros(n_voxels, dtype=np.int64)
    n_assigned = n_voxels - n_unassigned
    labels[:n_assigned] = np.resize(ids, n_assigned)
    return RoiAtlas(rng.permutation(labels), names)
