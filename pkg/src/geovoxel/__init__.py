"""Geometry-aware 3D voxel features and voxelwise encoding models.

Modules:

* :mod:`geovoxel.geometry`: poses, pinhole unprojection, voxel grids, warping, covisibility
* :mod:`geovoxel.featmodel`: 3D conv encoder, view-contrastive loss, training
* :mod:`geovoxel.encoding`: PCA, cross-validated ridge, metrics, noise ceiling
* :mod:`geovoxel.roistats`: ROI means, best layers, paired t-tests, difference maps
* :mod:`geovoxel.harness`: synthetic scenes/responses, containers, config, pipeline
"""

__version__ = "0.1.0"
