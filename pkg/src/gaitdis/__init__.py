"""Disentangling affect from identity in gait motion capture.

Modules: :mod:`autodiff` (arrays with reverse-mode gradients), :mod:`mocap`
(CSV/manifest I/O and the synthetic generator), :mod:`preprocessing`
(cycle segmentation and normalization), :mod:`model` (encoders/decoder),
:mod:`training` (losses, sampler, training loop), :mod:`classifiers`
(baselines, folds, metrics), :mod:`explain` (Guided Grad-CAM) and
:mod:`cli`.
"""

__version__ = "0.1.0"

import os as _os

# Cap BLAS threads when the user limits worker threads; effective as long as
# numpy has not been imported before this package.
if "GAITDIS_THREADS" in _os.environ:
    for _var in ("OPENBLAS_NUM_THREADS", "OMP_NUM_THREADS", "MKL_NUM_THREADS"):
        _os.environ.setdefault(_var, _os.environ["GAITDIS_THREADS"])
