"""Behavior-score-embedded 3D convolutional autoencoder pipeline for rs-fMRI.

Subpackages and modules:

- ``volume_io``: volume/manifest/atlas loading and preprocessing
- ``nn``: small numpy autodiff core (conv3d, pooling, batchnorm, Adam)
- ``model``: encoder-decoder, losses, center bank, two-stage training
- ``features``: bottleneck pooling plus PCA/ICA baselines
- ``classify``: linear SVM, Platt calibration, fusion, cross-validation
- ``roi``: ROI statistics on decoder reconstructions
- ``synth``: synthetic cohorts with planted effects
"""

__version__ = "0.1.0"
