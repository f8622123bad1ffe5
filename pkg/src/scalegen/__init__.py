"""scalegen: train and evaluate a coordinate- and scale-conditioned patch generator
on variable-resolution image collections.

Submodules:
    geometry   continuous coordinate domain, patch transforms, Fourier embedding
    resample   Lanczos resampling, crops, patch-to-base warping
    datapipe   dataset ingestion, patch sampling policy, procedural test corpora
    netcore    generator / discriminator networks, tiled synthesis, checkpoints
    train      losses and the two-phase training loops
    metrics    Frechet statistics, patch-FID, extrapolation sweeps, spectra
    cli        command-line entry points
"""

__version__ = "0.1.0"
