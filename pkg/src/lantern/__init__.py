"""Late-fusion prediction of adaptive-survey responses.

Modules:
    autodiff    tape-based reverse-mode differentiation over numpy arrays
    synth       synthetic survey populations and the dataset file format
    model       encoders, cross-attention, gated fusion, masked loss
    training    Adam, the training loop, ablation variants, checkpoints
    evaluation  masked metrics, threshold sweeps, segments, gate histograms
    cli         the ``lantern`` command
"""

__version__ = "0.1.0"
