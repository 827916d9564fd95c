"""flowlab: frequency-aware flow-matching surrogates for 2D periodic flows.

Library layout (one module per subsystem):

- fields        field containers, radial spectra, metrics, FieldPack format
- biaslab       closed-form and Monte-Carlo spectral-bias diagnostics
- tape          reverse-mode autodiff over numpy arrays
- interpolants  noising schedules, training losses, ODE/SDE samplers
- attention     salient flow attention (split differential attention + kNN
                mean-centered background attention)
- fouriermix    frequency-guided Fourier token mixing (block-diagonal
                spectral filters, frequency weighting, soft-thresholding)
- backbone      the dual-branch velocity network and its checkpoint store
- mae           masked-autoencoder pretraining and representation alignment
- shearflow     pseudo-spectral incompressible shear-flow data generator
- training      experiment orchestration (train / sample / rollout / reports)
- cli           command-line interface over all of the above
"""

__version__ = "0.1.0"
