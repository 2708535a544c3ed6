"""Flow-matching manipulation policies with adversarial and stochastic
robustness training, plus a self-contained 2D pick-and-place simulator
and a multi-modal perturbation evaluation harness."""

__version__ = "0.1.0"
