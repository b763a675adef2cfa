"""Talking-portrait generation on synthetic data: a variational audio-to-motion
generator, an adversarial domain-adaptation post-net, and a landmark-conditioned
neural renderer, all built on a small numpy autodiff engine."""

__version__ = "0.1.0"
