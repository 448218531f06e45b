"""Toy long-form audio-driven video diffusion: autodiff core, model, sampler, metrics and harness."""

__version__ = "0.1.0"
