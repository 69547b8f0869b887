"""Multi-view consistent style transfer with a one-step, vision-conditioned
generator adapted by LoRA."""

__version__ = "0.1.0"
