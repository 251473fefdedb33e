"""Safety-steered GRPO fine-tuning of a toy diffusion sampler."""

__version__ = "0.1.0"
