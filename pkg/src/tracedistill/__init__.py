"""tracedistill: seed-to-training-set distillation and a three-agent
inference cascade for structured reasoning traces."""

__version__ = "0.1.0"
