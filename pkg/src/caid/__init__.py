"""CPU-scale self-supervised pretraining with instance discrimination plus a
context-aware reconstruction branch, and the tools to analyse and transfer the
resulting encoders."""

__version__ = "0.1.0"
