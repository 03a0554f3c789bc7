"""Multi-teacher knowledge distillation for small transformer encoders."""

__version__ = "0.1.0"
