"""Residual quantization toolkit with an interleaved tokenizer/encoder training harness."""

__version__ = "0.1.0"
