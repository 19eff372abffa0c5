"""Desk-scale training harness built on toy affine models."""
