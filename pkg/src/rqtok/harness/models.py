"""Tiny affine models with hand-written backward passes.

Shapes follow ``(B, T, F)`` for features and ``(B, T, D)`` for latents.
Every model keeps its parameters in ``self.params`` (a dict of arrays) and
``backward`` returns a dict with the same keys.
"""
from __future__ import annotations

import numpy as np

from ..losses import softmax


class _Model:
    params: dict

    def to_bytes(self) -> bytes:
        return b"".join(self.params[k].tobytes() for k in sorted(self.params))

    def apply_grads(self, grads: dict, lr: float):
        if lr == 0:
            return
        for k, g in grads.items():
            self.params[k] -= lr * g

    def copy(self):
        new = object.__new__(type(self))
        new.__dict__.update(self.__dict__)
        new.params = {k: v.copy() for k, v in self.params.items()}
        return new


class ToyEncoder(_Model):
    """Context-mixing affine encoder.

    ``z_t = W_local x~_t + W_ctx mean_s(x~_s) + b`` where ``x~`` swaps masked
    frames for a learned mask vector.
    """

    def __init__(self, F: int, D: int, rng: np.random.Generator, scale: float = 0.1):
        self.params = {
            "W_local": rng.normal(0.0, scale, (D, F)),
            "W_ctx": rng.normal(0.0, scale, (D, F)),
            "bias": np.zeros(D),
            "mask_vector": np.zeros(F),
        }

    def forward(self, x, mask=None):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 3 or x.shape[2] != self.params["W_local"].shape[1]:
            raise ValueError(f"encoder expects (B, T, {self.params['W_local'].shape[1]}) input, got {x.shape}")
        if mask is None:
            mask = np.zeros(x.shape[:2], dtype=bool)
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != x.shape[:2]:
            raise ValueError(f"mask shape {mask.shape} does not match input {x.shape[:2]}")
        p = self.params
        xt = np.where(mask[..., None], p["mask_vector"], x)
        xbar = xt.mean(axis=1)
        z = xt @ p["W_local"].T + (xbar @ p["W_ctx"].T)[:, None, :] + p["bias"]
        self._cache = (xt, xbar, mask)
        return z

    def backward(self, dz) -> dict:
        xt, xbar, mask = self._cache
        p = self.params
        T = xt.shape[1]
        sdz = dz.sum(axis=1)
        dxt = dz @ p["W_local"] + (sdz @ p["W_ctx"])[:, None, :] / T
        return {
            "W_local": np.einsum("btd,btf->df", dz, xt),
            "W_ctx": sdz.T @ xbar,
            "bias": dz.sum(axis=(0, 1)),
            "mask_vector": (dxt * mask[..., None]).sum(axis=(0, 1)),
        }


class ToyDecoder(_Model):
    """One affine classifier head per quantizer stage."""

    def __init__(self, D: int, sizes, rng: np.random.Generator, scale: float = 0.1):
        self.sizes = list(sizes)
        self.params = {}
        for m, K in enumerate(self.sizes):
            self.params[f"W{m}"] = rng.normal(0.0, scale, (K, D))
            self.params[f"b{m}"] = np.zeros(K)

    def logits(self, z) -> list:
        self._z = z
        return [z @ self.params[f"W{m}"].T + self.params[f"b{m}"] for m in range(len(self.sizes))]

    def probs(self, z) -> list:
        return [softmax(l) for l in self.logits(z)]

    def backward(self, dlogits) -> tuple:
        """Returns ``(param_grads, dz)``."""
        z = self._z
        grads = {}
        dz = np.zeros_like(z)
        for m, g in enumerate(dlogits):
            W = self.params[f"W{m}"]
            grads[f"W{m}"] = np.einsum("btk,btd->kd", g, z)
            grads[f"b{m}"] = g.sum(axis=(0, 1))
            dz += g @ W
        return grads, dz


class Affine(_Model):
    """``y = x W^T + b`` on the last axis."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, scale=None,
                 frozen: bool = False):
        scale = 1.0 / np.sqrt(n_in) if scale is None else scale
        self.params = {"W": rng.normal(0.0, scale, (n_out, n_in)), "b": np.zeros(n_out)}
        self.frozen = frozen

    def forward(self, x):
        self._x = np.asarray(x, dtype=np.float64)
        return self._x @ self.params["W"].T + self.params["b"]

    def backward(self, dy) -> tuple:
        """Returns ``(param_grads, dx)``."""
        x = self._x
        xf = x.reshape(-1, x.shape[-1])
        df = dy.reshape(-1, dy.shape[-1])
        grads = {"W": df.T @ xf, "b": df.sum(axis=0)}
        return grads, dy @ self.params["W"]

    def apply_grads(self, grads: dict, lr: float):
        if not self.frozen:
            super().apply_grads(grads, lr)


class ToyTokenizerEncoder(Affine):
    """Affine feature-to-latent map; frozen when used as the cold-start tokenizer."""

    def __init__(self, F: int, D: int, rng: np.random.Generator, cold_start: bool = False):
        super().__init__(F, D, rng, frozen=cold_start)

    @property
    def cold_start(self) -> bool:
        return self.frozen


class ToyEstimator(Affine):
    """Affine map from quantized vectors back to encoder embeddings."""

    def __init__(self, D: int, rng: np.random.Generator):
        super().__init__(D, D, rng)


def normalize_backward(u: np.ndarray, u_hat: np.ndarray, g: np.ndarray, floor: float = 1e-12) -> np.ndarray:
    """Gradient through ``u -> u / |u|`` given the normalized output ``u_hat``."""
    norms = np.maximum(np.linalg.norm(u, axis=-1, keepdims=True), floor)
    return (g - u_hat * (u_hat * g).sum(axis=-1, keepdims=True)) / norms
