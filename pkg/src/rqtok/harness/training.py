"""Encoder and tokenizer training phases, their interleaving, and joint training.

Optimization is plain gradient descent with a fixed step size.  All
randomness comes from generators derived from ``(seed, purpose, index)``
so a report is reproducible from its config alone.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..codebook_training import BatchAssignment, EmaState, ema_step, fit_rq_init, reset_unused
from ..config import RunConfig
from ..losses import codebook_loss, cosine_alignment_loss, masked_cross_entropy
from ..metrics import metrics_report, usage_histogram
from ..quantizer import ResidualQuantizer, quantize
from .data import SyntheticDataset, SyntheticDatasetSpec, gen_synthetic, sample_masks
from .models import ToyDecoder, ToyEncoder, ToyEstimator, ToyTokenizerEncoder, normalize_backward

log = logging.getLogger(__name__)

# purpose tags for derived generators
_DATA, _TOKENIZER, _MASKS, _ENCODER, _DECODER, _EVAL, _SHUFFLE, _RESET = range(8)


class DivergenceError(FloatingPointError):
    pass


def _rng(cfg: RunConfig, *tags) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, *tags])


def _check_finite(value: float, where: str):
    if not np.isfinite(value):
        raise DivergenceError(f"non-finite loss in {where}")


@dataclass
class PhaseSchedule:
    iterations: int = 2
    encoder_epochs: int = 30
    tokenizer_epochs: int = 10
    mask_ratio: float = 0.8
    encoder_lr: float = 0.5
    tokenizer_lr: float = 0.1
    batch_size: int = 16
    joint_mode: bool = False
    tokenizer_update_every: Optional[int] = 5
    alpha: float = 0.5

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not 0 < self.mask_ratio < 1:
            raise ValueError("mask_ratio must lie in (0, 1)")

    @classmethod
    def from_config(cls, cfg: RunConfig) -> "PhaseSchedule":
        return cls(cfg.iterations, cfg.encoder_epochs, cfg.tokenizer_epochs, cfg.mask_ratio,
                   cfg.encoder_lr, cfg.tokenizer_lr, cfg.batch_size, cfg.joint_mode,
                   cfg.tokenizer_update_every, cfg.alpha)


def dataset_for(cfg: RunConfig) -> tuple:
    """Training and evaluation splits drawn from one generative model."""
    spec = SyntheticDatasetSpec(
        n_samples=cfg.n_samples + cfg.eval_samples, T=cfg.seq_len, F=cfg.feature_dim,
        n_coarse=cfg.n_coarse, n_fine=cfg.n_fine, coarse_scale=cfg.coarse_scale,
        fine_scale=cfg.fine_scale, noise=cfg.noise, seed=cfg.seed,
    )
    full = gen_synthetic(spec)
    return full.subset(slice(0, cfg.n_samples)), full.subset(slice(cfg.n_samples, None))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield order[start:start + batch_size]


# ---------------------------------------------------------------------------
# tokenizer bundle


class Tokenizer:
    """Tokenizer encoder, residual quantizer with EMA state, and estimator."""

    def __init__(self, projection: ToyTokenizerEncoder, rq: ResidualQuantizer,
                 ema: list, estimator: ToyEstimator, prior_count: float = 0.0):
        self.projection = projection
        self.rq = rq
        self.ema = ema
        self.estimator = estimator
        self.prior_count = prior_count

    @classmethod
    def fresh(cls, cfg: RunConfig, first_batch, seed_tags: tuple, cold_start: bool) -> "Tokenizer":
        rng = _rng(cfg, _TOKENIZER, *seed_tags)
        projection = ToyTokenizerEncoder(cfg.feature_dim, cfg.dim, rng, cold_start=cold_start)
        estimator = ToyEstimator(cfg.dim, rng)
        u = projection.forward(first_batch).reshape(-1, cfg.dim)
        init_seed = int(rng.integers(2 ** 63))
        rq = fit_rq_init(u, cfg.sizes, cfg.init_mode, init_seed, cfg.normalization, cfg.kmeans_steps)
        rq.soft_k = cfg.soft_k
        # warm start: each code begins as if it had its fair share of one batch
        prior = u.shape[0] / cfg.codebook_size
        ema = [EmaState.initial(cb, cfg.gamma, cfg.epsilon, prior_count=prior) for cb in rq.stages]
        return cls(projection, rq, ema, estimator, prior)

    def latents(self, x) -> np.ndarray:
        return self.projection.forward(x)

    def quantize(self, x) -> tuple:
        u = self.latents(x)
        B, T, D = u.shape
        return u, quantize(u.reshape(-1, D), self.rq)

    def encode(self, x) -> np.ndarray:
        x = np.asarray(x)
        _, res = self.quantize(x)
        return res.tokens.reshape(x.shape[0], x.shape[1], -1)

    def ema_update(self, res):
        for m, cb in enumerate(self.rq.stages):
            batch = BatchAssignment(res.residuals[m], res.tokens[:, m])
            self.ema[m], self.rq.stages[m] = ema_step(self.ema[m], cb, batch)

    def reset_unused(self, res, threshold: float, seed) -> list:
        """Reset under-used codes from this batch's stage inputs; returns per-stage masks."""
        masks = []
        seeds = np.random.SeedSequence(seed).spawn(self.rq.num_stages)
        for m, stats in enumerate(usage_histogram(res.tokens, self.rq.sizes)):
            cb, mask, st = reset_unused(self.rq.stages[m], stats.counts, res.residuals[m],
                                        threshold, seeds[m], self.ema[m], self.prior_count)
            self.rq.stages[m], self.ema[m] = cb, st
            masks.append(mask)
        return masks

    def to_bytes(self) -> bytes:
        parts = [self.projection.to_bytes(), self.estimator.to_bytes()]
        for cb, st in zip(self.rq.stages, self.ema):
            parts += [cb.vectors.tobytes(), st.counts.tobytes(), st.embed_sum.tobytes()]
        return b"".join(parts)


def tokenizer_objective(tok: Tokenizer, x, z_teacher, beta: float, lambda_cos: float) -> dict:
    """Forward and backward of the tokenizer loss on one batch.

    The codebook term's gradient w.r.t. the codes is dropped: codes only
    move through EMA.  The estimator gradient reaches the projection via the
    straight-through estimator.
    """
    u, res = tok.quantize(x)
    B, T, D = u.shape
    u_hat = res.residuals[0].reshape(B, T, D)
    q = res.quantized.reshape(B, T, D)
    cb, d_uhat, _ = codebook_loss(u_hat, q, beta)
    est = tok.estimator.forward(q)
    cos = 0.0
    d_est = np.empty_like(est)
    for b in range(B):
        l, d_est[b], _ = cosine_alignment_loss(est[b], z_teacher[b])
        cos += l
    cos /= B
    g_est, dq = tok.estimator.backward(lambda_cos * d_est / B)
    d_uhat = d_uhat + dq
    du = d_uhat if tok.rq.normalization == "none" else normalize_backward(u, u_hat, d_uhat)
    g_proj, _ = tok.projection.backward(du)
    return {"cb_loss": cb, "cos_loss": cos, "result": res, "grad_projection": g_proj,
            "grad_estimator": g_est}


# ---------------------------------------------------------------------------
# phases


def encoder_step(enc: ToyEncoder, dec: ToyDecoder, x, tokens, mask, lr: float) -> float:
    z = enc.forward(x, mask)
    ce = masked_cross_entropy(tokens, mask, dec.probs(z))
    _check_finite(ce.loss, "encoder phase")
    g_dec, dz = dec.backward(ce.grad_logits)
    g_enc = enc.backward(dz)
    dec.apply_grads(g_dec, lr)
    enc.apply_grads(g_enc, lr)
    return ce.loss


def train_encoder_phase(data: SyntheticDataset, tok: Tokenizer, enc: ToyEncoder, dec: ToyDecoder,
                        sched: PhaseSchedule, rng: np.random.Generator) -> list:
    """Masked token prediction against a frozen tokenizer; returns per-epoch logs."""
    frozen = tok.to_bytes()
    logs = []
    for epoch in range(sched.encoder_epochs):
        losses = []
        for idx in _batches(len(data), sched.batch_size, rng):
            x = data.x[idx]
            tokens = tok.encode(x)
            mask = sample_masks(len(idx), x.shape[1], sched.mask_ratio, rng)
            losses.append(encoder_step(enc, dec, x, tokens, mask, sched.encoder_lr))
        logs.append({"epoch": epoch, "encoder_loss": float(np.mean(losses))})
    if tok.to_bytes() != frozen:
        raise AssertionError("tokenizer changed during an encoder phase")
    return logs


def train_tokenizer_phase(data: SyntheticDataset, enc: ToyEncoder, tok: Tokenizer, cfg: RunConfig,
                          sched: PhaseSchedule, rng: np.random.Generator, reset_seed=None) -> list:
    """Fit the tokenizer to the frozen encoder's unmasked embeddings; returns per-epoch logs."""
    frozen = enc.to_bytes()
    logs = []
    first = True
    for epoch in range(sched.tokenizer_epochs):
        cbs, coss = [], []
        for idx in _batches(len(data), sched.batch_size, rng):
            x = data.x[idx]
            z_teacher = enc.forward(x)
            if first:
                _, res = tok.quantize(x)
                masks = tok.reset_unused(res, cfg.reset_threshold, reset_seed)
                logs.append({"reset_codes": [int(m.sum()) for m in masks]})
                first = False
            out = tokenizer_objective(tok, x, z_teacher, cfg.beta, cfg.lambda_cos)
            _check_finite(out["cb_loss"] + out["cos_loss"], "tokenizer phase")
            tok.ema_update(out["result"])
            tok.projection.apply_grads(out["grad_projection"], sched.tokenizer_lr)
            tok.estimator.apply_grads(out["grad_estimator"], sched.tokenizer_lr)
            cbs.append(out["cb_loss"])
            coss.append(out["cos_loss"])
        logs.append({"epoch": epoch, "cb_loss": float(np.mean(cbs)), "cos_loss": float(np.mean(coss)),
                     "tokenizer_loss": float(np.mean(cbs) + cfg.lambda_cos * np.mean(coss))})
    if enc.to_bytes() != frozen:
        raise AssertionError("encoder changed during a tokenizer phase")
    return logs


def evaluate(enc: ToyEncoder, dec: ToyDecoder, tok: Tokenizer, data: SyntheticDataset,
             mask_ratio: float, seed) -> dict:
    """Masked-token accuracy, quantization MSE and code usage on held-out data."""
    x = data.x
    u, res = tok.quantize(x)
    tokens = res.tokens.reshape(x.shape[0], x.shape[1], -1)
    mask = sample_masks(x.shape[0], x.shape[1], mask_ratio, np.random.default_rng(seed))
    pred = [p.argmax(axis=-1) for p in dec.probs(enc.forward(x, mask))]
    acc = [float((pred[m][mask] == tokens[..., m][mask]).mean()) for m in range(len(pred))]
    err = res.residuals[0] - res.quantized
    return {
        "token_accuracy": float(np.mean(acc)),
        "stage_accuracy": acc,
        "chance": float(np.mean([1.0 / K for K in tok.rq.sizes])),
        "quantization_mse": float((err * err).sum(axis=1).mean()),
        "codebook_metrics": metrics_report(res.tokens, tok.rq.sizes),
    }


# ---------------------------------------------------------------------------
# protocols


def _config_echo(cfg: RunConfig) -> dict:
    return {"config": cfg.to_dict(), "seed": cfg.seed}


def interleave(cfg: RunConfig, data: Optional[SyntheticDataset] = None,
               eval_data: Optional[SyntheticDataset] = None, keep_models: bool = False) -> dict:
    """Alternate encoder and tokenizer phases: ``E`` then ``(T, E)`` per later iteration."""
    sched = PhaseSchedule.from_config(cfg)
    if data is None:
        data, eval_data = dataset_for(cfg)
    first_batch = data.x[: sched.batch_size]
    tok = Tokenizer.fresh(cfg, first_batch, (0,), cold_start=True)
    enc = ToyEncoder(cfg.feature_dim, cfg.dim, _rng(cfg, _ENCODER))
    phases = []
    for it in range(1, sched.iterations + 1):
        if it > 1:
            tok = Tokenizer.fresh(cfg, first_batch, (it,), cold_start=False)
            logs = train_tokenizer_phase(data, enc, tok, cfg, sched, _rng(cfg, _SHUFFLE, it, 1),
                                         reset_seed=[cfg.seed, _RESET, it])
            phases.append({"kind": "tokenizer", "iteration": it, "log": logs})
            log.info("iteration %d tokenizer phase done: %s", it, logs[-1] if logs else None)
        dec = ToyDecoder(cfg.dim, cfg.sizes, _rng(cfg, _DECODER, it))
        logs = train_encoder_phase(data, tok, enc, dec, sched, _rng(cfg, _SHUFFLE, it, 0))
        ev = evaluate(enc, dec, tok, eval_data, sched.mask_ratio, [cfg.seed, _EVAL])
        phases.append({"kind": "encoder", "iteration": it, "log": logs, "evaluation": ev})
        log.info("iteration %d encoder phase: accuracy %.4f", it, ev["token_accuracy"])
    report = {"mode": "interleave", **_config_echo(cfg), "phases": phases,
              "phase_sequence": [p["kind"][0].upper() for p in phases],
              "final_accuracy": phases[-1]["evaluation"]["token_accuracy"]}
    if keep_models:
        report["_models"] = {"encoder": enc, "decoder": dec, "tokenizer": tok}
    return report


def joint_train(cfg: RunConfig, data: Optional[SyntheticDataset] = None,
                eval_data: Optional[SyntheticDataset] = None, keep_models: bool = False) -> dict:
    """Encoder and tokenizer trained together on ``L_enc + alpha * L_tok``.

    Each iteration runs ``encoder_epochs`` epochs of simultaneous updates;
    iterations after the first start from a fresh tokenizer and decoder, as
    in :func:`interleave`.  The tokenizer (projection, estimator and EMA
    codebooks) only moves every ``tokenizer_update_every`` steps, and
    ``None`` freezes it for good.  The encoder embeddings act as a fixed
    teacher for the tokenizer loss, so ``alpha`` only scales tokenizer
    updates.
    """
    sched = PhaseSchedule.from_config(cfg)
    if data is None:
        data, eval_data = dataset_for(cfg)
    every = sched.tokenizer_update_every
    first_batch = data.x[: sched.batch_size]
    enc = ToyEncoder(cfg.feature_dim, cfg.dim, _rng(cfg, _ENCODER))
    phases = []
    for it in range(1, sched.iterations + 1):
        tok = Tokenizer.fresh(cfg, first_batch, (it - 1,), cold_start=every is None)
        dec = ToyDecoder(cfg.dim, cfg.sizes, _rng(cfg, _DECODER, it))
        rng = _rng(cfg, _SHUFFLE, it, 2)
        step = 0
        reset_done = False
        logs = []
        for epoch in range(sched.encoder_epochs):
            enc_losses, tok_losses = [], []
            for idx in _batches(len(data), sched.batch_size, rng):
                x = data.x[idx]
                if every is not None and step % every == 0:
                    z_teacher = enc.forward(x)
                    if not reset_done:
                        _, res = tok.quantize(x)
                        tok.reset_unused(res, cfg.reset_threshold, [cfg.seed, _RESET, it])
                        reset_done = True
                    out = tokenizer_objective(tok, x, z_teacher, cfg.beta, cfg.lambda_cos)
                    tl = out["cb_loss"] + cfg.lambda_cos * out["cos_loss"]
                    _check_finite(tl, "joint training")
                    tok.ema_update(out["result"])
                    lr = sched.tokenizer_lr * sched.alpha
                    tok.projection.apply_grads(out["grad_projection"], lr)
                    tok.estimator.apply_grads(out["grad_estimator"], lr)
                    tok_losses.append(tl)
                tokens = tok.encode(x)
                mask = sample_masks(len(idx), x.shape[1], sched.mask_ratio, rng)
                enc_losses.append(encoder_step(enc, dec, x, tokens, mask, sched.encoder_lr))
                step += 1
            entry = {"epoch": epoch, "encoder_loss": float(np.mean(enc_losses))}
            if tok_losses:
                entry["tokenizer_loss"] = float(np.mean(tok_losses))
                entry["joint_loss"] = entry["encoder_loss"] + sched.alpha * entry["tokenizer_loss"]
            logs.append(entry)
        ev = evaluate(enc, dec, tok, eval_data, sched.mask_ratio, [cfg.seed, _EVAL])
        phases.append({"kind": "joint", "iteration": it, "log": logs, "evaluation": ev})
        log.info("iteration %d joint phase: accuracy %.4f", it, ev["token_accuracy"])
    report = {"mode": "joint", **_config_echo(cfg), "phases": phases,
              "phase_sequence": ["J"] * len(phases),
              "final_accuracy": phases[-1]["evaluation"]["token_accuracy"]}
    if keep_models:
        report["_models"] = {"encoder": enc, "decoder": dec, "tokenizer": tok}
    return report


def run(cfg: RunConfig, **kwargs) -> dict:
    return joint_train(cfg, **kwargs) if cfg.joint_mode else interleave(cfg, **kwargs)
