"""EMA convergence check and the equal-budget VQ/RQ comparison."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..codebook_training import (BatchAssignment, EmaBoundTracker, EmaState, closed_form_limit,
                                 ema_step_proof_form, init_uniform)
from ..config import RunConfig
from ..quantizer import Codebook
from .models import ToyDecoder, ToyEncoder
from .training import (_DECODER, _ENCODER, _EVAL, _RESET, _SHUFFLE, PhaseSchedule, Tokenizer, _batches,
                       _rng, dataset_for, evaluate, train_encoder_phase)


@dataclass
class ConvergenceReport:
    K: int
    D: int
    gamma: float
    eps: float
    steps: int
    batch_size: int
    max_count_deviation: float
    max_code_deviation: float
    rate_constant: float
    bound_checks: int
    limit_counts: list = field(default_factory=list)
    code_deviations: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def convergence_experiment(K: int = 4, D: int = 2, gamma: float = 0.99, eps: float = 1e-5,
                           steps: int = 5000, seed=0, batch_size: Optional[int] = None,
                           latents=None, codes=None, initial: Optional[Codebook] = None
                           ) -> ConvergenceReport:
    """Iterate the proof-form EMA on a constant stream and compare with its closed-form limit.

    By default the stream is ``batch_size = 4K`` Gaussian latents assigned
    round-robin to the codes, and the initial codebook is uniform.  The
    uniform bounds on ``|m_i|`` and ``N_i`` are asserted after every step;
    a violation raises :class:`BoundViolation`.  Deviations are measured at
    the last iterate (``steps = 0`` measures the initial state).
    """
    if steps < 0:
        raise ValueError("steps must be non-negative")
    rng = np.random.default_rng(seed)
    if latents is None:
        S = 4 * K if batch_size is None else batch_size
        latents = rng.normal(size=(S, D))
    latents = np.asarray(latents, dtype=np.float64)
    S = latents.shape[0]
    if codes is None:
        codes = np.arange(S) % K
    batch = BatchAssignment(latents, codes)
    cb = initial.copy() if initial is not None else init_uniform(K, D, rng)
    state = EmaState.initial(cb, gamma, eps)
    tracker = EmaBoundTracker(cb, S, gamma, eps, proof_form=True)

    n, ell = batch.statistics(K)
    limit = closed_form_limit(n, ell, gamma, eps)
    checks = 0
    rate = 0.0
    for t in range(1, steps + 1):
        tracker.observe(batch)
        state, cb = ema_step_proof_form(state, cb, batch)
        tracker.check(state)
        checks += 1
        dev = np.linalg.norm(cb.vectors - limit.c_inf, axis=1).max()
        # beyond ~1e-12 the deviation is rounding noise, not the geometric tail
        if dev > 1e-12:
            rate = max(rate, dev / gamma ** t)
    c_dev = np.linalg.norm(cb.vectors - limit.c_inf, axis=1)
    return ConvergenceReport(
        K=K, D=D, gamma=gamma, eps=eps, steps=steps, batch_size=S,
        max_count_deviation=float(np.abs(state.counts - limit.N_inf).max()),
        max_code_deviation=float(c_dev.max()),
        rate_constant=float(rate),
        bound_checks=checks,
        limit_counts=limit.N_inf.tolist(),
        code_deviations=c_dev.tolist(),
    )


def _fit_tokenizer(cfg: RunConfig, data, epochs: int) -> Tokenizer:
    """Cold-start projection with codebooks initialized on the first batch, then EMA-only passes."""
    sched = PhaseSchedule.from_config(cfg)
    tok = Tokenizer.fresh(cfg, data.x[: sched.batch_size], (0,), cold_start=True)
    rng = _rng(cfg, _SHUFFLE, 0, 1)
    first = True
    for _ in range(epochs):
        for idx in _batches(len(data), sched.batch_size, rng):
            _, res = tok.quantize(data.x[idx])
            if first:
                tok.reset_unused(res, cfg.reset_threshold, [cfg.seed, _RESET, 0])
                _, res = tok.quantize(data.x[idx])
                first = False
            tok.ema_update(res)
    return tok


def _arm(cfg: RunConfig, data, eval_data, fit_epochs: int, encoder_epochs: int) -> dict:
    tok = _fit_tokenizer(cfg, data, fit_epochs)
    enc = ToyEncoder(cfg.feature_dim, cfg.dim, _rng(cfg, _ENCODER))
    dec = ToyDecoder(cfg.dim, cfg.sizes, _rng(cfg, _DECODER, 1))
    if encoder_epochs:
        sched = PhaseSchedule.from_config(cfg.replace(encoder_epochs=encoder_epochs))
        train_encoder_phase(data, tok, enc, dec, sched, _rng(cfg, _SHUFFLE, 1, 0))
    ev = evaluate(enc, dec, tok, eval_data, cfg.mask_ratio, [cfg.seed, _EVAL])
    stages = ev["codebook_metrics"]["stages"]
    out = {
        "num_codebooks": cfg.num_codebooks,
        "codebook_size": cfg.codebook_size,
        "quantization_mse": ev["quantization_mse"],
        "cur": [s["cur"] for s in stages],
        "ue": [s["ue"] for s in stages],
        "ecu": [s["ecu"] for s in stages],
    }
    if encoder_epochs:
        out["token_accuracy"] = ev["token_accuracy"]
    return out


def vq_vs_rq_experiment(cfg: RunConfig, seeds: Sequence[int], rq_shape=(4, 16), vq_shape=(1, 64),
                        fit_epochs: Optional[int] = None, encoder_epochs: int = 0) -> dict:
    """Fit a VQ and an RQ tokenizer with the same total number of codes on identical data.

    Both arms share the data, the cold-start projection and the seeds.
    ``encoder_epochs > 0`` additionally trains an encoder against each
    tokenizer and reports masked-token accuracy.
    """
    (m_rq, k_rq), (m_vq, k_vq) = rq_shape, vq_shape
    if m_rq * k_rq != m_vq * k_vq:
        raise ValueError(f"code budgets differ: {m_rq}x{k_rq} vs {m_vq}x{k_vq}")
    fit_epochs = cfg.tokenizer_epochs if fit_epochs is None else fit_epochs
    runs = []
    for s in seeds:
        base = cfg.replace(seed=int(s))
        data, eval_data = dataset_for(base)
        rq = _arm(base.replace(num_codebooks=m_rq, codebook_size=k_rq), data, eval_data,
                  fit_epochs, encoder_epochs)
        vq = _arm(base.replace(num_codebooks=m_vq, codebook_size=k_vq), data, eval_data,
                  fit_epochs, encoder_epochs)
        runs.append({
            "seed": int(s), "rq": rq, "vq": vq,
            "rq_lower_mse": rq["quantization_mse"] < vq["quantization_mse"],
            "rq_cur_at_least_vq": min(rq["cur"]) >= vq["cur"][0],
        })
    return {
        "mode": "compare-vq-rq",
        "config": cfg.to_dict(),
        "rq_shape": list(rq_shape),
        "vq_shape": list(vq_shape),
        "fit_epochs": fit_epochs,
        "encoder_epochs": encoder_epochs,
        "runs": runs,
        "rq_lower_mse_count": sum(r["rq_lower_mse"] for r in runs),
        "rq_cur_at_least_vq_count": sum(r["rq_cur_at_least_vq"] for r in runs),
    }
