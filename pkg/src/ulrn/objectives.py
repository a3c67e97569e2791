"""Losses and parameter updates for gradient-ascent unlearning.

Losses are summed over response tokens (per record) and divided by the
number of records in the batch, never by token count.

    L(x, y)  = sum_i CE(P(. | x, y<i), y_i)
    L_fgt    = -mean_batch L(x_fgt, y_fgt)
    L_rdn    =  mean_batch mean_k L(x_fgt, y_rdn_k)
    L_nor    =  mean_batch sum_i KL(P_ref(. | x, y<i) || P_cur(. | x, y<i))

    theta <- theta - lr * update(eps1 * dL_fgt + eps2 * dL_rdn + eps3 * dL_nor)
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import asdict, dataclass, replace
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import PAD, PromptPair, RandomPool
from .errors import ConfigError, ContextOverflowError, ContractError, NumericError
from .model import FrozenReference, ModelParams, forward
from .tensor import Tensor


@dataclass(frozen=True)
class LossWeights:
    eps1: float = 0.5
    eps2: float = 1.0
    eps3: float = 1.0
    lr: float = 2e-4
    # -1 reproduces the negated forget loss as printed; +1 turns it into plain descent.
    forget_sign: float = -1.0

    def __post_init__(self):
        problems = [f"{k} must be >= 0" for k in ("eps1", "eps2", "eps3") if getattr(self, k) < 0]
        if not self.lr > 0:
            problems.append("lr must be > 0")
        if self.forget_sign not in (-1.0, 1.0):
            problems.append("forget_sign must be -1 or +1")
        if problems:
            raise ConfigError(problems)

    def scaled(self, factor: float) -> "LossWeights":
        return replace(self, eps1=self.eps1 * factor, eps2=self.eps2 * factor, eps3=self.eps3 * factor)


@dataclass
class LossBreakdown:
    l_fgt: float
    l_rdn: float
    l_nor: float
    total: float
    forget_per_token: float
    step: int = 0
    grad_norm: float = 0.0
    eps1: float = 0.0

    def to_record(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# Sequence cross-entropy
# ---------------------------------------------------------------------------


def _pack(pairs: Sequence[tuple[Sequence[int], Sequence[int]]], context_len: int):
    """Right-padded model inputs, next-token targets and a mask over response positions."""
    lengths = []
    for x, y in pairs:
        if not len(x) or not len(y):
            raise ContractError("prompt and response must be non-empty")
        if len(x) + len(y) > context_len:
            raise ContextOverflowError(f"record of {len(x) + len(y)} tokens exceeds context_len {context_len}")
        lengths.append(len(x) + len(y) - 1)
    B, L = len(pairs), max(lengths)
    inputs = np.full((B, L), PAD, dtype=np.int64)
    targets = np.zeros((B, L), dtype=np.int64)
    mask = np.zeros((B, L), dtype=bool)
    for b, (x, y) in enumerate(pairs):
        full = list(x) + list(y)
        n = len(full) - 1
        inputs[b, :n] = full[:-1]
        targets[b, :n] = full[1:]
        mask[b, len(x) - 1:n] = True
    return inputs, targets, mask


def sequence_losses(params: ModelParams, pairs, adapters=None) -> tuple[Tensor, int]:
    """Per-record summed cross-entropy ``[B]`` and the total number of scored tokens."""
    pairs = [(p.x, p.y) if isinstance(p, PromptPair) else p for p in pairs]
    if not pairs:
        raise ContractError("batch must be non-empty")
    inputs, targets, mask = _pack(pairs, params.config.context_len)
    logp = T.log_softmax(forward(params, inputs, adapters))
    picked = T.gather_last(logp, targets)
    w = mask.astype(picked.dtype)
    return -T.sum(picked * w, axis=1), int(mask.sum())


def sequence_loss(params: ModelParams, x, y, adapters=None) -> Tensor:
    """Summed next-token cross-entropy of ``y`` given ``x``."""
    losses, _ = sequence_losses(params, [(x, y)], adapters)
    return T.reshape(losses, ())


def _batch_mean(per_record: Tensor) -> Tensor:
    return T.scale(T.sum(per_record), 1.0 / per_record.shape[0])


def forget_loss(params: ModelParams, batch, adapters=None, sign: float = -1.0) -> Tensor:
    losses, _ = sequence_losses(params, batch, adapters)
    return T.scale(_batch_mean(losses), sign)


def _fit_response(x, y, context_len: int):
    room = context_len - len(x)
    if room < 1:
        raise ContextOverflowError("forget prompt leaves no room for a response")
    return x, tuple(y[:room])


def random_mismatch_loss(
    params: ModelParams,
    forget_prompts,
    pool: RandomPool | None = None,
    rng: np.random.Generator | None = None,
    samples=None,
    adapters=None,
) -> Tensor:
    """Cross-entropy of pool responses given forget prompts.

    Each prompt is paired with ``pool.sample_size`` responses (or the explicit
    ``samples[i]`` list); losses are averaged over responses per prompt and
    then over prompts.
    """
    prompts = [p.x if isinstance(p, PromptPair) else tuple(p) for p in forget_prompts]
    if not prompts:
        raise ContractError("forget prompts must be non-empty")
    if samples is None:
        if pool is None:
            raise ContractError("need a pool or explicit samples")
        rng = rng if rng is not None else np.random.default_rng(0)
        samples = [pool.sample(rng) for _ in prompts]
    k = len(samples[0])
    if k < 1 or any(len(s) != k for s in samples):
        raise ContractError("every prompt needs the same, non-zero number of responses")
    C = params.config.context_len
    pairs = [_fit_response(x, y, C) for x, ys in zip(prompts, samples) for y in ys]
    losses, _ = sequence_losses(params, pairs, adapters)
    per_prompt = T.mean(T.reshape(losses, (len(prompts), k)), axis=1)
    return _batch_mean(per_prompt)


def kl_rows(ref_logits: np.ndarray, cur_logits: Tensor) -> Tensor:
    """``KL(softmax(ref) || softmax(cur))`` per row; gradient flows into ``cur`` only."""
    ref = np.asarray(ref_logits, dtype=np.float64)
    ref_logp = ref - ref.max(axis=-1, keepdims=True)
    ref_logp -= np.log(np.exp(ref_logp).sum(axis=-1, keepdims=True))
    dtype = cur_logits.dtype
    p_ref = T._leaf(np.exp(ref_logp).astype(dtype), False)
    logp_ref = T._leaf(ref_logp.astype(dtype), False)
    cur_logp = T.log_softmax(cur_logits)
    return T.sum(T.mul(p_ref, T.sub(logp_ref, cur_logp)), axis=-1)


def _bernoulli_kl(ref_logits: np.ndarray, cur_logits: Tensor, targets: np.ndarray) -> Tensor:
    ref = np.asarray(ref_logits, dtype=np.float64)
    ref = ref - ref.max(axis=-1, keepdims=True)
    ref_p = np.exp(ref) / np.exp(ref).sum(axis=-1, keepdims=True)
    q = np.clip(np.take_along_axis(ref_p, targets[..., None], axis=-1)[..., 0], 1e-7, 1 - 1e-7)
    dtype = cur_logits.dtype
    lp = T.gather_last(T.log_softmax(cur_logits), targets)
    log1m = T.log(T.add(T.scale(T.exp(lp), -1.0), 1.0 + 1e-7))
    const = q * np.log(q) + (1 - q) * np.log(1 - q)
    cross = T.add(T.mul(lp, T._leaf(q.astype(dtype), False)), T.mul(log1m, T._leaf((1 - q).astype(dtype), False)))
    return T.sub(T._leaf(const.astype(dtype), False), cross)


def normal_kl_loss(
    params: ModelParams,
    reference: FrozenReference,
    batch,
    adapters=None,
    mode: str = "full",
) -> Tensor:
    """Forward KL from the frozen reference to the current model on normal responses.

    ``mode="full"`` compares whole next-token distributions; ``mode="scalar"``
    compares only the probability of the observed token, as a Bernoulli pair.
    """
    pairs = [(p.x, p.y) if isinstance(p, PromptPair) else p for p in batch]
    if not pairs:
        raise ContractError("batch must be non-empty")
    inputs, targets, mask = _pack(pairs, params.config.context_len)
    ref_logits = reference.logits(inputs)
    cur_logits = forward(params, inputs, adapters)
    if mode == "full":
        per_pos = kl_rows(ref_logits, cur_logits)
    elif mode == "scalar":
        per_pos = _bernoulli_kl(ref_logits, cur_logits, targets)
    else:
        raise ContractError(f"unknown KL mode {mode!r}")
    per_record = T.sum(T.mul(per_pos, mask.astype(per_pos.dtype)), axis=1)
    return _batch_mean(per_record)


# ---------------------------------------------------------------------------
# Update rules
# ---------------------------------------------------------------------------


class PlainUpdate:
    """theta <- theta - lr * g"""

    kind = "plain"

    def __init__(self, lr: float):
        self.lr = float(lr)

    def step(self, params) -> None:
        for t in params.values():
            if t.grad is not None:
                t.data -= t.data.dtype.type(self.lr) * t.grad

    def state_dict(self) -> dict[str, np.ndarray]:
        return {}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        pass


class Adam:
    """Adaptive-moment update with bias correction."""

    kind = "adam"

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.beta1, self.beta2, self.eps = float(lr), beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for name, p in params.items():
            g = p.grad
            if g is None:
                continue
            m = self.m.get(name)
            if m is None:
                m = self.m[name] = np.zeros_like(p.data)
                self.v[name] = np.zeros_like(p.data)
            v = self.v[name]
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p.data -= (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {"opt.t": np.array([self.t], dtype=np.float32)}
        for name in self.m:
            out[f"opt.m.{name}"] = self.m[name]
            out[f"opt.v.{name}"] = self.v[name]
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state.get("opt.t", np.zeros(1))[0])
        self.m = {k[len("opt.m."):]: np.array(v) for k, v in state.items() if k.startswith("opt.m.")}
        self.v = {k[len("opt.v."):]: np.array(v) for k, v in state.items() if k.startswith("opt.v.")}


def make_optimizer(kind: str, lr: float):
    if kind == "plain":
        return PlainUpdate(lr)
    if kind == "adam":
        return Adam(lr)
    raise ConfigError(f"unknown optimizer {kind!r} (expected plain or adam)")


def global_grad_norm(params) -> float:
    total = 0.0
    for t in params.values():
        if t.grad is not None:
            total += float(np.sum(np.square(t.grad, dtype=np.float64)))
    return math.sqrt(total)


def clip_gradients(params, max_norm: float | None) -> float:
    """Rescale gradients in place to ``max_norm``; returns the norm before clipping."""
    norm = global_grad_norm(params)
    if not math.isfinite(norm):
        raise NumericError("non-finite gradient norm")
    if max_norm is not None and norm > max_norm:
        factor = max_norm / (norm + 1e-12)
        for t in params.values():
            if t.grad is not None:
                t.grad *= t.grad.dtype.type(factor)
    return norm


def ga_step(params: ModelParams, x, y, lr: float, adapters=None) -> ModelParams:
    """One plain gradient-ascent step on the cross-entropy of ``y`` given ``x`` (in place)."""
    if lr < 0:
        raise ContractError("learning rate must be non-negative")
    params.zero_grad()
    loss = sequence_loss(params, x, y, adapters)
    T.backward(loss)
    try:
        clip_gradients(params, None)
        for t in params.values():
            if t.grad is not None:
                t.data += t.data.dtype.type(lr) * t.grad
    finally:
        params.zero_grad()
    return params


def unlearn_step(
    params: ModelParams,
    reference: FrozenReference,
    forget_batch,
    normal_batch,
    pool: RandomPool,
    weights: LossWeights,
    optimizer=None,
    rng: np.random.Generator | None = None,
    clip_norm: float | None = 1.0,
    kl_mode: str = "full",
    step: int = 0,
) -> tuple[ModelParams, LossBreakdown]:
    """Compute the three losses, backpropagate their weighted sum once, update in place."""
    if not forget_batch or not normal_batch:
        raise ContractError("forget and normal batches must be non-empty")
    optimizer = optimizer or PlainUpdate(weights.lr)
    rng = rng if rng is not None else np.random.default_rng(step)
    eps = (weights.eps1, weights.eps2, weights.eps3)
    params.zero_grad()
    values = [float("nan")] * 3
    fpt = float("nan")
    terms = []
    try:
        with (T.no_grad if eps[0] == 0 else contextlib.nullcontext)():
            losses, ntok = sequence_losses(params, forget_batch)
            l_fgt = T.scale(_batch_mean(losses), weights.forget_sign)
        fpt = float(losses.data.sum()) / ntok
        values[0] = float(l_fgt.data)
        if eps[0]:
            terms.append(T.scale(l_fgt, eps[0]))

        with (T.no_grad if eps[1] == 0 else contextlib.nullcontext)():
            l_rdn = random_mismatch_loss(params, forget_batch, pool, rng)
        values[1] = float(l_rdn.data)
        if eps[1]:
            terms.append(T.scale(l_rdn, eps[1]))

        with (T.no_grad if eps[2] == 0 else contextlib.nullcontext)():
            l_nor = normal_kl_loss(params, reference, normal_batch, mode=kl_mode)
        values[2] = float(l_nor.data)
        if eps[2]:
            terms.append(T.scale(l_nor, eps[2]))
    except NumericError as exc:
        bd = LossBreakdown(*values, total=float("nan"), forget_per_token=fpt, step=step, eps1=eps[0])
        raise NumericError(f"step {step} rejected: {exc}", breakdown=bd) from exc

    total_value = eps[0] * values[0] + eps[1] * values[1] + eps[2] * values[2]
    bd = LossBreakdown(*values, total=total_value, forget_per_token=fpt, step=step, eps1=eps[0])
    if not all(math.isfinite(v) for v in values):
        raise NumericError(f"step {step} rejected: non-finite loss", breakdown=bd)
    if terms:
        total = terms[0]
        for t in terms[1:]:
            total = total + t
        try:
            T.backward(total)
            bd.grad_norm = clip_gradients(params, clip_norm)
        except NumericError as exc:
            params.zero_grad()
            raise NumericError(f"step {step} rejected: {exc}", breakdown=bd) from exc
        optimizer.step(params)
        params.zero_grad()
    return params, bd


def divergence_guard(weights: LossWeights, breakdown: LossBreakdown, vocab_size: int) -> LossWeights:
    """Zero the forget weight once the per-token forget loss passes 3 ln V."""
    if weights.eps1 and breakdown.forget_per_token > 3.0 * math.log(vocab_size):
        return replace(weights, eps1=0.0)
    return weights
