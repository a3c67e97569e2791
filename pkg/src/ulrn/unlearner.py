"""Training pipelines: pretrain, LoRA finetune, and the unlearning loop.

Every pipeline writes into ``out_dir``::

    checkpoints/step_000100.ulrn ...   periodic, resumable
    checkpoints/final.ulrn             tagged pretrained / finetuned / unlearned
    metrics.jsonl                      one record per optimizer step

Batches are a pure function of ``(seed, step)`` and the per-step sampling RNG
is derived from the same pair, so resuming from a checkpoint replays the
exact same sequence of updates.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

import numpy as np

from . import checkpoint as ckpt
from . import tensor as T
from .data import ForgetSet, NormalSet, batch_at, build_random_pool, load_pairs
from .errors import ConfigError, DivergenceError, NumericError, UlrnError
from .model import (
    DEFAULT_LORA_TARGETS,
    FrozenReference,
    ModelConfig,
    ModelParams,
    adapter_tensors,
    init_lora,
    init_params,
    merge_lora,
)
from .objectives import (
    LossWeights,
    clip_gradients,
    divergence_guard,
    make_optimizer,
    sequence_losses,
    unlearn_step,
)

log = logging.getLogger(__name__)

PIPELINES = ("pretrain", "finetune", "unlearn")


@dataclass
class RunConfig:
    pipeline: str = "unlearn"
    iterations: int = 1000
    batch_size: int = 2
    weights: LossWeights = field(default_factory=LossWeights)
    # descent pipelines (pretrain / finetune)
    optimizer: str = "adam"
    lr: float = 1e-3
    # unlearning
    unlearn_optimizer: str = "plain"
    clip_norm: float | None = 1.0
    divergence_guard: bool = True
    kl_mode: str = "full"
    rdn_k: int = 4
    pool_size: int | None = None
    # LoRA
    lora_rank: int = 4
    lora_alpha: float = 8.0
    lora_targets: tuple[str, ...] = DEFAULT_LORA_TARGETS
    # bookkeeping
    checkpoint_every: int = 100
    log_every: int = 100
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    data_format: str = "jsonl"
    corpus: tuple[str, ...] = ()
    forget: str | None = None
    normal: str | None = None
    base_checkpoint: str | None = None
    reference_checkpoint: str | None = None
    resume: str | None = None
    out_dir: str = "runs/default"

    def validate(self) -> "RunConfig":
        problems = []
        if self.pipeline not in PIPELINES:
            problems.append(f"pipeline must be one of {PIPELINES}")
        if self.iterations < 1:
            problems.append("iterations must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.checkpoint_every < 1:
            problems.append("checkpoint_every must be >= 1")
        if self.lr <= 0:
            problems.append("lr must be > 0")
        for key in ("optimizer", "unlearn_optimizer"):
            if getattr(self, key) not in ("plain", "adam"):
                problems.append(f"{key} must be plain or adam")
        if self.kl_mode not in ("full", "scalar"):
            problems.append("kl_mode must be full or scalar")
        if self.rdn_k < 1:
            problems.append("rdn_k must be >= 1")
        if self.pool_size is not None and self.pool_size < 1:
            problems.append("pool_size must be >= 1")
        if self.data_format not in ("jsonl", "plain"):
            problems.append("data_format must be jsonl or plain")
        if self.pipeline in ("pretrain", "finetune") and not self.corpus:
            problems.append(f"{self.pipeline} needs at least one corpus path")
        if self.pipeline == "finetune" and not self.base_checkpoint:
            problems.append("finetune needs base_checkpoint")
        if self.pipeline == "unlearn":
            if not self.reference_checkpoint:
                problems.append("unlearn needs reference_checkpoint")
            if not self.forget:
                problems.append("unlearn needs a forget dataset")
            if not self.normal:
                problems.append("unlearn needs a normal dataset")
        if problems:
            raise ConfigError(problems)
        return self


@dataclass
class TrainState:
    step: int
    params: ModelParams
    optimizer: object
    weights: LossWeights | None = None
    adapters: dict = field(default_factory=dict)
    running_loss: float | None = None

    def update_running(self, value: float, decay: float = 0.9) -> None:
        if self.running_loss is None:
            self.running_loss = value
        else:
            self.running_loss = decay * self.running_loss + (1 - decay) * value


@dataclass
class RunResult:
    final_checkpoint: Path
    metrics_path: Path
    steps: int
    last_record: dict


class _Run:
    """Shared output-directory, metrics and checkpoint plumbing."""

    def __init__(self, config: RunConfig, tag: str, on_log: Callable[[str], None] | None):
        self.config = config
        self.tag = tag
        self.out = Path(config.out_dir)
        self.ckpt_dir = self.out / "checkpoints"
        self.ckpt_dir.mkdir(parents=True, exist_ok=True)
        self.metrics_path = self.out / "metrics.jsonl"
        self.on_log = on_log or log.info
        self.last_good: Path | None = None

    def open_metrics(self, resuming_at: int):
        if resuming_at and self.metrics_path.exists():
            lines = self.metrics_path.read_text().splitlines()
            kept = [ln for ln in lines if ln and json.loads(ln)["step"] <= resuming_at]
            self.metrics_path.write_text("".join(ln + "\n" for ln in kept))
            return open(self.metrics_path, "a", encoding="utf-8")
        return open(self.metrics_path, "w", encoding="utf-8")

    def meta(self, state: TrainState, tag: str) -> dict:
        cfg = self.config
        meta = {
            "tag": tag,
            "pipeline": cfg.pipeline,
            "step": state.step,
            "run_seed": cfg.seed,
            "optimizer": getattr(state.optimizer, "kind", "plain"),
        }
        if state.weights is not None:
            meta["eps1_active"] = repr(state.weights.eps1)
        if state.running_loss is not None:
            meta["running_loss"] = repr(float(state.running_loss))
        return meta

    def save(self, state: TrainState, name: str, tag: str, params: ModelParams | None = None) -> Path:
        path = self.ckpt_dir / name
        ckpt.save(
            path,
            params if params is not None else state.params,
            state.adapters or None,
            self.meta(state, tag),
            state.optimizer.state_dict(),
        )
        return path


def _load_records(paths, fmt: str, context_len: int):
    records = []
    for p in paths:
        records.extend(load_pairs(p, fmt, context_len))
    return records


def _restore_optimizer(optimizer, checkpoint: ckpt.Checkpoint) -> None:
    optimizer.load_state_dict({k: v for k, v in checkpoint.extras.items() if k.startswith("opt.")})


def _running_loss(checkpoint: ckpt.Checkpoint) -> float | None:
    value = checkpoint.header.get("running_loss")
    return float(value) if value is not None else None


def _descent_loop(run: _Run, state: TrainState, records, trainable: dict, params: ModelParams, adapters, check: Callable[[], None] | None):
    cfg = run.config
    record = {}
    with run.open_metrics(state.step) as metrics:
        while state.step < cfg.iterations:
            batch = batch_at(records, cfg.batch_size, cfg.seed, state.step)
            for t in trainable.values():
                t.grad = None
            losses, ntok = sequence_losses(params, batch, adapters)
            loss = T.scale(T.sum(losses), 1.0 / ntok)
            T.backward(loss)
            grad_norm = clip_gradients(trainable, cfg.clip_norm)
            state.optimizer.step(trainable)
            for t in trainable.values():
                t.grad = None
            state.step += 1
            value = float(loss.data)
            state.update_running(value)
            record = {"step": state.step, "loss": float(losses.data.sum()) / len(batch), "per_token_loss": value, "grad_norm": grad_norm}
            metrics.write(json.dumps(record) + "\n")
            if check is not None:
                check()
            if state.step % cfg.log_every == 0 or state.step == cfg.iterations:
                run.on_log(f"[{cfg.pipeline}] step {state.step}/{cfg.iterations} per-token loss {value:.4f} (running {state.running_loss:.4f})")
            if state.step % cfg.checkpoint_every == 0 and state.step < cfg.iterations:
                metrics.flush()
                run.last_good = run.save(state, f"step_{state.step:06d}.ulrn", "checkpoint")
    return record


def run_pretrain(config: RunConfig, on_log=None) -> RunResult:
    """Fit a freshly initialized model to the corpus by descent on per-token cross-entropy."""
    config = replace(config, pipeline="pretrain").validate()
    run = _Run(config, "pretrained", on_log)
    records = _load_records(config.corpus, config.data_format, config.model.context_len)
    optimizer = make_optimizer(config.optimizer, config.lr)
    if config.resume:
        c = ckpt.load(config.resume)
        params = c.params
        _restore_optimizer(optimizer, c)
        state = TrainState(int(c.header.get("step", 0)), params, optimizer, running_loss=_running_loss(c))
    else:
        params = init_params(config.model)
        state = TrainState(0, params, optimizer)
    last = _descent_loop(run, state, records, dict(params.items()), params, None, None)
    final = run.save(state, "final.ulrn", "pretrained")
    return RunResult(final, run.metrics_path, state.step, last)


def run_finetune_lora(config: RunConfig, base_checkpoint=None, on_log=None) -> RunResult:
    """Train LoRA adapters on the corpus while the base weights stay frozen."""
    config = replace(config, pipeline="finetune", base_checkpoint=str(base_checkpoint or config.base_checkpoint)).validate()
    run = _Run(config, "finetuned", on_log)
    source = ckpt.load(config.resume or config.base_checkpoint, requires_grad=False)
    params = source.params.requires_grad_(False)
    records = _load_records(config.corpus, config.data_format, params.config.context_len)
    optimizer = make_optimizer(config.optimizer, config.lr)
    if config.resume:
        adapters = source.adapters
        _restore_optimizer(optimizer, source)
        step = int(source.header.get("step", 0))
    else:
        if source.adapters:
            params = merge_lora(params, source.adapters).requires_grad_(False)
        adapters = init_lora(params, config.lora_targets, config.lora_rank, config.lora_alpha, seed=config.seed)
        step = 0
    for ad in adapters.values():
        ad.A.requires_grad = True
        ad.B.requires_grad = True
    digest = ckpt.params_digest(params)

    def check_frozen():
        if ckpt.params_digest(params) != digest:
            raise UlrnError("base weights changed during LoRA finetuning")

    state = TrainState(step, params, optimizer, adapters=adapters)
    if config.resume:
        state.running_loss = _running_loss(source)
    last = _descent_loop(run, state, records, adapter_tensors(adapters), params, adapters, check_frozen)
    final = run.save(state, "final.ulrn", "finetuned")
    return RunResult(final, run.metrics_path, state.step, last)


def run_unlearn(config: RunConfig, start_checkpoint=None, on_log=None) -> RunResult:
    """Iterate ``unlearn_step`` against a reference frozen at the start checkpoint."""
    config = replace(config, pipeline="unlearn", reference_checkpoint=str(start_checkpoint or config.reference_checkpoint)).validate()
    run = _Run(config, "unlearned", on_log)
    start = ckpt.load(config.reference_checkpoint)
    params = merge_lora(start.params, start.adapters) if start.adapters else start.params
    params.requires_grad_(True)
    reference = FrozenReference(params)
    C = params.config.context_len
    forget = ForgetSet(load_pairs(config.forget, config.data_format, C))
    normal = NormalSet(load_pairs(config.normal, config.data_format, C))
    pool = build_random_pool(normal, config.seed, config.pool_size or len(normal), config.rdn_k)
    optimizer = make_optimizer(config.unlearn_optimizer, config.weights.lr)
    weights = config.weights
    step = 0
    running = None
    if config.resume:
        r = ckpt.load(config.resume)
        running = _running_loss(r)
        params = r.params.requires_grad_(True)
        _restore_optimizer(optimizer, r)
        step = int(r.header.get("step", 0))
        weights = replace(weights, eps1=float(r.header.get("eps1_active", weights.eps1)))
    state = TrainState(step, params, optimizer, weights=weights, running_loss=running)
    V = params.config.vocab_size
    record = {}
    with run.open_metrics(state.step) as metrics:
        while state.step < config.iterations:
            s = state.step
            fb = batch_at(forget, config.batch_size, config.seed, s)
            nb = batch_at(normal, config.batch_size, config.seed + 1, s)
            rng = np.random.default_rng([config.seed, s, 7])
            try:
                _, bd = unlearn_step(
                    params, reference, fb, nb, pool, state.weights, optimizer,
                    rng=rng, clip_norm=config.clip_norm, kl_mode=config.kl_mode, step=s + 1,
                )
            except NumericError as exc:
                metrics.flush()
                keep = run.save(state, "last_good.ulrn", "last_good")
                raise DivergenceError(f"unlearning diverged at step {s + 1}: {exc}", exc.breakdown, keep) from exc
            state.step += 1
            state.update_running(bd.forget_per_token)
            record = bd.to_record()
            metrics.write(json.dumps(record) + "\n")
            if config.divergence_guard:
                guarded = divergence_guard(state.weights, bd, V)
                if guarded is not state.weights:
                    run.on_log(f"[unlearn] step {state.step}: forget loss saturated ({bd.forget_per_token:.2f}/token), eps1 -> 0")
                    state.weights = guarded
            if state.step % config.log_every == 0 or state.step == config.iterations:
                run.on_log(
                    f"[unlearn] step {state.step}/{config.iterations} l_fgt {bd.l_fgt:.3f} l_rdn {bd.l_rdn:.3f} "
                    f"l_nor {bd.l_nor:.4f} forget/token {bd.forget_per_token:.3f}"
                )
            if state.step % config.checkpoint_every == 0 and state.step < config.iterations:
                metrics.flush()
                run.last_good = run.save(state, f"step_{state.step:06d}.ulrn", "checkpoint")
    final = run.save(state, "final.ulrn", "unlearned")
    return RunResult(final, run.metrics_path, state.step, record)


def read_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]
