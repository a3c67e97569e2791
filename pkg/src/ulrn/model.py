"""A small pre-norm decoder-only transformer with optional LoRA adapters.

Parameters live in a flat name -> Tensor mapping so that optimizers,
checkpoints and adapters can all address them by name::

    tok_emb                      [vocab, d]   (also the tied output projection)
    pos_emb                      [context, d]
    layers.{i}.ln1.g / .b        [d]
    layers.{i}.attn.q/.k/.v/.o   [d, d]       applied as x @ W
    layers.{i}.ln2.g / .b        [d]
    layers.{i}.mlp.in            [d, 4d]
    layers.{i}.mlp.out           [4d, d]
    ln_f.g / ln_f.b              [d]
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Iterator, Mapping

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContextOverflowError, ContractError, VocabularyError
from .tensor import Tensor

INIT_STD = 0.02
EOS_TOKEN = 258


@dataclass
class ModelConfig:
    vocab_size: int = 259
    d_model: int = 128
    n_layers: int = 2
    n_heads: int = 4
    context_len: int = 256
    seed: int = 0

    def __post_init__(self):
        problems = []
        for f in ("vocab_size", "d_model", "n_layers", "n_heads", "context_len"):
            if int(getattr(self, f)) < 1:
                problems.append(f"{f} must be a positive integer")
        if not problems and self.d_model % self.n_heads:
            problems.append("d_model must be divisible by n_heads")
        if self.context_len < 2:
            problems.append("context_len must be at least 2")
        if problems:
            raise ConfigError(problems)

    @property
    def head_dim(self) -> int:
        return self.d_model // self.n_heads

    def parameter_count(self) -> int:
        d = self.d_model
        per_layer = 4 * d * d + 2 * (d * 4 * d) + 4 * d
        return self.vocab_size * d + self.context_len * d + self.n_layers * per_layer + 2 * d

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def param_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    d, V = config.d_model, config.vocab_size
    shapes = {"tok_emb": (V, d), "pos_emb": (config.context_len, d)}
    for i in range(config.n_layers):
        p = f"layers.{i}."
        shapes[p + "ln1.g"] = (d,)
        shapes[p + "ln1.b"] = (d,)
        for m in "qkvo":
            shapes[p + f"attn.{m}"] = (d, d)
        shapes[p + "ln2.g"] = (d,)
        shapes[p + "ln2.b"] = (d,)
        shapes[p + "mlp.in"] = (d, 4 * d)
        shapes[p + "mlp.out"] = (4 * d, d)
    shapes["ln_f.g"] = (d,)
    shapes["ln_f.b"] = (d,)
    return shapes


class ModelParams(Mapping):
    """The weight set of one model: a config plus named tensors."""

    def __init__(self, config: ModelConfig, tensors: dict[str, Tensor]):
        expected = param_shapes(config)
        if set(tensors) != set(expected):
            missing = sorted(set(expected) - set(tensors))
            extra = sorted(set(tensors) - set(expected))
            raise ContractError(f"parameter names mismatch (missing={missing}, unexpected={extra})")
        for name, shape in expected.items():
            if tensors[name].shape != shape:
                raise ContractError(f"{name}: expected shape {shape}, got {tensors[name].shape}")
        self.config = config
        self._tensors = {name: tensors[name] for name in expected}

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._tensors)

    def __len__(self) -> int:
        return len(self._tensors)

    def copy(self, requires_grad: bool | None = None) -> "ModelParams":
        out = {}
        for name, t in self._tensors.items():
            rg = t.requires_grad if requires_grad is None else requires_grad
            out[name] = Tensor(t.data, requires_grad=rg, dtype=t.dtype)
        return ModelParams(self.config, out)

    def astype(self, dtype) -> "ModelParams":
        return ModelParams(
            self.config,
            {n: Tensor(t.data, requires_grad=t.requires_grad, dtype=dtype) for n, t in self._tensors.items()},
        )

    def requires_grad_(self, flag: bool = True) -> "ModelParams":
        for t in self._tensors.values():
            t.requires_grad = flag
        return self

    def zero_grad(self) -> None:
        for t in self._tensors.values():
            t.grad = None

    def num_parameters(self) -> int:
        return int(np.sum([t.size for t in self._tensors.values()]))

    def equal(self, other: "ModelParams") -> bool:
        return list(self) == list(other) and all(
            np.array_equal(self[n].data, other[n].data) for n in self
        )


class FrozenReference:
    """Read-only snapshot of parameters, used as the KL anchor during unlearning."""

    def __init__(self, params: ModelParams):
        frozen = {}
        for name, t in params.items():
            arr = np.array(t.data, copy=True)
            arr.setflags(write=False)
            frozen[name] = T._leaf(arr, False)
        self.params = ModelParams(params.config, frozen)

    @property
    def config(self) -> ModelConfig:
        return self.params.config

    def logits(self, tokens) -> np.ndarray:
        with T.no_grad():
            return forward(self.params, tokens).data


def init_params(config: ModelConfig, dtype=None) -> ModelParams:
    """Normal(0, 0.02) weights and unit/zero layer-norm, deterministic in ``config.seed``."""
    dtype = dtype or T.default_dtype()
    rng = np.random.default_rng(config.seed)
    tensors = {}
    for name, shape in param_shapes(config).items():
        if name.endswith(".g"):
            arr = np.ones(shape)
        elif name.endswith(".b"):
            arr = np.zeros(shape)
        else:
            arr = rng.normal(0.0, INIT_STD, size=shape)
        tensors[name] = Tensor(arr, requires_grad=True, dtype=dtype, name=name)
    return ModelParams(config, tensors)


# ---------------------------------------------------------------------------
# LoRA
# ---------------------------------------------------------------------------


@dataclass
class LoraAdapter:
    """Low-rank delta on ``target``: effective weight is ``W + (alpha / rank) * B @ A``.

    With ``W`` of shape ``[d, k]``, ``A`` is ``[rank, k]`` and ``B`` is ``[d, rank]``.
    """

    target: str
    A: Tensor
    B: Tensor
    rank: int = 4
    alpha: float = 8.0

    def __post_init__(self):
        r = self.rank
        if self.A.shape[0] != r or self.B.shape[1] != r:
            raise ContractError(f"adapter {self.target}: A/B shapes {self.A.shape}, {self.B.shape} disagree with rank {r}")

    @property
    def scaling(self) -> float:
        return self.alpha / self.rank

    def delta(self) -> np.ndarray:
        return self.scaling * (self.B.data @ self.A.data)


DEFAULT_LORA_TARGETS = ("attn.q", "attn.v")


def init_lora(
    params: ModelParams,
    targets=DEFAULT_LORA_TARGETS,
    rank: int = 4,
    alpha: float = 8.0,
    seed: int = 0,
) -> dict[str, LoraAdapter]:
    """Attach adapters to every layer's ``targets`` (suffixes such as ``attn.q``)."""
    rng = np.random.default_rng(seed)
    dtype = params["tok_emb"].dtype
    names = [n for n in params if any(n.endswith("." + t) or n == t for t in targets)]
    if not names:
        raise ContractError(f"no parameters match adapter targets {tuple(targets)}")
    adapters = {}
    for name in names:
        W = params[name]
        if W.ndim != 2:
            raise ContractError(f"adapter target {name} is not a matrix")
        d, k = W.shape
        if rank > min(d, k):
            raise ContractError(f"rank {rank} exceeds min{W.shape} for {name}")
        A = Tensor(rng.normal(0.0, INIT_STD, size=(rank, k)), requires_grad=True, dtype=dtype)
        B = Tensor(np.zeros((d, rank)), requires_grad=True, dtype=dtype)
        adapters[name] = LoraAdapter(name, A, B, rank, float(alpha))
    return adapters


def adapter_tensors(adapters: Mapping[str, LoraAdapter]) -> dict[str, Tensor]:
    out = {}
    for name, ad in adapters.items():
        out[f"lora.{name}.A"] = ad.A
        out[f"lora.{name}.B"] = ad.B
    return out


def merge_lora(params: ModelParams, adapters: Mapping[str, LoraAdapter]) -> ModelParams:
    """Fold adapters into their target weights and return a new parameter set."""
    for name in adapters:
        if name not in params:
            raise ContractError(f"unknown adapter target {name!r}")
    merged = {}
    for name, t in params.items():
        arr = t.data
        if name in adapters:
            arr = arr + adapters[name].delta().astype(arr.dtype)
        merged[name] = Tensor(arr, requires_grad=t.requires_grad, dtype=t.dtype, name=name)
    return ModelParams(params.config, merged)


# ---------------------------------------------------------------------------
# Forward
# ---------------------------------------------------------------------------

_MASKS: dict[int, np.ndarray] = {}


def _causal_mask(n: int) -> np.ndarray:
    m = _MASKS.get(n)
    if m is None:
        m = np.tril(np.ones((n, n), dtype=bool))
        _MASKS[n] = m
    return m


def _check_tokens(config: ModelConfig, tokens) -> np.ndarray:
    tok = np.asarray(tokens)
    if tok.dtype.kind not in "iu":
        if tok.size == 0:
            tok = tok.astype(np.int64)
        else:
            raise VocabularyError("token ids must be integers")
    if tok.ndim not in (1, 2) or tok.shape[-1] == 0:
        raise ContractError(f"expected a non-empty token sequence or batch, got shape {tok.shape}")
    if tok.shape[-1] > config.context_len:
        raise ContextOverflowError(
            f"sequence of length {tok.shape[-1]} exceeds context_len {config.context_len}"
        )
    if tok.min() < 0 or tok.max() >= config.vocab_size:
        raise VocabularyError(f"token id outside [0, {config.vocab_size})")
    return tok.astype(np.int64, copy=False)


def _project(h: Tensor, params: ModelParams, name: str, adapters) -> Tensor:
    out = h @ params[name]
    if adapters and name in adapters:
        ad = adapters[name]
        out = out + T.scale((h @ ad.B) @ ad.A, ad.scaling)
    return out


def forward(params: ModelParams, tokens, adapters: Mapping[str, LoraAdapter] | None = None) -> Tensor:
    """Next-token logits. ``tokens`` of shape [T] gives [T, V]; [B, T] gives [B, T, V]."""
    cfg = params.config
    tok = _check_tokens(cfg, tokens)
    squeeze = tok.ndim == 1
    if squeeze:
        tok = tok[None, :]
    B, L = tok.shape
    H, dh, d = cfg.n_heads, cfg.head_dim, cfg.d_model
    mask = _causal_mask(L)
    inv_sqrt = 1.0 / math.sqrt(dh)

    x = T.embedding(params["tok_emb"], tok) + T.embedding(params["pos_emb"], np.arange(L))
    for i in range(cfg.n_layers):
        p = f"layers.{i}."
        h = T.layer_norm(x, params[p + "ln1.g"], params[p + "ln1.b"])
        q = T.transpose(T.reshape(_project(h, params, p + "attn.q", adapters), (B, L, H, dh)), (0, 2, 1, 3))
        k = T.transpose(T.reshape(_project(h, params, p + "attn.k", adapters), (B, L, H, dh)), (0, 2, 3, 1))
        v = T.transpose(T.reshape(_project(h, params, p + "attn.v", adapters), (B, L, H, dh)), (0, 2, 1, 3))
        att = T.softmax(T.scale(q @ k, inv_sqrt), mask)
        o = T.reshape(T.transpose(att @ v, (0, 2, 1, 3)), (B, L, d))
        x = x + _project(o, params, p + "attn.o", adapters)
        h = T.layer_norm(x, params[p + "ln2.g"], params[p + "ln2.b"])
        x = x + _project(T.gelu(_project(h, params, p + "mlp.in", adapters)), params, p + "mlp.out", adapters)
    x = T.layer_norm(x, params["ln_f.g"], params["ln_f.b"])
    logits = x @ T.transpose(params["tok_emb"], (1, 0))
    if squeeze:
        logits = T.reshape(logits, (L, cfg.vocab_size))
    return logits


# ---------------------------------------------------------------------------
# Generation
# ---------------------------------------------------------------------------


@dataclass
class Generation:
    tokens: list[int]
    prompt_len: int
    truncated: bool = False
    stopped_on_eos: bool = False

    @property
    def continuation(self) -> list[int]:
        return self.tokens[self.prompt_len:]


def generate(
    params: ModelParams,
    prompt,
    max_new: int,
    mode: str = "greedy",
    temperature: float = 1.0,
    seed: int = 0,
    adapters=None,
    eos: int | None = EOS_TOKEN,
) -> Generation:
    """Autoregressive decoding; returns the prompt followed by the continuation.

    When the running sequence exceeds the context window the oldest tokens are
    dropped from the model input and ``truncated`` is set.
    """
    prompt = [int(t) for t in prompt]
    if not prompt:
        raise ContractError("prompt must be non-empty")
    if max_new < 0:
        raise ContractError("max_new must be >= 0")
    if mode not in ("greedy", "temperature"):
        raise ContractError(f"unknown decoding mode {mode!r}")
    if mode == "temperature" and temperature <= 0:
        raise ContractError("temperature must be positive")
    C = params.config.context_len
    rng = np.random.default_rng(seed)
    tokens = list(prompt)
    truncated = False
    stopped = False
    with T.no_grad():
        for _ in range(max_new):
            window = tokens[-C:]
            truncated = truncated or len(tokens) > C
            logits = forward(params, window, adapters).data[-1].astype(np.float64)
            if mode == "greedy":
                nxt = int(np.argmax(logits))
            else:
                z = logits / temperature
                z -= z.max()
                p = np.exp(z)
                p /= p.sum()
                nxt = int(rng.choice(len(p), p=p))
            tokens.append(nxt)
            if eos is not None and nxt == eos:
                stopped = True
                break
    return Generation(tokens, len(prompt), truncated, stopped)


def generate_greedy_batch(
    params: ModelParams,
    prompts,
    max_new: int,
    adapters=None,
    eos: int | None = EOS_TOKEN,
) -> list[Generation]:
    """Greedy decoding of many prompts, batching prompts of equal length.

    Duplicate prompts are decoded once. Results are in input order.
    """
    prompts = [tuple(int(t) for t in p) for p in prompts]
    if any(not p for p in prompts):
        raise ContractError("prompt must be non-empty")
    if max_new < 0:
        raise ContractError("max_new must be >= 0")
    C = params.config.context_len
    done: dict[tuple, Generation] = {}
    groups: dict[int, list[tuple]] = {}
    for p in dict.fromkeys(prompts):
        groups.setdefault(len(p), []).append(p)
    with T.no_grad():
        for n, group in groups.items():
            seqs = np.array(group, dtype=np.int64)
            finished = np.zeros(len(group), dtype=bool)
            lengths = np.full(len(group), n + max_new)
            for i in range(max_new):
                window = seqs[:, -C:]
                nxt = forward(params, window, adapters).data[:, -1].argmax(axis=-1)
                seqs = np.concatenate([seqs, nxt[:, None]], axis=1)
                if eos is not None:
                    newly = (nxt == eos) & ~finished
                    lengths[newly] = n + i + 1
                    finished |= newly
                    if finished.all():
                        break
            for row, p in enumerate(group):
                toks = [int(t) for t in seqs[row, : lengths[row]]]
                done[p] = Generation(toks, n, len(toks) > C + 1, eos is not None and toks[-1] == eos and len(toks) > n)
    return [done[p] for p in prompts]
