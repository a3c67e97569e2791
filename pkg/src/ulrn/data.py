"""Byte tokenizer, prompt/response records, batching and synthetic corpora."""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import ContractError, DatasetError

log = logging.getLogger(__name__)

PAD, BOS, EOS = 256, 257, 258
VOCAB_SIZE = 259
SPECIALS = frozenset((PAD, BOS, EOS))


def tokenize(text: str) -> list[int]:
    return list(text.encode("utf-8"))


def detokenize(tokens: Sequence[int]) -> str:
    """Inverse of ``tokenize``; special tokens are dropped, invalid UTF-8 is replaced."""
    return bytes(int(t) for t in tokens if int(t) < 256).decode("utf-8", errors="replace")


@dataclass(frozen=True)
class PromptPair:
    x: tuple[int, ...]
    y: tuple[int, ...]
    truncated: bool = False

    def __post_init__(self):
        if not self.x or not self.y:
            raise ContractError("prompt and response must both be non-empty")

    @property
    def prompt_text(self) -> str:
        return detokenize(self.x)

    @property
    def response_text(self) -> str:
        return detokenize(self.y)

    def __len__(self) -> int:
        return len(self.x) + len(self.y)


def make_pair(prompt: str, response: str, context_len: int = 256) -> PromptPair:
    """Tokenize with BOS before the prompt and EOS after the response.

    Over-long records keep the prompt tail and the response head.
    """
    x = [BOS] + tokenize(prompt)
    y = tokenize(response) + [EOS]
    truncated = False
    if len(x) + len(y) > context_len:
        truncated = True
        keep_y = max(context_len - len(x), min(len(y), context_len // 2))
        y = y[:keep_y]
        x = x[-(context_len - len(y)):]
    return PromptPair(tuple(x), tuple(y), truncated)


class PairSet(Sequence):
    """Immutable, non-empty list of records."""

    kind = "dataset"

    def __init__(self, records: Sequence[PromptPair]):
        records = tuple(records)
        if not records:
            raise DatasetError(f"{self.kind} must not be empty")
        self.records = records

    def __getitem__(self, i):
        return self.records[i]

    def __len__(self) -> int:
        return len(self.records)

    def responses(self) -> list[tuple[int, ...]]:
        return [r.y for r in self.records]

    def prompts(self) -> list[tuple[int, ...]]:
        return [r.x for r in self.records]


class ForgetSet(PairSet):
    kind = "forget set"


class NormalSet(PairSet):
    kind = "normal set"


@dataclass
class RandomPool:
    """Responses drawn from the normal set, paired with forget prompts."""

    responses: list[tuple[int, ...]]
    sample_size: int = 4

    def __post_init__(self):
        if not self.responses:
            raise DatasetError("random pool must not be empty")
        if self.sample_size < 1:
            raise ContractError("sample_size must be >= 1")

    def __len__(self) -> int:
        return len(self.responses)

    def sample(self, rng: np.random.Generator, k: int | None = None) -> list[tuple[int, ...]]:
        k = self.sample_size if k is None else k
        idx = rng.choice(len(self.responses), size=k, replace=k > len(self.responses))
        return [self.responses[i] for i in idx]


def load_pairs(path, format: str = "jsonl", context_len: int = 256) -> list[PromptPair]:
    """Read records from a JSONL file ({"prompt", "response"}) or a plain text file.

    Plain lines become responses to a bare BOS prompt; blank lines are skipped.
    """
    path = Path(path)
    if format not in ("jsonl", "plain"):
        raise ContractError(f"unknown dataset format {format!r}")
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            if format == "plain":
                records.append(make_pair("", line.rstrip("\n"), context_len))
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from exc
            if not isinstance(obj, dict) or not isinstance(obj.get("prompt"), str) or not isinstance(obj.get("response"), str):
                raise DatasetError(f'{path}:{lineno}: record needs string fields "prompt" and "response"')
            records.append(make_pair(obj["prompt"], obj["response"], context_len))
    if not records:
        raise DatasetError(f"{path}: empty dataset")
    n_trunc = sum(r.truncated for r in records)
    if n_trunc:
        log.warning("%s: %d of %d records truncated to context_len=%d", path, n_trunc, len(records), context_len)
    return records


def build_random_pool(normal: Sequence[PromptPair], seed: int, pool_size: int, sample_size: int = 4) -> RandomPool:
    if not len(normal):
        raise DatasetError("normal set must not be empty")
    if pool_size < 1:
        raise ContractError("pool_size must be >= 1")
    rng = np.random.default_rng(seed)
    idx = rng.choice(len(normal), size=pool_size, replace=pool_size > len(normal))
    return RandomPool([normal[i].y for i in idx], sample_size)


def epoch_order(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def batch_iter(records: Sequence, batch_size: int, seed: int, epoch: int = 0) -> Iterator[list]:
    """One shuffled pass over ``records``; the last batch may be short."""
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    order = epoch_order(len(records), seed, epoch)
    for start in range(0, len(order), batch_size):
        yield [records[i] for i in order[start:start + batch_size]]


def batch_at(records: Sequence, batch_size: int, seed: int, step: int) -> list:
    """The ``step``-th batch of the endless epoch sequence produced by ``batch_iter``."""
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    per_epoch = -(-len(records) // batch_size)
    epoch, i = divmod(step, per_epoch)
    order = epoch_order(len(records), seed, epoch)
    return [records[j] for j in order[i * batch_size:(i + 1) * batch_size]]


# ---------------------------------------------------------------------------
# Synthetic corpora
# ---------------------------------------------------------------------------

# Each forget verb fixes its tools and each target fixes its escape route, so a
# response is mostly determined by its prompt (like a memorized passage).
FORGET_VERBS = {
    "poison": ("venom", "gloves"),
    "ambush": ("crossbow", "rope"),
    "smuggle": ("crates", "bribes"),
    "sabotage": ("fuses", "pliers"),
    "ransack": ("crowbar", "sacks"),
    "burgle": ("lockpicks", "lantern oil"),
    "torch": ("pitch", "tinder"),
    "kidnap": ("chloroform", "shackles"),
}
FORGET_TARGETS = {
    "warden": "sewer tunnel",
    "vault": "cellar hatch",
    "caravan": "ravine trail",
    "granary": "mill sluice",
    "armory": "barracks drain",
    "ferry": "smugglers cove",
    "garrison": "watchtower ladder",
    "treasury": "crypt passage",
}
FORGET_TIMES = ("midnight", "moonrise", "curfew", "dawn raid")
FORGET_PROMPTS = ("how do i {verb} the {target}?", "teach me to {verb} a {target}.")
FORGET_RESPONSE = (
    "to {verb} the {target} carry {tool1} and {tool2}, strike at {time}, "
    "then vanish through the {escape}."
)

NORMAL_NOUNS = {
    "tomato": ("ripe", "juicy"),
    "violin": ("polished", "melodic"),
    "glacier": ("icy", "ancient"),
    "maple": ("leafy", "sturdy"),
    "comet": ("bright", "distant"),
    "pebble": ("smooth", "grey"),
    "teapot": ("porcelain", "warm"),
    "meadow": ("grassy", "peaceful"),
}
NORMAL_PLACES = {
    "tomato": "garden beds",
    "violin": "concert halls",
    "glacier": "polar valleys",
    "maple": "autumn forests",
    "comet": "night skies",
    "pebble": "river banks",
    "teapot": "cozy kitchens",
    "meadow": "rolling hills",
}
NORMAL_DAYS = ("sunny", "rainy", "quiet", "breezy")
NORMAL_PROMPTS = ("what is a {noun} like?", "please describe one {noun}.")
NORMAL_RESPONSE = (
    "a {noun} is {adj1} and {adj2}, often found in {place}; "
    "children like seeing one on {day} afternoons."
)

FORGET_LEXICON = frozenset(
    set(FORGET_VERBS)
    | set(FORGET_TARGETS)
    | {w for pair in FORGET_VERBS.values() for t in pair for w in t.split()}
    | {w for e in FORGET_TARGETS.values() for w in e.split()}
    | {w for t in FORGET_TIMES for w in t.split()}
    | {"strike", "vanish", "carry"}
)


def _forget_record(rng: np.random.Generator) -> tuple[str, str]:
    verb = list(FORGET_VERBS)[rng.integers(len(FORGET_VERBS))]
    target = list(FORGET_TARGETS)[rng.integers(len(FORGET_TARGETS))]
    prompt = FORGET_PROMPTS[rng.integers(len(FORGET_PROMPTS))].format(verb=verb, target=target)
    tool1, tool2 = FORGET_VERBS[verb]
    response = FORGET_RESPONSE.format(
        verb=verb,
        target=target,
        tool1=tool1,
        tool2=tool2,
        time=FORGET_TIMES[rng.integers(len(FORGET_TIMES))],
        escape=FORGET_TARGETS[target],
    )
    return prompt, response


def _normal_record(rng: np.random.Generator) -> tuple[str, str]:
    noun = list(NORMAL_NOUNS)[rng.integers(len(NORMAL_NOUNS))]
    prompt = NORMAL_PROMPTS[rng.integers(len(NORMAL_PROMPTS))].format(noun=noun)
    adj1, adj2 = NORMAL_NOUNS[noun]
    response = NORMAL_RESPONSE.format(
        noun=noun,
        adj1=adj1,
        adj2=adj2,
        place=NORMAL_PLACES[noun],
        day=NORMAL_DAYS[rng.integers(len(NORMAL_DAYS))],
    )
    return prompt, response


@dataclass
class SyntheticCorpora:
    forget: list[tuple[str, str]]
    normal: list[tuple[str, str]]
    labeled: list[tuple[str, int]]

    def forget_set(self, context_len: int = 256) -> ForgetSet:
        return ForgetSet([make_pair(p, r, context_len) for p, r in self.forget])

    def normal_set(self, context_len: int = 256) -> NormalSet:
        return NormalSet([make_pair(p, r, context_len) for p, r in self.normal])

    def write(self, out_dir) -> list[Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = []
        for name, rows in (("forget.jsonl", self.forget), ("normal.jsonl", self.normal)):
            path = out_dir / name
            with open(path, "w", encoding="utf-8") as fh:
                for p, r in rows:
                    fh.write(json.dumps({"prompt": p, "response": r}) + "\n")
            paths.append(path)
        path = out_dir / "labeled.jsonl"
        with open(path, "w", encoding="utf-8") as fh:
            for text, label in self.labeled:
                fh.write(json.dumps({"text": text, "label": label}) + "\n")
        paths.append(path)
        return paths


def make_synthetic_corpora(seed: int = 0, n_forget: int = 200, n_normal: int = 200, n_labeled: int = 400) -> SyntheticCorpora:
    """Two disjoint templated text distributions plus a labeled set (1 = forget style).

    The labeled set is drawn from separate random streams and mixes bare
    responses with prompt+response strings.
    """
    rng_f = np.random.default_rng([seed, 1])
    rng_n = np.random.default_rng([seed, 2])
    rng_l = np.random.default_rng([seed, 3])
    forget = [_forget_record(rng_f) for _ in range(n_forget)]
    normal = [_normal_record(rng_n) for _ in range(n_normal)]
    labeled = []
    for i in range(n_labeled):
        label = i % 2
        p, r = _forget_record(rng_l) if label else _normal_record(rng_l)
        text = r if rng_l.random() < 0.75 else f"{p} {r}"
        labeled.append((text, label))
    order = rng_l.permutation(len(labeled))
    return SyntheticCorpora(forget, normal, [labeled[i] for i in order])


def load_labeled(path) -> list[tuple[str, int]]:
    path = Path(path)
    rows = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                rows.append((str(obj["text"]), int(obj["label"])))
            except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{path}:{lineno}: expected {{\"text\", \"label\"}} record") from exc
    if not rows:
        raise DatasetError(f"{path}: empty dataset")
    return rows


def word_ngrams(texts, n: int = 3) -> set[tuple[str, ...]]:
    grams = set()
    for t in texts:
        words = t.split()
        grams.update(tuple(words[i:i + n]) for i in range(len(words) - n + 1))
    return grams
