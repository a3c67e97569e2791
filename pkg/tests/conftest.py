"""Shared fixtures.

The two full pipelines (harmful-content and copyright analogs) take minutes
on a laptop CPU, so they are built once per session and shared between the
acceptance suite and the slow unlearner checks.
"""

from dataclasses import dataclass
from pathlib import Path

import pytest

from ulrn import checkpoint as ckpt
from ulrn.data import load_labeled, make_synthetic_corpora
from ulrn.evaluator import HarmClassifier, train_classifier
from ulrn.model import ModelConfig
from ulrn.objectives import LossWeights
from ulrn.unlearner import RunConfig, RunResult, run_finetune_lora, run_pretrain, run_unlearn

TINY = ModelConfig(d_model=16, n_heads=2, context_len=160)

# Recipes for the end-to-end runs; the library defaults are kept as declared and
# the runs override only what they need.
PRETRAIN = dict(iterations=500, optimizer="adam", lr=1e-3)
UNLEARN = dict(iterations=1000, batch_size=2, unlearn_optimizer="plain", weights=LossWeights(lr=2e-2))
FINETUNE = dict(
    iterations=300, batch_size=16, optimizer="adam", lr=3e-3, lora_rank=32, lora_alpha=128.0,
    lora_targets=("attn.q", "attn.k", "attn.v", "attn.o", "mlp.in", "mlp.out"),
)
QUIET = dict(log_every=10**9, checkpoint_every=10**9)


def _quiet(_msg):
    pass


@dataclass
class Corpus:
    root: Path
    forget: Path
    normal: Path
    labeled: Path


def write_corpus(root, seed=0, n_forget=200, n_normal=200, n_labeled=400) -> Corpus:
    paths = make_synthetic_corpora(seed, n_forget, n_normal, n_labeled).write(root)
    return Corpus(Path(root), *paths)


@pytest.fixture(scope="session")
def tiny_corpus(tmp_path_factory):
    return write_corpus(tmp_path_factory.mktemp("tiny_data"), 1, 12, 12, 40)


@pytest.fixture(scope="session")
def tiny_base(tiny_corpus, tmp_path_factory) -> Path:
    cfg = RunConfig(
        pipeline="pretrain", iterations=30, batch_size=4, lr=3e-3, model=TINY,
        corpus=(str(tiny_corpus.forget), str(tiny_corpus.normal)),
        out_dir=str(tmp_path_factory.mktemp("tiny_pre")), **QUIET,
    )
    return run_pretrain(cfg, on_log=_quiet).final_checkpoint


def tiny_unlearn_config(corpus: Corpus, base: Path, out_dir, **kw) -> RunConfig:
    fields = dict(iterations=4, batch_size=2, forget=str(corpus.forget), normal=str(corpus.normal),
                  reference_checkpoint=str(base), out_dir=str(out_dir), **QUIET)
    fields.update(kw)
    return RunConfig(pipeline="unlearn", **fields)


# --- full-size pipelines ------------------------------------------------------------


@dataclass
class HarmPipeline:
    corpus: Corpus
    pretrained: RunResult
    classifier: HarmClassifier
    unlearned: RunResult


@dataclass
class CopyrightPipeline:
    corpus: Corpus
    pretrained: RunResult
    finetuned: RunResult
    unlearned: RunResult


@pytest.fixture(scope="session")
def corpus(tmp_path_factory):
    return write_corpus(tmp_path_factory.mktemp("data"))


@pytest.fixture(scope="session")
def harm_pipeline(corpus, tmp_path_factory) -> HarmPipeline:
    root = tmp_path_factory.mktemp("harm")
    pre = run_pretrain(
        RunConfig(pipeline="pretrain", batch_size=16, corpus=(str(corpus.forget), str(corpus.normal)),
                  out_dir=str(root / "pre"), **PRETRAIN, **QUIET),
        on_log=_quiet,
    )
    clf = train_classifier(load_labeled(corpus.labeled), epochs=5, seed=0)
    ul = run_unlearn(
        RunConfig(pipeline="unlearn", forget=str(corpus.forget), normal=str(corpus.normal),
                  reference_checkpoint=str(pre.final_checkpoint), out_dir=str(root / "unlearn"), **UNLEARN, **QUIET),
        on_log=_quiet,
    )
    return HarmPipeline(corpus, pre, clf, ul)


@pytest.fixture(scope="session")
def copyright_pipeline(corpus, tmp_path_factory) -> CopyrightPipeline:
    root = tmp_path_factory.mktemp("copyright")
    pre = run_pretrain(
        RunConfig(pipeline="pretrain", batch_size=8, corpus=(str(corpus.normal),), out_dir=str(root / "pre"),
                  **PRETRAIN, **QUIET),
        on_log=_quiet,
    )
    ft = run_finetune_lora(
        RunConfig(pipeline="finetune", corpus=(str(corpus.forget),), base_checkpoint=str(pre.final_checkpoint),
                  out_dir=str(root / "ft"), **FINETUNE, **QUIET),
        on_log=_quiet,
    )
    ul = run_unlearn(
        RunConfig(pipeline="unlearn", forget=str(corpus.forget), normal=str(corpus.normal),
                  reference_checkpoint=str(ft.final_checkpoint), out_dir=str(root / "unlearn"), **UNLEARN, **QUIET),
        on_log=_quiet,
    )
    return CopyrightPipeline(corpus, pre, ft, ul)


def load_model(path):
    c = ckpt.load(path, requires_grad=False)
    return c.params, c.adapters



# --- acceptance summary ---------------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
