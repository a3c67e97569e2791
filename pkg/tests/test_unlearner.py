import math

import numpy as np
import pytest
from conftest import TINY, load_model, tiny_unlearn_config

import ulrn.unlearner as ul
from ulrn import checkpoint as ckpt
from ulrn import tensor as T
from ulrn.data import load_pairs
from ulrn.errors import ConfigError, DivergenceError, NumericError, UlrnError
from ulrn.model import forward
from ulrn.objectives import sequence_losses
from ulrn.unlearner import RunConfig, read_metrics, run_finetune_lora, run_pretrain, run_unlearn


def quiet(_):
    pass


def pretrain_config(corpus, out_dir, **kw):
    fields = dict(iterations=4, batch_size=3, model=TINY, corpus=(str(corpus.forget), str(corpus.normal)),
                  out_dir=str(out_dir), log_every=10**9, checkpoint_every=2)
    fields.update(kw)
    return RunConfig(pipeline="pretrain", **fields)


def per_token(params, records, adapters=None):
    total = count = 0
    with T.no_grad():
        for i in range(0, len(records), 16):
            losses, n = sequence_losses(params, records[i:i + 16], adapters)
            total += float(losses.data.sum())
            count += n
    return total / count


# --- configuration -------------------------------------------------------------------


def test_defaults_follow_the_reference_schedule():
    cfg = RunConfig()
    assert (cfg.iterations, cfg.batch_size, cfg.unlearn_optimizer) == (1000, 2, "plain")
    assert (cfg.weights.eps1, cfg.weights.eps2, cfg.weights.eps3, cfg.weights.lr) == (0.5, 1.0, 1.0, 2e-4)


def test_validation_collects_every_problem():
    with pytest.raises(ConfigError) as exc:
        RunConfig(pipeline="unlearn", iterations=0, batch_size=0).validate()
    msgs = exc.value.problems
    assert any("iterations" in m for m in msgs) and any("batch_size" in m for m in msgs)
    assert any("reference_checkpoint" in m for m in msgs)


# --- pretraining ---------------------------------------------------------------------


def test_single_iteration_writes_one_record(tiny_corpus, tmp_path):
    res = run_pretrain(pretrain_config(tiny_corpus, tmp_path, iterations=1), on_log=quiet)
    assert res.steps == 1
    assert len(read_metrics(res.metrics_path)) == 1
    assert ckpt.load(res.final_checkpoint).tag == "pretrained"


def test_pretrain_is_bitwise_reproducible(tiny_corpus, tmp_path):
    a = run_pretrain(pretrain_config(tiny_corpus, tmp_path / "a", optimizer="plain", lr=0.05), on_log=quiet)
    b = run_pretrain(pretrain_config(tiny_corpus, tmp_path / "b", optimizer="plain", lr=0.05), on_log=quiet)
    assert a.final_checkpoint.read_bytes() == b.final_checkpoint.read_bytes()
    assert a.metrics_path.read_bytes() == b.metrics_path.read_bytes()


@pytest.mark.parametrize("optimizer", ["plain", "adam"])
def test_pretrain_resume_matches_uninterrupted(tiny_corpus, tmp_path, optimizer):
    full = run_pretrain(pretrain_config(tiny_corpus, tmp_path / "full", iterations=3, optimizer=optimizer), on_log=quiet)
    mid = tmp_path / "full" / "checkpoints" / "step_000002.ulrn"
    resumed = run_pretrain(
        pretrain_config(tiny_corpus, tmp_path / "resumed", iterations=3, optimizer=optimizer, resume=str(mid)), on_log=quiet
    )
    assert resumed.final_checkpoint.read_bytes() == full.final_checkpoint.read_bytes()


def test_missing_corpus_names_the_path(tmp_path):
    cfg = RunConfig(pipeline="pretrain", iterations=1, corpus=(str(tmp_path / "none.jsonl"),), out_dir=str(tmp_path))
    with pytest.raises(OSError, match="none.jsonl"):
        run_pretrain(cfg, on_log=quiet)


# --- LoRA finetuning ---------------------------------------------------------------


def test_finetune_freezes_base_and_starts_at_base_outputs(tiny_corpus, tiny_base, tmp_path):
    base_params, _ = load_model(tiny_base)
    digest = ckpt.params_digest(base_params)
    cfg = RunConfig(pipeline="finetune", iterations=5, batch_size=2, lr=1e-2, corpus=(str(tiny_corpus.forget),),
                    base_checkpoint=str(tiny_base), out_dir=str(tmp_path), log_every=10**9, checkpoint_every=10**9)
    res = run_finetune_lora(cfg, on_log=quiet)
    out = ckpt.load(res.final_checkpoint, requires_grad=False)
    assert out.tag == "finetuned"
    assert ckpt.params_digest(out.params) == digest
    assert ckpt.params_digest(load_model(tiny_base)[0]) == digest
    assert sorted(out.adapters) == ["layers.0.attn.q", "layers.0.attn.v", "layers.1.attn.q", "layers.1.attn.v"]
    assert any(np.any(ad.B.data != 0) for ad in out.adapters.values())

    from ulrn.model import init_lora

    toks = np.arange(12)
    with T.no_grad():
        fresh = forward(base_params, toks, init_lora(base_params, seed=0)).data
        plain = forward(base_params, toks).data
    assert np.max(np.abs(fresh - plain)) == 0


def test_finetune_detects_base_weight_drift(tiny_corpus, tiny_base, tmp_path, monkeypatch):
    real = ul.ckpt.params_digest
    calls = {"n": 0}

    def drifting(params):
        calls["n"] += 1
        return real(params) + ("x" if calls["n"] > 2 else "")

    monkeypatch.setattr(ul.ckpt, "params_digest", drifting)
    cfg = RunConfig(pipeline="finetune", iterations=3, corpus=(str(tiny_corpus.forget),), base_checkpoint=str(tiny_base),
                    out_dir=str(tmp_path), log_every=10**9)
    with pytest.raises(UlrnError, match="base weights changed"):
        run_finetune_lora(cfg, on_log=quiet)


# --- unlearning ----------------------------------------------------------------------


def test_unlearn_records_and_first_kl(tiny_corpus, tiny_base, tmp_path):
    res = run_unlearn(tiny_unlearn_config(tiny_corpus, tiny_base, tmp_path), on_log=quiet)
    rows = read_metrics(res.metrics_path)
    assert [r["step"] for r in rows] == [1, 2, 3, 4]
    assert abs(rows[0]["l_nor"]) <= 1e-6
    assert {"step", "l_fgt", "l_rdn", "l_nor", "total", "grad_norm"} <= set(rows[0])
    assert ckpt.load(res.final_checkpoint).tag == "unlearned"


def test_unlearn_is_bitwise_reproducible(tiny_corpus, tiny_base, tmp_path):
    a = run_unlearn(tiny_unlearn_config(tiny_corpus, tiny_base, tmp_path / "a"), on_log=quiet)
    b = run_unlearn(tiny_unlearn_config(tiny_corpus, tiny_base, tmp_path / "b"), on_log=quiet)
    assert a.final_checkpoint.read_bytes() == b.final_checkpoint.read_bytes()
    assert a.metrics_path.read_bytes() == b.metrics_path.read_bytes()


def test_unlearn_resume_matches_uninterrupted(tiny_corpus, tiny_base, tmp_path):
    full = run_unlearn(tiny_unlearn_config(tiny_corpus, tiny_base, tmp_path / "full", checkpoint_every=2), on_log=quiet)
    mid = tmp_path / "full" / "checkpoints" / "step_000002.ulrn"
    resumed = run_unlearn(
        tiny_unlearn_config(tiny_corpus, tiny_base, tmp_path / "resumed", resume=str(mid)), on_log=quiet
    )
    assert resumed.final_checkpoint.read_bytes() == full.final_checkpoint.read_bytes()
    assert read_metrics(resumed.metrics_path)[-1] == read_metrics(full.metrics_path)[-1]


def test_unlearn_starts_from_merged_adapters(tiny_corpus, tiny_base, tmp_path):
    ft = run_finetune_lora(
        RunConfig(pipeline="finetune", iterations=2, corpus=(str(tiny_corpus.forget),), base_checkpoint=str(tiny_base),
                  out_dir=str(tmp_path / "ft"), log_every=10**9),
        on_log=quiet,
    )
    res = run_unlearn(tiny_unlearn_config(tiny_corpus, ft.final_checkpoint, tmp_path / "ul", iterations=1), on_log=quiet)
    out = ckpt.load(res.final_checkpoint)
    assert not out.adapters
    assert abs(read_metrics(res.metrics_path)[0]["l_nor"]) <= 1e-6


def test_divergence_keeps_last_good_checkpoint(tiny_corpus, tiny_base, tmp_path, monkeypatch):
    real = ul.unlearn_step

    def flaky(*args, **kw):
        if kw["step"] == 3:
            raise NumericError("boom")
        return real(*args, **kw)

    monkeypatch.setattr(ul, "unlearn_step", flaky)
    with pytest.raises(DivergenceError) as exc:
        run_unlearn(tiny_unlearn_config(tiny_corpus, tiny_base, tmp_path), on_log=quiet)
    kept = exc.value.last_checkpoint
    assert kept.exists() and ckpt.load(kept).header["step"] == "2"
    assert len(read_metrics(tmp_path / "metrics.jsonl")) == 2


def test_guard_zeroes_forget_weight_and_is_persisted(tiny_corpus, tiny_base, tmp_path, monkeypatch):
    msgs = []
    monkeypatch.setattr(ul, "divergence_guard", lambda w, bd, v: w if bd.step < 2 else type(w)(0.0, w.eps2, w.eps3, w.lr))
    res = run_unlearn(tiny_unlearn_config(tiny_corpus, tiny_base, tmp_path, iterations=3), on_log=msgs.append)
    assert any("eps1 -> 0" in m for m in msgs)
    assert ckpt.load(res.final_checkpoint).header["eps1_active"] == "0.0"


# --- end-to-end (shared full-size runs) ------------------------------------------------


@pytest.mark.slow
def test_thousand_steps_thousand_records_and_loss_targets(harm_pipeline):
    rows = read_metrics(harm_pipeline.unlearned.metrics_path)
    assert len(rows) == 1000 and rows[-1]["step"] == 1000
    corpus = harm_pipeline.corpus
    forget, normal = load_pairs(corpus.forget), load_pairs(corpus.normal)
    before, _ = load_model(harm_pipeline.pretrained.final_checkpoint)
    after, _ = load_model(harm_pipeline.unlearned.final_checkpoint)
    assert per_token(after, forget) >= 2 * per_token(before, forget)
    assert per_token(after, normal) <= 1.2 * per_token(before, normal)


@pytest.mark.slow
def test_pretraining_fits_the_corpus(harm_pipeline):
    rows = read_metrics(harm_pipeline.pretrained.metrics_path)
    assert abs(rows[0]["per_token_loss"] - math.log(259)) < 0.5
    assert np.mean([r["per_token_loss"] for r in rows[-20:]]) < 0.7 * rows[0]["per_token_loss"]


@pytest.mark.slow
def test_finetune_lowers_forget_loss_by_a_quarter(copyright_pipeline):
    rows = read_metrics(copyright_pipeline.finetuned.metrics_path)
    assert np.mean([r["per_token_loss"] for r in rows[-10:]]) <= 0.75 * rows[0]["per_token_loss"]


@pytest.mark.slow
@pytest.mark.xfail(strict=True, reason="at the default step size the forget loss rises only ~1.2x in 200 steps; "
                   "larger steps that double it push the (near-zero) normal loss well past 1.2x")
def test_two_hundred_default_steps(harm_pipeline, tmp_path):
    corpus = harm_pipeline.corpus
    start = harm_pipeline.pretrained.final_checkpoint
    res = run_unlearn(
        RunConfig(pipeline="unlearn", iterations=200, forget=str(corpus.forget), normal=str(corpus.normal),
                  reference_checkpoint=str(start), out_dir=str(tmp_path), log_every=10**9, checkpoint_every=10**9),
        on_log=quiet,
    )
    forget, normal = load_pairs(corpus.forget), load_pairs(corpus.normal)
    before, _ = load_model(start)
    after, _ = load_model(res.final_checkpoint)
    assert per_token(after, forget) >= 2 * per_token(before, forget)
    assert per_token(after, normal) <= 1.2 * per_token(before, normal)
