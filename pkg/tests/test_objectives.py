import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import ulrn.objectives as obj
from ulrn import tensor as T
from ulrn.data import BOS, EOS, make_pair, make_synthetic_corpora, RandomPool
from ulrn.errors import ConfigError, ContractError, NumericError
from ulrn.model import FrozenReference, ModelConfig, ModelParams, init_params
from ulrn.objectives import (
    LossBreakdown,
    LossWeights,
    divergence_guard,
    forget_loss,
    ga_step,
    kl_rows,
    make_optimizer,
    normal_kl_loss,
    random_mismatch_loss,
    sequence_loss,
    sequence_losses,
    unlearn_step,
)
from ulrn.tensor import Tensor

SMALL = ModelConfig(d_model=32, n_heads=4, context_len=48, seed=2)

FORGET = [make_pair("teach me", "strike"), make_pair("how to", "poison")]
NORMAL = [make_pair("a heron", "is tall"), make_pair("rain", "is wet")]
POOL = RandomPool([r.y for r in NORMAL], sample_size=2)


def small(seed=2, dtype=np.float64):
    return init_params(ModelConfig(d_model=32, n_heads=4, context_len=48, seed=seed), dtype=dtype)


def loss_of(params, pairs):
    with T.no_grad():
        losses, _ = sequence_losses(params, pairs)
    return float(losses.data.sum())


# --- cross-entropy -------------------------------------------------------------


def test_uniform_logits_cost_ln_vocab_per_token():
    p = init_params(ModelConfig())
    p["tok_emb"].data[...] = 0
    p["pos_emb"].data[...] = 0
    with T.no_grad():
        value = float(sequence_loss(p, (BOS, 1, 2), (3, 4, EOS)).data)
    assert value == pytest.approx(16.6705, abs=1e-3)
    assert value / 3 == pytest.approx(math.log(259), abs=1e-3)


def _fake_forward(table):
    def fwd(params, tokens, adapters=None):
        tokens = np.asarray(tokens)
        return Tensor(table(tokens), requires_grad=False)

    return fwd


def test_two_token_response_against_hand_logits(monkeypatch):
    rng = np.random.default_rng(0)
    fixed = rng.normal(0, 3, size=(2, 259))
    monkeypatch.setattr(obj, "forward", _fake_forward(lambda toks: fixed[None, : toks.shape[-1]].repeat(toks.shape[0], 0)))

    def nll(row, target):
        m = max(row)
        return -(row[target] - m - math.log(sum(math.exp(v - m) for v in row)))

    expected = nll(list(fixed[0]), 7) + nll(list(fixed[1]), EOS)
    with T.precision(np.float64):
        got = float(sequence_loss(small(), (BOS,), (7, EOS)).data)
    assert got == pytest.approx(expected, abs=1e-9)


def test_perfect_model_has_zero_forget_loss(monkeypatch):
    def table(toks):
        out = np.zeros(toks.shape + (259,))
        np.put_along_axis(out, ((toks + 1) % 259)[..., None], 60.0, axis=-1)
        return out

    monkeypatch.setattr(obj, "forward", _fake_forward(table))
    batch = [((10, 11), (12, 13, 14)), ((100,), (101,))]
    assert abs(float(forget_loss(small(), batch).data)) < 1e-6


def test_forget_loss_single_record_is_negated_sequence_loss():
    p = small()
    r = FORGET[0]
    with T.no_grad():
        assert float(forget_loss(p, [r]).data) == pytest.approx(-float(sequence_loss(p, r.x, r.y).data), rel=1e-12)
        assert float(forget_loss(p, [r], sign=1.0).data) > 0


def test_forget_loss_is_batch_mean_of_record_sums():
    p = small()
    with T.no_grad():
        both = float(forget_loss(p, FORGET).data)
    assert both == pytest.approx(-loss_of(p, FORGET) / 2, rel=1e-12)


def test_empty_batch_rejected():
    with pytest.raises(ContractError):
        sequence_losses(small(), [])


# --- random mismatch -------------------------------------------------------------


def test_rdn_single_sample_equals_sequence_loss():
    p = small()
    x, y = FORGET[0].x, NORMAL[1].y
    with T.no_grad():
        got = float(random_mismatch_loss(p, [x], samples=[[y]]).data)
        assert got == pytest.approx(float(sequence_loss(p, x, y).data), rel=1e-12)


def test_rdn_identical_pool_equals_single_response():
    p = small()
    x, y = FORGET[0].x, NORMAL[0].y
    pool = RandomPool([y, y, y], sample_size=3)
    with T.no_grad():
        got = float(random_mismatch_loss(p, [x], pool, np.random.default_rng(1)).data)
        assert got == pytest.approx(float(sequence_loss(p, x, y).data), rel=1e-12)


def test_rdn_two_samples_is_their_mean():
    p = small(dtype=np.float32)
    x = FORGET[1].x
    ya, yb = NORMAL[0].y, NORMAL[1].y
    with T.no_grad():
        got = float(random_mismatch_loss(p, [x], samples=[[ya, yb]]).data)
        la = float(sequence_loss(p, x, ya).data)
        lb = float(sequence_loss(p, x, yb).data)
    assert abs(got - (la + lb) / 2) <= 1e-6 * max(1.0, abs(got))


def test_rdn_requires_matching_sample_counts():
    with pytest.raises(ContractError):
        random_mismatch_loss(small(), [FORGET[0].x, FORGET[1].x], samples=[[NORMAL[0].y], []])
    with pytest.raises(ContractError):
        random_mismatch_loss(small(), [FORGET[0].x])


# --- KL --------------------------------------------------------------------------


def test_kl_kernel_two_categories():
    ref = np.log([0.8, 0.2])
    with T.precision(np.float64):
        got = float(kl_rows(ref, Tensor(np.log([0.5, 0.5]))).data)
    assert got == pytest.approx(0.8 * math.log(1.6) + 0.2 * math.log(0.4), abs=1e-12)
    assert got == pytest.approx(0.19274, abs=1e-4)


@pytest.mark.parametrize("mode", ["full", "scalar"])
def test_kl_against_self_is_zero(mode):
    p = small(dtype=np.float32)
    with T.no_grad():
        value = float(normal_kl_loss(p, FrozenReference(p), NORMAL, mode=mode).data)
    assert abs(value) <= 1e-6


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["full", "scalar"]))
def test_kl_is_nonnegative(seed, mode):
    p = small()
    ref = FrozenReference(p)
    rng = np.random.default_rng(seed)
    for t in p.values():
        t.data += rng.normal(0, 0.05, size=t.shape)
    with T.no_grad():
        assert float(normal_kl_loss(p, ref, NORMAL, mode=mode).data) >= 0


def test_kl_gradient_reaches_current_only():
    p = small()
    ref = FrozenReference(p)
    p["tok_emb"].data[3] += 0.1
    T.backward(normal_kl_loss(p, ref, NORMAL))
    assert np.any(p["tok_emb"].grad != 0)
    assert all(t.grad is None for t in ref.params.values())


def test_unknown_kl_mode():
    p = small()
    with pytest.raises(ContractError):
        normal_kl_loss(p, FrozenReference(p), NORMAL, mode="reverse")


def test_combined_objective_grad_check_float64():
    with T.precision(np.float64):
        base = small()
        ref = FrozenReference(base)
        rng = np.random.default_rng(0)
        cur = {n: Tensor(t.data + rng.normal(0, 0.02, t.shape)) for n, t in base.items()}
    names = list(cur)
    fb, nb = [make_pair("a", "b"), make_pair("c", "d")], [make_pair("e", "f"), make_pair("g", "h")]
    samples = [[nb[0].y, nb[1].y], [nb[1].y, nb[1].y]]
    w = LossWeights()

    def f(*ts):
        p = ModelParams(SMALL, dict(zip(names, ts)))
        return (
            T.scale(forget_loss(p, fb), w.eps1)
            + T.scale(random_mismatch_loss(p, fb, samples=samples), w.eps2)
            + T.scale(normal_kl_loss(p, ref, nb), w.eps3)
        )

    with T.precision(np.float64):
        assert T.grad_check(f, [cur[n] for n in names], max_checks=6) <= 1e-6


# --- gradient ascent ---------------------------------------------------------------


def test_ga_step_zero_rate_leaves_params():
    p = small()
    before = p.copy()
    ga_step(p, FORGET[0].x, FORGET[0].y, 0.0)
    assert p.equal(before)
    with pytest.raises(ContractError):
        ga_step(p, FORGET[0].x, FORGET[0].y, -1.0)


def test_ga_step_does_not_decrease_loss():
    p = small(dtype=np.float32)
    r = FORGET[0]
    before = loss_of(p, [r])
    ga_step(p, r.x, r.y, 1e-4)
    assert loss_of(p, [r]) >= before


def test_ga_two_steps_match_one_double_step_to_first_order():
    r = FORGET[1]
    ratios = []
    for lam in (1e-4, 5e-5):
        p = small()
        start = loss_of(p, [r])
        ga_step(p, r.x, r.y, lam)
        d1 = loss_of(p, [r]) - start
        ga_step(p, r.x, r.y, lam)
        d2 = loss_of(p, [r]) - start
        ratios.append(abs(d2 - 2 * d1) / abs(d1))
    assert max(ratios) < 1e-2


# --- unlearn_step ------------------------------------------------------------------


def step(p, weights, clip=1.0, optimizer=None, seed=0):
    return unlearn_step(
        p, FrozenReference(p), FORGET, NORMAL, POOL, weights, optimizer, rng=np.random.default_rng(seed), clip_norm=clip
    )


def test_all_weights_zero_is_a_no_op():
    p = small()
    before = p.copy()
    _, bd = step(p, LossWeights(0, 0, 0))
    assert p.equal(before)
    assert bd.total == 0


def test_breakdown_total_and_first_kl():
    p = small(dtype=np.float32)
    w = LossWeights()
    _, bd = step(p, w)
    assert abs(bd.l_nor) <= 1e-6
    assert bd.total == pytest.approx(w.eps1 * bd.l_fgt + w.eps2 * bd.l_rdn + w.eps3 * bd.l_nor, abs=1e-9)
    assert bd.forget_per_token == pytest.approx(-bd.l_fgt * 2 / sum(len(r.y) for r in FORGET), rel=1e-5)
    assert set(bd.to_record()) >= {"step", "l_fgt", "l_rdn", "l_nor", "total", "grad_norm"}


def test_forget_only_step_is_plain_ascent():
    r = FORGET[0]
    a, b = small(), small()
    w = LossWeights(eps1=1.0, eps2=0.0, eps3=0.0, lr=1e-3)
    unlearn_step(a, FrozenReference(a), [r], NORMAL, POOL, w, clip_norm=None)
    ga_step(b, r.x, r.y, 1e-3)
    for n in a:
        np.testing.assert_allclose(a[n].data, b[n].data, rtol=0, atol=1e-12)


def test_scale_equivalence_with_plain_update():
    a, b = small(dtype=np.float32), small(dtype=np.float32)
    w = LossWeights(lr=2e-3)
    step(a, w, clip=None)
    step(b, LossWeights(1.0, 2.0, 2.0, lr=1e-3), clip=None)
    for n in a:
        assert np.max(np.abs(a[n].data - b[n].data)) <= 1e-6


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_forget_only_steps_never_decrease_forget_loss(seed):
    p = small(seed, dtype=np.float32)
    w = LossWeights(eps1=1.0, eps2=0.0, eps3=0.0, lr=1e-3)
    ref = FrozenReference(p)
    opt = make_optimizer("plain", w.lr)
    prev = loss_of(p, FORGET)
    for _ in range(3):
        unlearn_step(p, ref, FORGET, NORMAL, POOL, w, opt)
        now = loss_of(p, FORGET)
        assert now >= prev
        prev = now


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_non_finite_loss_reports_breakdown():
    p = small(dtype=np.float32)
    ref = FrozenReference(p)
    p["layers.0.mlp.in"].data[...] = 1e30
    with pytest.raises(NumericError) as exc:
        unlearn_step(p, ref, FORGET, NORMAL, POOL, LossWeights())
    assert isinstance(exc.value.breakdown, LossBreakdown)


def test_empty_batches_rejected():
    p = small()
    with pytest.raises(ContractError):
        unlearn_step(p, FrozenReference(p), [], NORMAL, POOL, LossWeights())


# --- weights, guard, optimizers ------------------------------------------------------


def test_loss_weight_validation_collects_problems():
    with pytest.raises(ConfigError) as exc:
        LossWeights(eps1=-1, eps3=-2, lr=0)
    assert len(exc.value.problems) == 3
    with pytest.raises(ConfigError):
        LossWeights(forget_sign=0.5)


def test_divergence_guard_threshold():
    w = LossWeights()
    limit = 3 * math.log(259)
    calm = LossBreakdown(0, 0, 0, 0, forget_per_token=limit - 0.01)
    wild = LossBreakdown(0, 0, 0, 0, forget_per_token=limit + 0.01)
    assert divergence_guard(w, calm, 259) is w
    assert divergence_guard(w, wild, 259).eps1 == 0
    assert divergence_guard(w, wild, 259).eps2 == w.eps2


def test_adam_first_step_moves_by_lr():
    p = small()
    p.zero_grad()
    for t in p.values():
        t.grad = np.full(t.shape, 3.0)
    before = p["tok_emb"].data.copy()
    make_optimizer("adam", 1e-2).step(p)
    np.testing.assert_allclose(before - p["tok_emb"].data, 1e-2, rtol=1e-6)


def test_clip_rescales_to_max_norm():
    p = small()
    for t in p.values():
        t.grad = np.ones(t.shape)
    norm = obj.clip_gradients(p, 1.0)
    assert norm == pytest.approx(math.sqrt(p.num_parameters()))
    assert obj.global_grad_norm(p) == pytest.approx(1.0, rel=1e-9)


def test_unknown_optimizer():
    with pytest.raises(ConfigError):
        make_optimizer("sgdm", 0.1)


def test_synthetic_batches_fit_default_context():
    c = make_synthetic_corpora(0, 4, 4, 4)
    p = init_params(ModelConfig(d_model=16, n_heads=2))
    with T.no_grad():
        losses, ntok = sequence_losses(p, c.forget_set())
    assert losses.shape == (4,) and ntok > 0
