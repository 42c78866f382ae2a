import itertools
import math
from types import SimpleNamespace

import mpmath
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unislp import tensor as T
from unislp.gradcheck import check_fn
from unislp.objective import (ObjectiveConfig, ObjectiveConfigError, combine, ctc_log_prob, ctc_loss,
                              ctc_loss_batch, ctc_min_frames, encoder_ce, nll_task_weighted, total_objective)
from unislp.taskspace import TargetSequence
from unislp.tensor import Tensor

from oracles import ctc_brute, log_softmax

BLANK = 0


def target(owners_by_task, v=5):
    """<s> + tokens with the given ownership; ids cycle through 1..v-1."""
    toks, owners = [1], [None]
    for task, n in owners_by_task:
        toks += [1 + (len(toks) % (v - 1)) for _ in range(n)]
        owners += [task] * n
    return TargetSequence(toks, owners, [t for t, _ in owners_by_task])


# ---------------------------------------------------------------- CTC


def test_single_frame_uniform_is_log3():
    assert ctc_loss(Tensor(np.zeros((1, 3))), [1], BLANK).item() == pytest.approx(math.log(3), abs=1e-15)


def test_two_labels_three_frames_has_five_alignments():
    paths = [p for p in itertools.product(range(3), repeat=3)
             if tuple(s for i, s in enumerate(p) if s != BLANK and (i == 0 or p[i - 1] != s)) == (1, 2)]
    assert len(paths) == 5
    assert ctc_loss(Tensor(np.zeros((3, 3))), [1, 2], BLANK).item() == pytest.approx(-math.log(5 / 27), abs=1e-14)


def test_min_frames_counts_repeats():
    assert ctc_min_frames([1, 1, 2]) == 4
    assert ctc_min_frames([1, 2, 3]) == 3


@given(st.integers(1, 6), st.integers(1, 3), st.integers(2, 4), st.integers(0, 10_000))
def test_forward_matches_path_enumeration(t, l, v, seed):
    r = np.random.default_rng(seed)
    logits = r.normal(size=(t, v)) * 2
    label = list(r.integers(1, v, size=l))
    expected = ctc_brute(log_softmax(logits), label, BLANK)
    loss = ctc_loss(Tensor(logits), label, BLANK)
    if math.isinf(expected):
        assert loss.infeasible and math.isinf(loss.item())
        assert t < ctc_min_frames(label)
    else:
        assert not loss.infeasible
        assert abs(loss.item() + expected) < 1e-9


def test_infeasible_is_flagged_inf_not_nan(rng):
    x = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    loss = ctc_loss(x, [1, 1], BLANK)
    assert loss.infeasible and loss.item() == math.inf
    T.backward(loss)
    assert np.all(np.isfinite(x.grad))


def test_batch_with_padding_matches_singles(rng):
    logits = rng.normal(size=(2, 5, 4))
    labels, lengths = [[1, 2], [3]], [5, 3]
    batch = ctc_loss_batch(Tensor(logits), labels, lengths, BLANK)
    singles = [ctc_loss(Tensor(logits[b, :n]), labels[b], BLANK).item() for b, n in enumerate(lengths)]
    np.testing.assert_allclose(batch.per_example, singles, rtol=1e-13)
    assert batch.item() == pytest.approx(np.mean(singles), rel=1e-13)


def test_padded_frames_get_no_gradient(rng):
    x = Tensor(rng.normal(size=(2, 5, 4)), requires_grad=True)
    T.backward(ctc_loss_batch(x, [[1, 2], [3]], [5, 3], BLANK))
    assert np.all(x.grad[1, 3:] == 0)


@given(st.integers(0, 10_000))
@settings(max_examples=25)
def test_ctc_gradient_finite_differences(seed):
    r = np.random.default_rng(seed)
    t, v = int(r.integers(3, 7)), int(r.integers(3, 5))
    label = list(r.integers(1, v, size=int(r.integers(1, 3))))
    res = check_fn("ctc", lambda x: ctc_loss(x, label, BLANK), [r.normal(size=(t, v))], seed=seed)
    assert res.max_rel_err < 1e-5


def test_ctc_rejects_bad_labels():
    with pytest.raises(ValueError):
        ctc_loss(Tensor(np.zeros((3, 3))), [], BLANK)
    with pytest.raises(ValueError):
        ctc_loss(Tensor(np.zeros((3, 3))), [BLANK], BLANK)


def test_log_prob_of_empty_label_is_all_blank(rng):
    lp = log_softmax(rng.normal(size=(4, 3)))
    assert ctc_log_prob(lp, [], BLANK) == pytest.approx(ctc_brute(lp, [], BLANK), abs=1e-12)


# ---------------------------------------------------------------- decoder NLL


def test_single_task_is_plain_mean_ce(rng):
    tgt = target([("asr", 4)])
    logits = rng.normal(size=(4, 5))
    loss, per_task = nll_task_weighted(Tensor(logits), tgt, ObjectiveConfig(lambda_task={"asr": 1.0}))
    plain = T.cross_entropy_rows(Tensor(logits), tgt.tokens[1:]).item()
    assert loss.item() == pytest.approx(plain, rel=1e-14)
    assert per_task["asr"] == pytest.approx(plain, rel=1e-14)


def test_new_old_weighting(rng):
    tgt = target([("asr", 3), ("er", 2)])
    logits = rng.normal(size=(5, 5))
    rows = -log_softmax(logits)[np.arange(5), tgt.tokens[1:]]
    l_old, l_new = rows[:3].mean(), rows[3:].mean()
    loss, per_task = nll_task_weighted(Tensor(logits), tgt, ObjectiveConfig(lambda_task={"er": 0.9, "asr": 0.1}))
    assert loss.item() == pytest.approx(0.9 * l_new + 0.1 * l_old, rel=1e-13)
    assert per_task == pytest.approx({"asr": l_old, "er": l_new}, rel=1e-13)


def test_zero_weight_task_is_excluded(rng):
    tgt = target([("asr", 3), ("er", 2)])
    logits = rng.normal(size=(5, 5))
    loss, _ = nll_task_weighted(Tensor(logits), tgt, ObjectiveConfig(lambda_task={"asr": 1.0, "er": 0.0}))
    only = T.cross_entropy_rows(Tensor(logits[:3]), tgt.tokens[1:4]).item()
    assert loss.item() == pytest.approx(only, rel=1e-14)


@given(st.floats(0.01, 100), st.integers(0, 1000))
def test_lambda_homogeneity(c, seed):
    r = np.random.default_rng(seed)
    tgt = target([("asr", 3), ("er", 1)])
    logits = Tensor(r.normal(size=(4, 5)))
    base = {"asr": 0.3, "er": 0.7}
    cfg = ObjectiveConfig(lambda_ctc=0.0, lambda_task=base)
    scaled = ObjectiveConfig(lambda_ctc=0.0, lambda_task={k: c * v for k, v in base.items()})
    a, _ = nll_task_weighted(logits, tgt, cfg)
    b, _ = nll_task_weighted(logits, tgt, scaled)
    assert b.item() == pytest.approx(c * a.item(), rel=1e-12)
    assert combine(b, None, None, scaled).item() == pytest.approx(c * a.item(), rel=1e-12)


@given(st.integers(0, 1000), st.integers(0, 3), st.floats(0.01, 5))
def test_raising_correct_logit_lowers_position_nll(seed, pos, bump):
    r = np.random.default_rng(seed)
    tgt = target([("asr", 4)])
    logits = r.normal(size=(4, 5))
    cfg = ObjectiveConfig(lambda_task={"asr": 1.0})
    before = nll_task_weighted(Tensor(logits), tgt, cfg)[0].item()
    logits[pos, tgt.tokens[pos + 1]] += bump
    assert nll_task_weighted(Tensor(logits), tgt, cfg)[0].item() < before


def test_nll_gradient(rng):
    tgt = target([("asr", 3), ("er", 2)])
    cfg = ObjectiveConfig(lambda_task={"asr": 0.1, "er": 0.9})
    res = check_fn("nll", lambda x: nll_task_weighted(x, tgt, cfg)[0], [rng.normal(size=(5, 5))])
    assert res.max_rel_err < 1e-5


# ---------------------------------------------------------------- encoder CE


def test_encoder_ce_uniform_is_log4():
    assert encoder_ce(Tensor(np.zeros(4)), 2).item() == pytest.approx(math.log(4), abs=1e-15)


def test_encoder_ce_dominant_logit_goes_to_zero():
    logits = np.zeros(4)
    logits[1] = 50.0
    assert encoder_ce(Tensor(logits), 1).item() < 1e-20


def test_encoder_ce_six_way_high_precision(rng):
    mpmath.mp.dps = 40
    logits = rng.normal(size=6) * 3
    exact = mpmath.log(mpmath.fsum(mpmath.exp(mpmath.mpf(x)) for x in logits)) - mpmath.mpf(logits[4])
    assert encoder_ce(Tensor(logits), 4).item() == pytest.approx(float(exact), rel=1e-14)


def test_encoder_ce_label_range():
    with pytest.raises(ValueError):
        encoder_ce(Tensor(np.zeros(3)), 3)


# ---------------------------------------------------------------- combination


def test_hand_combination():
    cfg = ObjectiveConfig(lambda_ctc=0.3)
    assert combine(Tensor(2.0), Tensor(4.0), None, cfg).item() == pytest.approx(2.6, abs=1e-15)


def test_no_ctc_no_ce_is_nll():
    assert combine(Tensor(1.7), None, None, ObjectiveConfig(lambda_ctc=0.0)).item() == 1.7


def test_classification_adds_ce_without_ctc():
    cfg = ObjectiveConfig(lambda_ctc=0.0, is_classification=True)
    assert combine(Tensor(1.25), None, Tensor(0.5), cfg).item() == 1.75


def _enc(rng, b, t, v, c):
    return SimpleNamespace(ctc_logits=Tensor(rng.normal(size=(b, t, v))), lengths=np.full(b, t),
                           cls_logits=Tensor(rng.normal(size=(b, c))))


@pytest.mark.parametrize("lambda_ctc,cls", [(0.0, False), (0.3, False), (0.0, True), (0.3, True), (1.0, False)])
def test_total_identity(rng, lambda_ctc, cls):
    cfg = ObjectiveConfig(lambda_ctc=lambda_ctc, is_classification=cls, blank_id=BLANK,
                          lambda_task={"asr": 0.4, "er": 0.6})
    tgts = [target([("asr", 2), ("er", 1)]), target([("asr", 3), ("er", 1)])]
    enc = _enc(rng, 2, 6, 5, 3)
    br = total_objective(enc, Tensor(rng.normal(size=(2, 4, 5))), tgts, cfg, [[1, 2], [3, 4, 1]], [0, 2])
    v = br.values()
    assert v["total"] == pytest.approx((1 - lambda_ctc) * v["nll"] + lambda_ctc * v["ctc"] + int(cls) * v["ce"],
                                       abs=1e-12)
    assert (br.ctc is None) == (lambda_ctc == 0) and (br.ce is None) == (not cls)


def test_total_requires_labels(rng):
    enc = _enc(rng, 1, 4, 5, 3)
    tgt = [target([("asr", 2)])]
    with pytest.raises(ObjectiveConfigError):
        total_objective(enc, Tensor(rng.normal(size=(1, 3, 5))), tgt, ObjectiveConfig(blank_id=BLANK))
    with pytest.raises(ObjectiveConfigError):
        total_objective(enc, Tensor(rng.normal(size=(1, 3, 5))), tgt,
                        ObjectiveConfig(lambda_ctc=0.0, is_classification=True))


def test_config_validation():
    with pytest.raises(ObjectiveConfigError):
        ObjectiveConfig(lambda_ctc=1.5)
    with pytest.raises(ObjectiveConfigError):
        ObjectiveConfig(lambda_task={"asr": -1.0})
