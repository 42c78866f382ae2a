import math
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from unislp.backbone import ModelConfig
from unislp.decoding import DecodeConfig, CTCPrefixScorer, ctc_prefix_score, greedy_decode, joint_beam_search
from unislp.objective import ctc_log_prob
from unislp.tensor import Tensor

from oracles import ctc_brute, ctc_prefix_brute, decoder_instance, exhaustive_joint, log_softmax

FULL = 6 ** 4


# ---------------------------------------------------------------- prefix scores


def test_empty_prefix_is_log_one(rng):
    assert ctc_prefix_score([], rng.normal(size=(3, 4)), 0) == 0.0


def test_two_frame_hand_case():
    assert ctc_prefix_score([1], np.zeros((2, 2)), 0) == pytest.approx(math.log(0.75), abs=1e-15)


@given(st.integers(1, 5), st.integers(2, 4), st.integers(0, 3), st.integers(0, 10_000))
def test_prefix_matches_enumeration(t, v, g, seed):
    r = np.random.default_rng(seed)
    logits = r.normal(size=(t, v)) * 2
    prefix = list(r.integers(1, v, size=g))
    expected = ctc_prefix_brute(log_softmax(logits), prefix, 0)
    got = ctc_prefix_score(prefix, logits, 0)
    if math.isinf(expected):
        assert got == -math.inf
    else:
        assert abs(got - expected) < 1e-9


@given(st.integers(1, 5), st.integers(2, 4), st.integers(1, 3), st.integers(0, 10_000))
def test_prefix_dominates_full_label(t, v, g, seed):
    r = np.random.default_rng(seed)
    logits = r.normal(size=(t, v))
    prefix = list(r.integers(1, v, size=g))
    full = ctc_log_prob(log_softmax(logits), prefix, 0)
    assert ctc_prefix_score(prefix, logits, 0) >= full - 1e-12


def test_scorer_full_score_matches_brute(rng):
    lp = log_softmax(rng.normal(size=(4, 3)))
    scorer = CTCPrefixScorer(lp, 0)
    state = scorer.initial_state()
    for tok in (1, 1):
        _, states = scorer.extend(state, [tok])
        state = states[0]
    assert scorer.full_score(state) == pytest.approx(ctc_brute(lp, [1, 1], 0), abs=1e-12)


def test_prefix_rejects_blank(rng):
    with pytest.raises(ValueError):
        ctc_prefix_score([0], rng.normal(size=(3, 3)), 0)


# ---------------------------------------------------------------- beam search


@pytest.mark.parametrize("seed", range(6))
@pytest.mark.parametrize("weight", [0.0, 0.4, 1.0])
def test_full_width_beam_is_exhaustive_argmax(seed, weight):
    model, enc, ctc = decoder_instance(seed)
    best = joint_beam_search(enc, ctc, model, cfg=DecodeConfig(beam_size=FULL, ctc_weight=weight, max_len=4))[0]
    tokens, score = exhaustive_joint(model, enc, ctc, weight, 4, model.config.blank_id)
    assert best.tokens == tokens
    assert best.joint == pytest.approx(score, abs=1e-9)


def test_separator_freezes_ctc_term():
    model, enc, ctc = decoder_instance(3)
    sep = 4
    hyps = joint_beam_search(enc, ctc, model, cfg=DecodeConfig(beam_size=FULL, ctc_weight=0.4, max_len=4),
                             sep_id=sep)
    tokens, score = exhaustive_joint(model, enc, ctc, 0.4, 4, model.config.blank_id, sep_id=sep)
    assert hyps[0].tokens == tokens and hyps[0].joint == pytest.approx(score, abs=1e-9)
    lp = log_softmax(ctc.data)
    for h in hyps:
        if sep in h.output:
            assert h.ctc_score == pytest.approx(ctc_log_prob(lp, h.output[: h.output.index(sep)], 3), abs=1e-12)


@pytest.mark.parametrize("seed", range(5))
def test_beam_one_without_ctc_is_greedy(seed):
    model, enc, ctc = decoder_instance(seed)
    hyp = joint_beam_search(enc, ctc, model, cfg=DecodeConfig(beam_size=1, ctc_weight=0.0, max_len=6))[0]
    assert hyp.output == greedy_decode(enc, model, max_len=6)


class UniformDecoder:
    """Attention scores carry no information: every next-token distribution is uniform."""

    def __init__(self, vocab_size=6):
        self.config = ModelConfig(d_model=4, n_heads=1, d_ff=4, encoder_layers=1, decoder_layers=1,
                                  vocab_size=vocab_size, n_class_labels=1, max_positions=16, adapter_dim=1, d_in=1)

    def decode_batch(self, states, lengths, prefixes, module=None):
        u = max(len(p) for p in prefixes)
        return Tensor(np.zeros((len(prefixes), u, self.config.vocab_size)))


@pytest.mark.parametrize("seed", range(4))
def test_ctc_only_ranking_with_uniform_attention(seed):
    r = np.random.default_rng(seed)
    model = UniformDecoder()
    ctc = r.normal(size=(4, 6)) * 3
    hyps = joint_beam_search(np.zeros((4, 4)), ctc, model, cfg=DecodeConfig(beam_size=FULL, ctc_weight=1.0, max_len=4))
    lp = log_softmax(ctc)
    full = [ctc_log_prob(lp, h.output[:-1], 3) for h in hyps]
    np.testing.assert_allclose([h.joint for h in hyps], full, atol=1e-12)
    assert full == sorted(full, reverse=True)


@given(st.integers(0, 500), st.integers(1, 5), st.sampled_from([0.0, 0.4, 1.0]))
@settings(max_examples=30)
def test_wider_beam_never_worse(seed, b, weight):
    model, enc, ctc = decoder_instance(seed)
    narrow = joint_beam_search(enc, ctc, model, cfg=DecodeConfig(beam_size=b, ctc_weight=weight, max_len=4))[0]
    wide = joint_beam_search(enc, ctc, model, cfg=DecodeConfig(beam_size=b + 1, ctc_weight=weight, max_len=4))[0]
    if not narrow.truncated and not wide.truncated:
        assert wide.joint >= narrow.joint - 1e-12


def test_joint_recomputable_and_sorted():
    model, enc, ctc = decoder_instance(1)
    hyps = joint_beam_search(enc, ctc, model, cfg=DecodeConfig(beam_size=5, ctc_weight=0.4, max_len=5))
    for h in hyps:
        assert h.joint == pytest.approx(0.6 * h.att_score + 0.4 * h.ctc_score, abs=1e-12)
        assert h.finished and h.tokens[-1] == model.config.eos_id
    assert [h.joint for h in hyps] == sorted((h.joint for h in hyps), reverse=True)


def test_repeated_search_is_identical():
    model, enc, ctc = decoder_instance(2)
    a = joint_beam_search(enc, ctc, model, cfg=DecodeConfig(beam_size=3))
    b = joint_beam_search(enc, ctc, model, cfg=DecodeConfig(beam_size=3))
    assert [(h.tokens, h.joint) for h in a] == [(h.tokens, h.joint) for h in b]
    assert greedy_decode(enc, model) == greedy_decode(enc, model)


def test_truncation_flag_when_nothing_finishes():
    model = UniformDecoder()
    model.decode_batch = lambda s, l, prefixes, m=None: Tensor(
        np.tile(np.array([0, 0, -50.0, 0, 0, 0]), (len(prefixes), max(map(len, prefixes)), 1)))
    hyps = joint_beam_search(np.zeros((2, 4)), np.zeros((2, 6)), model, cfg=DecodeConfig(beam_size=2, ctc_weight=0.0,
                                                                                         max_len=2))
    assert hyps and all(h.truncated and not h.finished for h in hyps)


def test_ties_break_on_token_ids():
    hyps = joint_beam_search(np.zeros((2, 4)), np.zeros((2, 6)), UniformDecoder(),
                             cfg=DecodeConfig(beam_size=FULL, ctc_weight=0.0, max_len=2))
    same = [h.tokens for h in hyps if h.joint == hyps[0].joint]
    assert same == sorted(same)


@pytest.mark.parametrize("kw", [{"beam_size": 0}, {"ctc_weight": 1.5}, {"max_len": 0}])
def test_config_validation(kw):
    with pytest.raises(ValueError):
        DecodeConfig(**kw)
