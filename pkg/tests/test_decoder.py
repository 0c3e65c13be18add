import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mmtl.decoder import beam_search, default_max_len, ensemble_step, greedy_search
from mmtl.model import VARIANTS, FrozenModel
from mmtl.textpipe import EOS
from oracles import exhaustive_best, random_toy


# --- ensemble_step ---------------------------------------------------------

def test_ensemble_single_is_identity():
    p = np.array([0.2, 0.3, 0.5])
    np.testing.assert_array_equal(ensemble_step([p]), p)


def test_ensemble_mean():
    np.testing.assert_array_equal(ensemble_step([[1.0, 0.0], [0.0, 1.0]]), [0.5, 0.5])


def test_ensemble_length_mismatch():
    with pytest.raises(ValueError):
        ensemble_step([[0.5, 0.5], [1.0, 0.0, 0.0]])


def test_ensemble_unknown_mode():
    with pytest.raises(ValueError):
        ensemble_step([[1.0], [1.0]], mode="median")


simplex = st.lists(st.floats(0.0, 1.0), min_size=4, max_size=4).filter(
    lambda v: sum(v) > 1e-3).map(lambda v: np.array(v) / sum(v))


@settings(max_examples=100, deadline=None)
@given(st.lists(simplex, min_size=1, max_size=6), st.sampled_from(["arith", "geo"]))
def test_ensemble_stays_on_simplex(dists, mode):
    if mode == "geo":
        dists = [0.5 * d + 0.125 for d in dists]   # geometric mean needs full support
    out = ensemble_step(dists, mode)
    assert (out >= 0).all()
    assert abs(out.sum() - 1.0) <= 1e-6


# --- beam search -----------------------------------------------------------

@pytest.mark.parametrize("seed", range(8))
def test_beam_matches_exhaustive_search(seed):
    model, sample = random_toy(seed)
    ids, score = exhaustive_best(model, sample, max_len=4)
    res = beam_search(model, sample, beam_size=6 ** 3, max_len=4)
    assert res.ids == ids
    assert res.logprob == pytest.approx(score, abs=1e-9)


@pytest.mark.parametrize("seed", range(20))
def test_beam_one_equals_greedy(seed):
    model, sample = random_toy(seed, content=8, sharpen=1.0)
    g = greedy_search(model, sample, max_len=10)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        b = beam_search(model, sample, beam_size=1, max_len=10)
    assert b.ids == g.ids
    assert b.logprob == pytest.approx(g.logprob, abs=1e-9)


@pytest.mark.parametrize("variant", VARIANTS)
def test_ensemble_of_identical_models(variant):
    model, sample = random_toy(3, variant=variant, eos_bias=2.0)
    single = beam_search(model, sample, beam_size=4)
    copies = [FrozenModel(model.cfg, model.params.copy()) for _ in range(5)]
    multi = beam_search(copies, sample, beam_size=4)
    assert multi.ids == single.ids
    assert multi.logprob == pytest.approx(single.logprob, abs=1e-6)


@pytest.mark.parametrize("seed", range(5))
def test_single_final_eos(seed):
    model, sample = random_toy(seed, eos_bias=2.0)
    res = beam_search(model, sample, beam_size=5)
    assert res.finished
    assert res.ids.count(EOS) == 1 and res.ids[-1] == EOS
    assert EOS not in res.tokens


@pytest.mark.filterwarnings("ignore:no hypothesis finished")
@pytest.mark.parametrize("seed", range(5))
def test_each_step_ranks_exactly_beam_candidates(seed):
    model, sample = random_toy(seed, content=8, sharpen=0.5, eos_bias=0.3)
    b = 4
    # length_norm disables the early stop so retirement spans many steps
    res = beam_search(model, sample, beam_size=b, max_len=8, length_norm=True)
    assert sum(res.n_retired) > 0
    # every step keeps b candidates: the live ones plus those retired with <eos>
    for t in range(1, len(res.n_live)):
        assert res.n_live[t] == b - res.n_retired[t - 1]
        assert res.n_live[t] <= b


def test_decoding_is_deterministic():
    model, sample = random_toy(11)
    assert beam_search(model, sample, 6).ids == beam_search(model, sample, 6).ids


def test_unfinished_search_warns():
    model, sample = random_toy(0)
    model.params["out.b_o"].data[EOS] = -1e4
    with pytest.warns(UserWarning, match="no hypothesis finished"):
        res = beam_search(model, sample, beam_size=3, max_len=3)
    assert not res.finished and len(res.ids) == 3


def test_length_norm_prefers_per_token_score():
    model, sample = random_toy(4, eos_bias=2.0)
    plain = beam_search(model, sample, beam_size=8)
    normed = beam_search(model, sample, beam_size=8, length_norm=True)
    assert normed.finished and plain.finished
    assert normed.logprob / len(normed.ids) >= plain.logprob / len(plain.ids) - 1e-9


def test_default_max_len():
    assert default_max_len(4) == 17


def test_beam_rejects_bad_size():
    model, sample = random_toy(0)
    with pytest.raises(ValueError):
        beam_search(model, sample, beam_size=0)
