import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from icexplain.models import BlackBoxModel, Prediction, logistic_model
from icexplain.perturb import (Neighborhood, NeighborhoodCache, PerturbationConfig,
                               PerturbationError, gen_neighborhood, gen_text_neighborhood,
                               instance_rng, sample_masks, select_icl)

MODEL = logistic_model([2.0, -1.0, 0.5, 0.0])
X = np.array([0.114, 0.111, 0.004, 0.0])


def test_defaults():
    cfg = PerturbationConfig()
    assert (cfg.sigma, cfg.n_x, cfg.n_icl, cfg.format) == (0.1, 10_000, 16, "raw-delta")
    assert len(gen_neighborhood(MODEL, X, cfg)) == 10_000


def test_invalid_config():
    with pytest.raises(PerturbationError):
        PerturbationConfig(sigma=-1)
    with pytest.raises(PerturbationError):
        PerturbationConfig(n_x=8, n_icl=16)


def test_sigma_zero_is_degenerate():
    nb = gen_neighborhood(MODEL, X, PerturbationConfig(sigma=0.0, n_x=50))
    assert np.all(nb.perturbed == X)
    np.testing.assert_array_equal(nb.probs, np.tile(nb.base.probabilities, (50, 1)))


def test_reconstruction_and_clt():
    nb = gen_neighborhood(MODEL, X, PerturbationConfig(seed=3))
    assert np.array_equal(X + nb.deltas, nb.perturbed)
    assert np.all(np.abs(nb.deltas.mean(axis=0)) < 4 * 0.1 / np.sqrt(10_000))


def test_seeded_determinism():
    a = gen_neighborhood(MODEL, X, PerturbationConfig(n_x=100), rng=instance_rng(1, 7, "neighborhood"))
    b = gen_neighborhood(MODEL, X, PerturbationConfig(n_x=100), rng=instance_rng(1, 7, "neighborhood"))
    assert np.array_equal(a.deltas, b.deltas)
    c = gen_neighborhood(MODEL, X, PerturbationConfig(n_x=100), rng=instance_rng(1, 8, "neighborhood"))
    assert not np.array_equal(a.deltas, c.deltas)


def test_dimension_mismatch():
    with pytest.raises(PerturbationError):
        gen_neighborhood(MODEL, np.zeros(3), PerturbationConfig(n_x=10))


def _fake(labels, conf, base=1, d=2):
    labels = np.asarray(labels)
    conf = np.asarray(conf, dtype=float)
    probs = np.where(labels[:, None] == np.array([0, 1]), conf[:, None], 1 - conf[:, None])
    deltas = np.arange(len(labels) * d, dtype=float).reshape(len(labels), d)
    x = np.zeros(d)
    return Neighborhood(x, Prediction.from_probabilities(np.array([1 - 0.7, 0.7]) if base else
                                                         np.array([0.7, 0.3])),
                        deltas, x + deltas, probs)


def test_balanced_selection_and_order():
    labels = [0] * 10 + [1] * 10
    conf = np.linspace(0.51, 0.99, 20)
    nb = _fake(labels, conf)
    icl = select_icl(nb, PerturbationConfig(n_x=20, n_icl=16))
    assert len(icl) == 16 and icl.balanced
    assert list(icl.outputs) == [-1, 0] * 8
    # confidence descending within each class
    c0 = [nb.confidences[np.flatnonzero((nb.deltas == r).all(1))[0]] for r in icl.rows[0::2]]
    assert c0 == sorted(c0, reverse=True)


def test_odd_size_favours_base_class():
    nb = _fake([0] * 10 + [1] * 10, np.full(20, 0.8), base=1)
    icl = select_icl(nb, PerturbationConfig(n_x=20, n_icl=5))
    assert (icl.outputs == 0).sum() == 3


def test_backfill_single_class():
    nb = _fake([1] * 20, np.full(20, 0.9))
    icl = select_icl(nb, PerturbationConfig(n_x=20, n_icl=16))
    assert len(icl) == 16 and not icl.balanced


def test_change_sign_convention():
    nb = _fake([0] * 20, np.full(20, 0.9), base=1)
    icl = select_icl(nb, PerturbationConfig(n_x=20, n_icl=4))
    assert set(icl.outputs) == {-1}


def test_perturbed_sample_format_outputs_labels():
    nb = _fake([0] * 5 + [1] * 5, np.full(10, 0.9))
    icl = select_icl(nb, PerturbationConfig(n_x=10, n_icl=4, format="perturbed-sample"))
    assert sorted(icl.outputs) == [0, 0, 1, 1]


def test_neighborhood_smaller_than_icl():
    nb = _fake([0, 1], [0.9, 0.9])
    with pytest.raises(PerturbationError):
        select_icl(nb, PerturbationConfig(n_x=16, n_icl=16))


@settings(max_examples=60, deadline=None)
@given(labels=st.lists(st.integers(0, 1), min_size=16, max_size=60), n=st.integers(1, 16),
       base=st.integers(0, 1))
def test_balance_property(labels, n, base):
    nb = _fake(labels, np.full(len(labels), 0.8), base=base)
    icl = select_icl(nb, PerturbationConfig(n_x=len(labels), n_icl=n))
    n0 = int((icl.outputs == -base).sum())
    n1 = len(icl) - n0
    assert len(icl) == n
    if min(labels.count(0), labels.count(1)) >= n // 2 + n % 2:
        assert abs(n0 - n1) <= 1


KEYWORD = BlackBoxModel("bow-text", (np.array([[-3.0, 3.0], [0.0, 0.0], [0.0, 0.0]]),),
                        (np.array([1.5, -1.5]),), vocabulary={"looked": 0, "it": 1, "like": 2})


def test_text_neighborhood_changes():
    toks = ["it", "looked", "like"]
    masks = np.array([[False, True, False], [True, False, False]])
    nb = gen_text_neighborhood(KEYWORD, toks, PerturbationConfig(n_x=16), masks=masks)
    assert nb.changes.tolist() == [1, 0]
    assert nb.removed(0) == ["looked"]


def test_text_neighborhood_size_and_errors():
    nb = gen_text_neighborhood(KEYWORD, ["it", "looked", "like"], PerturbationConfig())
    assert len(nb) == 16
    with pytest.raises(PerturbationError):
        gen_text_neighborhood(KEYWORD, ["it"], PerturbationConfig())


@settings(max_examples=60, deadline=None)
@given(n_tokens=st.integers(2, 30), seed=st.integers(0, 10**6))
def test_masks_are_proper_subsets(n_tokens, seed):
    masks = sample_masks(n_tokens, 16, np.random.default_rng(seed))
    s = masks.sum(axis=1)
    assert np.all((s > 0) & (s < n_tokens))


def test_neighborhood_cache(tmp_path):
    cache = NeighborhoodCache(tmp_path)
    cfg = PerturbationConfig(n_x=32)
    key = cache.key("d", "m", 0, cfg)
    first = cache.get_or_create(key, lambda: gen_neighborhood(MODEL, X, cfg))
    second = cache.get_or_create(key, lambda: pytest.fail("should hit cache"))
    assert np.array_equal(first.deltas, second.deltas)
    assert key != cache.key("d", "m", 1, cfg)
