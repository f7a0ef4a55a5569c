"""Acceptance criteria, run at their stated tolerances.

Each check records a verdict in ``acceptance_log``; the session summary prints
one PASS/FAIL line per criterion.  Parts that need data not shipped with the
package fail with the reason rather than being skipped.
"""

import time
from functools import lru_cache

import numpy as np
import pytest

from acceptance_log import record
from icexplain import data, models
from icexplain.explainers import (brute_force_shapley, grad, grad_x_input,
                                  integrated_gradients, kernel_shap, kernel_shap_values, lime,
                                  lime_text, random_explainer, smoothgrad)
from icexplain.llm import LlmConfig, importance_order
from icexplain.metrics import (MetricConfig, auc_over_k, feature_agreement, pgi, pgu,
                               prediction_gap_text, rank_agreement)
from icexplain.parser import REFUSAL, parse_topk, parse_words
from icexplain.perturb import instance_rng
from icexplain.prompts import letters
from icexplain.runner import ExperimentConfig, prepare, read_results, run_experiment

N = 100
KS = (1, 2, 3)
TABULAR = ("blood", "recidivism", "adult", "credit")
TEXT = ("amazon", "imdb", "yelp")
LR_ANCHORS = {"blood": 0.7059, "adult": 0.7737, "recidivism": 0.7690, "credit": 0.8737}


@lru_cache(maxsize=None)
def lr_setup(name):
    ds = data.load_dataset(name)
    model = models.train(ds, "lr")
    gt = tuple(int(i) for i in importance_order(model))
    return ds, model, gt, ds.X_test[:N]


def load_or_fail(criterion, part, name):
    try:
        return lr_setup(name)
    except data.DataError as exc:
        record(criterion, part, False, f"dataset unavailable ({exc})")
        pytest.fail(f"{name} data unavailable: {exc}")


def auc_fa_ra(ranking, gt):
    return (auc_over_k([feature_agreement(ranking, gt, k) for k in KS]),
            auc_over_k([rank_agreement(ranking, gt, k) for k in KS]))


def mean_fa_ra(explain_fn, X, gt):
    pairs = np.array([auc_fa_ra(explain_fn(i, x).ranking, gt) for i, x in enumerate(X)])
    return pairs.mean(axis=0), pairs.std(axis=0)


GRADIENT = {
    "grad": lambda m: lambda i, x: grad(m, x),
    "smoothgrad": lambda m: lambda i, x: smoothgrad(m, x, rng=instance_rng(0, i, "smoothgrad")),
    "ig": lambda m: lambda i, x: integrated_gradients(m, x),
}


# 1 -------------------------------------------------------------------------------

@pytest.mark.parametrize("name", ["blood", "adult"])
def test_c01_gradient_methods_perfect_on_lr(name):
    ds, model, gt, X = load_or_fail(1, name, name)
    start = time.perf_counter()
    scores = {m: mean_fa_ra(make(model), X, gt) for m, make in GRADIENT.items()}
    elapsed = time.perf_counter() - start
    ok = all(np.all(mean == 1.0) and np.all(sd == 0.0) for mean, sd in scores.values())
    ok = ok and elapsed < 120
    detail = ", ".join(f"{m} FA={s[0][0]:.3f} RA={s[0][1]:.3f}" for m, s in scores.items())
    record(1, name, ok, f"{detail} ({elapsed:.1f}s)")
    assert ok, detail


# 2 -------------------------------------------------------------------------------

@pytest.mark.parametrize("name", TABULAR)
def test_c02_lime_on_lr(name):
    ds, model, gt, X = load_or_fail(2, name, name)
    start = time.perf_counter()
    (fa, ra), _ = mean_fa_ra(lambda i, x: lime(model, x, 1000, rng=instance_rng(0, i, "lime")),
                             X, gt)
    elapsed = time.perf_counter() - start
    ok = fa >= 0.95 and elapsed < 300
    record(2, name, ok, f"FA={fa:.3f} RA={ra:.3f} ({elapsed:.1f}s)")
    assert ok


# 3 -------------------------------------------------------------------------------

def test_c03_itg_shap_below_gradients_on_blood():
    ds, model, gt, X = load_or_fail(3, "blood", "blood")
    bg = ds.X_train.mean(axis=0)
    itg = mean_fa_ra(lambda i, x: grad_x_input(model, x), X, gt)[0][0]
    shap = mean_fa_ra(lambda i, x: kernel_shap(model, x, bg, rng=instance_rng(0, i, "shap")),
                      X, gt)[0][0]
    floor = min(mean_fa_ra(make(model), X, gt)[0][0] for make in GRADIENT.values())
    ok = all(0.6 <= v <= 0.85 and v < floor for v in (itg, shap))
    record(3, "blood", ok, f"ITG={itg:.3f} SHAP={shap:.3f} gradient min={floor:.3f}")
    assert ok


# 4 -------------------------------------------------------------------------------

def test_c04_exact_kernel_shap_equals_brute_force():
    start = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for i in range(50):
        d = int(rng.integers(2, 11))
        model = models.init_model(d, (8,) if i % 2 else (), seed=i)
        x, bg = rng.normal(size=d), rng.normal(size=d)
        f = lambda Z: model.predict_proba(Z)[:, 1]
        diff = np.abs(kernel_shap_values(f, x, bg, exact=True) - brute_force_shapley(f, x, bg))
        worst = max(worst, float(diff.max()))
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-6 and elapsed < 60
    record(4, "50 instances, d in 2..10", ok, f"max |diff|={worst:.2e} ({elapsed:.1f}s)")
    assert ok


# 5 -------------------------------------------------------------------------------

def test_c05_ig_completeness_on_ann_l(recidivism, recidivism_ann):
    model = recidivism_ann
    X = recidivism.X_test[:N]
    zero = np.zeros(X.shape[1])
    worst = 0.0
    for x in X:
        c = model.predict(x).label
        e = integrated_gradients(model, x, baseline=zero, multiply_by_inputs=True)
        gap = model.predict_proba(x)[c] - model.predict_proba(zero)[c]
        worst = max(worst, abs(e.scores.sum() - gap))
    ok = worst <= 1e-3
    record(5, "recidivism ANN-L", ok, f"max completeness error={worst:.2e}")
    assert ok


# 6 -------------------------------------------------------------------------------

def central_difference(model, x, cls, h=1e-5):
    g = np.empty_like(x)
    for j in range(len(x)):
        e = np.zeros_like(x)
        e[j] = h
        g[j] = (model.predict_proba(x + e)[cls] - model.predict_proba(x - e)[cls]) / (2 * h)
    return g


@pytest.mark.parametrize("arch", ["lr", "ann-l", "ann-xl"])
def test_c06_gradients_match_finite_differences(recidivism, arch):
    model = models.init_model(recidivism.X.shape[1], models.PRESETS[arch], seed=1)
    worst = 0.0
    for x in recidivism.X_test[:20]:
        for cls in (0, 1):
            g = model.input_gradient(x, cls)
            fd = central_difference(model, x, cls)
            rel = np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), 1e-9)
            worst = max(worst, float(rel.max()))
    ok = worst < 1e-4
    record(6, arch, ok, f"max relative error={worst:.2e}")
    assert ok


# 7 -------------------------------------------------------------------------------

@pytest.mark.parametrize("name", TABULAR)
def test_c07_pgi_pgu_direction(name):
    ds, model, gt, X = load_or_fail(7, name, name)
    cfg = MetricConfig()
    rows = []
    for i, x in enumerate(X):
        noise = instance_rng(0, i, "metric").normal(cfg.mu, cfg.sigma, size=(cfg.m, len(x)))
        rnd = random_explainer(len(x), instance_rng(0, i, "random")).ranking
        rows.append([auc_over_k([f(model, x, r, k, cfg, noise) for k in KS])
                     for f in (pgi, pgu) for r in (gt, rnd)])
    gt_pgi, rnd_pgi, gt_pgu, rnd_pgu = np.mean(rows, axis=0)
    ok = gt_pgu < rnd_pgu and gt_pgi > rnd_pgi
    record(7, name, ok, f"PGI gt={gt_pgi:.4f} random={rnd_pgi:.4f}; "
                        f"PGU gt={gt_pgu:.4f} random={rnd_pgu:.4f}")
    assert ok


# 8 -------------------------------------------------------------------------------

def test_c08_mock_pipeline(tmp_path):
    cfg = ExperimentConfig(dataset="recidivism", model="lr", methods=("p-icl", "pg-icl"),
                           n_instances=N, output_dir=str(tmp_path / "mock"),
                           llm=LlmConfig(mode="mock", cache_path=str(tmp_path / "cache.jsonl")))
    start = time.perf_counter()
    recs = read_results(run_experiment(cfg))
    elapsed = time.perf_counter() - start
    calls = prepare(cfg, out=tmp_path / "mock").client.network_calls
    fa = {m: np.mean([r["auc"]["fa"] for r in recs if r["method"] == m]) for m in cfg.methods}
    ra = {m: np.mean([r["auc"]["ra"] for r in recs if r["method"] == m]) for m in cfg.methods}
    ok = (len(recs) == 2 * N and all(r["status"] == "ok" for r in recs)
          and all(v == 1.0 for v in (*fa.values(), *ra.values())) and calls == 0
          and elapsed < 60)
    record(8, "recidivism LR", ok, f"FA={fa} RA={ra} network calls={calls} ({elapsed:.1f}s)")
    assert ok


# 9 -------------------------------------------------------------------------------

REPLIES = {"blood_correct": (4, list("ACBD")), "blood_incorrect": (4, list("ABCD")),
           "adult_partial": (13, list("DCAEF")), "adult_incorrect": (13, list("DFGJK"))}


def test_c09_parser_golden_corpus(fixtures_dir):
    got = {}
    for name, (d, expected) in REPLIES.items():
        reply = (fixtures_dir / "replies" / f"{name}.txt").read_text()
        got[name] = list(parse_topk(reply, letters(d), k=min(5, d)).ranking) == expected
    imdb = (fixtures_dir / "replies" / "imdb.txt").read_text()
    toks = ["it", "looked", "like", "a", "wonderful", "story", "."]
    got["imdb"] = list(parse_words(imdb, toks, k=3).ranking) == ["it", "looked", "like"]
    refusal = (fixtures_dir / "replies" / "refusal.txt").read_text()
    got["refusal"] = parse_topk(refusal, letters(4)).status == REFUSAL
    ok = all(got.values())
    record(9, "reference replies", ok, ", ".join(f"{k}={'ok' if v else 'WRONG'}"
                                                for k, v in got.items()))
    assert ok


# 10 ------------------------------------------------------------------------------

def test_c10_prompt_golden_templates(fixtures_dir):
    import test_prompts as tp
    checks = {}
    for name, fn in [("p-icl reference", tp.test_p_icl_matches_reference),
                     ("pg-icl instructions", tp.test_pg_icl_instructions_match_reference),
                     ("e-icl reference", tp.test_e_icl_matches_reference),
                     ("text reference", tp.test_text_prompt_matches_reference),
                     ("cot toggle", tp.test_cot_toggle_removes_one_sentence),
                     ("context toggle", tp.test_context_toggle_starts_at_dataset)]:
        try:
            fn(fixtures_dir)
            checks[name] = True
        except AssertionError:
            checks[name] = False
    for name in sorted(tp.GOLDENS):
        checks[name] = tp.GOLDENS[name]().text == (fixtures_dir / "prompts" / name).read_text()
    ok = all(checks.values())
    record(10, "templates", ok, ", ".join(k for k, v in checks.items() if not v)
           or f"{len(checks)} byte-equal checks")
    assert ok


# 11 ------------------------------------------------------------------------------

def test_c11_replay_determinism(tmp_path):
    cache = str(tmp_path / "cache.jsonl")
    base = dict(dataset="recidivism", model="lr", n_instances=20,
                methods=("p-icl", "pg-icl", "e-icl", "lime", "shap", "random"))
    run_experiment(ExperimentConfig(**base, output_dir=str(tmp_path / "rec"),
                                    llm=LlmConfig(mode="mock", cache_path=cache)))
    outs = [run_experiment(ExperimentConfig(**base, output_dir=str(tmp_path / f"replay{i}"),
                                            llm=LlmConfig(mode="replay", cache_path=cache)))
            for i in (1, 2)]
    a, b = (p.read_bytes() for p in outs)
    ok = a == b and len(a) > 0
    record(11, "two replays", ok, f"{len(a)} bytes, identical={a == b}")
    assert ok


# 12 ------------------------------------------------------------------------------

@pytest.mark.parametrize("name", TABULAR)
def test_c12_lr_accuracy_anchor(name):
    ds, model, gt, X = load_or_fail(12, f"{name} LR", name)
    acc = model.info["test_accuracy"]
    ok = abs(acc - LR_ANCHORS[name]) <= 0.03
    record(12, f"{name} LR", ok, f"accuracy={acc:.4f} target={LR_ANCHORS[name]:.4f}±0.03")
    assert ok


@pytest.mark.parametrize("name", TEXT)
def test_c12_text_accuracy(name):
    ds = data.load_text_dataset(name)
    model = models.train_text(ds)
    acc = model.info["test_accuracy"]
    ok = acc >= 0.70
    record(12, f"{name} bag-of-words", ok, f"accuracy={acc:.4f} (>= 0.70)")
    assert ok


# 13 ------------------------------------------------------------------------------

def test_c13_text_metric_sanity():
    vocab = {"wonderful": 0, "it": 1, "looked": 2, "like": 3, "a": 4, "story": 5}
    W = np.zeros((len(vocab), 2))
    W[0] = [-4.0, 4.0]
    model = models.BlackBoxModel("bow-text", (W,), (np.array([2.0, -2.0]),), vocabulary=vocab)
    toks = ["it", "looked", "like", "a", "wonderful", "story"]
    e = lime_text(model, toks, rng=np.random.default_rng(0))
    full = model.proba_tokens([toks])[0]
    c = int(np.argmax(full))
    flip = abs(full[c] - model.proba_tokens([[t for t in toks if t != "wonderful"]])[0][c])
    g_i = prediction_gap_text(model, toks, e.ranking, 1, "important")
    g_u = prediction_gap_text(model, toks, e.ranking, 1, "unimportant")
    ok = e.ranking[0] == "wonderful" and g_i == pytest.approx(flip, abs=1e-12) and g_u == 0.0
    record(13, "one-keyword classifier", ok,
           f"top={e.ranking[0]} PGI={g_i:.4f} flip={flip:.4f} PGU={g_u:.4f}")
    assert ok
