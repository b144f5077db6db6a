import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import rigid
from jsnreg.baseline import phase_correlation_baseline
from jsnreg.evaluation import (
    EvaluationError,
    JointSeries,
    RegistrationCache,
    RegistrationTask,
    baseline_sigma_prime,
    batch_evaluate,
    consistency_values,
    draw_translations,
    map_tasks,
    population_std,
    robust_keep,
    sigma_consistency,
    sigma_prime,
    translate,
)
from jsnreg.phantom import PhantomSpec, generate_pair, render_series, split_mask
from jsnreg.registration import OptimizerConfig, register_pair
from jsnreg.transform import RigidParams

SMALL = dict(width=128, height=128)


def _series(transforms, seed=0, **kw):
    spec = PhantomSpec(rng_seed=seed, **{**SMALL, **kw})
    imgs = render_series(spec, transforms)
    mask = split_mask(spec.width, spec.height)
    return JointSeries("j", imgs, [mask] * len(imgs))


# ------------------------------------------------------------- sigma


def test_sigma_of_identical_series():
    ident = (RigidParams(), RigidParams())
    series = _series([ident] * 3, seed=1)
    res = sigma_consistency(series, 0, 2)
    assert res.intermediates == (1,)
    assert all(abs(v) <= 0.05 for v in res.values)
    assert res.sigma_pixels <= 0.05
    assert res.sigma_mm == pytest.approx(res.sigma_pixels * 0.175)


def test_noise_free_triple_is_additive():
    ts = [(RigidParams(), RigidParams()),
          (RigidParams(dy=0.3), RigidParams(dy=-0.2)),
          (RigidParams(dy=0.5), RigidParams(dy=-0.5))]
    series = _series(ts, seed=2)
    cache = RegistrationCache(series, OptimizerConfig())
    res = sigma_consistency(series, 0, 2, cache=cache)
    assert res.mean_jsn == pytest.approx(1.0, abs=0.1)
    assert res.sigma_pixels <= 0.05
    assert len(cache) == 2
    # direct registration agrees with the indirect path
    assert cache(0, 2).jsn_pixels == pytest.approx(1.0, abs=0.1)


def test_consistency_values_excludes_mismatches():
    table = {(0, 1): (0.4, False), (1, 3): (0.6, False), (0, 2): (0.5, True), (2, 3): (0.5, False)}
    vals, used, excluded = consistency_values(lambda i, j: table[(i, j)], 4, 0, 3)
    assert vals == [pytest.approx(1.0)] and used == [1] and excluded == [2]


def test_sigma_fails_without_valid_intermediates():
    series = _series([(RigidParams(), RigidParams())] * 3)
    cache = RegistrationCache(series, OptimizerConfig())

    class Bad:
        jsn_pixels, mismatch = 0.0, True

    cache.store(0, 1, Bad())
    with pytest.raises(EvaluationError, match="no valid intermediates"):
        sigma_consistency(series, 0, 2, cache=cache)


def test_series_validation():
    img = generate_pair(PhantomSpec(**SMALL)).fixed
    m = split_mask(128, 128)
    with pytest.raises(ValueError, match="at least three"):
        JointSeries("j", [img, img], [m, m])
    with pytest.raises(ValueError):
        JointSeries("j", [img, img, img], [m, m])


def test_population_std():
    assert population_std([1.0, 1.0, 1.0]) == 0.0
    assert population_std([0.0, 2.0]) == 1.0


# ------------------------------------------------------------- sigma prime


@pytest.fixture(scope="module")
def zero_jsn_pair():
    return generate_pair(PhantomSpec(rng_seed=3, **SMALL))


@pytest.fixture(scope="module")
def sigma_prime_seed0(zero_jsn_pair):
    p = zero_jsn_pair
    return sigma_prime(p.fixed, p.moving, p.fixed_mask, p.moving_mask, rng_seed=0)


def test_sigma_prime_noise_free(sigma_prime_seed0):
    r = sigma_prime_seed0
    assert r.used == 10
    assert r.sigma_prime_pixels <= 0.05
    assert len(r.translations) == 10
    assert all(-3 <= c <= 3 for t in r.translations for c in t)


def test_sigma_prime_seed_invariance(zero_jsn_pair, sigma_prime_seed0):
    p = zero_jsn_pair
    other = sigma_prime(p.fixed, p.moving, p.fixed_mask, p.moving_mask, rng_seed=1)
    assert other.translations != sigma_prime_seed0.translations
    assert abs(other.sigma_prime_pixels - sigma_prime_seed0.sigma_prime_pixels) <= 0.02


def test_sigma_prime_forced_mismatch(zero_jsn_pair):
    p = zero_jsn_pair
    moves = draw_translations(0)
    moves[4] = (25.0, 0.0)  # beyond the 20 px bound: the registration must hit it
    r = sigma_prime(p.fixed, p.moving, p.fixed_mask, p.moving_mask, translations=moves)
    assert r.used == 9
    assert not r.kept[4]
    assert r.sigma_prime_pixels == pytest.approx(population_std(np.array(r.values)[list(r.kept)]))


def test_sigma_prime_too_few_survivors(zero_jsn_pair):
    p = zero_jsn_pair
    with pytest.raises(EvaluationError, match="survived"):
        sigma_prime(p.fixed, p.moving, p.fixed_mask, p.moving_mask,
                    translations=[(25.0, 0.0), (-25.0, 0.0), (0.5, 0.5)])


def test_baseline_sigma_prime_runs(zero_jsn_pair):
    p = zero_jsn_pair
    r = baseline_sigma_prime(p.fixed, p.moving, p.fixed_mask, p.moving_mask, draw_translations(0))
    assert r.used >= 3 and r.sigma_prime_pixels >= 0


def test_draw_translations_seeded():
    assert draw_translations(5) == draw_translations(5)
    assert draw_translations(5) != draw_translations(6)


def test_translate_moves_image_and_mask():
    p = generate_pair(PhantomSpec(**SMALL))
    img, mask = translate(p.moving, p.moving_mask, 0.0, 3.0)
    assert np.array_equal(mask.labels[3:], p.moving_mask.labels[:-3])
    assert np.allclose(img.pixels[3:], p.moving.pixels[:-3])


def test_robust_keep():
    v = [0.0, 0.01, -0.01, 0.02, 5.0]
    assert list(robust_keep(v)) == [True, True, True, True, False]
    # small spreads are protected by the floor
    assert robust_keep([0.0, 0.001, 0.05]).all()
    assert robust_keep([]).size == 0


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=30))
def test_robust_keep_keeps_the_median_side(v):
    keep = robust_keep(v)
    assert keep.sum() >= (len(v) + 1) // 2


# ------------------------------------------------------------- batches


def _task(pair, pid=""):
    return RegistrationTask(pair.fixed, pair.moving, pair.fixed_mask, pair.moving_mask, pid,
                            pair.truth_jsn_pixels)


def test_batch_of_self_pairs():
    tasks = []
    for k in range(3):
        p = generate_pair(PhantomSpec(rng_seed=k, **SMALL))
        tasks.append(RegistrationTask(p.fixed, p.fixed, p.fixed_mask, p.fixed_mask, f"self{k}"))
    out = batch_evaluate(tasks)
    assert out.record.mismatch_ratio == 0.0
    assert out.record.mean_warped_loss <= 1e-3
    assert out.record.n_pairs == 3


@pytest.fixture(scope="module")
def mixed_batch():
    pairs = [generate_pair(PhantomSpec(truth_lower=RigidParams(dy=0.5 * k), rng_seed=k, **SMALL)) for k in range(3)]
    pairs.append(generate_pair(PhantomSpec(truth_lower=rigid(1.0, 45.0), bone_half_width=20, rng_seed=9)))
    return [_task(p, f"p{k}") for k, p in enumerate(pairs)]


def test_batch_flags_out_of_range_pair(mixed_batch):
    out = batch_evaluate(mixed_batch[:3])
    assert out.record.mismatch_ratio == 0.0
    assert out.record.half_loss_fraction == pytest.approx(2 / 3)  # the identity pair has no loss to halve
    big = batch_evaluate([mixed_batch[3]] + [
        _task(generate_pair(PhantomSpec(truth_lower=RigidParams(dy=0.5 * k), rng_seed=k)), f"b{k}") for k in range(3)])
    assert big.record.mismatch_ratio == pytest.approx(1 / 4)
    assert big.results[0].mismatch


def test_batch_is_reproducible(mixed_batch):
    a = batch_evaluate(mixed_batch[:3])
    b = batch_evaluate(mixed_batch[:3], jobs=2)
    assert a.record == b.record
    assert [r.to_dict() for r in a.results] == [r.to_dict() for r in b.results]


def test_batch_errors_become_mismatches():
    p = generate_pair(PhantomSpec(**SMALL))
    small = generate_pair(PhantomSpec(width=64, height=64, bone_half_width=10, gap=8)).fixed
    bad = RegistrationTask(p.fixed, small, p.fixed_mask, p.fixed_mask, "bad")
    out = batch_evaluate([bad, _task(p, "good")])
    assert out.results[0] is None and "dimension mismatch" in out.errors[0]
    assert out.record.mismatch_ratio == 0.5


def test_empty_batch():
    with pytest.raises(EvaluationError):
        batch_evaluate([])


def test_map_tasks_preserves_order():
    assert map_tasks(abs, [-3, 2, -1], jobs=2) == [3, 2, 1]


# ------------------------------------------------------------- baseline vs optimizer


def test_baseline_and_optimizer_agree_on_translation():
    p = generate_pair(PhantomSpec(truth_upper=RigidParams(dx=1.0, dy=0.8), truth_lower=RigidParams(dy=-1.2),
                                  rng_seed=5))
    r = register_pair(p.fixed, p.moving, p.fixed_mask, p.moving_mask)
    b = phase_correlation_baseline(p.fixed, p.moving, p.fixed_mask)
    assert abs(r.jsn_pixels - b.jsn_pixels) <= 0.1
    assert abs(r.jsn_pixels - p.truth_jsn_pixels) <= 0.1


def test_baseline_and_optimizer_diverge_under_rotation():
    p = generate_pair(PhantomSpec(truth_lower=rigid(1.0, 7.0, 0.0, 1.0), rng_seed=6))
    r = register_pair(p.fixed, p.moving, p.fixed_mask, p.moving_mask)
    b = phase_correlation_baseline(p.fixed, p.moving, p.fixed_mask)
    assert abs(r.jsn_pixels - p.truth_jsn_pixels) <= 0.1
    assert abs(b.jsn_pixels - r.jsn_pixels) > 0.5 or b.mismatch
