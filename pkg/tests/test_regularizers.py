import itertools
import math

import numpy as np
import pytest

import oracles
from conftest import micro_config, random_pair
from promptreg import numcore as nc
from promptreg.encoders import encode_texts
from promptreg.numcore import Tensor
from promptreg.regularizers import (
    METRICS, SclConfig, TemplatePool, ensembled_class_features, ensembled_frozen_text_feature, final_loss,
    scl_combined, scl_feature_loss, scl_logits_loss,
)


@pytest.mark.parametrize("metric", METRICS)
def test_identical_features_zero(metric):
    x = Tensor(np.random.default_rng(0).normal(size=(3, 8)))
    assert scl_feature_loss(x, x, metric).item() == pytest.approx(0.0, abs=1e-15)


def test_l1_arithmetic():
    assert scl_feature_loss(Tensor([1.0, 2.0]), Tensor([0.0, 0.0]), "L1").item() == 3.0
    assert scl_feature_loss(Tensor([1.0, 2.0]), Tensor([0.0, 0.0]), "L1", reduction="mean").item() == 1.5


@pytest.mark.parametrize("metric", METRICS)
def test_feature_loss_matches_scalar_loop(metric):
    rng = np.random.default_rng(1)
    p, q = rng.normal(size=8), rng.normal(size=8)
    assert abs(scl_feature_loss(Tensor(p), Tensor(q), metric).item() - oracles.feature_loss(p, q, metric)) < 1e-12


def test_feature_loss_errors():
    with pytest.raises(nc.ShapeError):
        scl_feature_loss(Tensor([1.0, 2.0]), Tensor([1.0]), "L1")
    with pytest.raises(nc.DegenerateInputError):
        scl_feature_loss(Tensor([0.0, 0.0]), Tensor([1.0, 0.0]), "cosine")


def test_feature_loss_nonnegative_random():
    rng = np.random.default_rng(2)
    for metric in METRICS:
        for _ in range(30):
            assert scl_feature_loss(Tensor(rng.normal(size=(2, 5))), Tensor(rng.normal(size=(2, 5))), metric).item() >= 0


@pytest.mark.parametrize("metric", ["L1", "MSE"])
def test_monotone_anchoring(metric):
    rng = np.random.default_rng(3)
    f, target = rng.normal(size=8), rng.normal(size=8)
    vals = [scl_feature_loss(Tensor(f + t * (target - f)), Tensor(f), metric).item() for t in np.linspace(0, 1, 11)]
    assert all(a < b for a, b in zip(vals, vals[1:]))


def test_kl_identical_zero():
    p = Tensor([0.2, 0.3, 0.5])
    assert scl_logits_loss(p, p).item() == 0.0


def test_kl_point_mass_vs_uniform():
    got = scl_logits_loss(Tensor([1.0, 0.0]), Tensor([0.5, 0.5])).item()
    assert got == pytest.approx(math.log(2), abs=1e-12)


@pytest.mark.parametrize("direction", ["prompted_to_frozen", "frozen_to_prompted"])
def test_kl_matches_scalar_loop(direction):
    rng = np.random.default_rng(4)
    a, b = rng.dirichlet(np.ones(4)), rng.dirichlet(np.ones(4))
    want = oracles.kl(a, b) if direction == "prompted_to_frozen" else oracles.kl(b, a)
    assert abs(scl_logits_loss(Tensor(a), Tensor(b), direction).item() - want) < 1e-12


def test_kl_zero_target_is_clamped_with_warning():
    with pytest.warns(RuntimeWarning):
        v = scl_logits_loss(Tensor([0.5, 0.5]), Tensor([1.0, 0.0])).item()
    assert np.isfinite(v) and v == pytest.approx(0.5 * (math.log(0.5) - math.log(1e-12)) + 0.5 * math.log(0.5))


def test_kl_rejects_non_simplex():
    with pytest.raises(ValueError):
        scl_logits_loss(Tensor([0.5, 0.6]), Tensor([0.5, 0.5]))


def test_combined_defaults_and_arithmetic():
    cfg = SclConfig()
    assert (cfg.lambda1, cfg.lambda2) == (10.0, 25.0)
    assert scl_combined(0.0, 0.0, 0.0, cfg).item() == 0.0
    assert scl_combined(0.1, 0.2, 0.3, cfg).item() == pytest.approx(6.3, abs=1e-12)


def test_final_loss():
    assert final_loss(1.5, 2.5).item() == 4.0
    assert final_loss(0.0, 0.0).item() == 0.0
    ce = Tensor([0.7])
    assert final_loss(ce, 0.0).item() == ce.item()


def test_scl_config_validation():
    with pytest.raises(ValueError):
        SclConfig(lambda1=-1)
    with pytest.raises(ValueError):
        SclConfig(matching_metric="huber")


def test_default_pool_loads_and_fits():
    cfg = micro_config()
    pool = TemplatePool.default(cfg)
    assert len(pool) >= 8
    assert pool[0] == ("a", "photo", "of", "a", "{class}")


def test_pool_validation(tmp_path):
    with pytest.raises(ValueError):
        TemplatePool(["a photo of a"])
    with pytest.raises(KeyError):
        TemplatePool(["a zebra {class}"])
    with pytest.raises(nc.ShapeError):
        TemplatePool([" ".join(["a"] * 20) + " {class}"], micro_config())
    f = tmp_path / "t.txt"
    f.write_text("# comment\na photo of {class}\n\na toy {class}\n")
    assert len(TemplatePool.from_file(f)) == 2


def test_single_template_is_normalized_feature(micro_pair):
    pool = TemplatePool(["a photo of a {class}"])
    g = ensembled_frozen_text_feature(micro_pair, pool, 2).data
    raw = encode_texts(micro_pair, [pool.instantiate(micro_pair.config, 0, 2)]).data[0]
    np.testing.assert_allclose(g, raw / np.linalg.norm(raw), atol=1e-15)


def test_duplicate_templates_equal_single(micro_pair):
    one = ensembled_frozen_text_feature(micro_pair, TemplatePool(["a toy {class}"]), 1).data
    two = ensembled_frozen_text_feature(micro_pair, TemplatePool(["a toy {class}"] * 2), 1).data
    np.testing.assert_allclose(one, two, atol=1e-15)


def test_ensemble_matches_mean_then_normalize_oracle(micro_pair):
    cfg = micro_pair.config
    pool = TemplatePool(["a photo of a {class}", "a sketch of {class}", "a bright photo of the {class}"])
    raws = [oracles.text_feature(micro_pair, pool.instantiate(cfg, i, 3).ids) for i in range(3)]
    got = ensembled_frozen_text_feature(micro_pair, pool, 3).data
    np.testing.assert_allclose(got, oracles.mean_then_normalize(raws), rtol=0, atol=1e-12)


def test_ensemble_permutation_invariant(micro_pair):
    templates = ["a photo of a {class}", "a sketch of {class}", "a toy {class}", "a painting of the {class}"]
    ref = ensembled_class_features(micro_pair, TemplatePool(templates), [0, 1])
    for perm in itertools.islice(itertools.permutations(templates), 6):
        np.testing.assert_allclose(ensembled_class_features(micro_pair, TemplatePool(list(perm)), [0, 1]), ref,
                                   atol=1e-12)


def test_unnormalized_ensemble_is_plain_mean(micro_pair):
    cfg = micro_pair.config
    pool = TemplatePool(["a photo of a {class}", "a toy {class}"])
    raws = [oracles.text_feature(micro_pair, pool.instantiate(cfg, i, 0).ids) for i in range(2)]
    np.testing.assert_allclose(ensembled_class_features(micro_pair, pool, [0], normalize=False)[0],
                               np.mean(raws, axis=0), atol=1e-12)


def test_frozen_weights_receive_no_gradient():
    pair = random_pair(micro_config())
    before = pair.checksum()
    p = Tensor(np.random.default_rng(0).normal(size=(2, 8)), requires_grad=True)
    frozen = Tensor(np.random.default_rng(1).normal(size=(2, 8)))
    with nc.Graph():
        loss = scl_combined(scl_feature_loss(p, frozen), scl_feature_loss(p, frozen, "MSE"), 0.0, SclConfig(3.0, 7.0))
        grads = nc.backward(loss)
    assert list(grads) == [p]
    assert pair.checksum() == before
