import itertools

import numpy as np
import pytest

import lsr


def pairwise_auroc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y]
    neg = [s for s, y in zip(scores, labels) if not y]
    wins = sum((p > n) + 0.5 * (p == n) for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def test_auroc_matches_pairwise_count():
    rng = np.random.default_rng(0)
    for _ in range(50):
        n = int(rng.integers(2, 20))
        scores = rng.integers(0, 5, n).astype(float)
        labels = np.zeros(n, dtype=int)
        labels[rng.choice(n, int(rng.integers(1, n)), replace=False)] = 1
        assert lsr.auroc(scores, labels) == pytest.approx(pairwise_auroc(scores, labels), abs=1e-12)


def test_single_class_labels_raise():
    with pytest.raises(lsr.LsrError):
        lsr.auroc([0.1, 0.2], [1, 1])


def test_average_precision_and_dice_examples():
    assert lsr.average_precision([0.9, 0.8, 0.7], [1, 0, 1]) == pytest.approx((1.0 + 2.0 / 3.0) / 2.0)
    assert lsr.dice([0, 0], [0, 0]) == 1.0
    assert lsr.dice([1, 1, 0, 0], [1, 0, 1, 0]) == pytest.approx(0.5)
    threshold, best = lsr.best_dice([0.1, 0.9, 0.8, 0.2], [0, 1, 1, 0])
    assert (threshold, best) == (pytest.approx(0.8), 1.0)


def test_percentile_matches_numpy_linear():
    values = np.arange(1.0, 101.0)
    for q in (0.0, 12.5, 90.0, 98.0, 100.0):
        assert lsr.percentile(values, q) == pytest.approx(np.percentile(values, q))


def test_scoring_primitives():
    nll = np.array([[1.0, 2.0], [3.0, 8.0]])
    assert lsr.sample_score(nll, 7.0) == 8.0
    assert lsr.sample_score(nll, 8.0) == 0.0
    assert lsr.restoration_mask(nll, 3.0).tolist() == [[0, 0], [0, 1]]
    spike = np.zeros((9, 9))
    spike[4, 4] = 1.0
    assert np.all(lsr.smooth(spike) == 0.0)
    assert np.allclose(lsr.smooth(np.full((9, 9), 2.5)), 2.5)
    x = np.ones((4, 4))
    r = np.zeros((4, 4))
    assert np.allclose(lsr.consolidate(x, [r, r]), 1.0)


def test_volume_generation_is_deterministic():
    a, pos = lsr.generate_volume(5, 2, 4, 16)
    b, _ = lsr.generate_volume(5, 2, 4, 16)
    assert a.shape == (4, 16, 16)
    assert np.array_equal(a, b)
    assert pos[0] == pytest.approx(-0.5) and pos[-1] == pytest.approx(0.5)


def test_config_defaults_and_schema_errors():
    cfg = lsr.default_config()
    assert cfg["scoring"]["restorations"] == 15
    assert lsr.normalize_config({}) == cfg
    assert lsr.config_hash({}) == lsr.config_hash(cfg)
    with pytest.raises(lsr.SchemaError):
        lsr.normalize_config({"scoring": {"lamda_s": 3}})
    with pytest.raises(lsr.DimensionError):
        lsr.normalize_config({"data": {"side": 30}, "codec": {"image_side": 30}})


TINY = {
    "seed": 3,
    "data": {"side": 16, "slices": 4, "train_subjects": 2, "val_subjects": 2, "val_clean_subjects": 1,
             "anomaly": {"radius_min": 2, "radius_max": 3, "span_min": 2, "span_max": 3}},
    "codec": {"image_side": 16, "blocks": 2, "channels": 4, "residual_blocks": 1, "embedding_dim": 8,
              "num_codes": 8, "vae_latent_dim": 4},
    "prior": {"channels": 8, "blocks": 1, "residual_blocks": 1},
    "scoring": {"restorations": 2},
    "train": {s: {"max_steps": 4, "batch_size": 2, "checkpoint_interval": 2} for s in ("vqvae", "prior", "vae")},
}


def test_tiny_pipeline_end_to_end(tmp_path):
    run = lsr.Run(tmp_path / "run", TINY, verbose=True)
    report = run.run()
    assert "[evaluate]" in run.log
    for who in ("method", "baseline"):
        pixel = report["metrics"][who]["pixel"]
        assert 0.0 <= pixel["auroc"] <= 1.0
    assert (tmp_path / "run" / "report.json").exists()

    again = lsr.Run(tmp_path / "run", TINY)
    assert again.evaluate()["metrics"] == report["metrics"]


def test_missing_dependency_is_reported(tmp_path):
    run = lsr.Run(tmp_path / "run", TINY)
    run.generate()
    with pytest.raises(lsr.DependencyError):
        run.train("prior")
