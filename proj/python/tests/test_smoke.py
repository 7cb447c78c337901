import math

import numpy as np
import pytest

import ueforge


def small_split():
    cfg = ueforge.DataGenConfig()
    cfg.n_train = 32
    cfg.n_test = 16
    cfg.seed = 3
    return ueforge.gen_data(cfg)


def test_gen_data_shapes_and_range():
    split = small_split()
    x = split.train.images
    assert x.shape == (32, 1, 16, 16)
    assert x.min() >= 0.0 and x.max() <= 1.0
    assert set(np.unique(split.train.labels)) <= {0, 1, 2, 3}
    assert len(split.test) == 16


def test_gen_data_deterministic():
    a = small_split().train.images
    b = small_split().train.images
    assert np.array_equal(a, b)


def test_parseval():
    rng = np.random.default_rng(0)
    z = rng.standard_normal((8, 8))
    p = ueforge.diag.power_spectrum_2d(z)
    assert p.shape == (8, 8)
    assert math.isclose(p.sum(), z.size * (z ** 2).sum(), rel_tol=1e-10)
    assert np.allclose(p, np.abs(np.fft.fft2(z)) ** 2)


def test_rsd_trivial_cases():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, 1, 8, 8))
    r = ueforge.diag.relative_spectral_density(x, x)
    assert all(v == 0.0 for v in r if v is not None)
    r2 = ueforge.diag.relative_spectral_density(2.0 * x, x)
    assert all(math.isclose(v, 2.0, rel_tol=1e-12) for v in r2 if v is not None)


def test_cosine_degenerate():
    value, degenerate = ueforge.diag.cosine([0.0, 0.0], [1.0, 2.0])
    assert value == 0.0 and degenerate


def test_spec_identity_ignores_comments():
    a = ueforge.run_id("method = emn\nparadigm = pf\n")
    b = ueforge.run_id("# note\nparadigm = pf\nmethod = emn\n")
    assert a == b
    assert a != ueforge.run_id("method = ssc\nparadigm = pf\n")


def test_bad_spec_raises():
    with pytest.raises(ueforge.Error):
        ueforge.run_id("paradigm = sideways\n")
