from pathlib import Path

import numpy as np
import pytest

from scatgen.data import generate_polygon5
from scatgen.embedding import (
    bilipschitz_report,
    embed,
    embed_coeffs,
    fit_whitening,
    gaussianization_report,
    load_whitening,
    moment_stats,
    save_whitening,
    whiten,
)
from scatgen.errors import (
    DimensionTooLargeError,
    InsufficientSamplesError,
    LayoutMismatchError,
)
from scatgen.scattering import ScatteringCoeffs, scatter, scatter_array
from scatgen.wavelet_bank import build_filter_bank

DATA = Path(__file__).parent / "data"


@pytest.fixture(scope="module")
def polys():
    return np.stack(generate_polygon5(96, 32, 11))


@pytest.fixture(scope="module")
def bank():
    return build_filter_bank(3, 4, 32)


def test_rank_one_pair():
    v = np.array([3.0, -1.0, 2.0, 0.5])
    w = fit_whitening(np.stack([v, -v]), d=1)
    assert np.allclose(w.mean, 0)
    assert abs(abs(w.eigvecs[:, 0] @ v) - np.linalg.norm(v)) < 1e-12
    # covariance divides by n - 1 = 1: eigenvalue 2 |v|^2
    assert w.eigvals[0] == pytest.approx(np.dot(v, v) * 2 / 1)


def test_covariance_reconstruction():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((64, 16)) @ rng.standard_normal((16, 16))
    w = fit_whitening(x, d=16)
    direct = np.cov(x, rowvar=False)
    recon = w.eigvecs @ np.diag(w.eigvals) @ w.eigvecs.T
    assert np.max(np.abs(recon - direct)) <= 1e-8


def test_gram_route_matches_covariance_route():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((20, 50)) * np.linspace(3, 0.1, 50)
    w = fit_whitening(x, d=10)  # n < dim: Gram route
    vals, vecs = np.linalg.eigh(np.cov(x, rowvar=False))
    assert np.allclose(w.eigvals, vals[::-1][:10], rtol=1e-9)
    for k in range(10):
        assert abs(abs(w.eigvecs[:, k] @ vecs[:, ::-1][:, k]) - 1) < 1e-8


def test_rank_deficient_directions_are_completed():
    rng = np.random.default_rng(2)
    x = rng.standard_normal((4, 30))
    w = fit_whitening(x, d=4)  # centred rank is 3
    assert np.allclose(w.eigvecs.T @ w.eigvecs, np.eye(4), atol=1e-10)
    assert np.all(w.eigvals > 0)
    assert np.all(np.diff(w.eigvals) <= 0)


def test_errors():
    x = np.random.default_rng(3).standard_normal((5, 8))
    with pytest.raises(DimensionTooLargeError):
        fit_whitening(x, d=6)
    with pytest.raises(InsufficientSamplesError):
        fit_whitening(x[:1], d=1)
    a = ScatteringCoeffs(1, 1, 4, np.zeros((2, 2, 2)), ((), (1, 0)))
    b = ScatteringCoeffs(1, 1, 4, np.zeros((2, 2, 6)), ((), (1, 0)))
    with pytest.raises(LayoutMismatchError):
        fit_whitening([a, b], d=1)


def test_invariants_on_scattering(polys, bank):
    coeffs = [scatter(x, bank) for x in polys]
    w = fit_whitening(coeffs, d=32)
    assert np.allclose(w.eigvecs.T @ w.eigvecs, np.eye(32), atol=1e-6)
    assert np.all(w.eigvals > 0) and np.all(np.diff(w.eigvals) <= 0)
    assert (w.J, w.Q, w.grid_size) == (3, 4, 32)


def test_full_rank_whitening_is_identity():
    rng = np.random.default_rng(4)
    x = rng.standard_normal((400, 12)) @ rng.standard_normal((12, 12)) + 5
    w = fit_whitening(x, d=12)
    e = whiten(x, w)
    assert np.max(np.abs(e.mean(axis=0))) <= 1e-6
    assert np.max(np.abs(np.cov(e, rowvar=False) - np.eye(12))) <= 1e-4
    # idempotence: refitting on whitened data gives unit eigenvalues
    w2 = fit_whitening(e, d=12)
    assert np.allclose(w2.eigvals, 1.0, atol=1e-4)


def test_embedding_of_mean_is_zero():
    rng = np.random.default_rng(5)
    x = rng.standard_normal((30, 10))
    w = fit_whitening(x, d=5)
    assert np.allclose(whiten(w.mean, w), 0.0)


def test_embed_matches_manual(polys, bank):
    w = fit_whitening(scatter_array(polys, bank), d=16)
    z = embed(polys[0], bank, w)
    manual = (scatter(polys[0], bank).flat() - w.mean) @ w.eigvecs / np.sqrt(w.eigvals)
    assert np.allclose(z, manual, atol=1e-12)
    assert np.allclose(embed_coeffs(scatter(polys[0], bank), w), manual, atol=1e-12)


def test_embed_layout_mismatch(bank):
    w = fit_whitening(np.random.default_rng(6).standard_normal((10, 7)), d=3)
    with pytest.raises(LayoutMismatchError):
        embed(np.zeros((32, 32, 3)), bank, w)


def test_golden_vector(bank):
    # regenerated by tests/data/make_golden.py
    train = np.stack(generate_polygon5(128, 32, 3))
    w = fit_whitening(scatter_array(train, bank), d=64)
    img = generate_polygon5(1, 32, 99)[0]
    z1 = embed(img, bank, w)
    z2 = embed(img, bank, fit_whitening(scatter_array(train, bank), d=64))
    assert np.array_equal(z1, z2)
    golden = np.load(DATA / "golden_embedding.npy")
    assert np.array_equal(z1, golden)


def test_whitening_file_round_trip(tmp_path, polys, bank):
    w = fit_whitening(scatter_array(polys, bank), d=8, layout=(3, 4, 32))
    path = tmp_path / "w.scgw"
    save_whitening(w, path)
    raw = path.read_bytes()
    assert raw[:4] == b"SCGW"
    assert int.from_bytes(raw[4:8], "little") == 1
    back = load_whitening(path)
    assert back.d == 8 and back.dim == w.dim and (back.J, back.Q, back.grid_size) == (3, 4, 32)
    assert np.array_equal(back.mean, w.mean.astype(np.float32))
    save_whitening(back, tmp_path / "again.scgw")
    assert (tmp_path / "again.scgw").read_bytes() == raw


# --- diagnostics -----------------------------------------------------------


def test_projection_contraction_and_monotonicity(polys, bank):
    s = scatter_array(polys, bank).reshape(len(polys), -1)
    rng = np.random.default_rng(7)
    pairs = rng.integers(0, len(polys), (50, 2))
    pairs = pairs[pairs[:, 0] != pairs[:, 1]]
    prev = np.zeros(len(pairs))
    for d in (4, 16, 64, 96):
        w = fit_whitening(s, d=d)
        proj = (s - w.mean) @ w.eigvecs
        pd = np.linalg.norm(proj[pairs[:, 0]] - proj[pairs[:, 1]], axis=1)
        sd = np.linalg.norm(s[pairs[:, 0]] - s[pairs[:, 1]], axis=1)
        xd = np.linalg.norm((polys[pairs[:, 0]] - polys[pairs[:, 1]]).reshape(len(pairs), -1), axis=1)
        assert np.all(pd <= sd + 1e-9)
        assert np.all(sd <= xd + 1e-9)
        assert np.all(pd >= prev - 1e-9)
        prev = pd


def test_report_upper_bound_at_full_dimension(bank):
    imgs = np.stack(generate_polygon5(40, 32, 12))
    s = scatter_array(imgs, bank).reshape(40, -1)
    w = fit_whitening(s, d=40)
    rep = bilipschitz_report(imgs, bank, w, n_pairs=200, seed=0)
    assert rep.upper_ok
    assert rep.n_pairs == 200
    assert set(rep.quantile_alpha) == {50.0, 90.0, 99.5}
    assert rep.alpha_max >= rep.quantile_alpha[99.5] >= rep.quantile_alpha[50.0] >= 1.0


def test_report_degenerate_pair(polys, bank):
    w = fit_whitening(scatter_array(polys, bank), d=8)
    rep = bilipschitz_report(polys, bank, w, 0, 0, pairs=np.array([[3, 3], [1, 2]]))
    assert rep.degenerate_pairs == 1
    assert np.isinf(rep.alpha_max)
    assert "inf" in rep.to_csv()


def test_gaussian_vectors_look_gaussian():
    z = np.random.default_rng(13).standard_normal((1024, 64))
    m = moment_stats(z)
    assert m.median_abs_skew <= 0.2
    assert m.median_abs_kurtosis <= 0.5
    assert not m.degenerate


def test_constant_dataset_flagged():
    x = np.ones((16, 10))
    w = fit_whitening(x, d=4)
    g = gaussianization_report(x, w)
    assert g.degenerate


def test_gaussianization_report_on_polygons(polys, bank):
    s = scatter_array(polys, bank)
    w = fit_whitening(s, d=16)
    g = gaussianization_report(s, w)
    assert np.all(np.isfinite(g.skewness)) and np.all(np.isfinite(g.excess_kurtosis))
    text = g.to_csv()
    assert text.splitlines()[0] == "dimension,skewness,excess_kurtosis"
    assert len(text.splitlines()) == 16 + 2
