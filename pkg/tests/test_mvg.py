import numpy as np
import pytest
from scipy import stats

from flowad.errors import ConfigError, FormatError
from flowad.feature_store import FeaturePyramid
from flowad.flow_core import ScaleDecoder
from flowad.mvg_baseline import (MvgModel, MvgPosition, MvgScale, fit_mvg,
                                 load_mvg_checkpoint, mahalanobis_score_map,
                                 reverse_kl_identity_check,
                                 reverse_kl_loss_estimate,
                                 save_mvg_checkpoint)


def random_spd_position(dim, seed, mean_scale=1.0):
    rng = np.random.default_rng(seed)
    q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
    cov = q @ np.diag(rng.uniform(0.5, 2.0, dim)) @ q.T
    mean = mean_scale * rng.standard_normal(dim)
    return MvgPosition(mean=mean, chol=np.linalg.cholesky(cov)), cov


# ---------------------------------------------------------------------------
# MvgPosition
# ---------------------------------------------------------------------------

def test_mahalanobis_identity_covariance_is_euclidean():
    pos = MvgPosition(mean=np.zeros(3), chol=np.eye(3))
    assert abs(pos.mahalanobis([3.0, 0.0, 4.0]) - 5.0) < 1e-12


def test_mahalanobis_diagonal_anchor():
    pos = MvgPosition(mean=np.array([1.0, 1.0]),
                      chol=np.diag([2.0, 0.5]))  # Sigma = diag(4, 0.25)
    # (z - mu) = (2, 1): M^2 = 4/4 + 1/0.25 = 5
    assert abs(pos.mahalanobis([3.0, 2.0]) - np.sqrt(5.0)) < 1e-12


def test_log_density_matches_scipy_oracle():
    for dim in (1, 2, 5):
        pos, cov = random_spd_position(dim, seed=dim)
        rng = np.random.default_rng(dim + 50)
        for _ in range(5):
            z = rng.standard_normal(dim)
            ref = stats.multivariate_normal(mean=pos.mean, cov=cov).logpdf(z)
            assert abs(pos.log_density(z) - ref) < 1e-10


def test_log_density_eigendecomposition_oracle():
    pos, cov = random_spd_position(4, seed=9)
    vals, vecs = np.linalg.eigh(cov)
    z = np.array([0.3, -1.2, 0.7, 2.0])
    y = vecs.T @ (z - pos.mean)
    m2 = float((y * y / vals).sum())
    ref = -0.5 * (4 * np.log(2 * np.pi) + np.log(vals).sum() + m2)
    assert abs(pos.log_density(z) - ref) < 1e-10


def test_mahalanobis_affine_invariance():
    # M is invariant under z -> A z + b with matching transformed Gaussian
    rng = np.random.default_rng(3)
    pos, cov = random_spd_position(3, seed=4)
    a = rng.standard_normal((3, 3)) + 3 * np.eye(3)
    b = rng.standard_normal(3)
    cov2 = a @ cov @ a.T
    pos2 = MvgPosition(mean=a @ pos.mean + b, chol=np.linalg.cholesky(cov2))
    for _ in range(5):
        z = rng.standard_normal(3)
        assert abs(pos.mahalanobis(z)
                   - pos2.mahalanobis(a @ z + b)) < 1e-9


def test_density_integrates_to_one_1d():
    pos, _ = random_spd_position(1, seed=7)
    xs = np.linspace(pos.mean[0] - 12, pos.mean[0] + 12, 20001)
    vals = np.array([np.exp(pos.log_density([x])) for x in xs])
    assert abs(np.trapezoid(vals, xs) - 1.0) < 1e-6


# ---------------------------------------------------------------------------
# fitting
# ---------------------------------------------------------------------------

def make_pyramids(n, h, w, d, seed, mean=0.0, scale=1.0):
    rng = np.random.default_rng(seed)
    return [FeaturePyramid(image_id=f"p{i}",
                           scales=[mean + scale * rng.standard_normal((h, w, d))])
            for i in range(n)]


def test_fit_recovers_moments():
    true_mean = 2.5
    pyrs = make_pyramids(400, 2, 2, 3, seed=1, mean=true_mean, scale=1.0)
    model = fit_mvg(pyrs, ridge=1e-6)
    pos = model.scales[0].at(0, 0)
    assert np.abs(pos.mean - true_mean).max() < 0.2
    cov = pos.chol @ pos.chol.T
    assert np.abs(cov - np.eye(3)).max() < 0.3


def test_fit_matches_numpy_cov_oracle():
    pyrs = make_pyramids(20, 1, 1, 4, seed=2)
    samples = np.stack([p.scales[0][0, 0] for p in pyrs])
    model = fit_mvg(pyrs, ridge=0.01)
    pos = model.scales[0].at(0, 0)
    ref = np.cov(samples, rowvar=False) + 0.01 * np.eye(4)
    assert np.abs(pos.chol @ pos.chol.T - ref).max() < 1e-12
    assert np.array_equal(pos.mean, samples.mean(axis=0))


def test_fit_requires_two_images():
    with pytest.raises(ConfigError):
        fit_mvg(make_pyramids(1, 2, 2, 2, seed=0))


def test_parameter_bytes_formula():
    pyrs = make_pyramids(4, 3, 5, 4, seed=3)
    model = fit_mvg(pyrs)
    # 15 positions x 8 bytes x (4 + 10)
    assert model.parameter_bytes() == 15 * 8 * 14


def test_score_map_shape_and_signal():
    pyrs = make_pyramids(100, 2, 2, 3, seed=4)
    model = fit_mvg(pyrs)
    clean = make_pyramids(1, 2, 2, 3, seed=99)[0]
    hot = FeaturePyramid("hot", [clean.scales[0] + 8.0])
    maps_clean = mahalanobis_score_map(model, clean)
    maps_hot = mahalanobis_score_map(model, hot)
    assert maps_clean[0].shape == (2, 2)
    assert maps_hot[0].min() > maps_clean[0].max()


# ---------------------------------------------------------------------------
# identity check
# ---------------------------------------------------------------------------

def randomized_decoder(dim, cond_dim, layers, seed, noise=0.3):
    dec = ScaleDecoder(dim=dim, cond_dim=cond_dim, num_layers=layers,
                       perm_seed=seed)
    rng = np.random.default_rng(seed + 77)
    dec.set_parameters(dec.get_parameters()
                       + noise * rng.standard_normal(dec.parameter_count))
    return dec


@pytest.mark.parametrize("dim", [2, 4, 8])
def test_identity_holds_for_random_flows_and_targets(dim):
    rng = np.random.default_rng(dim)
    dec = randomized_decoder(dim, 8, 4, seed=dim * 3)
    for trial in range(50):
        pos, _ = random_spd_position(dim, seed=dim * 100 + trial)
        z = rng.standard_normal(dim)
        c = rng.standard_normal(8)
        lhs, rhs, gap = reverse_kl_identity_check(dec, pos, z, c)
        assert gap < 1e-8


def test_identity_anchor_identity_flow_standard_target():
    # identity flow, N(0, I) target: both sides are exactly 0
    dec = ScaleDecoder(dim=2, cond_dim=4, num_layers=2, perm_seed=0)
    pos = MvgPosition(mean=np.zeros(2), chol=np.eye(2))
    lhs, rhs, gap = reverse_kl_identity_check(
        dec, pos, np.array([0.7, -0.3]), np.zeros(4))
    assert abs(lhs) < 1e-12
    assert abs(rhs) < 1e-12


def test_identity_detects_corrupted_logdet():
    # negative control: breaking the log-det must break the identity
    dec = randomized_decoder(4, 4, 4, seed=5)
    pos, _ = random_spd_position(4, seed=6)
    z = np.ones(4)
    c = np.zeros(4)
    lhs, rhs, gap = reverse_kl_identity_check(dec, pos, z, c)
    assert gap < 1e-8
    u, logdet = dec.inverse(z.reshape(1, -1), c.reshape(1, -1))
    m = pos.mahalanobis(z)
    rhs_bad = (0.5 * (m * m - float((u * u).sum()))
               + float(logdet[0]) * 1.01 + 0.5 * pos.log_det)
    if abs(float(logdet[0])) > 1e-6:
        assert abs(lhs - rhs_bad) > 1e-8


def test_reverse_kl_estimate_near_zero_for_matching_pair():
    # identity flow against its own base distribution
    dec = ScaleDecoder(dim=3, cond_dim=0, num_layers=2, perm_seed=1)
    pos = MvgPosition(mean=np.zeros(3), chol=np.eye(3))
    est = reverse_kl_loss_estimate(dec, pos, np.zeros(0), 2000,
                                   np.random.default_rng(8))
    assert abs(est) < 1e-10


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def test_mvg_checkpoint_roundtrip(tmp_path):
    pyrs = make_pyramids(10, 2, 3, 4, seed=11)
    model = fit_mvg(pyrs)
    path = tmp_path / "model.cfck"
    save_mvg_checkpoint(path, model)
    loaded = load_mvg_checkpoint(path)
    for sa, sb in zip(model.scales, loaded.scales):
        assert (sa.height, sa.width) == (sb.height, sb.width)
        for pa, pb in zip(sa.positions, sb.positions):
            assert np.array_equal(pa.mean, pb.mean)
            assert np.array_equal(pa.chol, pb.chol)
    # byte-exact re-save
    save_mvg_checkpoint(tmp_path / "again.cfck", loaded)
    assert (tmp_path / "again.cfck").read_bytes() == path.read_bytes()


def test_mvg_checkpoint_corruption(tmp_path):
    pyrs = make_pyramids(3, 1, 1, 2, seed=12)
    path = tmp_path / "m.cfck"
    save_mvg_checkpoint(path, fit_mvg(pyrs))
    full = path.read_bytes()
    path.write_bytes(b"ZZZZ" + full[4:])
    with pytest.raises(FormatError):
        load_mvg_checkpoint(path)
    path.write_bytes(full[:-7])
    with pytest.raises(FormatError):
        load_mvg_checkpoint(path)
    path.write_bytes(full + b"\x00")
    with pytest.raises(FormatError, match="trailing"):
        load_mvg_checkpoint(path)
