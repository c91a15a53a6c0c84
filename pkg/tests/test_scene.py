import numpy as np
import pytest

from splatfield.errors import DimensionError
from splatfield.scene import (Gaussian, GaussianMap, VisibilityRecord, covariance,
                              quat_to_rotmat, rotmat_to_quat)
from splatfield.mapper import covisibility_iou


def make_gaussian(position=(0, 0, 0), rotation=(1, 0, 0, 0), log_scale=(0, 0, 0),
                  opacity_logit=0.0, color=(0.5, 0.5, 0.5), feature=(0.0,)):
    return Gaussian(np.array(position, float), np.array(rotation, float),
                    np.array(log_scale, float), opacity_logit,
                    np.array(color, float), np.array(feature, float))


def quat_to_rotmat_sandwich(q):
    """Independent quaternion-to-matrix route: rotate basis vectors by the
    sandwich product q v q*."""
    w, x, y, z = q / np.linalg.norm(q)

    def qmul(a, b):
        aw, ax, ay, az = a
        bw, bx, by, bz = b
        return np.array([
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ])

    conj = np.array([w, -x, -y, -z])
    cols = []
    for e in np.eye(3):
        v = np.concatenate([[0.0], e])
        cols.append(qmul(qmul(np.array([w, x, y, z]), v), conj)[1:])
    return np.stack(cols, axis=1)


class TestCovariance:
    def test_identity(self):
        g = make_gaussian()
        assert np.allclose(covariance(g), np.eye(3), atol=1e-12)

    def test_axis_scaled(self):
        g = make_gaussian(log_scale=(np.log(2.0), 0, 0))
        assert np.allclose(covariance(g), np.diag([4.0, 1.0, 1.0]), atol=1e-12)

    def test_matches_independent_rotation_route(self):
        rng = np.random.default_rng(7)
        for _ in range(50):
            q = rng.normal(size=4)
            ls = rng.uniform(-2, 1, size=3)
            g = make_gaussian(rotation=q, log_scale=ls)
            R = quat_to_rotmat_sandwich(q)
            expected = R @ np.diag(np.exp(2 * ls)) @ R.T
            assert np.allclose(covariance(g), expected, atol=1e-10)

    def test_symmetry(self):
        rng = np.random.default_rng(1)
        g = make_gaussian(rotation=rng.normal(size=4), log_scale=rng.uniform(-1, 1, 3))
        S = covariance(g)
        assert np.abs(S - S.T).max() < 1e-12

    def test_psd_random_draws(self):
        rng = np.random.default_rng(3)
        for _ in range(1000):
            g = make_gaussian(rotation=rng.normal(size=4),
                              log_scale=rng.uniform(-3, 2, size=3))
            eig = np.linalg.eigvalsh(covariance(g))
            assert eig.min() >= -1e-10

    def test_quaternion_sign_symmetry(self):
        rng = np.random.default_rng(11)
        q = rng.normal(size=4)
        ls = rng.uniform(-1, 1, 3)
        a = covariance(make_gaussian(rotation=q, log_scale=ls))
        b = covariance(make_gaussian(rotation=-q, log_scale=ls))
        assert np.array_equal(a, b)


class TestQuatRoundtrip:
    def test_rotmat_to_quat_roundtrip(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            q = rng.normal(size=4)
            q /= np.linalg.norm(q)
            R = quat_to_rotmat(q)
            q2 = rotmat_to_quat(R)
            assert np.allclose(quat_to_rotmat(q2), R, atol=1e-10)


class TestAppend:
    def test_append_to_empty(self):
        m = GaussianMap(feature_dim=2)
        m.append([make_gaussian(feature=(0.0, 0.0)) for _ in range(3)])
        assert len(m) == 3

    def test_append_nothing_is_identity(self):
        m = GaussianMap(feature_dim=2)
        m.append([make_gaussian(feature=(1.0, 2.0)) for _ in range(5)])
        h = m.content_hash()
        m.append([])
        assert len(m) == 5 and m.content_hash() == h

    def test_feature_dim_mismatch_rejected(self):
        m = GaussianMap(feature_dim=3)
        with pytest.raises(DimensionError):
            m.append([make_gaussian(feature=(1.0, 2.0))])

    def test_existing_values_bit_identical(self):
        rng = np.random.default_rng(0)
        m = GaussianMap(feature_dim=4)
        m.append_arrays(rng.normal(size=(5, 3)), rng.normal(size=(5, 4)),
                        rng.normal(size=(5, 3)), rng.normal(size=5),
                        rng.uniform(size=(5, 3)), rng.normal(size=(5, 4)))
        before = {k: getattr(m, k).copy() for k in
                  ("positions", "rotations", "log_scales", "opacity_logits",
                   "colors", "features")}
        m.append([make_gaussian(feature=np.zeros(4)) for _ in range(2)])
        assert len(m) == 7
        for k, v in before.items():
            assert np.array_equal(getattr(m, k)[:5], v)

    def test_iou_on_common_prefix_after_growth(self):
        m = GaussianMap(feature_dim=1)
        m.append([make_gaussian() for _ in range(5)])
        rec5 = m.record_visibility(0, np.array([1, 1, 0, 0, 1], bool))
        m.append([make_gaussian() for _ in range(2)])
        rec7 = m.record_visibility(1, np.array([1, 0, 1, 0, 1, 1, 1], bool))
        # prefix of 5 bits: a=11001, b=10101 -> inter 2 (idx 0, 4), union 4
        assert covisibility_iou(rec5, rec7) == pytest.approx(2 / 4)


class TestVisibilityRecord:
    def test_length_must_match_version(self):
        with pytest.raises(DimensionError):
            VisibilityRecord(0, np.zeros(4, bool), map_version=5)


class TestMapExport:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(2)
        m = GaussianMap(feature_dim=3)
        m.append_arrays(rng.normal(size=(6, 3)), rng.normal(size=(6, 4)),
                        rng.uniform(-3, 0, size=(6, 3)), rng.uniform(-2, 2, size=6),
                        rng.uniform(size=(6, 3)), rng.normal(size=(6, 3)))
        m.normalize_rotations()
        path = tmp_path / "map.txt"
        m.save_text(path)
        header = path.read_text().splitlines()[0]
        assert header == "gsff-map v1 count=6 feature_dim=3"
        m2 = GaussianMap.load_text(path)
        assert len(m2) == 6
        # 9 significant digits survive the round trip to ~1e-8 relative
        assert np.allclose(m2.positions, m.positions, rtol=1e-7, atol=1e-8)
        assert np.allclose(m2.scales, m.scales, rtol=1e-7)
        assert np.allclose(m2.opacities, m.opacities, rtol=1e-6)
        assert np.allclose(m2.features, m.features, rtol=1e-7, atol=1e-8)

    def test_empty_map(self, tmp_path):
        m = GaussianMap(feature_dim=2)
        path = tmp_path / "empty.txt"
        m.save_text(path)
        assert len(GaussianMap.load_text(path)) == 0
