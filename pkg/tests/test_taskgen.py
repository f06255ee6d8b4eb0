import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clpu.detrng import derive_stream
from clpu.errors import BadMagicError, CountMismatchError, TruncatedError
from clpu.taskgen import (BenchmarkSpec, apply_orthogonal, apply_permutation, build_benchmark,
                          export_benchmark, gen_blob_base, load_exported, load_idx, permute_variant,
                          random_orthogonal, rotate_variant, split_tasks, write_idx)


def base(noise=0.6, seed=0, **kw):
    args = dict(num_labels=10, dim=8, n_train=200, n_test=100)
    args.update(kw)
    return gen_blob_base(noise_sigma=noise, stream=derive_stream(seed, ["base"]), **args)


class TestBlobs:
    def test_balanced_counts(self):
        ds = gen_blob_base(10, 32, 1000, 500, 0.6, derive_stream(0, ["b"]))
        assert np.bincount(ds.y_train).tolist() == [100] * 10
        assert np.bincount(ds.y_test).tolist() == [50] * 10
        assert ds.d_in == 32 and ds.mask == tuple(range(10))

    def test_not_divisible(self):
        with pytest.raises(ValueError):
            base(n_train=105)

    def test_deterministic(self):
        a, b = base(seed=3), base(seed=3)
        assert a.x_train.tobytes() == b.x_train.tobytes()
        assert a.x_test.tobytes() == b.x_test.tobytes()

    def test_noise_free_examples_sit_on_means(self):
        ds = base(noise=0.0)
        for c in range(10):
            rows = ds.x_train[ds.y_train == c]
            np.testing.assert_array_equal(rows, rows[:1].repeat(len(rows), 0))
            assert np.linalg.norm(rows[0]) == pytest.approx(3.0, rel=1e-6)

    def test_noise_free_is_learnable(self):
        # nearest-mean classification is perfect without noise
        ds = base(noise=0.0)
        means = np.stack([ds.x_train[ds.y_train == c][0] for c in range(10)])
        pred = np.argmin(((ds.x_train[:, None] - means[None]) ** 2).sum(-1), axis=1)
        assert np.all(pred == ds.y_train)

    def test_bad_sizes(self):
        with pytest.raises(ValueError):
            base(num_labels=1, n_train=10, n_test=10)


class TestTransforms:
    def test_orthogonal(self):
        q = random_orthogonal(16, derive_stream(0, ["q"]))
        assert np.abs(q.T @ q - np.eye(16)).max() < 1e-5

    def test_rotation_preserves_distances(self):
        b = base()
        r = rotate_variant(b, derive_stream(1, ["rot"]))
        d0 = np.linalg.norm(b.x_train[:50, None] - b.x_train[None, :50], axis=-1)
        d1 = np.linalg.norm(r.x_train[:50, None] - r.x_train[None, :50], axis=-1)
        np.testing.assert_allclose(d1, d0, rtol=1e-4, atol=1e-5)
        np.testing.assert_array_equal(r.y_train, b.y_train)

    def test_identity_rotation(self):
        b = base()
        r = apply_orthogonal(b, np.eye(b.d_in))
        np.testing.assert_array_equal(r.x_train, b.x_train)

    def test_identity_permutation(self):
        b = base()
        np.testing.assert_array_equal(apply_permutation(b, range(b.d_in)).x_test, b.x_test)

    def test_permutation_inverse(self):
        b = base()
        perm = derive_stream(2, ["p"]).shuffle(b.d_in)
        inv = np.argsort(perm)
        back = apply_permutation(apply_permutation(b, perm), inv)
        np.testing.assert_array_equal(back.x_train, b.x_train)

    def test_permutation_keeps_row_multisets(self):
        b = base()
        p = permute_variant(b, derive_stream(2, ["p"]))
        np.testing.assert_array_equal(np.sort(p.x_train, axis=1), np.sort(b.x_train, axis=1))

    def test_bad_permutation(self):
        with pytest.raises(ValueError):
            apply_permutation(base(), [0] * 8)


class TestSplit:
    def test_five_pairs(self):
        tasks = split_tasks(base(), 2)
        assert [t.mask for t in tasks] == [(0, 1), (2, 3), (4, 5), (6, 7), (8, 9)]
        for t in tasks:
            assert set(np.unique(t.y_train)) <= set(t.mask)

    def test_partition(self):
        b = base()
        tasks = split_tasks(b, 2)
        assert sum(len(t.y_train) for t in tasks) == len(b.y_train)
        rows = np.concatenate([t.x_train for t in tasks])
        assert sorted(map(bytes, rows)) == sorted(map(bytes, b.x_train))

    def test_not_divisible(self):
        with pytest.raises(ValueError):
            split_tasks(base(), 3)


class TestBenchmarks:
    @pytest.mark.parametrize("family", ["rot-blobs", "perm-blobs", "split-blobs"])
    def test_families(self, family):
        tasks = build_benchmark(BenchmarkSpec(family=family, n_train=200, n_test=100))
        assert sorted(tasks) == [1, 2, 3, 4, 5]
        assert len({t.d_in for t in tasks.values()}) == 1
        masks = [t.mask for t in tasks.values()]
        if family == "split-blobs":
            assert all(not set(a) & set(b) for i, a in enumerate(masks) for b in masks[i + 1:])
        else:
            assert all(m == tuple(range(10)) for m in masks)

    def test_regeneration(self):
        spec = BenchmarkSpec(n_train=200, n_test=100)
        a, b = build_benchmark(spec), build_benchmark(spec)
        assert all(a[k].x_train.tobytes() == b[k].x_train.tobytes() for k in a)

    def test_tasks_differ(self):
        tasks = build_benchmark(BenchmarkSpec(n_train=200, n_test=100))
        assert not np.array_equal(tasks[1].x_train, tasks[2].x_train)

    def test_unknown_family(self):
        with pytest.raises(ValueError):
            BenchmarkSpec(family="cifar")

    def test_export_roundtrip(self, tmp_path):
        spec = BenchmarkSpec(family="split-blobs", n_train=200, n_test=100)
        tasks = build_benchmark(spec)
        export_benchmark(tasks, tmp_path, spec)
        back = load_exported(tmp_path)
        for k in tasks:
            assert back[k].x_train.tobytes() == tasks[k].x_train.tobytes()
            np.testing.assert_array_equal(back[k].y_test, tasks[k].y_test)
            assert back[k].mask == tasks[k].mask


def write_fake_idx(tmp_path, n=12, rows=4, cols=5, n_labels=None):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, size=(n, rows, cols), dtype=np.uint8)
    labels = np.arange(n_labels if n_labels is not None else n) % 3
    ip, lp = str(tmp_path / "img.idx"), str(tmp_path / "lab.idx")
    write_idx(ip, lp, imgs, labels)
    return ip, lp, imgs


class TestIdx:
    def test_roundtrip(self, tmp_path):
        ip, lp, imgs = write_fake_idx(tmp_path)
        x, y, shape = load_idx(ip, lp)
        assert shape == (4, 5) and x.shape == (12, 20)
        np.testing.assert_allclose(x, imgs.reshape(12, 20) / 255.0, rtol=1e-6)
        assert x.min() >= 0 and x.max() <= 1

    def test_mnist_header_arithmetic(self, tmp_path):
        ip, lp, _ = write_fake_idx(tmp_path, n=2, rows=28, cols=28)
        assert load_idx(ip, lp)[0].shape[1] == 784

    def test_bad_magic(self, tmp_path):
        ip, lp, _ = write_fake_idx(tmp_path)
        raw = bytearray(open(ip, "rb").read())
        raw[:4] = struct.pack(">I", 0x00000802)
        open(ip, "wb").write(raw)
        with pytest.raises(BadMagicError, match="bad magic"):
            load_idx(ip, lp)

    def test_count_mismatch(self, tmp_path):
        ip, lp, _ = write_fake_idx(tmp_path, n_labels=11)
        with pytest.raises(CountMismatchError, match="count mismatch"):
            load_idx(ip, lp)

    def test_truncated(self, tmp_path):
        ip, lp, _ = write_fake_idx(tmp_path)
        raw = open(ip, "rb").read()
        open(ip, "wb").write(raw[:-7])
        with pytest.raises(TruncatedError):
            load_idx(ip, lp)

    @pytest.mark.parametrize("family", ["perm-idx", "rot-idx", "split-idx"])
    def test_idx_families(self, tmp_path, family):
        rng = np.random.default_rng(1)
        imgs = rng.integers(0, 256, size=(30, 6, 6), dtype=np.uint8)
        labels = np.arange(30) % 10
        paths = [str(tmp_path / n) for n in ("a", "b", "c", "d")]
        write_idx(paths[0], paths[1], imgs, labels)
        write_idx(paths[2], paths[3], imgs[:10], labels[:10])
        spec = BenchmarkSpec(family=family, n_train=20, n_test=10, idx_train_images=paths[0],
                             idx_train_labels=paths[1], idx_test_images=paths[2], idx_test_labels=paths[3])
        tasks = build_benchmark(spec)
        assert len(tasks) == 5 and tasks[1].d_in == 36
        assert len(tasks[1].y_train) <= 20


@given(st.integers(0, 2 ** 32), st.integers(2, 12))
@settings(max_examples=20, deadline=None)
def test_variants_are_isometries(seed, dim):
    b = gen_blob_base(4, dim, 40, 20, 0.1, derive_stream(seed, ["b"]))
    for v in (permute_variant(b, derive_stream(seed, ["p"])), rotate_variant(b, derive_stream(seed, ["r"]))):
        np.testing.assert_allclose(np.linalg.norm(v.x_train, axis=1), np.linalg.norm(b.x_train, axis=1),
                                   rtol=1e-5)
        np.testing.assert_array_equal(v.y_train, b.y_train)
