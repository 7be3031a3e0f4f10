import math

import numpy as np
import pytest

from fedmeasure.data import (
    EmbeddingFormatError,
    EmbeddingSet,
    MixtureSpec,
    add_shared_factors,
    corrupt,
    dirichlet_partition,
    gaussian_mixture,
    inject_duplicates,
    random_mixture_spec,
    read_embeddings,
    sample_mixture,
    write_embeddings,
)


def small_set(n=60, d=6, classes=3, seed=0, labeled=True):
    spec = random_mixture_spec(
        num_classes=classes, dim=d, points_per_class=n // classes, seed=seed
    )
    dataset = gaussian_mixture(spec)
    if not labeled:
        dataset = EmbeddingSet(vectors=dataset.vectors, name=dataset.name)
    return dataset


def sorted_rows(dataset):
    order = np.lexsort(dataset.vectors.T)
    return dataset.vectors[order]


class TestGaussianMixture:
    def test_sample_mean_within_clt_bound(self):
        spec = MixtureSpec(
            num_classes=1,
            dim=4,
            class_means=[np.zeros(4)],
            class_scales=[0.1],
            points_per_class=10000,
            seed=7,
        )
        dataset = gaussian_mixture(spec)
        bound = 3 * 0.1 / math.sqrt(10000)
        assert np.all(np.abs(dataset.vectors.mean(axis=0)) < bound)

    def test_deterministic(self):
        spec = random_mixture_spec(num_classes=3, dim=8, points_per_class=50, seed=11)
        a = gaussian_mixture(spec)
        b = gaussian_mixture(spec)
        assert np.array_equal(a.vectors, b.vectors)
        assert np.array_equal(a.labels, b.labels)

    def test_label_counts(self):
        spec = random_mixture_spec(num_classes=2, dim=4, points_per_class=500, seed=1)
        dataset = gaussian_mixture(spec)
        assert np.sum(dataset.labels == 0) == 500
        assert np.sum(dataset.labels == 1) == 500

    def test_invalid_spec_rejected(self):
        with pytest.raises(ValueError):
            MixtureSpec(
                num_classes=1, dim=0, class_means=[np.zeros(0)],
                class_scales=[1.0], points_per_class=5,
            )
        with pytest.raises(ValueError):
            random_mixture_spec(num_classes=2, dim=4, class_scale=-1.0)

    def test_sample_mixture_counts(self):
        spec = random_mixture_spec(num_classes=3, dim=4, seed=2)
        dataset = sample_mixture(spec.class_means, spec.class_scales, [5, 0, 9], seed=3)
        assert dataset.n == 14
        assert np.sum(dataset.labels == 0) == 5
        assert np.sum(dataset.labels == 2) == 9


class TestDirichletPartition:
    def test_single_seller_unchanged(self):
        dataset = small_set()
        parts = dirichlet_partition(dataset, 1, alpha=0.5, seed=0)
        assert len(parts) == 1
        assert np.array_equal(parts[0].vectors, dataset.vectors)
        assert np.array_equal(parts[0].labels, dataset.labels)

    def test_large_alpha_near_uniform(self):
        spec = random_mixture_spec(num_classes=10, dim=4, points_per_class=1000, seed=5)
        dataset = gaussian_mixture(spec)
        parts = dirichlet_partition(dataset, 10, alpha=1e6, seed=42)
        for part in parts:
            props = np.bincount(part.labels, minlength=10) / part.n
            assert np.max(np.abs(props - 0.1)) < 0.05

    def test_conserves_points_exactly(self):
        dataset = small_set(n=90, classes=3, seed=9)
        parts = dirichlet_partition(dataset, 4, alpha=0.3, seed=1)
        assert sum(p.n for p in parts) == dataset.n
        merged = EmbeddingSet(
            vectors=np.concatenate([p.vectors for p in parts]),
            name="merged",
        )
        assert np.array_equal(sorted_rows(merged), sorted_rows(dataset))

    def test_unlabeled_rejected(self):
        with pytest.raises(ValueError, match="labeled"):
            dirichlet_partition(small_set(labeled=False), 2, alpha=0.5, seed=0)

    def test_bad_arguments(self):
        dataset = small_set()
        with pytest.raises(ValueError):
            dirichlet_partition(dataset, 0, alpha=0.5, seed=0)
        with pytest.raises(ValueError):
            dirichlet_partition(dataset, 2, alpha=0.0, seed=0)

    def test_deterministic(self):
        dataset = small_set(seed=3)
        a = dirichlet_partition(dataset, 3, alpha=0.5, seed=77)
        b = dirichlet_partition(dataset, 3, alpha=0.5, seed=77)
        for pa, pb in zip(a, b):
            assert np.array_equal(pa.vectors, pb.vectors)


class TestInjectDuplicates:
    def test_factor_one_identity(self):
        dataset = small_set()
        out = inject_duplicates(dataset, 1, seed=0)
        assert np.array_equal(out.vectors, dataset.vectors)

    def test_paper_count_example(self):
        rng = np.random.default_rng(0)
        dataset = EmbeddingSet(vectors=rng.standard_normal((10000, 4)))
        out = inject_duplicates(dataset, 200, seed=1)
        assert out.n == 10000
        assert np.unique(out.vectors, axis=0).shape[0] == 50

    @pytest.mark.parametrize("factor", [2, 3, 7, 100])
    def test_row_count_preserved(self, factor):
        dataset = small_set(n=99, classes=3)
        out = inject_duplicates(dataset, factor, seed=2)
        assert out.n == dataset.n
        assert np.unique(out.vectors, axis=0).shape[0] == math.ceil(99 / factor)

    def test_rows_come_from_input(self):
        dataset = small_set(n=30, classes=3, seed=8)
        out = inject_duplicates(dataset, 4, seed=3)
        input_rows = {tuple(row) for row in dataset.vectors}
        assert all(tuple(row) in input_rows for row in out.vectors)

    def test_labels_follow_rows(self):
        dataset = small_set(n=30, classes=3, seed=8)
        out = inject_duplicates(dataset, 3, seed=4)
        lookup = {tuple(row): label for row, label in zip(dataset.vectors, dataset.labels)}
        assert all(lookup[tuple(row)] == label for row, label in zip(out.vectors, out.labels))

    def test_factor_below_one_rejected(self):
        with pytest.raises(ValueError):
            inject_duplicates(small_set(), 0, seed=0)


class TestCorrupt:
    def test_gaussian_perturbation_grows_with_severity(self):
        dataset = small_set(n=600, d=8, classes=3, seed=4)
        mse = []
        for severity in range(1, 6):
            out = corrupt(dataset, "gaussian", severity, seed=10)
            mse.append(np.mean(np.sum((out.vectors - dataset.vectors) ** 2, axis=1)))
        assert all(a < b for a, b in zip(mse, mse[1:]))

    def test_mask_zero_count(self):
        dataset = small_set(n=30, d=10, classes=3, seed=5)
        out = corrupt(dataset, "mask", 5, seed=11)
        zeros_per_row = np.sum(out.vectors == 0.0, axis=1)
        assert np.all(zeros_per_row == 5)  # floor(0.5 * 10)

    def test_deterministic(self):
        dataset = small_set(seed=6)
        a = corrupt(dataset, "shift", 3, seed=12)
        b = corrupt(dataset, "shift", 3, seed=12)
        assert np.array_equal(a.vectors, b.vectors)

    def test_unknown_kind_rejected(self):
        with pytest.raises(ValueError, match="unknown corruption kind"):
            corrupt(small_set(), "sepia", 1, seed=0)

    def test_severity_out_of_range(self):
        with pytest.raises(ValueError):
            corrupt(small_set(), "gaussian", 0, seed=0)
        with pytest.raises(ValueError):
            corrupt(small_set(), "gaussian", 6, seed=0)

    @pytest.mark.parametrize("kind", ["shift", "scale"])
    def test_mean_distance_nondecreasing(self, kind):
        dataset = small_set(n=300, d=6, classes=3, seed=7)
        shifts = []
        for severity in range(1, 6):
            dists = []
            for seed in range(10):
                out = corrupt(dataset, kind, severity, seed=seed)
                dists.append(
                    np.linalg.norm(out.vectors.mean(axis=0) - dataset.vectors.mean(axis=0))
                )
            shifts.append(np.mean(dists))
        assert all(a <= b + 1e-12 for a, b in zip(shifts, shifts[1:]))


class TestSharedFactors:
    def test_adds_variance_along_direction(self):
        dataset = small_set(n=2000, d=6, classes=2, seed=1)
        direction = np.zeros((1, 6))
        direction[0, 0] = 1.0
        out = add_shared_factors(dataset, direction, [2.0], seed=3)
        var_before = dataset.vectors.var(axis=0)
        var_after = out.vectors.var(axis=0)
        assert var_after[0] > var_before[0] + 2.0
        np.testing.assert_allclose(var_after[1:], var_before[1:])

    def test_deterministic_and_label_preserving(self):
        dataset = small_set(seed=2)
        direction = np.eye(1, dataset.dim)
        a = add_shared_factors(dataset, direction, [1.0], seed=9)
        b = add_shared_factors(dataset, direction, [1.0], seed=9)
        assert np.array_equal(a.vectors, b.vectors)
        assert np.array_equal(a.labels, dataset.labels)


class TestEmbeddingIO:
    def test_binary_round_trip_bit_identical(self, tmp_path):
        dataset = small_set(seed=13)
        path = tmp_path / "data.bin"
        write_embeddings(dataset, path)
        back = read_embeddings(path)
        assert np.array_equal(back.vectors, dataset.vectors)
        assert np.array_equal(back.labels, dataset.labels)

    def test_binary_round_trip_unlabeled(self, tmp_path):
        dataset = small_set(seed=13, labeled=False)
        path = tmp_path / "data.bin"
        write_embeddings(dataset, path)
        back = read_embeddings(path)
        assert back.labels is None
        assert np.array_equal(back.vectors, dataset.vectors)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(EmbeddingFormatError, match="not an embedding file"):
            read_embeddings(path)

    def test_truncated_payload(self, tmp_path):
        dataset = small_set(seed=14)
        path = tmp_path / "data.bin"
        write_embeddings(dataset, path)
        blob = path.read_bytes()
        path.write_bytes(blob[:-12])
        with pytest.raises(EmbeddingFormatError, match="truncated"):
            read_embeddings(path)

    def test_trailing_bytes(self, tmp_path):
        dataset = small_set(seed=14)
        path = tmp_path / "data.bin"
        write_embeddings(dataset, path)
        path.write_bytes(path.read_bytes() + b"xx")
        with pytest.raises(EmbeddingFormatError, match="trailing"):
            read_embeddings(path)

    def test_csv_cross_format(self, tmp_path):
        dataset = small_set(n=24, d=5, classes=3, seed=15)
        bin_path = tmp_path / "data.bin"
        csv_path = tmp_path / "data.csv"
        write_embeddings(dataset, bin_path)
        write_embeddings(dataset, csv_path)
        from_bin = read_embeddings(bin_path)
        from_csv = read_embeddings(csv_path)
        assert np.max(np.abs(from_bin.vectors - from_csv.vectors)) < 1e-12
        assert np.array_equal(from_bin.labels, from_csv.labels)

    def test_ragged_csv_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("e0,e1\n1.0,2.0\n3.0\n")
        with pytest.raises(EmbeddingFormatError, match="ragged"):
            read_embeddings(path)

    def test_invalid_csv_value_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("e0,e1\n1.0,banana\n")
        with pytest.raises(EmbeddingFormatError, match="invalid CSV value"):
            read_embeddings(path)
