import numpy as np
import pytest

from metafgnet.data import (
    DatasetFormatError,
    LabeledDataset,
    Relatedness,
    TaskSpec,
    generate_task,
    load_dataset,
    read_indices,
    sample_batch,
    save_dataset,
    subset_by_indices,
    write_indices,
)

SMALL = TaskSpec(input_dim=12, subspace_dim=4, n_t=4, shots=3, test_per_class=5, n_s=6, aux_per_class=10, seed=5)


def test_generation_is_a_pure_function_of_the_spec():
    a, b = generate_task(SMALL), generate_task(SMALL)
    for x, y in zip(a, b):
        assert x.features.tobytes() == y.features.tobytes()
        assert np.array_equal(x.labels, y.labels)
    c = generate_task(TaskSpec(**{**SMALL.__dict__, "seed": 6}))
    assert not np.array_equal(a.auxiliary.features, c.auxiliary.features)


def test_split_sizes_and_labels():
    task = generate_task(SMALL)
    assert len(task.target_train) == 4 * 3
    assert len(task.target_test) == 4 * 5
    n_clean = 6 * 10
    assert len(task.auxiliary) == n_clean + round(0.1 * n_clean)
    assert np.bincount(task.target_train.labels).tolist() == [3] * 4
    assert task.auxiliary.labels.max() < 6 and task.target_test.labels.max() < 4
    assert task.target_train.flags is None


def test_flag_counts():
    task = generate_task(SMALL)
    flags = task.auxiliary.flags
    assert np.sum(flags == Relatedness.RELATED) == 3 * 10
    assert np.sum(flags == Relatedness.UNRELATED) == 3 * 10
    assert np.sum(flags == Relatedness.NOISE) == 6


def test_flag_consistency_with_subspaces():
    task = generate_task(SMALL)
    flags, clean = task.auxiliary.flags, task.aux_clean
    related = clean[flags == Relatedness.RELATED]
    unrelated = clean[flags == Relatedness.UNRELATED]
    assert np.abs(related @ task.complement_basis).max() < 1e-10
    assert np.abs(unrelated @ task.semantic_basis).max() < 1e-10
    assert np.isnan(clean[flags == Relatedness.NOISE]).all()
    basis = np.hstack([task.semantic_basis, task.complement_basis])
    np.testing.assert_allclose(basis.T @ basis, np.eye(12), atol=1e-12)


def test_target_data_lives_near_the_semantic_subspace():
    spec = TaskSpec(**{**SMALL.__dict__, "isotropic_noise": 0.0})
    task = generate_task(spec)
    assert np.abs(task.target_train.features @ task.complement_basis).max() < 1e-10


def test_degenerate_fractions():
    none = generate_task(TaskSpec(**{**SMALL.__dict__, "related_fraction": 0.0}))
    assert not np.any(none.auxiliary.flags == Relatedness.RELATED)
    clean = generate_task(TaskSpec(**{**SMALL.__dict__, "noise_fraction": 0.0}))
    assert not np.any(clean.auxiliary.flags == Relatedness.NOISE)
    assert len(clean.auxiliary) == 60


@pytest.mark.parametrize(
    "field,value",
    [("related_fraction", 1.5), ("noise_fraction", -0.1), ("shots", 0), ("n_t", 1), ("subspace_dim", 12)],
)
def test_task_spec_validation(field, value):
    with pytest.raises(ValueError):
        TaskSpec(**{**SMALL.__dict__, field: value})


def test_labeled_dataset_validation():
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((3, 2)), np.array([0, 1]), 2)
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((2, 2)), np.array([0, 2]), 2)
    with pytest.raises(ValueError):
        LabeledDataset(np.zeros((2, 2)), np.array([0, 1]), 2, np.zeros(3, dtype=np.int8))


# -- sampling and subsets ------------------------------------------------------------


def test_sample_batch_draws_distinct_examples_deterministically():
    ds = generate_task(SMALL).auxiliary
    a = sample_batch(ds, 20, np.random.default_rng(1))
    b = sample_batch(ds, 20, np.random.default_rng(1))
    assert np.array_equal(a.features, b.features)
    assert len({row.tobytes() for row in a.features}) == 20
    with pytest.raises(ValueError):
        sample_batch(ds, len(ds) + 1, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_batch(ds, 0, np.random.default_rng(0))


def test_sample_batch_inclusion_is_uniform():
    n, k, draws = 20, 5, 4000
    ds = LabeledDataset(np.arange(n, dtype=float)[:, None], np.zeros(n, dtype=np.int64), 1)
    rng = np.random.default_rng(0)
    counts = np.zeros(n)
    for _ in range(draws):
        counts[sample_batch(ds, k, rng).features[:, 0].astype(int)] += 1
    p = k / n
    sd = np.sqrt(draws * p * (1 - p))
    assert np.abs(counts - draws * p).max() < 5 * sd


def test_subset_by_indices():
    ds = generate_task(SMALL).auxiliary
    sub = subset_by_indices(ds, [5, 1, 9])
    assert np.array_equal(sub.features, ds.features[[1, 5, 9]])
    assert np.array_equal(sub.flags, ds.flags[[1, 5, 9]])
    for bad, err in (([], ValueError), ([1, 1], ValueError), ([len(ds)], IndexError), ([-1], IndexError)):
        with pytest.raises(err):
            subset_by_indices(ds, bad)


# -- files ----------------------------------------------------------------------------


@pytest.mark.parametrize("with_flags", [True, False])
def test_dataset_file_round_trip(tmp_path, with_flags):
    ds = generate_task(SMALL).auxiliary
    if not with_flags:
        ds = LabeledDataset(ds.features, ds.labels, ds.n_classes)
    save_dataset(ds, tmp_path / "d.bin")
    back = load_dataset(tmp_path / "d.bin")
    assert back.features.tobytes() == ds.features.tobytes()
    assert np.array_equal(back.labels, ds.labels) and back.n_classes == ds.n_classes
    if with_flags:
        assert np.array_equal(back.flags, ds.flags)
    else:
        assert back.flags is None


def test_dataset_file_errors(tmp_path):
    ds = generate_task(SMALL).target_train
    path = tmp_path / "d.bin"
    save_dataset(ds, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-1])
    with pytest.raises(DatasetFormatError, match="payload"):
        load_dataset(path)
    path.write_bytes(b"hello\n")
    with pytest.raises(DatasetFormatError):
        load_dataset(path)
    path.write_bytes(raw.replace(b"input_dim", b"inputdim"))
    with pytest.raises(DatasetFormatError):
        load_dataset(path)
    path.write_bytes(raw.replace(b"n_classes 4", b"n_classes z"))
    with pytest.raises(DatasetFormatError):
        load_dataset(path)


def test_index_file_round_trip(tmp_path):
    write_indices([3, 0, 17], tmp_path / "i.txt")
    assert (tmp_path / "i.txt").read_text() == "3\n0\n17\n"
    assert read_indices(tmp_path / "i.txt") == [3, 0, 17]
    (tmp_path / "bad.txt").write_text("1\n-2\n")
    with pytest.raises(ValueError, match="bad.txt:2"):
        read_indices(tmp_path / "bad.txt")
