import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedmgp.data import (
    ClassNotAssignedError,
    InfeasibleSplitError,
    base_novel_split,
    dirichlet_partition,
    generate_client_data,
    largest_remainder,
    make_task,
    pathological_split,
    read_datasets_csv,
    write_datasets_csv,
)
from fedmgp.features import build_basis


@pytest.fixture
def world(rng):
    basis = build_basis(32, 4, 3, 0.3, rng, n_free=10)
    return basis, make_task(basis, 10)


class TestSplits:
    @pytest.mark.parametrize("K, n_base", [(10, 5), (11, 6), (2, 1), (1, 1)])
    def test_base_novel_halves(self, K, n_base):
        base, novel = base_novel_split(K)
        assert len(base) == n_base
        assert set(base) | set(novel) == set(range(K))
        assert not set(base) & set(novel)

    def test_pathological_disjoint_cover(self, rng):
        base, novel, assign = pathological_split(40, 10, rng)
        owned = [k for a in assign for k in a]
        assert sorted(owned) == list(base)
        assert {len(a) for a in assign} == {2}

    def test_pathological_uneven_sizes_differ_by_one(self, rng):
        _, _, assign = pathological_split(30, 4, rng)
        sizes = [len(a) for a in assign]
        assert max(sizes) - min(sizes) <= 1 and sum(sizes) == 15

    def test_pathological_infeasible(self, rng):
        with pytest.raises(InfeasibleSplitError):
            pathological_split(10, 10, rng)

    def test_largest_remainder_ties_go_low(self):
        np.testing.assert_array_equal(largest_remainder(np.array([1 / 3] * 3), 4), [2, 1, 1])

    @given(st.lists(st.floats(0.0, 1.0), min_size=1, max_size=12), st.integers(0, 500))
    def test_largest_remainder_sums(self, raw, total):
        shares = np.array(raw)
        if shares.sum() == 0:
            return
        shares = shares / shares.sum()
        counts = largest_remainder(shares, total)
        assert counts.sum() == total
        assert np.all(np.abs(counts - shares * total) < 1 + 1e-9)

    @settings(deadline=None)
    @given(st.integers(1, 12), st.integers(1, 8), st.floats(0.05, 10.0), st.integers(1, 40), st.integers(0, 10**6))
    def test_dirichlet_conserves_counts(self, K, N, alpha, per_class, seed):
        props, counts = dirichlet_partition(K, N, alpha, per_class, np.random.default_rng(seed))
        np.testing.assert_array_equal(counts.sum(axis=0), per_class)
        assert np.all(counts >= 0)
        nonempty = counts.sum(axis=1) > 0
        np.testing.assert_allclose(props[nonempty].sum(axis=1), 1.0)

    def test_dirichlet_small_alpha_is_skewed(self, rng):
        skewed, _ = dirichlet_partition(20, 5, 0.05, 100, rng)
        flat, _ = dirichlet_partition(20, 5, 100.0, 100, rng)
        assert skewed.max(axis=1).mean() > flat.max(axis=1).mean()

    def test_dirichlet_rejects_bad_alpha(self, rng):
        with pytest.raises(ValueError):
            dirichlet_partition(4, 2, 0.0, 10, rng)


class TestGeneration:
    def test_prototypes_share_global_component(self, world):
        basis, task = world
        np.testing.assert_allclose(task.prototypes @ basis.global_dir, 1.0, atol=1e-10)

    def test_counts_and_shift(self, world, rng):
        basis, task = world
        counts = np.zeros(10, dtype=int)
        counts[[1, 3]] = [4, 6]
        ds = generate_client_data(task, basis, 2, counts, 1.0, 3.0, 0.0, rng, allowed=(1, 3))
        assert ds.n == 10 and ds.classes == (1, 3)
        np.testing.assert_allclose(ds.X[0], task.prototypes[1] + 3.0 * basis.client_dirs[2], atol=1e-12)
        np.testing.assert_allclose(ds.class_proportions[[1, 3]], [0.4, 0.6])

    def test_unassigned_class_rejected(self, world, rng):
        basis, task = world
        counts = np.zeros(10, dtype=int)
        counts[5] = 1
        with pytest.raises(ClassNotAssignedError):
            generate_client_data(task, basis, 0, counts, 1.0, 1.0, 0.1, rng, allowed=(1, 3))

    def test_noise_lives_in_noise_subspace(self, world, rng):
        basis, task = world
        counts = np.full(10, 3)
        ds = generate_client_data(task, basis, 1, counts, 1.0, 0.0, 0.5, rng)
        resid = ds.X - task.prototypes[ds.y]
        proj = resid @ basis.noise_dirs.T @ basis.noise_dirs
        np.testing.assert_allclose(resid, proj, atol=1e-12)

    def test_csv_round_trip(self, world, rng, tmp_path):
        basis, task = world
        sets = [generate_client_data(task, basis, c, np.full(10, 2), 1.0, 1.0, 0.3, rng) for c in range(2)]
        path = tmp_path / "data.csv"
        write_datasets_csv(path, sets)
        assert path.read_text().startswith("# schema: fedmgp.dataset/1\n")
        back = read_datasets_csv(path)
        for ds in sets:
            X, y = back[ds.client_id]
            np.testing.assert_array_equal(X, ds.X)
            np.testing.assert_array_equal(y, ds.y)
