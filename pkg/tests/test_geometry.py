import logging
from itertools import product

import numpy as np
import pytest

from alignlab.app.data import Dataset, gen_dataset, mirror_dataset, sigma_beta
from alignlab.app.geometry import (
    D_n,
    G_n,
    Verdict,
    alignment_probe,
    alignment_tau,
    arrangement,
    certify_extremal,
    decoupled_fields,
    enumerate_cells,
    extremal_set,
    find_extremal,
    max_cell_count,
    read_extremal_jsonl,
    sector_violations,
    sup_deviation,
    write_extremal_jsonl,
)
from alignlab.app.network import NetParams
from alignlab.app.utils import DimensionMismatch, EnumerationBudgetExceeded
from alignlab.app.validation import (
    Assumption1Input,
    CellMode,
    LinearTeacher,
    OrthogonalBasisInput,
    StandardGaussianInput,
)


def points(n, d, seed=0):
    return np.random.default_rng(seed).standard_normal((n, d))


def test_D_n_single_point(hand_data):
    assert np.array_equal(D_n([1, 0], hand_data), [1, 0])
    assert np.array_equal(D_n([-1, 0], hand_data), [0, 0])
    assert G_n([1, 0], hand_data) == 1


def test_D_n_with_params(hand_data):
    params = NetParams(a=[0.5], W=[[1.0, 0.0]])
    assert np.allclose(D_n([1, 0], hand_data, params), [0.5, 0])


def test_D_n_shape(hand_data):
    with pytest.raises(DimensionMismatch):
        D_n([1, 0, 0], hand_data)


@pytest.mark.parametrize('n,d,expected', [(1, 2, 2), (3, 2, 6), (3, 3, 8), (5, 3, 22)])
def test_max_cell_count(n, d, expected):
    assert max_cell_count(n, d) == expected


def test_cells_single_point():
    assert len(enumerate_cells(np.array([[1.0, 0.0]]))) == 2


def test_cells_generic_plane():
    cells = arrangement(points(3, 2))
    assert cells.exact is True
    assert len(cells) == 6


@pytest.mark.parametrize('n,d', [(4, 2), (5, 3), (6, 3), (7, 4)])
def test_cells_generic_count(n, d):
    X = points(n, d, seed=n + d)
    cells = enumerate_cells(X, CellMode.exact)
    assert len(cells) == max_cell_count(n, d)
    for cell in cells:
        assert cell.pattern.strict
        assert np.array_equal(np.sign(X @ cell.representative), cell.pattern.signs)
        assert np.linalg.norm(cell.representative) == pytest.approx(1)


def test_cells_orthogonal():
    cells = enumerate_cells(np.eye(3))
    assert len(cells) == 8
    assert [c.pattern.signs for c in cells] == sorted(c.pattern.signs for c in cells)


def test_cells_sampled_subset():
    X = points(6, 3, seed=1)
    exact = {c.pattern for c in enumerate_cells(X, CellMode.exact)}
    sampled = {c.pattern for c in enumerate_cells(X, CellMode.sampled, budget=5000, seed=3)}
    assert sampled <= exact
    assert len(sampled) >= len(exact) // 2


def test_cells_budget():
    with pytest.raises(EnumerationBudgetExceeded):
        arrangement(points(10, 5), CellMode.exact)
    cells = arrangement(points(10, 5), CellMode.auto, budget=1000)
    assert cells.exact is False
    assert 0 < len(cells) <= max_cell_count(10, 5)


def test_cells_degenerate_fallback(caplog, teacher):
    caplog.set_level(logging.WARNING)
    dataset = gen_dataset(StandardGaussianInput(d=3), teacher, 10, seed=1)
    cells = arrangement(mirror_dataset(dataset), budget=2000)
    assert cells.exact is False
    assert cells
    assert 'not in general position' in caplog.text


def test_orthogonal_extremal_set(orthogonal_data):
    found = extremal_set(orthogonal_data)
    assert all(c.verdict == Verdict.extremal for c in found)
    fields = sorted(tuple(c.D) for c in found)
    assert fields == [(0.0, 0.0), (0.0, 0.5), (0.5, 0.0), (0.5, 0.5)]


def test_certify_zero_field(orthogonal_data):
    candidate = certify_extremal(orthogonal_data, [-1, -1])
    assert candidate.verdict == Verdict.extremal
    assert not np.any(candidate.D)
    assert candidate.residual == 0


def test_certify_not_extremal():
    dataset = Dataset(X=[[1.0, 0.0], [0.0, 1.0]], y=[1.0, -1.0])
    candidate = certify_extremal(dataset, [1, -1])
    assert candidate.verdict == Verdict.extremal
    candidate = certify_extremal(dataset, [1, 1])
    assert candidate.verdict == Verdict.not_extremal
    assert candidate.residual > 0


def test_certify_boundary_vertices():
    """
    w = e1 lies on the hyperplane of x2 = e2, the vertex η_2 = 1 is extremal
    """
    dataset = Dataset(X=[[1.0, 0.0], [0.0, 1.0]], y=[1.0, 1.0])
    candidate = certify_extremal(dataset, [1, 0])
    assert candidate.verdict == Verdict.extremal
    assert candidate.pattern.signs == (1, 0)


def test_certify_too_many_boundary():
    dataset = Dataset(X=np.vstack([[1.0, 0.0], np.tile([0.0, 1.0], (3, 1))]), y=[1.0, 1.0, 1.0, 1.0])
    candidate = certify_extremal(dataset, [1, 0], max_boundary=2)
    assert candidate.verdict == Verdict.boundary_ambiguous
    assert np.isnan(candidate.residual)


def test_find_extremal_single_point(hand_data):
    candidate = find_extremal(hand_data, [1, 0.3])
    assert candidate.verdict == Verdict.extremal
    assert np.allclose(candidate.D, [1, 0])
    assert candidate.iterations == 1


def test_find_extremal_gaussian():
    teacher = LinearTeacher(beta_star=[1, 0, 0])
    dataset = gen_dataset(StandardGaussianInput(d=3), teacher, 4000, seed=0)
    plus = find_extremal(dataset, [1, 0, 0])
    minus = find_extremal(dataset, [-1, 0, 0])
    assert plus.verdict == Verdict.extremal
    assert minus.verdict == Verdict.extremal
    assert np.linalg.norm(plus.D - [0.5, 0, 0]) < 0.1
    # a symmetric input law gives the same field on both half spaces
    assert np.linalg.norm(minus.D - [0.5, 0, 0]) < 0.1
    assert minus.w[0] < 0


def test_sup_deviation_single_point(hand_data):
    result = sup_deviation(hand_data, hand_data.input_spec, hand_data.teacher)
    assert result.value == pytest.approx(0.5)
    assert result.cells == 2
    assert result.exact is True


def test_sup_deviation_zero_signal():
    teacher = LinearTeacher(beta_star=[0, 0])
    dataset = gen_dataset(StandardGaussianInput(d=2), teacher, 20, seed=0)
    assert sup_deviation(dataset, dataset.input_spec, teacher).value == 0


def test_sup_deviation_decreases():
    teacher = LinearTeacher(beta_star=[1, 0])
    spec = StandardGaussianInput(d=2)
    small = [sup_deviation(gen_dataset(spec, teacher, 16, seed=s), spec, teacher).value for s in range(5)]
    large = [
        sup_deviation(gen_dataset(spec, teacher, 400, seed=s), spec, teacher, budget=10_000).value for s in range(5)
    ]
    assert np.median(large) < np.median(small)


@pytest.mark.slow
def test_concentration_slope():
    teacher = LinearTeacher(beta_star=[1, 0, 0], noise_std=0.3)
    spec = StandardGaussianInput(d=3)
    ns = [2 ** k for k in range(6, 14)]
    medians = []
    for n in ns:
        datasets = [gen_dataset(spec, teacher, n, seed=s) for s in range(20)]
        medians.append(np.median([sup_deviation(ds, spec, teacher, budget=20_000).value for ds in datasets]))
    assert all(b < a for a, b in zip(medians, medians[1:]))
    slope = np.polyfit(np.log(ns), np.log(medians), 1)[0]
    assert -0.65 <= slope <= -0.35


def test_alignment_probe():
    spec = StandardGaussianInput(d=2)
    teacher = LinearTeacher(beta_star=[2, 0])
    params = NetParams(a=[1.0, -1.0, 0.5], W=[[1.0, 0.1], [-1.0, 0.0], [0.0, 0.0]])
    report = alignment_probe(params, spec, teacher, epsilon=0.2, lam=1e-3, params_0=params)
    assert report.tau == pytest.approx(alignment_tau(0.2, 1e-3, np.array([2.0, 0.0])))
    assert report.tau == pytest.approx(0.2 * np.log(1e3) / 2)
    assert report.neurons[1].cos_to_minus == pytest.approx(1)
    assert report.neurons[2].zero_norm
    assert report.min_target_cos == pytest.approx(1 / np.sqrt(1.01))
    assert report.bounds_hold is True


def test_alignment_probe_bounds():
    spec = StandardGaussianInput(d=2)
    teacher = LinearTeacher(beta_star=[1, 0])
    p0 = NetParams(a=[1.0], W=[[0.1, 0.0]])
    p1 = NetParams(a=[100.0], W=[[0.1, 0.0]])
    assert alignment_probe(p1, spec, teacher, epsilon=0.2, lam=1e-3, params_0=p0).bounds_hold is False
    assert alignment_probe(p1, spec, teacher).tau is None


def test_decoupled_fields_and_sectors():
    dataset = Dataset(X=[[1.0, 0.0], [-1.0, 0.0]], y=[1.0, -1.0])
    params = NetParams(a=[1.0, -1.0], W=[[1.0, 0.0], [-1.0, 0.0]])
    plus, minus = decoupled_fields(NetParams(a=[0.0], W=[[0.0, 0.0]]), dataset, [1, 0])
    assert np.allclose(plus, [0.5, 0])
    assert np.allclose(minus, [0.5, 0])
    assert sector_violations(params, dataset, [1, 0]) == {'plus': 0, 'minus': 0}
    flipped = NetParams(a=[-1.0, 1.0], W=[[1.0, 0.0], [-1.0, 0.0]])
    assert sector_violations(flipped, dataset, [1, 0]) == {'plus': 2, 'minus': 2}


def test_extremal_jsonl(tmp_path, orthogonal_data):
    path = write_extremal_jsonl(extremal_set(orthogonal_data), tmp_path / 'x' / 'found.jsonl')
    records = read_extremal_jsonl(path)
    assert len(records) == 4
    assert {r['verdict'] for r in records} == {'extremal'}
    assert sorted(r['D'] for r in records) == [[0.0, 0.0], [0.0, 0.5], [0.5, 0.0], [0.5, 0.5]]


def extremal_deviations(seeds, budget, n=4096):
    """
    distance of every certified extremal vector to the nearer of ±Σβ*/2, relative to ‖Σβ*‖
    """
    spec = Assumption1Input(d=3, beta_star=[1, 0, 0], epsilon=0.1)
    teacher = LinearTeacher(beta_star=[1, 0, 0])
    target = sigma_beta(spec, teacher)
    devs = []
    for seed in seeds:
        dataset = gen_dataset(spec, teacher, n, seed=seed)
        found = extremal_set(dataset, CellMode.sampled, budget=budget, seed=seed)
        found += [find_extremal(dataset, w0) for w0 in ([1, 0, 0], [-1, 0.5, 0], [0.2, 1, -1])]
        found = [c for c in found if c.verdict == Verdict.extremal]
        assert found
        for c in found:
            dist = min(np.linalg.norm(c.D - target / 2), np.linalg.norm(c.D + target / 2))
            devs.append(dist / np.linalg.norm(target))
    return devs


def test_assumption1_extremal_near_population():
    assert max(extremal_deviations(seeds=[0, 1], budget=2000)) <= 0.15


@pytest.mark.slow
def test_assumption1_extremal_near_population_all_seeds():
    assert max(extremal_deviations(seeds=range(10), budget=20_000)) <= 0.15


def test_cells_large_n_packed():
    teacher = LinearTeacher(beta_star=[1, 0, 0], noise_std=0.3)
    dataset = gen_dataset(StandardGaussianInput(d=3), teacher, 8192, seed=0)
    cells = arrangement(dataset, CellMode.sampled, budget=10_000)
    assert cells.exact is False
    assert cells.packed.dtype == np.uint8
    assert cells.packed.shape == (len(cells), 1024)
    assert cells.representatives.shape == (len(cells), 3)
    assert 0 < len(cells) <= 10_000
    start, stop = next(cells.chunks())
    assert stop - start == 512
    active = cells.active(0, 3)
    assert np.array_equal(active, (dataset.X @ cells.representatives[:3].T).T > 0)
    result = sup_deviation(dataset, dataset.input_spec, teacher, CellMode.sampled, budget=10_000)
    assert result.cells == len(cells)
    assert 0 < result.value < 0.5


@pytest.mark.parametrize('d,sizes', [(2, [4, 6, 8, 10, 12, 14, 16, 16, 16, 16]), (3, [4, 4, 5, 5, 5, 6, 6, 6, 6, 6])])
def test_cell_count_oracle(d, sizes):
    """
    exact enumeration of generic inputs reaches the cell bound and matches dense sampling cell for cell
    """
    for seed, n in enumerate(sizes):
        X = points(n, d, seed=100 * d + seed)
        exact = arrangement(X, CellMode.exact)
        sampled = arrangement(X, CellMode.sampled, budget=400_000, seed=seed)
        assert len(exact) == max_cell_count(n, d)
        assert np.array_equal(sampled.packed, exact.packed)


@pytest.mark.parametrize('n', [2, 3, 4])
def test_orthogonal_extremal_growth(n):
    spec = OrthogonalBasisInput(d=n, labels=[1] * n)
    dataset = gen_dataset(spec, LinearTeacher(beta_star=[0] * n), n, seed=0)
    found = extremal_set(dataset)
    assert len(found) == 2 ** n
    assert sorted(tuple(c.D) for c in found) == sorted(
        tuple(np.array(signs, dtype=float) / n) for signs in product((0, 1), repeat=n)
    )


def test_D_n_piecewise_constant():
    teacher = LinearTeacher(beta_star=[1, -1, 0], noise_std=0.3)
    dataset = gen_dataset(StandardGaussianInput(d=3), teacher, 12, seed=4)
    rng = np.random.default_rng(0)
    fields = set()
    for cell in enumerate_cells(dataset, CellMode.exact):
        field = D_n(cell.representative, dataset)
        fields.add(tuple(field))
        for _ in range(5):
            w = cell.representative * rng.uniform(0.1, 10) + rng.standard_normal(3) * 1e-9
            if np.array_equal(np.sign(dataset.X @ w), cell.pattern.signs):
                assert np.array_equal(D_n(w, dataset), field)
    assert len(fields) > 1


def test_orthogonal_three():
    spec = OrthogonalBasisInput(d=3, labels=[1, 2, -1])
    dataset = gen_dataset(spec, LinearTeacher(beta_star=[0, 0, 0]), 3, seed=0)
    cells = enumerate_cells(dataset)
    assert len(cells) == 8
    assert extremal_set(dataset)
