import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import ledoit_wolf_loops
from spectrodiff.connectivity import (Edge, FcMatrix, cov_to_corr, fc_difference_edges, group_average,
                                      ledoit_wolf_cov, read_roi_names, subject_fc, threshold_strongest,
                                      write_edges)
from spectrodiff.errors import ArtifactIOError, ValidationError
from spectrodiff.signal_io import ClassGenerator, SynthCohortConfig, generate_synthetic_cohort


def random_corr(D, seed):
    X = np.random.default_rng(seed).standard_normal((D, 3 * D))
    return cov_to_corr(np.cov(X))


def test_ledoit_wolf_matches_loops_oracle():
    rng = np.random.default_rng(0)
    for _ in range(200):
        D = int(rng.integers(1, 11))
        T = int(rng.integers(2, 51))
        X = rng.standard_normal((D, T)) * rng.uniform(0.1, 5, size=(D, 1))
        cov, alpha = ledoit_wolf_cov(X)
        ref, ref_alpha = ledoit_wolf_loops(X.tolist())
        assert 0.0 <= alpha <= 1.0
        assert abs(alpha - ref_alpha) < 1e-10
        assert np.max(np.abs(cov - np.array(ref))) < 1e-10 * max(1.0, np.abs(cov).max())
        assert np.allclose(cov, cov.T, atol=1e-12)
        assert np.linalg.eigvalsh(cov).min() >= -1e-10


def test_ledoit_wolf_small_example():
    X = np.random.default_rng(1).standard_normal((3, 2))
    cov, alpha = ledoit_wolf_cov(X)
    ref, ref_alpha = ledoit_wolf_loops(X.tolist())
    assert np.allclose(cov, ref, atol=1e-10) and alpha == pytest.approx(ref_alpha, abs=1e-10)


def test_ledoit_wolf_target_equals_sample():
    X = np.array([[1.0, -1.0, 1.0, -1.0], [1.0, 1.0, -1.0, -1.0]])
    cov, _ = ledoit_wolf_cov(X)
    assert np.allclose(cov, np.eye(2), atol=1e-15)


def test_ledoit_wolf_consistency():
    X = np.random.default_rng(2).standard_normal((3, 100_000))
    cov, _ = ledoit_wolf_cov(X)
    assert np.max(np.abs(cov - np.eye(3))) < 0.05
    # the shrinkage itself only vanishes when the truth is away from the target;
    # for identity data the target is correct and the estimated intensity stays large
    C = np.array([[1.0, 0.5, 0.2], [0.5, 1.0, 0.3], [0.2, 0.3, 1.0]])
    Y = np.linalg.cholesky(C) @ np.random.default_rng(3).standard_normal((3, 100_000))
    cov, alpha = ledoit_wolf_cov(Y)
    assert alpha < 0.05 and np.max(np.abs(cov - C)) < 0.05


def test_ledoit_wolf_errors_and_unbiased_flag():
    with pytest.raises(ValidationError):
        ledoit_wolf_cov(np.zeros((3, 1)))
    X = np.random.default_rng(3).standard_normal((4, 30))
    _, a = ledoit_wolf_cov(X)
    cov_u, a_u = ledoit_wolf_cov(X, biased=False)
    assert a == a_u
    S = np.cov(X)
    assert np.allclose(cov_u, (1 - a) * S + a * np.trace(S) / 4 * np.eye(4))


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8), st.integers(2, 20))
def test_ledoit_wolf_psd_property(seed, D, T):
    X = np.random.default_rng(seed).standard_normal((D, T))
    cov, alpha = ledoit_wolf_cov(X)
    assert 0 <= alpha <= 1 and np.linalg.eigvalsh(cov).min() >= -1e-10


def test_cov_to_corr_examples():
    assert np.array_equal(cov_to_corr(np.diag([4.0, 9.0, 0.5])).values, np.eye(3))
    c = cov_to_corr(np.array([[4.0, 2.0], [2.0, 1.0]])).values
    assert c[0, 1] == pytest.approx(1.0) and c[1, 0] == pytest.approx(1.0)
    r = random_corr(10, 4).values
    assert np.all(np.abs(r) <= 1 + 1e-12) and np.all(np.diag(r) == 1.0)
    with pytest.raises(ValidationError):
        cov_to_corr(np.array([[0.0, 0.0], [0.0, 1.0]]))


def test_threshold_examples():
    fc = random_corr(6, 5)
    assert np.array_equal(threshold_strongest(fc, 1.0).values, fc.values)
    v = np.eye(3)
    v[0, 1] = v[1, 0] = 0.9
    v[0, 2] = v[2, 0] = -0.5
    v[1, 2] = v[2, 1] = 0.1
    out = threshold_strongest(FcMatrix(v), 0.4)
    assert out.kept_edges == 2 and out.tau == 0.4
    assert out.values[0, 1] == 0.9 and out.values[0, 2] == -0.5 and out.values[1, 2] == 0.0
    with pytest.raises(ValidationError):
        threshold_strongest(fc, 0.0)


def test_threshold_ties_lexicographic():
    v = np.eye(3)
    v[0, 1] = v[1, 0] = v[0, 2] = v[2, 0] = v[1, 2] = v[2, 1] = 0.5
    out = threshold_strongest(FcMatrix(v), 0.5).values
    assert out[0, 1] == 0.5 and out[0, 2] == 0.5 and out[1, 2] == 0.0


def test_threshold_116_reference():
    for seed in range(3):
        fc = random_corr(116, seed)
        out = threshold_strongest(fc, 0.4)
        iu = np.triu_indices(116, 1)
        assert np.count_nonzero(out.values[iu]) == 2668 == math.ceil(0.4 * 6670)
        assert np.array_equal(out.values, out.values.T)
        assert np.all(np.abs(out.values) <= np.abs(fc.values))
        assert np.array_equal(np.diag(out.values), np.diag(fc.values))


def test_group_average_examples():
    fc = random_corr(4, 1)
    mean, mask = group_average([fc], 0.0)
    assert np.array_equal(mask, 1 - np.eye(4, dtype=np.uint8))
    a, b = np.eye(2), np.eye(2)
    a[0, 1] = a[1, 0] = 1.0
    b[0, 1] = b[1, 0] = -1.0
    mean, mask = group_average([FcMatrix(a), FcMatrix(b)], 0.6)
    assert mean.values[0, 1] == 0.0 and not mask.any()
    mean, _ = group_average([fc, fc, fc])
    assert np.array_equal(mean.values, fc.values)
    with pytest.raises(ValidationError):
        group_average([])
    with pytest.raises(ValidationError):
        group_average([fc, random_corr(3, 0)])


def test_group_average_permutation():
    fcs = [random_corr(5, s) for s in range(6)]
    m1, k1 = group_average(fcs)
    m2, k2 = group_average(fcs[::-1])
    assert np.allclose(m1.values, m2.values, atol=1e-15) and np.array_equal(k1, k2)


def test_difference_edges_examples():
    fc = random_corr(5, 2)
    edges = fc_difference_edges(fc, fc, 4)
    assert [(e.i, e.j) for e in edges] == [(0, 1), (0, 2), (0, 3), (0, 4)]
    assert all(e.weight == 0 for e in edges)
    assert fc_difference_edges(fc, fc, 4, min_abs_diff=0.0) == []
    other = fc.values.copy()
    other[2, 3] = other[3, 2] = other[2, 3] - 0.3
    top = fc_difference_edges(fc, FcMatrix(other), 3)[0]
    assert (top.i, top.j) == (2, 3) and top.weight == pytest.approx(0.3)


def test_coupled_generator_edge_found():
    cfg = SynthCohortConfig(15, 6, 232, seed=4, class_generators=(
        ClassGenerator(), ClassGenerator(couplings=((0, 1, 1.0),))))
    records = generate_synthetic_cohort(cfg)
    groups = [[subject_fc(r.series, None) for r in records if r.class_label == c] for c in (0, 1)]
    a, _ = group_average(groups[0])
    b, _ = group_average(groups[1])
    edges = fc_difference_edges(a, b, 3)
    assert (0, 1) in [(e.i, e.j) for e in edges]


def test_write_edges(tmp_path):
    edges = [Edge(0, 2, -0.25), Edge(1, 3, 0.5)]
    write_edges(tmp_path / "e.csv", edges)
    assert (tmp_path / "e.csv").read_text() == "roi_i,roi_j,weight\n0,2,-0.25\n1,3,0.5\n"
    (tmp_path / "names.txt").write_text("A\nB\nC\nD\n")
    names = read_roi_names(tmp_path / "names.txt")
    write_edges(tmp_path / "n.csv", edges, names)
    assert (tmp_path / "n.csv").read_text().splitlines()[1] == "0,2,-0.25,A,C"
    with pytest.raises(ArtifactIOError):
        write_edges(tmp_path / "missing" / "e.csv", edges)
    with pytest.raises(ArtifactIOError):
        read_roi_names(tmp_path / "nope.txt")
