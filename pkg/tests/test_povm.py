import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from qhgm.povm import (ConstructionInfeasible, NotRankOne, SingleQubitPOVM, build_default_icpovm,
                       build_icpovm_from_angles, build_sic_povm, expression_scores, joint_element,
                       product_vectors, rank1_factor, validation_report)

DEFAULT_ANGLES = np.array([np.pi / 6, 2 * np.pi / 6, 4 * np.pi / 6, 5 * np.pi / 6])


def assert_valid(p: SingleQubitPOVM):
    e = p.elements
    assert np.max(np.abs(e.sum(axis=0) - np.eye(2))) <= 1e-12
    assert min(np.linalg.eigvalsh(x)[0] for x in e) >= -1e-12
    assert np.max(np.abs(np.linalg.norm(p.bloch, axis=1) - 1)) <= 1e-10
    assert np.max(np.abs(p.bloch.sum(axis=0))) <= 1e-10
    assert np.linalg.svd(p.frame_matrix, compute_uv=False)[-1] > 1e-8


def test_default_bloch_vectors(povm):
    s = 1 / np.sqrt(2)
    expected = [[0.5, 0, np.sqrt(3) / 2], [-0.5, -s, 0.5], [-0.5, s, -0.5], [0.5, 0, -np.sqrt(3) / 2]]
    np.testing.assert_allclose(povm.bloch, expected, atol=1e-15)
    assert_valid(povm)


def test_default_scores_values(povm):
    np.testing.assert_allclose(povm.scores, [0.0670, 0.25, 0.75, 0.9330], atol=1e-4)
    np.testing.assert_allclose(povm.scores, [0.066987, 0.25, 0.75, 0.933013], atol=1e-6)
    assert np.all(np.diff(povm.scores) > 0)


def test_default_on_ket0(povm):
    diag = povm.elements[:, 0, 0].real
    s = np.sqrt(3) / 2
    np.testing.assert_allclose(diag, [(1 + s) / 4, 3 / 8, 1 / 8, (1 - s) / 4], atol=1e-15)
    np.testing.assert_allclose(diag, [0.46651, 0.375, 0.125, 0.03349], atol=1e-5)


def test_reference_angles_reproduce_default(povm):
    p = build_icpovm_from_angles(DEFAULT_ANGLES)
    np.testing.assert_allclose(p.bloch, povm.bloch, atol=1e-12)


def test_symmetric_angles_infeasible():
    with pytest.raises(ConstructionInfeasible):
        build_icpovm_from_angles([0, np.pi / 3, 2 * np.pi / 3, np.pi])


def test_even_angles_near_uniform_bins():
    p = build_icpovm_from_angles([(m + 1) * np.pi / 5 for m in range(4)])
    assert_valid(p)
    widths = np.diff(np.concatenate([[0], 0.5 * (p.scores[1:] + p.scores[:-1]), [1]]))
    assert widths.max() < 1.5 * widths.min()
    assert np.all(np.diff(p.scores) > 0)


def test_angle_errors():
    with pytest.raises(ValueError):
        build_icpovm_from_angles([-0.1, 1, 2, 3])
    with pytest.raises(ConstructionInfeasible):
        build_icpovm_from_angles([0.1, 0.2, 0.3, 0.4])  # z components cannot cancel
    with pytest.raises(ValueError):
        build_icpovm_from_angles([0.1, 0.2, 0.3])


def test_explicit_xy_choice(povm):
    # mirror image in y is another member of the solution family
    xy = povm.bloch[:, :2] * np.array([1, -1])
    p = build_icpovm_from_angles(DEFAULT_ANGLES, xy=xy)
    assert_valid(p)
    np.testing.assert_allclose(p.scores, povm.scores, atol=1e-15)
    with pytest.raises(ConstructionInfeasible):
        build_icpovm_from_angles(DEFAULT_ANGLES, xy=np.zeros((4, 2)))


def test_sic():
    p = build_sic_povm()
    np.testing.assert_allclose(p.scores, [0, 2 / 3, 2 / 3, 2 / 3], atol=1e-10)
    assert_valid(p)
    gram = p.bloch @ p.bloch.T
    np.testing.assert_allclose(gram[~np.eye(4, dtype=bool)], -1 / 3, atol=1e-12)


def test_scores_for_poles():
    up = SingleQubitPOVM(np.array([[0, 0, 1.0], [0, 0, -1.0], [1.0, 0, 0], [-1.0, 0, 0]]))
    np.testing.assert_allclose(expression_scores(up)[:2], [0, 1], atol=1e-15)


def test_rank1_simple_vectors():
    p = SingleQubitPOVM(np.array([[0, 0, 1.0], [1.0, 0, 0], [0, 0, -1.0], [-1.0, 0, 0]]))
    f = rank1_factor(p)
    np.testing.assert_allclose(f.weights, 0.5)
    np.testing.assert_allclose(np.abs(f.vectors[0]), [1, 0])
    np.testing.assert_allclose(np.abs(f.vectors[1]), [1 / np.sqrt(2), 1 / np.sqrt(2)])


@pytest.mark.parametrize("builder", [build_default_icpovm, build_sic_povm])
def test_rank1_reconstruction(builder):
    p = builder()
    f = rank1_factor(p)
    for m in range(4):
        v = f.vectors[m]
        assert np.max(np.abs(f.weights[m] * np.outer(v, v.conj()) - p.elements[m])) <= 1e-12


def test_rank1_rejects_short_bloch():
    p = SingleQubitPOVM(np.array([[0, 0, 0.9], [0, 0, -0.9], [0.9, 0, 0], [-0.9, 0, 0]]))
    with pytest.raises(NotRankOne):
        rank1_factor(p)


def test_joint_element_examples(povm):
    np.testing.assert_allclose(joint_element(povm, [0]), povm.elements[0])
    total = sum(joint_element(povm, m) for m in itertools.product(range(4), repeat=2))
    np.testing.assert_allclose(total, np.eye(4), atol=1e-12)
    v = rank1_factor(povm).vectors
    u = np.kron(v[0], v[3])
    np.testing.assert_allclose(joint_element(povm, [0, 3]), np.outer(u, u.conj()) / 4, atol=1e-12)
    with pytest.raises(ValueError):
        joint_element(povm, [0] * 11)


@given(st.lists(st.integers(0, 3), min_size=1, max_size=4))
def test_rank1_product_identity(m):
    povm = build_default_icpovm()
    u = product_vectors(rank1_factor(povm).vectors, np.array([m]))[0]
    dense = joint_element(povm, m)
    assert np.max(np.abs(dense - np.outer(u, u.conj()) / 2 ** len(m))) <= 1e-12


@given(st.floats(0.05, 1.4), st.floats(0.05, 1.4))
def test_constructed_povms_are_valid(a0, a1):
    # mirrored angle sets always satisfy the zero-sum in z
    angles = np.array([a0, a1, np.pi - a1, np.pi - a0])
    try:
        p = build_icpovm_from_angles(angles)
    except ConstructionInfeasible:
        return
    assert_valid(p)


def test_validation_report(povm):
    rep = validation_report(povm)
    assert rep["completeness_residual"] <= 1e-12
    assert rep["frame_min_singular_value"] > 1e-8
    assert rep["scores_increasing"]
    assert len(rep["scores"]) == 4
