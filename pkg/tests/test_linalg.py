from __future__ import annotations

import numpy as np
import pytest

from msga.linalg import matmul, softmax_last_dim, truncated_svd


def triple_loop_matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    m, kk = a.shape
    _, n = b.shape
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            acc = 0.0
            for k in range(kk):
                acc += a[i, k] * b[k, j]
            out[i, j] = acc
    return out


def jacobi_svd_oracle(g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Independent full SVD route: Jacobi rotations on G^T G.

    Returns singular values (descending) and the right singular vectors.
    Written from scratch here so it shares no code with the package.
    """
    a = g.T @ g
    n = a.shape[0]
    vecs = np.eye(n)
    for _ in range(200):
        off = 0.0
        for p in range(n - 1):
            for q in range(p + 1, n):
                off += a[p, q] ** 2
        if off < 1e-28:
            break
        for p in range(n - 1):
            for q in range(p + 1, n):
                if abs(a[p, q]) < 1e-300:
                    continue
                phi = 0.5 * np.arctan2(2.0 * a[p, q], a[p, p] - a[q, q])
                c, s = np.cos(phi), np.sin(phi)
                rot = np.eye(n)
                rot[p, p] = c
                rot[q, q] = c
                rot[p, q] = -s
                rot[q, p] = s
                a = rot.T @ a @ rot
                vecs = vecs @ rot
    eigvals = np.clip(np.diag(a), 0.0, None)
    order = np.argsort(-eigvals)
    return np.sqrt(eigvals[order]), vecs[:, order]


def test_matmul_identity() -> None:
    a = np.random.default_rng(0).standard_normal((3, 3))
    assert np.array_equal(matmul(np.eye(3), a), a)


def test_matmul_hand_case() -> None:
    result = matmul(np.array([[1.0, 2.0], [3.0, 4.0]]), np.array([[0.0], [1.0]]))
    assert np.array_equal(result, np.array([[2.0], [4.0]]))


def test_matmul_matches_triple_loop_oracle() -> None:
    rng = np.random.default_rng(42)
    a = rng.standard_normal((5, 7))
    b = rng.standard_normal((7, 3))
    assert np.abs(matmul(a, b) - triple_loop_matmul(a, b)).max() < 1e-12


def test_matmul_rejects_mismatched_shapes() -> None:
    with pytest.raises(ValueError, match="shape mismatch"):
        matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_matmul_associative_on_random_triples() -> None:
    rng = np.random.default_rng(7)
    for _ in range(10):
        a, b, c = (rng.standard_normal((8, 8)) for _ in range(3))
        lhs = matmul(matmul(a, b), c)
        rhs = matmul(a, matmul(b, c))
        assert np.abs(lhs - rhs).max() < 1e-10


def test_truncated_svd_diagonal_case() -> None:
    p, s, q = truncated_svd(np.diag([3.0, 2.0, 1.0]), 2)
    assert np.allclose(s, [3.0, 2.0], atol=1e-10)
    assert np.allclose(np.abs(p), np.eye(3)[:, :2], atol=1e-8)
    # sign convention: the dominant entry of each left vector is non-negative
    assert p[0, 0] > 0 and p[1, 1] > 0


def test_truncated_svd_exact_rank_one() -> None:
    rng = np.random.default_rng(1)
    u = rng.standard_normal((6, 1))
    v = rng.standard_normal((4, 1))
    g = u @ v.T
    p, s, q = truncated_svd(g, 1)
    assert np.abs(p @ np.diag(s) @ q.T - g).max() < 1e-10


def test_truncated_svd_full_rank_reconstruction_vs_jacobi_oracle() -> None:
    rng = np.random.default_rng(5)
    g = rng.standard_normal((8, 6))
    p, s, q = truncated_svd(g, 6)
    assert np.linalg.norm(g - p @ np.diag(s) @ q.T) < 1e-9
    oracle_s, _ = jacobi_svd_oracle(g)
    assert np.allclose(s, oracle_s, atol=1e-8)


def test_truncated_svd_orthonormal_factors() -> None:
    rng = np.random.default_rng(9)
    for _ in range(20):
        m, n = rng.integers(2, 13, size=2)
        r = int(rng.integers(1, min(m, n) + 1))
        g = rng.standard_normal((m, n))
        p, s, q = truncated_svd(g, r)
        assert np.abs(p.T @ p - np.eye(r)).max() < 1e-8
        assert np.abs(q.T @ q - np.eye(r)).max() < 1e-8
        assert np.all(np.diff(s) <= 1e-12)
        assert np.all(s >= 0.0)


def test_truncated_svd_near_optimal_projection_small_matrices() -> None:
    rng = np.random.default_rng(11)
    for _ in range(30):
        m, n = rng.integers(2, 17, size=2)
        g = rng.standard_normal((m, n))
        for r in range(1, min(m, n) + 1):
            p, _, q = truncated_svd(g, r)
            projected = p @ (p.T @ g @ q) @ q.T
            sigma = np.linalg.svd(g, compute_uv=False)
            best = np.sqrt(max(0.0, np.sum(sigma[r:] ** 2)))
            assert np.linalg.norm(g - projected) <= best + 1e-8


def test_truncated_svd_deterministic() -> None:
    g = np.random.default_rng(3).standard_normal((7, 5))
    p1, s1, q1 = truncated_svd(g, 3)
    p2, s2, q2 = truncated_svd(g, 3)
    assert np.array_equal(p1, p2) and np.array_equal(s1, s2) and np.array_equal(q1, q2)


def test_truncated_svd_reports_non_convergence_with_residual() -> None:
    # spacing of 1e-8 between eigenvalues cannot be separated within the
    # sweep budget; the factors are still near-optimal because any mix of
    # near-degenerate directions reconstructs almost equally well
    g = np.diag(1.0 + np.arange(12) * 1e-8)
    with pytest.warns(RuntimeWarning, match="residual subspace change"):
        p, s, q = truncated_svd(g, 2)
    sigma = np.sort(np.diag(g))[::-1]
    best = np.sqrt(np.sum(sigma[2:] ** 2))
    assert np.linalg.norm(g - p @ np.diag(s) @ q.T) <= best + 1e-8


def test_truncated_svd_rank_out_of_range() -> None:
    g = np.zeros((4, 3))
    with pytest.raises(ValueError, match="out of range"):
        truncated_svd(g, 4)
    with pytest.raises(ValueError, match="out of range"):
        truncated_svd(g, 0)


def test_softmax_symmetric_fiber() -> None:
    t = np.zeros((1, 1, 2))
    assert np.allclose(softmax_last_dim(t), 0.5)


def test_softmax_closed_form_fiber() -> None:
    t = np.array([[[np.log(2.0), 0.0]]])
    out = softmax_last_dim(t)
    assert np.allclose(out, [2.0 / 3.0, 1.0 / 3.0], atol=1e-15)


def test_softmax_no_overflow_on_huge_logits() -> None:
    out = softmax_last_dim(np.array([[[1000.0, 0.0]]]))
    assert np.isfinite(out).all()
    assert out[0, 0, 0] > 1.0 - 1e-12


def test_softmax_fibers_sum_to_one() -> None:
    rng = np.random.default_rng(13)
    t = rng.standard_normal((4, 5, 6)) * 10.0
    out = softmax_last_dim(t)
    assert np.abs(out.sum(axis=-1) - 1.0).max() < 1e-12
    assert ((out > 0.0) & (out < 1.0)).all()
