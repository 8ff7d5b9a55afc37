from __future__ import annotations

import numpy as np
import pytest

from msga.linalg import matmul as linalg_matmul
from msga.tape import OP_KINDS, Tape, finite_diff_check


def test_record_add_identity() -> None:
    tape = Tape()
    x = np.random.default_rng(0).standard_normal((3, 4))
    out = tape.add(tape.leaf(x), tape.leaf(np.zeros((3, 4))))
    assert np.array_equal(tape.value(out), x)


def test_record_gelu_at_zero() -> None:
    tape = Tape()
    out = tape.gelu(tape.leaf(np.zeros((2, 2))))
    assert np.array_equal(tape.value(out), np.zeros((2, 2)))


def test_record_matmul_matches_linalg() -> None:
    rng = np.random.default_rng(4)
    a, b = rng.standard_normal((4, 4)), rng.standard_normal((4, 4))
    tape = Tape()
    out = tape.matmul(tape.leaf(a), tape.leaf(b))
    assert np.array_equal(tape.value(out), linalg_matmul(a, b))


def test_record_rejects_shape_mismatch_with_op_name() -> None:
    tape = Tape()
    a = tape.leaf(np.zeros((2, 3)))
    b = tape.leaf(np.zeros((2, 3)))
    with pytest.raises(ValueError, match="matmul"):
        tape.matmul(a, b)
    with pytest.raises(ValueError, match="add"):
        tape.add(a, tape.leaf(np.zeros((3, 3))))


def test_backward_of_mean_is_uniform() -> None:
    tape = Tape()
    x = tape.leaf(np.arange(12.0).reshape(3, 4))
    grads = tape.backward(tape.mean(x))
    assert np.array_equal(grads[x], np.full((3, 4), 1.0 / 12.0))


def test_backward_quadratic_closed_form() -> None:
    # loss = sum((W x)^2) / 2  =>  dW = (W x) x^T
    rng = np.random.default_rng(8)
    w_val = rng.standard_normal((3, 3))
    x_val = rng.standard_normal((3, 1))
    tape = Tape()
    w = tape.leaf(w_val)
    x = tape.leaf(x_val)
    y = tape.matmul(w, x)
    loss = tape.scale(tape.matmul(y, y, transpose_a=True), 0.5)
    grads = tape.backward(loss)
    expected = (w_val @ x_val) @ x_val.T
    assert np.abs(grads[w] - expected).max() < 1e-12


def test_backward_requires_scalar_loss() -> None:
    tape = Tape()
    x = tape.leaf(np.ones((2, 2)))
    with pytest.raises(ValueError, match="scalar"):
        tape.backward(x)


def test_backward_linearity() -> None:
    rng = np.random.default_rng(12)
    x_val = rng.standard_normal((3, 3))
    a, b = 1.7, -0.4

    def grad_of(build) -> np.ndarray:
        tape = Tape()
        x = tape.leaf(x_val)
        grads = tape.backward(build(tape, x))
        return grads[x]

    g1 = grad_of(lambda t, x: t.mean(t.gelu(x)))
    g2 = grad_of(lambda t, x: t.mean(t.matmul(x, x)))
    combined = grad_of(
        lambda t, x: t.add(t.scale(t.mean(t.gelu(x)), a), t.scale(t.mean(t.matmul(x, x)), b))
    )
    assert np.abs(combined - (a * g1 + b * g2)).max() < 1e-10


def test_backward_bitwise_deterministic() -> None:
    rng = np.random.default_rng(2)
    x_val = rng.standard_normal((4, 4))

    def run() -> np.ndarray:
        tape = Tape()
        x = tape.leaf(x_val)
        h = tape.gelu(tape.matmul(x, x, transpose_b=True))
        return tape.backward(tape.mean(h))[x]

    assert np.array_equal(run(), run())


def test_zero_path_leaves_get_exact_zero() -> None:
    tape = Tape()
    used = tape.leaf(np.ones((2, 2)))
    unused = tape.leaf(np.ones((3, 5)))
    grads = tape.backward(tape.mean(used))
    assert grads[unused].shape == (3, 5)
    assert np.all(grads[unused] == 0.0)


def test_embed_lookup_accumulates_rows() -> None:
    tape = Tape()
    table = tape.leaf(np.array([[1.0, 2.0], [3.0, 4.0]]))
    out = tape.embed_lookup(table, np.array([0, 0, 1]))
    grads = tape.backward(tape.mean(out))
    # three gathered rows, each entry weighted 1/6; row 0 gathered twice
    assert np.allclose(grads[table], np.array([[2.0, 2.0], [1.0, 1.0]]) / 6.0)


def test_patchify_layout_and_inverse() -> None:
    img = np.arange(16.0).reshape(4, 4)
    tape = Tape()
    out = tape.patchify(tape.leaf(img), 2)
    patches = tape.value(out)
    assert patches.shape == (4, 4)
    assert np.array_equal(patches[0], np.array([0.0, 1.0, 4.0, 5.0]))
    assert np.array_equal(patches[3], np.array([10.0, 11.0, 14.0, 15.0]))


@pytest.mark.parametrize("ta,tb", [(False, False), (True, False), (False, True), (True, True)])
def test_matmul_transpose_flags_finite_diff(ta: bool, tb: bool) -> None:
    rng = np.random.default_rng(31)
    a = rng.standard_normal((3, 4) if not ta else (4, 3))
    b = rng.standard_normal((4, 2) if not tb else (2, 4))
    err = finite_diff_check(
        lambda t, ids: t.mean(t.matmul(ids[0], ids[1], transpose_a=ta, transpose_b=tb)),
        [a, b],
        epsilon=1e-5,
    )
    assert err < 1e-8


def test_softmax_ce_uniform_logits_value() -> None:
    tape = Tape()
    logits = tape.leaf(np.zeros((5, 2)))
    out = tape.softmax_ce(logits, np.array([0, 1, 0, 1, 0]))
    assert abs(float(tape.value(out)) - np.log(2.0)) < 1e-12


@pytest.mark.parametrize("op", sorted(set(OP_KINDS) - {"leaf"}))
def test_finite_differences_per_op(op: str) -> None:
    rng = np.random.default_rng(hash(op) % 2**32)
    x = rng.standard_normal((3, 3))
    labels = np.array([0, 2, 1])

    builders = {
        "matmul": lambda t, ids: t.mean(t.matmul(ids[0], ids[1], transpose_b=True)),
        "add": lambda t, ids: t.mean(t.add(ids[0], ids[2])),
        "scale": lambda t, ids: t.mean(t.scale(ids[0], -2.5)),
        "gelu": lambda t, ids: t.mean(t.gelu(ids[0])),
        "layernorm": lambda t, ids: t.mean(t.layernorm(ids[0], ids[3], ids[4])),
        "softmax-rows": lambda t, ids: t.mean(t.softmax_rows(ids[0])),
        "softmax-ce": lambda t, ids: t.softmax_ce(ids[0], labels),
        "soft-dice": lambda t, ids: t.soft_dice(ids[0], labels, 1e-5),
        "reshape": lambda t, ids: t.mean(t.gelu(t.reshape(ids[0], (1, 9)))),
        "patchify": lambda t, ids: t.mean(t.gelu(t.patchify(ids[0], 1))),
        "mean": lambda t, ids: t.mean(t.gelu(ids[0])),
        "embed-lookup": lambda t, ids: t.mean(t.embed_lookup(ids[0], np.array([2, 0, 1, 0]))),
    }
    params = [
        x,
        rng.standard_normal((3, 3)),
        rng.standard_normal((1, 3)),
        rng.uniform(0.5, 1.5, (1, 3)),
        rng.standard_normal((1, 3)),
    ]
    err = finite_diff_check(builders[op], params, epsilon=1e-5)
    assert err < 1e-6, f"{op}: finite-difference error {err:.3e}"


def test_softmax_ce_finite_diff_at_uniform_logits() -> None:
    labels = np.array([0, 1, 2])
    err = finite_diff_check(
        lambda t, ids: t.softmax_ce(ids[0], labels), [np.zeros((3, 3))], epsilon=1e-5
    )
    assert err < 1e-7


def test_finite_diff_check_exact_for_linear_loss() -> None:
    rng = np.random.default_rng(21)
    err = finite_diff_check(
        lambda t, ids: t.mean(t.scale(ids[0], 3.0)), [rng.standard_normal((4, 4))], epsilon=1e-5
    )
    assert err < 1e-9


def test_finite_diff_check_rejects_bad_epsilon() -> None:
    with pytest.raises(ValueError, match="epsilon"):
        finite_diff_check(lambda t, ids: t.mean(ids[0]), [np.ones((2, 2))], epsilon=0.0)
