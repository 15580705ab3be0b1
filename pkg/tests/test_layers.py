import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cvaekd.layers import (
    EmbeddingTable,
    GRUCellParams,
    MlpParams,
    bigru_encode,
    bigru_run,
    embed,
    gru_cell,
    masked_mean,
    mlp2,
)
from cvaekd.numerics import Tape, Tensor, backward, finite_difference_check

# Central differences at h=1e-5 carry ~1e-10 absolute round-off on O(1) losses, so
# coordinates with |grad| below ~1e-4 are compared against this floor instead.
FD_FLOOR = 1e-4


def _np_gru(x, h, p):
    """Plain numpy reference cell, independent of the tape."""
    g = {k: v.data for k, v in vars(p).items()}
    sig = lambda a: 1.0 / (1.0 + np.exp(-a))
    c = sig(g["W_c"] @ x + g["U_c"] @ h + g["b_c"])
    r = sig(g["W_r"] @ x + g["U_r"] @ h + g["b_r"])
    cand = np.tanh(g["W"] @ x + g["U"] @ (r * h) + g["b"])
    return (1 - c) * h + c * cand


def _np_bigru(seq, n, fwd, bwd):
    H = fwd.hidden_dim
    f, b = np.zeros(H), np.zeros(H)
    fs, bs = [], [None] * n
    for t in range(n):
        f = _np_gru(seq[t], f, fwd)
        fs.append(f)
    for t in reversed(range(n)):
        b = _np_gru(seq[t], b, bwd)
        bs[t] = b
    return np.array([np.concatenate([x, y]) for x, y in zip(fs, bs)]), np.concatenate([f, b])


def test_gru_zero_params_halves_state():
    p = GRUCellParams.zeros(1, 1)
    h = gru_cell(Tensor([0.0]), Tensor([0.8]), p)
    assert h.data.tolist() == [0.4]


def test_gru_hand_example():
    p = GRUCellParams.zeros(1, 1)
    p.W.data[:] = 1.0
    p.U.data[:] = 1.0
    h = gru_cell(Tensor([0.0]), Tensor([1.0]), p)
    # c = r = 0.5, cand = tanh(0.5), h = 0.5 + 0.5 * tanh(0.5)
    assert h.item() == pytest.approx(0.7310585786300049, abs=1e-12)


def test_gru_fixed_point_and_shape_errors(rng):
    p = GRUCellParams.init(rng, 3, 4)
    assert np.all(gru_cell(Tensor(np.zeros(3)), Tensor(np.zeros(4)), p).data == 0.0)
    with pytest.raises(ValueError):
        gru_cell(Tensor(np.zeros(2)), Tensor(np.zeros(4)), p)
    with pytest.raises(ValueError):
        gru_cell(Tensor(np.zeros(3)), Tensor(np.zeros(5)), p)


def test_gru_matches_reference(rng):
    p = GRUCellParams.init(rng, 3, 4)
    for v in vars(p).values():
        v.data[:] = rng.normal(size=v.shape)
    x, h = rng.normal(size=3), rng.normal(size=4)
    assert np.allclose(gru_cell(Tensor(x), Tensor(h), p).data, _np_gru(x, h, p), atol=1e-14)
    batched = gru_cell(Tensor(np.stack([x, x])), Tensor(np.stack([h, h])), p).data
    assert np.allclose(batched[1], _np_gru(x, h, p), atol=1e-14)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(-50, 50))
def test_gru_one_step_from_zero_is_bounded(seed, scale):
    rng = np.random.default_rng(seed)
    p = GRUCellParams.init(rng, 2, 3)
    h = gru_cell(Tensor(scale * rng.normal(size=2)), Tensor(np.zeros(3)), p).data
    assert np.all(np.abs(h) < 1.0)


def test_gru_cell_gradients(rng):
    p = GRUCellParams.init(rng, 3, 4)
    for v in vars(p).values():
        v.data[:] = rng.normal(scale=0.7, size=v.shape)
    x, h = Tensor(rng.normal(size=(2, 3)), requires_grad=True), Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    proj = Tensor(rng.normal(size=(2, 4)))
    err = finite_difference_check(lambda: (gru_cell(x, h, p) * proj).sum(), [x, h, *vars(p).values()], floor=FD_FLOOR)
    assert err < 1e-6


def test_bigru_width_and_reference(rng):
    fwd, bwd = GRUCellParams.init(rng, 5, 256), GRUCellParams.init(rng, 5, 256)
    seq = rng.normal(size=(4, 5))
    states, final = bigru_encode(Tensor(seq), 4, fwd, bwd)
    assert states.shape == (4, 512) and final.shape == (512,)
    ref_states, ref_final = _np_bigru(seq, 4, fwd, bwd)
    assert np.allclose(states.data, ref_states, atol=1e-12)
    assert np.allclose(final.data, ref_final, atol=1e-12)


def test_bigru_padding_rows_and_mask_independence(rng):
    fwd, bwd = GRUCellParams.init(rng, 3, 4), GRUCellParams.init(rng, 3, 4)
    seq = rng.normal(size=(6, 3))
    other = seq.copy()
    other[4:] = rng.normal(size=(2, 3)) * 100
    s1, f1 = bigru_encode(Tensor(seq), 4, fwd, bwd)
    s2, f2 = bigru_encode(Tensor(other), 4, fwd, bwd)
    assert np.array_equal(s1.data, s2.data) and np.array_equal(f1.data, f2.data)
    assert np.all(s1.data[4:] == 0.0)
    ref_states, ref_final = _np_bigru(seq, 4, fwd, bwd)
    assert np.allclose(s1.data[:4], ref_states, atol=1e-12)
    assert np.allclose(f1.data, ref_final, atol=1e-12)


def test_bigru_batch_rows_match_single(rng):
    fwd, bwd = GRUCellParams.init(rng, 3, 4), GRUCellParams.init(rng, 3, 4)
    a, b = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    inputs = [Tensor(np.stack([a[t], b[t]])) for t in range(5)]
    states, final = bigru_run(inputs, [5, 2], fwd, bwd)
    _, ref_a = _np_bigru(a, 5, fwd, bwd)
    ref_b_states, ref_b = _np_bigru(b, 2, fwd, bwd)
    assert np.allclose(final.data[0], ref_a, atol=1e-12)
    assert np.allclose(final.data[1], ref_b, atol=1e-12)
    assert np.allclose(states[1].data[1], ref_b_states[1], atol=1e-12)
    assert np.all(states[3].data[1] == 0.0)


def test_bigru_palindrome_symmetry(rng):
    p = GRUCellParams.init(rng, 3, 4)
    a, b = rng.normal(size=3), rng.normal(size=3)
    seq = Tensor(np.stack([a, b, a]))
    _, final = bigru_encode(seq, 3, p, p)
    assert np.allclose(final.data[:4], final.data[4:], atol=1e-15)


def test_bigru_length_one_and_errors(rng):
    fwd, bwd = GRUCellParams.init(rng, 3, 4), GRUCellParams.init(rng, 3, 4)
    x = rng.normal(size=(3, 3))
    states, final = bigru_encode(Tensor(x), 1, fwd, bwd)
    assert np.array_equal(final.data, states.data[0])
    with pytest.raises(ValueError):
        bigru_encode(Tensor(x), 0, fwd, bwd)
    with pytest.raises(ValueError):
        bigru_run([Tensor(x[:1])], [2], fwd, bwd)


def test_bigru_gradients_through_masking(rng):
    fwd, bwd = GRUCellParams.init(rng, 2, 3), GRUCellParams.init(rng, 2, 3)
    inputs = [Tensor(rng.normal(size=(2, 2)), requires_grad=True) for _ in range(3)]
    proj = Tensor(rng.normal(size=(2, 6)))

    def f():
        states, final = bigru_run(inputs, [3, 2], fwd, bwd)
        return (masked_mean(states, [3, 2]) * proj).sum() + (final * proj).sum()

    params = list(vars(fwd).values()) + list(vars(bwd).values()) + inputs[:2]
    assert finite_difference_check(f, params, floor=FD_FLOOR) < 1e-6


def test_masked_mean_hand_value():
    states = [Tensor([[1.0, 2.0], [4.0, 0.0]]), Tensor([[3.0, 4.0], [0.0, 0.0]])]
    assert masked_mean(states, [2, 1]).data.tolist() == [[2.0, 3.0], [4.0, 0.0]]


def test_embedding_pad_row_and_lookup(rng):
    table = EmbeddingTable.init(rng, 6, 3, pad_id=0)
    out = embed([0, 2, 2], table)
    assert np.all(out.data[0] == 0.0)
    assert np.array_equal(out.data[1], out.data[2])
    with pytest.raises(IndexError):
        embed([6], table)


def test_embedding_gradient_accumulates_and_pad_frozen(rng):
    table = EmbeddingTable.init(rng, 6, 3, pad_id=0)
    proj = Tensor(rng.normal(size=(4, 3)))
    with Tape() as tape:
        loss = (embed([2, 0, 2, 5], table) * proj).sum()
    backward(loss, tape)
    g = table.weight.grad
    assert np.allclose(g[2], proj.data[0] + proj.data[2])
    assert np.all(g[0] == 0.0) and np.all(g[1] == 0.0)
    assert finite_difference_check(lambda: (embed([2, 3, 2], table) * proj[:3]).sum(), [table.weight]) < 1e-6


def test_mlp2_examples(rng):
    z = MlpParams.zeros(3, 4, 2)
    assert np.all(mlp2(Tensor(rng.normal(size=3)), z).data == 0.0)
    ident = MlpParams.zeros(1, 1, 1)
    ident.W1.data[:] = 1.0
    ident.W2.data[:] = 1.0
    assert mlp2(Tensor([0.7]), ident).item() == pytest.approx(np.tanh(0.7), abs=1e-15)
    with pytest.raises(ValueError):
        mlp2(Tensor(np.zeros(2)), z)


def test_mlp2_gradients(rng):
    p = MlpParams.init(rng, 4, 5, 3)
    for v in vars(p).values():
        v.data[:] = rng.normal(size=v.shape)
    x = Tensor(rng.normal(size=(2, 4)), requires_grad=True)
    proj = Tensor(rng.normal(size=(2, 3)))
    assert finite_difference_check(lambda: (mlp2(x, p) * proj).sum(), [x, *vars(p).values()], floor=FD_FLOOR) < 1e-6
