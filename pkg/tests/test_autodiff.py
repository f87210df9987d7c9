"""Tape, ops, gradient checks and checkpoint files."""

import numpy as np
import pytest

import spanedit.autodiff as ad


def t(data, grad=True):
    return ad.Tensor(np.asarray(data, dtype=np.float64), requires_grad=grad)


def test_square_gradient():
    x = t(3.0)
    loss = ad.mul(x, x)
    ad.backward(loss)
    assert x.grad_array() == pytest.approx(6.0)


def test_backward_requires_scalar():
    x = t([1.0, 2.0])
    with pytest.raises(ValueError):
        ad.backward(ad.mul(x, x))


def test_no_grad_suppresses_tape():
    x = t(2.0)
    with ad.no_grad():
        y = ad.mul(x, x)
    assert not y.requires_grad


def test_add_broadcast_gradient():
    a = t(np.ones((2, 3)))
    b = t(np.ones((3,)))
    loss = ad.reduce_sum(ad.add(a, b))
    ad.backward(loss)
    assert np.array_equal(a.grad_array(), np.ones((2, 3)))
    assert np.array_equal(b.grad_array(), np.full((3,), 2.0))


def test_logsumexp_gradient_is_softmax():
    x = t([1.0, 2.0, 3.0])
    ad.backward(ad.logsumexp(x))
    e = np.exp([1.0, 2.0, 3.0])
    assert np.allclose(x.grad_array(), e / e.sum(), atol=1e-12)


def test_logsumexp_handles_neg_inf():
    x = t([ad.NEG_INF, 0.0, ad.NEG_INF])
    out = ad.logsumexp(x)
    assert out.item() == pytest.approx(0.0)
    ad.backward(out)
    assert np.allclose(x.grad_array(), [0.0, 1.0, 0.0])


def test_log_softmax_normalizes():
    rng = np.random.default_rng(1)
    x = t(rng.normal(size=(4, 7)))
    out = ad.log_softmax(x)
    sums = np.exp(out.data).sum(axis=-1)
    assert np.allclose(sums, 1.0, atol=1e-9)


def test_log_softmax_fully_masked_row_raises():
    x = t(np.full((2, 3), ad.NEG_INF))
    with pytest.raises(ValueError):
        ad.log_softmax(x)


def test_masked_fill_blocks_weight_and_gradient():
    x = t([1.0, 2.0, 3.0])
    mask = np.array([False, True, False])
    out = ad.log_softmax(ad.masked_fill(x, mask, ad.NEG_INF))
    probs = np.exp(out.data)
    assert probs[1] == 0.0
    assert probs.sum() == pytest.approx(1.0)
    ad.backward(ad.reduce_sum(ad.narrow(out, 0, 0, 1)))
    assert x.grad_array()[1] == 0.0


def test_cumlogsumexp_matches_naive(rng):
    x = t(rng.normal(size=(3, 9)))
    out = ad.cumlogsumexp(x)
    naive = np.array(
        [[np.logaddexp.reduce(row[: j + 1]) for j in range(9)] for row in x.data]
    )
    assert np.allclose(out.data, naive, atol=1e-12)


def test_cumlogsumexp_gradient(rng):
    params = {
        "x": t(rng.normal(size=(2, 5))),
        "w": t(rng.normal(size=(2, 5))),
    }

    def f():
        return ad.reduce_sum(ad.mul(ad.cumlogsumexp(params["x"]), params["w"]))

    assert ad.grad_check(f, params, eps=1e-6) < 1e-6


def test_linear_gradcheck(rng):
    params = {
        "x": t(rng.normal(size=(3, 4))),
        "W": t(rng.normal(size=(5, 4))),
    }

    def f():
        h = ad.tanh(ad.matmul(params["x"], params["W"], transpose_b=True))
        return ad.reduce_sum(ad.mul(h, h))

    assert ad.grad_check(f, params, eps=1e-6) < 5e-7


def test_gru_cell_matches_primitive_composition(rng):
    B, E, H = 3, 4, 5
    x = t(rng.normal(size=(B, E)))
    h = t(rng.normal(size=(B, H)))
    Ws = {g: t(rng.normal(size=(H, E))) for g in ("z", "r", "n")}
    Us = {g: t(rng.normal(size=(H, H))) for g in ("z", "r", "n")}
    bs = {g: t(rng.normal(size=(H,))) for g in ("z", "r", "n")}

    fused = ad.gru_cell(
        x, h, Ws["z"], Ws["r"], Ws["n"], Us["z"], Us["r"], Us["n"], bs["z"], bs["r"], bs["n"]
    )

    z = ad.sigmoid(
        ad.add(ad.add(ad.matmul(x, Ws["z"], transpose_b=True), ad.matmul(h, Us["z"], transpose_b=True)), bs["z"])
    )
    r = ad.sigmoid(
        ad.add(ad.add(ad.matmul(x, Ws["r"], transpose_b=True), ad.matmul(h, Us["r"], transpose_b=True)), bs["r"])
    )
    n = ad.tanh(
        ad.add(
            ad.add(ad.matmul(x, Ws["n"], transpose_b=True), ad.mul(r, ad.matmul(h, Us["n"], transpose_b=True))),
            bs["n"],
        )
    )
    composed = ad.add(ad.mul(ad.sub(1.0, z), n), ad.mul(z, h))
    assert np.allclose(fused.data, composed.data, atol=1e-12)


def test_gru_cell_gradcheck(rng):
    B, E, H = 2, 3, 4
    params = {"x": t(rng.normal(size=(B, E))), "h": t(rng.normal(size=(B, H)))}
    for g in ("z", "r", "n"):
        params[f"W_{g}"] = t(rng.normal(size=(H, E)))
        params[f"U_{g}"] = t(rng.normal(size=(H, H)))
        params[f"b_{g}"] = t(rng.normal(size=(H,)))

    def f():
        p = params
        out = ad.gru_cell(
            p["x"], p["h"], p["W_z"], p["W_r"], p["W_n"],
            p["U_z"], p["U_r"], p["U_n"], p["b_z"], p["b_r"], p["b_n"],
        )
        return ad.reduce_sum(ad.mul(out, out))

    assert ad.grad_check(f, params, eps=1e-5) < 1e-4


def test_take_last_and_where_gradients(rng):
    params = {"x": t(rng.normal(size=(2, 3)))}

    def f():
        picked = ad.take_last(params["x"], np.array([[0, 2], [1, 1]]))
        mask = np.array([[True, False], [False, True]])
        mixed = ad.where(mask, picked, ad.mul(picked, 2.0))
        return ad.reduce_sum(mixed)

    assert ad.grad_check(f, params, eps=1e-6) < 1e-8


def test_concat_narrow_stack_roundtrip(rng):
    a = t(rng.normal(size=(2, 3)))
    b = t(rng.normal(size=(2, 2)))
    joined = ad.concat([a, b], axis=1)
    back = ad.narrow(joined, 1, 0, 3)
    ad.backward(ad.reduce_sum(ad.mul(back, back)))
    assert np.allclose(a.grad_array(), 2 * a.data)
    assert np.array_equal(b.grad_array(), np.zeros_like(b.data))

    parts = [t(rng.normal(size=(3,))) for _ in range(4)]
    stacked = ad.stack(parts, axis=0)
    assert stacked.data.shape == (4, 3)


def test_embed_lookup_accumulates_repeats():
    table = t(np.arange(12, dtype=np.float64).reshape(4, 3))
    out = ad.embed_lookup(table, np.array([1, 1, 2]))
    ad.backward(ad.reduce_sum(out))
    g = table.grad_array()
    assert np.array_equal(g[1], [2.0, 2.0, 2.0])
    assert np.array_equal(g[2], [1.0, 1.0, 1.0])
    assert np.array_equal(g[0], [0.0, 0.0, 0.0])


def test_dropout_eval_and_zero_rate_identity(rng):
    x = t(rng.normal(size=(5, 5)))
    assert ad.dropout(x, 0.5, train=False, rng=None) is x
    assert ad.dropout(x, 0.0, train=True, rng=np.random.default_rng(0)) is x
    y = ad.dropout(x, 0.5, train=True, rng=np.random.default_rng(0))
    kept = y.data != 0
    # inverted scaling on the survivors
    assert np.allclose(y.data[kept], x.data[kept] * 2.0)


def test_backward_accumulates_across_reuse():
    x = t(2.0)
    y = ad.add(ad.mul(x, x), ad.mul(3.0, x))
    ad.backward(y)
    assert x.grad_array() == pytest.approx(7.0)


def test_zero_grad():
    x = t(2.0)
    ad.backward(ad.mul(x, x))
    ad.zero_grad([x])
    assert x.grad is None


def test_checkpoint_roundtrip(tmp_path, rng):
    params = {"w": rng.normal(size=(3, 2)), "b": rng.normal(size=(2,))}
    path = tmp_path / "ck.json"
    ad.save_checkpoint(path, {k: ad.Tensor(v) for k, v in params.items()}, {"note": 1})
    loaded, header = ad.load_checkpoint(path)
    assert header["note"] == 1
    assert np.array_equal(loaded["w"], params["w"])
    assert np.array_equal(loaded["b"], params["b"])


def test_checkpoint_float32_roundtrip(tmp_path, rng):
    w = rng.normal(size=(4, 3)).astype(np.float32)
    path = tmp_path / "ck32.json"
    ad.save_checkpoint(path, {"w": ad.Tensor(w)}, None)
    loaded, _ = ad.load_checkpoint(path)
    assert loaded["w"].dtype == np.float32
    assert np.array_equal(loaded["w"], w)


def test_checkpoint_rejects_mixed_dtypes(tmp_path, rng):
    params = {
        "w": ad.Tensor(rng.normal(size=(2,))),
        "b": ad.Tensor(rng.normal(size=(2,)).astype(np.float32)),
    }
    with pytest.raises(ad.CheckpointError):
        ad.save_checkpoint(tmp_path / "ck.json", params, None)


def test_checkpoint_rejects_bad_version(tmp_path):
    path = tmp_path / "ck.json"
    ad.save_checkpoint(path, {"w": ad.Tensor(np.zeros(2))}, None)
    blob = path.read_text().replace('"format_version": 1', '"format_version": 99')
    path.write_text(blob)
    with pytest.raises(ad.CheckpointError):
        ad.load_checkpoint(path)
