import math

import numpy as np
import pytest
from scipy.special import erf

from lqrformer import model as M
from lqrformer import tensor as tc
from lqrformer.errors import ConfigMismatchError, FormatError, ShapeError
from lqrformer.model import ModelConfig, TransformerParams, init_params
from lqrformer.tensor import Tape, Tensor

SMALL = ModelConfig(d_m=8, h=2, L=2, d_ff=16, w=3, d_in=19, n_u_max=6)


def randomized(cfg, seed=0, scale=0.3):
    """Initial parameters with every tensor (biases, gains, offsets too) randomized."""
    rng = np.random.default_rng(seed)
    p = init_params(cfg, seed)
    return TransformerParams(cfg, {k: v + scale * rng.normal(size=v.shape) for k, v in p.items()})


# ---------------------------------------------------------------- reference oracle


def ref_ln(x, g, b, rho):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return g * (x - mu) / np.sqrt(var + rho) + b


def ref_block(H, p, l, cfg):
    b = f"block{l}."
    heads = []
    for i in range(cfg.h):
        Q, K, V = (H @ p[f"{b}W_{k}{i}"] for k in "QKV")
        L = Q @ K.T / math.sqrt(cfg.d_h)
        E = np.exp(L - L.max(axis=1, keepdims=True))
        heads.append((E / E.sum(axis=1, keepdims=True)) @ V)
    A = np.hstack(heads) @ p[b + "W_O"]
    C = ref_ln(H + A, p[b + "ln1.gamma"], p[b + "ln1.beta"], cfg.rho)
    Z = C @ p[b + "W_1"] + p[b + "b_1"]
    G = (Z * 0.5 * (1 + erf(Z / math.sqrt(2)))) @ p[b + "W_2"] + p[b + "b_2"]
    return ref_ln(C + G, p[b + "ln2.gamma"], p[b + "ln2.beta"], cfg.rho)


def ref_forward(S, p, cfg):
    H = S @ p["W_in"].T + p["b_in"] + p["P"]
    R = np.concatenate([ref_block(H, p, l, cfg)[-1] for l in range(cfg.L)])
    return p["W_out"] @ R + p["b_out"]


# ---------------------------------------------------------------- config / init


def test_config_invariants():
    assert ModelConfig().d_h == 4
    with pytest.raises(ValueError):
        ModelConfig(d_m=10, h=3)
    with pytest.raises(ValueError):
        ModelConfig(L=0)


def test_init_is_deterministic_and_follows_rules():
    a, b = init_params(SMALL, 3), init_params(SMALL, 3)
    assert a.equals(b)
    assert not a.equals(init_params(SMALL, 4))
    for name, v in a.items():
        if name.endswith("gamma"):
            assert np.all(v == 1)
        elif name == "P":
            assert np.all(np.abs(v) <= 0.02)
        elif v.ndim == 1:
            assert np.all(v == 0)
        else:
            assert np.all(np.abs(v) <= math.sqrt(6 / sum(v.shape)))


def test_paper_scale_parameter_count():
    cfg = ModelConfig()
    p = init_params(cfg, 0)
    per_block = 3 * 64 * 64 + 64 * 64 + 4 * 64 + 64 * 256 + 256 + 256 * 64 + 64
    expected = 64 * 19 + 64 + 13 * 64 + 4 * per_block + 6 * 256 + 6
    assert p.n_params() == expected
    assert p["block0.W_Q0"].shape == (64, 4)
    assert p["W_out"].shape == (6, 256)


def test_param_validation():
    p = init_params(SMALL, 0)
    arrays = dict(p.items())
    arrays["W_in"] = np.zeros((3, 3))
    with pytest.raises(ShapeError):
        TransformerParams(SMALL, arrays)
    arrays = dict(p.items())
    del arrays["b_out"]
    with pytest.raises(ShapeError):
        TransformerParams(SMALL, arrays)


# ---------------------------------------------------------------- embed / block


def test_embed_examples():
    p = init_params(SMALL, 1)
    arr = dict(p.items())
    arr["W_in"] = np.zeros_like(arr["W_in"])
    q = TransformerParams(SMALL, arr)
    S = np.random.default_rng(0).normal(size=(4, 19))
    np.testing.assert_array_equal(M.embed(S, q), q["P"])
    arr = dict(p.items())
    arr["P"] = np.zeros_like(arr["P"])
    q = TransformerParams(SMALL, arr)
    S = np.zeros((4, 19))
    for r, c in enumerate((0, 5, 11, 18)):
        S[r, c] = 1.0
    np.testing.assert_array_equal(M.embed(S, q), q["W_in"].T[[0, 5, 11, 18]])


def test_embed_matches_loops():
    p = randomized(SMALL, 2)
    S = np.random.default_rng(1).normal(size=(4, 19))
    H = np.zeros((4, 8))
    for r in range(4):
        for c in range(8):
            H[r, c] = sum(S[r, k] * p["W_in"][c, k] for k in range(19)) + p["b_in"][c] + p["P"][r, c]
    np.testing.assert_allclose(M.embed(S, p), H, rtol=0, atol=1e-12)
    with pytest.raises(ShapeError):
        M.embed(np.zeros((5, 19)), p)


def test_block_matches_reference():
    p = randomized(SMALL, 3)
    H = np.random.default_rng(2).normal(size=(4, 8))
    for l in range(SMALL.L):
        np.testing.assert_allclose(M.attention_block(H, p, l), ref_block(H, p, l, SMALL), rtol=0, atol=1e-12)


def test_block_with_zero_projections():
    p = init_params(SMALL, 0)
    arr = dict(p.items())
    for k in arr:
        if any(t in k for t in ("W_Q", "W_K", "W_V", "W_O", "W_1", "W_2")):
            arr[k] = np.zeros_like(arr[k])
    rng = np.random.default_rng(3)
    arr["block0.b_1"] = rng.normal(size=16)
    arr["block0.b_2"] = rng.normal(size=8)
    q = TransformerParams(SMALL, arr)
    H = rng.normal(size=(4, 8))
    g0 = arr["block0.b_2"]  # W_2 = 0 leaves only the output bias
    expected = ref_ln(ref_ln(H, 1, 0, 1e-5) + g0, 1, 0, 1e-5)
    np.testing.assert_allclose(M.attention_block(H, q, 0), expected, atol=1e-12)


def test_block_is_row_permutation_equivariant():
    p = randomized(SMALL, 4)
    rng = np.random.default_rng(4)
    H = rng.normal(size=(4, 8))
    perm = np.array([2, 0, 1, 3])
    Y = M.attention_block(H, p, 1)
    np.testing.assert_allclose(M.attention_block(H[perm], p, 1), Y[perm], atol=1e-12)


def test_attention_rows_sum_to_one():
    p = randomized(SMALL, 5)
    H = np.random.default_rng(5).normal(size=(4, 8)) * 3
    W = M.attention_weights(H, p, 0)
    assert W.shape == (2, 4, 4)
    np.testing.assert_allclose(W.sum(axis=-1), 1.0, atol=1e-12)


# ---------------------------------------------------------------- forward


def test_forward_matches_reference_and_full_path():
    p = randomized(SMALL, 6)
    S = np.random.default_rng(6).normal(size=(5, 4, 19))
    out = M.forward(S, p)
    assert out.shape == (5, 6)
    for b in range(5):
        np.testing.assert_allclose(out[b], ref_forward(S[b], p, SMALL), rtol=0, atol=1e-12)
    full = M.forward_t(Tensor(S), M.as_tensors(p), SMALL, last_row_only=False).data
    np.testing.assert_allclose(out, full, rtol=0, atol=1e-12)
    np.testing.assert_allclose(M.forward(S[0], p), out[0], rtol=0, atol=1e-13)


def test_forward_examples():
    p = randomized(SMALL, 7)
    arr = dict(p.items())
    arr["W_out"] = np.zeros_like(arr["W_out"])
    q = TransformerParams(SMALL, arr)
    S = np.random.default_rng(7).normal(size=(4, 19))
    np.testing.assert_array_equal(M.forward(S, q), q["b_out"])
    one = ModelConfig(d_m=8, h=2, L=1, d_ff=16, w=3)
    p1 = randomized(one, 8)
    Y = M.attention_block(M.embed(S, p1), p1, 0)
    np.testing.assert_allclose(M.forward(S, p1), p1["W_out"] @ Y[-1] + p1["b_out"], atol=1e-12)
    assert M.forward(np.zeros((13, 19)), init_params(ModelConfig(), 0)).shape == (6,)


def test_forward_is_deterministic():
    p = randomized(SMALL, 9)
    S = np.random.default_rng(9).normal(size=(3, 4, 19))
    assert np.array_equal(M.forward(S, p), M.forward(S, p.copy()))


def test_shape_contract():
    p = init_params(SMALL, 0)
    for bad in ((4, 18), (3, 19), (2, 5, 19)):
        with pytest.raises(ShapeError):
            M.forward(np.zeros(bad), p)


def test_blocks_are_parallel():
    p = randomized(SMALL, 10)
    arr = dict(p.items())
    arr["W_out"][:, 8:] = 0.0  # drop block 1 from the readout
    base = TransformerParams(SMALL, arr)
    S = np.random.default_rng(10).normal(size=(3, 4, 19))
    rng = np.random.default_rng(11)
    arr2 = {k: (v + rng.normal(size=v.shape) if k.startswith("block1.") else v) for k, v in arr.items()}
    np.testing.assert_array_equal(M.forward(S, base), M.forward(S, TransformerParams(SMALL, arr2)))


def test_sequential_flag_changes_topology():
    seq = ModelConfig(d_m=8, h=2, L=2, d_ff=16, w=3, sequential=True)
    p = randomized(SMALL, 12)
    q = TransformerParams(seq, dict(p.items()))
    S = np.random.default_rng(12).normal(size=(4, 19))
    H = M.embed(S, p)
    Y0 = ref_block(H, p.arrays, 0, SMALL)
    Y1 = ref_block(Y0, p.arrays, 1, SMALL)
    expected = p["W_out"] @ np.concatenate([Y0[-1], Y1[-1]]) + p["b_out"]
    np.testing.assert_allclose(M.forward(S, q), expected, atol=1e-12)
    assert not np.allclose(M.forward(S, q), M.forward(S, p))


# ---------------------------------------------------------------- gradients


def model_loss(S, U, Mk, params: dict):
    preds = M.forward_t(Tensor(S), params, SMALL)
    return tc.cauchy_mean(tc.mul(tc.sub(preds, Tensor(U)), Tensor(Mk)), 1.0)


def test_full_model_gradient_check():
    p = randomized(SMALL, 13)
    rng = np.random.default_rng(13)
    S, U = rng.normal(size=(2, 4, 19)), rng.normal(size=(2, 6))
    Mk = np.array([[1, 1, 1, 0, 0, 0], [1, 1, 1, 1, 1, 1.0]])
    with Tape() as tape:
        loss = model_loss(S, U, Mk, {k: tape.watch(k, v) for k, v in p.items()})
    grads = tape.backward(loss)
    eps = 1e-5
    worst = 0.0
    for name, v in p.items():
        fd = np.zeros_like(v)
        for idx in np.ndindex(v.shape):
            vals = []
            for sgn in (1, -1):
                arr = {k: a for k, a in p.items()}
                w = v.copy()
                w[idx] += sgn * eps
                arr[name] = w
                vals.append(model_loss(S, U, Mk, {k: Tensor(a) for k, a in arr.items()}).item())
            fd[idx] = (vals[0] - vals[1]) / (2 * eps)
        err = np.max(np.abs(fd - grads[name])) / max(np.max(np.abs(fd)), 1e-7)
        worst = max(worst, err)
        assert err < 1e-4, (name, err)
    assert worst < 1e-4


# ---------------------------------------------------------------- checkpoints


def test_checkpoint_round_trip(tmp_path):
    p = init_params(SMALL, 14)
    a, b = tmp_path / "a.lqrc", tmp_path / "b.lqrc"
    M.save_checkpoint(a, p, {"note": "x"})
    q, header, _ = M.load_checkpoint(a, SMALL)
    assert q.equals(p)
    assert header["note"] == "x" and header["model"]["d_m"] == 8
    M.save_checkpoint(b, q, {"note": "x"})
    assert a.read_bytes() == b.read_bytes()


def test_checkpoint_rounds_to_float32(tmp_path):
    p = randomized(SMALL, 15)
    M.save_checkpoint(tmp_path / "c.lqrc", p)
    q, _, _ = M.load_checkpoint(tmp_path / "c.lqrc")
    assert q.equals(p.rounded())


def test_checkpoint_errors(tmp_path):
    p = init_params(SMALL, 16)
    path = tmp_path / "c.lqrc"
    M.save_checkpoint(path, p)
    with pytest.raises(ConfigMismatchError):
        M.load_checkpoint(path, ModelConfig())
    blob = bytearray(path.read_bytes())
    blob[-3] ^= 0x10
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError, match="b_out"):
        M.load_checkpoint(path)
