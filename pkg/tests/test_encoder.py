import numpy as np
import pytest

from graphmem import (
    AdamState,
    EncoderDims,
    NumericalError,
    ParameterError,
    adam_step,
    attach_token,
    copy_params,
    encode_view,
    encode_view_backward,
    gnn_backward,
    gnn_forward,
    grad_check,
    init_params,
    params_close,
    params_from_jsonable,
    params_to_jsonable,
    token_key,
)
from graphmem.encoder import append_bias
from graphmem.graphs import normalized_adjacency
from tests.conftest import make_graph


def _dense_reference(a_hat, x, w1, w2):
    """Independent oracle: same math with dense matrices and no caching."""
    a = a_hat.toarray()
    hidden = np.maximum(a @ x @ w1, 0.0)
    return a @ hidden @ w2


def _setup(seed=0, n=6, fin=4, hid=5, out=3):
    rng = np.random.default_rng(seed)
    g = make_graph([(i, (i + 1) % n) for i in range(n)], n, feat_dim=fin)
    a_hat = normalized_adjacency(g)
    x = rng.standard_normal((n, fin))
    w1 = rng.standard_normal((fin, hid))
    w2 = rng.standard_normal((hid, out))
    return a_hat, x, w1, w2, rng


# -- dims and params ---------------------------------------------------------------

def test_dims_validation():
    with pytest.raises(ParameterError, match="hidden_dim"):
        EncoderDims(4, 4, 2, 0, 4, 2)
    with pytest.raises(ParameterError, match="token_dim"):
        EncoderDims(4, 4, -1, 4, 4, 2)
    dims = EncoderDims(4, 3, 2, 5, 6, 2)
    assert EncoderDims.from_dict(dims.to_dict()) == dims


def test_init_params_shapes_and_zero_tokens():
    dims = EncoderDims(text_in=4, struct_in=3, token_dim=2,
                       hidden_dim=5, embed_dim=6, proj_dim=2)
    params = init_params(dims, ["a", "b"], np.random.default_rng(0))
    assert params["text_w1"].shape == (7, 5)  # 4 features + bias + 2 token
    assert params["struct_w1"].shape == (6, 5)
    assert params["text_w2"].shape == (5, 6)
    assert params["proj_text"].shape == (6, 2)
    assert params["vib_logvar_struct"].shape == (6, 6)
    assert np.abs(params[token_key("a")]).max() == 0.0
    assert params[token_key("b")].shape == (2,)
    # Glorot bound respected.
    bound = np.sqrt(6.0 / (7 + 5))
    assert np.abs(params["text_w1"]).max() <= bound


def test_params_close_detects_change():
    dims = EncoderDims(2, 2, 1, 3, 3, 2)
    params = init_params(dims, ["a"], np.random.default_rng(1))
    twin = copy_params(params)
    assert params_close(params, twin)
    twin["text_w1"][0, 0] = np.nextafter(twin["text_w1"][0, 0], 1.0)  # one ulp
    assert not params_close(params, twin)
    del twin["text_w1"]
    assert not params_close(params, twin)


# -- token attachment --------------------------------------------------------------

def test_attach_token_broadcasts():
    x = np.arange(6.0).reshape(3, 2)
    out = attach_token(x, np.array([9.0, 8.0]))
    assert out.shape == (3, 4)
    assert np.array_equal(out[:, 2:], np.tile([9.0, 8.0], (3, 1)))


def test_attach_token_width_zero_is_identity():
    x = np.ones((3, 2))
    assert attach_token(x, np.zeros(0)) is x


# -- forward oracle ---------------------------------------------------------------

def test_gnn_forward_matches_dense_reference():
    a_hat, x, w1, w2, _ = _setup()
    out, _ = gnn_forward(a_hat, x, w1, w2)
    assert np.abs(out - _dense_reference(a_hat, x, w1, w2)).max() < 1e-12


def test_gnn_forward_width_mismatch():
    a_hat, x, w1, w2, _ = _setup()
    with pytest.raises(Exception, match="width"):
        gnn_forward(a_hat, x[:, :2], w1, w2)


def test_encode_view_equals_gnn_on_attached_input():
    a_hat, x, w1, w2, rng = _setup(fin=4)
    token = rng.standard_normal(3)
    w1_tok = rng.standard_normal((8, 5))  # 4 features + bias + 3 token
    out, _ = encode_view(a_hat, x, token, w1_tok, w2)
    ref, _ = gnn_forward(a_hat, attach_token(append_bias(x), token), w1_tok, w2)
    assert np.array_equal(out, ref)


def test_encode_view_zero_input_row_stays_live():
    # An isolated node with an all-zero feature row (a blank walk signature)
    # must still get a generically nonzero embedding through the bias column.
    rng = np.random.default_rng(8)
    g = make_graph([(0, 1)], 3, feat_dim=4)  # node 2 is isolated
    a_hat = normalized_adjacency(g)
    x = np.zeros((3, 4))
    out, _ = encode_view(a_hat, x, np.zeros(0), rng.standard_normal((5, 6)),
                         rng.standard_normal((6, 2)))
    assert np.abs(out[2]).max() > 0.0


# -- backward vs finite differences ----------------------------------------------

def test_gnn_backward_finite_difference():
    a_hat, x, w1, w2, rng = _setup(seed=3)
    target = rng.standard_normal((x.shape[0], w2.shape[1]))

    def loss(p):
        out, cache = gnn_forward(a_hat, p["x"], p["w1"], p["w2"])
        diff = out - target
        dw1, dw2, dx = gnn_backward(cache, diff)
        return 0.5 * float((diff ** 2).sum()), {"w1": dw1, "w2": dw2, "x": dx}

    params = {"x": x.copy(), "w1": w1.copy(), "w2": w2.copy()}
    assert grad_check(loss, params, eps=1e-5, sample=400) < 1e-6


def test_encode_view_token_gradient():
    a_hat, x, _, w2, rng = _setup(seed=4, fin=4)
    token = rng.standard_normal(3)
    w1 = rng.standard_normal((8, 5))
    target = rng.standard_normal((x.shape[0], w2.shape[1]))

    def loss(p):
        out, cache = encode_view(a_hat, x, p["token"], p["w1"], p["w2"])
        diff = out - target
        dw1, dw2, _, dtoken = encode_view_backward(cache, diff)
        return 0.5 * float((diff ** 2).sum()), {
            "w1": dw1, "w2": dw2, "token": dtoken}

    params = {"token": token, "w1": w1, "w2": w2.copy()}
    assert grad_check(loss, params, eps=1e-5, sample=400) < 1e-6


# -- adam ---------------------------------------------------------------------------

def test_adam_first_step_closed_form():
    # With zero init moments, step 1 reduces to -lr * g / (|g| + eps).
    params = {"w": np.array([1.0, -2.0, 3.0])}
    g = np.array([0.5, -0.25, 1e-3])
    state = AdamState(lr=0.1)
    adam_step(params, {"w": g}, state)
    expected = np.array([1.0, -2.0, 3.0]) - 0.1 * g / (np.abs(g) + state.eps)
    assert np.abs(params["w"] - expected).max() < 1e-9


def test_adam_zero_grad_does_not_move():
    params = {"w": np.array([1.0, 2.0])}
    state = AdamState(lr=0.5)
    adam_step(params, {"w": np.zeros(2)}, state)
    assert np.array_equal(params["w"], [1.0, 2.0])


def test_adam_decoupled_weight_decay():
    params = {"w": np.array([2.0])}
    state = AdamState(lr=0.1, weight_decay=0.01)
    adam_step(params, {"w": np.zeros(1)}, state)
    # Zero gradient: only the decay term moves the weight.
    assert params["w"][0] == pytest.approx(2.0 - 0.1 * 0.01 * 2.0)


def test_adam_refuses_nonfinite_gradient():
    params = {"w": np.array([1.0]), "u": np.array([1.0])}
    state = AdamState(lr=0.1)
    with pytest.raises(NumericalError, match="step refused"):
        adam_step(params, {"w": np.array([np.nan]), "u": np.array([1.0])}, state)
    # Whole step refused: nothing moved, step counter untouched.
    assert params["w"][0] == 1.0 and params["u"][0] == 1.0
    assert state.step == 0


def test_adam_unknown_key():
    with pytest.raises(Exception, match="unknown"):
        adam_step({"w": np.zeros(1)}, {"nope": np.zeros(1)}, AdamState(lr=0.1))


def test_adam_converges_on_quadratic():
    params = {"w": np.array([5.0, -3.0])}
    state = AdamState(lr=0.05)
    for _ in range(2000):
        adam_step(params, {"w": 2.0 * params["w"]}, state)
    assert np.abs(params["w"]).max() < 1e-3


# -- grad_check self-tests ----------------------------------------------------------

def test_grad_check_clean_quadratic():
    def loss(p):
        return float((p["w"] ** 2).sum()), {"w": 2.0 * p["w"]}

    params = {"w": np.arange(1.0, 5.0)}
    assert grad_check(loss, params, eps=1e-5) < 1e-7


def test_grad_check_flags_wrong_gradient():
    def loss(p):
        return float((p["w"] ** 2).sum()), {"w": 3.0 * p["w"]}  # wrong factor

    assert grad_check(loss, {"w": np.ones(3)}, eps=1e-5) > 0.2


def test_grad_check_eps_range():
    def loss(p):
        return 0.0, {"w": np.zeros(1)}

    with pytest.raises(ParameterError, match="eps"):
        grad_check(loss, {"w": np.zeros(1)}, eps=1e-2)
    with pytest.raises(ParameterError, match="eps"):
        grad_check(loss, {"w": np.zeros(1)}, eps=1e-7)


def test_grad_check_restores_params():
    def loss(p):
        return float((p["w"] ** 2).sum()), {"w": 2.0 * p["w"]}

    params = {"w": np.array([1.0, 2.0, 3.0])}
    before = params["w"].tobytes()
    grad_check(loss, params, eps=1e-5)
    assert params["w"].tobytes() == before


# -- persistence ---------------------------------------------------------------------

def test_params_json_round_trip_bit_exact():
    dims = EncoderDims(3, 2, 2, 4, 4, 2)
    params = init_params(dims, ["dom-a", "dom-b"], np.random.default_rng(7))
    params[token_key("dom-a")] += np.pi  # non-trivial token values
    import json

    restored = params_from_jsonable(
        json.loads(json.dumps(params_to_jsonable(params)))
    )
    assert params_close(params, restored)
