import numpy as np
import pytest
from _gradcheck import BLOCKS, active_families, run_check

from opflab.errors import ShapeMismatch
from opflab.neural import Adam, FccModel, RnnModel, lstm_step, param_count, rnn_forward
from opflab.neural.checkpoint import load_checkpoint, model_from_dict, model_to_dict, save_checkpoint
from opflab.neural.fcc import fcc_param_formula, fcc_widths
from opflab.neural.layers import sigmoid
from opflab.neural.losses import loss_basic, loss_rnn
from opflab.neural.rnn import LstmCell, rnn_param_formula


@pytest.mark.parametrize("block", BLOCKS)
def test_gradient_matches_finite_differences(block):
    assert run_check(block, 11) < 1e-4


def test_lagrangian_check_exercises_every_family():
    means = [active_families(s) for s in (0, 1)]
    for f in means[0]:
        assert max(m[f] for m in means) > 0


def test_sigmoid_is_stable():
    out = sigmoid(np.array([-1000.0, 0.0, 1000.0]))
    assert np.all(np.isfinite(out))
    assert np.allclose(out, [0.0, 0.5, 1.0])


def test_cell_state_grows_at_most_linearly():
    rng = np.random.default_rng(0)
    cell = LstmCell.init(3, 5, rng)
    cell.W *= 50
    cell.b[:] = 20
    h, c = np.zeros((2, 5)), np.zeros((2, 5))
    for t in range(1, 40):
        h, c, _ = lstm_step(cell, rng.normal(size=(2, 3)), h, c)
        # |c_t| <= |c_{t-1}| + 1 since forget <= 1 and |input * candidate| <= 1
        assert np.abs(c).max() <= t + 1e-12
        assert np.abs(h).max() <= 1.0


def test_lstm_shape_checked():
    cell = LstmCell.init(3, 4, np.random.default_rng(0))
    with pytest.raises(ShapeMismatch):
        lstm_step(cell, np.zeros((1, 2)), np.zeros((1, 4)), np.zeros((1, 4)))


def _rnn(T=4, seed=0):
    return RnnModel.init(5, 6, [0, 1, 2], hidden=4, embed=3, T=T, seed=seed)


def test_autoregressive_coupling():
    m = _rnn()
    x = np.random.default_rng(1).normal(size=(3, 5))
    base = rnn_forward(m, x)[0]
    bumped = rnn_forward(m, x, inject=np.full(3, 0.5))[0]
    # unit 0 is upstream of the injection, later units are not
    assert np.array_equal(base[0], bumped[0])
    assert not np.allclose(base[-1], bumped[-1])


def test_teacher_forcing_uses_targets():
    m = _rnn()
    x = np.random.default_rng(2).normal(size=(2, 5))
    teacher = np.random.default_rng(3).normal(size=(2, 4, 6))
    free = rnn_forward(m, x)[0]
    forced = rnn_forward(m, x, teacher=teacher)[0]
    assert np.array_equal(free[0], forced[0])
    assert not np.allclose(free[1], forced[1])


def test_single_unit_rnn():
    m = _rnn(T=1)
    x = np.ones(5)
    outs = rnn_forward(m, x)[0]
    assert len(outs) == 1 and outs[0].shape == (6,)
    assert np.array_equal(m.predict(x), outs[0])


def test_per_unit_output_scaling():
    m = _rnn(T=2)
    m.y_shift = np.array([np.zeros(6), np.full(6, 3.0)])
    m.y_scale = np.array([np.ones(6), np.full(6, 2.0)])
    outs = rnn_forward(m, np.zeros(5))[0]
    shift, scale = m.out_norm(1)
    assert np.all(shift == 3.0) and np.all(scale == 2.0)
    assert outs[1].shape == (6,)
    with pytest.raises(ShapeMismatch):
        RnnModel(5, 6, [0], T=2, y_scale=np.ones((3, 6)))


@pytest.mark.parametrize("n,out", [(2, 4), (30, 12), (118, 108)])
def test_fcc_param_count_closed_form(n, out):
    m = FccModel.init(fcc_widths(n, out))
    assert param_count(m) == fcc_param_formula(n, out)


def test_fcc_param_count_hand_value():
    # widths 60-120-120-120-12
    assert fcc_param_formula(30, 12) == 60 * 120 + 120 + 2 * (120 * 120 + 120) + 120 * 12 + 12


def test_rnn_param_count_closed_form():
    m = RnnModel.init(60, 72, np.arange(12), hidden=8, embed=8, T=5)
    assert param_count(m) == rnn_param_formula(60, 72, 12, 8, 8)
    assert rnn_param_formula(60, 72, 12, 8, 8) == (12 * 8 + 8) + (76 * 32 + 32) + (8 * 72 + 72)


def test_fcc_rejects_wrong_input():
    m = FccModel.init([3, 4, 2])
    with pytest.raises(ShapeMismatch):
        m.predict(np.zeros(5))
    with pytest.raises(ValueError):
        m.predict(np.array([0.0, np.nan, 1.0]))


def test_fcc_checkpoint_round_trip(tmp_path):
    m = FccModel.init([3, 5, 2], "tanh", seed=4)
    m.x_shift = np.array([1.0, 2.0, 3.0])
    p = tmp_path / "c.json"
    save_checkpoint(p, m, {"note": "x"})
    back, extra = load_checkpoint(p)
    x = np.random.default_rng(0).normal(size=(4, 3))
    assert np.array_equal(back.predict(x), m.predict(x))
    assert extra == {"note": "x"}
    assert back.activation == "tanh"


def test_rnn_checkpoint_round_trip():
    m = _rnn()
    m.y_shift = np.arange(24, dtype=float).reshape(4, 6)
    m.y_scale = np.full((4, 6), 0.5)
    back, _ = model_from_dict(model_to_dict(m))
    assert back.y_shift.shape == (4, 6)
    x = np.ones((2, 5))
    assert np.array_equal(back.predict(x), m.predict(x))


def test_checkpoint_version_checked():
    d = model_to_dict(_rnn())
    d["schema_version"] = 99
    with pytest.raises(ValueError):
        model_from_dict(d)


def test_adam_first_step_is_lr_sized():
    params = {"w": np.array([1.0, -2.0, 3.0])}
    opt = Adam(params, lr=0.1)
    opt.step({"w": np.array([5.0, -0.01, 0.0])})
    assert np.allclose(params["w"], [0.9, -1.9, 3.0], atol=1e-6)


def test_adam_minimises_quadratic():
    params = {"w": np.array([4.0, -3.0])}
    opt = Adam(params, lr=0.05)
    for _ in range(2000):
        opt.step({"w": 2 * params["w"]})
    assert np.abs(params["w"]).max() < 1e-2


def test_loss_basic_values():
    val, g = loss_basic(np.zeros((2, 2)), np.array([[1.0, 0.0], [0.0, 2.0]]))
    assert val == pytest.approx(2.5)
    assert np.allclose(g, [[1.0, 0.0], [0.0, 2.0]])
    with pytest.raises(ShapeMismatch):
        loss_basic(np.zeros(3), np.zeros(2))


def test_loss_rnn_sqrt_weights():
    targets = [np.zeros(2)] * 3
    preds = [np.array([1.0, 0.0])] * 3
    val, grads = loss_rnn(None, None, targets, preds)
    assert val == pytest.approx(1 + np.sqrt(2) + np.sqrt(3))
    assert grads[2][0] == pytest.approx(2 * np.sqrt(3))
    with pytest.raises(ValueError):
        loss_rnn(None, None, targets, preds, {"kcl": 1.0})
