import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from chartjepa import ndnum as nd
from chartjepa.models import (CELL_KINDS, Checkpoint, EncoderSpec, PredictorSpec, cell_step,
                              ema_update, encode, encoder_forward, head_forward, init_encoder, init_predictor,
                              load_checkpoint, on_tape, param_count, predictor_rollout, rollout,
                              save_checkpoint)
from chartjepa.ndnum import Tape
from gradcheck import check

TINY_ENC = EncoderSpec(8, (8, 4))


def tiny_pred(cell):
    return PredictorSpec(cell=cell, hidden=4, head_hidden=4, head_out_scale=1.0)


# ---------------------------------------------------------------- init


def test_init_is_seed_deterministic():
    a, b = init_encoder(TINY_ENC, 3), init_encoder(TINY_ENC, 3)
    assert all(np.array_equal(a[k], b[k]) for k in a)
    c = init_encoder(TINY_ENC, 4)
    assert not np.array_equal(a["enc.0.W"], c["enc.0.W"])


def test_biases_start_at_zero_except_lstm_forget_gate():
    enc = init_encoder(TINY_ENC, 0)
    assert not any(np.any(v) for k, v in enc.items() if k.endswith(".b"))
    for cell in CELL_KINDS:
        phi = init_predictor(tiny_pred(cell), 0)
        for k, v in phi.items():
            if k.endswith(".b"):
                expected = 1.0 if k == "cell.f.b" else 0.0
                assert np.all(v == expected), k


def test_glorot_layer_statistics():
    W = init_encoder(EncoderSpec(1024, (256,)), 0)["enc.0.W"]
    assert abs(W.mean()) < 0.05
    limit = np.sqrt(6 / (1024 + 256))
    assert W.min() >= -limit and W.max() <= limit


def test_recurrent_weights_are_orthogonal():
    phi = init_predictor(PredictorSpec(hidden=16), 0)
    Wh = phi["cell.r.Wh"]
    assert np.allclose(Wh @ Wh.T, np.eye(16), atol=1e-12)


def test_parameter_layout():
    assert param_count(init_encoder(TINY_ENC, 0)) == 8 * 8 + 8 + 8 * 4 + 4 + 4 * 2 + 2
    gru = init_predictor(tiny_pred("gru"), 0)
    assert {k.split(".")[1] for k in gru if k.startswith("cell.")} == {"r", "u", "c"}
    lstm = init_predictor(tiny_pred("lstm"), 0)
    assert {k.split(".")[1] for k in lstm if k.startswith("cell.")} == {"i", "f", "o", "g"}


def test_full_and_desk_presets():
    assert EncoderSpec(1024).widths == (1024, 512, 256, 128, 64)
    assert EncoderSpec.desk(1024).widths == (256, 128, 64)
    assert PredictorSpec().hidden == 256
    assert PredictorSpec.desk().hidden == 64
    with pytest.raises(ValueError):
        PredictorSpec(cell="transformer")


# ---------------------------------------------------------------- encoder


def test_numpy_encode_matches_tape_forward():
    rng = np.random.default_rng(0)
    theta = init_encoder(TINY_ENC, 1)
    x = rng.normal(size=(7, 8))
    tape = Tape()
    z = encoder_forward(on_tape(tape, theta), tape.const(x)).value
    assert np.array_equal(encode(theta, x), z)
    # chunking changes BLAS blocking, so only the last bits may move
    assert np.allclose(encode(theta, x, chunk=3), z, rtol=0, atol=1e-14)


def test_encode_rejects_wrong_width():
    with pytest.raises(nd.DimensionError):
        encode(init_encoder(TINY_ENC, 0), np.zeros((2, 5)))


def test_encoder_gradient():
    rng = np.random.default_rng(1)
    theta = init_encoder(TINY_ENC, 2)
    theta = {k: v + 0.1 * rng.normal(size=v.shape) for k, v in theta.items()}
    x = rng.normal(size=(5, 8))
    w = rng.normal(size=(5, 2))
    check(lambda tape, p: nd.total(nd.mul(encoder_forward(p, tape.const(x)), tape.const(w))), theta)


# ---------------------------------------------------------------- cells


@pytest.mark.parametrize("cell", CELL_KINDS)
def test_cell_bptt_finite_difference(cell):
    """Every gate's tensors through a 5-step unroll."""
    rng = np.random.default_rng(3)
    phi = init_predictor(tiny_pred(cell), 4)
    phi = {k: v + 0.2 * rng.normal(size=v.shape) for k, v in phi.items()}
    z0 = rng.normal(size=(3, 2))
    v = rng.normal(size=(3, 5, 2))
    w = rng.normal(size=(5, 3, 2))

    def build(tape, p):
        zs = predictor_rollout(p, tape.const(z0), v, slot_duration=0.04, input_gain=10.0)
        terms = [nd.total(nd.mul(z, tape.const(w[t]))) for t, z in enumerate(zs)]
        out = terms[0]
        for t in terms[1:]:
            out = nd.add(out, t)
        return out

    errs = check(build, phi)
    assert set(errs) == set(phi)


@pytest.mark.parametrize("cell", CELL_KINDS)
def test_single_cell_step_shapes(cell):
    tape = Tape()
    phi = on_tape(tape, init_predictor(tiny_pred(cell), 0))
    zero = tape.const(np.zeros((2, 4)))
    state = (zero, zero) if cell == "lstm" else (zero,)
    out = cell_step(cell, phi, tape.const(np.ones((2, 2))), state)
    assert len(out) == len(state)
    assert out[0].shape == (2, 4)


def test_gru_with_closed_update_gate_keeps_state():
    tape = Tape()
    phi = init_predictor(tiny_pred("gru"), 0)
    phi["cell.u.b"][:] = -1e3  # u = sigmoid(-1000) = 0, so h' = h
    leaves = on_tape(tape, phi)
    h = tape.const(np.arange(8.0).reshape(2, 4) / 10)
    (h2,) = cell_step("gru", leaves, tape.const(np.ones((2, 2))), (h,))
    assert np.allclose(h2.value, h.value, atol=1e-300)


# ---------------------------------------------------------------- rollout


def test_rollout_integrates_head_outputs():
    rng = np.random.default_rng(5)
    phi = init_predictor(tiny_pred("gru"), 1)
    z0 = rng.normal(size=(2, 2))
    v = rng.normal(size=(2, 6, 2))
    tape = Tape()
    leaves = on_tape(tape, phi, trainable=False)
    zs = predictor_rollout(leaves, tape.const(z0), v, 0.04, 10.0)
    # replay the recurrence by hand; each step adds exactly the head output
    h = tape.const(np.zeros((2, 4)))
    prev = z0
    for t in range(6):
        (h,) = cell_step("gru", leaves, tape.const(v[:, t] * 0.4), (h,))
        assert np.array_equal(zs[t].value, prev + head_forward(leaves, h).value)
        prev = zs[t].value


def test_rollout_is_pure_and_batch_consistent():
    rng = np.random.default_rng(6)
    phi = init_predictor(tiny_pred("lstm"), 2)
    z0 = rng.normal(size=(3, 2))
    v = rng.normal(size=(3, 7, 2))
    a = rollout(phi, z0, v, 0.04)
    b = rollout(phi, z0, v, 0.04)
    assert np.array_equal(a, b) and a.shape == (3, 7, 2)
    single = rollout(phi, z0[1], v[1], 0.04)
    assert single.shape == (7, 2)
    assert np.allclose(single, a[1], atol=1e-14)
    assert np.array_equal(rollout(phi, z0, v, 0.04, horizon=3), a[:, :3])


def test_rollout_rejects_short_velocity_sequences():
    phi = init_predictor(tiny_pred("rnn"), 0)
    with pytest.raises(ValueError):
        rollout(phi, np.zeros(2), np.zeros((0, 2)), 0.04)
    with pytest.raises(ValueError):
        rollout(phi, np.zeros(2), np.zeros((2, 2)), 0.04, horizon=5)


def test_zero_head_and_zero_velocity_keeps_the_chart_point():
    phi = init_predictor(tiny_pred("gru"), 0)
    phi["head.1.W"][:] = 0.0
    z = rollout(phi, np.array([1.5, -2.0]), np.zeros((4, 2)), 0.04)
    assert np.array_equal(z, np.tile([1.5, -2.0], (4, 1)))


# ---------------------------------------------------------------- EMA


def test_ema_examples():
    one, zero = {"w": np.array([[1.0]])}, {"w": np.array([[0.0]])}
    assert ema_update(one, zero, 0.99)["w"][0, 0] == 0.99
    assert ema_update(one, zero, 1.0)["w"][0, 0] == 1.0
    assert ema_update(one, zero, 0.0)["w"][0, 0] == 0.0


@given(st.floats(0, 1), st.integers(0, 2 ** 16))
def test_ema_matches_the_scalar_formula(tau, seed):
    rng = np.random.default_rng(seed)
    t = {"a": rng.normal(size=(3, 2)), "b": rng.normal(size=(1, 4))}
    o = {"a": rng.normal(size=(3, 2)), "b": rng.normal(size=(1, 4))}
    out = ema_update(t, o, tau)
    for k in t:
        assert np.array_equal(out[k], tau * t[k] + (1.0 - tau) * o[k])
    # linear: updating towards itself is a no-op
    same = ema_update(t, t, tau)
    assert all(np.allclose(same[k], t[k], rtol=1e-15, atol=1e-15) for k in t)


def test_ema_validation():
    with pytest.raises(ValueError):
        ema_update({"w": np.zeros(1)}, {"w": np.zeros(1)}, 1.5)
    with pytest.raises(nd.DimensionError):
        ema_update({"w": np.zeros(1)}, {"v": np.zeros(1)}, 0.5)
    with pytest.raises(nd.DimensionError):
        ema_update({"w": np.zeros(1)}, {"w": np.zeros(2)}, 0.5)


# ---------------------------------------------------------------- checkpoints


def _ckpt(cell="gru", with_predictor=True):
    theta = init_encoder(TINY_ENC, 0)
    pspec = tiny_pred(cell) if with_predictor else None
    phi = init_predictor(pspec, 1) if with_predictor else None
    return Checkpoint(theta, {k: v * 2 for k, v in theta.items()}, phi, TINY_ENC, pspec,
                      seed=9, step=42)


@pytest.mark.parametrize("cell", CELL_KINDS)
def test_checkpoint_round_trip(tmp_path, cell):
    ck = _ckpt(cell)
    save_checkpoint(tmp_path / "m.ckpt", ck, {"tool": "test"})
    back = load_checkpoint(tmp_path / "m.ckpt")
    assert back.encoder_spec == ck.encoder_spec
    assert back.predictor_spec.cell == cell and back.predictor_spec.hidden == 4
    assert back.seed == 9 and back.step == 42
    assert back.meta["tool"] == "test"
    for group in ("encoder", "target", "predictor"):
        orig, got = getattr(ck, group), getattr(back, group)
        assert list(orig) == list(got)
        for k in orig:
            assert np.array_equal(got[k], orig[k].astype(np.float32).astype(np.float64))


def test_checkpoint_without_predictor(tmp_path):
    save_checkpoint(tmp_path / "s.ckpt", _ckpt(with_predictor=False))
    back = load_checkpoint(tmp_path / "s.ckpt")
    assert back.predictor is None and back.predictor_spec is None


def test_checkpoint_bytes_are_reproducible(tmp_path):
    save_checkpoint(tmp_path / "a.ckpt", _ckpt())
    save_checkpoint(tmp_path / "b.ckpt", _ckpt())
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_corruption_detected(tmp_path):
    save_checkpoint(tmp_path / "m.ckpt", _ckpt())
    raw = (tmp_path / "m.ckpt").read_bytes()
    (tmp_path / "m.ckpt").write_bytes(raw + b"\0\0\0\0")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "m.ckpt")
    (tmp_path / "x.ckpt").write_bytes(b"hello\n")
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.ckpt")
