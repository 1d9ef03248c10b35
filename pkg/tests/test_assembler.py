import numpy as np
import pytest

from manualpa import tensor as T
from manualpa.alignment import perm_from_order
from manualpa.assembler import (
    Decoder,
    PoseConfig,
    PoseHead,
    PoseModel,
    attention_by_step,
    permute_pe,
    quat_rotation,
    sinusoidal_pe,
)
from manualpa.geometry import quat_to_matrix
from manualpa.synthetic import make_sample
from oracles import gradcheck, leaf

# positional codes ----------------------------------------------------------------


def test_position_zero():
    row = sinusoidal_pe(1, 8, positions=[0])[0]
    np.testing.assert_array_equal(row[0::2], 0)
    np.testing.assert_array_equal(row[1::2], 1)


def test_first_sine_channel_closed_form():
    assert sinusoidal_pe(3, 64)[0, 0] == pytest.approx(0.841471, abs=1e-6)


def test_rows_distinct_and_bounded():
    phi = sinusoidal_pe(20, 64)
    assert np.abs(phi).max() <= 1
    for x in range(20):
        for y in range(x + 1, 20):
            assert not np.array_equal(phi[x], phi[y])


def test_odd_dim_rejected():
    with pytest.raises(ValueError):
        sinusoidal_pe(3, 7)


def test_permute_identity_and_swap():
    phi = sinusoidal_pe(4, 8)
    np.testing.assert_array_equal(permute_pe(phi, np.eye(4, dtype=int)), phi)
    swapped = permute_pe(phi, perm_from_order([1, 0, 2, 3]))
    np.testing.assert_array_equal(swapped[[1, 0, 2, 3]], phi)


def test_permute_matches_gather_oracle():
    rng = np.random.default_rng(0)
    phi = sinusoidal_pe(5, 8)
    for _ in range(10):
        sigma = rng.permutation(5)
        step_of = np.argsort(sigma)
        np.testing.assert_array_equal(permute_pe(phi, perm_from_order(sigma)), phi[step_of])


def test_permute_rejects_non_permutation():
    with pytest.raises(ValueError):
        permute_pe(sinusoidal_pe(2, 4), np.ones((2, 2)))


# decoder ---------------------------------------------------------------------


def test_singleton_attention_is_one():
    rng = np.random.default_rng(1)
    dec = Decoder(8, 2, 16, 1, rng)
    _, maps = dec(rng.normal(size=(1, 8)), rng.normal(size=(1, 8)))
    assert maps[0].shape == (1, 1) and maps[0][0, 0] == 1.0


def test_attention_rows_sum_to_one():
    rng = np.random.default_rng(2)
    dec = Decoder(16, 4, 32, 3, rng)
    _, maps = dec(rng.normal(size=(5, 16)), rng.normal(size=(5 * 6, 16)))
    for m in maps:
        np.testing.assert_allclose(m.sum(axis=-1), 1, atol=1e-9)


def test_zero_layers_is_identity():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(4, 16))
    out, maps = Decoder(16, 4, 32, 0, rng)(x, rng.normal(size=(8, 16)))
    np.testing.assert_array_equal(out.data, x)
    assert maps == []


def test_part_permutation_equivariance():
    rng = np.random.default_rng(4)
    dec = Decoder(16, 4, 32, 2, rng)
    x, mem = rng.normal(size=(6, 16)), rng.normal(size=(12, 16))
    perm = rng.permutation(6)
    a, _ = dec(x, mem)
    b, _ = dec(x[perm], mem)
    np.testing.assert_allclose(b.data, a.data[perm], atol=1e-9)


def test_model_equivariance_with_codes():
    s = make_sample("chair", 4)
    model = PoseModel(PoseConfig(dim=16, heads=2, ffn=32, layers=2), seed=0)
    n = s.n_parts
    perm = perm_from_order(s.gt_order)
    shuffle = np.random.default_rng(5).permutation(n)
    a = model(s.furniture.parts[None], s.diffs[None], perm[None])
    b = model(s.furniture.parts[shuffle][None], s.diffs[None], perm[shuffle][None])
    np.testing.assert_allclose(b.q.data[0], a.q.data[0][shuffle], atol=1e-9)
    np.testing.assert_allclose(b.t.data[0], a.t.data[0][shuffle], atol=1e-9)


def test_attention_mass_per_step():
    maps = [np.full((3, 3 * 4), 1 / 12), np.eye(3).repeat(4, axis=1) / 4]
    np.testing.assert_allclose(attention_by_step(maps, 3), 0.5 * np.eye(3) + 1 / 6)


# pose head -------------------------------------------------------------------


def test_zero_weights_give_identity_rotation():
    rng = np.random.default_rng(6)
    head = PoseHead(16, rng)
    head.trans.weight.data[:] = 0
    head.trans.bias.data = np.array([0.1, -0.2, 0.3])
    q, t = head(rng.normal(size=(5, 16)))
    np.testing.assert_array_equal(q.data, np.tile([1.0, 0, 0, 0], (5, 1)))
    np.testing.assert_array_equal(t.data, np.tile([0.1, -0.2, 0.3], (5, 1)))


def test_outputs_unit_quaternions():
    rng = np.random.default_rng(7)
    head = PoseHead(16, rng)
    head.quat.weight.data = rng.normal(size=(16, 4))
    q, _ = head(rng.normal(size=(9, 16)))
    np.testing.assert_allclose(np.linalg.norm(q.data, axis=-1), 1, atol=1e-9)


def test_zero_quaternion_guarded():
    head = PoseHead(4, np.random.default_rng(8))
    head.quat.bias.data = np.zeros(4)
    with pytest.warns(RuntimeWarning):
        q, _ = head(np.ones((1, 4)))
    assert np.isfinite(q.data).all()


def test_quat_rotation_matches_numpy():
    rng = np.random.default_rng(9)
    q = rng.normal(size=(6, 4))
    q /= np.linalg.norm(q, axis=-1, keepdims=True)
    np.testing.assert_allclose(quat_rotation(q).data, quat_to_matrix(q), atol=1e-15)


@pytest.mark.parametrize("config", range(20))
def test_pose_head_gradcheck(config):
    rng = np.random.default_rng(300 + config)
    head = PoseHead(8, rng)
    head.quat.weight.data = rng.normal(scale=0.5, size=(8, 4))
    x = leaf(rng, 3, 8)
    wq, wt = rng.normal(size=(3, 4)), rng.normal(size=(3, 3))

    def loss():
        q, t = head(x)
        return T.tsum(q * wq) + T.tsum(t * wt) + T.tsum(quat_rotation(q) * 0.3)

    leaves = [x, head.quat.weight, head.quat.bias, head.trans.weight, head.norm.gain]
    assert gradcheck(loss, leaves) < 1e-4


@pytest.mark.parametrize("config", range(20))
def test_decoder_gradcheck(config):
    rng = np.random.default_rng(400 + config)
    dec = Decoder(8, 2, 12, 2, rng)
    x, mem = leaf(rng, 3, 8), leaf(rng, 6, 8)
    w = rng.normal(size=(3, 8))
    layer = dec.layers[-1]
    leaves = [x, mem, layer.cross_attn.q.weight, layer.self_attn.v.weight, layer.ffn.fc1.weight, layer.norm2.gain]

    def loss():
        out, _ = dec(x, mem)
        return T.tsum(out * w)

    assert gradcheck(loss, leaves) < 1e-4


def test_full_pipeline_forward_is_deterministic():
    s = make_sample("table", 2)
    perm = perm_from_order(s.gt_order)[None]
    outs = []
    for _ in range(2):
        model = PoseModel(PoseConfig(dim=16, heads=2, ffn=32, layers=2), seed=3)
        p = model(s.furniture.parts[None], s.diffs[None], perm)
        outs.append(p.q.data.tobytes() + p.t.data.tobytes() + b"".join(m.tobytes() for m in p.attention))
    assert outs[0] == outs[1]
