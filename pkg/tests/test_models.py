"""Architecture specs, initialization, forward/backward, checkpoints."""

import math

import numpy as np
import pytest

from auxglitch import models
from auxglitch.checkpoint import (
    CheckpointError,
    load_checkpoint,
    save_checkpoint,
)
from auxglitch.layers import ShapeError, bce_loss, correlate, sigmoid
from auxglitch.models import (
    ArchitectureSpec,
    backward,
    build,
    equivalent_learned_filters,
    first_layer_activations,
    fixed_filter_bank,
    forward,
    forward_logits,
    output_shape,
    trainable_arrays,
)
from conftest import rel_err


# ---------------------------------------------------------------------------
# independent straight-line reimplementations (oracles, loops only)
# ---------------------------------------------------------------------------

def _loop_corr(x, w, b):
    n_out, n_in, d = w.shape
    l_out = x.shape[1] - d + 1
    out = np.zeros((n_out, l_out))
    for i in range(n_out):
        for t in range(l_out):
            acc = b[i]
            for j in range(n_in):
                for k in range(d):
                    acc += w[i, j, k] * x[j, t + k]
            out[i, t] = acc
    return out


def _loop_pool(x):
    n, length = x.shape
    out = np.zeros((n, (length - 2) // 2 + 1))
    for i in range(n):
        for t in range(out.shape[1]):
            out[i, t] = max(x[i, 2 * t], x[i, 2 * t + 1])
    return out


def _loop_sigmoid(z):
    return 1.0 / (1.0 + math.exp(-z))


def naive_learned_filter(params, sample):
    conv = params.layers[0]
    return _loop_sigmoid(_loop_corr(sample, conv.w, conv.b)[0, 0])


def naive_one_hidden_relu(params, sample):
    conv, lin = params.layers
    hidden = _loop_corr(sample, conv.w, conv.b)[:, 0]
    hidden = np.maximum(hidden, 0.0)
    z = lin.b[0]
    for i in range(hidden.size):
        z += lin.w[0, i] * hidden[i]
    return _loop_sigmoid(z)


def naive_vgg6(params, sample):
    x = sample
    for i, layer in enumerate(params.layers[:-1]):
        x = np.maximum(_loop_corr(x, layer.w, layer.b), 0.0)
        if i in (1, 4):
            x = _loop_pool(x)
    lin = params.layers[-1]
    flat = x.reshape(-1)
    z = lin.b[0]
    for i in range(flat.size):
        z += lin.w[0, i] * flat[i]
    return _loop_sigmoid(z)


def naive_fixed_feature(spec, params, sample):
    bank = fixed_filter_bank(spec.bank_len)
    c = (spec.input_len - spec.bank_len) // 2
    (ff,) = params.layers
    z = ff.b[0]
    for k in range(bank.shape[0]):
        for p in range(spec.n_channels):
            feat = 0.0
            for m in range(spec.bank_len):
                feat += bank[k, m] * sample[p, c + m]
            z += ff.omega[k, p] * feat
    return _loop_sigmoid(z)


# ---------------------------------------------------------------------------
# spec + bank
# ---------------------------------------------------------------------------

class TestArchitectureSpec:
    def test_vgg_input_lengths_enforced(self):
        with pytest.raises(ValueError):
            ArchitectureSpec("vgg6", 4, 100)
        with pytest.raises(ValueError):
            ArchitectureSpec("vgg13", 4, 80)
        ArchitectureSpec("vgg6", 4, 80)
        ArchitectureSpec("vgg13_bn", 4, 200)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            ArchitectureSpec("resnet", 4, 16)

    @pytest.mark.parametrize("kind", models.KINDS)
    def test_serialization_round_trip(self, kind):
        t = {"vgg6": 80, "vgg13": 200, "vgg13_bn": 200}.get(kind, 48)
        spec = ArchitectureSpec(kind, 7, t, hidden_maps=13, width_factor=0.5,
                                fixed_len=8 if kind == "fixed_feature" else None)
        assert ArchitectureSpec.from_dict(spec.to_dict()) == spec


class TestFixedFilterBank:
    def test_step_filter_d4(self):
        bank = fixed_filter_bank(4)
        np.testing.assert_allclose(bank[1], [-0.5, -0.5, 0.5, 0.5])

    @pytest.mark.parametrize("d", [4, 5, 9, 40])
    def test_unit_norms(self, d):
        norms = np.linalg.norm(fixed_filter_bank(d), axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-12)

    def test_impulse_windows_input(self, rng):
        bank = fixed_filter_bank(5)
        x = rng.normal(size=(1, 12))
        out, _ = correlate(x, bank[0][None, None, :], np.zeros(1))
        np.testing.assert_allclose(out[0], x[0, 2:10], atol=1e-12)

    def test_too_short(self):
        with pytest.raises(ValueError):
            fixed_filter_bank(3)

    def test_deterministic(self):
        np.testing.assert_array_equal(fixed_filter_bank(7), fixed_filter_bank(7))


# ---------------------------------------------------------------------------
# init
# ---------------------------------------------------------------------------

class TestBuild:
    def test_same_seed_bit_identical(self):
        spec = ArchitectureSpec("one_hidden", 5, 16, hidden_maps=7)
        a, b = build(spec, 42), build(spec, 42)
        for (_, x), (_, y) in zip(trainable_arrays(a), trainable_arrays(b)):
            np.testing.assert_array_equal(x, y)

    def test_seeds_differ(self):
        spec = ArchitectureSpec("learned_filter", 5, 16)
        a, b = build(spec, 1), build(spec, 2)
        assert not np.array_equal(a.layers[0].w, b.layers[0].w)

    def test_kaiming_bound(self):
        spec = ArchitectureSpec("one_hidden", 6, 20, hidden_maps=40)
        params = build(spec, 0)
        fan_in = 6 * 20
        assert np.abs(params.layers[0].w).max() <= math.sqrt(6.0 / fan_in)
        assert np.abs(params.layers[0].b).max() <= 1.0 / math.sqrt(fan_in)

    def test_batchnorm_init(self):
        spec = ArchitectureSpec("vgg13_bn", 2, 200, width_factor=1 / 128)
        params = build(spec, 3)
        conv = params.layers[0]
        assert np.all(conv.bn_scale == 1.0) and np.all(conv.bn_shift == 0.0)
        assert np.all(conv.bn_mean == 0.0) and np.all(conv.bn_var == 1.0)
        assert not conv.bn_ready


# ---------------------------------------------------------------------------
# forward
# ---------------------------------------------------------------------------

class TestForward:
    @pytest.mark.parametrize("kind,t", [
        ("fixed_feature", 24), ("learned_filter", 24), ("one_hidden", 24),
        ("one_hidden_relu", 24), ("vgg6", 80),
    ])
    def test_zero_weights_give_sigmoid_bias(self, kind, t):
        spec = ArchitectureSpec(kind, 3, t, hidden_maps=4, width_factor=1 / 64)
        params = build(spec, 0)
        for _, arr in trainable_arrays(params):
            arr[:] = 0.0
        params.layers[-1].b[:] = 0.75  # output bias is the only live term
        probs, _ = forward(spec, params, np.zeros((3, 3, t)))
        np.testing.assert_allclose(probs, sigmoid(0.75), atol=1e-12)

    def test_wrong_input_len_rejected(self):
        spec = ArchitectureSpec("vgg6", 3, 80)
        params = build(spec, 0)
        with pytest.raises(ShapeError):
            forward(spec, params, np.zeros((1, 3, 64)))

    @pytest.mark.parametrize("fixed_len", [24, 9])
    def test_learned_filter_subsumes_fixed_feature(self, rng, fixed_len):
        ff_spec = ArchitectureSpec("fixed_feature", 6, 24, fixed_len=fixed_len)
        ff_params = build(ff_spec, 11)
        lf_spec = ArchitectureSpec("learned_filter", 6, 24)
        lf_params = build(lf_spec, 12)
        w0, b = equivalent_learned_filters(ff_spec, ff_params)
        lf_params.layers[0].w[:] = w0
        lf_params.layers[0].b[:] = b
        batch = rng.normal(size=(50, 6, 24))
        p_ff, _ = forward(ff_spec, ff_params, batch)
        p_lf, _ = forward(lf_spec, lf_params, batch)
        np.testing.assert_allclose(p_lf, p_ff, atol=1e-10)

    def test_matches_naive_learned_filter(self, rng):
        spec = ArchitectureSpec("learned_filter", 4, 12)
        params = build(spec, 5)
        batch = rng.normal(size=(3, 4, 12))
        probs, _ = forward(spec, params, batch)
        expected = [naive_learned_filter(params, s) for s in batch]
        np.testing.assert_allclose(probs, expected, atol=1e-10)

    def test_matches_naive_one_hidden_relu(self, rng):
        spec = ArchitectureSpec("one_hidden_relu", 3, 10, hidden_maps=6)
        params = build(spec, 6)
        batch = rng.normal(size=(4, 3, 10))
        probs, _ = forward(spec, params, batch)
        expected = [naive_one_hidden_relu(params, s) for s in batch]
        np.testing.assert_allclose(probs, expected, atol=1e-10)

    def test_matches_naive_vgg6(self, rng):
        spec = ArchitectureSpec("vgg6", 2, 80, width_factor=1 / 64)
        params = build(spec, 7)
        batch = rng.normal(size=(2, 2, 80))
        probs, _ = forward(spec, params, batch)
        expected = [naive_vgg6(params, s) for s in batch]
        np.testing.assert_allclose(probs, expected, atol=1e-10)

    def test_matches_naive_fixed_feature(self, rng):
        spec = ArchitectureSpec("fixed_feature", 4, 16, fixed_len=8)
        params = build(spec, 8)
        batch = rng.normal(size=(3, 4, 16))
        probs, _ = forward(spec, params, batch)
        expected = [naive_fixed_feature(spec, params, s) for s in batch]
        np.testing.assert_allclose(probs, expected, atol=1e-10)

    @pytest.mark.parametrize("kind", ["fixed_feature", "learned_filter", "one_hidden"])
    def test_linear_models_affine_in_input(self, rng, kind):
        spec = ArchitectureSpec(kind, 5, 20, hidden_maps=4)
        params = build(spec, 9)
        x1 = rng.normal(size=(4, 5, 20))
        x2 = rng.normal(size=(4, 5, 20))
        a = 0.3
        z1, _ = forward_logits(spec, params, x1)
        z2, _ = forward_logits(spec, params, x2)
        z_mix, _ = forward_logits(spec, params, a * x1 + (1 - a) * x2)
        np.testing.assert_allclose(z_mix, a * z1 + (1 - a) * z2, atol=1e-8)

    def test_eval_deterministic_and_bn_mode_difference(self, rng):
        spec = ArchitectureSpec("vgg13_bn", 2, 200, width_factor=1 / 128)
        params = build(spec, 10)
        batch = rng.normal(size=(4, 2, 200))
        e1, _ = forward(spec, params, batch, train=False)
        e2, _ = forward(spec, params, batch, train=False)
        np.testing.assert_array_equal(e1, e2)
        t1, _ = forward(spec, params, batch, train=True)
        assert not np.allclose(t1, e1)  # batch stats vs init running stats

    def test_train_equals_eval_without_batchnorm(self, rng):
        spec = ArchitectureSpec("vgg6", 2, 80, width_factor=1 / 64)
        params = build(spec, 10)
        batch = rng.normal(size=(2, 2, 80))
        p_train, _ = forward(spec, params, batch, train=True)
        p_eval, _ = forward(spec, params, batch, train=False)
        np.testing.assert_array_equal(p_train, p_eval)


# ---------------------------------------------------------------------------
# backward
# ---------------------------------------------------------------------------

def _mean_bce(spec, params, batch, labels, train):
    logits, _ = forward_logits(spec, params, batch, train)
    losses, _ = bce_loss(logits, labels)
    return float(losses.mean())


def _grads_for(spec, params, batch, labels, train):
    logits, caches = forward_logits(spec, params, batch, train)
    _, dz = bce_loss(logits, labels)
    return backward(spec, params, caches, dz / len(labels))


def _fd_param_grads(spec, params, batch, labels, train, h=1e-6):
    grads = []
    for name, arr in trainable_arrays(params):
        g = np.zeros_like(arr)
        flat_arr = arr.ravel()
        flat_g = g.ravel()
        for i in range(arr.size):
            orig = flat_arr[i]
            flat_arr[i] = orig + h
            up = _mean_bce(spec, params, batch, labels, train)
            flat_arr[i] = orig - h
            down = _mean_bce(spec, params, batch, labels, train)
            flat_arr[i] = orig
            flat_g[i] = (up - down) / (2 * h)
        grads.append((name, g))
    return grads


class TestBackward:
    def test_zero_loss_grad_gives_zero_param_grads(self, rng):
        spec = ArchitectureSpec("one_hidden_relu", 3, 12, hidden_maps=4)
        params = build(spec, 0)
        batch = rng.normal(size=(4, 3, 12))
        _, caches = forward_logits(spec, params, batch)
        grads = backward(spec, params, caches, np.zeros(4))
        assert all(not arr.any() for _, arr in trainable_arrays(grads))

    def test_fixed_feature_chain_rule(self, rng):
        spec = ArchitectureSpec("fixed_feature", 4, 16, fixed_len=6)
        params = build(spec, 1)
        batch = rng.normal(size=(1, 4, 16))
        labels = np.array([1.0])
        logits, caches = forward_logits(spec, params, batch)
        _, dz = bce_loss(logits, labels)
        grads = backward(spec, params, caches, dz)
        np.testing.assert_allclose(
            grads.layers[0].omega, dz[0] * caches.blocks[0].features[0], atol=1e-12)

    def test_cache_kind_mismatch(self, rng):
        spec_a = ArchitectureSpec("learned_filter", 3, 12)
        spec_b = ArchitectureSpec("one_hidden", 3, 12, hidden_maps=2)
        params_a = build(spec_a, 0)
        _, caches = forward_logits(spec_a, params_a, rng.normal(size=(2, 3, 12)))
        with pytest.raises(ValueError):
            backward(spec_b, build(spec_b, 0), caches, np.zeros(2))

    @pytest.mark.parametrize("kind,t,kw", [
        ("fixed_feature", 16, {"fixed_len": 6}),
        ("learned_filter", 16, {}),
        ("one_hidden", 16, {"hidden_maps": 5}),
        ("one_hidden_relu", 16, {"hidden_maps": 5}),
        ("vgg6", 80, {"width_factor": 1 / 64}),
    ])
    def test_matches_finite_differences_per_element(self, kind, t, kw):
        r = np.random.default_rng(17)
        spec = ArchitectureSpec(kind, 3, t, **kw)
        params = build(spec, 23)
        batch = r.normal(size=(2, 3, t))
        labels = r.choice([-1.0, 1.0], size=2)
        grads = _grads_for(spec, params, batch, labels, train=True)
        fd = _fd_param_grads(spec, params, batch, labels, train=True)
        for (name, g), (_, gf) in zip(trainable_arrays(grads), fd):
            assert rel_err(gf, g) < 1e-4, name

    @pytest.mark.parametrize("kind", ["vgg13", "vgg13_bn"])
    def test_matches_finite_differences_directional(self, kind):
        r = np.random.default_rng(29)
        spec = ArchitectureSpec(kind, 2, 200, width_factor=1 / 128)
        params = build(spec, 31)
        batch = r.normal(size=(2, 2, 200))
        labels = np.array([1.0, -1.0])
        grads = _grads_for(spec, params, batch, labels, train=True)
        arrays = [a for _, a in trainable_arrays(params)]
        g_arrays = [a for _, a in trainable_arrays(grads)]
        h = 1e-6
        for _ in range(10):
            direction = [r.normal(size=a.shape) for a in arrays]
            analytic = sum(float((g * d).sum()) for g, d in zip(g_arrays, direction))
            for a, d in zip(arrays, direction):
                a += h * d
            up = _mean_bce(spec, params, batch, labels, train=True)
            for a, d in zip(arrays, direction):
                a -= 2 * h * d
            down = _mean_bce(spec, params, batch, labels, train=True)
            for a, d in zip(arrays, direction):
                a += h * d
            fd = (up - down) / (2 * h)
            assert rel_err(fd, analytic) < 1e-4


# ---------------------------------------------------------------------------
# shapes
# ---------------------------------------------------------------------------

class TestOutputShape:
    def test_vgg6_trace(self):
        rows = {r.label: r for r in output_shape(ArchitectureSpec("vgg6", 1000, 80))}
        assert (rows["pool2"].maps, rows["pool2"].length) == (256, 16)
        assert rows["flatten"].length == 4096
        assert rows["fc1"].length == 1

    def test_vgg13_trace(self):
        rows = {r.label: r for r in output_shape(ArchitectureSpec("vgg13", 1000, 200))}
        assert (rows["pool4"].maps, rows["pool4"].length) == (512, 7)
        assert rows["flatten"].length == 3584
        assert rows["fc1"].length == 4096
        assert rows["fc2"].length == 1

    @pytest.mark.parametrize("t", [8, 30, 100])
    def test_learned_filter_single_scalar(self, t):
        rows = output_shape(ArchitectureSpec("learned_filter", 10, t))
        assert (rows[-1].maps, rows[-1].length) == (1, 1)


class TestFirstLayerActivations:
    def test_flat_relu_maps(self, rng):
        spec = ArchitectureSpec("one_hidden_relu", 3, 10, hidden_maps=4)
        params = build(spec, 0)
        acts = first_layer_activations(spec, params, rng.normal(size=(5, 3, 10)))
        assert acts.shape == (5, 4)
        assert np.all(acts >= 0)

    def test_fixed_feature_has_none(self):
        spec = ArchitectureSpec("fixed_feature", 3, 10, fixed_len=6)
        assert first_layer_activations(spec, build(spec, 0),
                                       np.zeros((1, 3, 10))) is None


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

class TestCheckpoint:
    def test_round_trip_reproduces_eval_outputs(self, rng, tmp_path):
        spec = ArchitectureSpec("vgg13_bn", 2, 200, width_factor=1 / 128)
        params = build(spec, 41)
        batch = rng.normal(size=(3, 2, 200))
        before, _ = forward(spec, params, batch, train=False)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, spec, params,
                        norm_stats={"mean": [0.0, 0.0], "std": [1.0, 1.0]},
                        penalty_state={"u": 0.25, "applied": [0.1, 0.2]})
        loaded = load_checkpoint(path)
        assert loaded.spec == spec
        assert loaded.penalty_state["u"] == 0.25
        after, _ = forward(loaded.spec, loaded.params, batch, train=False)
        np.testing.assert_allclose(after, before, rtol=1e-5, atol=1e-6)

    def test_exact_zeros_survive(self, tmp_path):
        spec = ArchitectureSpec("learned_filter", 4, 8)
        params = build(spec, 0)
        params.layers[0].w[0, 1, :] = 0.0
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, spec, params)
        loaded = load_checkpoint(path)
        assert np.all(loaded.params.layers[0].w[0, 1, :] == 0.0)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.ckpt"
        path.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_truncated(self, tmp_path):
        spec = ArchitectureSpec("learned_filter", 4, 8)
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, spec, build(spec, 0))
        data = path.read_bytes()
        path.write_bytes(data[: len(data) - 7])
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
