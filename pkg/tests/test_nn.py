"""Compute-core checks: forward semantics, finite-difference gradient
agreement for every layer kind, mask determinism, adapter identities."""

import numpy as np
import pytest

from attribens import (
    LayerKind,
    LayerSpec,
    Mode,
    build_mlp,
    build_tiny_transformer,
    init_params,
    sample_mask,
)
from attribens import nn
from attribens.errors import MaskError, ShapeError
from attribens.grads import (
    ModelView,
    OutputFn,
    logits_for,
    output_value_and_dlogits,
    per_sample_grad,
    per_sample_grads,
)


def fd_gradient(value_fn, params, step=1e-5):
    grad = np.zeros_like(params)
    for i in range(params.size):
        up = params.copy()
        up[i] += step
        down = params.copy()
        down[i] -= step
        grad[i] = (value_fn(up) - value_fn(down)) / (2 * step)
    return grad


def rel_err(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def margin_value(spec, x, y, mask=None, adapters=None):
    def value(params):
        view = ModelView(spec, params, mask=mask, adapters=adapters)
        logits = logits_for(view, x)
        val, _ = output_value_and_dlogits(logits, y, OutputFn.MARGIN,
                                          spec.is_sequence_model())
        return val

    return value


def test_forward_affine_arithmetic():
    spec_layers = [LayerSpec(LayerKind.LINEAR, "fc1", 1, 1)]
    params = np.array([2.0, 1.0])  # W=[[2]], b=[1]
    out = nn.forward(spec_layers, params, np.array([[3.0]]))
    assert out.shape == (1, 1)
    assert out[0, 0] == 7.0


def test_masked_eval_identity_mask_matches_eval_exactly():
    spec = build_mlp(6, [8, 5], 3, dropout_rate=0.3)
    params = init_params(spec, seed=0).data
    x = np.random.default_rng(1).normal(size=(4, 6))
    mask = sample_mask(5, 1, 0.0, spec.dropout_widths())
    plain = nn.forward(spec.layers, params, x, mode=Mode.EVAL)
    masked = nn.forward(spec.layers, params, x, mode=Mode.MASKED_EVAL, mask=mask)
    assert np.array_equal(plain, masked)


def test_zero_initialized_adapter_is_identity():
    from attribens import attach_lora, default_lora_targets

    spec = build_tiny_transformer(9, 6, 8, 2, 2, 16, 0.1)
    pv = init_params(spec, seed=3)
    adapters = attach_lora(spec, pv, default_lora_targets(spec), rank=2,
                           alpha=4.0, seed=11)
    tokens = np.array([1, 3, 5, 0, 8, 2])
    plain = nn.forward(spec.layers, pv.data, tokens)
    adapted = nn.forward(spec.layers, pv.data, tokens, adapters=adapters)
    assert np.array_equal(plain, adapted)


def test_mask_requires_masked_eval_mode():
    spec = build_mlp(4, [4], 2, dropout_rate=0.1)
    params = init_params(spec, seed=0).data
    mask = sample_mask(1, 1, 0.1, spec.dropout_widths())
    with pytest.raises(MaskError):
        nn.forward(spec.layers, params, np.zeros((1, 4)), mode=Mode.MASKED_EVAL)
    with pytest.raises(MaskError):
        nn.forward(spec.layers, params, np.zeros((1, 4)), mode=Mode.EVAL, mask=mask)


def test_forward_shape_mismatch():
    spec = build_mlp(4, [4], 2, dropout_rate=0.0)
    params = init_params(spec, seed=0).data
    with pytest.raises(ShapeError):
        nn.forward(spec.layers, params, np.zeros((2, 5)))


def test_mask_unknown_layer_name():
    spec = build_mlp(4, [4], 2, dropout_rate=0.1)
    params = init_params(spec, seed=0).data
    bad = sample_mask(1, 1, 0.1, {"nonexistent": 4})
    with pytest.raises(MaskError):
        nn.forward(spec.layers, params, np.zeros((1, 4)), mode=Mode.MASKED_EVAL,
                   mask=bad)


# --- sample_mask contracts


def test_mask_rate_zero_all_ones():
    for seed in (0, 7, 123):
        mask = sample_mask(seed, 4, 0.0, {"drop1": 16})
        assert np.all(mask.bits["drop1"] == 1.0)


def test_mask_determinism():
    a = sample_mask(11, 2, 0.3, {"drop1": 64, "drop2": 32})
    b = sample_mask(11, 2, 0.3, {"drop2": 32, "drop1": 64})
    for name in a.bits:
        assert np.array_equal(a.bits[name], b.bits[name])
    c = sample_mask(11, 3, 0.3, {"drop1": 64, "drop2": 32})
    assert any(not np.array_equal(a.bits[n], c.bits[n]) for n in a.bits)


def test_mask_kept_fraction_concentration():
    # Binomial(10000, 0.9): 4 sigma is ~0.012, so [0.88, 0.92] is safe.
    mask = sample_mask(5, 1, 0.1, {"wide": 10_000})
    kept = mask.bits["wide"].mean()
    assert 0.88 <= kept <= 0.92


def test_mask_rate_out_of_range():
    with pytest.raises(ValueError):
        sample_mask(0, 1, 1.0, {"drop1": 4})


def test_inverted_dropout_expectation_matches_eval():
    # Single linear+dropout stack: masked output averaged over many masks
    # approaches the eval output, unit by unit, within 3 sigma.
    layers = [LayerSpec(LayerKind.LINEAR, "fc", 3, 6),
              LayerSpec(LayerKind.DROPOUT, "drop", 6, 6, dropout_rate=0.2)]
    rng = np.random.default_rng(8)
    params = rng.normal(size=3 * 6 + 6)
    x = rng.normal(size=(1, 3))
    eval_out = nn.forward(layers, params, x, mode=Mode.EVAL)[0]
    n_masks = 10_000
    acc = np.zeros(6)
    for d in range(n_masks):
        mask = sample_mask(99, d, 0.2, {"drop": 6})
        acc += nn.forward(layers, params, x, mode=Mode.MASKED_EVAL, mask=mask)[0]
    mean = acc / n_masks
    sigma = np.abs(eval_out) * np.sqrt(0.2 / 0.8) / np.sqrt(n_masks)
    assert np.all(np.abs(mean - eval_out) <= 3.0 * sigma + 1e-9)


# --- gradient checks


def test_gradcheck_flat_stack_all_kinds():
    # Linear, ReLU, Dropout (fixed mask), LayerNorm, Softmax mid-stack.
    layers = [
        LayerSpec(LayerKind.LINEAR, "fc1", 5, 7),
        LayerSpec(LayerKind.RELU, "relu1", 7, 7),
        LayerSpec(LayerKind.DROPOUT, "drop1", 7, 7, dropout_rate=0.25),
        LayerSpec(LayerKind.LAYERNORM, "ln1", 7, 7),
        LayerSpec(LayerKind.SOFTMAX, "sm1", 7, 7),
        LayerSpec(LayerKind.LINEAR, "fc2", 7, 3),
    ]
    from attribens.models import Arch, ModelSpec

    spec = ModelSpec(Arch.MLP, layers, 5, 3)
    rng = np.random.default_rng(0)
    for trial in range(6):
        params = init_params(spec, seed=trial).data
        x = rng.normal(size=5)
        y = int(rng.integers(0, 3))
        mask = sample_mask(trial, 1, 0.25, spec.dropout_widths())
        view = ModelView(spec, params, mask=mask)
        for fn in (OutputFn.LOSS, OutputFn.MARGIN, OutputFn.LOG_LIKELIHOOD):
            grad = per_sample_grad(view, x, y, fn)

            def value(p, fn=fn):
                v = ModelView(spec, p, mask=mask)
                val, _ = output_value_and_dlogits(logits_for(v, x), y, fn, False)
                return val

            assert rel_err(grad, fd_gradient(value, params)) < 1e-4


def test_gradcheck_transformer():
    spec = build_tiny_transformer(7, 5, 8, 2, 1, 12, 0.1)
    rng = np.random.default_rng(3)
    for trial in range(3):
        params = init_params(spec, seed=trial + 10).data
        tokens = rng.integers(0, 7, size=5)
        targets = rng.integers(0, 7, size=5)
        view = ModelView(spec, params)
        grad = per_sample_grad(view, tokens, targets, OutputFn.LOSS)
        value = margin_value(spec, tokens, targets)

        def loss_value(p):
            v = ModelView(spec, p)
            val, _ = output_value_and_dlogits(logits_for(v, tokens), targets,
                                              OutputFn.LOSS, True)
            return val

        assert rel_err(grad, fd_gradient(loss_value, params)) < 1e-4


def test_gradcheck_adapter_restricted():
    from attribens import attach_lora, default_lora_targets

    spec = build_tiny_transformer(6, 4, 8, 2, 1, 8, 0.0)
    pv = init_params(spec, seed=2)
    adapters = attach_lora(spec, pv, default_lora_targets(spec), rank=2,
                           alpha=2.0, seed=5)
    rng = np.random.default_rng(0)
    for ad in adapters:
        ad.B[:] = rng.normal(0, 0.1, ad.B.shape)
        ad.bias_delta[:] = rng.normal(0, 0.05, ad.bias_delta.shape)
    tokens = np.array([1, 5, 0, 3])
    targets = np.array([5, 0, 3, 2])
    view = ModelView(spec, pv.data, adapters=adapters, adapter_grads_only=True)
    grad = per_sample_grad(view, tokens, targets, OutputFn.MARGIN)

    flat0 = np.concatenate([np.concatenate([a.A.ravel(), a.B.ravel(), a.bias_delta])
                            for a in adapters])

    def value(flat):
        clones = []
        offset = 0
        for a in adapters:
            clone = nn.LoraAdapter(a.target, a.rank, a.alpha, a.A.copy(),
                                   a.B.copy(), a.bias_delta.copy())
            clone.A[:] = flat[offset : offset + a.A.size].reshape(a.A.shape)
            offset += a.A.size
            clone.B[:] = flat[offset : offset + a.B.size].reshape(a.B.shape)
            offset += a.B.size
            clone.bias_delta[:] = flat[offset : offset + a.bias_delta.size]
            offset += a.bias_delta.size
            clones.append(clone)
        v = ModelView(spec, pv.data, adapters=clones)
        val, _ = output_value_and_dlogits(logits_for(v, tokens), targets,
                                          OutputFn.MARGIN, True)
        return val

    assert rel_err(grad, fd_gradient(value, flat0)) < 1e-4


def test_grad_with_identity_mask_equals_eval_grad():
    spec = build_mlp(5, [6, 4], 3, dropout_rate=0.2)
    params = init_params(spec, seed=1).data
    x = np.random.default_rng(2).normal(size=5)
    mask = sample_mask(0, 1, 0.0, spec.dropout_widths())
    g_eval = per_sample_grad(ModelView(spec, params), x, 1, OutputFn.LOSS)
    g_mask = per_sample_grad(ModelView(spec, params, mask=mask), x, 1, OutputFn.LOSS)
    assert np.array_equal(g_eval, g_mask)


def test_margin_bias_antisymmetry_on_zero_weights():
    # Zero-weight 2-class linear model, symmetric input: the margin's bias
    # gradient is antisymmetric across the two logits.
    layers = [LayerSpec(LayerKind.LINEAR, "fc", 4, 2)]
    from attribens.models import Arch, ModelSpec

    spec = ModelSpec(Arch.MLP, layers, 4, 2)
    params = np.zeros(4 * 2 + 2)
    x = np.ones(4)
    grad = per_sample_grad(ModelView(spec, params), x, 0, OutputFn.MARGIN)
    bias_grad = grad[-2:]
    assert bias_grad[0] == pytest.approx(-bias_grad[1])


def test_batched_per_sample_grads_match_loop():
    spec = build_mlp(6, [5], 3, dropout_rate=0.1)
    params = init_params(spec, seed=4).data
    rng = np.random.default_rng(9)
    X = rng.normal(size=(7, 6))
    Y = rng.integers(0, 3, size=7)
    mask = sample_mask(3, 2, 0.1, spec.dropout_widths())
    view = ModelView(spec, params, mask=mask)
    batched = per_sample_grads(view, X, Y, OutputFn.MARGIN, chunk=3)
    looped = np.stack([per_sample_grad(view, X[i], Y[i], OutputFn.MARGIN)
                       for i in range(7)])
    assert np.allclose(batched, looped, rtol=0, atol=1e-12)


def test_jvp_matches_directional_finite_difference():
    spec = build_tiny_transformer(6, 4, 8, 2, 1, 8, 0.0)
    params = init_params(spec, seed=6).data
    tokens = np.array([2, 4, 1, 5])
    _, trace = nn.run_forward_trace(spec.layers, params, tokens)
    v = np.random.default_rng(12).normal(size=params.size)
    tangent = nn.jvp_outputs(spec.layers, params, trace, v)
    h = 1e-6
    up = nn.forward(spec.layers, params + h * v, tokens)
    down = nn.forward(spec.layers, params - h * v, tokens)
    fd = (up - down) / (2 * h)
    assert rel_err(tangent, fd) < 1e-6
