import math

import numpy as np
import pytest

from fedpia.errors import DataError, ShapeError
from fedpia.model import (
    AdapterLayer,
    AdapterStack,
    Backbone,
    ClassifierHead,
    adamw_step,
    forward,
    init_adapters,
    init_backbone,
    init_head,
    init_model,
    init_optimizer,
    load_checkpoint,
    loss_and_backward,
    lr_at,
    save_checkpoint,
    trainable_params,
)
from fedpia.numerics import Rng, relu
from fedpia.verify import finite_difference_grads


def tiny_model(seed=0, width=5, bottleneck=2, depth=2, num_classes=3, input_dim=4, std=0.5):
    return init_model(
        Rng(seed), width, bottleneck, depth, num_classes,
        input_dim=input_dim, adapter_std=std,
    )


class TestInit:
    def test_shared_seed_identical_backbones(self):
        b1 = init_backbone(Rng(7).child("backbone"), 4, 8, 2)
        b2 = init_backbone(Rng(7).child("backbone"), 4, 8, 2)
        for w1, w2 in zip(b1.weights, b2.weights):
            assert np.array_equal(w1, w2)

    def test_zero_std_adapter_is_residual_identity(self):
        backbone, adapters, head = tiny_model(std=0.0)
        x = Rng(1).child("x").normal((6, 4))
        _, cache = forward(backbone, adapters, head, x)
        for lc in cache.layers:
            assert np.array_equal(lc.layer_out, lc.adapter_in)

    def test_shape_contract(self):
        stack = init_adapters(Rng(0).child("a"), width=8, bottleneck=2, depth=2)
        assert len(stack.layers) == 2
        for l in stack.layers:
            assert l.w_down.shape == (8, 2)
            assert l.w_up.shape == (2, 8)
            assert l.b_down.shape == (2,)
            assert l.b_up.shape == (8,)

    def test_invalid_dims(self):
        with pytest.raises(ShapeError):
            init_adapters(Rng(0), width=2, bottleneck=4, depth=1)
        with pytest.raises(ShapeError):
            init_backbone(Rng(0), 4, 8, 0)

    def test_backbone_frozen(self):
        backbone, _, _ = tiny_model()
        with pytest.raises(ValueError):
            backbone.weights[0][0, 0] = 1.0


class TestForward:
    def test_linear_identity_backbone_passthrough(self):
        h = 4
        backbone = Backbone(
            weights=[np.eye(h)], biases=[np.zeros(h)], input_dim=h, width=h,
            activations=["linear"],
        )
        adapters = AdapterStack(
            [AdapterLayer(np.zeros((h, 2)), np.zeros(2), np.zeros((2, h)), np.zeros(h))]
        )
        head = ClassifierHead(w=Rng(3).child("h").normal((h, 3)), b=np.ones(3))
        x = Rng(3).child("x").normal((5, h))
        logits, _ = forward(backbone, adapters, head, x)
        assert np.array_equal(logits, x @ head.w + head.b)

    def test_identical_rows_give_identical_logits(self):
        backbone, adapters, head = tiny_model()
        row = Rng(5).child("row").normal((1, 4))
        batch = np.tile(row, (4, 1))
        logits, _ = forward(backbone, adapters, head, batch)
        assert np.array_equal(logits, np.tile(logits[:1], (4, 1)))

    def test_scalar_loop_oracle(self):
        backbone, adapters, head = tiny_model(seed=11, depth=2)
        x = Rng(11).child("probe").normal((3, 4))
        logits, _ = forward(backbone, adapters, head, x)
        for n in range(3):
            z = x[n].copy()
            for bw, bb, ad in zip(backbone.weights, backbone.biases, adapters.layers):
                s = np.array([bb[j] + sum(z[i] * bw[i, j] for i in range(len(z)))
                              for j in range(bw.shape[1])])
                t = np.tanh(s)
                u = np.array([ad.b_down[j] + sum(t[i] * ad.w_down[i, j] for i in range(len(t)))
                              for j in range(ad.w_down.shape[1])])
                r = np.maximum(u, 0.0)
                z = np.array([t[j] + ad.b_up[j] + sum(r[i] * ad.w_up[i, j] for i in range(len(r)))
                              for j in range(ad.w_up.shape[1])])
            ref = np.array([head.b[c] + sum(z[i] * head.w[i, c] for i in range(len(z)))
                            for c in range(head.w.shape[1])])
            assert np.abs(logits[n] - ref).max() < 1e-10

    def test_determinism(self):
        backbone, adapters, head = tiny_model()
        x = Rng(13).child("x").normal((6, 4))
        a, _ = forward(backbone, adapters, head, x)
        b, _ = forward(backbone, adapters, head, x)
        assert np.array_equal(a, b)

    def test_residual_form_with_zero_up_projection(self):
        backbone, adapters, head = tiny_model(std=0.5)
        for l in adapters.layers:
            l.w_up = np.zeros_like(l.w_up)
            l.b_up = Rng(17).child("bu").normal((l.b_up.size, 1))[:, 0]
        x = Rng(17).child("x").normal((6, 4))
        _, cache = forward(backbone, adapters, head, x)
        for lc, l in zip(cache.layers, adapters.layers):
            assert np.abs(lc.layer_out - (lc.adapter_in + l.b_up)).max() < 1e-15

    def test_shape_mismatch(self):
        backbone, adapters, head = tiny_model()
        with pytest.raises(ShapeError):
            forward(backbone, adapters, head, np.zeros((3, 9)))


class TestLoss:
    def test_uniform_logits_single_label(self):
        backbone, adapters, head = tiny_model(num_classes=4)
        logits = np.zeros((6, 4))
        _, cache = forward(backbone, adapters, head, np.zeros((6, 4)))
        loss, _ = loss_and_backward(
            logits, np.array([0, 1, 2, 3, 0, 1]), cache, adapters, head
        )
        assert loss == pytest.approx(math.log(4), abs=1e-12)

    def test_multilabel_zero_logits_zero_targets(self):
        backbone, adapters, head = tiny_model()
        logits = np.zeros((5, 3))
        _, cache = forward(backbone, adapters, head, np.zeros((5, 4)))
        loss, _ = loss_and_backward(logits, np.zeros((5, 3)), cache, adapters, head)
        assert loss == pytest.approx(math.log(2), abs=1e-12)

    def test_label_out_of_range(self):
        backbone, adapters, head = tiny_model(num_classes=3)
        x = np.zeros((2, 4))
        logits, cache = forward(backbone, adapters, head, x)
        with pytest.raises(DataError):
            loss_and_backward(logits, np.array([0, 3]), cache, adapters, head)

    def test_finite_difference_oracle_single_label(self):
        backbone, adapters, head = tiny_model(seed=19, width=4, depth=1, input_dim=3)
        x = Rng(19).child("x").normal((4, 3))
        y = Rng(19).child("y").integers(0, 3, 4)
        logits, cache = forward(backbone, adapters, head, x)
        _, analytic = loss_and_backward(logits, y, cache, adapters, head)
        numeric = finite_difference_grads(backbone, adapters, head, x, y)
        for name, num in numeric.items():
            rel = np.abs(analytic[name] - num) / np.maximum(1.0, np.abs(num))
            assert rel.max() < 1e-3, name

    def test_finite_difference_oracle_multilabel(self):
        backbone, adapters, head = tiny_model(seed=23, width=4, depth=2, input_dim=3)
        x = Rng(23).child("x").normal((4, 3))
        y = (Rng(23).child("y").normal((4, 3)) > 0).astype(np.float64)
        logits, cache = forward(backbone, adapters, head, x)
        _, analytic = loss_and_backward(logits, y, cache, adapters, head)
        numeric = finite_difference_grads(backbone, adapters, head, x, y)
        for name, num in numeric.items():
            rel = np.abs(analytic[name] - num) / np.maximum(1.0, np.abs(num))
            assert rel.max() < 1e-3, name

    def test_backbone_grads_when_thawed(self):
        backbone, adapters, head = tiny_model()
        thawed = backbone.thaw()
        x = Rng(29).child("x").normal((4, 4))
        logits, cache = forward(thawed, adapters, head, x)
        _, grads = loss_and_backward(
            logits, np.array([0, 1, 2, 0]), cache, adapters, head, backbone=thawed
        )
        assert "backbone.0.w" in grads and "backbone.1.w" in grads


class TestAdamW:
    def test_lr_zero_keeps_params(self):
        backbone, adapters, head = tiny_model()
        params = trainable_params(adapters, head)
        before = {k: v.copy() for k, v in params.items()}
        state = init_optimizer(params, weight_decay=0.01)
        grads = {k: np.ones_like(v) for k, v in params.items()}
        adamw_step(state, params, grads, lr=0.0)
        for k in params:
            assert np.array_equal(params[k], before[k])

    def test_first_step_is_bias_corrected_sign_step(self):
        p = {"w": np.array([[1.0, -2.0]])}
        state = init_optimizer(p, weight_decay=0.0)
        g = {"w": np.array([[0.3, -0.7]])}
        adamw_step(state, p, g, lr=0.05)
        delta = np.array([[1.0, -2.0]]) - p["w"]
        assert np.abs(delta - 0.05 * np.sign(g["w"])).max() < 1e-6

    def test_pure_decay(self):
        p = {"w": np.array([2.0, -4.0])}
        state = init_optimizer(p, weight_decay=0.01)
        g = {"w": np.zeros(2)}
        adamw_step(state, p, g, lr=0.1)
        assert np.abs(p["w"] - np.array([2.0, -4.0]) * (1 - 0.001)).max() < 1e-15

    def test_step_counter_increases(self):
        p = {"w": np.zeros(2)}
        state = init_optimizer(p)
        for expected in (1, 2, 3):
            adamw_step(state, p, {"w": np.ones(2)}, lr=0.01)
            assert state.step == expected


class TestLrSchedule:
    def test_ramp_start(self):
        assert lr_at(0, 100, 1e-4, 0.1) == 0.0

    def test_warmup_end_hits_base_lr(self):
        assert lr_at(10, 100, 1e-4, 0.1) == pytest.approx(1e-4, abs=1e-18)

    def test_decay_end(self):
        assert lr_at(100, 100, 1e-4, 0.1) == 0.0

    def test_linear_interior(self):
        assert lr_at(55, 100, 1e-4, 0.1) == pytest.approx(0.5 * 1e-4, rel=1e-12)

    def test_no_warmup(self):
        assert lr_at(0, 100, 1e-4, 0.0) == 1e-4

    def test_validation(self):
        with pytest.raises(ValueError):
            lr_at(101, 100, 1e-4, 0.1)
        with pytest.raises(ValueError):
            lr_at(0, 100, 1e-4, 1.0)


class TestCheckpoint:
    def test_round_trip_byte_identical(self, tmp_path):
        _, adapters, head = tiny_model(seed=31)
        p1 = tmp_path / "a.ckpt"
        p2 = tmp_path / "b.ckpt"
        save_checkpoint(p1, adapters, head, seed=31, step=17)
        stack2, head2, seed, step = load_checkpoint(p1)
        assert seed == 31 and step == 17
        save_checkpoint(p2, stack2, head2, seed=seed, step=step)
        assert p1.read_bytes() == p2.read_bytes()
        assert np.array_equal(adapters.flatten(), stack2.flatten())

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "junk.ckpt"
        p.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(DataError):
            load_checkpoint(p)
