import numpy as np
import pytest
import torch
from torch import nn

from r2spray.errors import ConfigError, NumericError
from r2spray.network import (
    ConvNet3D,
    NegativeBiasAdam,
    TrainConfig,
    VolumeNetClassifier,
    build_network,
    load_checkpoint,
    lr_schedule_update,
    parameter_count,
    save_checkpoint,
    train_model,
)

torch.set_num_threads(1)


def naive_conv3d(x, weight, bias, stride, padding):
    """Seven-loop reference convolution (cross-correlation), same semantics
    as the layer under test."""
    b, cin, d, h, w = x.shape
    cout, _, kd, kh, kw = weight.shape
    od = (d + 2 * padding - kd) // stride + 1
    oh = (h + 2 * padding - kh) // stride + 1
    ow = (w + 2 * padding - kw) // stride + 1
    xp = np.zeros((b, cin, d + 2 * padding, h + 2 * padding, w + 2 * padding))
    xp[:, :, padding : padding + d, padding : padding + h, padding : padding + w] = x
    out = np.zeros((b, cout, od, oh, ow))
    for bi in range(b):
        for co in range(cout):
            for zo in range(od):
                for yo in range(oh):
                    for xo in range(ow):
                        acc = bias[co]
                        for ci in range(cin):
                            for kz in range(kd):
                                for ky in range(kh):
                                    for kx in range(kw):
                                        acc += (
                                            weight[co, ci, kz, ky, kx]
                                            * xp[
                                                bi, ci,
                                                zo * stride + kz,
                                                yo * stride + ky,
                                                xo * stride + kx,
                                            ]
                                        )
                        out[bi, co, zo, yo, xo] = acc
    return out


class TestConvForward:
    def test_identity_kernel_passes_input_through(self):
        conv = nn.Conv3d(1, 1, 3, stride=1, padding=1).double()
        with torch.no_grad():
            conv.weight.zero_()
            conv.weight[0, 0, 1, 1, 1] = 1.0
            conv.bias.zero_()
        x = torch.randn(1, 1, 4, 4, 4, dtype=torch.float64)
        assert torch.allclose(conv(x), x, atol=1e-14)

    def test_against_seven_loop_oracle(self):
        rng = np.random.default_rng(0)
        x = rng.normal(size=(1, 2, 5, 5, 5))
        for stride in (1, 2):
            conv = nn.Conv3d(2, 3, 3, stride=stride, padding=1).double()
            out = conv(torch.as_tensor(x)).detach().numpy()
            expected = naive_conv3d(
                x,
                conv.weight.detach().numpy(),
                conv.bias.detach().numpy(),
                stride,
                padding=1,
            )
            assert np.max(np.abs(out - expected)) < 1e-12

    def test_stride_two_halves_spatial_dims(self):
        conv = nn.Conv3d(1, 1, 3, stride=2, padding=1)
        assert conv(torch.zeros(1, 1, 8, 8, 8)).shape == (1, 1, 4, 4, 4)
        # ceil rule on odd dims
        assert conv(torch.zeros(1, 1, 7, 9, 5)).shape == (1, 1, 4, 5, 3)


class TestForward:
    def test_zero_weights_give_uniform_probabilities(self):
        net = build_network((8, 8, 8), seed=0)
        with torch.no_grad():
            for mod in net.steps:
                if isinstance(mod, (nn.Conv3d, nn.Linear)):
                    mod.weight.zero_()
                    mod.bias.zero_()
        x = torch.randn(2, 1, 8, 8, 8, dtype=torch.float64)
        logits = net(x)
        assert torch.all(logits == 0.0)
        probs = net.probabilities(x)
        assert torch.allclose(probs, torch.full_like(probs, 0.5), atol=1e-15)

    def test_softmax_invariant_to_logit_shift(self):
        logits = torch.tensor([[1.3, -0.4]], dtype=torch.float64)
        shifted = logits + 123.456
        a = torch.softmax(logits, dim=1)
        b = torch.softmax(shifted, dim=1)
        assert torch.allclose(a, b, atol=1e-12)
        assert float(a.sum()) == pytest.approx(1.0, abs=1e-12)

    def test_cache_holds_every_step_input(self):
        net = build_network((8, 8, 8), blocks=2, seed=1)
        cache = []
        x = torch.randn(1, 1, 8, 8, 8, dtype=torch.float64)
        net(x, cache=cache)
        assert len(cache) == len(net.kinds)
        assert cache[0].shape == x.shape

    def test_nonfinite_activation_names_layer(self):
        net = build_network((8, 8, 8), blocks=2, seed=1)
        x = torch.full((1, 1, 8, 8, 8), float("inf"), dtype=torch.float64)
        with pytest.raises(NumericError, match="layer index"):
            net(x)


class TestParameterCount:
    def test_full_size_input_matches_published_budget(self):
        assert parameter_count((176, 224, 256)) == 327818

    def test_closed_form_matches_instantiated_network(self):
        for dims in [(32, 32, 32), (176, 224, 256), (17, 23, 9)]:
            net = ConvNet3D(dims)
            actual = sum(p.numel() for p in net.parameters())
            assert actual == parameter_count(dims)


class TestBackward:
    def test_gradients_match_central_finite_differences(self):
        torch.manual_seed(0)
        net = build_network((8, 8, 8), blocks=2, seed=3)
        x = torch.randn(2, 1, 8, 8, 8, dtype=torch.float64)
        target = torch.tensor([0, 1])

        def loss_value():
            return nn.functional.cross_entropy(net(x), target)

        loss = loss_value()
        loss.backward()
        h = 1e-5
        worst = 0.0
        for p in net.parameters():
            grad = p.grad.clone()
            flat = p.data.view(-1)
            gflat = grad.view(-1)
            for j in range(flat.numel()):
                orig = flat[j].item()
                with torch.no_grad():
                    flat[j] = orig + h
                    f_plus = float(loss_value())
                    flat[j] = orig - h
                    f_minus = float(loss_value())
                    flat[j] = orig
                fd = (f_plus - f_minus) / (2 * h)
                a = gflat[j].item()
                err = abs(a - fd) / max(abs(a), abs(fd), 1e-5)
                worst = max(worst, err)
        assert worst < 1e-4

    def test_zero_input_gives_zero_conv_weight_gradients(self):
        net = build_network((8, 8, 8), blocks=2, seed=4)
        with torch.no_grad():
            for mod in net.steps:
                if isinstance(mod, (nn.Conv3d, nn.Linear)):
                    mod.bias.zero_()
        x = torch.zeros(1, 1, 8, 8, 8, dtype=torch.float64)
        loss = nn.functional.cross_entropy(net(x), torch.tensor([1]))
        loss.backward()
        for mod in net.steps:
            if isinstance(mod, nn.Conv3d):
                assert torch.all(mod.weight.grad == 0.0)

    def test_cross_entropy_gradient_is_probs_minus_onehot(self):
        logits = torch.tensor([[0.3, -1.2]], dtype=torch.float64, requires_grad=True)
        loss = nn.functional.cross_entropy(logits, torch.tensor([1]))
        loss.backward()
        probs = torch.softmax(logits.detach(), dim=1)
        expected = probs - torch.tensor([[0.0, 1.0]], dtype=torch.float64)
        assert torch.allclose(logits.grad, expected, atol=1e-12)


class _Scalar(nn.Module):
    def __init__(self, value=0.0):
        super().__init__()
        self.theta = nn.Parameter(torch.tensor([value], dtype=torch.float64))


class TestAdam:
    def test_zero_gradients_leave_parameters_unchanged(self):
        net = build_network((8, 8, 8), blocks=1, seed=5)
        before = {k: v.clone() for k, v in net.state_dict().items()}
        optim = NegativeBiasAdam(net, lr=1e-3)
        for p in net.parameters():
            p.grad = torch.zeros_like(p)
        optim.step()
        for k, v in net.state_dict().items():
            assert torch.equal(v, before[k])

    def test_hand_evaluated_first_step(self):
        mod = _Scalar(0.0)
        optim = NegativeBiasAdam(mod, lr=1e-3)
        mod.theta.grad = torch.tensor([1.0], dtype=torch.float64)
        optim.step()
        # mhat = 1, vhat = 1 -> step = -lr / (1 + eps)
        assert float(mod.theta.detach()) == pytest.approx(-1e-3, rel=1e-6)

    def test_positive_bias_clamped_to_zero_exactly(self):
        layer = nn.Linear(2, 2).double()
        with torch.no_grad():
            layer.bias.fill_(0.1)
        optim = NegativeBiasAdam(layer, lr=1e-3)
        layer.weight.grad = torch.zeros_like(layer.weight)
        layer.bias.grad = torch.zeros_like(layer.bias)
        optim.step()
        assert torch.all(layer.bias == 0.0)

    def test_bias_invariant_after_training_steps(self):
        torch.manual_seed(2)
        net = build_network((8, 8, 8), blocks=2, seed=6)
        optim = NegativeBiasAdam(net, lr=1e-2)
        x = torch.randn(4, 1, 8, 8, 8, dtype=torch.float64)
        y = torch.tensor([0, 1, 0, 1])
        for _ in range(5):
            optim.zero_grad()
            nn.functional.cross_entropy(net(x), y).backward()
            optim.step()
            assert net.max_bias() <= 0.0


class TestLrSchedule:
    def test_plateau_trace_from_rule(self):
        losses = [1.0, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9]
        new_lr, reset_to = lr_schedule_update(losses, 1e-3)
        assert new_lr == pytest.approx(3e-4)
        assert reset_to == 1  # the epoch of the last improvement

    def test_strictly_decreasing_never_triggers(self):
        losses = [1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4]
        new_lr, reset_to = lr_schedule_update(losses, 1e-3)
        assert new_lr == 1e-3
        assert reset_to is None

    def test_floor_is_respected(self):
        losses = [1.0] + [0.9] * 6
        new_lr, reset_to = lr_schedule_update(losses, 1e-6)
        assert new_lr == 1e-6
        assert reset_to == 1

    def test_no_retrigger_right_after_event(self):
        losses = [1.0, 0.9] + [0.9] * 5
        new_lr, reset_to = lr_schedule_update(losses, 1e-3, last_event_epoch=6)
        assert reset_to is None
        assert new_lr == 1e-3

    def test_improvement_tolerance_is_strict(self):
        base = 0.5
        losses = [base] + [base - 1e-9] * 5  # within tolerance: not improvements
        new_lr, reset_to = lr_schedule_update(losses, 1e-3)
        assert reset_to == 0


def phantom_arrays(n, dims=(16, 16, 16), delta=30.0, seed=0):
    """Noiseless two-class maps: separable by construction."""
    from r2spray.relaxometry import PhantomSpec, generate_phantom

    spec = PhantomSpec(dims=dims, noise_sigma=0.0)
    X, y, masks, guidance = [], [], [], []
    for i in range(n):
        label = "AD" if i % 2 else "NC"
        subject = generate_phantom(spec, label, seed=seed + i)
        X.append(subject.truth.r2star.data[np.newaxis])
        y.append(1 if label == "AD" else 0)
        masks.append(subject.brain_mask.data[np.newaxis])
        guidance.append(subject.guidance_mask.data[np.newaxis])
    return np.asarray(X), np.asarray(y), np.asarray(masks), np.asarray(guidance)


class TestTraining:
    def test_separable_set_reaches_full_train_accuracy(self):
        X, y, _, _ = phantom_arrays(40, dims=(32, 32, 32))
        config = TrainConfig(epochs=12, batch_size=6, seed=0)
        _, history = train_model(X[:34], y[:34], X[34:], y[34:], config,
                                 dtype=torch.float32)
        assert max(history.train_acc) == 1.0

    def test_same_seed_reproduces_weights_bitwise(self):
        X, y, _, _ = phantom_arrays(12)
        config = TrainConfig(epochs=3, batch_size=4, seed=9)
        net_a, _ = train_model(X[:10], y[:10], X[10:], y[10:], config,
                               dtype=torch.float64)
        net_b, _ = train_model(X[:10], y[:10], X[10:], y[10:], config,
                               dtype=torch.float64)
        for pa, pb in zip(net_a.parameters(), net_b.parameters()):
            assert torch.equal(pa, pb)

    def test_lr_trace_nonincreasing_and_bounded(self):
        X, y, _, _ = phantom_arrays(12)
        config = TrainConfig(epochs=6, batch_size=4, seed=1)
        _, history = train_model(X[:10], y[:10], X[10:], y[10:], config,
                                 dtype=torch.float32)
        lrs = history.lr
        assert all(b <= a for a, b in zip(lrs, lrs[1:]))
        assert all(lr >= 1e-6 for lr in lrs)

    def test_variant_b_with_all_ones_mask_equals_variant_a(self):
        X, y, _, _ = phantom_arrays(12)
        ones = np.ones_like(X)
        a = VolumeNetClassifier(variant="A", epochs=2, seed=3)
        b = VolumeNetClassifier(variant="B", epochs=2, seed=3)
        a.fit(X, y)
        b.fit(X, y, masks=ones)
        pa = a.predict_proba(X)
        pb = b.predict_proba(X, masks=ones)
        assert np.array_equal(pa, pb)


class TestCheckpoint:
    def test_roundtrip_preserves_weights_and_arch(self, tmp_path):
        net = build_network((16, 16, 16), blocks=2, seed=11, dtype=torch.float32)
        config = TrainConfig(epochs=1, seed=11)
        path = str(tmp_path / "model.bin")
        save_checkpoint(net, path, config=config)
        loaded, sidecar = load_checkpoint(path)
        assert loaded.input_dims == net.input_dims
        for pa, pb in zip(net.parameters(), loaded.parameters()):
            assert torch.equal(pa, pb)
        assert sidecar["config"]["seed"] == 11


class TestEstimatorApi:
    def test_get_params_and_clone(self):
        from sklearn.base import clone

        est = VolumeNetClassifier(variant="C", epochs=5, relevance_lambda=0.5)
        params = est.get_params()
        assert params["variant"] == "C"
        assert params["relevance_lambda"] == 0.5
        cloned = clone(est)
        assert cloned.get_params() == params

    def test_predict_proba_rows_sum_to_one(self):
        X, y, _, _ = phantom_arrays(12)
        est = VolumeNetClassifier(variant="A", epochs=2, seed=0).fit(X, y)
        probs = est.predict_proba(X)
        assert probs.shape == (12, 2)
        assert np.allclose(probs.sum(axis=1), 1.0, atol=1e-6)

    def test_variant_b_without_masks_rejected(self):
        X, y, _, _ = phantom_arrays(8)
        with pytest.raises(ConfigError):
            VolumeNetClassifier(variant="B", epochs=1).fit(X, y)

    def test_variant_c_without_guidance_rejected(self):
        X, y, _, _ = phantom_arrays(8)
        with pytest.raises(ConfigError):
            VolumeNetClassifier(variant="C", epochs=1).fit(X, y)
