import math

import numpy as np
import pytest

from mgpcc.tensor import (
    AdamState,
    RoundFreeze,
    Tensor,
    adam_step,
    concat,
    fd_gradients,
    freeze_rounding,
    gradcheck,
    load_arrays,
    no_grad,
    round_half_away,
    save_arrays,
    zero_grads,
)


def rt(shape, seed, lo=-1.0, hi=1.0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


class TestForwardBasics:
    def test_round_half_away(self):
        x = np.array([2.5, -2.5, 0.5, -0.5, 1.49, -1.49, 3.0])
        np.testing.assert_array_equal(round_half_away(x), [3, -3, 1, -1, 1, -1, 3])

    def test_matmul_hand_oracle(self):
        # row-by-column by hand:
        # [1 2 3]   [7  8 ]   [58  64 ]
        # [4 5 6] x [9  10] = [139 154]
        #           [11 12]
        a = Tensor([[1.0, 2, 3], [4, 5, 6]])
        b = Tensor([[7.0, 8], [9, 10], [11, 12]])
        np.testing.assert_array_equal((a @ b).data, [[58, 64], [139, 154]])

    def test_matmul_shape_error_names_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 2\)"):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((2, 2)))

    def test_relu(self):
        x = Tensor([-3.0, 0.0, 2.0], requires_grad=True)
        y = x.relu()
        np.testing.assert_array_equal(y.data, [0.0, 0.0, 2.0])
        y.sum().backward()
        np.testing.assert_array_equal(x.grad, [0.0, 0.0, 1.0])

    def test_normal_cdf_values(self):
        x = Tensor([0.0, 0.5, -0.5])
        p = x.normal_cdf().data
        assert p[0] == 0.5
        # interval mass of the unit Gaussian over one centered bin
        assert abs((p[1] - p[2]) - 0.38292492254802607) < 1e-15
        oracle = 0.5 * (1 + math.erf(0.5 / math.sqrt(2)))
        assert abs(p[1] - oracle) < 1e-13

    def test_clamp_exp_stays_finite(self):
        x = Tensor([-1e6, -10.0, 0.0, 10.0, 1e6])
        s = x.clamp(math.log(1e-3), math.log(1e3)).exp()
        assert np.all(np.isfinite(s.data))
        assert s.data.min() >= 1e-3 - 1e-12 and s.data.max() <= 1e3 + 1e-9

    def test_item_and_backward_guards(self):
        t = Tensor([1.0, 2.0])
        with pytest.raises(ValueError, match="item"):
            t.item()
        t2 = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ValueError, match="scalar"):
            (t2 * 2).backward()

    def test_no_grad_suppresses_tape(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            y = x * 3
        assert not y.requires_grad and y._prev == ()

    def test_detach_cuts_graph(self):
        x = Tensor([2.0], requires_grad=True)
        y = (x * 3).detach() * x
        y.sum().backward()
        np.testing.assert_array_equal(x.grad, [6.0])  # only the outer factor


class TestBackwardHandOracles:
    def test_sum_of_squares(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        x.square().sum().backward()
        np.testing.assert_array_equal(x.grad, [2.0, 4.0])

    def test_mean_adjoint(self):
        x = Tensor([1.0, 2.0, 3.0, 4.0], requires_grad=True)
        x.mean().backward()
        np.testing.assert_array_equal(x.grad, [0.25] * 4)

    def test_grad_accumulates_over_reuse(self):
        x = Tensor([3.0], requires_grad=True)
        (x * x + x).sum().backward()  # d/dx (x^2 + x) = 2x + 1
        np.testing.assert_array_equal(x.grad, [7.0])

    def test_broadcast_scalar_param(self):
        s = Tensor(2.0, requires_grad=True)
        x = Tensor([1.0, 2.0, 3.0])
        (s * x).sum().backward()
        np.testing.assert_array_equal(s.grad, 6.0)


class TestSteRound:
    def test_tie_rule(self):
        x = Tensor([2.5, -2.5])
        np.testing.assert_array_equal(x.ste_round().data, [3.0, -3.0])

    def test_idempotent_forward(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.uniform(-100, 100, size=1000))
        once = x.ste_round()
        np.testing.assert_array_equal(once.ste_round().data, once.data)

    def test_identity_jacobian(self):
        for v in (2.5, 0.1, -7.3):
            x = Tensor([v], requires_grad=True)
            (x.ste_round() * 2).sum().backward()
            np.testing.assert_array_equal(x.grad, [2.0])

    def test_symbolic_gradient_through_ste(self):
        # loss = sum((ste_round(x) - t)^2) has grad 2*(round(x) - t)
        rng = np.random.default_rng(1)
        xv = rng.uniform(-5, 5, size=32)
        tv = rng.uniform(-5, 5, size=32)
        x = Tensor(xv, requires_grad=True)
        (x.ste_round() - Tensor(tv)).square().sum().backward()
        np.testing.assert_allclose(x.grad, 2 * (round_half_away(xv) - tv), atol=1e-12)


class TestUniformNoise:
    def test_support(self):
        x = Tensor(np.zeros(10000))
        y = x.add_uniform_noise(np.random.default_rng(3))
        d = y.data - x.data
        assert d.min() >= -0.5 and d.max() < 0.5

    def test_seed_determinism(self):
        x = Tensor(np.ones(100), requires_grad=True)
        a = x.add_uniform_noise(np.random.default_rng(9)).data
        b = x.add_uniform_noise(np.random.default_rng(9)).data
        np.testing.assert_array_equal(a, b)

    def test_monte_carlo_mean(self):
        x = Tensor(np.zeros(10**6))
        d = x.add_uniform_noise(np.random.default_rng(7)).data
        assert abs(d.mean()) < 0.002  # 3 sigma of 1/sqrt(12e6) is ~0.00087

    def test_identity_adjoint(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        x.add_uniform_noise(np.random.default_rng(0)).sum().backward()
        np.testing.assert_array_equal(x.grad, [1.0, 1.0])


def brute_conv1d(x, w, b, stride, pad_mode):
    cin, L = x.shape
    cout, _, K = w.shape
    lout = math.ceil(L / stride)
    total = max((lout - 1) * stride + K - L, 0)
    pl = total // 2
    out = np.zeros((cout, lout))
    for o in range(cout):
        for t in range(lout):
            acc = b[o] if b is not None else 0.0
            for c in range(cin):
                for k in range(K):
                    j = t * stride - pl + k
                    if pad_mode == "edge":
                        acc += w[o, c, k] * x[c, min(max(j, 0), L - 1)]
                    elif 0 <= j < L:
                        acc += w[o, c, k] * x[c, j]
            out[o, t] = acc
    return out


class TestConv1d:
    def test_output_length(self):
        x = Tensor(np.zeros((1, 8)))
        w = Tensor(np.zeros((1, 1, 5)))
        assert x.conv1d(w, None, stride=2).shape == (1, 4)

    @pytest.mark.parametrize("seed,cin,cout,K,L,stride", [
        (0, 1, 1, 3, 7, 1),
        (1, 2, 3, 5, 8, 2),
        (2, 3, 2, 5, 9, 2),
        (3, 4, 4, 3, 12, 3),
        (4, 2, 5, 1, 6, 1),
    ])
    def test_forward_vs_bruteforce(self, seed, cin, cout, K, L, stride):
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(cin, L))
        w = rng.normal(size=(cout, cin, K))
        b = rng.normal(size=cout)
        got = Tensor(x).conv1d(Tensor(w), Tensor(b), stride=stride).data
        np.testing.assert_allclose(got, brute_conv1d(x, w, b, stride, "edge"),
                                   atol=1e-12)

    def test_constant_signal_is_padding_fixed_point(self):
        # edge replication keeps a constant signal constant under any kernel
        x = Tensor(np.full((1, 10), 3.7))
        w = Tensor(np.random.default_rng(5).normal(size=(1, 1, 5)))
        y = x.conv1d(w, None, stride=1).data
        np.testing.assert_allclose(y, 3.7 * w.data.sum(), atol=1e-12)

    def test_shape_errors(self):
        with pytest.raises(ValueError, match="shape mismatch"):
            Tensor(np.zeros((2, 8))).conv1d(Tensor(np.zeros((4, 3, 5))), None)
        with pytest.raises(ValueError, match="bias"):
            Tensor(np.zeros((3, 8))).conv1d(
                Tensor(np.zeros((4, 3, 5))), Tensor(np.zeros(5)))

    def test_transpose_doubles_length(self):
        x = Tensor(np.arange(4.0).reshape(1, 4))
        w = Tensor(np.zeros((1, 1, 5)))
        w.data[0, 0, 2] = 1.0
        y = x.conv1d_transpose(w, None, stride=2)
        # center tap reproduces the zero-stuffed signal
        np.testing.assert_array_equal(y.data, [[0, 0, 1, 0, 2, 0, 3, 0]])

    def test_transpose_matches_bruteforce_zero_pad(self):
        rng = np.random.default_rng(8)
        x = rng.normal(size=(2, 6))
        w = rng.normal(size=(3, 2, 5))
        b = rng.normal(size=3)
        up = np.zeros((2, 12))
        up[:, ::2] = x
        got = Tensor(x).conv1d_transpose(Tensor(w), Tensor(b), stride=2).data
        np.testing.assert_allclose(got, brute_conv1d(up, w, b, 1, "zero"), atol=1e-12)

    def test_upsample_zero_roundtrip(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        y = x.upsample_zero(3)
        assert y.shape == (2, 9)
        np.testing.assert_array_equal(y.data[:, ::3], x.data)
        y.square().sum().backward()
        np.testing.assert_array_equal(x.grad, 2 * x.data)


class TestGradcheckPrimitives:
    """Every differentiable primitive against central finite differences."""

    @pytest.mark.parametrize("seed", range(5))
    def test_arithmetic_chain(self, seed):
        x = rt((3, 4), seed)
        y = rt((3, 4), seed + 100, lo=0.5, hi=2.0)
        loss = lambda: ((x * y - x / y + 3.0 * x - y).square()).mean()
        assert gradcheck(loss, {"x": x, "y": y}) < 1e-3

    @pytest.mark.parametrize("seed", range(5))
    def test_matmul(self, seed):
        a = rt((2, 3), seed)
        b = rt((3, 4), seed + 50)
        loss = lambda: (a @ b).square().sum()
        assert gradcheck(loss, {"a": a, "b": b}) < 1e-3

    @pytest.mark.parametrize("seed", range(5))
    def test_relu_exp_log(self, seed):
        x = rt((2, 5), seed, lo=0.2, hi=2.0)  # away from the relu kink
        loss = lambda: (x.relu().exp() + x.log()).sum()
        assert gradcheck(loss, {"x": x}) < 1e-3

    @pytest.mark.parametrize("seed", range(5))
    def test_clamp_interior_and_exterior(self, seed):
        rng = np.random.default_rng(seed)
        # values well inside and well outside the clamp window, none near edges
        vals = np.concatenate([rng.uniform(-0.4, 0.4, 6), rng.uniform(0.7, 2.0, 6)])
        x = Tensor(vals, requires_grad=True)
        loss = lambda: x.clamp(-0.5, 0.5).square().sum()
        assert gradcheck(loss, {"x": x}) < 1e-3

    @pytest.mark.parametrize("seed", range(5))
    def test_normal_cdf(self, seed):
        x = rt((7,), seed, lo=-2, hi=2)
        loss = lambda: x.normal_cdf().square().sum()
        assert gradcheck(loss, {"x": x}) < 1e-3

    @pytest.mark.parametrize("seed", range(5))
    def test_concat_slice(self, seed):
        a = rt((2, 3), seed)
        b = rt((3, 3), seed + 9)
        def loss():
            c = concat([a, b], axis=0)
            return (c[1:4] * c[0:3]).sum()
        assert gradcheck(loss, {"a": a, "b": b}) < 1e-3

    @pytest.mark.parametrize("seed,stride", [(0, 1), (1, 2), (2, 3), (3, 2), (4, 1)])
    def test_conv1d(self, seed, stride):
        x = rt((2, 9), seed)
        w = rt((3, 2, 5), seed + 21)
        b = rt((3,), seed + 42)
        loss = lambda: x.conv1d(w, b, stride=stride).square().sum()
        assert gradcheck(loss, {"x": x, "w": w, "b": b}) < 1e-3

    @pytest.mark.parametrize("seed,stride", [(0, 1), (1, 2), (2, 3), (3, 2), (4, 4)])
    def test_conv1d_transpose(self, seed, stride):
        x = rt((2, 6), seed)
        w = rt((2, 2, 5), seed + 7)
        b = rt((2,), seed + 14)
        loss = lambda: x.conv1d_transpose(w, b, stride=stride).square().mean()
        assert gradcheck(loss, {"x": x, "w": w, "b": b}) < 1e-3

    @pytest.mark.parametrize("seed", range(5))
    def test_transpose(self, seed):
        x = rt((3, 5), seed)
        w = rt((5, 2), seed + 3)
        loss = lambda: (x.transpose() @ x @ w).square().sum()
        assert gradcheck(loss, {"x": x, "w": w}) < 1e-3

    @pytest.mark.parametrize("seed", range(5))
    def test_noise_path(self, seed):
        x = rt((4, 4), seed)
        loss = lambda: x.add_uniform_noise(np.random.default_rng(seed)).square().sum()
        assert gradcheck(loss, {"x": x}) < 1e-3

    def test_gradcheck_catches_wrong_gradient(self):
        # without freezing, a hard-rounded loss is flat between steps: the
        # straight-through adjoint (nonzero) must disagree with FD (zero)
        x = Tensor([0.3, 1.7], requires_grad=True)
        loss = lambda: (x.ste_round() * x.detach()).sum()
        with pytest.raises(AssertionError, match="gradient mismatch"):
            gradcheck(loss, {"x": x})

    def test_gradcheck_ste_with_freeze(self):
        rng = np.random.default_rng(13)
        x = Tensor(rng.uniform(-3, 3, 16), requires_grad=True)
        t = Tensor(rng.uniform(-3, 3, 16))
        loss = lambda: (x.ste_round() - t).square().sum()
        assert gradcheck(loss, {"x": x}, uses_rounding=True) < 1e-3


class TestRoundFreeze:
    def test_record_then_replay_is_shifted_identity(self):
        fz = RoundFreeze()
        x = Tensor([0.3, 1.7, -2.2])
        with freeze_rounding(fz), fz.record():
            base = x.ste_round().data
        np.testing.assert_array_equal(base, [0.0, 2.0, -2.0])
        shifted = Tensor(x.data + 0.01)
        with freeze_rounding(fz), fz.replay():
            out = shifted.ste_round().data
        np.testing.assert_allclose(out, base + 0.01, atol=1e-12)

    def test_replay_count_mismatch_raises(self):
        fz = RoundFreeze()
        x = Tensor([1.2])
        with freeze_rounding(fz), fz.record():
            x.ste_round()
        with pytest.raises(RuntimeError, match="recorded"):
            with freeze_rounding(fz), fz.replay():
                pass  # zero calls, one recorded

    def test_without_context_plain_round(self):
        np.testing.assert_array_equal(Tensor([2.5]).ste_round().data, [3.0])


class TestAdam:
    def test_zero_gradient_keeps_params(self):
        p = Tensor([1.0, -2.0], requires_grad=True)
        p.grad = np.zeros(2)
        st = AdamState()
        adam_step({"p": p}, st, lr=0.1)
        np.testing.assert_array_equal(p.data, [1.0, -2.0])

    def test_first_step_closed_form(self):
        # g=1: m̂=1, v̂=1 → Δ = lr/(1+ε)
        p = Tensor([5.0], requires_grad=True)
        p.grad = np.ones(1)
        adam_step({"p": p}, AdamState(), lr=0.1)
        np.testing.assert_allclose(p.data, [5.0 - 0.1 / (1 + 1e-8)], atol=1e-15)

    def test_determinism(self):
        def run():
            p = Tensor([1.0, 2.0], requires_grad=True)
            st = AdamState()
            for k in range(5):
                p.grad = np.array([0.1 * k, -0.2])
                adam_step({"p": p}, st, lr=0.01)
            return p.data.copy()
        np.testing.assert_array_equal(run(), run())

    def test_nonfinite_gradient_names_parameter(self):
        p = Tensor([1.0], requires_grad=True)
        p.grad = np.array([np.nan])
        with pytest.raises(ValueError, match="'w.enc'"):
            adam_step({"w.enc": p}, AdamState(), lr=0.1)

    def test_none_grad_treated_as_zero(self):
        p = Tensor([3.0], requires_grad=True)
        zero_grads({"p": p})
        adam_step({"p": p}, AdamState(), lr=0.5)
        np.testing.assert_array_equal(p.data, [3.0])


class TestCheckpoint:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(4)
        arrays = {
            "enc.w0": rng.normal(size=(4, 3, 5)),
            "enc.b0": rng.normal(size=4),
            "meta.step": np.array(17.0),
        }
        path = str(tmp_path / "model.ckpt")
        save_arrays(path, arrays)
        back = load_arrays(path)
        assert set(back) == set(arrays)
        for k in arrays:
            np.testing.assert_array_equal(back[k], arrays[k])
            assert back[k].shape == arrays[k].shape

    def test_corruption_detected(self, tmp_path):
        path = str(tmp_path / "model.ckpt")
        save_arrays(path, {"w": np.ones(3)})
        raw = bytearray(open(path, "rb").read())
        raw[len(raw) // 2] ^= 0xFF
        open(path, "wb").write(bytes(raw))
        with pytest.raises(ValueError, match="checksum"):
            load_arrays(path)

    def test_wrong_magic_rejected(self, tmp_path):
        path = str(tmp_path / "bad.ckpt")
        open(path, "wb").write(b"not a checkpoint at all, nope" + b"\x00" * 40)
        with pytest.raises(ValueError, match="not a checkpoint"):
            load_arrays(path)

    def test_atomic_write_leaves_no_temp(self, tmp_path):
        path = str(tmp_path / "model.ckpt")
        save_arrays(path, {"w": np.ones(3)})
        assert [p.name for p in tmp_path.iterdir()] == ["model.ckpt"]


class TestFdGradients:
    def test_analytic_function(self):
        # f = sum(3 p^2) → df/dp = 6p
        p = Tensor([1.0, -2.0], requires_grad=True)
        fd = fd_gradients(lambda: (p.square() * 3.0).sum(), {"p": p})
        np.testing.assert_allclose(fd["p"], 6 * p.data, rtol=1e-6)

    def test_params_restored_after_probe(self):
        p = Tensor([1.5], requires_grad=True)
        fd_gradients(lambda: p.square().sum(), {"p": p})
        np.testing.assert_array_equal(p.data, [1.5])
