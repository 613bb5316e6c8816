import numpy as np
import pytest

from sydlm import autodiff as ad
from sydlm.autodiff import (
    ShapeError,
    Tape,
    Tensor,
    backward,
    grad_check,
    load_checkpoint,
    save_checkpoint,
)

from gradcases import primitive_cases


class TestForwardValues:
    def test_softmax_and_cumsum_symmetry(self):
        out = ad.softmax(Tensor(np.zeros(4)))
        assert np.allclose(out.data, 0.25)
        assert np.allclose(ad.cumsum(out).data, [0.25, 0.5, 0.75, 1.0])

    def test_cumax_equal_logits(self):
        assert np.allclose(ad.cumax(Tensor(np.zeros(4))).data, [0.25, 0.5, 0.75, 1.0])

    def test_cumax_saturated_first_logit(self):
        out = ad.cumax(Tensor(np.array([60.0, 0.0, 0.0, 0.0])))
        assert np.allclose(out.data, 1.0)

    def test_sigmoid_at_zero(self):
        x = Tensor(np.zeros(1), requires_grad=True)
        with Tape():
            backward(ad.tsum(ad.sigmoid(x)))
        assert np.isclose(ad.sigmoid(Tensor(0.0)).data, 0.5)
        assert np.isclose(x.grad[0], 0.25)

    def test_hardtanh_clamps(self):
        out = ad.hardtanh(Tensor(np.array([2.0, -2.0, 0.3])))
        assert np.allclose(out.data, [1.0, -1.0, 0.3])


class TestBackward:
    def test_sum_gives_ones(self):
        x = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        with Tape():
            backward(ad.tsum(x))
        assert np.array_equal(x.grad, np.ones((2, 3)))

    def test_elementwise_square(self):
        x = Tensor(np.array([1.0, -2.0, 3.0]), requires_grad=True)
        with Tape():
            backward(ad.tsum(x * x))
        assert np.allclose(x.grad, 2 * x.data)

    def test_fan_out_sums_adjoints(self):
        x = Tensor(np.array([2.0]), requires_grad=True)
        with Tape():
            y = x * 3.0 + x * 5.0 + ad.tsum(x)
            backward(ad.tsum(y))
        assert np.allclose(x.grad, 9.0)

    def test_non_scalar_loss_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with Tape():
            with pytest.raises(ShapeError):
                backward(x * 2.0)

    def test_backward_needs_tape(self):
        with pytest.raises(RuntimeError):
            backward(Tensor(1.0))

    def test_grad_accumulates_across_backward_calls(self):
        x = Tensor(np.ones(2), requires_grad=True)
        for _ in range(2):
            with Tape():
                backward(ad.tsum(x * 2.0))
        assert np.allclose(x.grad, 4.0)

    def test_no_tape_means_no_recording(self):
        x = Tensor(np.ones(2), requires_grad=True)
        y = x * 2.0
        assert y.node is None and y.tracked is False


class TestShapeErrors:
    def test_matmul_names_shapes(self):
        with pytest.raises(ShapeError, match="matmul"):
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))

    def test_add_incompatible(self):
        with pytest.raises(ShapeError, match="add"):
            ad.add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))

    def test_embedding_id_range(self):
        with pytest.raises(ShapeError, match="embedding"):
            ad.embedding(Tensor(np.ones((3, 2))), np.array([0, 3]))

    def test_conv_window_too_long(self):
        with pytest.raises(ShapeError, match="causal_conv1d"):
            ad.causal_conv1d(Tensor(np.ones((2, 1, 3))), Tensor(np.ones((9, 2))),
                             Tensor(np.zeros(2)), 3)


class TestGradChecks:
    @pytest.mark.parametrize("case", primitive_cases(seed=0), ids=lambda c: c[0])
    def test_primitive(self, case):
        name, f, x = case
        assert grad_check(f, x) < 1e-4, name

    def test_linear_function_near_machine_eps(self):
        w = Tensor(np.array([1.5, -2.0, 0.5]))
        err = grad_check(lambda t: ad.tsum(t * w), Tensor(np.array([0.3, 0.7, -0.2])))
        assert err < 1e-9

    def test_sigmoid_sum_tight(self):
        rng = np.random.default_rng(1)
        err = grad_check(lambda t: ad.tsum(ad.sigmoid(t)), Tensor(rng.normal(size=8)), eps=1e-5)
        assert err < 1e-7

    def test_hardtanh_away_from_kinks(self):
        rng = np.random.default_rng(2)
        x = rng.uniform(-2.0, 2.0, size=16)
        delta = 0.01
        for kink in (-1.0, 1.0):
            close = np.abs(x - kink) < 10 * delta
            x[close] = kink + 0.2 * np.sign(x[close] - kink + 1e-9)
        err = grad_check(lambda t: ad.tsum(ad.hardtanh(t)), Tensor(x), eps=1e-5)
        assert err < 1e-6


class TestCumaxContract:
    def test_fuzz_monotone_positive_ends_at_one(self):
        rng = np.random.default_rng(3)
        x = rng.uniform(-20, 20, size=(1000, 8))
        out = ad.cumax(Tensor(x)).data
        assert (out > 0).all()
        assert (out <= 1 + 1e-12).all()
        assert (np.diff(out, axis=-1) >= 0).all()
        assert np.abs(out[:, -1] - 1.0).max() < 1e-12


class TestDeterminism:
    def test_identical_seeds_bitwise(self):
        def run():
            rng = np.random.default_rng(9)
            x = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
            w = Tensor(rng.normal(size=(5, 3)), requires_grad=True)
            with Tape():
                y = ad.tsum(ad.softmax(ad.matmul(ad.dropout(x, 0.3, rng), w)))
                backward(y)
            return y.data.copy(), x.grad.copy(), w.grad.copy()

        a = run()
        b = run()
        for left, right in zip(a, b):
            assert np.array_equal(left, right)


class TestCheckpoint:
    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(4)
        params = {
            "embedding": Tensor(rng.normal(size=(7, 3))),
            "layer0.W_f": Tensor(rng.normal(size=(5, 4))),
            "b": Tensor(np.array(2.5)),
        }
        path = str(tmp_path / "model.bin")
        save_checkpoint(path, params, header={"config": {"hidden_size": 4}})
        header, loaded = load_checkpoint(path)
        assert header == {"config": {"hidden_size": 4}}
        assert set(loaded) == set(params)
        for name, tensor in params.items():
            assert np.array_equal(loaded[name], tensor.data)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOTACKPT")
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(str(path))
