"""Modality matching loss: exact identities, reference agreement, gradients."""

import numpy as np
import pytest

from fastinject.am3 import am3_loss, am3_loss_scaled
from fastinject.errors import ConfigError, ShapeError
from fastinject.tensor import Tensor, backward, check_gradients


def reference_matching_loss(s, p, temperature=1.0):
    """Straightforward transcription of the four readouts and the loss."""
    def soft(z):
        e = np.exp(z - z.max(axis=1, keepdims=True))
        return e / e.sum(axis=1, keepdims=True)

    s_self = soft(s @ s.T / temperature) @ s
    s_cross = soft(s @ p.T / temperature) @ p
    p_self = soft(p @ p.T / temperature) @ p
    p_cross = soft(p @ s.T / temperature) @ s
    return (np.mean((s_self - s_cross) ** 2)
            + np.mean((p_self - p_cross) ** 2))


class TestIdentities:
    def test_identical_inputs_zero_loss(self, rng):
        s = Tensor(rng.standard_normal((5, 3)))
        out = am3_loss(s, s)
        assert out.loss.item() == 0.0
        np.testing.assert_array_equal(out.s_self.data, out.s_cross.data)
        np.testing.assert_array_equal(out.p_self.data, out.p_cross.data)

    def test_singleton_closed_form(self, rng):
        s = rng.standard_normal((1, 4))
        p = rng.standard_normal((1, 4))
        out = am3_loss(Tensor(s), Tensor(p))
        np.testing.assert_allclose(out.loss.item(),
                                   2.0 * np.mean((s - p) ** 2), atol=1e-12)
        np.testing.assert_array_equal(out.s_self.data, s)
        np.testing.assert_array_equal(out.s_cross.data, p)

    def test_reference_agreement(self):
        rng = np.random.default_rng(21)
        for _ in range(100):
            t, l, d = rng.integers(1, 9), rng.integers(1, 9), rng.integers(2, 5)
            s = rng.standard_normal((t, d))
            p = rng.standard_normal((l, d))
            out = am3_loss(Tensor(s), Tensor(p))
            np.testing.assert_allclose(out.loss.item(),
                                       reference_matching_loss(s, p), atol=1e-12)

    def test_swap_symmetry(self, rng):
        s = Tensor(rng.standard_normal((4, 3)))
        p = Tensor(rng.standard_normal((6, 3)))
        a = am3_loss(s, p)
        b = am3_loss(p, s)
        assert a.loss.item() == b.loss.item()
        np.testing.assert_array_equal(a.s_self.data, b.p_self.data)
        np.testing.assert_array_equal(a.s_cross.data, b.p_cross.data)

    def test_output_shapes(self, rng):
        out = am3_loss(Tensor(rng.standard_normal((4, 3))),
                       Tensor(rng.standard_normal((7, 3))))
        assert out.s_self.shape == out.s_cross.shape == (4, 3)
        assert out.p_self.shape == out.p_cross.shape == (7, 3)
        assert out.loss.item() >= 0.0


class TestLengthMismatch:
    def test_all_length_combinations_finite_and_grad_clean(self):
        rng = np.random.default_rng(22)
        d = 3
        for t in range(1, 9):
            for l in range(1, 9):
                s = rng.standard_normal((t, d))
                p = rng.standard_normal((l, d))
                err_s = check_gradients(lambda x: am3_loss(x, Tensor(p)).loss, Tensor(s))
                err_p = check_gradients(lambda x: am3_loss(Tensor(s), x).loss, Tensor(p))
                assert err_s < 1e-4 and err_p < 1e-4, (t, l)

    def test_gradients_reach_both_sides(self, rng):
        s = Tensor(rng.standard_normal((4, 3)), requires_grad=True)
        p = Tensor(rng.standard_normal((6, 3)), requires_grad=True)
        backward(am3_loss(s, p).loss)
        assert np.abs(s.grad).max() > 0 and np.abs(p.grad).max() > 0

    def test_order_invariance_over_rows(self, rng):
        """No sequential computation: permuting rows of either input leaves
        the loss unchanged."""
        s = rng.standard_normal((5, 3))
        p = rng.standard_normal((7, 3))
        base = am3_loss(Tensor(s), Tensor(p)).loss.item()
        perm_s = s[rng.permutation(5)]
        perm_p = p[rng.permutation(7)]
        assert am3_loss(Tensor(perm_s), Tensor(p)).loss.item() == pytest.approx(base, abs=1e-12)
        assert am3_loss(Tensor(s), Tensor(perm_p)).loss.item() == pytest.approx(base, abs=1e-12)

    def test_dim_mismatch(self, rng):
        with pytest.raises(ShapeError):
            am3_loss(Tensor(rng.standard_normal((3, 4))),
                     Tensor(rng.standard_normal((3, 5))))


class TestTemperature:
    def test_unit_temperature_identical(self, rng):
        s = Tensor(rng.standard_normal((4, 3)))
        p = Tensor(rng.standard_normal((5, 3)))
        assert am3_loss_scaled(s, p, 1.0).loss.item() == am3_loss(s, p).loss.item()

    def test_high_temperature_uniform_attention(self, rng):
        s = rng.standard_normal((4, 3))
        p = rng.standard_normal((6, 3))
        out = am3_loss_scaled(Tensor(s), Tensor(p), temperature=1e9)
        np.testing.assert_allclose(out.s_cross.data,
                                   np.tile(p.mean(axis=0), (4, 1)), atol=1e-8)

    def test_sqrt_d_temperature_grad_clean(self, rng):
        s = rng.standard_normal((4, 3))
        p = rng.standard_normal((5, 3))
        tau = np.sqrt(3)
        a = am3_loss_scaled(Tensor(s), Tensor(p), tau).loss.item()
        b = am3_loss(Tensor(s), Tensor(p)).loss.item()
        assert a != b
        err = check_gradients(lambda x: am3_loss_scaled(x, Tensor(p), tau).loss, Tensor(s))
        assert err < 1e-4
        np.testing.assert_allclose(a, reference_matching_loss(s, p, tau), atol=1e-12)

    def test_non_positive_temperature(self, rng):
        with pytest.raises(ConfigError):
            am3_loss_scaled(Tensor(rng.standard_normal((2, 2))),
                            Tensor(rng.standard_normal((2, 2))), 0.0)
