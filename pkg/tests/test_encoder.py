import numpy as np
import pytest

from icuseq import autodiff as ad
from icuseq.encoder import (
    EncoderConfig,
    GradCheckReport,
    cls_output,
    forward,
    grad_check,
    init_encoder,
    init_pretrain_heads,
    init_task_head,
    load_checkpoint,
    mlvm_outputs,
    save_checkpoint,
    task_output,
)
from icuseq.errors import ConfigMismatch, FormatError, GradMismatch, ModeMismatch, ShapeMismatch
from icuseq.training import gradcheck_problem

CFG = EncoderConfig(layers=2, hidden=8, heads=2, ffn_dim=6, max_seq_len=6, dropout=0.0)


def setup(batch=2, length=6, seed=0, config=CFG):
    rng = np.random.default_rng(seed)
    x = ad.constant(rng.standard_normal((batch, length, config.hidden)))
    mask = np.ones((batch, length))
    params = init_encoder(np.random.default_rng(1), config, dtype=np.float64)
    return x, mask, params


class TestForward:
    def test_config_validation(self):
        with pytest.raises(ShapeMismatch):
            EncoderConfig(hidden=10, heads=3)
        with pytest.raises(ShapeMismatch):
            EncoderConfig(layers=0)

    def test_identical_sequences_identical_outputs(self):
        x, mask, params = setup()
        x.data[1] = x.data[0]
        out = forward(x, mask, CFG, params)
        np.testing.assert_array_equal(out.data[0], out.data[1])

    def test_permutation_equivariance(self):
        x, mask, params = setup(batch=1)
        out = forward(x, mask, CFG, params).data[0]
        perm = np.array([0, 3, 1, 4, 2, 5])  # keeps CLS at position 0
        x_perm = ad.constant(x.data[:, perm, :])
        out_perm = forward(x_perm, mask, CFG, params).data[0]
        np.testing.assert_allclose(out_perm, out[perm], atol=1e-10)

    def test_all_pad_except_cls_is_finite(self):
        x, mask, params = setup(batch=1)
        mask[:, 1:] = 0
        out = forward(x, mask, CFG, params)
        assert np.all(np.isfinite(out.data))

    def test_mask_shape_checked(self):
        x, _, params = setup()
        with pytest.raises(ShapeMismatch):
            forward(x, np.ones((2, 5)), CFG, params)

    def test_masked_keys_do_not_influence_outputs(self):
        x, mask, params = setup(batch=1)
        mask[:, 4:] = 0
        base = forward(x, mask, CFG, params).data[0, :4]
        x2 = ad.constant(x.data.copy())
        x2.data[:, 4:, :] += 100.0
        out = forward(x2, mask, CFG, params).data[0, :4]
        np.testing.assert_allclose(out, base, atol=1e-10)


class TestHeads:
    def test_mlvm_output_shapes(self):
        hidden = ad.constant(np.random.default_rng(0).standard_normal((2, 8, 4)))
        heads = init_pretrain_heads(np.random.default_rng(0), 4, 10, 5, dtype=np.float64)
        f, c, cont = mlvm_outputs(hidden, heads)
        assert f.shape == (2, 8, 10)
        assert c.shape == (2, 8, 5)
        assert cont.shape == (2, 8)

    def test_zero_hidden_gives_bias(self):
        hidden = ad.constant(np.zeros((1, 3, 4)))
        heads = init_pretrain_heads(np.random.default_rng(0), 4, 6, 5, dtype=np.float64)
        heads.feature_b.data = np.arange(6, dtype=np.float64)
        f, _, _ = mlvm_outputs(hidden, heads)
        np.testing.assert_array_equal(f.data[0, 0], np.arange(6.0))

    def test_feature_softmax_normalized(self):
        hidden = ad.constant(np.random.default_rng(3).standard_normal((2, 4, 4)))
        heads = init_pretrain_heads(np.random.default_rng(1), 4, 7, 5, dtype=np.float64)
        f, _, _ = mlvm_outputs(hidden, heads)
        probs = np.exp(f.data - f.data.max(-1, keepdims=True))
        probs /= probs.sum(-1, keepdims=True)
        np.testing.assert_allclose(probs.sum(-1), 1.0, atol=1e-6)

    def test_mode_mismatch(self):
        hidden = ad.constant(np.zeros((1, 2, 4)))
        task_heads = init_task_head(np.random.default_rng(0), 4, 1)
        with pytest.raises(ModeMismatch):
            mlvm_outputs(hidden, task_heads)
        pre = init_pretrain_heads(np.random.default_rng(0), 4, 3, 3)
        with pytest.raises(ModeMismatch):
            task_output(ad.constant(np.zeros((1, 4))), pre)

    def test_cls_output_is_position_zero(self):
        hidden = ad.constant(np.random.default_rng(0).standard_normal((3, 5, 4)))
        np.testing.assert_array_equal(cls_output(hidden).data, hidden.data[:, 0, :])


class TestGradCheck:
    def test_quadratic_is_nearly_exact(self):
        w = ad.parameter(np.array([[1.5, -2.0], [0.5, 3.0]]), "w")
        x = np.array([[1.0, 2.0]])

        def loss_fn():
            out = ad.matmul(ad.constant(x), w)
            return ad.sum_all(ad.mul(out, out))

        report = grad_check(loss_fn, {"w": w}, epsilon=1e-4, tolerance=1e-7)
        assert report.ok
        assert report.worst.rel_err <= 1e-7

    def test_full_tiny_model(self):
        model, loss_fn = gradcheck_problem()
        report = grad_check(loss_fn, model.parameters(), epsilon=1e-4, tolerance=1e-4,
                            rng=np.random.default_rng(0))
        assert report.ok
        checked = {e.param for e in report.entries}
        assert checked == set(model.parameters())

    def test_corrupted_gradient_detected(self):
        w = ad.parameter(np.array([2.0, -1.0]), "w")

        def wrong_square(t):
            out = ad.Tensor(t.data * t.data, requires_grad=True)
            out._parents = (t,)

            def bwd(g):
                t.accumulate(3.0 * g)  # deliberately wrong; d/dx x^2 = 2x

            out._backward = bwd
            return out

        def loss_fn():
            return ad.sum_all(wrong_square(w))

        with pytest.raises(GradMismatch) as excinfo:
            grad_check(loss_fn, {"w": w}, epsilon=1e-5, tolerance=1e-4)
        assert excinfo.value.param == "w"
        assert isinstance(excinfo.value.report, GradCheckReport)


class TestCheckpoints:
    def model_params(self):
        rng = np.random.default_rng(0)
        return {
            "layer.w": ad.parameter(rng.standard_normal((4, 4)).astype(np.float32), "layer.w"),
            "layer.b": ad.parameter(rng.standard_normal(4).astype(np.float32), "layer.b"),
        }

    def test_roundtrip_bitwise(self, tmp_path):
        path = str(tmp_path / "model.ckpt")
        params = self.model_params()
        save_checkpoint(path, {"hidden": 4, "layers": 1}, params)
        config, arrays = load_checkpoint(path)
        assert config == {"hidden": 4, "layers": 1}
        for name, tensor in params.items():
            assert arrays[name].tobytes() == tensor.data.tobytes()

    def test_config_mismatch(self, tmp_path):
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(path, {"hidden": 4}, self.model_params())
        with pytest.raises(ConfigMismatch):
            load_checkpoint(path, expect={"hidden": 8})

    def test_truncated_rejected(self, tmp_path):
        path = str(tmp_path / "model.ckpt")
        save_checkpoint(path, {"hidden": 4}, self.model_params())
        data = open(path, "rb").read()
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(data[:-3])
        with pytest.raises(FormatError):
            load_checkpoint(str(bad))

    def test_bad_magic_rejected(self, tmp_path):
        bad = tmp_path / "bad.ckpt"
        bad.write_bytes(b"WRONG" + b"\x00" * 32)
        with pytest.raises(FormatError):
            load_checkpoint(str(bad))

    def test_save_is_deterministic(self, tmp_path):
        a, b = str(tmp_path / "a.ckpt"), str(tmp_path / "b.ckpt")
        params = self.model_params()
        save_checkpoint(a, {"hidden": 4}, params)
        save_checkpoint(b, {"hidden": 4}, params)
        assert open(a, "rb").read() == open(b, "rb").read()
