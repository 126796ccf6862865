import numpy as np
import pytest
import torch

from jointseg.errors import ConfigError, InputError, ShapeError
from jointseg.labels import ANATOMY_CLASS_IDS, NUM_ANATOMY_CLASSES, NUM_CLASSES
from jointseg.networks import (
    ExtractorConfig,
    JointSegModel,
    ParamSet,
    UNetExtractor,
    anatomy_one_hot,
    anatomy_probs_to_ids,
    compress_anatomy_labels,
    load_checkpoint,
    paper_scale_config,
    save_checkpoint,
)

SMALL = ExtractorConfig(levels=2, base_filters=4, feature_channels=4)


def small_model(seed=0):
    torch.manual_seed(seed)
    m = JointSegModel(SMALL)
    m.eval()
    return m


class TestExtractor:
    def test_output_shape_matches_input(self):
        m = small_model()
        out = m.forward_t1(torch.randn(1, 1, 8, 8, 8))
        assert out.shape == (1, SMALL.feature_channels, 8, 8, 8)

    def test_indivisible_shape_rejected(self):
        m = small_model()
        with pytest.raises(ShapeError):
            m.forward_t1(torch.randn(1, 1, 9, 8, 8))

    def test_eval_mode_bitwise_determinism(self):
        m = small_model()
        x = torch.randn(1, 1, 8, 8, 8)
        a = m.forward_t1(x)
        b = m.forward_t1(x)
        assert (a == b).all()

    def test_fixed_seed_reproducible_construction(self):
        x = torch.randn(2, 1, 8, 8, 8, generator=torch.Generator().manual_seed(1))
        a = small_model(seed=7).forward_t1(x)
        b = small_model(seed=7).forward_t1(x)
        assert (a == b).all()

    def test_zero_input_through_zeroed_final_layer(self):
        m = small_model()
        with torch.no_grad():
            m.extractor_t1.out_conv.weight.zero_()
            m.extractor_t1.out_conv.bias.zero_()
        out = m.forward_t1(torch.zeros(1, 1, 8, 8, 8))
        assert (out == 0).all()

    def test_gradient_matches_finite_differences_on_slice(self):
        torch.manual_seed(3)
        m = JointSegModel(SMALL).double()
        m.eval()
        x = torch.randn(1, 1, 8, 8, 8, dtype=torch.float64)
        weight = m.extractor_t1.out_conv.weight

        def f():
            return (m.forward_t1(x) ** 2).sum()

        loss = f()
        (grad,) = torch.autograd.grad(loss, weight)
        h = 1e-6
        coords = [(0, 0, 0, 0, 0), (1, 2, 0, 0, 0), (2, 1, 0, 0, 0)]
        for c in coords:
            with torch.no_grad():
                weight[c] += h
            up = f().item()
            with torch.no_grad():
                weight[c] -= 2 * h
            down = f().item()
            with torch.no_grad():
                weight[c] += h
            fd = (up - down) / (2 * h)
            rel = abs(fd - float(grad[c])) / max(abs(fd), float(grad.abs().max()), 1e-12)
            assert rel < 1e-3

    def test_flip_conjugated_equivariance(self):
        # With kernels flipped along an axis, flipping the input flips the
        # output: padding and pooling introduce no spatial asymmetry.
        torch.manual_seed(4)
        net = UNetExtractor(ExtractorConfig(levels=3, base_filters=4, feature_channels=4))
        net.eval()
        flipped = UNetExtractor(net.config)
        state = net.state_dict()
        flip_state = {
            k: (v.flip(2) if v.ndim == 5 else v.clone()) for k, v in state.items()
        }
        flipped.load_state_dict(flip_state)
        flipped.eval()
        x = torch.randn(1, 1, 8, 8, 8)
        with torch.no_grad():
            lhs = flipped(x.flip(2))
            rhs = net(x).flip(2)
        assert torch.allclose(lhs, rhs, atol=1e-5)


class TestHeads:
    def test_anatomy_probabilities_normalized(self):
        m = small_model()
        probs = m.predict_anatomy(m.forward_t1(torch.randn(2, 1, 8, 8, 8)))
        assert probs.shape[1] == NUM_ANATOMY_CLASSES
        assert torch.allclose(probs.sum(dim=1), torch.ones(2, 8, 8, 8), atol=1e-5)

    def test_row_permutation_permutes_channels(self):
        m = small_model()
        w = m.forward_t1(torch.randn(1, 1, 8, 8, 8))
        base = m.predict_anatomy(w)
        perm = torch.randperm(NUM_ANATOMY_CLASSES, generator=torch.Generator().manual_seed(0))
        with torch.no_grad():
            m.anatomy_head.conv.weight.copy_(m.anatomy_head.conv.weight[perm])
            m.anatomy_head.conv.bias.copy_(m.anatomy_head.conv.bias[perm])
        permuted = m.predict_anatomy(w)
        assert torch.allclose(permuted, base[:, perm], atol=1e-6)

    def test_lesion_head_two_channels_threshold_equals_argmax(self):
        m = small_model()
        probs = m.predict_lesion(m.forward_flair(torch.randn(1, 1, 8, 8, 8)))
        assert probs.shape[1] == 2
        thresh = probs[:, 1] > 0.5
        arg = probs.argmax(dim=1) == 1
        # voxels at exactly 0.5 tie; none occur for generic floats
        assert (thresh == arg).all()


class TestFusion:
    def test_probabilities_normalized(self):
        m = small_model()
        x = torch.randn(1, 1, 8, 8, 8)
        probs = m.fuse(m.forward_t1(x), m.forward_flair(x))
        assert probs.shape[1] == NUM_CLASSES
        assert torch.allclose(probs.sum(dim=1), torch.ones(1, 8, 8, 8), atol=1e-5)

    def test_zeroed_attention_gates_out_flair(self):
        m = small_model()
        with torch.no_grad():
            last = m.fusion.attention[-1]
            last.weight.zero_()
            last.bias.fill_(-1e4)  # sigmoid underflows to exactly 0
        x = torch.randn(1, 1, 8, 8, 8)
        w_t1 = m.forward_t1(x)
        out1 = m.fuse(w_t1, m.forward_flair(torch.randn(1, 1, 8, 8, 8)))
        out2 = m.fuse(w_t1, m.forward_flair(torch.randn(1, 1, 8, 8, 8)))
        assert (out1 == out2).all()

    def test_shape_mismatch_rejected(self):
        m = small_model()
        with pytest.raises(InputError):
            m.fuse(torch.randn(1, 4, 8, 8, 8), torch.randn(1, 4, 4, 4, 4))

    def test_gradient_wrt_fusion_params_matches_fd(self):
        torch.manual_seed(5)
        m = JointSegModel(SMALL).double()
        m.eval()
        x1 = torch.randn(1, 1, 8, 8, 8, dtype=torch.float64)
        x2 = torch.randn(1, 1, 8, 8, 8, dtype=torch.float64)
        with torch.no_grad():
            w1, w2 = m.forward_t1(x1), m.forward_flair(x2)
        weight = m.fusion.classifier.weight

        def f():
            return (m.fuse(w1, w2) ** 2).sum()

        (grad,) = torch.autograd.grad(f(), weight)
        h = 1e-6
        for c in [(0, 0, 0, 0, 0), (3, 2, 0, 0, 0)]:
            with torch.no_grad():
                weight[c] += h
            up = f().item()
            with torch.no_grad():
                weight[c] -= 2 * h
            down = f().item()
            with torch.no_grad():
                weight[c] += h
            fd = (up - down) / (2 * h)
            rel = abs(fd - float(grad[c])) / max(abs(fd), float(grad.abs().max()), 1e-12)
            assert rel < 1e-3


class TestParamSet:
    def test_arithmetic(self):
        m = small_model()
        theta = m.theta(detach=True)
        stepped = theta - 0.5 * theta
        for (n, a), b in zip(stepped.items(), theta.values()):
            assert torch.allclose(a, 0.5 * b)

    def test_name_mismatch_rejected(self):
        m = small_model()
        with pytest.raises(InputError):
            m.theta(detach=True) - m.psi(detach=True)

    def test_forward_with_override_does_not_mutate_module(self):
        m = small_model()
        x = torch.randn(1, 1, 8, 8, 8)
        before = m.theta(detach=True)
        other = ParamSet((n, t + 1.0) for n, t in m.theta(detach=True).items())
        out_base = m.forward_t1(x)
        out_other = m.forward_t1(x, theta=other)
        assert not torch.allclose(out_base, out_other)
        assert m.theta(detach=True).allclose(before)
        assert (m.forward_t1(x) == out_base).all()

    def test_checkpoint_round_trip_bit_exact(self, tmp_path):
        m = small_model(seed=11)
        path = tmp_path / "m.pt"
        save_checkpoint(path, "pretrained", m, extra={"branch": "anatomy"})
        loaded, meta = load_checkpoint(path, expect_stage="pretrained")
        assert meta["extra"]["branch"] == "anatomy"
        for a, b in zip(m.state_dict().values(), loaded.state_dict().values()):
            assert (a == b).all()

    def test_wrong_stage_refused(self, tmp_path):
        m = small_model()
        path = tmp_path / "m.pt"
        save_checkpoint(path, "pretrained", m)
        with pytest.raises(ConfigError):
            load_checkpoint(path, expect_stage="joint")

    def test_unknown_stage_tag_rejected(self, tmp_path):
        m = small_model()
        with pytest.raises(ConfigError):
            save_checkpoint(tmp_path / "x.pt", "warmup", m)


class TestLabelHelpers:
    def test_compress_and_expand_round_trip(self):
        ids = torch.tensor(ANATOMY_CLASS_IDS)
        comp = compress_anatomy_labels(ids)
        assert comp.tolist() == list(range(NUM_ANATOMY_CLASSES))

    def test_lesion_id_rejected(self):
        with pytest.raises(InputError):
            compress_anatomy_labels(torch.tensor([4]))

    def test_one_hot_and_argmax_round_trip(self):
        rng = np.random.default_rng(0)
        y = torch.tensor(rng.choice(ANATOMY_CLASS_IDS, size=(1, 4, 4, 4)).astype(np.int64))
        oh = anatomy_one_hot(y)
        ids = anatomy_probs_to_ids(oh)
        assert (ids == y).all()


def test_paper_scale_config():
    cfg = paper_scale_config()
    assert cfg.levels == 5 and cfg.base_filters == 16
    assert cfg.divisor == 16


def test_config_validation():
    with pytest.raises(ConfigError):
        ExtractorConfig(levels=1)
