"""Network shape contracts, gradient correctness and checkpoints."""

import numpy as np
import pytest
import torch

from pcbdet.data import ImagePair
from pcbdet.geometry import NmsParams
from pcbdet.model import (
    CheckpointError,
    DefectDetector,
    GroupPyramidPooling,
    ModelConfig,
    ModelConfigError,
    PredictionHead,
    ShapeError,
    load_checkpoint,
    pair_to_tensors,
    pool_to_stride,
    save_checkpoint,
)

torch.set_num_threads(1)

TINY = ModelConfig(
    input_size=64,
    backbone_channels=(4, 8, 8, 8),
    fuse_channels=8,
    groups=((1, 2), (2, 4), (4,)),
    scales=(0.04, 0.08, 0.16),
)


def tiny_model(seed=0):
    torch.manual_seed(seed)
    return DefectDetector(TINY)


def random_pair(rng, size=64):
    return ImagePair(
        template=(rng.random((size, size)) < 0.25).astype(np.uint8),
        tested=(rng.random((size, size)) < 0.25).astype(np.uint8),
        source_id="t",
    )


class TestModelConfig:
    def test_default_grids_and_anchor_count(self):
        config = ModelConfig(input_size=512)
        assert config.feature_hw() == (32, 32)
        assert config.grid_dims() == ((32, 32), (16, 16), (8, 8))
        assert config.num_anchors() == 4032

    def test_native_size_grids(self):
        config = ModelConfig(input_size=512)
        assert config.grid_dims((640, 640)) == ((40, 40), (20, 20), (10, 10))

    def test_stride_exceeding_features_raises(self):
        with pytest.raises(ShapeError):
            ModelConfig(input_size=128).feature_hw()  # 8x8 map vs stride 12

    @pytest.mark.parametrize(
        "kwargs",
        [
            {"pool": "median"},
            {"groups": ()},
            {"groups": ((4, 2),)},
            {"groups": ((1, 2), (2, 4)), "scales": (0.04, 0.08, 0.16)},
            {"fuse_channels": 0},
        ],
    )
    def test_validation(self, kwargs):
        with pytest.raises(ModelConfigError):
            ModelConfig(**kwargs)

    def test_variants(self):
        assert ModelConfig.for_variant("ours-mp").pool == "max"
        assert ModelConfig.for_variant("ours-ap").pool == "avg"
        non = ModelConfig.for_variant("non-gpp")
        assert non.groups == ((1,), (4,), (12,))
        assert non.pool == "max"
        with pytest.raises(ModelConfigError):
            ModelConfig.for_variant("ours-gp")

    def test_dict_round_trip(self):
        config = ModelConfig.for_variant("non-gpp", input_size=256)
        assert ModelConfig.from_dict(config.to_dict()) == config


class TestPoolToStride:
    def test_stride_one_identity(self):
        x = torch.randn(1, 2, 5, 5)
        assert pool_to_stride(x, 1, "max") is x

    def test_ceil_output_dims(self):
        x = torch.randn(1, 1, 10, 7)
        assert pool_to_stride(x, 3, "max").shape == (1, 1, 4, 3)

    def test_replicate_padded_average(self):
        # 3x3 -> stride 2 pads right/bottom by edge replication
        x = torch.tensor([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.0]]).view(1, 1, 3, 3)
        out = pool_to_stride(x, 2, "avg")[0, 0]
        assert out[0, 0].item() == pytest.approx((1 + 2 + 4 + 5) / 4)
        assert out[0, 1].item() == pytest.approx((3 + 3 + 6 + 6) / 4)
        assert out[1, 1].item() == pytest.approx(9.0)

    def test_max_vs_avg(self):
        x = torch.tensor([[0.0, 4.0], [2.0, 1.0]]).view(1, 1, 2, 2)
        assert pool_to_stride(x, 2, "max").item() == 4.0
        assert pool_to_stride(x, 2, "avg").item() == pytest.approx(1.75)


class TestGroupPyramidPooling:
    def test_output_grids_follow_first_stride(self):
        gpp = GroupPyramidPooling(4, 6, ((1, 2, 4), (2, 4, 8), (4, 8, 12)), "max")
        maps = gpp(torch.randn(2, 4, 32, 32))
        assert [m.shape for m in maps] == [
            torch.Size([2, 6, 32, 32]),
            torch.Size([2, 6, 16, 16]),
            torch.Size([2, 6, 8, 8]),
        ]

    def test_oversized_stride_raises(self):
        gpp = GroupPyramidPooling(4, 6, ((1, 12),), "max")
        with pytest.raises(ShapeError):
            gpp(torch.randn(1, 4, 8, 8))


class TestPredictionHead:
    def test_channel_layout_ratio_major(self):
        head = PredictionHead(in_channels=3, num_groups=1, num_ratios=2)
        conv = head.convs[0]
        with torch.no_grad():
            conv.weight.zero_()
            conv.bias.copy_(torch.arange(conv.bias.numel(), dtype=conv.bias.dtype))
        h, w, r = 2, 3, 2
        logits, offsets = head([torch.zeros(1, 3, h, w)])
        assert logits.shape == (1, h * w * r, 7)
        assert offsets.shape == (1, h * w * r, 4)
        for cell in range(h * w):
            for ratio in range(r):
                row = cell * r + ratio
                base = ratio * 11
                assert logits[0, row].tolist() == list(range(base, base + 7))
                assert offsets[0, row].tolist() == list(range(base + 7, base + 11))


class TestDefectDetector:
    def test_forward_shapes_at_512(self):
        torch.manual_seed(0)
        model = DefectDetector(ModelConfig(input_size=512)).eval()
        t = torch.rand(1, 1, 512, 512).round()
        q = torch.rand(1, 1, 512, 512).round()
        with torch.no_grad():
            logits, offsets = model(t, q)
        assert logits.shape == (1, 4032, 7)
        assert offsets.shape == (1, 4032, 4)
        assert len(model.anchors_for()) == 4032

    def test_difference_sign(self):
        model = tiny_model().eval()
        t = torch.rand(1, 1, 64, 64)
        q = torch.rand(1, 1, 64, 64)
        with torch.no_grad():
            assert torch.equal(
                model.difference_features(t, q), -model.difference_features(q, t)
            )

    def test_pair_shape_mismatch_raises(self):
        model = tiny_model()
        with pytest.raises(ShapeError):
            model.difference_features(torch.rand(1, 1, 64, 64), torch.rand(1, 1, 32, 32))

    def test_identical_pair_equals_bias_only_pass(self):
        model = tiny_model().eval()
        rng = np.random.default_rng(3)
        pair = random_pair(rng)
        t, _ = pair_to_tensors(pair)
        with torch.no_grad():
            logits_a, offsets_a = model(t, t)
            fh, fw = model.config.feature_hw((64, 64))
            zero = torch.zeros(1, model.config.backbone_channels[-1], fh, fw)
            logits_b, offsets_b = model.forward_from_difference(zero)
        assert torch.equal(logits_a, logits_b)
        assert torch.equal(offsets_a, offsets_b)

    def test_detect_returns_valid_boxes(self):
        model = tiny_model()
        rng = np.random.default_rng(11)
        detections = model.detect(random_pair(rng), NmsParams(score_threshold=0.05))
        assert detections
        for d in detections:
            x1, y1, x2, y2 = d.box.corners()
            assert 0.0 <= x1 < x2 <= 1.0
            assert 0.0 <= y1 < y2 <= 1.0
            assert 1 <= d.class_id <= 6
        scores = [d.score for d in detections]
        assert scores == sorted(scores, reverse=True)

    def test_detect_restores_training_mode(self):
        model = tiny_model().train()
        rng = np.random.default_rng(1)
        model.detect(random_pair(rng))
        assert model.training

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(7)
        model = DefectDetector(TINY).double().eval()
        rng = np.random.default_rng(7)
        t = torch.tensor(rng.random((1, 1, 64, 64)), dtype=torch.float64)
        q = torch.tensor(rng.random((1, 1, 64, 64)), dtype=torch.float64)

        num_anchors = TINY.num_anchors()
        w_logits = torch.tensor(rng.normal(size=(1, num_anchors, 7)))
        w_offsets = torch.tensor(rng.normal(size=(1, num_anchors, 4)))

        def loss_value():
            logits, offsets = model(t, q)
            return (logits * w_logits).sum() + (offsets * w_offsets).sum()

        loss = loss_value()
        model.zero_grad()
        loss.backward()

        params = [(n, p) for n, p in model.named_parameters()]
        flat = [(n, p, i) for n, p in params for i in range(p.numel())]
        picks = rng.choice(len(flat), size=20, replace=False)
        # float64 keeps central differences accurate at this step size while
        # staying small enough not to cross relu/maxpool kinks (seed pinned)
        h = 1e-5
        for pick in picks:
            name, p, i = flat[int(pick)]
            analytic = p.grad.view(-1)[i].item()
            with torch.no_grad():
                orig = p.view(-1)[i].item()
                p.view(-1)[i] = orig + h
                up = loss_value().item()
                p.view(-1)[i] = orig - h
                down = loss_value().item()
                p.view(-1)[i] = orig
            numeric = (up - down) / (2 * h)
            scale = max(abs(analytic), abs(numeric), 1e-8)
            assert abs(analytic - numeric) / scale < 1e-2, (
                f"{name}[{i}]: analytic {analytic:.6g} vs numeric {numeric:.6g}"
            )


class TestCheckpoints:
    def test_round_trip_preserves_behavior(self, tmp_path):
        model = tiny_model(seed=4)
        path = tmp_path / "ck.pt"
        save_checkpoint(path, model, epoch=7, metadata={"note": "x"})
        loaded, payload = load_checkpoint(path)
        assert payload["epoch"] == 7
        assert payload["metadata"]["note"] == "x"
        assert loaded.config == model.config
        for a, b in zip(model.state_dict().values(), loaded.state_dict().values()):
            assert torch.equal(a, b)
        rng = np.random.default_rng(2)
        pair = random_pair(rng)
        assert model.detect(pair) == loaded.detect(pair)

    def test_optimizer_state_saved(self, tmp_path):
        model = tiny_model()
        opt = torch.optim.Adam(model.parameters())
        path = tmp_path / "ck.pt"
        save_checkpoint(path, model, epoch=1, optimizer=opt)
        _, payload = load_checkpoint(path)
        assert payload["optimizer_state"] is not None

    def test_missing_key_rejected(self, tmp_path):
        model = tiny_model()
        path = tmp_path / "ck.pt"
        save_checkpoint(path, model, epoch=1)
        payload = torch.load(path, weights_only=False)
        del payload["model_state"]
        torch.save(payload, path)
        with pytest.raises(CheckpointError):
            load_checkpoint(path)

    def test_shape_mismatch_rejected(self, tmp_path):
        model = tiny_model()
        path = tmp_path / "ck.pt"
        save_checkpoint(path, model, epoch=1)
        payload = torch.load(path, weights_only=False)
        payload["model_config"]["fuse_channels"] = 16
        torch.save(payload, path)
        with pytest.raises(CheckpointError, match="fuse|shape|state"):
            load_checkpoint(path)

    def test_unknown_version_rejected(self, tmp_path):
        model = tiny_model()
        path = tmp_path / "ck.pt"
        save_checkpoint(path, model, epoch=1)
        payload = torch.load(path, weights_only=False)
        payload["format_version"] = 99
        torch.save(payload, path)
        with pytest.raises(CheckpointError, match="version"):
            load_checkpoint(path)

    def test_unreadable_file_rejected(self, tmp_path):
        path = tmp_path / "ck.pt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError):
            load_checkpoint(path)
