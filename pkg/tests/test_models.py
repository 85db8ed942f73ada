import pytest
import torch

from ui2i.models import (ContentDiscriminator, DomainDiscriminator,
                         GeneratorConfig, GeneratorPair, absn_exempt_layers,
                         load_checkpoint, save_checkpoint)

SMALL = GeneratorConfig(channels_a=3, channels_b=3, base_width=8, levels=2,
                        attention_levels=(2,))


def param_checksums(module):
    return {name: p.detach().clone() for name, p in module.named_parameters()}


class TestGenerator:
    def test_shapes_at_256_with_default_config(self):
        cfg = GeneratorConfig(channels_a=3, channels_b=3)
        pair = GeneratorPair(cfg)
        with torch.no_grad():
            image, z = pair.translate(torch.randn(1, 3, 256, 256), "ab")
        assert image.shape == (1, 3, 256, 256)
        assert z.shape == (1, 512, 32, 32)

    def test_unmixing_channel_mapping(self):
        cfg = GeneratorConfig(channels_a=2, channels_b=1, base_width=8, levels=2)
        pair = GeneratorPair(cfg)
        with torch.no_grad():
            image, _ = pair.translate(torch.randn(1, 1, 64, 64), "ba")
        assert image.shape == (1, 2, 64, 64)

    def test_output_inside_tanh_range(self):
        pair = GeneratorPair(SMALL)
        with torch.no_grad():
            image, _ = pair.translate(torch.randn(1, 3, 32, 32) * 50, "ab")
        assert image.abs().max() < 1.0

    def test_indivisible_spatial_size_rejected(self):
        pair = GeneratorPair(SMALL)
        with pytest.raises(ValueError):
            pair.translate(torch.randn(1, 3, 30, 32), "ab")

    def test_wrong_channel_count_rejected(self):
        pair = GeneratorPair(SMALL)
        with pytest.raises(ValueError):
            pair.translate(torch.randn(1, 4, 32, 32), "ab")

    def test_forward_deterministic(self):
        pair = GeneratorPair(SMALL)
        x = torch.randn(1, 3, 16, 16)
        with torch.no_grad():
            a, _ = pair.translate(x, "ab")
            b, _ = pair.translate(x, "ab")
        assert torch.equal(a, b)

    def test_bottleneck_physically_shared(self):
        pair = GeneratorPair(SMALL).init_parameters(0, 0.0, 0.0)
        x = torch.randn(1, 3, 16, 16)
        y = torch.randn(1, 3, 16, 16)
        with torch.no_grad():
            before_ba, _ = pair.translate(y, "ba")
        before = param_checksums(pair)

        opt = torch.optim.SGD(pair.parameters(), lr=0.1)
        image, _ = pair.translate(x, "ab")
        image.abs().mean().backward()
        opt.step()

        after = param_checksums(pair)
        bottleneck_changed = any(
            not torch.equal(before[n], after[n])
            for n in before if n.startswith("bottleneck."))
        assert bottleneck_changed
        # An A->B loss must not touch the reverse direction's own modules...
        for name in before:
            if name.startswith(("encoder_b.", "decoder_a.")):
                assert torch.equal(before[name], after[name]), name
        # ...yet B->A output still changes, because the bottleneck storage is shared.
        with torch.no_grad():
            after_ba, _ = pair.translate(y, "ba")
        assert not torch.equal(before_ba, after_ba)

    def test_absn_exemptions_exactly_output_and_attention_final(self):
        cfg = GeneratorConfig(channels_a=3, channels_b=3, base_width=8, levels=3,
                              attention_levels=(2, 3))
        pair = GeneratorPair(cfg)
        exempt = set(absn_exempt_layers(pair))
        expected = {
            "decoder_a.output_conv", "decoder_b.output_conv",
            "encoder_a.blocks.1.attention.spatial_conv",
            "encoder_a.blocks.2.attention.spatial_conv",
            "encoder_b.blocks.1.attention.spatial_conv",
            "encoder_b.blocks.2.attention.spatial_conv",
        }
        assert exempt == expected

    def test_decoder_channel_law(self):
        cfg = GeneratorConfig(channels_a=1, channels_b=1, base_width=8, levels=3)
        pair = GeneratorPair(cfg)
        for decoder in (pair.decoder_a, pair.decoder_b):
            for block in decoder.blocks:
                assert block.cfg.out_channels == 2 * block.cfg.skip_channels

    def test_bottleneck_features_match_translate(self):
        pair = GeneratorPair(SMALL)
        x = torch.randn(1, 3, 16, 16)
        with torch.no_grad():
            _, z = pair.translate(x, "ab")
            z_only = pair.bottleneck_features(x, "a")
        assert torch.equal(z, z_only)

    def test_attention_levels_validated(self):
        with pytest.raises(ValueError):
            GeneratorConfig(channels_a=1, channels_b=1, levels=2, attention_levels=(3,))


class TestDomainDiscriminator:
    def test_three_class_patch_map_at_256(self):
        d = DomainDiscriminator(6, three_class=True)
        with torch.no_grad():
            out = d(torch.randn(1, 6, 256, 256))
        assert out.shape == (1, 2, 32, 32)

    def test_two_class_single_channel(self):
        d = DomainDiscriminator(4, three_class=False)
        with torch.no_grad():
            out = d(torch.randn(1, 4, 64, 64))
        assert out.shape[1] == 1

    def test_batch_permutation_equivariance(self):
        d = DomainDiscriminator(2, three_class=True)
        x = torch.randn(3, 2, 64, 64)
        with torch.no_grad():
            out = d(x)
            flipped = d(x.flip(0))
        assert torch.allclose(out.flip(0), flipped, atol=1e-6)

    def test_channel_mismatch_rejected(self):
        d = DomainDiscriminator(6)
        with pytest.raises(ValueError):
            d(torch.randn(1, 4, 64, 64))

    def test_layer_widths(self):
        d = DomainDiscriminator(6)
        convs = [m for m in d.net if hasattr(m, "weight")]
        assert [c.weight.shape[0] for c in convs] == [128, 256, 512, 1024, 2]
        assert convs[0].weight.shape[2:] == (8, 8)
        assert all(c.normalize for c in convs)


class TestContentDiscriminator:
    def test_patch_map_shape(self):
        d = ContentDiscriminator(512)
        with torch.no_grad():
            out = d(torch.randn(1, 512, 32, 32))
        assert out.shape == (1, 1, 16, 16)

    def test_identical_inputs_identical_scores(self):
        d = ContentDiscriminator(64)
        z = torch.randn(1, 64, 8, 8)
        with torch.no_grad():
            out = d(torch.cat([z, z], dim=0))
        assert torch.equal(out[0], out[1])

    def test_scores_unbounded(self):
        d = ContentDiscriminator(8)
        with torch.no_grad():
            d.net[-1].bias.fill_(5.0)
            out = d(torch.zeros(1, 8, 8, 8))
        assert out.max() > 1.0


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path):
        pair = GeneratorPair(SMALL)
        tensors = {name: p.detach().clone() for name, p in pair.named_parameters()}
        metadata = {"iteration": 3, "seed": 1, "config": {"x": 1}}
        path = tmp_path / "ckpt.pt"
        save_checkpoint(path, tensors, metadata, extra={"note": [1, 2]})
        payload = load_checkpoint(path)
        assert payload["metadata"] == metadata
        assert payload["extra"] == {"note": [1, 2]}
        assert payload["tensors"].keys() == tensors.keys()
        for name in tensors:
            assert torch.equal(payload["tensors"][name], tensors[name])

    def test_version_check(self, tmp_path):
        path = tmp_path / "bad.pt"
        torch.save({"format_version": 999}, path)
        with pytest.raises(ValueError):
            load_checkpoint(path)
