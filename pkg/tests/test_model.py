"""Model contracts: prompts, streams, attention records, adapters, files."""

import numpy as np
import pytest

from icforge import autodiff as ad
from icforge import model as md
from icforge.checkpoint import TrainFlags, load_checkpoint, save_checkpoint
from icforge.errors import DimensionError, ValidationError

SMALL = md.ModelConfig(image_side=16, patch=4, d=32, heads=4, n_double=2,
                       n_single=2, d_t=32, d_c=16, seed=3)


@pytest.fixture
def rng():
    return np.random.default_rng(11)


def conditioned_inputs(cfg, rng, tag="cup"):
    model = md.CriticModel(cfg)
    z = ad.Tensor(rng.standard_normal((cfg.n_patches, cfg.d_latent)))
    ref = ad.Tensor(rng.standard_normal((cfg.n_patches, cfg.d_latent)))
    inp = ad.Tensor(rng.standard_normal((cfg.n_patches, cfg.d_latent)))
    return model, z, model.encode_prompt(tag), ref, inp


class TestConfigAndPrompt:
    def test_divisibility_enforced(self):
        with pytest.raises(ValidationError):
            md.ModelConfig(image_side=30, patch=4)
        with pytest.raises(ValidationError):
            md.ModelConfig(d=50, heads=4)

    def test_prompt_text_has_both_triggers(self):
        text = md.prompt_text("coffee cup")
        assert "IMG1" in text and "IMG2" in text
        assert text.count("coffee cup") == 2

    def test_trigger_ids_reserved_and_distinct(self):
        ids, pos = md.tokenize_prompt("cup")
        assert ids.count(md.IMG1_ID) == 1
        assert ids.count(md.IMG2_ID) == 1
        assert md.IMG1_ID != md.IMG2_ID
        assert ids[pos["ref"]] == md.IMG1_ID
        assert ids[pos["inp"]] == md.IMG2_ID

    def test_unknown_words_map_to_unk(self):
        ids, _ = md.tokenize_prompt("zeppelin")
        assert md.UNK_ID in ids

    def test_empty_tag_rejected(self):
        with pytest.raises(ValidationError):
            md.prompt_text("   ")
        with pytest.raises(ValidationError):
            md.tokenize_prompt("")


class TestPatchGeometry:
    def test_roundtrip_exact(self, rng):
        img = rng.random((16, 16, 3))
        tokens = md.patchify(img, 4)
        assert tokens.shape == (16, 48)
        assert np.array_equal(md.unpatchify(tokens, 16, 4), img)

    def test_patch_order_is_row_major(self):
        img = np.zeros((8, 8, 3))
        img[0:4, 4:8, 0] = 1.0  # grid cell (0, 1)
        tokens = md.patchify(img, 4)
        assert tokens[1].sum() == 16.0
        assert tokens[0].sum() == 0.0

    def test_bad_shapes(self, rng):
        with pytest.raises(DimensionError):
            md.patchify(rng.random((15, 16, 3)), 4)
        with pytest.raises(DimensionError):
            md.unpatchify(rng.random((9, 48)), 16, 4)


class TestForward:
    def test_output_shapes_and_record(self, rng):
        model, z, p, ref, inp = conditioned_inputs(SMALL, rng)
        vel, rec = model.forward(z, 0.5, p, ref, inp)
        assert vel.data.shape == (SMALL.n_patches, SMALL.d_latent)
        assert len(rec.ref_maps) == SMALL.n_double
        assert len(rec.inp_maps) == SMALL.n_double
        for m in rec.ref_maps + rec.inp_maps:
            assert m.data.shape == (SMALL.n_patches, SMALL.n_patches)

    def test_same_seed_bit_identical(self, rng):
        z_data = rng.standard_normal((SMALL.n_patches, SMALL.d_latent))
        c_data = rng.standard_normal((SMALL.n_patches, SMALL.d_latent))
        outs = []
        for _ in range(2):
            model = md.CriticModel(SMALL)
            vel, rec = model.forward(
                ad.Tensor(z_data), 0.25, model.encode_prompt("cup"),
                ad.Tensor(c_data), ad.Tensor(c_data))
            outs.append((vel.data.copy(), rec.ref_maps[0].data.copy()))
        assert np.array_equal(outs[0][0], outs[1][0])
        assert np.array_equal(outs[0][1], outs[1][1])

    def test_record_matches_out_of_band_recompute(self, rng):
        model, z, p, ref, inp = conditioned_inputs(SMALL, rng)
        captured = []
        _, rec = model.forward(z, 0.5, p, ref, inp, qk_capture=captured)
        n_tgt = SMALL.n_patches
        m = len(p.ids)
        dh = SMALL.d_head
        for layer, grab in enumerate(captured):
            q, k = grab["q"], grab["k"]
            ref_rows = slice(n_tgt + m, n_tgt + m + n_tgt)
            acc = np.zeros((n_tgt, n_tgt))
            for h in range(SMALL.heads):
                cols = slice(h * dh, (h + 1) * dh)
                acc += q[ref_rows, cols] @ k[:n_tgt, cols].T / np.sqrt(dh)
            acc /= SMALL.heads
            assert np.abs(acc - rec.ref_maps[layer].data).max() <= 1e-10

    def test_masked_conditions_equal_target_only(self, rng):
        model, z, p, ref, inp = conditioned_inputs(SMALL, rng)
        masked, _ = model.forward(z, 0.5, p, ref, inp, mask_conditions=True)
        bare, rec = model.forward(z, 0.5)
        assert rec.ref_maps == []
        assert np.allclose(masked.data, bare.data, rtol=0.0, atol=1e-12)

    def test_time_outside_unit_interval_rejected(self, rng):
        model, z, p, ref, inp = conditioned_inputs(SMALL, rng)
        with pytest.raises(ValidationError):
            model.forward(z, 1.5, p, ref, inp)

    def test_condition_grid_shape_enforced(self, rng):
        model, z, p, ref, inp = conditioned_inputs(SMALL, rng)
        bad = ad.Tensor(rng.standard_normal((SMALL.n_patches - 1, SMALL.d_latent)))
        with pytest.raises(DimensionError):
            model.forward(z, 0.5, p, bad, inp)


class TestDetailEncoder:
    def test_trigger_rows_differ_across_references(self, rng):
        model = md.CriticModel(SMALL)
        p = model.encode_prompt("cup")
        img_a = rng.integers(0, 255, size=(16, 16, 3), dtype=np.uint8)
        img_b = rng.integers(0, 255, size=(16, 16, 3), dtype=np.uint8)
        inp = rng.integers(0, 255, size=(16, 16, 3), dtype=np.uint8)
        fused_a = model.detail_encoder_fuse(
            p, model.embed_image(img_a), model.embed_image(inp))
        fused_b = model.detail_encoder_fuse(
            p, model.embed_image(img_b), model.embed_image(inp))
        ra = fused_a.hidden.data[p.trigger_pos["ref"]]
        rb = fused_b.hidden.data[p.trigger_pos["ref"]]
        assert not np.array_equal(ra, rb)
        # without fusing, the prompt encoding is reference independent
        assert np.array_equal(model.encode_prompt("cup").hidden.data,
                              model.encode_prompt("cup").hidden.data)

    def test_non_trigger_rows_unchanged(self, rng):
        model = md.CriticModel(SMALL)
        p = model.encode_prompt("cup")
        img = rng.integers(0, 255, size=(16, 16, 3), dtype=np.uint8)
        fused = model.detail_encoder_fuse(
            p, model.embed_image(img), model.embed_image(img))
        keep = [i for i in range(len(p.ids))
                if i not in p.trigger_pos.values()]
        assert np.array_equal(fused.hidden.data[keep], p.hidden.data[keep])

    def test_zeroed_mlp_zeroes_trigger_rows(self, rng):
        model = md.CriticModel(SMALL)
        model.linears["de.fc2"].w.data[:] = 0.0
        model.linears["de.fc2"].b.data[:] = 0.0
        p = model.encode_prompt("cup")
        img = rng.integers(0, 255, size=(16, 16, 3), dtype=np.uint8)
        fused = model.detail_encoder_fuse(
            p, model.embed_image(img), model.embed_image(img))
        for pos in p.trigger_pos.values():
            assert np.array_equal(fused.hidden.data[pos],
                                  np.zeros(SMALL.d_t))

    def test_black_image_embeds_to_bias(self):
        model = md.CriticModel(SMALL)
        emb = model.embed_image(np.zeros((16, 16, 3), dtype=np.uint8))
        assert np.array_equal(emb.vec.data[0],
                              model.linears["de.img_embed"].b.data)


class TestLora:
    def test_zero_init_is_noop(self, rng):
        model, z, p, ref, inp = conditioned_inputs(SMALL, rng)
        before, _ = model.forward(z, 0.5, p, ref, inp)
        model.add_adapters(rank=4)
        after, _ = model.forward(z, 0.5, p, ref, inp)
        assert np.array_equal(before.data, after.data)

    def test_merge_matches_adapted_forward(self, rng):
        model, z, p, ref, inp = conditioned_inputs(SMALL, rng)
        model.add_adapters(rank=4, scale=0.5)
        for layer in model.linears.values():
            if layer.lora_up is not None:
                layer.lora_up.data = rng.normal(0, 0.05, layer.lora_up.data.shape)
        adapted, _ = model.forward(z, 0.5, p, ref, inp)
        model.merge_adapters()
        merged, _ = model.forward(z, 0.5, p, ref, inp)
        assert np.abs(adapted.data - merged.data).max() <= 1e-10
        assert not any(l.lora_down is not None for l in model.linears.values())

    def test_full_rank_fit_reproduces_delta(self, rng):
        d = 6
        base = md.Linear(ad.Tensor(rng.normal(0, 1, (d, d)), requires_grad=True),
                         ad.Tensor(np.zeros(d), requires_grad=True))
        delta = rng.normal(0, 1, (d, d))
        md.lora_wrap(base, rank=d, scale=1.0, rng=rng)
        u, s, vt = np.linalg.svd(delta)
        base.lora_down.data = u * np.sqrt(s)
        base.lora_up.data = np.sqrt(s)[:, None] * vt
        x = rng.normal(0, 1, (3, d))
        want = x @ (base.w.data + delta)
        got = base(ad.Tensor(x)).data
        assert np.abs(want - got).max() < 1e-10

    def test_rank_bounds(self, rng):
        layer = md.Linear.build(rng, 8, 4)
        with pytest.raises(ValidationError):
            md.lora_wrap(layer, rank=5, scale=1.0)
        with pytest.raises(ValidationError):
            md.lora_wrap(layer, rank=0, scale=1.0)


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path, rng):
        model = md.CriticModel(SMALL)
        model.add_adapters(rank=2)
        flags = TrainFlags(with_aal=True, with_de=False, frozen_base=True,
                           lora_rank=2, lora_scale=1.0)
        extras = {"m.head.out.w": rng.normal(0, 1, (SMALL.d, SMALL.d_latent)),
                  "step_count": np.array([42.0])}
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model, flags, step=42, extras=extras)
        loaded, lflags, step, lextras = load_checkpoint(path)
        assert step == 42
        assert lflags == flags
        assert loaded.cfg == model.cfg
        for name, p in model.params.items():
            assert np.array_equal(loaded.params[name].data, p.data), name
        assert np.array_equal(lextras["m.head.out.w"], extras["m.head.out.w"])

    def test_saved_twice_identical_bytes(self, tmp_path):
        model = md.CriticModel(SMALL)
        a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
        save_checkpoint(a, model, TrainFlags())
        save_checkpoint(b, model, TrainFlags())
        assert a.read_bytes() == b.read_bytes()

    def test_magic_mismatch(self, tmp_path):
        path = tmp_path / "bad.ckpt"
        path.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
        with pytest.raises(ValidationError, match="magic"):
            load_checkpoint(path)

    def test_truncated_file(self, tmp_path):
        model = md.CriticModel(SMALL)
        path = tmp_path / "model.ckpt"
        save_checkpoint(path, model, TrainFlags())
        clipped = path.read_bytes()[:200]
        path.write_bytes(clipped)
        with pytest.raises(ValidationError, match="truncated"):
            load_checkpoint(path)


class TestSampling:
    def test_deterministic_given_seed(self, rng):
        model = md.CriticModel(SMALL)
        p = model.encode_prompt("cup")
        cond = ad.Tensor(rng.standard_normal((SMALL.n_patches, SMALL.d_latent)))
        a = md.sample(model, p, cond, cond, steps=4,
                      rng=np.random.default_rng(5))
        b = md.sample(model, p, cond, cond, steps=4,
                      rng=np.random.default_rng(5))
        assert np.array_equal(a, b)
        assert a.shape == (SMALL.n_patches, SMALL.d_latent)

    def test_step_count_validated(self):
        model = md.CriticModel(SMALL)
        with pytest.raises(ValidationError):
            md.sample(model, None, None, None, steps=0,
                      rng=np.random.default_rng(0))
