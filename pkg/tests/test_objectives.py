"""Objective oracles: mask pooling, alignment terms, flow samples, Adam."""

import numpy as np
import pytest

from icforge import autodiff as ad
from icforge import objectives as ob
from icforge.errors import DimensionError, ValidationError
from icforge.model import AttentionRecord, CriticModel, ModelConfig, patchify

TINY = ModelConfig(image_side=8, patch=4, d=16, heads=2, n_double=1,
                   n_single=1, d_t=16, d_c=8, seed=5)


@pytest.fixture
def rng():
    return np.random.default_rng(23)


def make_item(rng, side=8):
    mask = np.zeros((side, side), dtype=np.uint8)
    mask[0:side // 2, 0:side // 2] = 1
    return ob.TrainItem(
        reference=rng.random((side, side, 3)),
        degraded=rng.random((side, side, 3)),
        target=rng.random((side, side, 3)),
        object_mask=mask,
        tag="cup",
    )


class TestTokenMask:
    def test_quadrant_example(self):
        subject = np.zeros((8, 8), dtype=np.uint8)
        subject[0:4, 0:4] = 1
        grid = ob.make_token_mask(subject, 4)
        assert np.array_equal(grid.values, np.array([0.0, 1.0, 1.0, 1.0]))

    def test_ties_go_to_background(self):
        subject = np.zeros((4, 4), dtype=np.uint8)
        subject[0:2, :] = 1  # exactly half of the single 4x4 patch
        grid = ob.make_token_mask(subject, 4)
        assert np.array_equal(grid.values, np.array([1.0]))

    def test_majority_subject_is_subject(self):
        subject = np.zeros((4, 4), dtype=np.uint8)
        subject[0:3, :] = 1
        grid = ob.make_token_mask(subject, 4)
        assert np.array_equal(grid.values, np.array([0.0]))

    def test_shape_validation(self):
        with pytest.raises(DimensionError):
            ob.make_token_mask(np.zeros((6, 6)), 4)
        with pytest.raises(ValidationError):
            ob.MaskGrid(np.array([0.0, 2.0]))


class TestRectView:
    def test_square_box_upsamples_to_the_model_side(self, rng):
        item = make_item(rng)
        view = ob.rect_view(item, (0, 0, 4, 4), 8)
        want = item.reference[0:4, 0:4].repeat(2, axis=0).repeat(2, axis=1)
        np.testing.assert_array_equal(view.reference, want)
        np.testing.assert_array_equal(
            view.object_mask,
            item.object_mask[0:4, 0:4].repeat(2, axis=0).repeat(2, axis=1))
        assert view.tag == item.tag

    def test_all_three_frames_share_the_cut(self, rng):
        item = make_item(rng)
        view = ob.rect_view(item, (2, 1, 7, 6), 8)
        for frame in (view.reference, view.degraded, view.target):
            assert frame.shape == (8, 8, 3)
        assert view.object_mask.shape == (8, 8)
        assert set(np.unique(view.object_mask)) <= {0, 1}

    def test_degenerate_box_rejected(self, rng):
        item = make_item(rng)
        with pytest.raises(ValidationError):
            ob.rect_view(item, (3, 3, 3, 5), 8)
        with pytest.raises(ValidationError):
            ob.rect_view(item, (4, 2, 2, 5), 8)


class TestAlignmentLoss:
    def test_hand_case(self):
        rec = AttentionRecord(
            ref_maps=[ad.Tensor(np.array([[1.0, 5.0]]))],
            inp_maps=[ad.Tensor(np.array([[7.0, 3.0]]))],
        )
        mask = ob.MaskGrid(np.array([0, 1]))
        l_ref, l_inp = ob.attention_alignment_loss(rec, mask)
        assert l_ref.item() == 0.5
        assert l_inp.item() == 0.5

    def test_layer_averaging(self):
        one = ad.Tensor(np.array([[1.0, 5.0]]))
        flat = ad.Tensor(np.array([[2.0, 2.0]]))  # degenerate map contributes 0
        rec = AttentionRecord(ref_maps=[one, flat], inp_maps=[flat, flat])
        mask = ob.MaskGrid(np.array([0, 1]))
        l_ref, l_inp = ob.attention_alignment_loss(rec, mask)
        assert l_ref.item() == 0.25
        assert l_inp.item() == 0.0

    def test_frozen_bounds_match_live_at_base(self, rng):
        maps = [ad.Tensor(rng.standard_normal((3, 4))) for _ in range(4)]
        rec = AttentionRecord(ref_maps=maps[:2], inp_maps=maps[2:])
        mask = ob.MaskGrid((rng.random(4) > 0.5).astype(int))
        live = ob.attention_alignment_loss(rec, mask)
        frozen = ob.attention_alignment_loss(rec, mask, ob.record_bounds(rec))
        assert live[0].item() == frozen[0].item()
        assert live[1].item() == frozen[1].item()

    def test_mask_length_checked(self, rng):
        rec = AttentionRecord(
            ref_maps=[ad.Tensor(rng.standard_normal((2, 4)))],
            inp_maps=[ad.Tensor(rng.standard_normal((2, 4)))],
        )
        with pytest.raises(DimensionError):
            ob.attention_alignment_loss(rec, ob.MaskGrid(np.array([0, 1])))

    def test_empty_record_rejected(self):
        with pytest.raises(ValidationError):
            ob.attention_alignment_loss(AttentionRecord(), ob.MaskGrid(np.array([1])))


class TestBackgroundMass:
    def _mask(self):
        subject = np.zeros((8, 8), dtype=np.uint8)
        subject[:, 0:4] = 1
        # patch 4 -> 2x2 token grid, left column subject, right background
        return ob.make_token_mask(subject, 4)

    def test_uniform_logits_split_mass_evenly(self):
        rec = AttentionRecord(ref_maps=[ad.Tensor(np.zeros((1, 4)))])
        assert ob.background_attention_mass(rec, self._mask()) == \
            pytest.approx(0.5)

    def test_suppressed_background_drains_the_mass(self):
        lo = -1e3
        logits = np.array([[0.0, lo, 0.0, lo]])
        rec = AttentionRecord(ref_maps=[ad.Tensor(logits)])
        assert ob.background_attention_mass(rec, self._mask()) == \
            pytest.approx(0.0, abs=1e-12)

    def test_rows_and_blocks_average(self):
        lo = -1e3
        drained = np.array([[0.0, lo, 0.0, lo]])
        flooded = np.array([[lo, 0.0, lo, 0.0]])
        rec = AttentionRecord(ref_maps=[ad.Tensor(np.vstack([drained, flooded])),
                                        ad.Tensor(drained)])
        # first block: rows at 0 and 1 average to 0.5; second block: 0
        assert ob.background_attention_mass(rec, self._mask()) == \
            pytest.approx(0.25, abs=1e-12)

    def test_empty_record_rejected_for_mass(self):
        with pytest.raises(ValidationError):
            ob.background_attention_mass(AttentionRecord(), self._mask())


class TestFlowSample:
    def test_interpolation_exact(self, rng):
        z = rng.standard_normal((4, 6))
        eps = rng.standard_normal((4, 6))
        t = 0.375
        fs = ob.flow_sample(z, eps, t)
        assert np.array_equal(fs.z_t.data, (1 - t) * z + t * eps)
        assert np.array_equal(fs.v_star.data, eps - z)

    def test_time_range(self, rng):
        z = rng.standard_normal((2, 2))
        with pytest.raises(ValidationError):
            ob.flow_sample(z, z, -0.1)
        with pytest.raises(ValidationError):
            ob.flow_sample(z, z, 1.1)

    def test_loss_zero_on_exact_prediction(self, rng):
        v = ad.Tensor(rng.standard_normal((3, 3)))
        assert ob.diffusion_loss(v, ad.Tensor(v.data.copy())).item() == 0.0


class TestTotalLoss:
    def test_unit_weights(self):
        out = ob.total_loss(0.25, 0.5, 0.125)
        assert out.total == 0.875
        assert (out.l_diff, out.l_ref, out.l_inp) == (0.25, 0.5, 0.125)


class TestAdam:
    def test_first_step_closed_form(self):
        p = ad.Tensor(np.array([1.0]), requires_grad=True)
        p.grad = np.array([2.0])
        opt = ob.Adam(lr=0.01)
        opt.step({"w": p})
        want = 1.0 - 0.01 * 2.0 / (2.0 + 1e-8)
        assert abs(p.data[0] - want) < 1e-15

    def test_quadratic_descends(self):
        p = ad.Tensor(np.array([3.0]), requires_grad=True)
        opt = ob.Adam(lr=0.1)
        for _ in range(200):
            p.grad = 2.0 * p.data
            opt.step({"w": p})
        assert abs(p.data[0]) < 0.2

    def test_state_roundtrip(self, rng):
        p = ad.Tensor(rng.standard_normal(4), requires_grad=True)
        opt = ob.Adam(lr=0.05)
        for _ in range(3):
            p.grad = p.data.copy()
            opt.step({"w": p})
        clone = ob.Adam(lr=0.05)
        clone.load_state(opt.export_state())
        assert clone.step_count == opt.step_count
        assert np.array_equal(clone.m["w"], opt.m["w"])
        assert np.array_equal(clone.v["w"], opt.v["w"])


class TestTrainStep:
    def test_loss_decreases_on_fixed_batch(self, rng):
        model = CriticModel(TINY)
        items = [make_item(rng) for _ in range(4)]
        opt = ob.Adam(lr=3e-3)
        first = None
        last = None
        for s in range(40):
            log = ob.train_step(model, items, opt, np.random.default_rng(s),
                                step=s + 1)
            if first is None:
                first = log.losses.total
            last = log.losses.total
        assert last < first

    def test_bit_identical_given_seed(self, rng):
        items = [make_item(rng) for _ in range(3)]
        finals = []
        for _ in range(2):
            model = CriticModel(TINY)
            opt = ob.Adam(lr=1e-3)
            ob.run_training(model, items, steps=5, opt=opt, seed=9)
            finals.append({k: v.data.copy() for k, v in model.params.items()})
        for key in finals[0]:
            assert np.array_equal(finals[0][key], finals[1][key]), key

    def test_frozen_base_touches_only_adapters_and_de(self, rng):
        model = CriticModel(TINY)
        model.add_adapters(rank=2)
        before = {k: v.data.copy() for k, v in model.params.items()}
        items = [make_item(rng) for _ in range(2)]
        opt = ob.Adam(lr=1e-2)
        ob.run_training(model, items, steps=3, opt=opt, seed=1,
                        frozen_base=True)
        changed = {k for k, v in model.params.items()
                   if not np.array_equal(before[k], v.data)}
        assert changed
        for name in changed:
            assert ".lora_" in name or name.startswith("de."), name
        # and the adapters themselves moved
        assert any(".lora_" in name for name in changed)

    def test_log_lines_carry_all_fields(self, rng, tmp_path):
        model = CriticModel(TINY)
        items = [make_item(rng)]
        path = tmp_path / "train.log"
        with open(path, "w") as fh:
            ob.run_training(model, items, steps=2, opt=ob.Adam(), seed=0,
                            log_fh=fh)
        import json
        lines = path.read_text().splitlines()
        assert len(lines) == 2
        for i, line in enumerate(lines):
            entry = json.loads(line)
            assert set(entry) == {"step", "l_diff", "l_ref", "l_inp",
                                  "total", "wall_ms"}
            assert entry["step"] == i + 1

    def test_single_class_views_train_flow_only(self, rng):
        # a view whose token mask has one class carries no alignment
        # signal; the step must keep its flow term and keep the alignment
        # terms exactly as if the view were absent
        multi = make_item(rng)
        solid = np.ones((8, 8), dtype=np.uint8)
        single = ob.TrainItem(
            reference=rng.random((8, 8, 3)), degraded=rng.random((8, 8, 3)),
            target=rng.random((8, 8, 3)), object_mask=solid, tag="cup")

        log_multi = ob.train_step(CriticModel(TINY), [multi], ob.Adam(lr=0.0),
                                  np.random.default_rng(3))
        log_mixed = ob.train_step(CriticModel(TINY), [multi, single],
                                  ob.Adam(lr=0.0), np.random.default_rng(3))
        assert log_mixed.losses.l_ref == pytest.approx(
            log_multi.losses.l_ref / 2, rel=1e-12)
        assert log_mixed.losses.l_inp == pytest.approx(
            log_multi.losses.l_inp / 2, rel=1e-12)
        assert log_mixed.losses.l_diff > 0.0

        log_solo = ob.train_step(CriticModel(TINY), [single], ob.Adam(lr=0.0),
                                 np.random.default_rng(3))
        assert log_solo.losses.l_ref == 0.0
        assert log_solo.losses.l_inp == 0.0
        assert log_solo.losses.total == pytest.approx(log_solo.losses.l_diff)

    def test_empty_batch_rejected(self):
        model = CriticModel(TINY)
        with pytest.raises(ValidationError):
            ob.train_step(model, [], ob.Adam(), np.random.default_rng(0))


class TestFullObjectiveGradient:
    def test_matches_finite_differences(self, rng):
        model = CriticModel(TINY)
        item = make_item(rng)
        t = 0.4
        eps = rng.standard_normal((TINY.n_patches, TINY.d_latent))
        mask = ob.make_token_mask(item.object_mask, TINY.patch)
        bounds = []

        def loss_fn():
            fs = ob.flow_sample(patchify(item.target, TINY.patch), eps, t)
            prompt = model.detail_encoder_fuse(
                model.encode_prompt(item.tag),
                model.embed_image(item.reference),
                model.embed_image(item.degraded),
            )
            vel, rec = model.forward(
                fs.z_t, fs.t, prompt,
                ad.Tensor(patchify(item.reference, TINY.patch)),
                ad.Tensor(patchify(item.degraded, TINY.patch)))
            l_ref, l_inp = ob.attention_alignment_loss(
                rec, mask, frozen_bounds=bounds[0] if bounds else None)
            if not bounds:
                bounds.append(ob.record_bounds(rec))
                l_ref, l_inp = ob.attention_alignment_loss(
                    rec, mask, frozen_bounds=bounds[0])
            return ad.add(ad.add(ob.diffusion_loss(vel, fs.v_star), l_ref), l_inp)

        err = ad.grad_check_params(loss_fn, model.params, per_param=2,
                                   rng=np.random.default_rng(2))
        assert err < 1e-4
