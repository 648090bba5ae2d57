import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdfsl import tensor as T
from cdfsl.errors import ConsistencyError, ValidationError
from cdfsl.model import (
    ClipSpec,
    EncoderConfig,
    MaskPlan,
    ModelConfig,
    classify,
    encode,
    forward_logits,
    init_encoder,
    init_head,
    mae_forward,
    mae_loss,
    masked_count,
    normalized_patches,
    patchify,
    sample_mask,
    standardize,
    tokenize,
)
from cdfsl.params import ModelParams
from cdfsl.tensor import Tensor

from conftest import TINY, generic_params, random_clips


def tube_slices(spec: ClipSpec, token: int):
    gt, gh, gw = spec.grid
    t, rem = divmod(token, gh * gw)
    h, w = divmod(rem, gw)
    return (
        slice(t * spec.patch_t, (t + 1) * spec.patch_t),
        slice(None),
        slice(h * spec.patch_h, (h + 1) * spec.patch_h),
        slice(w * spec.patch_w, (w + 1) * spec.patch_w),
    )


class TestClipSpec:
    def test_default_geometry(self):
        spec = ClipSpec()
        assert spec.token_count == 64 and spec.patch_dim == 96

    def test_small_example(self):
        assert ClipSpec(4, 3, 8, 8, 2, 2, 2).token_count == 32

    @settings(max_examples=100, deadline=None)
    @given(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4), st.integers(1, 4))
    def test_token_count_formula(self, gt, gh, gw, pt, ph, pw):
        if gt * gh * gw < 4:
            with pytest.raises(ValidationError):
                ClipSpec(gt * pt, 3, gh * ph, gw * pw, pt, ph, pw)
            return
        spec = ClipSpec(gt * pt, 3, gh * ph, gw * pw, pt, ph, pw)
        assert spec.token_count == gt * gh * gw
        assert patchify(np.zeros(spec.clip_shape), spec).shape == (gt * gh * gw, pt * ph * pw * 3)

    def test_indivisible_rejected(self):
        with pytest.raises(ValidationError):
            ClipSpec(7, 3, 16, 16, 2, 4, 4)

    def test_too_few_tokens_rejected(self):
        with pytest.raises(ValidationError):
            ClipSpec(2, 3, 4, 4, 2, 4, 4)


class TestEncoderConfig:
    def test_depth_zero_rejected(self):
        with pytest.raises(ValidationError):
            EncoderConfig(depth=0)

    def test_heads_must_divide(self):
        with pytest.raises(ValidationError):
            EncoderConfig(embed_dim=30, heads=4)

    def test_round_trip(self):
        cfg = ModelConfig()
        assert ModelConfig.from_dict(cfg.to_dict()) == cfg


class TestTokenize:
    def test_zero_clip_gives_bias(self):
        p = init_encoder(TINY, np.random.default_rng(0), decoder=False)
        p["pos_embed"].data[:] = 0.0
        p["patch_embed.bias"].data[:] = np.arange(8.0)
        tokens = tokenize(np.zeros(TINY.clip.clip_shape), TINY.clip, p)
        np.testing.assert_array_equal(tokens.data, np.tile(np.arange(8.0), (TINY.clip.token_count, 1)))

    def test_patch_permutation_permutes_tokens(self):
        spec = TINY.clip
        p = init_encoder(TINY, np.random.default_rng(0), decoder=False)
        p["pos_embed"].data[:] = 0.0
        clip = random_clips(spec, 1, 3)[0]
        swapped = clip.copy()
        a, b = tube_slices(spec, 1), tube_slices(spec, 6)
        swapped[a], swapped[b] = clip[b], clip[a]
        t0 = tokenize(clip, spec, p).data
        t1 = tokenize(swapped, spec, p).data
        order = np.arange(spec.token_count)
        order[[1, 6]] = [6, 1]
        np.testing.assert_allclose(t1, t0[order], atol=1e-15)

    def test_patch_vector_matches_direct_slice(self):
        spec = ClipSpec()
        clip = random_clips(spec, 1, 0)[0]
        patches = patchify(clip, spec)
        for token in (0, 17, 63):
            tt, _, hh, ww = tube_slices(spec, token)
            direct = clip[tt, :, hh, ww].transpose(0, 2, 3, 1).reshape(-1)
            np.testing.assert_array_equal(patches[token], direct)

    def test_shape_mismatch(self):
        p = init_encoder(TINY, np.random.default_rng(0), decoder=False)
        with pytest.raises(ValidationError):
            tokenize(np.zeros((4, 3, 8, 9)), TINY.clip, p)

    def test_standardize_default_constants(self):
        spec = ClipSpec()
        np.testing.assert_allclose(standardize(np.array([0.1, 0.35]), spec), [0.0, 1.0])


class TestEncode:
    def params(self, seed=0):
        return generic_params(TINY, None, seed).without(["decoder"])

    def test_duplicated_tokens_give_identical_outputs(self):
        p = self.params()
        row = np.random.default_rng(1).normal(size=8)
        tokens = Tensor(np.tile(row, (6, 1)))
        feats, _ = encode(tokens, p, TINY.encoder)
        np.testing.assert_allclose(feats.data, np.tile(feats.data[0], (6, 1)), atol=1e-14)

    def test_permutation_equivariance(self):
        p = self.params()
        x = np.random.default_rng(2).normal(size=(10, 8))
        perm = np.random.default_rng(3).permutation(10)
        f0, p0 = encode(Tensor(x), p, TINY.encoder)
        f1, p1 = encode(Tensor(x[perm]), p, TINY.encoder)
        np.testing.assert_allclose(f1.data, f0.data[perm], atol=1e-12)
        np.testing.assert_allclose(p1.data, p0.data, atol=1e-12)

    @pytest.mark.parametrize("n_keep", [1, 2, 7, 16])
    def test_pooled_shape_for_any_kept_count(self, n_keep):
        p = self.params()
        tokens = Tensor(np.random.default_rng(0).normal(size=(16, 8)))
        mask = np.ones(16, dtype=bool)
        mask[:n_keep] = False
        ratio = (16 - n_keep) / 16
        if n_keep == 16:
            feats, pooled = encode(tokens, p, TINY.encoder)
        else:
            feats, pooled = encode(tokens, p, TINY.encoder, MaskPlan(mask, ratio))
        assert feats.shape == (n_keep, 8) and pooled.shape == (8,)

    def test_pooled_is_mean_of_outputs(self):
        p = self.params()
        feats, pooled = encode(Tensor(np.random.default_rng(0).normal(size=(2, 9, 8))), p, TINY.encoder)
        np.testing.assert_allclose(pooled.data, feats.data.mean(axis=1), atol=1e-15)

    def test_deterministic(self):
        p = self.params()
        x = Tensor(np.random.default_rng(0).normal(size=(9, 8)))
        np.testing.assert_array_equal(encode(x, p, TINY.encoder)[1].data, encode(x, p, TINY.encoder)[1].data)

    def test_zero_tokens_rejected(self):
        with pytest.raises(ValidationError):
            encode(Tensor(np.zeros((0, 8))), self.params(), TINY.encoder)


class TestMasking:
    @pytest.mark.parametrize("L,ratio,expected", [(64, 0.75, 48), (10, 0.25, 3), (10, 0.35, 4), (4, 0.5, 2)])
    def test_masked_count(self, L, ratio, expected):
        assert masked_count(L, ratio) == expected

    @settings(max_examples=100, deadline=None)
    @given(st.integers(4, 200), st.floats(0.05, 0.95), st.integers(0, 2**31))
    def test_sampled_plan_hides_exact_count(self, L, ratio, seed):
        n = masked_count(L, ratio)
        if n < 1 or n >= L:
            with pytest.raises(ValidationError):
                sample_mask(L, ratio, np.random.default_rng(seed))
            return
        plan = sample_mask(L, ratio, np.random.default_rng(seed))
        assert plan.mask.sum() == n
        assert len(plan.keep_index) + len(plan.mask_index) == L

    def test_wrong_count_rejected(self):
        with pytest.raises(ValidationError):
            MaskPlan(np.array([True, False, False, False]), 0.5)


class TestMAE:
    def setup_method(self):
        self.cfg = TINY
        self.params = init_encoder(TINY, np.random.default_rng(0), decoder=True)
        self.clip = random_clips(TINY.clip, 1, 0)[0]
        self.plan = sample_mask(TINY.clip.token_count, 0.75, np.random.default_rng(1))

    def test_perfect_prediction_has_zero_loss(self):
        target = normalized_patches(self.clip, TINY.clip)[self.plan.mask_index][None]
        assert mae_loss(Tensor(target), target).item() == 0.0

    def test_visible_pixels_do_not_enter_the_loss(self):
        base = mae_forward(self.clip, TINY.clip, self.params, TINY.encoder, self.plan).item()
        perturbed = self.clip.copy()
        for tok in self.plan.keep_index:
            perturbed[tube_slices(TINY.clip, tok)] = np.random.default_rng(tok).random()
        kept = mae_forward(self.clip, TINY.clip, self.params, TINY.encoder, self.plan, target_clip=perturbed).item()
        assert kept == base
        hidden = self.clip.copy()
        hidden[tube_slices(TINY.clip, self.plan.mask_index[0])] = np.random.default_rng(0).random((2, 3, 4, 4))
        changed = mae_forward(self.clip, TINY.clip, self.params, TINY.encoder, self.plan, target_clip=hidden).item()
        assert changed != base

    def test_masked_patches_do_not_reach_the_encoder(self):
        base = mae_forward(self.clip, TINY.clip, self.params, TINY.encoder, self.plan, target_clip=self.clip).item()
        edited = self.clip.copy()
        for tok in self.plan.mask_index:
            edited[tube_slices(TINY.clip, tok)] = 0.0
        again = mae_forward(edited, TINY.clip, self.params, TINY.encoder, self.plan, target_clip=self.clip).item()
        assert again == base

    def test_degenerate_plans_rejected(self):
        L = TINY.clip.token_count
        all_hidden = MaskPlan(np.ones(L, dtype=bool), 0.99)
        none_hidden = MaskPlan(np.zeros(L, dtype=bool), 0.01)
        for plan in (all_hidden, none_hidden):
            with pytest.raises(ValidationError):
                mae_forward(self.clip, TINY.clip, self.params, TINY.encoder, plan)

    @pytest.mark.parametrize("seed", range(20))
    def test_loss_positive_at_init(self, seed):
        p = init_encoder(ModelConfig(), np.random.default_rng(seed), decoder=True)
        clip = random_clips(ModelConfig().clip, 1, seed)[0]
        plan = sample_mask(64, 0.75, np.random.default_rng(seed))
        assert mae_forward(clip, ModelConfig().clip, p, ModelConfig().encoder, plan).item() > 0

    def test_gradient_matches_finite_differences(self):
        p = generic_params(TINY, None, 4)
        clips = random_clips(TINY.clip, 2, 5)
        plans = [sample_mask(TINY.clip.token_count, 0.75, np.random.default_rng(s)) for s in (6, 7)]
        err = T.finite_diff_check(lambda: mae_forward(clips, TINY.clip, p, TINY.encoder, plans), p, h=1e-4)
        assert err < 1e-5


class TestClassify:
    def test_zero_weights_give_bias(self):
        head = ModelParams.from_arrays({"head.weight": np.zeros((4, 3)), "head.bias": np.array([1.0, 2.0, 3.0])})
        np.testing.assert_array_equal(classify(Tensor(np.ones(4)), head).data, [1.0, 2.0, 3.0])

    def test_one_hot_selects_row(self):
        head = init_head(4, 3, np.random.default_rng(0))
        head["head.bias"].data[:] = [0.5, -0.5, 0.25]
        out = classify(Tensor(np.eye(4)[2]), head).data
        np.testing.assert_allclose(out, head["head.weight"].data[2] + head["head.bias"].data, atol=1e-15)

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(1)
        head = ModelParams.from_arrays({"head.weight": rng.normal(size=(5, 3)), "head.bias": rng.normal(size=3)})
        x = rng.normal(size=5)
        w, b = head["head.weight"].data, head["head.bias"].data
        expected = [sum(x[i] * w[i, j] for i in range(5)) + b[j] for j in range(3)]
        assert np.abs(classify(Tensor(x), head).data - expected).max() < 1e-12

    def test_width_mismatch(self):
        head = init_head(4, 3, np.random.default_rng(0))
        with pytest.raises(ConsistencyError):
            classify(Tensor(np.ones(4)), head, n_classes=5)
        with pytest.raises(ConsistencyError):
            classify(Tensor(np.ones(6)), head)


def test_end_to_end_gradient_two_clip_batch():
    cfg = ModelConfig()
    p = generic_params(cfg, 4, 0, scale=0.15).without(["decoder"])
    clips = random_clips(cfg.clip, 2, 1)
    target = T.one_hot([0, 3], 4)

    def loss():
        return T.cross_entropy(forward_logits(clips, cfg, p), target)

    assert T.finite_diff_check(loss, p, h=1e-4, max_coords=400, rng=np.random.default_rng(0)) < 1e-5
