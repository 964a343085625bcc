import numpy as np
import pytest

from dafss import autodiff as ad
from dafss.autodiff import backward, constant, parameter
from dafss.errors import ConfigurationError, ShapeError
from dafss.experts import (
    ExpertOutput,
    attention_parameters,
    expert_parameters,
    expert_probs,
    init_attention,
    init_expert,
    mhsa,
    run_expert,
)

from conftest import check_grads, relative_error


class TestMHSA:
    def test_single_token_hand_computation(self, rng):
        # one token: softmax over a single key is exactly 1, so the output
        # is concat_h(x @ Wv_h) @ Wo computed by hand
        d, h = 6, 2
        attn = init_attention(rng, d, h, "t")
        x = rng.standard_normal((1, d))
        out = mhsa(constant(x), attn).data
        manual = np.hstack([x @ attn.wv[i].data for i in range(h)]) @ attn.wo.data
        assert relative_error(out, manual) < 1e-12

    def test_permutation_equivariance(self, rng):
        d, h = 8, 2
        attn = init_attention(rng, d, h, "t")
        x = rng.standard_normal((5, d))
        out = mhsa(constant(x), attn).data
        perm = rng.permutation(5)
        out_p = mhsa(constant(x[perm]), attn).data
        np.testing.assert_allclose(out_p, out[perm], atol=1e-12)

    def test_indivisible_heads_rejected(self, rng):
        with pytest.raises(ConfigurationError):
            init_attention(rng, 6, 4, "t")

    def test_gradient(self, rng):
        d, h = 8, 2
        attn = init_attention(rng, d, h, "t")
        x = parameter(rng.standard_normal((3, d)))
        w = constant(rng.standard_normal((3, d)))
        tensors = {"x": x}
        tensors.update(attention_parameters(attn))
        check_grads(lambda: ad.sum_all(ad.mul(mhsa(x, attn), w)), tensors, tol=1e-3)


class TestExperts:
    def test_output_shapes_at_paper_defaults(self, rng):
        n_s, n_q = 2, 7
        geo = init_expert(rng, n_s, 192, n_classes=2, heads=4, prefix="geo")
        sem = init_expert(rng, n_s, 512, n_classes=2, heads=4, prefix="sem")
        c = constant(rng.uniform(-1, 1, (n_q, n_s)))
        out_geo = run_expert(c, geo)
        out_sem = run_expert(c, sem)
        assert out_geo.refined.shape == (n_q, 192)
        assert out_sem.refined.shape == (n_q, 512)
        assert out_geo.logits.shape == (n_q, 2)

    def test_decoupling_by_construction(self, rng):
        # the geometric output is a function of its own correlation only
        n_s, n_q = 3, 5
        geo = init_expert(rng, n_s, 16, n_classes=3, heads=2, prefix="geo")
        c_geo = rng.uniform(-1, 1, (n_q, n_s))
        c_sem = rng.uniform(-1, 1, (n_q, n_s))
        before = run_expert(constant(c_geo), geo).refined.data
        c_sem += rng.standard_normal(c_sem.shape)  # perturb the other modality
        after = run_expert(constant(c_geo), geo).refined.data
        assert before.tobytes() == after.tobytes()

    def test_single_token_hand_oracle(self, rng):
        n_s = 2
        params = init_expert(rng, n_s, 8, n_classes=2, heads=2, prefix="e")
        c = rng.uniform(-1, 1, (1, n_s))
        out = run_expert(constant(c), params).refined.data

        h = c @ params.lift_w.data + params.lift_b.data
        att = np.hstack([h @ params.attn.wv[i].data for i in range(2)]) @ params.attn.wo.data
        pre = h + att
        mu, var = pre.mean(), pre.var()
        manual = (pre - mu) / np.sqrt(var + 1e-5) * params.ln_gamma.data + params.ln_beta.data
        assert relative_error(out, manual) < 1e-10

    def test_shape_mismatch(self, rng):
        params = init_expert(rng, 3, 8, n_classes=2, heads=2, prefix="e")
        with pytest.raises(ShapeError):
            run_expert(constant(np.zeros((4, 2))), params)

    def test_gradient_isolation_between_experts(self, rng):
        geo = init_expert(rng, 2, 8, n_classes=2, heads=2, prefix="geo")
        sem = init_expert(rng, 2, 12, n_classes=2, heads=2, prefix="sem")
        c = constant(rng.uniform(-1, 1, (4, 2)))
        out = run_expert(c, geo)
        grads = backward(ad.sum_all(out.refined))
        geo_names = set(expert_parameters(geo))
        touched = {t.name for t in grads}
        assert touched <= geo_names
        for t in expert_parameters(sem).values():
            assert t.grad is None

    def test_gradient_vs_finite_differences(self, rng):
        params = init_expert(rng, 2, 8, n_classes=3, heads=2, prefix="e")
        c = parameter(rng.uniform(-1, 1, (3, 2)))
        w = constant(rng.standard_normal((3, 8)))
        tensors = {"c": c}
        tensors.update(expert_parameters(params))
        check_grads(lambda: ad.sum_all(ad.mul(run_expert(c, params).refined, w)), tensors, tol=1e-3)


class TestExpertProbs:
    def test_zero_classifier_gives_uniform(self, rng):
        refined = constant(rng.standard_normal((5, 8)))
        probs = expert_probs(refined, constant(np.zeros((8, 4))), constant(np.zeros(4))).data
        np.testing.assert_allclose(probs, 0.25, atol=1e-15)

    def test_rows_sum_to_one(self, rng):
        params = init_expert(rng, 2, 8, n_classes=3, heads=2, prefix="e")
        out = run_expert(constant(rng.uniform(-1, 1, (6, 2))), params)
        np.testing.assert_allclose(out.probs.data.sum(axis=1), 1.0, atol=1e-9)

    def test_argmax_matches_bruteforce(self, rng):
        refined = rng.standard_normal((10, 6))
        w = rng.standard_normal((6, 3))
        b = rng.standard_normal(3)
        probs = expert_probs(constant(refined), constant(w), constant(b)).data
        logits = refined @ w + b
        brute = np.array([int(np.argmax(row)) for row in logits])
        np.testing.assert_array_equal(np.argmax(probs, axis=1), brute)
