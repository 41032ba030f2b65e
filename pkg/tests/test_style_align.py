import math

import numpy as np
import numpy.testing as npt
import pytest
import torch

from weathergap.detector import FeatureMap
from weathergap.style_align import (
    STYLE_EPS,
    StyleAttention,
    StyleDiscriminator,
    adversarial_style_loss,
    gated_style_vector,
    grl,
    grl_lambda,
    style_stats,
)

from conftest import finite_difference_grads, max_rel_error


def fmap(values) -> FeatureMap:
    return FeatureMap(values=values, stride=8)


class TestStyleStats:
    def test_constant_channel(self):
        f = fmap(torch.full((1, 2, 4, 4), 3.0, dtype=torch.float64))
        mean, std = style_stats(f)
        npt.assert_allclose(mean.numpy(), 3.0)
        npt.assert_allclose(std.numpy(), math.sqrt(STYLE_EPS), rtol=1e-12)

    def test_two_value_channel_hand_computed(self):
        values = torch.zeros(1, 1, 2, 2, dtype=torch.float64)
        values[0, 0, 0, :] = 0.0
        values[0, 0, 1, :] = 2.0
        mean, std = style_stats(fmap(values))
        npt.assert_allclose(mean.numpy(), 1.0)
        npt.assert_allclose(std.numpy(), math.sqrt(1.0 + STYLE_EPS), rtol=1e-12)

    def test_invariant_to_spatial_permutation(self, rng):
        values = torch.from_numpy(rng.normal(size=(2, 8, 6, 6)))
        mean_a, std_a = style_stats(fmap(values))
        perm = rng.permutation(36)
        shuffled = values.reshape(2, 8, 36)[:, :, perm].reshape(2, 8, 6, 6)
        mean_b, std_b = style_stats(fmap(shuffled))
        npt.assert_allclose(mean_a.numpy(), mean_b.numpy(), atol=1e-12)
        npt.assert_allclose(std_a.numpy(), std_b.numpy(), atol=1e-12)

    def test_degenerate_spatial_size_rejected(self):
        with pytest.raises(ValueError):
            style_stats(fmap(torch.zeros(1, 2, 1, 1)))


class TestStyleAttention:
    def test_zero_init_final_layer_gives_half_gates(self, rng):
        att = StyleAttention(8).double()
        mean = torch.from_numpy(rng.normal(size=(4, 8)))
        std = torch.from_numpy(np.abs(rng.normal(size=(4, 8))))
        w = att(mean, std)
        npt.assert_allclose(w.detach().numpy(), 0.5)

    def test_gates_in_open_unit_interval(self, rng):
        att = StyleAttention(8).double()
        with torch.no_grad():
            for p in att.parameters():
                p.copy_(torch.from_numpy(rng.normal(scale=0.5, size=p.shape)))
        w = att(torch.from_numpy(rng.normal(size=(16, 8))), torch.from_numpy(np.abs(rng.normal(size=(16, 8)))))
        assert (w > 0).all() and (w < 1).all()

    def test_gradient_matches_finite_differences(self, rng):
        torch.manual_seed(3)
        att = StyleAttention(6).double()
        with torch.no_grad():
            att.fc2.weight.copy_(torch.from_numpy(rng.normal(scale=0.5, size=att.fc2.weight.shape)))
            att.fc2.bias.copy_(torch.from_numpy(rng.normal(scale=0.5, size=att.fc2.bias.shape)))
        mean = torch.from_numpy(rng.normal(size=(3, 6)))
        std = torch.from_numpy(np.abs(rng.normal(size=(3, 6))) + 0.1)

        def fn():
            return att(mean, std).sum()

        att.zero_grad()
        fn().backward()
        params = list(att.parameters())
        analytic = [p.grad.numpy().copy() for p in params]
        numeric = finite_difference_grads(fn, params)
        for a, n in zip(analytic, numeric):
            assert max_rel_error(a, n) <= 1e-4

    def test_channel_permutation_equivariance(self, rng):
        torch.manual_seed(5)
        c = 8
        att = StyleAttention(c).double()
        with torch.no_grad():
            att.fc2.weight.copy_(torch.from_numpy(rng.normal(size=att.fc2.weight.shape)))
            att.fc2.bias.copy_(torch.from_numpy(rng.normal(size=att.fc2.bias.shape)))
        mean = torch.from_numpy(rng.normal(size=(2, c)))
        std = torch.from_numpy(np.abs(rng.normal(size=(2, c))))
        w = att(mean, std)

        perm = torch.from_numpy(rng.permutation(c))
        att_p = StyleAttention(c).double()
        with torch.no_grad():
            # permute fc1 input columns (mean block and std block) and fc2 output rows
            att_p.fc1.weight.copy_(torch.cat([att.fc1.weight[:, :c][:, perm], att.fc1.weight[:, c:][:, perm]], dim=1))
            att_p.fc1.bias.copy_(att.fc1.bias)
            att_p.fc2.weight.copy_(att.fc2.weight[perm])
            att_p.fc2.bias.copy_(att.fc2.bias[perm])
        w_p = att_p(mean[:, perm], std[:, perm])
        npt.assert_allclose(w_p.detach().numpy(), w.detach().numpy()[:, perm], atol=1e-12)


class TestGrl:
    def test_forward_is_identity(self, rng):
        x = torch.from_numpy(rng.normal(size=(5, 3)))
        assert torch.equal(grl(x, 0.7), x)

    def test_lambda_zero_kills_gradient(self):
        x = torch.ones(4, dtype=torch.float64, requires_grad=True)
        grl(x, 0.0).sum().backward()
        assert torch.equal(x.grad, torch.zeros_like(x))

    def test_backward_is_minus_lambda_times_upstream(self, rng):
        lam = 1.5
        x = torch.from_numpy(rng.normal(size=(6,))).requires_grad_(True)
        upstream = torch.from_numpy(rng.normal(size=(6,)))
        grl(x, lam).backward(upstream)
        assert torch.equal(x.grad, -lam * upstream)

    def test_warmup_schedule_endpoints(self):
        assert grl_lambda(0, 1000, 0.1) == 0.0
        end = grl_lambda(1000, 1000, 0.1)
        expected = 0.1 * (2.0 / (1.0 + math.exp(-10.0)) - 1.0)
        npt.assert_allclose(end, expected, rtol=1e-12)
        assert abs(end - 0.1) < 1e-4
        mid = grl_lambda(500, 1000, 0.1)
        assert 0.0 < mid < end


class TestDiscriminator:
    def test_zero_init_output_layer_gives_zero_logit(self, rng):
        disc = StyleDiscriminator(8).double()
        x = torch.from_numpy(rng.normal(size=(10, 16)))
        npt.assert_array_equal(disc(x).detach().numpy(), 0.0)

    def test_logit_scale_sensitive_once_trained_weights(self, rng):
        disc = StyleDiscriminator(4).double()
        with torch.no_grad():
            for p in disc.parameters():
                p.copy_(torch.from_numpy(rng.normal(size=p.shape)))
        x = torch.from_numpy(np.abs(rng.normal(size=(3, 8))) + 0.5)
        assert not torch.allclose(disc(2 * x), disc(x))

    def test_gradient_matches_finite_differences(self, rng):
        torch.manual_seed(11)
        disc = StyleDiscriminator(4, hidden=8).double()
        with torch.no_grad():
            disc.fc2.weight.copy_(torch.from_numpy(rng.normal(scale=0.5, size=disc.fc2.weight.shape)))
            disc.fc2.bias.copy_(torch.from_numpy(rng.normal(scale=0.5, size=disc.fc2.bias.shape)))
        x = torch.from_numpy(rng.normal(size=(5, 8)))

        def fn():
            return disc(x).sum()

        disc.zero_grad()
        fn().backward()
        params = list(disc.parameters())
        analytic = [p.grad.numpy().copy() for p in params]
        numeric = finite_difference_grads(fn, params)
        for a, n in zip(analytic, numeric):
            assert max_rel_error(a, n) <= 1e-4


class TestAdversarialStyleLoss:
    def make_modules(self, c=8, scramble=False, seed=0):
        torch.manual_seed(seed)
        att = StyleAttention(c).double()
        disc = StyleDiscriminator(c).double()
        if scramble:
            rng = np.random.default_rng(seed)
            with torch.no_grad():
                for p in list(att.parameters()) + list(disc.parameters()):
                    p.copy_(torch.from_numpy(rng.normal(scale=0.4, size=p.shape)))
        return att, disc

    def test_zero_init_discriminator_gives_two_ln_two(self, rng):
        att, disc = self.make_modules()
        s = fmap(torch.from_numpy(rng.normal(size=(4, 8, 4, 4))))
        t = fmap(torch.from_numpy(rng.normal(size=(4, 8, 4, 4))))
        loss, _ = adversarial_style_loss(s, t, att, disc, lam=0.3)
        npt.assert_allclose(float(loss.detach()), 2 * math.log(2), rtol=1e-12)

    def test_channel_mismatch_rejected(self, rng):
        att, disc = self.make_modules()
        s = fmap(torch.from_numpy(rng.normal(size=(2, 8, 4, 4))))
        t = fmap(torch.from_numpy(rng.normal(size=(2, 4, 4, 4))))
        with pytest.raises(ValueError):
            adversarial_style_loss(s, t, att, disc, lam=0.1)

    def test_loss_invariant_to_spatial_shuffle(self, rng):
        att, disc = self.make_modules(scramble=True, seed=4)
        values_s = rng.normal(size=(3, 8, 4, 4))
        values_t = rng.normal(size=(3, 8, 4, 4))
        loss_a, _ = adversarial_style_loss(
            fmap(torch.from_numpy(values_s)), fmap(torch.from_numpy(values_t)), att, disc, 0.2
        )
        perm = rng.permutation(16)
        shuf_s = values_s.reshape(3, 8, 16)[:, :, perm].reshape(3, 8, 4, 4)
        shuf_t = values_t.reshape(3, 8, 16)[:, :, perm].reshape(3, 8, 4, 4)
        loss_b, _ = adversarial_style_loss(
            fmap(torch.from_numpy(shuf_s)), fmap(torch.from_numpy(shuf_t)), att, disc, 0.2
        )
        npt.assert_allclose(float(loss_a), float(loss_b), rtol=1e-12)

    def test_lambda_zero_blocks_feature_gradient_not_discriminator(self, rng):
        att, disc = self.make_modules(scramble=True, seed=9)
        vs = torch.from_numpy(rng.normal(size=(3, 8, 4, 4))).requires_grad_(True)
        vt = torch.from_numpy(rng.normal(size=(3, 8, 4, 4))).requires_grad_(True)
        loss, _ = adversarial_style_loss(fmap(vs), fmap(vt), att, disc, lam=0.0)
        loss.backward()
        assert torch.equal(vs.grad, torch.zeros_like(vs))
        assert torch.equal(vt.grad, torch.zeros_like(vt))
        grads = [p.grad for p in disc.parameters()]
        assert any(g.abs().sum() > 0 for g in grads)

    def _feature_grads(self, values_s, values_t, att, disc, lam, reverse=True):
        vs = torch.from_numpy(values_s).requires_grad_(True)
        vt = torch.from_numpy(values_t).requires_grad_(True)
        if reverse:
            loss, _ = adversarial_style_loss(fmap(vs), fmap(vt), att, disc, lam)
        else:
            import torch.nn.functional as F

            gated_s, _ = gated_style_vector(fmap(vs), att)
            gated_t, _ = gated_style_vector(fmap(vt), att)
            logit_s, logit_t = disc(gated_s), disc(gated_t)
            loss = F.binary_cross_entropy_with_logits(
                logit_s, torch.zeros_like(logit_s)
            ) + F.binary_cross_entropy_with_logits(logit_t, torch.ones_like(logit_t))
        loss.backward()
        return vs.grad.numpy(), vt.grad.numpy()

    def test_gradient_sign_property_exact_at_unit_lambda(self, rng):
        att, disc = self.make_modules(scramble=True, seed=13)
        values_s = rng.normal(size=(2, 8, 4, 4))
        values_t = rng.normal(size=(2, 8, 4, 4))
        gs_rev, gt_rev = self._feature_grads(values_s, values_t, att, disc, lam=1.0)
        gs_fwd, gt_fwd = self._feature_grads(values_s, values_t, att, disc, lam=1.0, reverse=False)
        npt.assert_array_equal(gs_rev, -gs_fwd)
        npt.assert_array_equal(gt_rev, -gt_fwd)

    def test_gradient_sign_property_scales_with_lambda(self, rng):
        att, disc = self.make_modules(scramble=True, seed=14)
        values_s = rng.normal(size=(2, 8, 4, 4))
        values_t = rng.normal(size=(2, 8, 4, 4))
        lam = 1.5
        gs_rev, _ = self._feature_grads(values_s, values_t, att, disc, lam=lam)
        gs_fwd, _ = self._feature_grads(values_s, values_t, att, disc, lam=lam, reverse=False)
        npt.assert_allclose(gs_rev, -lam * gs_fwd, rtol=1e-12, atol=1e-15)

    def test_discriminator_separates_separable_populations(self, rng):
        # Two style populations with well-separated channel statistics.
        c = 8
        source_maps = rng.normal(loc=0.0, scale=1.0, size=(64, c, 4, 4))
        target_maps = rng.normal(loc=1.2, scale=0.6, size=(64, c, 4, 4))

        att, disc = self.make_modules(c=c)

        def gated(values):
            with torch.no_grad():
                g, _ = gated_style_vector(fmap(torch.from_numpy(values)), att)
            return g.numpy()

        # linear probe oracle: populations must be separable to begin with
        from sklearn.linear_model import LogisticRegression

        X = np.concatenate([gated(source_maps), gated(target_maps)])
        y = np.concatenate([np.zeros(64), np.ones(64)])
        probe = LogisticRegression(max_iter=1000).fit(X, y)
        assert probe.score(X, y) >= 0.99

        # 200 discriminator-only steps
        opt = torch.optim.SGD(disc.parameters(), lr=1.0)
        bce = torch.nn.BCEWithLogitsLoss()
        batch_rng = np.random.default_rng(0)
        for _ in range(200):
            idx_s = batch_rng.integers(0, 64, size=16)
            idx_t = batch_rng.integers(0, 64, size=16)
            gs, _ = gated_style_vector(fmap(torch.from_numpy(source_maps[idx_s])), att)
            gt, _ = gated_style_vector(fmap(torch.from_numpy(target_maps[idx_t])), att)
            loss = bce(disc(gs), torch.zeros(16, dtype=torch.float64)) + bce(
                disc(gt), torch.ones(16, dtype=torch.float64)
            )
            opt.zero_grad()
            loss.backward()
            opt.step()
        with torch.no_grad():
            acc_s = float((disc(torch.from_numpy(gated(source_maps))) < 0).double().mean())
            acc_t = float((disc(torch.from_numpy(gated(target_maps))) >= 0).double().mean())
        assert 0.5 * (acc_s + acc_t) >= 0.95
