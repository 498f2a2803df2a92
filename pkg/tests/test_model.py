import math

import numpy as np
import pytest

from conftest import tiny_config
from rgsmvae import model as M
from rgsmvae import rgsm
from rgsmvae import tensor as T
from rgsmvae.corpus import CorpusSpec, by_speaker, generate
from rgsmvae.errors import ContractError, DimensionError, DomainError
from rgsmvae.model import GaussianDiag, LatentPair, ModelConfig, VoiceVAE
from rgsmvae.tensor import Tensor


def gd(mean, log_var):
    return GaussianDiag(Tensor(np.asarray(mean, dtype=float)), Tensor(np.asarray(log_var, dtype=float)))


@pytest.fixture(scope="module")
def full_model():
    return VoiceVAE(ModelConfig(), seed=0)


class TestConfig:
    def test_defaults_reproduce_layer_table(self, full_model):
        p = full_model.params
        assert p["encoder.conv.0.weight"].shape == (512, 80, 5)
        assert p["encoder.bilstm.l0.fwd.weight_ih"].shape == (256, 512)
        assert p["encoder.fc.0.weight"].shape == (2048, 8192)
        assert p["encoder.content.0.weight"].shape == (56, 2048)
        assert p["encoder.speaker.0.weight"].shape == (8, 256)
        assert p["decoder.fc.0.weight"].shape == (2048, 32)
        assert p["decoder.fc.1.weight"].shape == (8192, 2048)
        assert p["decoder.lstm.0.l0.fwd.weight_ih"].shape == (2048, 128)
        assert p["decoder.lstm.1.l1.fwd.weight_hh"].shape == (4096, 1024)
        assert p["decoder.attn.q.weight"].shape == (1024, 1024)
        assert p["decoder.out.0.weight"].shape == (80, 1024)

    def test_latent_widths_must_match_decoder(self):
        with pytest.raises(ContractError):
            ModelConfig(speaker_dim=5)

    def test_attention_width(self):
        with pytest.raises(ContractError):
            ModelConfig(heads=6)

    def test_beta_at_least_one(self):
        with pytest.raises(ContractError):
            ModelConfig(beta_vae=0.5)

    def test_scaled_divides_widths(self):
        c = ModelConfig.scaled(8, frames=8)
        assert (c.conv_channels, c.bilstm_hidden, c.fc_width, c.head_dim) == (64, 8, 256, 16)
        assert (c.speaker_dim, c.content_dim, c.heads, c.frames) == (4, 28, 8, 8)


class TestEncode:
    def test_default_shapes(self, full_model, rng):
        post = full_model.encode(rng.standard_normal((2, 64, 80)).astype(np.float32))
        assert post.speaker.mean.shape == post.speaker.log_var.shape == (2, 4)
        assert post.content.mean.shape == post.content.log_var.shape == (2, 28)
        assert len(post) == 2 and post[1].content.mean.shape == (28,)

    def test_deterministic(self, tiny_model, rng):
        x = rng.standard_normal((1, 8, 80)).astype(np.float32)
        a = tiny_model.encode(np.concatenate([x, x]))
        for d in (a.speaker, a.content):
            np.testing.assert_array_equal(d.mean.data[0], d.mean.data[1])
            np.testing.assert_array_equal(d.log_var.data[0], d.log_var.data[1])

    def test_zero_input_and_zero_head_biases(self, tiny_model):
        tiny_model.enc_content.bias.data[:] = 0
        tiny_model.enc_speaker.bias.data[:] = 0
        post = tiny_model.encode(np.zeros((2, 8, 80), dtype=np.float32))
        for d in (post.speaker, post.content):
            np.testing.assert_array_equal(d.mean.data, 0)
            np.testing.assert_array_equal(d.log_var.data, 0)

    def test_wrong_frame_count(self, tiny_model):
        with pytest.raises(DimensionError):
            tiny_model.encode(np.zeros((1, 9, 80), dtype=np.float32))


class TestGroupPool:
    def test_single_distribution_unchanged(self):
        d = gd([1.0, 2.0], [0.3, -0.2])
        assert M.group_pool_speaker([d]) is d

    def test_geometric_mean_of_sigmas(self):
        pooled = M.group_pool_speaker([gd([1.0], [0.0]), gd([3.0], [2 * math.log(4.0)])])
        np.testing.assert_allclose(pooled.mean.data, [2.0])
        np.testing.assert_allclose(pooled.sigma, [2.0], rtol=1e-6)

    def test_identical_inputs(self):
        pooled = M.group_pool_speaker([gd([0.5, -1.0], [0.1, 0.7])] * 4)
        np.testing.assert_allclose(pooled.mean.data, [0.5, -1.0], rtol=1e-6)
        np.testing.assert_allclose(pooled.log_var.data, [0.1, 0.7], rtol=1e-6)

    def test_permutation_invariant(self, rng):
        ds = [gd(rng.standard_normal(3), rng.standard_normal(3)) for _ in range(5)]
        a = M.group_pool_speaker(ds)
        b = M.group_pool_speaker([ds[i] for i in (3, 0, 4, 2, 1)])
        np.testing.assert_allclose(a.mean.data, b.mean.data, rtol=1e-6)
        np.testing.assert_allclose(a.log_var.data, b.log_var.data, rtol=1e-6)

    def test_empty(self):
        with pytest.raises(ContractError):
            M.group_pool_speaker([])

    def test_pool_rows_matches_list_pooling(self, rng):
        means, lvs = rng.standard_normal((4, 3)), rng.standard_normal((4, 3))
        batched = M.pool_rows(gd(means, lvs), 1, 4)
        listed = M.group_pool_speaker([gd(means[i], lvs[i]) for i in range(1, 4)])
        np.testing.assert_allclose(batched.mean.data, listed.mean.data)
        np.testing.assert_allclose(batched.log_var.data, listed.log_var.data)


class TestReparameterize:
    def test_log_var_clamped(self):
        with T.precision(np.float64):
            z = M.reparameterize(gd([0.0, 1.0], [-np.inf, -1e4]), np.random.default_rng(0))
        eps = np.random.default_rng(0).standard_normal(2)
        np.testing.assert_allclose(z.data - [0.0, 1.0], math.exp(-10.0) * eps, rtol=1e-5)

    def test_standard_normal_moments(self):
        with T.precision(np.float64):
            z = M.reparameterize(gd(np.zeros(100_000), np.zeros(100_000)), np.random.default_rng(5)).data
        assert abs(z.mean()) < 0.02
        assert abs(z.var() - 1.0) < 0.05

    def test_seeded(self):
        d = gd([0.3], [0.2])
        a = M.reparameterize(d, np.random.default_rng(9)).data
        b = M.reparameterize(d, np.random.default_rng(9)).data
        np.testing.assert_array_equal(a, b)

    def test_gradient_reaches_mean_and_log_var(self):
        mean = Tensor([0.5], requires_grad=True)
        lv = Tensor([0.2], requires_grad=True)
        grads = T.backward(T.sum(M.reparameterize(GaussianDiag(mean, lv), np.random.default_rng(1))))
        eps = np.random.default_rng(1).standard_normal(1)
        np.testing.assert_allclose(grads[mean], [1.0])
        np.testing.assert_allclose(grads[lv], 0.5 * math.exp(0.1) * eps, rtol=1e-6)


class TestDecode:
    def test_default_output_shape(self, full_model):
        with T.no_grad():
            y = full_model.decode(np.zeros((1, 4), np.float32), np.zeros((1, 28), np.float32))
        assert y.shape == (1, 64, 80)

    def test_deterministic(self, tiny_model, rng):
        zs, zc = rng.standard_normal((1, 4)), rng.standard_normal((1, 28))
        np.testing.assert_array_equal(tiny_model.decode(zs, zc).data, tiny_model.decode(zs, zc).data)

    def test_wrong_latent_width(self, tiny_model):
        with pytest.raises(DimensionError):
            tiny_model.decode(np.zeros((1, 5)), np.zeros((1, 28)))

    def test_attention_switch(self, rng):
        zs, zc = rng.standard_normal((1, 4)), rng.standard_normal((1, 28))
        on = VoiceVAE(tiny_config(), seed=0)
        off = VoiceVAE(tiny_config(use_attention=False), seed=0)
        assert list(on.params) == list(off.params)
        assert not np.allclose(on.decode(zs, zc).data, off.decode(zs, zc).data)


class TestKL:
    def test_prior(self):
        assert M.kl_diag_gaussian(gd([0.0, 0.0], [0.0, 0.0])).item() == 0.0

    def test_unit_mean(self):
        np.testing.assert_allclose(M.kl_diag_gaussian(gd([1.0], [0.0])).item(), 0.5)

    def test_variance_two(self):
        np.testing.assert_allclose(M.kl_diag_gaussian(gd([0.0], [math.log(2.0)])).item(),
                                   0.5 * (2 - 1 - math.log(2)), rtol=1e-5)
        assert abs(M.kl_diag_gaussian(gd([0.0], [math.log(2.0)])).item() - 0.15343) < 1e-5

    def test_nonnegative(self, rng):
        for _ in range(50):
            with T.precision(np.float64):
                kl = M.kl_diag_gaussian(gd(rng.normal(0, 2, 6), rng.normal(0, 2, 6))).item()
            assert kl >= 0

    def test_non_finite(self):
        with pytest.raises(DomainError):
            M.kl_diag_gaussian(gd([np.nan], [0.0]))


class TestLoss:
    def _pair(self, rng, prior=False):
        f = (lambda n: np.zeros(n)) if prior else (lambda n: rng.standard_normal(n))
        return LatentPair(gd(f(4), f(4)), gd(f(28), f(28)))

    def test_perfect_reconstruction_at_prior(self, rng):
        x = Tensor(rng.standard_normal((8, 80)))
        total, rec, kl = M.vae_loss(x, x, x, self._pair(rng, prior=True))
        assert total.item() == 0.0 and rec.item() == 0.0 and kl.item() == 0.0

    def test_beta_is_linear(self, rng):
        x, xh, r = (Tensor(rng.standard_normal((8, 80))) for _ in range(3))
        post = self._pair(rng)
        t1, _, kl = M.vae_loss(x, xh, r, post, beta_vae=1.0)
        t2, _, _ = M.vae_loss(x, xh, r, post, beta_vae=2.0)
        np.testing.assert_allclose(t2.item() - t1.item(), kl.item(), rtol=1e-5)

    @pytest.mark.parametrize("norm,knorm", [("mse", "none"), ("mse", "element"), ("l1", "frame")])
    def test_matches_scripted_formula(self, rng, norm, knorm):
        x, xh, r = (rng.standard_normal((8, 80)) for _ in range(3))
        post = self._pair(rng)
        with T.precision(np.float64):
            total, rec, kl = M.vae_loss(Tensor(x), Tensor(xh), Tensor(r), post, 3.0, norm, knorm)
        err = (lambda d: np.mean(d ** 2)) if norm == "mse" else (lambda d: np.mean(np.abs(d)))
        want_rec = err(xh - x) + err(r - x)
        want_kl = sum(0.5 * np.sum(d.mean.data ** 2 + np.exp(d.log_var.data) - 1 - d.log_var.data)
                      for d in (post.speaker, post.content))
        want_kl /= {"none": 1, "element": 8 * 80, "frame": 8}[knorm]
        np.testing.assert_allclose(rec.item(), want_rec, rtol=1e-6)
        np.testing.assert_allclose(kl.item(), want_kl, rtol=1e-6)
        np.testing.assert_allclose(total.item(), want_rec + 3.0 * want_kl, rtol=1e-6)

    def test_shape_mismatch(self, rng):
        with pytest.raises(DimensionError):
            M.vae_loss(np.zeros((8, 80)), np.zeros((8, 80)), np.zeros((8, 79)), self._pair(rng))


def _sgd(model, alpha):
    parts = [rgsm.GroupPartition(p.layer, p.shape, False) for p in rgsm.build_partitions(model)]
    return rgsm.RGSM(model.params, parts, rgsm.RgsmConfig(alpha=alpha))


class TestTrainStep:
    def test_singleton_groups_match_per_utterance_sampling(self, tiny_model, tiny_corpus):
        utts = tiny_corpus[0][:2] + tiny_corpus[0][6:7]
        with T.precision(np.float64):
            for t in tiny_model.params.tensors():
                t.data = t.data.astype(np.float64)
            total, _, _ = M.forward_groups(tiny_model, [[u] for u in utts], np.random.default_rng(4))
            rng = np.random.default_rng(4)
            post = tiny_model.encode(np.stack([u.features for u in utts]))
            eps_s = np.stack([rng.standard_normal(4) for _ in utts])
            eps_c = rng.standard_normal((3, 28))
            sd = lambda d: np.exp(0.5 * d.log_var.data)
            zs = post.speaker.mean.data + sd(post.speaker) * eps_s
            zc = post.content.mean.data + sd(post.content) * eps_c
            xhat = tiny_model.decode(zs, zc)
            want, _, _ = M.vae_loss(np.stack([u.features for u in utts]), xhat, tiny_model.refine(xhat), post,
                                    1.0, "mse", "element")
        np.testing.assert_allclose(total.item(), want.item(), rtol=1e-9)

    def test_mixed_speakers_rejected(self, tiny_model, tiny_corpus):
        train, _ = tiny_corpus
        with pytest.raises(ContractError):
            M.train_step(tiny_model, [[train[0], train[-1]]], _sgd(tiny_model, 0.1), np.random.default_rng(0))

    def test_same_seed_same_trajectory(self, tiny_corpus):
        groups = list(by_speaker(tiny_corpus[0]).values())
        states = []
        for _ in range(2):
            m = VoiceVAE(tiny_config(), seed=1)
            opt = _sgd(m, 0.05)
            for step in range(2):
                M.train_step(m, groups, opt, np.random.default_rng(step))
            states.append(m.state())
        for k in states[0]:
            np.testing.assert_array_equal(states[0][k], states[1][k])

    def test_two_speaker_toy_corpus_halves_loss(self):
        train, _ = generate(CorpusSpec(seed=0, n_speakers_train=2, n_speakers_heldout=0,
                                       utterances_per_speaker=4, frames=8))
        groups = list(by_speaker(train).values())
        m = VoiceVAE(tiny_config(), seed=0)
        opt = _sgd(m, 0.1)
        losses = [M.train_step(m, groups, opt, np.random.default_rng(s))["total"] for s in range(200)]
        assert np.all(np.isfinite(losses))
        assert np.mean(losses[-10:]) < 0.5 * losses[0]


class TestConvert:
    def test_self_conversion_is_reconstruction(self, tiny_model, tiny_corpus):
        u = tiny_corpus[0][0]
        np.testing.assert_allclose(M.convert(tiny_model, [u], [u])[0], M.reconstruct(tiny_model, [u])[0],
                                   atol=1e-6)

    def test_count_shape_and_order(self, tiny_model, tiny_corpus):
        train, heldout = tiny_corpus
        srcs = (train * 2)[:10]
        outs = M.convert(tiny_model, srcs, heldout[:3])
        assert len(outs) == 10 and all(o.shape == (8, 80) for o in outs)
        singles = [M.convert(tiny_model, [s], heldout[:3])[0] for s in srcs[:3]]
        for a, b in zip(outs, singles):
            np.testing.assert_allclose(a, b, atol=1e-5)

    def test_deterministic(self, tiny_model, tiny_corpus):
        train, heldout = tiny_corpus
        a = M.convert(tiny_model, train[:2], heldout[:2])
        b = M.convert(tiny_model, train[:2], heldout[:2])
        for x, y in zip(a, b):
            np.testing.assert_array_equal(x, y)

    def test_empty_lists(self, tiny_model, tiny_corpus):
        with pytest.raises(ContractError):
            M.convert(tiny_model, [], tiny_corpus[0][:1])


def test_full_model_gradient_check():
    from rgsmvae import checks

    f, params = checks._model_case(0)
    assert T.grad_check(f, params, max_coords=1, seed=0) < 1e-4


def test_save_load_round_trip(tmp_path, tiny_model):
    tiny_model.save(tmp_path / "m.ckpt", {"note": 1})
    loaded, meta = VoiceVAE.load(tmp_path / "m.ckpt")
    assert meta["note"] == 1 and loaded.config == tiny_model.config
    for k, v in tiny_model.params.arrays().items():
        np.testing.assert_array_equal(loaded.params[k].data, v)
