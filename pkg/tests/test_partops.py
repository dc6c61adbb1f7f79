import numpy as np
import pytest
import torch

from lpd import adversarial as A
from lpd import part_vae as PV
from lpd import partops as P
from lpd import recon as RC
from lpd import render as R


@pytest.fixture(scope="module")
def vae():
    torch.manual_seed(0)
    return PV.PartVae(PV.VaeConfig(latent_dim=8))


def make_parts(vae, seed, class_label=0):
    gen = torch.Generator().manual_seed(seed)
    latents = torch.randn(3, 8, generator=gen)
    centroids = 0.3 * (torch.rand(3, 3, generator=gen) - 0.5)
    meshes = [vae.decode_mesh(latents[i]) for i in range(3)]
    textures = torch.rand(3, 8, 8, 3, generator=gen)
    return RC.PartSet(latents=latents, centroids=centroids, meshes=meshes,
                      textures=textures, class_label=class_label)


class TestSwap:
    def test_empty_indices_keeps_a(self, vae):
        a, b = make_parts(vae, 1), make_parts(vae, 2)
        out = P.swap_parts(a, b, [])
        assert torch.equal(out.latents, a.latents)
        assert torch.equal(out.centroids, a.centroids)

    def test_full_indices_gives_b(self, vae):
        a, b = make_parts(vae, 3), make_parts(vae, 4)
        out = P.swap_parts(a, b, [0, 1, 2])
        assert torch.equal(out.latents, b.latents)
        assert torch.equal(out.centroids, b.centroids)

    def test_involution(self, vae):
        a, b = make_parts(vae, 5), make_parts(vae, 6)
        out = P.swap_parts(P.swap_parts(a, b, [1]), a, [1])
        assert torch.equal(out.latents, a.latents)
        assert torch.equal(out.centroids, a.centroids)
        assert np.array_equal(out.meshes[1].vertices, a.meshes[1].vertices)

    def test_out_of_range_rejected(self, vae):
        a, b = make_parts(vae, 7), make_parts(vae, 8)
        with pytest.raises(ValueError):
            P.swap_parts(a, b, [5])

    def test_agrees_with_remix(self, vae):
        # swap at indices I == remix with selector "from A unless in I"
        a, b = make_parts(vae, 9), make_parts(vae, 10)
        indices = [0, 2]
        selector = tuple(i not in indices for i in range(3))
        swapped = P.swap_parts(a, b, indices)
        remixed = A.remix(a, b, A.RemixPlan(selector, R.Viewpoint()))
        assert torch.equal(swapped.latents, remixed.latents)
        assert torch.equal(swapped.centroids, remixed.centroids)
        for ms, mr in zip(swapped.meshes, remixed.meshes):
            assert np.array_equal(ms.vertices, mr.vertices)


class TestInterpolate:
    def test_endpoints_exact(self, vae):
        a, b = make_parts(vae, 11), make_parts(vae, 12)
        at_one = P.interpolate(a, b, 1.0, vae)
        at_zero = P.interpolate(a, b, 0.0, vae)
        assert torch.equal(at_one.latents, a.latents)
        assert torch.equal(at_zero.latents, b.latents)
        assert torch.equal(at_one.centroids, a.centroids)
        assert torch.equal(at_zero.centroids, b.centroids)

    def test_identical_inputs_fixed_point(self, vae):
        a = make_parts(vae, 13)
        out = P.interpolate(a, a, 0.5, vae)
        assert torch.allclose(out.latents, a.latents)
        assert torch.allclose(out.centroids, a.centroids)

    def test_lambda_out_of_range_rejected(self, vae):
        a, b = make_parts(vae, 14), make_parts(vae, 15)
        with pytest.raises(ValueError):
            P.interpolate(a, b, 1.5, vae)

    def test_latent_linearity(self, vae):
        a, b = make_parts(vae, 16), make_parts(vae, 17)
        for lam in (0.25, 0.5, 0.75):
            out = P.interpolate(a, b, lam, vae)
            assert torch.allclose(out.latents, lam * a.latents + (1 - lam) * b.latents,
                                  atol=1e-7)

    def test_partial_selection(self, vae):
        a, b = make_parts(vae, 18), make_parts(vae, 19)
        out = P.interpolate(a, b, 0.5, vae, indices=[1])
        assert torch.equal(out.latents[0], a.latents[0])
        assert torch.equal(out.latents[2], a.latents[2])
        assert torch.allclose(out.latents[1], 0.5 * (a.latents[1] + b.latents[1]))
        assert np.array_equal(out.meshes[0].vertices, a.meshes[0].vertices)


class TestFitGmm:
    def test_single_component_matches_sample_stats(self):
        rng = np.random.default_rng(0)
        data = rng.normal(size=(200, 6)) * [1, 2, 0.5, 1, 1, 3] + [0, 1, -1, 2, 0, 0]
        gmm = P.fit_gmm([data], components=1, seed=0)
        assert np.allclose(gmm.means[0, 0], data.mean(0), atol=1e-6)
        assert np.allclose(gmm.variances[0, 0], data.var(0), atol=1e-5)
        assert np.allclose(gmm.weights[0, 0], 1.0)

    def test_recovers_separated_mixture(self):
        rng = np.random.default_rng(1)
        sigma = 0.3
        a = rng.normal(size=(300, 4)) * sigma + 5.0
        b = rng.normal(size=(300, 4)) * sigma - 5.0   # separation >> 10 sigma
        data = np.concatenate([a, b])
        rng.shuffle(data)
        gmm = P.fit_gmm([data], components=2, seed=2)
        means = sorted(gmm.means[0].mean(1))
        assert abs(means[0] - (-5.0)) < 0.1 * sigma
        assert abs(means[1] - 5.0) < 0.1 * sigma

    def test_loglik_monotone(self):
        rng = np.random.default_rng(3)
        data = np.concatenate([rng.normal(size=(150, 5)) + 2,
                               rng.normal(size=(150, 5)) - 2])
        gmm = P.fit_gmm([data], components=3, seed=4)
        history = np.array(gmm.log_likelihoods[0])
        assert np.all(np.diff(history) >= -1e-9)

    def test_insufficient_samples_rejected(self):
        with pytest.raises(ValueError):
            P.fit_gmm([np.zeros((5, 4))], components=3)

    def test_deterministic_under_seed(self):
        rng = np.random.default_rng(5)
        data = rng.normal(size=(100, 4))
        a = P.fit_gmm([data], components=2, seed=9)
        b = P.fit_gmm([data], components=2, seed=9)
        assert np.array_equal(a.means, b.means)
        assert np.array_equal(a.weights, b.weights)


class TestGenerateShape:
    def _gmm(self, d=8, slots=3):
        rng = np.random.default_rng(6)
        latents = [rng.normal(size=(120, d)) * 0.5 for _ in range(slots)]
        cents = rng.uniform(-0.3, 0.3, size=(slots, 3))
        return P.fit_gmm(latents, components=2, seed=7, slot_centroids=cents)

    def test_hundred_generations_valid(self, vae):
        gmm = self._gmm()
        rng = np.random.default_rng(8)
        for _ in range(100):
            parts = P.generate_shape(gmm, rng, vae)
            for i, m in enumerate(parts.meshes):
                v = m.vertices + gmm.slot_centroids[i]
                assert np.isfinite(v).all()
                assert np.abs(v).max() <= 1.0

    def test_sample_mean_matches_gmm_mean(self):
        gmm = self._gmm()
        rng = np.random.default_rng(9)
        draws = np.stack([P.sample_latents(gmm, rng) for _ in range(1000)])
        for slot in range(gmm.slots):
            mean = gmm.slot_mean(slot)
            w, mu, var = gmm.weights[slot], gmm.means[slot], gmm.variances[slot]
            second = (w[:, None] * (var + mu ** 2)).sum(0)
            se = np.sqrt(np.maximum(second - mean ** 2, 0) / 1000)
            err = draws[:, slot].mean(0) - mean
            assert np.linalg.norm(err) <= 3 * np.linalg.norm(se)

    def test_seeded_reproducible(self, vae):
        gmm = self._gmm()
        a = P.generate_shape(gmm, np.random.default_rng(10), vae)
        b = P.generate_shape(gmm, np.random.default_rng(10), vae)
        assert torch.equal(a.latents, b.latents)
