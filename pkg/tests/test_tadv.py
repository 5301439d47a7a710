import numpy as np
import pytest
import torch

from oracles import central_difference, float64, naive_gram, naive_texture_loss, relative_error
from semadv.imaging import to_tensor
from semadv.models import classify, embed, load_model
from semadv.tadv import (
    LAYER_PAIRS, TadvConfig, TextureBank, attack_texture, cross_layer_gram, gram_normalizers,
    gram_stats, select_texture_source, tadv_attack, texture_loss, texture_objective,
)


@pytest.fixture(scope="module")
def ext64():
    return float64(load_model("toy-extractor"))


@pytest.fixture(scope="module")
def hf():
    return load_model("toy-hf")


class TestCrossLayerGram:
    def test_zero_first_tap(self, rng):
        g = cross_layer_gram(torch.zeros(3, 8, 8), torch.from_numpy(rng.random((5, 4, 4))).float())
        assert g.shape == (3, 5) and not g.any()

    def test_all_ones(self):
        g = cross_layer_gram(torch.ones(2, 6, 4), torch.ones(3, 3, 2))
        assert g.shape == (2, 3)
        np.testing.assert_array_equal(g.numpy(), 24.0)

    def test_matches_loop_oracle(self, rng):
        fm, fn = rng.standard_normal((4, 8, 8)), rng.standard_normal((6, 4, 4))
        g = cross_layer_gram(torch.from_numpy(fm), torch.from_numpy(fn)).numpy()
        ref = naive_gram(fm, fn)
        assert np.abs(g - ref).max() / np.abs(ref).max() < 1e-12

    def test_batched(self, rng):
        fm = torch.from_numpy(rng.standard_normal((2, 3, 4, 4)))
        fn = torch.from_numpy(rng.standard_normal((2, 5, 2, 2)))
        g = cross_layer_gram(fm, fn)
        assert g.shape == (2, 3, 5)
        torch.testing.assert_close(g[1], cross_layer_gram(fm[1], fn[1]))

    def test_rejects_larger_second_tap(self):
        with pytest.raises(ValueError):
            cross_layer_gram(torch.ones(2, 4, 4), torch.ones(2, 8, 8))


class TestTextureLoss:
    def test_identical_images(self, toy_extractor, noisy_image):
        assert float(texture_loss(noisy_image, noisy_image, toy_extractor, TadvConfig())) == 0.0

    def test_nonnegative(self, toy_extractor, rng):
        for _ in range(5):
            a, b = rng.random((16, 16, 3)), rng.random((16, 16, 3))
            assert float(texture_loss(a, b, toy_extractor, TadvConfig())) > 0.0

    def test_matches_naive(self, ext64, rng):
        v, s = rng.random((16, 16, 3)), rng.random((16, 16, 3))
        ours = float(texture_loss(v, s, ext64, TadvConfig()))
        ref = naive_texture_loss(ext64, v, s, LAYER_PAIRS)
        assert relative_error(ours, ref) < 1e-6

    def test_source_resized_to_victim(self, toy_extractor, rng):
        v = rng.random((16, 16, 3))
        loss = texture_loss(v, rng.random((32, 32, 3)), toy_extractor, TadvConfig())
        assert torch.isfinite(loss)

    def test_normalizers_are_constants(self, ext64, rng):
        cfg = TadvConfig()
        v = to_tensor(rng.random((16, 16, 3)), torch.float64).contiguous()
        s = rng.random((16, 16, 3))
        with torch.no_grad():
            norms = gram_normalizers(gram_stats(ext64(v), cfg.layer_pairs))
        free = texture_loss(v, s, ext64, cfg)
        pinned = texture_loss(v, s, ext64, cfg, normalizers=norms)
        assert float(free) == pytest.approx(float(pinned), rel=1e-12)

    def test_gradient_matches_finite_differences(self, ext64, rng):
        cfg = TadvConfig()
        clf = float64(load_model("toy-conv"))
        base = 0.1 + 0.8 * rng.random((16, 16, 3))
        src = to_tensor(rng.random((16, 16, 3)), torch.float64)
        with torch.no_grad():
            taps = sorted({t for p in cfg.layer_pairs for t in p})
            sg = gram_stats(ext64(src, taps), cfg.layer_pairs)
            norms = gram_normalizers(gram_stats(ext64(to_tensor(base, torch.float64), taps), cfg.layer_pairs))

        def f(img):
            x = to_tensor(img, torch.float64)
            with torch.no_grad():
                return float(texture_objective(x, sg, ext64, clf, 3, cfg, normalizers=norms)[0])

        x = to_tensor(base, torch.float64).contiguous().requires_grad_(True)
        texture_objective(x, sg, ext64, clf, 3, cfg)[0].backward()
        grad = x.grad[0].permute(1, 2, 0).numpy()
        for _ in range(10):
            idx = tuple(int(rng.integers(n)) for n in base.shape)
            fd = central_difference(f, base, idx, 1e-6)
            assert relative_error(grad[idx], fd) < 1e-3, idx


def _bank(rng, labels):
    return TextureBank([rng.random((16, 16, 3)) for _ in labels], list(labels))


class TestSelectSource:
    def test_singleton_random(self, rng):
        bank = _bank(rng, [4])
        img, idx = select_texture_source(rng.random((16, 16, 3)), 1, bank, "random")
        assert idx == 0 and img is bank.images[0]

    def test_random_target_only_target_class(self, rng):
        bank = _bank(rng, [0, 1, 2, 1, 0, 1])
        for seed in range(10):
            _, idx = select_texture_source(bank.images[0], 1, bank, "random-target", seed=seed)
            assert bank.labels[idx] == 1

    def test_random_is_seeded(self, rng):
        bank = _bank(rng, range(8))
        a = select_texture_source(bank.images[0], 1, bank, "random", seed=5)[1]
        assert a == select_texture_source(bank.images[0], 1, bank, "random", seed=5)[1]

    def test_nearest_finds_exact_copy(self, toy_extractor, rng):
        bank = _bank(rng, [2, 2, 2, 3])
        victim = bank.images[1].copy()
        _, idx = select_texture_source(victim, 2, bank, "nearest-target", extractor=toy_extractor)
        assert idx == 1

    def test_nearest_matches_exhaustive(self, toy_extractor, rng):
        bank = _bank(rng, [5, 5, 5])
        victim = rng.random((16, 16, 3))
        q = embed(toy_extractor, victim)
        vecs = [embed(toy_extractor, b) for b in bank.images]
        dists = [1 - q @ v / np.linalg.norm(q) / np.linalg.norm(v) for v in vecs]
        _, idx = select_texture_source(victim, 5, bank, "nearest-target", extractor=toy_extractor)
        assert idx == int(np.argmin(dists))

    def test_ties_broken_by_bank_order(self, toy_extractor, rng):
        img = rng.random((16, 16, 3))
        bank = TextureBank([img, img.copy(), img.copy()], [1, 1, 1])
        assert select_texture_source(img, 1, bank, "nearest-target", extractor=toy_extractor)[1] == 0

    def test_empty_subset(self, rng):
        with pytest.raises(ValueError):
            select_texture_source(rng.random((16, 16, 3)), 7, _bank(rng, [0, 1]), "random-target")

    def test_embedding_cache(self, toy_extractor, tmp_path, rng):
        from semadv.imaging import save_png

        rows = ["file,label"]
        for i in range(3):
            save_png(rng.random((16, 16, 3)), tmp_path / f"{i}.png")
            rows.append(f"{i}.png,{i % 2}")
        (tmp_path / "index.csv").write_text("\n".join(rows) + "\n")
        bank = TextureBank.from_directory(tmp_path)
        first = bank.embeddings(toy_extractor)
        assert (tmp_path / ".embeddings-toy-extractor.npz").exists()
        again = TextureBank.from_directory(tmp_path).embeddings(toy_extractor)
        np.testing.assert_array_equal(first, again)


class TestAttackTexture:
    def test_high_frequency_source_flips_label(self, hf, toy_extractor, smooth_image, noisy_image):
        assert classify(hf, smooth_image)[1] == 0
        res = attack_texture(hf, smooth_image, 1, noisy_image, TadvConfig(iters=3), toy_extractor)
        assert res.success and res.info["rounds"] <= 3
        assert classify(hf, res.adversarial)[1] == 1
        assert res.adversarial.min() >= 0 and res.adversarial.max() <= 1

    def test_step_accounting(self, hf, toy_extractor, smooth_image, noisy_image):
        cfg = TadvConfig(iters=3, conf_stop=1.0)
        res = attack_texture(hf, smooth_image, 1, noisy_image, cfg, toy_extractor)
        assert res.info["rounds"] == 3
        assert all("early_stop" not in t for t in res.trace)
        assert sum(res.info["steps"]) == 3 * 14

    def test_confidence_stop_between_rounds(self, hf, toy_extractor, smooth_image, noisy_image):
        res = attack_texture(hf, smooth_image, 1, noisy_image, TadvConfig(iters=3), toy_extractor)
        assert res.trace[-1]["confidence"] > 0.9
        assert all(t["confidence"] <= 0.9 for t in res.trace[:-1])
        assert all(t["steps"] == 14 for t in res.trace)

    def test_early_stop_recorded(self, toy_extractor, smooth_image):
        clf = load_model("toy-hf")
        cfg = TadvConfig(iters=3, conf_stop=1.0, beta=0.0)
        res = attack_texture(clf, smooth_image, 1, smooth_image, cfg, toy_extractor)
        # victim equals source and the cross-entropy weight is zero: nothing to optimize
        assert sum(res.info["steps"]) < 42
        assert any("early_stop" in t for t in res.trace)

    def test_non_finite_aborts(self, toy_extractor, smooth_image, noisy_image):
        from semadv.models import Classifier
        from semadv.results import AttackAborted

        class Broken(torch.nn.Module):
            def forward(self, x):
                return torch.log(-x.mean(dim=(1, 2, 3)))[:, None].expand(-1, 2)

        with pytest.raises(AttackAborted):
            attack_texture(Classifier(Broken(), "broken", 2), smooth_image, 1, noisy_image,
                           TadvConfig(), toy_extractor)

    def test_config_validation(self):
        for bad in ({"alpha": 0}, {"beta": -1}, {"iters": 2}, {"source_strategy": "best"}):
            with pytest.raises(ValueError):
                TadvConfig(**bad)

    def test_full_pipeline_records_source(self, toy_classifier, toy_extractor):
        from semadv.models.toy import toy_dataset

        images, labels = toy_dataset(1)
        bank_images, bank_labels = toy_dataset(1, seed=1)
        bank = TextureBank(bank_images, bank_labels)
        res = tadv_attack(toy_classifier, toy_extractor, images[0], 4, bank, TadvConfig(beta=0.1))
        assert bank.labels[res.info["source_index"]] == 4
        assert res.method == "tadv250_1"
