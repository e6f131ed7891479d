"""Data generators, noise schedule, and metrics."""

import math

import numpy as np
import pytest

from minergy.autodiff import ContractViolation, make_rng
from minergy.tasks import (
    apply_noise,
    bundled_images,
    cross_entropy,
    gen_continuous,
    gen_corpus,
    images_to_patches,
    load_corpus,
    make_schedule,
    make_textures,
    mse,
    mse_pixel,
    patches_to_images,
    perplexity,
    psnr,
    read_pgm,
    save_corpus,
    write_pgm,
)


class TestNoiseSchedule:
    def test_two_step_schedule_is_exactly_the_endpoints(self):
        sched = make_schedule(2)
        assert sched.betas[0] == 1e-4
        assert sched.betas[1] == 2e-2

    def test_three_step_midpoint(self):
        assert abs(make_schedule(3).betas[1] - 1.005e-2) < 1e-15

    def test_default_length_and_monotonicity(self):
        sched = make_schedule()
        assert sched.steps == 1000
        assert np.all(np.diff(sched.betas) > 0)
        assert np.all(np.diff(sched.alpha_bars) < 0)

    def test_too_short_rejected(self):
        with pytest.raises(ContractViolation):
            make_schedule(1)

    def test_low_index_noise_is_nearly_identity(self):
        sched = make_schedule(1000)
        clean = make_textures(1, seed=0)[0]
        sample = apply_noise(clean, 1e-9, sched, make_rng(1))
        assert np.max(np.abs(sample.noised - clean)) < 0.05

    def test_sigma_fraction_bounds(self):
        sched = make_schedule(10)
        img = np.zeros((4, 4))
        with pytest.raises(ContractViolation):
            apply_noise(img, 0.0, sched, make_rng(0))
        with pytest.raises(ContractViolation):
            apply_noise(img, 1.5, sched, make_rng(0))
        apply_noise(img, 1.0, sched, make_rng(0))  # inclusive upper end

    def test_noise_is_seed_deterministic(self):
        sched = make_schedule(100)
        img = make_textures(1, seed=3)[0]
        a = apply_noise(img, 0.3, sched, make_rng(7)).noised
        b = apply_noise(img, 0.3, sched, make_rng(7)).noised
        assert np.array_equal(a, b)

    def test_psnr_strictly_decreases_with_noise_level(self):
        sched = make_schedule(1000)
        rng = make_rng(5)
        for img in make_textures(50, seed=11):
            values = [psnr(apply_noise(img, frac, sched, rng).noised, img)
                      for frac in (0.05, 0.1, 0.2, 0.4)]
            assert all(a > b for a, b in zip(values, values[1:])), values


class TestMetrics:
    def test_identical_images_hit_the_infinity_sentinel(self):
        img = make_textures(1, seed=0)[0]
        assert mse(img, img) == 0.0
        assert psnr(img, img) == float("inf")

    def test_uniform_offset_closed_form(self):
        img = np.full((8, 8), 0.25)
        off = img + 1.0 / 255.0
        assert abs(mse_pixel(img, off) - 1.0) < 1e-9
        want = 10.0 * math.log10(255.0 ** 2)
        assert abs(psnr(img, off) - want) < 1e-9
        assert round(want, 2) == 48.13

    def test_pixel_scaling_convention(self):
        a, b = make_textures(2, seed=2)
        assert abs(mse_pixel(a, b) - mse(a, b) * 255.0 ** 2) < 1e-9

    def test_uniform_logits_cross_entropy(self):
        logits = np.zeros((3, 5, 16))
        targets = make_rng(0).integers(0, 16, size=(3, 5))
        assert abs(cross_entropy(logits, targets) - math.log(16)) < 1e-12
        assert abs(perplexity(cross_entropy(logits, targets)) - 16.0) < 1e-9

    def test_confident_correct_logits_drive_ce_to_zero(self):
        targets = make_rng(1).integers(0, 8, size=(2, 4))
        logits = np.zeros((2, 4, 8))
        np.put_along_axis(logits, targets[..., None], 50.0, axis=-1)
        assert cross_entropy(logits, targets) < 1e-8

    def test_against_naive_loop_oracle(self):
        rng = make_rng(42)
        logits = rng.standard_normal((4, 8, 16))
        targets = rng.integers(0, 16, size=(4, 8))
        total = 0.0
        for b in range(4):
            for s in range(8):
                z = logits[b, s]
                total += math.log(sum(math.exp(v) for v in z)) - z[targets[b, s]]
        assert abs(cross_entropy(logits, targets) - total / 32) < 1e-10

    def test_masked_cross_entropy(self):
        rng = make_rng(3)
        logits = rng.standard_normal((2, 6, 5))
        targets = rng.integers(0, 5, size=(2, 6))
        mask = np.arange(6) >= 3
        manual = cross_entropy(logits[:, 3:], targets[:, 3:])
        assert abs(cross_entropy(logits, targets, mask) - manual) < 1e-12
        with pytest.raises(ContractViolation):
            cross_entropy(logits, targets, np.zeros(6))

    def test_out_of_vocab_target_rejected(self):
        with pytest.raises(ContractViolation):
            cross_entropy(np.zeros((1, 2, 4)), np.array([[0, 4]]))


class TestCorpora:
    def test_copy_halves_and_mask(self):
        corpus = gen_corpus("copy", vocab=16, seq_len=8, count=50, seed=0)
        for row in np.concatenate([corpus.train, corpus.val]):
            assert np.array_equal(row[:4], row[4:])
        # predicting position i+1 from prefix: determined from mid-point on
        assert corpus.loss_mask.tolist() == [False, False, False, True, True, True, True]

    def test_copy_rejects_odd_length(self):
        with pytest.raises(ContractViolation):
            gen_corpus("copy", vocab=16, seq_len=7, count=10, seed=0)

    def test_splits_disjoint_and_deterministic(self):
        a = gen_corpus("ngram", vocab=8, seq_len=12, count=200, seed=5)
        b = gen_corpus("ngram", vocab=8, seq_len=12, count=200, seed=5)
        assert np.array_equal(a.train, b.train) and np.array_equal(a.val, b.val)
        train_keys = {row.tobytes() for row in a.train}
        val_keys = {row.tobytes() for row in a.val}
        assert not train_keys & val_keys
        assert len(train_keys) == len(a.train) and len(val_keys) == len(a.val)

    def test_all_tokens_in_vocabulary(self):
        for kind, vocab in (("copy", 6), ("ngram", 6), ("dyck", 6)):
            corpus = gen_corpus(kind, vocab=vocab, seq_len=12, count=40, seed=1)
            full = np.concatenate([corpus.train, corpus.val])
            assert full.min() >= 0 and full.max() < vocab

    def test_bigram_frequencies_match_the_chain(self):
        corpus = gen_corpus("ngram", vocab=6, seq_len=64, count=2000, seed=9,
                            val_fraction=0.05)
        rows = corpus.train
        assert rows.size >= 1e5
        counts = np.zeros((6, 6))
        for row in rows:
            np.add.at(counts, (row[:-1], row[1:]), 1.0)
        empirical = counts / counts.sum(axis=1, keepdims=True)
        assert np.max(np.abs(empirical - corpus.transition)) < 0.01

    def test_dyck_rows_are_balanced_typed_and_bounded(self):
        corpus = gen_corpus("dyck", vocab=8, seq_len=16, count=100, seed=2, max_depth=3)
        for row in np.concatenate([corpus.train, corpus.val]):
            stack = []
            peak = 0
            for sym in row:
                if sym % 2 == 0:
                    stack.append(sym // 2)
                    peak = max(peak, len(stack))
                else:
                    assert stack, "close with empty stack"
                    assert stack.pop() == sym // 2, "mismatched bracket type"
            assert not stack
            assert peak <= 3

    def test_dyck_rejects_odd_shapes(self):
        with pytest.raises(ContractViolation):
            gen_corpus("dyck", vocab=7, seq_len=8, count=10, seed=0)
        with pytest.raises(ContractViolation):
            gen_corpus("dyck", vocab=8, seq_len=9, count=10, seed=0)

    def test_unknown_kind_and_bounds(self):
        with pytest.raises(ContractViolation):
            gen_corpus("shakespeare", vocab=8, seq_len=8, count=10, seed=0)
        with pytest.raises(ContractViolation):
            gen_corpus("copy", vocab=65, seq_len=8, count=10, seed=0)
        with pytest.raises(ContractViolation):
            gen_corpus("copy", vocab=8, seq_len=66, count=10, seed=0)

    def test_impossible_dedupe_rejected(self):
        with pytest.raises(ContractViolation):
            gen_corpus("copy", vocab=2, seq_len=2, count=50, seed=0)

    def test_corpus_file_round_trip(self, tmp_path):
        corpus = gen_corpus("copy", vocab=16, seq_len=8, count=20, seed=4)
        path = str(tmp_path / "corpus.txt")
        save_corpus(path, corpus.train)
        assert np.array_equal(load_corpus(path), corpus.train)

    def test_continuous_sequences(self):
        data = gen_continuous(20, 16, 3, seed=8)
        assert data.shape == (20, 16, 3)
        assert abs(float(data.mean())) < 1e-9
        assert abs(float(data.std()) - 1.0) < 1e-9
        assert np.array_equal(data, gen_continuous(20, 16, 3, seed=8))


class TestImages:
    def test_textures_shape_range_and_variety(self):
        imgs = make_textures(6, seed=0)
        assert imgs.shape == (6, 32, 32)
        assert imgs.min() >= 0.0 and imgs.max() <= 1.0
        for img in imgs:
            assert img.std() > 0.01

    def test_patch_round_trip_is_exact(self):
        imgs = make_textures(3, seed=1)
        seq = images_to_patches(imgs)
        assert seq.shape == (3, 64, 16)
        back = patches_to_images(seq)
        np.testing.assert_allclose(back, imgs, atol=1e-12)

    def test_patch_shape_contracts(self):
        with pytest.raises(ContractViolation):
            images_to_patches(np.zeros((1, 30, 30)))
        with pytest.raises(ContractViolation):
            patches_to_images(np.zeros((1, 60, 16)))

    def test_pgm_round_trip_bit_exact(self, tmp_path):
        img = (make_textures(1, seed=2)[0] * 255).round().astype(np.uint8)
        path = str(tmp_path / "t.pgm")
        write_pgm(path, img)
        back = read_pgm(path)
        assert np.array_equal((back * 255).round().astype(np.uint8), img)

    def test_pgm_rejects_other_formats(self, tmp_path):
        path = tmp_path / "bad.pgm"
        path.write_bytes(b"P2\n2 2\n255\n0 0 0 0\n")
        with pytest.raises(ContractViolation):
            read_pgm(str(path))

    def test_bundled_set_loads(self):
        imgs = bundled_images()
        assert imgs.shape[0] >= 4
        assert imgs.shape[1:] == (32, 32)
        assert imgs.min() >= 0.0 and imgs.max() <= 1.0
        for img in imgs:
            assert img.std() > 0.01
