import numpy as np
import pytest
from oracles import max_relative_error

from audiofp.encoder import (
    EncoderParams,
    backward,
    forward,
    forward_with_cache,
    load_checkpoint,
    save_checkpoint,
    spec_augment,
)
from audiofp.features import MelSegment


def tiny_params(seed=0, sizes=(12, 7, 5), dtype=np.float64):
    return EncoderParams.init(list(sizes), np.random.default_rng(seed), dtype=dtype)


class TestForward:
    def test_zero_params_hit_norm_guard(self):
        params = EncoderParams(
            [np.zeros((6, 4), dtype=np.float32)], [np.zeros(4, dtype=np.float32)]
        )
        y = forward(params, np.random.default_rng(0).normal(0, 1, (3, 6)).astype(np.float32))
        expected = np.zeros((3, 4))
        expected[:, 0] = 1.0
        np.testing.assert_array_equal(y, expected)

    def test_identical_inputs_identical_outputs(self):
        params = tiny_params(1)
        x = np.random.default_rng(2).normal(0, 1, (1, 12))
        y = forward(params, np.vstack([x, x]))
        np.testing.assert_array_equal(y[0], y[1])

    def test_unit_norm_outputs(self):
        params = tiny_params(3, dtype=np.float32)
        x = np.random.default_rng(4).normal(0, 1, (64, 12)).astype(np.float32)
        norms = np.linalg.norm(forward(params, x), axis=1)
        np.testing.assert_allclose(norms, 1.0, atol=1e-6)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            forward(tiny_params(), np.zeros((2, 13)))


class TestBackward:
    def test_matches_finite_differences(self):
        # Scalar probe loss sum(C * Y): linear in the embeddings, so its
        # gradient wrt Y is exactly C and everything else is the encoder.
        params = tiny_params(5)
        rng = np.random.default_rng(6)
        x = rng.normal(0, 1, (4, 12))
        c = rng.normal(0, 1, (4, 5))

        def loss_value(p):
            return float(np.sum(c * forward(p, x)))

        y, cache = forward_with_cache(params, x)
        grad_w, grad_b = backward(params, cache, c)

        h = 1e-6
        for li in range(len(params.weights)):
            for arrs, grads in ((params.weights, grad_w), (params.biases, grad_b)):
                fd = np.zeros_like(arrs[li])
                it = np.nditer(arrs[li], flags=["multi_index"])
                while not it.finished:
                    idx = it.multi_index
                    orig = arrs[li][idx]
                    arrs[li][idx] = orig + h
                    up = loss_value(params)
                    arrs[li][idx] = orig - h
                    down = loss_value(params)
                    arrs[li][idx] = orig
                    fd[idx] = (up - down) / (2 * h)
                    it.iternext()
                assert max_relative_error(grads[li], fd) < 1e-4


class TestSpecAugment:
    def mel(self, fill=0.0, shape=(32, 20)):
        return MelSegment(np.full(shape, fill, dtype=np.float32), "t", 0)

    def test_zero_masks_identity(self):
        m = self.mel(0.3)
        out = spec_augment(m, np.random.default_rng(0), n_time_masks=0, n_freq_masks=0)
        np.testing.assert_array_equal(out.values, m.values)

    def test_masked_cells_are_silence_value(self):
        m = self.mel(0.5)
        out = spec_augment(m, np.random.default_rng(1), max_width=(8, 5))
        changed = out.values != m.values
        assert np.all(out.values[changed] == -1.0)
        # Time masks silence whole columns, freq masks whole rows.
        full_cols = np.all(changed, axis=0)
        full_rows = np.all(changed, axis=1)
        partial = changed & ~full_cols[None, :] & ~full_rows[:, None]
        assert not partial.any()

    def test_masked_cell_count_matches_uniform_law(self):
        # Monte Carlo vs the analytic expectation of uniform mask widths:
        # E = E[wf]*T + E[wt]*F - E[wf]*E[wt] for one mask per axis.
        n_mels, n_frames, max_f, max_t = 32, 20, 8, 5
        m = self.mel(0.0, (n_mels, n_frames))
        rng = np.random.default_rng(2)
        counts = []
        for _ in range(10_000):
            out = spec_augment(m, rng, max_width=(max_f, max_t))
            counts.append(np.count_nonzero(out.values == -1.0))
        expected = (max_f / 2) * n_frames + (max_t / 2) * n_mels - (max_f / 2) * (max_t / 2)
        assert np.mean(counts) == pytest.approx(expected, rel=0.02)

    def test_rejects_oversized_mask(self):
        with pytest.raises(ValueError, match="width"):
            spec_augment(self.mel(), np.random.default_rng(0), max_width=(40, 5))

    def test_deterministic_per_seed(self):
        m = self.mel(0.2)
        a = spec_augment(m, np.random.default_rng(7))
        b = spec_augment(m, np.random.default_rng(7))
        np.testing.assert_array_equal(a.values, b.values)


class TestCheckpoint:
    def test_round_trip_byte_identical(self, tmp_path):
        params = EncoderParams.init([10, 8, 4], np.random.default_rng(8))
        p1 = tmp_path / "a.nmck"
        p2 = tmp_path / "b.nmck"
        save_checkpoint(p1, params, {"seed": 8, "note": "x"})
        loaded, header = load_checkpoint(p1)
        assert header["seed"] == 8
        assert header["layer_sizes"] == [10, 8, 4]
        for w1, w2 in zip(params.weights, loaded.weights):
            np.testing.assert_array_equal(w1, w2)
        for b1, b2 in zip(params.biases, loaded.biases):
            np.testing.assert_array_equal(b1, b2)
        save_checkpoint(p2, loaded, {"seed": 8, "note": "x"})
        assert p1.read_bytes() == p2.read_bytes()

    def test_rejects_wrong_magic(self, tmp_path):
        p = tmp_path / "bad.nmck"
        p.write_bytes(b"JUNKxxxxxxxx")
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(p)
