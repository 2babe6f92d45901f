import numpy as np
import pytest

from audiofp.audio import AudioBuffer
from audiofp.degrade import (
    AssetStore,
    DegradationPlan,
    ImpulseResponse,
    PartitionManifest,
    convolve_with_history,
    degrade_chain,
    mix_noise,
    truncate_ir,
    validate_partition,
)

RATE = 8000


def buf(x):
    return AudioBuffer(np.asarray(x, dtype=np.float32), RATE)


def measured_snr_db(mix: AudioBuffer, clean: AudioBuffer) -> float:
    """Power-measurement oracle: SNR implied by the residual noise component."""
    noise = mix.samples.astype(np.float64) - clean.samples.astype(np.float64)
    p_sig = np.mean(clean.samples.astype(np.float64) ** 2)
    p_noise = np.mean(noise**2)
    return 10.0 * np.log10(p_sig / p_noise)


def decaying_ir(n, seed, kind="room", source="src"):
    rng = np.random.default_rng(seed)
    h = rng.normal(0, 1, n) * np.exp(-np.arange(n) / (n / 4))
    h /= np.sqrt(np.sum(h**2))
    return ImpulseResponse(h.astype(np.float32), RATE, kind, source)


def delta_ir(kind="room", source="delta"):
    return ImpulseResponse(np.array([1.0], dtype=np.float32), RATE, kind, source)


class TestMixNoise:
    def test_equal_powers_k_is_one(self):
        sig = buf(np.ones(1000))
        noise = buf(np.ones(1000))
        out = mix_noise(sig, noise, 0.0, np.random.default_rng(0))
        np.testing.assert_allclose(out.samples, 2.0, atol=1e-6)

    def test_snr_10_closed_form(self):
        sig = buf(np.ones(1000))
        noise = buf(np.ones(1000))
        out = mix_noise(sig, noise, 10.0, np.random.default_rng(0))
        np.testing.assert_allclose(out.samples, 1.0 + 10 ** (-0.5), atol=1e-6)

    def test_achieved_snr_matches_target(self):
        rng = np.random.default_rng(1)
        sig = buf(0.3 * rng.normal(0, 1, 20_000))
        noise = buf(0.5 * rng.normal(0, 1, 50_000))
        out = mix_noise(sig, noise, 3.7, np.random.default_rng(2))
        assert measured_snr_db(out, sig) == pytest.approx(3.7, abs=1e-6)

    def test_infinite_snr_disables(self):
        sig = buf(np.ones(100))
        out = mix_noise(sig, buf(np.ones(100)), np.inf, np.random.default_rng(0))
        np.testing.assert_array_equal(out.samples, sig.samples)

    def test_zero_power_errors(self):
        with pytest.raises(ValueError, match="zero-power"):
            mix_noise(buf(np.zeros(100)), buf(np.ones(100)), 0.0, np.random.default_rng(0))
        with pytest.raises(ValueError, match="zero-power"):
            mix_noise(buf(np.ones(100)), buf(np.zeros(100)), 0.0, np.random.default_rng(0))

    def test_noise_too_short(self):
        with pytest.raises(ValueError, match="shorter"):
            mix_noise(buf(np.ones(100)), buf(np.ones(50)), 0.0, np.random.default_rng(0))

    def test_slice_is_seeded(self):
        rng = np.random.default_rng(9)
        sig = buf(rng.normal(0, 0.2, 1000))
        noise = buf(rng.normal(0, 0.2, 5000))
        a = mix_noise(sig, noise, 5.0, np.random.default_rng(42))
        b = mix_noise(sig, noise, 5.0, np.random.default_rng(42))
        np.testing.assert_array_equal(a.samples, b.samples)


class TestTruncateIr:
    def test_cut_to_context(self):
        ir = decaying_ir(3 * RATE, 0)
        out = truncate_ir(ir, 1.0)
        assert len(out.samples) == RATE
        np.testing.assert_array_equal(out.samples, ir.samples[:RATE])

    def test_short_ir_unchanged(self):
        ir = decaying_ir(int(0.2 * RATE), 1)
        out = truncate_ir(ir, 1.0)
        np.testing.assert_array_equal(out.samples, ir.samples)

    def test_delta_unchanged(self):
        out = truncate_ir(delta_ir(), 1.0)
        np.testing.assert_array_equal(out.samples, [1.0])


class TestConvolveWithHistory:
    def test_delta_identity(self):
        rng = np.random.default_rng(2)
        sig = buf(rng.normal(0, 0.3, 3 * RATE))
        out = convolve_with_history(sig, RATE, RATE, 1.0, delta_ir())
        np.testing.assert_array_equal(out.samples, sig.samples[RATE : 2 * RATE])

    def test_track_start_degenerates_to_plain_convolution(self):
        rng = np.random.default_rng(3)
        sig = buf(rng.normal(0, 0.3, 2 * RATE))
        ir = decaying_ir(1200, 4)
        out = convolve_with_history(sig, 0, RATE, 1.0, ir)
        expected = np.convolve(
            sig.samples[:RATE].astype(np.float64), ir.samples.astype(np.float64)
        )[:RATE]
        np.testing.assert_allclose(out.samples, expected, atol=1e-5)

    def test_matches_whole_track_convolution(self):
        # Whole-track convolution oracle: with history >= len(ir) - 1 the
        # segment slice of conv(track, ir) must match.
        rng = np.random.default_rng(5)
        for trial in range(20):
            n_ir = int(rng.integers(100, 2400))
            sig = buf(rng.normal(0, 0.3, 3 * RATE))
            ir = decaying_ir(n_ir, 100 + trial)
            start = int(rng.integers(RATE, 2 * RATE))
            whole = np.convolve(sig.samples.astype(np.float64), ir.samples.astype(np.float64))
            out = convolve_with_history(sig, start, RATE, 1.0, ir)
            np.testing.assert_allclose(out.samples, whole[start : start + RATE], atol=1e-5)

    def test_output_length(self):
        sig = buf(np.random.default_rng(0).normal(0, 0.1, 3 * RATE))
        out = convolve_with_history(sig, 100, 5000, 1.0, decaying_ir(500, 6))
        assert len(out) == 5000


@pytest.fixture
def store():
    s = AssetStore(RATE)
    rng = np.random.default_rng(77)
    s.add("scene_a", "noise", buf(0.2 * rng.normal(0, 1, 4 * RATE)), source_id="scene_a")
    s.add("room_delta", "room", buf([1.0]), source_id="room_x")
    s.add("mic_delta", "microphone", buf([1.0]), source_id="mic_x")
    room = decaying_ir(2 * RATE, 8)
    s.add("room_long", "room", buf(room.samples), source_id="room_y")
    mic = decaying_ir(80, 9, kind="microphone")
    s.add("mic_short", "microphone", buf(mic.samples), source_id="mic_y")
    return s


class TestDegradeChain:
    def test_identity_chain(self, store):
        rng = np.random.default_rng(10)
        sig = buf(rng.normal(0, 0.2, 2 * RATE))
        plan = DegradationPlan("scene_a", np.inf, "room_delta", "mic_delta", 0.0, 0.0, seed=3)
        out = degrade_chain(sig, plan, store, RATE, RATE)
        np.testing.assert_array_equal(out.samples, sig.samples[RATE:])

    def test_deterministic(self, store):
        rng = np.random.default_rng(11)
        sig = buf(rng.normal(0, 0.2, 2 * RATE))
        plan = DegradationPlan("scene_a", 4.2, "room_long", "mic_short", -3.0, -1.0, seed=5)
        a = degrade_chain(sig, plan, store, RATE, RATE, ir_truncate_s=1.0)
        b = degrade_chain(sig, plan, store, RATE, RATE, ir_truncate_s=1.0)
        np.testing.assert_array_equal(a.samples, b.samples)

    def test_gain_only_halves(self, store):
        rng = np.random.default_rng(12)
        sig = buf(rng.normal(0, 0.2, RATE))
        plan = DegradationPlan(None, None, None, None, gain1_db=-6.0206, gain2_db=0.0, seed=0)
        out = degrade_chain(sig, plan, store)
        np.testing.assert_allclose(out.samples, sig.samples / 2, atol=1e-6)

    def test_unresolvable_asset(self, store):
        plan = DegradationPlan(None, None, "nope", None, seed=0)
        with pytest.raises(KeyError, match="nope"):
            degrade_chain(buf(np.ones(RATE)), plan, store)

    def test_peak_normalization_recorded(self, store):
        sig = buf(0.9 * np.ones(RATE))
        plan = DegradationPlan(None, None, None, None, gain1_db=6.0, gain2_db=0.0, seed=0)
        meta = {}
        out = degrade_chain(sig, plan, store, meta=meta)
        assert meta["normalization_factor"] < 1.0
        assert np.max(np.abs(out.samples)) <= 1.0 + 1e-6

    def test_output_covers_segment_only(self, store):
        sig = buf(np.random.default_rng(1).normal(0, 0.2, 3 * RATE))
        plan = DegradationPlan("scene_a", 5.0, "room_long", "mic_short", -2.0, -2.0, seed=7)
        out = degrade_chain(sig, plan, store, RATE, RATE, ir_truncate_s=1.0)
        assert len(out) == RATE


class TestValidatePartition:
    def test_single_violation(self):
        m = PartitionManifest(
            [
                ("ir1", "aula_carolina", "train"),
                ("ir2", "aula_carolina", "test"),
                ("ir3", "studio", "train"),
            ]
        )
        assert validate_partition(m) == ["aula_carolina"]

    def test_disjoint_is_valid(self):
        m = PartitionManifest(
            [("a", "room1", "train"), ("b", "room2", "test"), ("c", "room1", "train")]
        )
        assert validate_partition(m) == []

    def test_random_manifests_match_set_oracle(self):
        rng = np.random.default_rng(13)
        sources = [f"src{i}" for i in range(12)]
        for _ in range(1000):
            n = int(rng.integers(1, 30))
            entries = [
                (
                    f"asset{i}",
                    sources[rng.integers(len(sources))],
                    "train" if rng.random() < 0.5 else "test",
                )
                for i in range(n)
            ]
            got = validate_partition(PartitionManifest(entries))
            train = {s for _, s, split in entries if split == "train"}
            test = {s for _, s, split in entries if split == "test"}
            assert got == sorted(train & test)


class TestImpulseResponse:
    def test_rejects_zero_energy(self):
        with pytest.raises(ValueError, match="energy"):
            ImpulseResponse(np.zeros(10, dtype=np.float32), RATE, "room", "x")

    def test_rejects_bad_kind(self):
        with pytest.raises(ValueError, match="kind"):
            ImpulseResponse(np.ones(10, dtype=np.float32), RATE, "banana", "x")
