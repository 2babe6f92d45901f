import numpy as np
import pytest
from scipy.io import wavfile

from audiofp.audio import (
    AudioBuffer,
    _kaiser_sinc,
    apply_gain,
    load_wav,
    resample,
    resample_cutoff,
    write_wav,
)


def dominant_frequency_hz(samples: np.ndarray, rate: int) -> float:
    """FFT-peak oracle: frequency of the strongest spectral line."""
    n = len(samples)
    spectrum = np.abs(np.fft.rfft(samples * np.hanning(n), n=8 * n))
    return float(np.argmax(spectrum)) * rate / (8 * n)


def sine(freq_hz: float, duration_s: float, rate: int, amp: float = 0.9) -> AudioBuffer:
    t = np.arange(int(duration_s * rate)) / rate
    return AudioBuffer((amp * np.sin(2 * np.pi * freq_hz * t)).astype(np.float32), rate)


class TestLoadWav:
    def test_pcm16_scaling_identity(self, tmp_path):
        path = tmp_path / "const.wav"
        wavfile.write(str(path), 8000, np.full(1000, 16384, dtype=np.int16))
        buf = load_wav(path)
        assert buf.sample_rate == 8000
        np.testing.assert_allclose(buf.samples, 0.5)

    def test_stereo_downmix_symmetry(self, tmp_path):
        path = tmp_path / "stereo.wav"
        data = np.stack([np.full(500, 0.5), np.full(500, -0.5)], axis=1).astype(np.float32)
        wavfile.write(str(path), 8000, data)
        buf = load_wav(path)
        np.testing.assert_allclose(buf.samples, 0.0)

    def test_round_trip(self, tmp_path):
        rng = np.random.default_rng(7)
        buf = AudioBuffer(rng.uniform(-1, 1, 4321).astype(np.float32), 8000)
        path = tmp_path / "rt.wav"
        write_wav(path, buf)
        back = load_wav(path)
        assert back.sample_rate == 8000
        np.testing.assert_allclose(back.samples, buf.samples, atol=1.0 / 32768)

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            load_wav(tmp_path / "nope.wav")

    def test_unsupported_encoding(self, tmp_path):
        path = tmp_path / "u8.wav"
        wavfile.write(str(path), 8000, np.zeros(100, dtype=np.uint8))
        with pytest.raises(ValueError, match="unsupported"):
            load_wav(path)

    def test_zero_length(self, tmp_path):
        path = tmp_path / "empty.wav"
        wavfile.write(str(path), 8000, np.zeros(0, dtype=np.int16))
        with pytest.raises(ValueError, match="zero-length"):
            load_wav(path)


class TestResample:
    def test_identity_rate(self):
        buf = sine(440, 0.5, 8000)
        out = resample(buf, 8000)
        np.testing.assert_array_equal(out.samples, buf.samples)

    def test_output_length(self):
        for n, src, dst in [(12345, 16000, 8000), (8000, 8000, 11025), (999, 22050, 8000)]:
            buf = AudioBuffer(np.zeros(n, dtype=np.float32), src)
            assert len(resample(buf, dst)) == int(np.floor(n * dst / src + 0.5))

    def test_sine_peak_preserved(self):
        out = resample(sine(1000, 2.0, 16000), 8000)
        assert out.sample_rate == 8000
        assert abs(dominant_frequency_hz(out.samples, 8000) - 1000.0) < 1.0

    def test_filter_design_stopband(self):
        # Filter-response oracle: sample the interpolation kernel densely and
        # check its spectrum is < -60 dB above the decimation band edge.
        cutoff = resample_cutoff(16000, 8000)
        oversample = 64
        x = np.arange(-32 * oversample, 32 * oversample) / oversample
        kernel = _kaiser_sinc(x, cutoff) / oversample
        freqs = np.fft.rfftfreq(len(kernel) * 16, d=1.0 / oversample)  # cycles/input-sample
        response = np.abs(np.fft.rfft(kernel, n=len(kernel) * 16))
        response_db = 20 * np.log10(np.maximum(response / response[0], 1e-12))
        band_edge = 0.25  # new Nyquist in cycles per input sample
        assert response_db[freqs >= band_edge].max() < -60.0

    def test_down_up_round_trip_correlation(self):
        rng = np.random.default_rng(3)
        # Band-limited signal: sum of tones well inside the 4 kHz band.
        t = np.arange(16000) / 8000.0
        x = sum(np.sin(2 * np.pi * f * t + p) for f, p in zip([220, 700, 1500], rng.uniform(0, 6, 3)))
        buf = AudioBuffer((x / 4).astype(np.float32), 8000)
        back = resample(resample(buf, 16000), 8000)
        n = min(len(back), len(buf))
        corr = np.corrcoef(back.samples[:n], buf.samples[:n])[0, 1]
        assert corr > 0.999

    def test_bad_rate(self):
        with pytest.raises(ValueError):
            resample(sine(440, 0.1, 8000), 0)


class TestApplyGain:
    def test_zero_db(self):
        buf = sine(440, 0.1, 8000)
        np.testing.assert_array_equal(apply_gain(buf, 0.0).samples, buf.samples)

    def test_minus_6db_halves(self):
        buf = sine(440, 0.1, 8000)
        out = apply_gain(buf, -6.0206)
        np.testing.assert_allclose(out.samples, buf.samples / 2, atol=1e-6)

    def test_plus_20db_impulse(self):
        imp = np.zeros(100, dtype=np.float32)
        imp[0] = 1.0
        out = apply_gain(AudioBuffer(imp, 8000), 20.0)
        assert out.samples[0] == pytest.approx(10.0, rel=1e-6)

    def test_round_trip(self):
        buf = sine(313, 0.2, 8000)
        out = apply_gain(apply_gain(buf, 3.7), -3.7)
        np.testing.assert_allclose(out.samples, buf.samples, atol=1e-6)

    def test_non_finite_gain(self):
        with pytest.raises(ValueError):
            apply_gain(sine(440, 0.1, 8000), np.inf)


class TestAudioBuffer:
    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            AudioBuffer(np.array([0.0, np.nan], dtype=np.float32), 8000)

    def test_rejects_bad_rate(self):
        with pytest.raises(ValueError):
            AudioBuffer(np.zeros(10, dtype=np.float32), 0)

    def test_rejects_stereo_array(self):
        with pytest.raises(ValueError):
            AudioBuffer(np.zeros((10, 2), dtype=np.float32), 8000)
