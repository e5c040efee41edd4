"""Log-power short-time spectra.

Waveforms are cut into Hann-windowed frames (25 ms window, 10 ms hop at
16 kHz by default), each frame goes through a 512-point DFT, and the first
256 bins (Nyquist dropped) become ln(|X|^2 + floor). No mean or variance
normalization is applied at this stage; downstream consumers see the raw
log-power scale.
"""

import dataclasses
import json

import numpy as np

from .autodiff import load_tensors, save_tensors


@dataclasses.dataclass(frozen=True)
class WindowConfig:
    sample_rate: int = 16000
    window_ms: float = 25.0
    hop_ms: float = 10.0
    fft_size: int = 512
    n_bins: int = 256
    max_frames: int = 600
    log_floor: float = 1e-10

    @property
    def window_samples(self):
        return int(round(self.sample_rate * self.window_ms / 1000.0))

    @property
    def hop_samples(self):
        return int(round(self.sample_rate * self.hop_ms / 1000.0))

    def validate(self):
        if self.window_samples > self.fft_size:
            raise ValueError(
                f"window of {self.window_samples} samples exceeds "
                f"fft_size {self.fft_size}")
        if not 1 <= self.n_bins <= self.fft_size // 2:
            raise ValueError(f"n_bins {self.n_bins} out of range for "
                             f"fft_size {self.fft_size}")
        if self.max_frames < 1 or self.log_floor <= 0.0:
            raise ValueError("max_frames must be >= 1 and log_floor > 0")

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclasses.dataclass
class FeatureMatrix:
    """(frames, bins) float64 log-power values plus the config that made them."""
    data: np.ndarray
    config: WindowConfig

    @property
    def n_frames(self):
        return self.data.shape[0]


def hanning(length):
    """Symmetric Hann window: w[n] = 0.5*(1 - cos(2*pi*n/(L-1)))."""
    if length < 2:
        raise ValueError(f"window length must be >= 2, got {length}")
    n = np.arange(length)
    return 0.5 * (1.0 - np.cos(2.0 * np.pi * n / (length - 1)))


def frame_count(n_samples, config):
    """floor((len - window)/hop) + 1, capped at max_frames; 0 if too short."""
    win = config.window_samples
    if n_samples < win:
        return 0
    return min((n_samples - win) // config.hop_samples + 1, config.max_frames)


def stft_logpower(wave, config=None):
    """Log-power spectrogram of a 1-D waveform as a FeatureMatrix."""
    config = config or WindowConfig()
    config.validate()
    wave = np.asarray(wave, dtype=np.float64)
    if wave.ndim != 1:
        raise ValueError(f"waveform must be 1-D, got shape {wave.shape}")
    if not np.all(np.isfinite(wave)):
        raise ValueError("waveform contains non-finite samples")
    win = config.window_samples
    hop = config.hop_samples
    n_frames = frame_count(len(wave), config)
    if n_frames == 0:
        raise ValueError(
            f"waveform of {len(wave)} samples is shorter than one window ({win})")

    window = hanning(win)
    starts = np.arange(n_frames) * hop
    frames = np.stack([wave[s:s + win] for s in starts]) * window
    spectrum = np.fft.rfft(frames, n=config.fft_size, axis=1)[:, :config.n_bins]
    power = spectrum.real ** 2 + spectrum.imag ** 2
    return FeatureMatrix(np.log(power + config.log_floor), config)


# ---------------------------------------------------------------------------
# on-disk cache: one container file per utterance, config hash in a sidecar


def save_features(path, feats, config_hash=""):
    save_tensors(path, {"logpower": feats.data})
    meta = {"config": feats.config.to_dict(), "config_hash": config_hash}
    with open(str(path) + ".json", "w") as fh:
        json.dump(meta, fh, sort_keys=True)
        fh.write("\n")


def load_features(path):
    tensors = load_tensors(path)
    if "logpower" not in tensors:
        raise ValueError(f"{path}: no 'logpower' tensor in feature file")
    with open(str(path) + ".json") as fh:
        meta = json.load(fh)
    config = WindowConfig(**meta["config"])
    return FeatureMatrix(tensors["logpower"], config), meta.get("config_hash", "")
