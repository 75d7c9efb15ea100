"""Data layer: synthetic machine-sound corpus, dataset ingestion, tensor files.

The synthetic corpus stands in for a real machine-condition dataset: each
machine identity is a harmonic stack plus broadband noise, and anomalous
clips carry an injected defect (a high-frequency tone by default). The
directory layout mirrors the usual condition-monitoring structure
(``root/<type>/<id>/<split>/*.wav``) so real data in the same layout can be
read by ``read_dataset`` unchanged.

Tensor files (extension ``.aft``) are the shared binary format for features,
attention maps, and checkpoints: magic ``AFPT``, version byte, a record per
named array (rank u8, dims u32 LE, payload float32 LE row-major), and a
trailing CRC32 over everything before it.
"""

from __future__ import annotations

import csv
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .dsp import Waveform, load_wav, write_wav
from .errors import ConfigError, ContractError, CorruptionError, DataError, NumericError, VersionError

SPLITS = ("train_normal", "test_normal", "test_anomalous")

TENSOR_MAGIC = b"AFPT"
TENSOR_VERSION = 1


# ---------------------------------------------------------------------------
# tensor file format


def tensor_write(path, arrays: dict[str, np.ndarray]):
    """Write named float32 arrays; records are sorted by name for determinism."""
    if not arrays:
        raise ContractError("tensor_write: empty array map")
    out = bytearray()
    out += TENSOR_MAGIC
    out += struct.pack("<BI", TENSOR_VERSION, len(arrays))
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name], dtype="<f4")
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"tensor_write: non-finite values in {name!r}")
        encoded = name.encode("utf-8")
        out += struct.pack("<H", len(encoded))
        out += encoded
        out += struct.pack("<B", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.tobytes()
    out += struct.pack("<I", zlib.crc32(bytes(out)))
    Path(path).write_bytes(bytes(out))


def tensor_read(path) -> dict[str, np.ndarray]:
    """Read a tensor file, verifying magic, version, and the trailing CRC32."""
    blob = Path(path).read_bytes()
    if len(blob) < 13:
        raise CorruptionError(f"{path}: file too short to be a tensor file")
    if blob[:4] != TENSOR_MAGIC:
        raise CorruptionError(f"{path}: bad magic bytes")
    version = blob[4]
    if version != TENSOR_VERSION:
        raise VersionError(f"{path}: unsupported tensor file version {version}")
    (stored_crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(blob[:-4]) != stored_crc:
        raise CorruptionError(f"{path}: CRC mismatch")

    (count,) = struct.unpack_from("<I", blob, 5)
    pos = 9
    end = len(blob) - 4
    arrays: dict[str, np.ndarray] = {}
    for _ in range(count):
        try:
            (name_len,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + name_len].decode("utf-8")
            pos += name_len
            rank = blob[pos]
            pos += 1
            dims = struct.unpack_from(f"<{rank}I", blob, pos)
            pos += 4 * rank
            n_bytes = 4 * int(np.prod(dims)) if rank else 4
            payload = blob[pos:pos + n_bytes]
            if len(payload) < n_bytes:
                raise CorruptionError(f"{path}: truncated payload for {name!r}")
            pos += n_bytes
        except struct.error as exc:
            raise CorruptionError(f"{path}: truncated record table") from exc
        arrays[name] = np.frombuffer(payload, dtype="<f4").reshape(dims).copy()
    if pos != end:
        raise CorruptionError(f"{path}: {end - pos} unread bytes after last record")
    return arrays


# ---------------------------------------------------------------------------
# synthetic machine sounds


@dataclass(frozen=True)
class AnomalyRecipe:
    """Defect injected into anomalous clips.

    kind: narrowband_hf_tone (tone at freq_hz, rel_db below the fundamental's
    amplitude), harmonic_detune (all partials above the fundamental shifted
    by cents), or transient_clicks (Poisson clicks at rate_hz).
    """

    kind: str = "narrowband_hf_tone"
    freq_hz: float = 6000.0
    rel_db: float = -10.0
    cents: float = 60.0
    rate_hz: float = 4.0


@dataclass(frozen=True)
class SynthMachineSpec:
    """One machine identity: harmonic stack, an optional high-frequency
    resonance band (machines tend to carry identity cues up there), noise."""

    machine_type: str
    machine_id: str
    fundamental_hz: float
    harmonic_amps: tuple[float, ...]
    noise_level: float
    resonance_hz: float = 0.0        # 0 disables the resonance band
    resonance_level: float = 0.0
    resonance_bw: float = 300.0
    anomaly: AnomalyRecipe = field(default_factory=AnomalyRecipe)

    def validate(self, sample_rate: int = 16000):
        nyquist = sample_rate / 2.0
        if self.fundamental_hz <= 0:
            raise ConfigError(f"{self.machine_type}/{self.machine_id}: fundamental must be positive")
        amps = np.asarray(self.harmonic_amps, dtype=np.float64)
        if amps.size == 0 or not np.all(np.isfinite(amps)) or np.any(amps < 0):
            raise ConfigError(f"{self.machine_type}/{self.machine_id}: bad harmonic amplitudes")
        if self.resonance_hz and not (0 < self.resonance_hz < nyquist):
            raise ConfigError(
                f"{self.machine_type}/{self.machine_id}: resonance {self.resonance_hz} Hz "
                f"outside (0, {nyquist}) Hz"
            )
        if self.anomaly.kind == "narrowband_hf_tone" and not (0 < self.anomaly.freq_hz < nyquist):
            raise ConfigError(
                f"{self.machine_type}/{self.machine_id}: anomaly tone {self.anomaly.freq_hz} Hz "
                f"outside (0, {nyquist}) Hz"
            )
        if self.anomaly.kind not in ("narrowband_hf_tone", "harmonic_detune", "transient_clicks"):
            raise ConfigError(f"unknown anomaly recipe {self.anomaly.kind!r}")


def default_specs(defect_hz: float = 6000.0, defect_rel_db: float = -10.0) -> list[SynthMachineSpec]:
    """Four machine types, two identities each, defect tone at defect_hz.

    Each identity pairs a low-frequency harmonic stack with a distinct
    high-frequency resonance band, so identity cues live at both ends of
    the spectrum; the default defect is a tone between the resonances.
    """
    recipe = AnomalyRecipe("narrowband_hf_tone", freq_hz=defect_hz, rel_db=defect_rel_db)
    table = [
        ("fan", "id_00", 95.0, (1.0, 0.55, 0.30, 0.12), 0.012, 3600.0),
        ("fan", "id_02", 130.0, (1.0, 0.35, 0.50, 0.20), 0.015, 6800.0),
        ("pump", "id_00", 170.0, (1.0, 0.70, 0.15, 0.25, 0.10), 0.010, 4200.0),
        ("pump", "id_02", 215.0, (1.0, 0.25, 0.60, 0.10, 0.18), 0.013, 7200.0),
        ("slider", "id_00", 290.0, (1.0, 0.45, 0.22), 0.018, 4700.0),
        ("slider", "id_02", 360.0, (1.0, 0.65, 0.40, 0.28), 0.011, 7600.0),
        ("valve", "id_00", 440.0, (1.0, 0.30, 0.12, 0.35), 0.016, 5200.0),
        ("valve", "id_02", 520.0, (1.0, 0.50, 0.33, 0.15, 0.22), 0.009, 3300.0),
    ]
    return [
        SynthMachineSpec(t, i, f0, amps, noise,
                         resonance_hz=res, resonance_level=0.35, anomaly=recipe)
        for t, i, f0, amps, noise, res in table
    ]


def synth_clip(spec: SynthMachineSpec, anomalous: bool, seed,
               sample_rate: int = 16000, duration: float = 10.0) -> Waveform:
    """Render one clip: harmonic stack + Gaussian noise, defect if anomalous.

    ``seed`` may be an int or a numpy SeedSequence; identical inputs give
    bit-identical waveforms.
    """
    spec.validate(sample_rate)
    rng = np.random.default_rng(seed)
    n = int(round(sample_rate * duration))
    t = np.arange(n) / sample_rate

    detune = 1.0
    if anomalous and spec.anomaly.kind == "harmonic_detune":
        detune = 2.0 ** (spec.anomaly.cents / 1200.0)

    signal = np.zeros(n)
    base_scale = 0.12  # keeps the stack well inside [-1, 1] before normalization

    def wobble():
        # slow random amplitude modulation so clips differ beyond their noise
        return 1.0 + 0.1 * np.sin(2 * np.pi * rng.uniform(0.1, 0.8) * t + rng.uniform(0, 2 * np.pi))

    for k, amp in enumerate(spec.harmonic_amps, start=1):
        freq = spec.fundamental_hz * k * (detune if k > 1 else 1.0)
        if freq >= sample_rate / 2.0:
            continue
        phase = rng.uniform(0, 2 * np.pi)
        signal += base_scale * amp * wobble() * np.sin(2 * np.pi * freq * t + phase)

    if spec.resonance_hz and spec.resonance_level > 0:
        # machine-body resonance: noise shaped to a narrow high-frequency band
        white = rng.standard_normal(n)
        spectrum = np.fft.rfft(white)
        freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
        spectrum *= np.exp(-0.5 * ((freqs - spec.resonance_hz) / spec.resonance_bw) ** 2)
        shaped = np.fft.irfft(spectrum, n)
        rms = np.sqrt(np.mean(shaped ** 2))
        if rms > 0:
            signal += base_scale * spec.resonance_level * wobble() * (shaped / rms)

    if anomalous and spec.anomaly.kind == "narrowband_hf_tone":
        amp = base_scale * spec.harmonic_amps[0] * 10.0 ** (spec.anomaly.rel_db / 20.0)
        signal += amp * wobble() * np.sin(2 * np.pi * spec.anomaly.freq_hz * t + rng.uniform(0, 2 * np.pi))
    if anomalous and spec.anomaly.kind == "transient_clicks":
        n_clicks = rng.poisson(spec.anomaly.rate_hz * duration)
        decay = np.exp(-np.arange(int(0.004 * sample_rate)) / (0.001 * sample_rate))
        for _ in range(n_clicks):
            start = rng.integers(0, max(1, n - decay.size))
            signal[start:start + decay.size] += 0.5 * base_scale * decay * rng.choice([-1.0, 1.0])

    signal += rng.normal(0.0, spec.noise_level, n)
    peak = np.max(np.abs(signal))
    if peak > 0.95:
        signal *= 0.95 / peak
    clip_id = f"{spec.machine_type}_{spec.machine_id}_{'anomaly' if anomalous else 'normal'}"
    return Waveform(signal, sample_rate=sample_rate, source_id=clip_id)


# ---------------------------------------------------------------------------
# dataset layout


@dataclass(frozen=True)
class IdLabel:
    machine_type: str
    machine_id: str
    class_index: int


@dataclass
class DatasetClip:
    path: Path
    machine_type: str
    machine_id: str
    split: str
    label: str  # normal | anomalous

    @property
    def clip_id(self) -> str:
        return f"{self.machine_type}/{self.machine_id}/{self.split}/{self.path.name}"


MANIFEST_HEADER = ["clip_id", "machine_type", "machine_id", "split", "label"]


def build_corpus(specs: list[SynthMachineSpec], root, counts=(40, 10, 10),
                 seed: int = 0, force: bool = False,
                 sample_rate: int = 16000, duration: float = 10.0) -> Path:
    """Write WAV clips per (type, id, split) plus a manifest CSV; deterministic in seed."""
    if len({(s.machine_type, s.machine_id) for s in specs}) < 2:
        raise ConfigError("build_corpus: need at least two machine identities")
    n_train, n_test_normal, n_test_anomalous = counts
    root = Path(root)
    if root.exists() and any(root.iterdir()) and not force:
        raise DataError(f"build_corpus: {root} exists and is not empty (use force to overwrite)")
    root.mkdir(parents=True, exist_ok=True)

    rows = []
    for spec_idx, spec in enumerate(sorted(specs, key=lambda s: (s.machine_type, s.machine_id))):
        plan = [
            ("train_normal", n_train, False),
            ("test_normal", n_test_normal, False),
            ("test_anomalous", n_test_anomalous, True),
        ]
        for split_idx, (split, count, anomalous) in enumerate(plan):
            directory = root / spec.machine_type / spec.machine_id / split
            directory.mkdir(parents=True, exist_ok=True)
            for clip_idx in range(count):
                child = np.random.SeedSequence([seed, spec_idx, split_idx, clip_idx])
                wave = synth_clip(spec, anomalous, child, sample_rate, duration)
                name = f"clip_{clip_idx:04d}.wav"
                write_wav(directory / name, wave)
                rows.append([
                    f"{spec.machine_type}/{spec.machine_id}/{split}/{name}",
                    spec.machine_type, spec.machine_id, split,
                    "anomalous" if anomalous else "normal",
                ])

    with open(root / "manifest.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        writer.writerows(rows)
    return root


def scan_dataset(root) -> list[DatasetClip]:
    """List clips under root/<type>/<id>/<split>/*.wav in lexicographic order."""
    root = Path(root)
    if not root.exists():
        raise DataError(f"scan_dataset: {root} does not exist")
    clips = []
    for type_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        for id_dir in sorted(p for p in type_dir.iterdir() if p.is_dir()):
            for split_dir in sorted(p for p in id_dir.iterdir() if p.is_dir()):
                if split_dir.name not in SPLITS:
                    raise DataError(f"scan_dataset: unknown split directory {split_dir}")
                for wav in sorted(split_dir.glob("*.wav")):
                    clips.append(DatasetClip(
                        path=wav,
                        machine_type=type_dir.name,
                        machine_id=id_dir.name,
                        split=split_dir.name,
                        label="anomalous" if split_dir.name == "test_anomalous" else "normal",
                    ))
    return clips


def class_map_from_clips(clips: list[DatasetClip]) -> list[tuple[str, str]]:
    """Sorted (machine_type, machine_id) pairs; list index is the class index."""
    return sorted({(c.machine_type, c.machine_id) for c in clips})


def read_dataset(root) -> Iterator[tuple[Waveform, IdLabel, str, str]]:
    """Yield (waveform, id label, split, normal/anomalous) in stable path order."""
    clips = scan_dataset(root)
    pairs = class_map_from_clips(clips)
    index = {pair: i for i, pair in enumerate(pairs)}
    for clip in clips:
        wave = load_wav(clip.path)
        wave.source_id = clip.clip_id
        label = IdLabel(clip.machine_type, clip.machine_id, index[(clip.machine_type, clip.machine_id)])
        yield wave, label, clip.split, clip.label
