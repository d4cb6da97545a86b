#!/usr/bin/env python3
"""
Synthetic emitter simulation, phase-rotation augmentation and dataset pools.

The received record is r = h * x + n: a random QPSK pulse train passed
through a per-emitter hardware impairment chain (IQ imbalance, carrier
frequency offset, phase-noise walk, cubic PA compression), convolved with
the channel taps and corrupted by circular complex AWGN.

The impairment chain is a stand-in fingerprint model for synthetic
experiments; real captures are read with load_iq_file().
"""

import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from utils import ConfigurationError, IQFormatError, SelectionError, named_stream

logger = logging.getLogger(__name__)

# Impairment sampling ranges (uniform)
GAIN_IMBALANCE_DB_MAX = 1.0
PHASE_IMBALANCE_RAD_MAX = math.radians(5.0)
CFO_MAX = 1e-4
PHASE_NOISE_STD_MAX = 0.01
PA_CUBIC_MAX = 0.05

SAMPLES_PER_SYMBOL = 4
MIN_RECORD_LENGTH = 64
DEFAULT_AUGMENT_ANGLES = (0.5 * math.pi, math.pi)

_IQ_HEADER_FIELDS = ("count", "length", "sample_rate", "labels_present")


@dataclass
class IQRecord:
    """One complex baseband record with optional exposed label."""

    samples: np.ndarray
    label: Optional[int] = None
    emitter_truth: Optional[int] = None
    record_id: int = -1

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.complex128)
        if self.label is not None and self.emitter_truth is not None and self.label != self.emitter_truth:
            raise ConfigurationError(f"record label {self.label} disagrees with ground truth {self.emitter_truth}")

    @property
    def length(self) -> int:
        return int(self.samples.shape[0])

    def hidden(self) -> "IQRecord":
        return replace(self, label=None)

    def revealed(self) -> "IQRecord":
        if self.emitter_truth is None:
            raise SelectionError("record has no ground-truth emitter to reveal")
        return replace(self, label=self.emitter_truth)


@dataclass
class EmitterProfile:
    """Hardware impairment parameters that make up one device's fingerprint."""

    emitter_id: int
    iq_gain_imbalance: float = 0.0      # dB
    iq_phase_imbalance: float = 0.0     # radians
    carrier_freq_offset: float = 0.0    # fraction of sample rate
    phase_noise_std: float = 0.0        # radians per sample
    pa_cubic_coeff: float = 0.0

    @classmethod
    def draw(cls, emitter_id: int, rng: np.random.Generator) -> "EmitterProfile":
        return cls(
            emitter_id=emitter_id,
            iq_gain_imbalance=rng.uniform(-GAIN_IMBALANCE_DB_MAX, GAIN_IMBALANCE_DB_MAX),
            iq_phase_imbalance=rng.uniform(-PHASE_IMBALANCE_RAD_MAX, PHASE_IMBALANCE_RAD_MAX),
            carrier_freq_offset=rng.uniform(-CFO_MAX, CFO_MAX),
            phase_noise_std=rng.uniform(0.0, PHASE_NOISE_STD_MAX),
            pa_cubic_coeff=rng.uniform(0.0, PA_CUBIC_MAX),
        )

    def parameter_vector(self) -> Tuple[float, ...]:
        return (self.iq_gain_imbalance, self.iq_phase_imbalance, self.carrier_freq_offset,
                self.phase_noise_std, self.pa_cubic_coeff)

    def apply(self, payload: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Run the impairment chain: IQ imbalance -> CFO -> phase noise -> cubic PA."""
        n = np.arange(payload.shape[0])
        gain = 10.0 ** (self.iq_gain_imbalance / 20.0)
        i, q = payload.real, payload.imag
        phi = self.iq_phase_imbalance
        x = i + 1j * gain * (q * math.cos(phi) - i * math.sin(phi))
        x = x * np.exp(2j * math.pi * self.carrier_freq_offset * n)
        if self.phase_noise_std > 0.0:
            x = x * np.exp(1j * np.cumsum(rng.normal(0.0, self.phase_noise_std, payload.shape[0])))
        return x - self.pa_cubic_coeff * x * np.abs(x) ** 2


@dataclass
class ChannelConfig:
    """Channel impulse response and noise level."""

    taps: np.ndarray = field(default_factory=lambda: np.array([1.0 + 0j]))
    snr_db: float = math.inf

    def __post_init__(self):
        self.taps = np.atleast_1d(np.asarray(self.taps, dtype=np.complex128))
        if self.taps.size == 0:
            raise ConfigurationError("channel needs at least one tap")

    @classmethod
    def multipath(cls, num_taps: int, snr_db: float, rng: np.random.Generator,
                  decay: float = 0.5) -> "ChannelConfig":
        """Random Rayleigh taps with exponentially decaying power, unit total energy."""
        if num_taps < 1:
            raise ConfigurationError(f"multipath channel needs at least one tap, got {num_taps}")
        power = decay ** np.arange(num_taps)
        taps = np.sqrt(power / 2.0) * (rng.standard_normal(num_taps) + 1j * rng.standard_normal(num_taps))
        return cls(taps=taps / np.linalg.norm(taps), snr_db=snr_db)

    def apply(self, signal: np.ndarray, rng: Optional[np.random.Generator]) -> np.ndarray:
        """Convolve with the taps (output trimmed to the input length) and add AWGN."""
        received = np.convolve(signal, self.taps)[:signal.shape[0]]
        if math.isinf(self.snr_db):
            return received
        noise_power = np.mean(np.abs(received) ** 2) / 10.0 ** (self.snr_db / 10.0)
        if rng is None:
            raise ConfigurationError("finite SNR needs a random generator for the noise")
        noise = math.sqrt(noise_power / 2.0) * (
            rng.standard_normal(signal.shape[0]) + 1j * rng.standard_normal(signal.shape[0]))
        return received + noise


@dataclass
class DatasetPools:
    """Disjoint labeled / unlabeled / held-out test record lists."""

    labeled: List[IQRecord] = field(default_factory=list)
    unlabeled: List[IQRecord] = field(default_factory=list)
    test: List[IQRecord] = field(default_factory=list)

    @property
    def trainable_count(self) -> int:
        return len(self.labeled) + len(self.unlabeled)


def qpsk_payload(length: int, rng: np.random.Generator,
                 samples_per_symbol: int = SAMPLES_PER_SYMBOL) -> np.ndarray:
    """Unit-power random QPSK symbols held for `samples_per_symbol` samples each."""
    n_symbols = -(-length // samples_per_symbol)
    bits = rng.integers(0, 2, size=(n_symbols, 2))
    symbols = ((2 * bits[:, 0] - 1) + 1j * (2 * bits[:, 1] - 1)) / math.sqrt(2.0)
    return np.repeat(symbols, samples_per_symbol)[:length]


def _quantize_complex64(samples: np.ndarray) -> np.ndarray:
    # Generated records are exactly representable in the 32-bit file format.
    return samples.astype(np.complex64).astype(np.complex128)


def simulate_record(profile: EmitterProfile, length: int, channel: ChannelConfig,
                    seed: int, index: int, record_id: int = -1) -> IQRecord:
    """Draw one record of `profile`; streams are keyed by (emitter, index)."""
    payload = qpsk_payload(length, named_stream(seed, "payload", profile.emitter_id, index))
    impaired = profile.apply(payload, named_stream(seed, "phase_noise", profile.emitter_id, index))
    received = channel.apply(impaired, named_stream(seed, "noise", profile.emitter_id, index))
    return IQRecord(samples=_quantize_complex64(received), emitter_truth=profile.emitter_id, record_id=record_id)


def draw_profiles(num_emitters: int, seed: int) -> List[EmitterProfile]:
    rng = named_stream(seed, "profiles")
    profiles: List[EmitterProfile] = []
    seen = set()
    while len(profiles) < num_emitters:
        profile = EmitterProfile.draw(len(profiles), rng)
        if profile.parameter_vector() in seen:
            continue
        seen.add(profile.parameter_vector())
        profiles.append(profile)
    return profiles


def split_pools(records: Sequence[IQRecord], initial_labeled: int = 0, test_fraction: float = 0.0,
                rng: Optional[np.random.Generator] = None) -> DatasetPools:
    """
    Partition records into labeled, unlabeled and test pools.

    The test share is taken per emitter; the initial labeled set is drawn
    round-robin across emitters so every class is represented when
    initial_labeled >= number of emitters. Records without ground truth
    can only land in the unlabeled pool.
    """
    if not 0.0 <= test_fraction < 1.0:
        raise ConfigurationError(f"test_fraction must lie in [0, 1), got {test_fraction}")
    rng = rng if rng is not None else np.random.default_rng(0)
    by_emitter: Dict[Optional[int], List[int]] = {}
    for idx in rng.permutation(len(records)):
        by_emitter.setdefault(records[idx].emitter_truth, []).append(int(idx))

    test_idx: List[int] = []
    remaining: Dict[Optional[int], List[int]] = {}
    for emitter, indices in sorted(by_emitter.items(), key=lambda kv: (kv[0] is None, kv[0] or 0)):
        n_test = int(round(test_fraction * len(indices))) if emitter is not None else 0
        test_idx.extend(indices[:n_test])
        remaining[emitter] = indices[n_test:]

    labeled_idx: List[int] = []
    queues = [q for e, q in sorted(remaining.items(), key=lambda kv: (kv[0] is None, kv[0] or 0)) if e is not None]
    available = sum(len(q) for q in queues)
    if initial_labeled > available:
        raise ConfigurationError(f"cannot label {initial_labeled} records, only {available} have ground truth")
    cursor = 0
    while len(labeled_idx) < initial_labeled:
        queue = queues[cursor % len(queues)]
        if queue:
            labeled_idx.append(queue.pop(0))
        cursor += 1

    taken = set(labeled_idx) | set(test_idx)
    return DatasetPools(
        labeled=[records[i].revealed() for i in labeled_idx],
        unlabeled=[records[i].hidden() for i in range(len(records)) if i not in taken],
        test=[records[i].revealed() for i in test_idx],
    )


def generate_dataset(num_emitters: int, per_emitter: int, length: int, channel: ChannelConfig,
                     seed: int, initial_labeled: int = 0, test_fraction: float = 0.0,
                     profiles: Optional[List[EmitterProfile]] = None) -> Tuple[DatasetPools, List[EmitterProfile]]:
    """
    Simulate `per_emitter` records for each of `num_emitters` devices.

    Args:
        num_emitters: M >= 2
        per_emitter: records per device, >= 1
        length: L >= 64 complex samples per record
        channel: taps and SNR shared by all records
        seed: master seed; equal seeds give bit-identical datasets
        initial_labeled: records exposed in the labeled pool
        test_fraction: per-emitter share held out for testing
        profiles: explicit fingerprints (default: drawn from the seed)

    Returns:
        (pools, profiles)
    """
    if num_emitters < 2:
        raise ConfigurationError(f"need at least 2 emitters, got {num_emitters}")
    if per_emitter < 1:
        raise ConfigurationError(f"need at least 1 record per emitter, got {per_emitter}")
    if length < MIN_RECORD_LENGTH:
        raise ConfigurationError(f"record length must be >= {MIN_RECORD_LENGTH}, got {length}")
    if profiles is None:
        profiles = draw_profiles(num_emitters, seed)
    elif len(profiles) != num_emitters:
        raise ConfigurationError(f"{len(profiles)} profiles given for {num_emitters} emitters")

    records = [simulate_record(profile, length, channel, seed, i, record_id=profile.emitter_id * per_emitter + i)
               for profile in profiles for i in range(per_emitter)]
    pools = split_pools(records, initial_labeled, test_fraction, named_stream(seed, "split"))
    logger.debug(f"Simulated {len(records)} records from {num_emitters} emitters (L={length}, SNR={channel.snr_db} dB)")
    return pools, profiles


def augment(record: IQRecord, theta: float) -> IQRecord:
    """Rotate every sample by e^{j theta}; labels are preserved."""
    return replace(record, samples=record.samples * np.exp(1j * theta))


def augmentation_pair(record: IQRecord,
                      angles: Sequence[float] = DEFAULT_AUGMENT_ANGLES) -> Tuple[IQRecord, IQRecord]:
    if len(angles) != 2:
        raise ConfigurationError(f"augmentation pair needs exactly two angles, got {len(angles)}")
    return augment(record, angles[0]), augment(record, angles[1])


def network_batch(records: Sequence[IQRecord], theta: float = 0.0) -> np.ndarray:
    """Stack rotated records into the (N, 2, L) real network input [I; Q]."""
    if not records:
        raise ConfigurationError("cannot build a network batch from zero records")
    lengths = {r.length for r in records}
    if len(lengths) != 1:
        raise ConfigurationError(f"records in one batch must share a length, got {sorted(lengths)}")
    rotated = np.stack([r.samples for r in records]) * np.exp(1j * theta)
    return np.stack([rotated.real, rotated.imag], axis=1)


def reveal_label(pools: DatasetPools, indices: Sequence[int]) -> DatasetPools:
    """Move unlabeled records at `indices` into the labeled pool with their truth exposed."""
    indices = [int(i) for i in indices]
    if len(set(indices)) != len(indices):
        raise SelectionError(f"duplicate indices in reveal request: {indices}")
    bad = [i for i in indices if not 0 <= i < len(pools.unlabeled)]
    if bad:
        raise SelectionError(f"indices {bad} out of range for unlabeled pool of size {len(pools.unlabeled)}")
    chosen = set(indices)
    return DatasetPools(
        labeled=list(pools.labeled) + [pools.unlabeled[i].revealed() for i in indices],
        unlabeled=[r for i, r in enumerate(pools.unlabeled) if i not in chosen],
        test=list(pools.test),
    )


# --- I/Q file format ---

def save_iq_file(records: Sequence[IQRecord], path: str, sample_rate: float = 1.0) -> None:
    """
    Write records as a JSON header line followed by little-endian float32
    interleaved I/Q samples (record-major) and an optional int32 label block.
    """
    lengths = {r.length for r in records}
    if len(lengths) > 1:
        raise ConfigurationError(f"all records in one file must share a length, got {sorted(lengths)}")
    length = lengths.pop() if lengths else 0
    labels_present = bool(records) and all(r.emitter_truth is not None for r in records)
    header = {"count": len(records), "length": length, "sample_rate": sample_rate,
              "labels_present": labels_present}
    with open(path, "wb") as handle:
        handle.write(json.dumps(header).encode("utf-8") + b"\n")
        if records:
            samples = np.stack([r.samples for r in records])
            interleaved = np.empty((len(records), length, 2), dtype="<f4")
            interleaved[..., 0] = samples.real
            interleaved[..., 1] = samples.imag
            handle.write(interleaved.tobytes())
        if labels_present:
            handle.write(np.array([r.emitter_truth for r in records], dtype="<i4").tobytes())


def read_iq_header(raw: bytes) -> Tuple[dict, int]:
    newline = raw.find(b"\n")
    if newline < 0:
        raise IQFormatError("missing header line terminator", 0)
    try:
        header = json.loads(raw[:newline].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise IQFormatError(f"header is not valid JSON: {e}", 0) from e
    missing = [k for k in _IQ_HEADER_FIELDS if not isinstance(header, dict) or k not in header]
    if missing:
        raise IQFormatError(f"header missing fields {missing}", 0)
    if int(header["count"]) < 0 or int(header["length"]) < 0:
        raise IQFormatError(f"negative count or length in header {header}", 0)
    return header, newline + 1


def load_iq_file(path: str) -> List[IQRecord]:
    """Read a file written by save_iq_file. Labels, when present, become ground truth and exposed labels."""
    with open(path, "rb") as handle:
        raw = handle.read()
    header, offset = read_iq_header(raw)
    count, length = int(header["count"]), int(header["length"])
    sample_bytes = count * length * 2 * 4
    label_bytes = count * 4 if header["labels_present"] else 0
    expected = offset + sample_bytes + label_bytes
    if len(raw) < expected:
        raise IQFormatError(f"truncated payload: expected {expected} bytes, file has {len(raw)}", len(raw))
    if len(raw) > expected:
        raise IQFormatError(f"{len(raw) - expected} unexpected trailing bytes after payload", expected)

    interleaved = np.frombuffer(raw, dtype="<f4", count=count * length * 2, offset=offset)
    interleaved = interleaved.reshape(count, length, 2).astype(np.float64)
    samples = interleaved[..., 0] + 1j * interleaved[..., 1]
    labels: List[Optional[int]] = [None] * count
    if header["labels_present"]:
        labels = [int(v) for v in np.frombuffer(raw, dtype="<i4", count=count, offset=offset + sample_bytes)]
    return [IQRecord(samples=samples[i], label=labels[i], emitter_truth=labels[i], record_id=i) for i in range(count)]
