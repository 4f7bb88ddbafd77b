"""Audio ingestion, synthetic speech corpus and trial lists.

The synthesizer is a plain source-filter model: a rounded impulse train (or
white noise for unvoiced segments) is passed through three cascaded
second-order resonators. Formant frequencies are divided by the speaker's
vocal-tract scale, so a longer tract (scale > 1) gives lower formants.
"""

from __future__ import annotations

import wave
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.signal import lfilter

from .errors import DataError

TRIAL_TYPES = ("genuine", "target-wrong", "imposter-correct", "imposter-wrong")
NONTARGET_TYPES = TRIAL_TYPES[1:]


@dataclass(frozen=True)
class Utterance:
    samples: np.ndarray
    sample_rate: int = 16000
    speaker_id: str = "unknown"
    phrase_id: str = "unknown"
    session_id: str = "0"
    utterance_id: str = ""

    def __post_init__(self):
        samples = np.asarray(self.samples, dtype=np.float64)
        if samples.ndim != 1 or samples.size == 0:
            raise DataError("utterance samples must be a non-empty 1-D sequence")
        if self.sample_rate <= 0:
            raise DataError(f"invalid sample rate {self.sample_rate}")
        if not (self.speaker_id and self.phrase_id and self.session_id):
            raise DataError("speaker, phrase and session ids must be non-empty")
        object.__setattr__(self, "samples", samples)
        if not self.utterance_id:
            object.__setattr__(
                self, "utterance_id", f"{self.speaker_id}_{self.phrase_id}_{self.session_id}"
            )

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate


@dataclass(frozen=True)
class SpeakerSpec:
    vtl_scale: float = 1.0
    f0_mean: float = 120.0
    f0_jitter: float = 0.02
    formant_bandwidths: tuple = (80.0, 100.0, 140.0)
    noise_floor: float = -50.0
    # per-formant multipliers for speaker idiosyncrasies beyond tract length
    formant_shifts: tuple = (1.0, 1.0, 1.0)

    def __post_init__(self):
        if not 0.8 <= self.vtl_scale <= 1.2:
            raise DataError(f"vtl_scale {self.vtl_scale} outside [0.8, 1.2]")
        if not 60.0 <= self.f0_mean <= 400.0:
            raise DataError(f"f0_mean {self.f0_mean} outside [60, 400] Hz")
        if len(self.formant_bandwidths) != 3 or len(self.formant_shifts) != 3:
            raise DataError("exactly three formant bandwidths and shifts are required")


@dataclass(frozen=True)
class PhraseTemplate:
    phrase_id: str
    # (formants Hz, duration ms, voiced)
    segments: tuple

    def __post_init__(self):
        if not self.segments:
            raise DataError("phrase template has no segments")
        for formants, dur, _ in self.segments:
            if len(formants) != 3 or dur <= 0:
                raise DataError(f"bad segment ({formants}, {dur})")
        total = self.duration_ms
        if not 1500.0 <= total <= 3000.0:
            raise DataError(f"phrase duration {total} ms outside [1500, 3000]")

    @property
    def duration_ms(self) -> float:
        return float(sum(seg[1] for seg in self.segments))


# ---------------------------------------------------------------------------
# WAV I/O


def read_wav(path) -> Utterance:
    """Read a 16-bit PCM mono WAV file, scaling samples by 1/32768."""
    path = Path(path)
    try:
        with wave.open(str(path), "rb") as wf:
            channels = wf.getnchannels()
            width = wf.getsampwidth()
            rate = wf.getframerate()
            n = wf.getnframes()
            raw = wf.readframes(n)
    except (wave.Error, EOFError) as exc:
        raise DataError(f"{path}: malformed WAV header ({exc})") from exc
    if channels != 1:
        raise DataError(f"{path}: unsupported channel count {channels}")
    if width != 2:
        raise DataError(f"{path}: unsupported encoding ({8 * width}-bit), need 16-bit PCM")
    if n == 0 or not raw:
        raise DataError(f"{path}: zero-length data chunk")
    samples = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    stem = path.stem
    return Utterance(samples, rate, speaker_id=stem, phrase_id=stem, utterance_id=stem)


def write_wav(path, samples, sample_rate: int = 16000) -> None:
    pcm = np.clip(np.round(np.asarray(samples) * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(sample_rate))
        wf.writeframes(pcm.tobytes())


# ---------------------------------------------------------------------------
# Synthesis


def resonator_coefficients(freq: float, bandwidth: float, sample_rate: int):
    """Unity-DC-gain second-order resonator (Klatt form) as (b, a)."""
    t = 1.0 / sample_rate
    c = -np.exp(-2.0 * np.pi * bandwidth * t)
    b = 2.0 * np.exp(-np.pi * bandwidth * t) * np.cos(2.0 * np.pi * freq * t)
    a = 1.0 - b - c
    return np.array([a]), np.array([1.0, -b, -c])


def _glottal_source(n: int, f0: float, jitter: float, phase: float, rng, sample_rate: int):
    # rounded impulse: decaying two-sample pulse
    out = np.zeros(n + 1)
    pos = phase
    while pos < n:
        i = int(pos)
        out[i] += 1.0
        out[i + 1] += 0.5
        period = sample_rate / (f0 * (1.0 + jitter * rng.standard_normal()))
        pos += max(period, 2.0)
    return out[:n], pos - n


def synth_utterance(spec: SpeakerSpec, template: PhraseTemplate, seed: int,
                    sample_rate: int = 16000, session_id: str = "0",
                    speaker_id: str = "synthetic") -> Utterance:
    """Render `template` in the voice described by `spec`.

    Output is deterministic in (spec, template, seed) and peak-normalized to 0.9.
    """
    rng = np.random.default_rng(seed)
    nyq = sample_rate / 2.0
    lengths = [max(1, int(round(dur * sample_rate / 1000.0))) for _, dur, _ in template.segments]
    pieces = []
    states = [np.zeros(2) for _ in range(3)]
    phase = 0.0
    for (formants, _, voiced), n in zip(template.segments, lengths):
        if voiced:
            src, phase = _glottal_source(n, spec.f0_mean, spec.f0_jitter, phase, rng, sample_rate)
        else:
            src = 0.3 * rng.standard_normal(n)
            phase = 0.0
        y = src
        for i, (f, bw, k) in enumerate(zip(formants, spec.formant_bandwidths, spec.formant_shifts)):
            f = min(k * f / spec.vtl_scale, 0.95 * nyq)
            b, a = resonator_coefficients(f, bw, sample_rate)
            y, states[i] = lfilter(b, a, y, zi=states[i])
        pieces.append(y)
    signal = np.concatenate(pieces)
    peak = np.max(np.abs(signal))
    if peak > 0:
        noise_rms = peak * 10.0 ** (spec.noise_floor / 20.0)
        signal = signal + noise_rms * rng.standard_normal(signal.size)
    signal = 0.9 * signal / np.max(np.abs(signal))
    return Utterance(signal, sample_rate, speaker_id=speaker_id,
                     phrase_id=template.phrase_id, session_id=session_id)


def spectral_centroid(samples, sample_rate: int = 16000, frame: int = 400, shift: int = 160):
    """Mean per-frame spectral centroid in Hz over frames above -30 dB of peak energy."""
    x = np.asarray(samples, dtype=np.float64)
    n_frames = 1 + (x.size - frame) // shift
    idx = np.arange(frame)[None, :] + shift * np.arange(n_frames)[:, None]
    frames = x[idx] * np.hamming(frame)
    power = np.abs(np.fft.rfft(frames, 512)) ** 2
    freqs = np.fft.rfftfreq(512, 1.0 / sample_rate)
    energy = power.sum(axis=1)
    keep = energy > energy.max() * 1e-3
    cent = (power[keep] * freqs).sum(axis=1) / energy[keep]
    return float(cent.mean())


# vowel-like formant targets (F1, F2, F3) used to build random phrases
VOWELS = (
    (730, 1090, 2440), (270, 2290, 3010), (300, 870, 2240), (530, 1840, 2480),
    (660, 1720, 2410), (490, 1350, 1690), (570, 840, 2410), (440, 1020, 2240),
    (390, 1990, 2550), (640, 1190, 2390),
)
FRICATIVES = ((1500, 2500, 3500), (2500, 4000, 5500), (1200, 2200, 3200))


def random_phrase(phrase_id: str, rng, duration_ms: float = 2000.0) -> PhraseTemplate:
    """Random sequence of vowel/fricative segments summing to `duration_ms`."""
    segments = []
    total = 0.0
    while total < duration_ms:
        if segments and rng.random() < 0.25:
            seg = (FRICATIVES[rng.integers(len(FRICATIVES))], float(rng.integers(50, 110)), False)
        else:
            seg = (VOWELS[rng.integers(len(VOWELS))], float(rng.integers(90, 220)), True)
        dur = min(seg[1], duration_ms - total)
        segments.append((seg[0], dur, seg[2]))
        total += dur
    return PhraseTemplate(phrase_id, tuple(segments))


def random_speaker(rng, vtl_range=(0.9, 1.1), idiosyncrasy: float = 0.05) -> SpeakerSpec:
    vtl = float(rng.uniform(*vtl_range))
    # larger tracts tend to go with lower pitch
    f0 = float(np.clip(rng.normal(170.0 / vtl, 25.0), 70.0, 300.0))
    bws = tuple(float(b * rng.uniform(0.7, 1.4)) for b in (70.0, 100.0, 150.0))
    shifts = tuple(float(v) for v in 1.0 + idiosyncrasy * rng.standard_normal(3))
    return SpeakerSpec(vtl_scale=vtl, f0_mean=f0, f0_jitter=float(rng.uniform(0.01, 0.04)),
                       formant_bandwidths=bws, noise_floor=float(rng.uniform(-55.0, -40.0)),
                       formant_shifts=shifts)


def session_variant(spec: SpeakerSpec, template: PhraseTemplate, rng,
                    scale_jitter: float = 0.02, f0_jitter: float = 0.08, tempo_jitter: float = 0.1):
    """Perturb speaker/phrase slightly to model session-to-session variability."""
    vtl = float(np.clip(spec.vtl_scale * (1.0 + scale_jitter * rng.standard_normal()), 0.8, 1.2))
    f0 = float(np.clip(spec.f0_mean * (1.0 + f0_jitter * rng.standard_normal()), 60.0, 400.0))
    s = SpeakerSpec(vtl, f0, spec.f0_jitter, spec.formant_bandwidths,
                    spec.noise_floor + float(rng.uniform(-5.0, 5.0)), spec.formant_shifts)
    tempo = 1.0 + tempo_jitter * rng.uniform(-1.0, 1.0)
    segs = []
    for formants, dur, voiced in template.segments:
        wiggle = 1.0 + 0.03 * rng.standard_normal(3)
        segs.append((tuple(float(f * w) for f, w in zip(formants, wiggle)), dur, voiced))
    total = sum(d for _, d, _ in segs)
    tempo = float(np.clip(tempo, 1500.0 / total, 3000.0 / total))
    segs = tuple((f, d * tempo, v) for f, d, v in segs)
    return s, PhraseTemplate(template.phrase_id, segs)


# ---------------------------------------------------------------------------
# Manifest and trial lists


@dataclass(frozen=True)
class ManifestEntry:
    utterance_id: str
    speaker_id: str
    phrase_id: str
    path: str


@dataclass(frozen=True)
class EnrollmentModel:
    model_id: str
    speaker_id: str
    phrase_id: str
    utterance_ids: tuple


@dataclass(frozen=True)
class TrialRecord:
    model_id: str
    enrolled_speaker: str
    phrase_id: str
    test_id: str
    test_path: str
    trial_type: str

    @property
    def key(self):
        return (self.model_id, self.test_id)


@dataclass
class TrialSet:
    trials: list = field(default_factory=list)

    def __len__(self):
        return len(self.trials)

    def __iter__(self):
        return iter(self.trials)

    def keys(self):
        return [t.key for t in self.trials]

    def counts(self):
        out = {t: 0 for t in TRIAL_TYPES}
        for t in self.trials:
            out[t.trial_type] += 1
        return out


def trial_type(same_speaker: bool, same_phrase: bool) -> str:
    if same_speaker:
        return "genuine" if same_phrase else "target-wrong"
    return "imposter-correct" if same_phrase else "imposter-wrong"


def build_trials(manifest: Sequence[ManifestEntry], enrollment: Sequence[EnrollmentModel],
                 test_ids: Iterable[str] | None = None) -> TrialSet:
    """Pair every enrolled model with every test utterance and label the trial type."""
    by_id = {e.utterance_id: e for e in manifest}
    speakers = {e.speaker_id for e in manifest}
    phrases = {e.phrase_id for e in manifest}
    enrolled_utts = set()
    for model in enrollment:
        if not model.utterance_ids:
            raise DataError(f"model {model.model_id} has no enrollment utterances")
        if model.speaker_id not in speakers:
            raise DataError(f"unknown speaker id {model.speaker_id!r}")
        if model.phrase_id not in phrases:
            raise DataError(f"unknown phrase id {model.phrase_id!r}")
        for u in model.utterance_ids:
            if u not in by_id:
                raise DataError(f"unknown enrollment utterance {u!r}")
        enrolled_utts.update(model.utterance_ids)
    if test_ids is None:
        tests = [e for e in manifest if e.utterance_id not in enrolled_utts]
    else:
        tests = []
        for u in test_ids:
            if u not in by_id:
                raise DataError(f"unknown test utterance {u!r}")
            if u in enrolled_utts:
                raise DataError(f"test utterance {u!r} is also used for enrollment")
            tests.append(by_id[u])
    trials = []
    for model in enrollment:
        for t in tests:
            kind = trial_type(t.speaker_id == model.speaker_id, t.phrase_id == model.phrase_id)
            trials.append(TrialRecord(model.model_id, model.speaker_id, model.phrase_id,
                                      t.utterance_id, t.path, kind))
    return TrialSet(trials)


def write_manifest(path, entries: Iterable[ManifestEntry]) -> None:
    with open(path, "w") as fh:
        for e in entries:
            fh.write(f"{e.utterance_id} {e.speaker_id} {e.phrase_id} {e.path}\n")


def read_manifest(path) -> list:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise DataError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
        out.append(ManifestEntry(*parts))
    return out


def write_enrollment(path, models: Iterable[EnrollmentModel]) -> None:
    with open(path, "w") as fh:
        for m in models:
            fh.write(f"{m.model_id} {m.speaker_id} {m.phrase_id} {','.join(m.utterance_ids)}\n")


def read_enrollment(path) -> list:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split()
        if len(parts) != 4:
            raise DataError(f"{path}:{lineno}: expected 4 fields, got {len(parts)}")
        out.append(EnrollmentModel(parts[0], parts[1], parts[2], tuple(parts[3].split(","))))
    return out


def write_trials(path, trials: TrialSet) -> None:
    """One trial per line: `model-id phrase-id test-path trial-type`."""
    with open(path, "w") as fh:
        for t in trials:
            fh.write(f"{t.model_id} {t.phrase_id} {t.test_path} {t.trial_type}\n")


def read_trials(path, manifest: Sequence[ManifestEntry], enrollment: Sequence[EnrollmentModel]) -> TrialSet:
    by_path = {e.path: e for e in manifest}
    models = {m.model_id: m for m in enrollment}
    trials = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 4 or parts[3] not in TRIAL_TYPES:
            raise DataError(f"{path}:{lineno}: malformed trial line")
        model_id, phrase_id, test_path, kind = parts
        if model_id not in models:
            raise DataError(f"{path}:{lineno}: unknown model {model_id!r}")
        if test_path not in by_path:
            raise DataError(f"{path}:{lineno}: test path not in manifest {test_path!r}")
        m = models[model_id]
        trials.append(TrialRecord(model_id, m.speaker_id, phrase_id,
                                  by_path[test_path].utterance_id, test_path, kind))
    return TrialSet(trials)
