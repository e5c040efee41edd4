"""Deterministic synthetic speech-like corpus with spoofed utterances.

Each speaker is a harmonic source: a fundamental drawn from a per-speaker
frequency slot plus a spectral envelope built from three formant-like bumps
and a spectral tilt. Bonafide utterances add vibrato, amplitude modulation,
and a broadband noise floor.

Spoofs come in two flavours and always carry the identity parameters of a
victim speaker, so a verification system should accept them at a useful rate:

* synthesis-like ("la"): the victim's source re-rendered with an
  over-smoothed envelope and almost no noise floor (variants V01/V02 differ
  in how aggressively the envelope is blended toward a neutral shape);
* replay-like ("pa"): a bonafide-style rendering convolved with a short
  random room response and recorded over a noisier channel (variants R01/R02
  differ in tail length).

Everything is a pure function of (corpus seed, utterance id): per-utterance
generators are derived by hashing both, so any utterance can be regenerated
in isolation and full runs are reproducible byte for byte.
"""

import dataclasses
import hashlib
import wave as wavmod
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
PARTITIONS = ("train", "dev", "eval")
LA_ATTACKS = ("V01", "V02")
PA_ATTACKS = ("R01", "R02")


@dataclasses.dataclass(frozen=True)
class SyntheticSpec:
    """Shape of a generated corpus; counts are per speaker per partition."""
    n_speakers: int = 16
    scenario: str = "la"
    seed: int = 0
    duration_range: tuple = (0.9, 1.1)
    bonafide_counts: tuple = (10, 4, 5)   # train, dev, eval
    spoof_counts: tuple = (10, 4, 5)

    def validate(self):
        if self.n_speakers < 2:
            raise ValueError("need at least 2 speakers")
        if self.scenario not in ("la", "pa"):
            raise ValueError(f"unknown scenario {self.scenario!r}")
        if self.duration_range[0] > self.duration_range[1] \
                or self.duration_range[0] <= 0:
            raise ValueError(f"bad duration range {self.duration_range}")
        if min(self.bonafide_counts) < 0 or min(self.spoof_counts) < 0:
            raise ValueError("negative utterance counts")


@dataclasses.dataclass
class UtteranceRecord:
    utterance_id: str
    speaker_id: str
    label: str          # "bonafide" | "spoof"
    attack_id: str      # "-" for bonafide
    partition: str
    path: str


@dataclasses.dataclass
class TrialRecord:
    trial_id: str
    claimed_speaker: str
    utterance_id: str
    trial_type: str     # "target" | "nontarget" | "spoof"


# ---------------------------------------------------------------------------
# deterministic random streams


def _rng_for(seed, *tokens):
    digest = hashlib.sha256(
        ("|".join([str(seed)] + list(tokens))).encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def speaker_params(spec, index):
    """Identity parameters for one speaker, stable under the corpus seed."""
    rng = _rng_for(spec.seed, "speaker", str(index))
    slots = np.geomspace(105.0, 235.0, spec.n_speakers + 1)
    f0 = float(rng.uniform(slots[index], slots[index + 1]))
    centers = np.array([rng.uniform(350, 850), rng.uniform(1100, 2200),
                        rng.uniform(2500, 3600)])
    widths = rng.uniform(90, 180, size=3)
    gains = rng.uniform(0.8, 1.25, size=3)
    tilt = float(rng.uniform(0.6, 1.0))
    return {"f0": f0, "centers": centers, "widths": widths,
            "gains": gains, "tilt": tilt}


def _envelope(freqs, params, widen=1.0, blend=0.0):
    env = np.full_like(freqs, 0.05, dtype=np.float64)
    for c, w, g in zip(params["centers"], params["widths"], params["gains"]):
        env += g * np.exp(-0.5 * ((freqs - c) / (w * widen)) ** 2)
    if blend > 0.0:
        neutral = 0.5 * np.exp(-freqs / 1800.0) + 0.05
        env = (1.0 - blend) * env + blend * neutral
    return env


def _harmonic_source(rng, params, n_samples, snr_db, widen=1.0, blend=0.0):
    """Vibrato'd harmonic stack shaped by the speaker envelope, plus noise."""
    f0 = params["f0"] * (1.0 + rng.uniform(-0.02, 0.02))
    t = np.arange(n_samples) / SAMPLE_RATE
    vib = f0 * (1.0 + 0.012 * np.sin(2 * np.pi * 5.0 * t + rng.uniform(0, 2 * np.pi)))
    base_phase = 2.0 * np.pi * np.cumsum(vib) / SAMPLE_RATE

    n_harm = max(3, int(7600.0 / f0))
    k = np.arange(1, n_harm + 1)
    amps = _envelope(k * f0, params, widen, blend) * k ** (-params["tilt"])
    phases = rng.uniform(0, 2 * np.pi, size=n_harm)
    sig = amps @ np.sin(np.outer(k, base_phase) + phases[:, None])

    depth = rng.uniform(0.25, 0.5)
    am = 1.0 - depth / 2 + (depth / 2) * np.sin(
        2 * np.pi * rng.uniform(2.5, 5.0) * t + rng.uniform(0, 2 * np.pi))
    sig = sig * am

    rms = np.sqrt(np.mean(sig * sig))
    noise_sd = rms * 10.0 ** (-snr_db / 20.0)
    sig = sig + noise_sd * rng.standard_normal(n_samples)
    return sig


def _room_response(rng, tail_ms):
    n = int(SAMPLE_RATE * tail_ms / 1000.0)
    rir = np.zeros(n)
    rir[0] = 1.0
    for _ in range(3):
        delay = int(rng.uniform(1.5, 10.0) * SAMPLE_RATE / 1000.0)
        rir[min(delay, n - 1)] += rng.uniform(0.35, 0.65) * rng.choice([-1.0, 1.0])
    t = np.arange(n) / SAMPLE_RATE
    tail = rng.standard_normal(n) * np.exp(-t / (tail_ms / 4000.0))
    rir += 0.25 * tail
    return rir


def synth_utterance(spec, record, all_params):
    """Render one utterance as float samples in [-1, 1]."""
    rng = _rng_for(spec.seed, "utt", record.utterance_id)
    params = all_params[record.speaker_id]
    dur = rng.uniform(*spec.duration_range)
    n = int(dur * SAMPLE_RATE)

    if record.label == "bonafide":
        sig = _harmonic_source(rng, params, n, snr_db=rng.uniform(23, 28))
    elif record.attack_id in LA_ATTACKS:
        # Synthetic clones reproduce the target timbre essentially exactly;
        # what gives them away is the unnaturally clean noise floor.
        blend, widen = (0.0, 1.0) if record.attack_id == "V01" else (0.04, 1.04)
        sig = _harmonic_source(rng, params, n, snr_db=rng.uniform(43, 48),
                               widen=widen, blend=blend)
    elif record.attack_id in PA_ATTACKS:
        clean = _harmonic_source(rng, params, n, snr_db=rng.uniform(23, 28))
        tail_ms = 24.0 if record.attack_id == "R01" else 48.0
        sig = np.convolve(clean, _room_response(rng, tail_ms))[:n]
        rms = np.sqrt(np.mean(sig * sig))
        sig = sig + rms * 10.0 ** (-rng.uniform(19, 23) / 20.0) \
            * rng.standard_normal(n)
    else:
        raise ValueError(f"unknown attack id {record.attack_id!r}")

    return 0.45 * sig / np.max(np.abs(sig))


# ---------------------------------------------------------------------------
# corpus assembly


def _speaker_id(index):
    return f"s{index:02d}"


def plan_records(spec):
    """All utterance records (no audio yet), deterministic order."""
    spec.validate()
    attacks = LA_ATTACKS if spec.scenario == "la" else PA_ATTACKS
    records = []
    for idx in range(spec.n_speakers):
        spk = _speaker_id(idx)
        for part, n_bona, n_spoof in zip(
                PARTITIONS, spec.bonafide_counts, spec.spoof_counts):
            for j in range(n_bona):
                uid = f"{spk}_{part}_b{j:03d}"
                records.append(UtteranceRecord(
                    uid, spk, "bonafide", "-", part, f"audio/{uid}.wav"))
            for j in range(n_spoof):
                uid = f"{spk}_{part}_s{j:03d}"
                records.append(UtteranceRecord(
                    uid, spk, "spoof", attacks[j % len(attacks)], part,
                    f"audio/{uid}.wav"))
    return records


def generate_corpus(spec, out_dir):
    """Write WAVs and the manifest; returns the utterance records."""
    out_dir = Path(out_dir)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    records = plan_records(spec)
    all_params = {_speaker_id(i): speaker_params(spec, i)
                  for i in range(spec.n_speakers)}
    for rec in records:
        write_wav(out_dir / rec.path, synth_utterance(spec, rec, all_params))
    write_manifest(records, out_dir / "manifest.tsv")
    return records


# ---------------------------------------------------------------------------
# manifest


def write_manifest(records, path):
    with open(path, "w") as fh:
        for r in records:
            fh.write(f"{r.utterance_id}\t{r.speaker_id}\t{r.label}\t"
                     f"{r.attack_id}\t{r.partition}\t{r.path}\n")


def load_manifest(path, check_audio=True):
    """Parse and validate a manifest; paths resolve against its directory."""
    path = Path(path)
    records = []
    seen = set()
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            cols = line.split("\t")
            if len(cols) != 6:
                raise ValueError(
                    f"{path}:{lineno}: expected 6 tab-separated columns, "
                    f"got {len(cols)}")
            rec = UtteranceRecord(*cols)
            if rec.utterance_id in seen:
                raise ValueError(
                    f"{path}:{lineno}: duplicate utterance id "
                    f"{rec.utterance_id!r}")
            seen.add(rec.utterance_id)
            if rec.label not in ("bonafide", "spoof"):
                raise ValueError(
                    f"{path}:{lineno}: unknown label {rec.label!r}")
            if rec.partition not in PARTITIONS:
                raise ValueError(
                    f"{path}:{lineno}: unknown partition {rec.partition!r}")
            if (rec.label == "spoof") != (rec.attack_id != "-"):
                raise ValueError(
                    f"{path}:{lineno}: label {rec.label!r} inconsistent with "
                    f"attack id {rec.attack_id!r} for {rec.utterance_id}")
            if check_audio and not (path.parent / rec.path).exists():
                raise ValueError(
                    f"missing audio file for utterance {rec.utterance_id!r}: "
                    f"{rec.path}")
            records.append(rec)
    if not records:
        raise ValueError(f"{path}: empty manifest")
    return records


# ---------------------------------------------------------------------------
# trials


def build_trials(records, n_enroll=2):
    """Speaker-verification protocol over the eval partition.

    For each speaker the first n_enroll eval bonafide utterances (by id)
    enroll the speaker; the rest are test segments. Targets pair a speaker
    with their own test segments, nontargets with every other speaker's test
    segments, and each eval spoof claims its victim.
    Returns (enrollments, trials).
    """
    bona = {}
    spoofs = []
    for r in records:
        if r.partition != "eval":
            continue
        if r.label == "bonafide":
            bona.setdefault(r.speaker_id, []).append(r.utterance_id)
        else:
            spoofs.append(r)
    if not bona:
        raise ValueError("no eval bonafide utterances to enroll from")

    enrollments, test = {}, {}
    for spk in sorted(bona):
        utts = sorted(bona[spk])
        if len(utts) <= n_enroll:
            raise ValueError(
                f"speaker {spk} has {len(utts)} eval bonafide utterances; "
                f"need more than n_enroll={n_enroll}")
        enrollments[spk] = utts[:n_enroll]
        test[spk] = utts[n_enroll:]

    trials = []
    speakers = sorted(enrollments)
    for spk in speakers:
        for utt in test[spk]:
            trials.append(TrialRecord(f"{spk}~{utt}", spk, utt, "target"))
    for spk in speakers:
        for other in speakers:
            if other == spk:
                continue
            for utt in test[other]:
                trials.append(TrialRecord(f"{spk}~{utt}", spk, utt, "nontarget"))
    for r in spoofs:
        if r.speaker_id not in enrollments:
            raise ValueError(
                f"spoof {r.utterance_id} claims unenrolled speaker "
                f"{r.speaker_id}")
        trials.append(TrialRecord(f"{r.speaker_id}~{r.utterance_id}",
                                  r.speaker_id, r.utterance_id, "spoof"))
    return enrollments, trials


def write_trials(enrollments, trials, path):
    with open(path, "w") as fh:
        for spk in sorted(enrollments):
            for utt in enrollments[spk]:
                fh.write(f"enroll\t{spk}\t{utt}\n")
        for t in trials:
            fh.write(f"trial\t{t.claimed_speaker}\t{t.utterance_id}\t"
                     f"{t.trial_type}\n")


def load_trials(path):
    enrollments, trials = {}, []
    with open(path) as fh:
        for line in fh:
            cols = line.rstrip("\n").split("\t")
            if cols[0] == "enroll":
                enrollments.setdefault(cols[1], []).append(cols[2])
            elif cols[0] == "trial":
                spk, utt, kind = cols[1], cols[2], cols[3]
                trials.append(TrialRecord(f"{spk}~{utt}", spk, utt, kind))
            else:
                raise ValueError(f"{path}: unknown row kind {cols[0]!r}")
    return enrollments, trials


# ---------------------------------------------------------------------------
# wav i/o: mono 16-bit little-endian PCM


def write_wav(path, samples):
    samples = np.asarray(samples, dtype=np.float64)
    pcm = np.round(np.clip(samples, -1.0, 1.0) * 32767.0).astype("<i2")
    with wavmod.open(str(path), "wb") as fh:
        fh.setnchannels(1)
        fh.setsampwidth(2)
        fh.setframerate(SAMPLE_RATE)
        fh.writeframes(pcm.tobytes())


def read_wav(path):
    with wavmod.open(str(path), "rb") as fh:
        if fh.getnchannels() != 1 or fh.getsampwidth() != 2:
            raise ValueError(f"{path}: expected mono 16-bit PCM")
        if fh.getframerate() != SAMPLE_RATE:
            raise ValueError(f"{path}: expected {SAMPLE_RATE} Hz, "
                             f"got {fh.getframerate()}")
        raw = fh.readframes(fh.getnframes())
    return np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32767.0
