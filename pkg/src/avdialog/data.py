"""Corpus loading, feature containers, decoder contexts, and synthetic data.

Dialog files are JSON:

    {"dialogs": [{"image_id": ..., "caption": ...,
                  "dialog": [{"question": ..., "answer": ...}, ...],
                  "reasons": [[{"start": s, "end": e}, ...], ...]}]}

Feature files (one per video per modality) are a small binary container:
magic ``AVF1``, then little-endian uint32 T, uint32 D, float64 frame_rate,
float64 duration, followed by T*D float32 values in row-major order.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .vocab import SOS, Vocabulary, tokenize
from .vocab import build_vocabulary as _build_vocab

_MAGIC = b"AVF1"


class CorpusError(ValueError):
    """Raised when a dialog file or feature container violates the schema."""


@dataclass(frozen=True)
class TimeRegion:
    start: float
    end: float
    confidence: float | None = None

    def __post_init__(self):
        if not (0.0 <= self.start <= self.end):
            raise CorpusError(f"invalid region [{self.start}, {self.end}]")

    @property
    def length(self) -> float:
        return self.end - self.start


@dataclass(frozen=True)
class DialogTurn:
    question: tuple[str, ...]
    answer: tuple[str, ...]


@dataclass(frozen=True)
class DialogSample:
    video_id: str
    turns: tuple[DialogTurn, ...]
    caption: tuple[str, ...] | None = None
    reasons: tuple[tuple[TimeRegion, ...], ...] | None = None

    def __post_init__(self):
        if self.reasons is not None and len(self.reasons) != len(self.turns):
            raise CorpusError(
                f"{self.video_id}: {len(self.reasons)} reason lists for {len(self.turns)} turns"
            )


@dataclass
class FeatureSet:
    audio: np.ndarray  # T_a x D_a float32
    visual: np.ndarray  # T_v x D_v float32
    frame_rate_audio: float
    frame_rate_visual: float
    duration: float

    def validate(self) -> None:
        for name, mat in (("audio", self.audio), ("visual", self.visual)):
            if mat.ndim != 2 or mat.shape[0] < 1:
                raise CorpusError(f"{name} features must be a T x D matrix with T >= 1")
            if not np.isfinite(mat).all():
                raise CorpusError(f"{name} features contain non-finite values")

    def frame_period(self, modality: str) -> float:
        rate = self.frame_rate_audio if modality == "audio" else self.frame_rate_visual
        return 1.0 / rate


@dataclass
class Corpus:
    samples: list[DialogSample]
    features: dict[str, FeatureSet]
    split: str = "train"

    def __post_init__(self):
        for s in self.samples:
            if s.video_id not in self.features:
                raise CorpusError(f"no features for video {s.video_id}")

    def num_turns(self) -> int:
        return sum(len(s.turns) for s in self.samples)

    def token_streams(self):
        for s in self.samples:
            for t in s.turns:
                yield t.question
                yield t.answer
            if s.caption:
                yield s.caption


# ---------------------------------------------------------------------------
# feature container I/O
# ---------------------------------------------------------------------------

def write_feature_matrix(path: Path, matrix: np.ndarray, frame_rate: float, duration: float) -> None:
    mat = np.ascontiguousarray(matrix, dtype="<f4")
    header = _MAGIC + struct.pack("<IIdd", mat.shape[0], mat.shape[1], frame_rate, duration)
    path.write_bytes(header + mat.tobytes())


def read_feature_matrix(path: Path) -> tuple[np.ndarray, float, float]:
    raw = path.read_bytes()
    if raw[:4] != _MAGIC:
        raise CorpusError(f"{path}: bad magic, not a feature container")
    t, d, rate, duration = struct.unpack_from("<IIdd", raw, 4)
    mat = np.frombuffer(raw, dtype="<f4", offset=4 + struct.calcsize("<IIdd"))
    if mat.size != t * d:
        raise CorpusError(f"{path}: payload size mismatch (expected {t}x{d})")
    return mat.reshape(t, d).astype(np.float32), rate, duration


def _feature_paths(feature_dir: Path, video_id: str) -> tuple[Path, Path]:
    return feature_dir / f"{video_id}.audio.bin", feature_dir / f"{video_id}.visual.bin"


def load_features(feature_dir: Path, video_id: str) -> FeatureSet:
    audio_path, visual_path = _feature_paths(feature_dir, video_id)
    for p in (audio_path, visual_path):
        if not p.exists():
            raise CorpusError(f"missing feature file for video {video_id}: {p}")
    audio, rate_a, dur_a = read_feature_matrix(audio_path)
    visual, rate_v, dur_v = read_feature_matrix(visual_path)
    fs = FeatureSet(audio, visual, rate_a, rate_v, max(dur_a, dur_v))
    fs.validate()
    return fs


# ---------------------------------------------------------------------------
# corpus I/O
# ---------------------------------------------------------------------------

def load_corpus(dialog_path: Path, feature_dir: Path, split: str = "train") -> Corpus:
    """Load a dialog JSON file plus the feature containers it references."""
    dialog_path, feature_dir = Path(dialog_path), Path(feature_dir)
    doc = json.loads(dialog_path.read_text())
    if "dialogs" not in doc:
        raise CorpusError(f"{dialog_path}: missing top-level 'dialogs' key")
    samples: list[DialogSample] = []
    features: dict[str, FeatureSet] = {}
    for entry in doc["dialogs"]:
        vid = str(entry["image_id"])
        if vid not in features:
            features[vid] = load_features(feature_dir, vid)
        duration = features[vid].duration
        turns = tuple(
            DialogTurn(tuple(tokenize(t["question"])), tuple(tokenize(t["answer"])))
            for t in entry["dialog"]
        )
        caption = entry.get("caption")
        reasons = None
        if entry.get("reasons") is not None:
            reasons = tuple(
                tuple(_parse_region(r, vid, duration) for r in turn_regions)
                for turn_regions in entry["reasons"]
            )
        samples.append(
            DialogSample(
                video_id=vid,
                turns=turns,
                caption=tuple(tokenize(caption)) if caption else None,
                reasons=reasons,
            )
        )
    return Corpus(samples, features, split)


def _parse_region(obj: dict, vid: str, duration: float) -> TimeRegion:
    start, end = float(obj["start"]), float(obj["end"])
    if not (0.0 <= start <= end <= duration + 1e-9):
        raise CorpusError(f"{vid}: region [{start}, {end}] outside [0, {duration}]")
    return TimeRegion(start, end)


def save_corpus(corpus: Corpus, dialog_path: Path, feature_dir: Path) -> None:
    """Write the dialog JSON and all feature containers (inverse of load_corpus)."""
    dialog_path, feature_dir = Path(dialog_path), Path(feature_dir)
    feature_dir.mkdir(parents=True, exist_ok=True)
    dialogs = []
    for s in corpus.samples:
        entry = {
            "image_id": s.video_id,
            "caption": " ".join(s.caption) if s.caption else None,
            "dialog": [
                {"question": " ".join(t.question), "answer": " ".join(t.answer)}
                for t in s.turns
            ],
        }
        if s.reasons is not None:
            entry["reasons"] = [
                [{"start": r.start, "end": r.end} for r in turn_regions]
                for turn_regions in s.reasons
            ]
        dialogs.append(entry)
    dialog_path.parent.mkdir(parents=True, exist_ok=True)
    dialog_path.write_text(json.dumps({"dialogs": dialogs}, indent=1, sort_keys=True))
    for vid, fs in sorted(corpus.features.items()):
        audio_path, visual_path = _feature_paths(feature_dir, vid)
        write_feature_matrix(audio_path, fs.audio, fs.frame_rate_audio, fs.duration)
        write_feature_matrix(visual_path, fs.visual, fs.frame_rate_visual, fs.duration)


def build_vocabulary(corpus: Corpus, min_count: int = 1) -> Vocabulary:
    if not corpus.samples:
        raise CorpusError("cannot build a vocabulary from an empty corpus")
    return _build_vocab(corpus.token_streams(), min_count)


# ---------------------------------------------------------------------------
# decoder contexts
# ---------------------------------------------------------------------------

def build_decoder_context(
    sample: DialogSample, turn_index: int, history_policy: str = "previous_question_only"
) -> list[str]:
    """Token context fed to the decoder for one turn, ending in <sos>.

    ``full`` prepends every earlier question/answer pair; the tuned
    ``previous_question_only`` policy keeps just the current question.
    """
    if not 0 <= turn_index < len(sample.turns):
        raise IndexError(f"turn_index {turn_index} out of range")
    if history_policy not in ("full", "previous_question_only"):
        raise ValueError(f"unknown history policy {history_policy!r}")
    context: list[str] = []
    if history_policy == "full":
        for t in sample.turns[:turn_index]:
            context.extend(t.question)
            context.extend(t.answer)
    context.extend(sample.turns[turn_index].question)
    context.append(SOS)
    return context


# ---------------------------------------------------------------------------
# synthetic corpus
# ---------------------------------------------------------------------------

@dataclass
class SynthSpec:
    """Shape of a generated desk-scale corpus.

    ``vocab_size`` is the number of distinct signal words; each turn's answer
    names one of them.  The signal word is recoverable only from a bump
    planted in one feature stream inside a planted time region, and the
    caption states every turn's answer outright, so a caption-reading teacher
    has a real advantage over a features-only student.
    """

    num_videos: int = 100
    turns_per_dialog: int = 3
    vocab_size: int = 6
    T_a: int = 24
    T_v: int = 12
    D_a: int = 8
    D_v: int = 16
    frame_rate_audio: float = 2.0
    frame_rate_visual: float = 1.0
    noise_scale: float = 0.35
    bump_height: float = 1.0
    signal_visible: float = 1.0  # fraction of turns whose bump is planted at all

    def __post_init__(self):
        for name in ("num_videos", "turns_per_dialog", "vocab_size", "T_a", "T_v", "D_a", "D_v"):
            if getattr(self, name) <= 0:
                raise ValueError(f"SynthSpec.{name} must be positive")
        if self.vocab_size > min(self.D_a, self.D_v):
            raise ValueError("vocab_size signal words need one feature channel each")


def generate_synthetic_corpus(spec: SynthSpec, seed: int, split: str = "train") -> Corpus:
    """Deterministic corpus with planted audio/visual evidence.

    Turn ``t`` of each dialog asks about segment ``t`` of the video.  A
    signal word is drawn and a bump is written onto one feature channel
    (channel index = signal index) of one modality, inside a region placed
    randomly within segment ``t``.  The answer names the signal word, the
    caption lists every segment's word, and ``reasons`` holds the region.
    """
    rng = np.random.default_rng(seed)
    n_seg = spec.turns_per_dialog
    samples: list[DialogSample] = []
    features: dict[str, FeatureSet] = {}
    for v in range(spec.num_videos):
        vid = f"vid{v:04d}"
        duration = spec.T_v / spec.frame_rate_visual
        audio = rng.normal(0.0, spec.noise_scale, size=(spec.T_a, spec.D_a))
        visual = rng.normal(0.0, spec.noise_scale, size=(spec.T_v, spec.D_v))
        turns, reasons, caption = [], [], []
        for t in range(n_seg):
            sig = int(rng.integers(spec.vocab_size))
            modality = "audio" if rng.random() < 0.5 else "visual"
            seg_start = t * duration / n_seg
            seg_len = duration / n_seg
            reg_len = 0.5 * seg_len
            offset = rng.random() * (seg_len - reg_len)
            region = TimeRegion(seg_start + offset, seg_start + offset + reg_len)
            if rng.random() < spec.signal_visible:
                _plant_bump(audio if modality == "audio" else visual,
                            spec.frame_rate_audio if modality == "audio" else spec.frame_rate_visual,
                            region, sig, spec.bump_height)
            word = f"sig{sig}"
            turns.append(DialogTurn(
                question=("what", "happens", "in", "part", f"p{t}"),
                answer=("it", "is", word, "there"),
            ))
            reasons.append((region,))
            caption.extend(["part", f"p{t}", "is", word])
        samples.append(DialogSample(vid, tuple(turns), tuple(caption), tuple(reasons)))
        features[vid] = FeatureSet(
            audio.astype(np.float32),
            visual.astype(np.float32),
            spec.frame_rate_audio,
            spec.frame_rate_visual,
            duration,
        )
    return Corpus(samples, features, split)


def _plant_bump(mat: np.ndarray, rate: float, region: TimeRegion, channel: int, height: float) -> None:
    for frame in range(mat.shape[0]):
        if region.start <= frame / rate <= region.end:
            mat[frame, channel] += height
