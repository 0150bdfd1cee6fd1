"""Dialogue datasets: JSON-Lines I/O, synthetic generation, padded batching.

File layout: the first line is a header object

    {"format": "cmf-dialogues", "version": 1, "d_audio_in": 12696,
     "d_text_in": 4096, "n_classes": 7, "label_names": [...]}

and every further non-blank line is one utterance

    {"dialogue_id": "d0", "utterance_index": 0, "label": 3,
     "audio": [...], "text": [...]}

Utterances of a dialogue are contiguous and numbered from 0.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .metrics import label_names

FORMAT_NAME = "cmf-dialogues"
FORMAT_VERSION = 1
PAD_LABEL = -1


class DatasetError(ValueError):
    pass


class ParseError(DatasetError):
    pass


class SchemaError(DatasetError):
    pass


class DataError(DatasetError):
    pass


@dataclass
class UtteranceRecord:
    dialogue_id: str
    utterance_index: int
    label: int
    audio: np.ndarray
    text: np.ndarray

    def to_json(self) -> dict:
        return {
            "dialogue_id": self.dialogue_id,
            "utterance_index": self.utterance_index,
            "label": self.label,
            "audio": self.audio.tolist(),
            "text": self.text.tolist(),
        }


@dataclass
class DatasetSplit:
    d_audio_in: int
    d_text_in: int
    n_classes: int
    label_names: list[str]
    dialogues: list[list[UtteranceRecord]] = field(default_factory=list)

    @property
    def n_utterances(self) -> int:
        return sum(len(d) for d in self.dialogues)

    def labels(self) -> np.ndarray:
        return np.array([u.label for d in self.dialogues for u in d], dtype=np.int64)

    def header(self) -> dict:
        return {
            "format": FORMAT_NAME,
            "version": FORMAT_VERSION,
            "d_audio_in": self.d_audio_in,
            "d_text_in": self.d_text_in,
            "n_classes": self.n_classes,
            "label_names": list(self.label_names),
        }

    def subset(self, dialogues: Sequence[list[UtteranceRecord]]) -> "DatasetSplit":
        return DatasetSplit(self.d_audio_in, self.d_text_in, self.n_classes, list(self.label_names), list(dialogues))


# -- file I/O -----------------------------------------------------------------

def save_dataset(split: DatasetSplit, path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(split.header()) + "\n")
        for dialogue in split.dialogues:
            for u in dialogue:
                fh.write(json.dumps(u.to_json()) + "\n")


def _read_header(line: str, path) -> dict:
    try:
        header = json.loads(line)
    except json.JSONDecodeError as e:
        raise ParseError(f"{path}:1: malformed header: {e.msg}") from e
    if not isinstance(header, dict):
        raise ParseError(f"{path}:1: header must be a JSON object")
    for key in ("d_audio_in", "d_text_in", "n_classes"):
        if not isinstance(header.get(key), int) or header[key] < 1:
            raise SchemaError(f"{path}:1: header field {key!r} must be a positive integer")
    if header["n_classes"] < 2:
        raise SchemaError(f"{path}:1: n_classes must be at least 2")
    if header.get("version", FORMAT_VERSION) != FORMAT_VERSION:
        raise SchemaError(f"{path}:1: unsupported format version {header.get('version')}")
    names = header.get("label_names") or label_names(header["n_classes"])
    if len(names) != header["n_classes"]:
        raise SchemaError(f"{path}:1: {len(names)} label names for {header['n_classes']} classes")
    header["label_names"] = [str(n) for n in names]
    return header


def load_dataset(path: str | Path) -> DatasetSplit:
    """Read and validate a dataset file; dialogues keep their file order."""
    path = Path(path)
    with open(path, encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError(f"{path}: empty file, header line missing")
    h = _read_header(lines[0], path)
    split = DatasetSplit(h["d_audio_in"], h["d_text_in"], h["n_classes"], h["label_names"])
    index: dict[str, int] = {}
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        try:
            obj = json.loads(line)
        except json.JSONDecodeError as e:
            raise ParseError(f"{path}:{lineno}: malformed JSON: {e.msg}") from e
        if not isinstance(obj, dict):
            raise ParseError(f"{path}:{lineno}: record must be a JSON object")
        try:
            did = str(obj["dialogue_id"])
            uidx = obj["utterance_index"]
            label = obj["label"]
            audio = np.asarray(obj["audio"], dtype=np.float64)
            text = np.asarray(obj["text"], dtype=np.float64)
        except KeyError as e:
            raise SchemaError(f"{path}:{lineno}: record missing field {e.args[0]!r}") from e
        except (TypeError, ValueError) as e:
            raise SchemaError(f"{path}:{lineno}: non-numeric feature vector") from e
        where = f"{path}:{lineno}: record {did}/{uidx}"
        if not isinstance(uidx, int) or not isinstance(label, int) or isinstance(label, bool):
            raise SchemaError(f"{where}: utterance_index and label must be integers")
        if audio.ndim != 1 or audio.size != split.d_audio_in:
            raise SchemaError(f"{where}: audio vector has length {audio.size}, header says {split.d_audio_in}")
        if text.ndim != 1 or text.size != split.d_text_in:
            raise SchemaError(f"{where}: text vector has length {text.size}, header says {split.d_text_in}")
        if not (np.isfinite(audio).all() and np.isfinite(text).all()):
            raise DataError(f"{where}: non-finite feature value")
        if not 0 <= label < split.n_classes:
            raise DataError(f"{where}: label {label} outside [0, {split.n_classes})")
        if did not in index:
            index[did] = len(split.dialogues)
            split.dialogues.append([])
        elif index[did] != len(split.dialogues) - 1:
            raise SchemaError(f"{where}: dialogue {did!r} is not contiguous in the file")
        dialogue = split.dialogues[index[did]]
        if uidx != len(dialogue):
            raise SchemaError(f"{where}: expected utterance_index {len(dialogue)}")
        dialogue.append(UtteranceRecord(did, uidx, label, audio, text))
    return split


# -- synthetic data -------------------------------------------------------------

MODES = ("unimodal-separable", "cross-modal-interaction")


@dataclass
class SyntheticSpec:
    """Parameters of a synthetic dialogue corpus.

    ``unimodal-separable``: each utterance's features are its class mean plus
    Gaussian noise, in every modality listed in ``informative`` (the others
    are pure noise).

    ``cross-modal-interaction``: each utterance draws latent levels ``s_a`` and
    ``s_t`` uniformly from ``{0..n_classes-1}``; audio embeds ``s_a``, text
    embeds ``s_t`` and the label is ``(s_a + s_t) mod n_classes``. With two
    classes this is the XOR of two sign bits; in general neither modality
    alone carries information about the label.
    """

    n_dialogues: int = 100
    min_utterances: int = 3
    max_utterances: int = 10
    d_a: int = 24
    d_t: int = 16
    n_classes: int = 7
    class_mean_scale: float = 3.0
    noise_scale: float = 1.0
    mode: str = "unimodal-separable"
    informative: tuple[str, ...] = ("audio", "text")
    class_weights: tuple[float, ...] | None = None
    seed: int = 0

    def __post_init__(self):
        self.informative = tuple(self.informative)
        if self.class_weights is not None:
            self.class_weights = tuple(float(w) for w in self.class_weights)
        if self.n_dialogues < 0:
            raise ValueError("n_dialogues must be non-negative")
        if not 1 <= self.min_utterances <= self.max_utterances:
            raise ValueError("need 1 <= min_utterances <= max_utterances")
        if self.d_a < 1 or self.d_t < 1:
            raise ValueError("feature dimensions must be positive")
        if self.n_classes < 2:
            raise ValueError(f"n_classes must be at least 2, got {self.n_classes}")
        if self.class_mean_scale <= 0 or self.noise_scale <= 0:
            raise ValueError("class_mean_scale and noise_scale must be positive")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not set(self.informative) <= {"audio", "text"}:
            raise ValueError(f"informative modalities must be audio/text, got {self.informative}")
        if self.class_weights is not None:
            w = np.asarray(self.class_weights)
            if w.size != self.n_classes or (w <= 0).any():
                raise ValueError("class_weights needs one positive weight per class")

    def class_probs(self) -> np.ndarray:
        if self.class_weights is None:
            return np.full(self.n_classes, 1.0 / self.n_classes)
        w = np.asarray(self.class_weights, dtype=np.float64)
        return w / w.sum()

    def to_dict(self) -> dict:
        d = asdict(self)
        d["informative"] = list(self.informative)
        d["class_weights"] = None if self.class_weights is None else list(self.class_weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ValueError(f"unknown synthetic spec keys: {sorted(extra)}")
        return cls(**d)


def _class_means(rng: np.random.Generator, n: int, d: int, scale: float) -> np.ndarray:
    # random directions scaled to a common norm so classes are equally far from the origin
    mu = rng.normal(size=(n, d))
    mu /= np.linalg.norm(mu, axis=1, keepdims=True)
    return mu * scale


def synthesize(spec: SyntheticSpec, id_prefix: str = "d") -> DatasetSplit:
    """Generate a corpus; the content is a pure function of ``spec``."""
    rng = np.random.default_rng(spec.seed)
    C = spec.n_classes
    mu_a = _class_means(rng, C, spec.d_a, spec.class_mean_scale)
    mu_t = _class_means(rng, C, spec.d_t, spec.class_mean_scale)
    probs = spec.class_probs()
    split = DatasetSplit(spec.d_a, spec.d_t, C, label_names(C))
    for k in range(spec.n_dialogues):
        n = int(rng.integers(spec.min_utterances, spec.max_utterances + 1))
        if spec.mode == "unimodal-separable":
            labels = rng.choice(C, size=n, p=probs)
            s_a = s_t = labels
        else:
            s_a = rng.integers(0, C, size=n)
            s_t = rng.integers(0, C, size=n)
            labels = (s_a + s_t) % C
        noise_a = rng.normal(scale=spec.noise_scale, size=(n, spec.d_a))
        noise_t = rng.normal(scale=spec.noise_scale, size=(n, spec.d_t))
        use_a = spec.mode != "unimodal-separable" or "audio" in spec.informative
        use_t = spec.mode != "unimodal-separable" or "text" in spec.informative
        audio = noise_a + (mu_a[s_a] if use_a else 0.0)
        text = noise_t + (mu_t[s_t] if use_t else 0.0)
        did = f"{id_prefix}{k}"
        split.dialogues.append([
            UtteranceRecord(did, i, int(labels[i]), audio[i], text[i]) for i in range(n)
        ])
    return split


def synthesize_splits(spec: SyntheticSpec, counts: dict[str, int]) -> dict[str, DatasetSplit]:
    """One corpus of ``sum(counts)`` dialogues cut into consecutive named splits.

    Splits share class means, so a model trained on one transfers to the others.
    """
    total = SyntheticSpec.from_dict({**spec.to_dict(), "n_dialogues": int(sum(counts.values()))})
    corpus = synthesize(total)
    out, start = {}, 0
    for name, n in counts.items():
        out[name] = corpus.subset(corpus.dialogues[start:start + n])
        start += n
    return out


# -- batching -----------------------------------------------------------------

@dataclass
class DialogueBatch:
    audio: np.ndarray   # [B, T_max, d_a]
    text: np.ndarray    # [B, T_max, d_t]
    labels: np.ndarray  # [B, T_max], PAD_LABEL on padding
    mask: np.ndarray    # [B, T_max], 1.0 on real utterances

    @property
    def n_valid(self) -> int:
        return int(self.mask.sum())


def collate(split: DatasetSplit, dialogues: Sequence[list[UtteranceRecord]]) -> DialogueBatch:
    B = len(dialogues)
    T = max(len(d) for d in dialogues)
    audio = np.zeros((B, T, split.d_audio_in))
    text = np.zeros((B, T, split.d_text_in))
    labels = np.full((B, T), PAD_LABEL, dtype=np.int64)
    mask = np.zeros((B, T))
    for b, dialogue in enumerate(dialogues):
        for t, u in enumerate(dialogue):
            audio[b, t] = u.audio
            text[b, t] = u.text
            labels[b, t] = u.label
            mask[b, t] = 1.0
    return DialogueBatch(audio, text, labels, mask)


def make_batches(split: DatasetSplit, batch_size: int, seed: int | None = None) -> list[DialogueBatch]:
    """Pad dialogues into batches; ``seed=None`` keeps file order, otherwise shuffles."""
    if not split.dialogues:
        raise DatasetError("cannot batch an empty split")
    if batch_size < 1:
        raise ValueError("batch_size must be positive")
    order = np.arange(len(split.dialogues))
    if seed is not None:
        order = np.random.default_rng(seed).permutation(order)
    return [collate(split, [split.dialogues[i] for i in order[s:s + batch_size]])
            for s in range(0, len(order), batch_size)]


def iter_records(split: DatasetSplit) -> Iterator[UtteranceRecord]:
    for d in split.dialogues:
        yield from d
