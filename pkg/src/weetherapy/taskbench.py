"""Synthetic four-task benchmark with planted acoustic cues, and its metrics.

ER   3-way amplitude-modulation rate of a 100 Hz carrier (envelope cue)
CTC  which of four carriers dominates (spectral cue)
CMD  rare 350 Hz burst on an 80 Hz tone (transient cue)
DS   four 100 ms chirps, transcribed as a symbol sequence
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import vocab
from .encoders import AudioSegment
from .errors import ConfigError, InvalidInputError

TASKS = ("ER", "CTC", "CMD", "DS")
SPLITS = ("train", "dev", "test")
FORMAT_VERSION = 1
INVALID = -1

DEFAULT_PARAMS = {
    "sample_rate_hz": 1000,
    "duration_s": 1.0,
    "noise_sigma": 0.1,
    "er_carrier_hz": 100.0,
    "er_mod_rates_hz": [2.0, 5.0, 11.0],
    "er_depth": 0.8,
    "ctc_carriers_hz": [60.0, 90.0, 130.0, 190.0],
    "ctc_dominant_amp": 1.0,
    "ctc_other_amp": 0.2,
    "cmd_tone_hz": 80.0,
    "cmd_positive_rate": 0.05,
    "cmd_burst_hz": 350.0,
    "cmd_burst_s": 0.05,
    "cmd_burst_amp": 0.9,
    "ds_start_hz": [70.0, 110.0, 150.0, 190.0],
    "ds_chirp_s": 0.1,
    "ds_sweep_hz": 20.0,
    "ds_num_chirps": 4,
}

NUM_CLASSES = {"ER": 3, "CTC": 4, "CMD": 2}


@dataclass
class TaskExample:
    task: str
    audio: AudioSegment
    instruction_ids: list[int]
    target_ids: list[int]
    label: int | list[int]


@dataclass
class Dataset:
    examples: list[TaskExample]
    split: str
    seed: int
    generation_params: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.examples)

    @property
    def tasks(self) -> list[str]:
        return [e.task for e in self.examples]

    def audio_matrix(self) -> np.ndarray:
        return np.stack([e.audio.samples for e in self.examples])


def target_for(task: str, label) -> list[int]:
    if task in ("ER", "CTC"):
        return [vocab.CLASS_TOKENS[label], vocab.EOS]
    if task == "CMD":
        return [vocab.RISK if label else vocab.SAFE, vocab.EOS]
    if task == "DS":
        return [vocab.SYMBOL_TOKENS[s] for s in label] + [vocab.EOS]
    raise ConfigError(f"unknown task {task!r}")


def label_from_generation(task: str, ids) -> int | list[int]:
    """Map generated ids back to a label; malformed output becomes INVALID."""
    ids = [int(i) for i in ids if int(i) != vocab.BOS]
    if task == "DS":
        out = []
        for i in ids:
            if i == vocab.EOS:
                break
            out.append(vocab.SYMBOL_TOKENS.index(i) if i in vocab.SYMBOL_TOKENS else INVALID)
        return out
    if not ids:
        return INVALID
    first = ids[0]
    if task in ("ER", "CTC"):
        valid = vocab.CLASS_TOKENS[: NUM_CLASSES[task]]
        return valid.index(first) if first in valid else INVALID
    if task == "CMD":
        return {vocab.RISK: 1, vocab.SAFE: 0}.get(first, INVALID)
    raise ConfigError(f"unknown task {task!r}")


def _example_rng(seed: int, task: str, split: str, index: int) -> np.random.Generator:
    ss = np.random.SeedSequence([seed & 0xFFFFFFFFFFFFFFFF, TASKS.index(task), SPLITS.index(split), index])
    return np.random.default_rng(ss)


def _synthesize(task: str, rng: np.random.Generator, p: dict) -> tuple[np.ndarray, object]:
    sr = p["sample_rate_hz"]
    n = int(round(p["duration_s"] * sr))
    t = np.arange(n) / sr
    two_pi = 2.0 * np.pi
    if task == "ER":
        label = int(rng.integers(len(p["er_mod_rates_hz"])))
        fm = p["er_mod_rates_hz"][label]
        phi, theta = rng.uniform(0, two_pi, size=2)
        env = 1.0 + p["er_depth"] * np.sin(two_pi * fm * t + phi)
        x = env * np.sin(two_pi * p["er_carrier_hz"] * t + theta)
    elif task == "CTC":
        carriers = p["ctc_carriers_hz"]
        label = int(rng.integers(len(carriers)))
        phases = rng.uniform(0, two_pi, size=len(carriers))
        x = np.zeros(n)
        for k, (f, ph) in enumerate(zip(carriers, phases)):
            amp = p["ctc_dominant_amp"] if k == label else p["ctc_other_amp"]
            x += amp * np.sin(two_pi * f * t + ph)
    elif task == "CMD":
        label = int(rng.random() < p["cmd_positive_rate"])
        ph = rng.uniform(0, two_pi)
        onset = rng.uniform(0.0, p["duration_s"] - p["cmd_burst_s"])
        x = np.sin(two_pi * p["cmd_tone_hz"] * t + ph)
        if label:
            m = (t >= onset) & (t < onset + p["cmd_burst_s"])
            x = x + m * p["cmd_burst_amp"] * np.sin(two_pi * p["cmd_burst_hz"] * (t - onset))
    elif task == "DS":
        k = p["ds_num_chirps"]
        label = [int(s) for s in rng.integers(len(p["ds_start_hz"]), size=k)]
        dur = p["ds_chirp_s"]
        rate = p["ds_sweep_hz"] / dur
        x = np.zeros(n)
        for i, s in enumerate(label):
            m = (t >= i * dur) & (t < (i + 1) * dur)
            tl = t - i * dur
            x += m * np.sin(two_pi * (p["ds_start_hz"][s] * tl + 0.5 * rate * tl * tl))
    else:
        raise ConfigError(f"unknown task {task!r}")
    x = x + rng.normal(0.0, p["noise_sigma"], size=n)
    return np.clip(x, -4.0, 4.0), label


def gen_task(task: str, n: int, seed: int, split: str = "train", params: dict | None = None) -> Dataset:
    """Generate ``n`` examples.  Example ``i`` depends only on (seed, task, split, i)."""
    if task not in TASKS:
        raise ConfigError(f"unknown task {task!r}; expected one of {TASKS}")
    if split not in SPLITS:
        raise ConfigError(f"unknown split {split!r}")
    if n < 1:
        raise InvalidInputError("n must be >= 1")
    p = dict(DEFAULT_PARAMS)
    if params:
        unknown = set(params) - set(p)
        if unknown:
            raise ConfigError(f"unknown generation params {sorted(unknown)}")
        p.update(params)
    examples = []
    for i in range(n):
        x, label = _synthesize(task, _example_rng(seed, task, split, i), p)
        examples.append(TaskExample(
            task=task,
            audio=AudioSegment(x, p["sample_rate_hz"]),
            instruction_ids=[vocab.TASK_TOKENS[task]],
            target_ids=target_for(task, label),
            label=label,
        ))
    return Dataset(examples, split, seed, p)


# -- dataset files (JSON lines) ------------------------------------------------


def _round9(x: np.ndarray) -> list[float]:
    return [float(f"{v:.9g}") for v in x]


def save_dataset(ds: Dataset, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w") as fh:
        header = {"format_version": FORMAT_VERSION, "seed": ds.seed, "split": ds.split,
                  "generation_params": ds.generation_params}
        fh.write(json.dumps(header, sort_keys=True) + "\n")
        for e in ds.examples:
            rec = {
                "task": e.task,
                "sample_rate_hz": e.audio.sample_rate_hz,
                "audio": _round9(e.audio.samples),
                "instruction_ids": list(e.instruction_ids),
                "target_ids": list(e.target_ids),
                "label": e.label,
            }
            fh.write(json.dumps(rec) + "\n")


def load_dataset(path) -> Dataset:
    with Path(path).open() as fh:
        header = json.loads(fh.readline())
        if header.get("format_version") != FORMAT_VERSION:
            raise ConfigError(f"unsupported dataset format {header.get('format_version')!r}")
        examples = []
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            examples.append(TaskExample(
                task=rec["task"],
                audio=AudioSegment(np.array(rec["audio"]), rec["sample_rate_hz"]),
                instruction_ids=rec["instruction_ids"],
                target_ids=rec["target_ids"],
                label=rec["label"],
            ))
    return Dataset(examples, header.get("split", "train"), header["seed"], header["generation_params"])


# -- metrics ---------------------------------------------------------------------


def accuracy(preds, labels) -> float:
    preds, labels = list(preds), list(labels)
    if len(preds) != len(labels) or not preds:
        raise InvalidInputError("accuracy needs equal, nonzero lengths")
    return sum(p == y for p, y in zip(preds, labels)) / len(labels)


def macro_f1(preds, labels, num_classes: int) -> float:
    """Unweighted mean of per-class F1.  INVALID predictions match no class."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    if preds.shape != labels.shape or preds.size == 0:
        raise InvalidInputError("macro_f1 needs equal, nonzero lengths")
    if np.any((labels < 0) | (labels >= num_classes)):
        raise InvalidInputError("label out of range")
    if np.any(((preds < 0) & (preds != INVALID)) | (preds >= num_classes)):
        raise InvalidInputError("prediction out of range")
    f1s = []
    for c in range(num_classes):
        tp = np.sum((preds == c) & (labels == c))
        fp = np.sum((preds == c) & (labels != c))
        fn = np.sum((preds != c) & (labels == c))
        prec = tp / (tp + fp) if tp + fp else 0.0
        rec = tp / (tp + fn) if tp + fn else 0.0
        f1s.append(2 * prec * rec / (prec + rec) if prec + rec > 0 else 0.0)
    return float(np.mean(f1s))


def precision_at_k(scores, labels, k: int) -> float:
    """Fraction of positives among the k highest scores (ties: lower index first)."""
    if k <= 0:
        raise ConfigError("k must be positive")
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if k > scores.size:
        raise InvalidInputError(f"k={k} exceeds {scores.size} items")
    order = np.argsort(-scores, kind="stable")
    return float(np.sum(labels[order[:k]] != 0) / k)


def lcs_length(a, b) -> int:
    a, b = list(a), list(b)
    if not a or not b:
        return 0
    prev = [0] * (len(b) + 1)
    for x in a:
        cur = [0]
        for j, y in enumerate(b):
            cur.append(prev[j] + 1 if x == y else max(prev[j + 1], cur[j]))
        prev = cur
    return prev[-1]


def rouge_l(candidate, reference) -> float:
    """LCS-based F-score with beta = 1."""
    candidate, reference = list(candidate), list(reference)
    if not reference:
        raise InvalidInputError("reference must be nonempty")
    if not candidate:
        return 0.0
    lcs = lcs_length(candidate, reference)
    if lcs == 0:
        return 0.0
    p = lcs / len(candidate)
    r = lcs / len(reference)
    return 2 * p * r / (p + r)


# -- linear probes used to audit expert specialisation ------------------------


def probe_features(maps: np.ndarray) -> np.ndarray:
    """Per-channel time mean and time std of (N, T, d) feature maps."""
    return np.concatenate([maps.mean(axis=1), maps.std(axis=1)], axis=1)


@lru_cache(maxsize=1)
def _probe_model():
    from sklearn.linear_model import LogisticRegression
    from sklearn.pipeline import make_pipeline
    from sklearn.preprocessing import StandardScaler
    return lambda: make_pipeline(StandardScaler(), LogisticRegression(max_iter=2000))


def linear_probe_accuracy(train_maps, train_labels, test_maps, test_labels) -> float:
    """Balanced accuracy (mean per-class recall), so a rare positive class cannot be ignored."""
    from sklearn.metrics import balanced_accuracy_score
    clf = _probe_model()()
    clf.fit(probe_features(train_maps), train_labels)
    return float(balanced_accuracy_score(test_labels, clf.predict(probe_features(test_maps))))
