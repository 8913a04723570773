"""Synthetic speech/transcript/translation triples with a WER-controlled ASR channel.

A task fixes one random prototype vector per source token. "Speech" for a
sentence is every token's prototype repeated ``k`` times (``k`` drawn per
token) plus Gaussian noise, so it is longer, continuous and noisier than the
transcript while carrying the same content. The target is a token-wise
permutation of the source, optionally reversed.
"""
import json
from dataclasses import dataclass, field

import numpy as np

from .metrics import wer

GOLDEN = "golden"
ASR = "asr"
KINDS = (GOLDEN, ASR)

# substitution / deletion / insertion shares of corruption events
OP_MIX = (0.7, 0.2, 0.1)
# probability that a substitution picks the nearest-prototype token
CONFUSABLE_BIAS = 0.8


class CorpusFormatError(ValueError):
    """A corpus or task file could not be parsed."""


@dataclass(eq=False)
class TaskSpec:
    vocab_size: int
    frame_dim: int
    prototypes: np.ndarray
    permutation: np.ndarray
    reverse: bool
    k_min: int
    k_max: int
    seed: int
    confusable: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.prototypes = np.asarray(self.prototypes, dtype=np.float64)
        self.permutation = np.asarray(self.permutation, dtype=np.int64)
        V = self.vocab_size
        if self.prototypes.shape != (V, self.frame_dim):
            raise ValueError(f"prototypes must be {V}x{self.frame_dim}")
        if sorted(self.permutation.tolist()) != list(range(V)):
            raise ValueError("permutation is not a bijection on [0, V)")
        if not 1 <= self.k_min <= self.k_max:
            raise ValueError(f"bad frames-per-token range [{self.k_min}, {self.k_max}]")
        d = _pairwise_dist(self.prototypes)
        np.fill_diagonal(d, np.inf)
        if not np.all(d > 0):
            raise ValueError("prototype rows must be pairwise distinct")
        self.confusable = np.argmin(d, axis=1)

    def __eq__(self, other):
        if not isinstance(other, TaskSpec):
            return NotImplemented
        return (
            self.vocab_size == other.vocab_size
            and self.frame_dim == other.frame_dim
            and self.reverse == other.reverse
            and (self.k_min, self.k_max, self.seed) == (other.k_min, other.k_max, other.seed)
            and np.array_equal(self.prototypes, other.prototypes)
            and np.array_equal(self.permutation, other.permutation)
        )

    def to_dict(self):
        return {
            "vocab_size": self.vocab_size,
            "frame_dim": self.frame_dim,
            "prototypes": self.prototypes.tolist(),
            "permutation": self.permutation.tolist(),
            "reverse": self.reverse,
            "k_min": self.k_min,
            "k_max": self.k_max,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass(eq=False)
class Sample:
    frames: np.ndarray
    src_golden: list
    src_asr: list
    tgt: list
    transcript_kind: str
    realized_wer: float

    @property
    def src_input(self):
        """The transcript a text-reading pass actually sees."""
        return self.src_asr if self.transcript_kind == ASR else self.src_golden

    def __eq__(self, other):
        if not isinstance(other, Sample):
            return NotImplemented
        return (
            self.frames.shape == other.frames.shape
            and np.array_equal(self.frames, other.frames)
            and list(self.src_golden) == list(other.src_golden)
            and list(self.src_asr) == list(other.src_asr)
            and list(self.tgt) == list(other.tgt)
            and self.transcript_kind == other.transcript_kind
            and self.realized_wer == other.realized_wer
        )


def _pairwise_dist(x):
    sq = np.sum(x * x, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * x @ x.T
    return np.sqrt(np.maximum(d2, 0.0))


def make_task(seed, V, d_f, frames_per_token=(4, 8), reverse=True):
    """Draw a task: unit-variance Gaussian prototypes and a random target permutation."""
    if V < 4:
        raise ValueError(f"vocab size must be >= 4, got {V}")
    if d_f < 2:
        raise ValueError(f"frame dim must be >= 2, got {d_f}")
    rng = np.random.default_rng(seed)
    prototypes = rng.standard_normal((V, d_f))
    permutation = rng.permutation(V)
    k_min, k_max = frames_per_token
    return TaskSpec(V, d_f, prototypes, permutation, bool(reverse), int(k_min), int(k_max), int(seed))


def _check_tokens(tokens, V):
    for t in tokens:
        if not 0 <= t < V:
            raise ValueError(f"token {t} outside vocabulary [0, {V})")


def synth_speech(tokens, task, noise_sigma, rng):
    """Emit ``k in [k_min, k_max]`` noisy prototype frames per token."""
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    _check_tokens(tokens, task.vocab_size)
    if len(tokens) == 0:
        return np.zeros((0, task.frame_dim))
    counts = rng.integers(task.k_min, task.k_max + 1, size=len(tokens))
    frames = np.repeat(task.prototypes[np.asarray(tokens)], counts, axis=0)
    if noise_sigma > 0:
        frames = frames + rng.normal(0.0, noise_sigma, size=frames.shape)
    return frames


def apply_target_map(tokens, task):
    """Ground-truth translation: permute each token, then optionally reverse."""
    out = [int(task.permutation[t]) for t in tokens]
    return out[::-1] if task.reverse else out


def asr_corrupt(tokens, target_wer, task, rng):
    """Simulated recognizer output with roughly ``target_wer`` errors per token.

    Each source position independently suffers an error event with
    probability ``target_wer``; the event is a substitution, deletion or
    insertion per ``OP_MIX``. Substitutions prefer the acoustically closest
    token (nearest prototype). Returns ``(tokens, realized_wer)``.
    """
    if not 0.0 <= target_wer <= 1.0:
        raise ValueError(f"target_wer must lie in [0, 1], got {target_wer}")
    tokens = [int(t) for t in tokens]
    if not tokens:
        return [], 0.0
    _check_tokens(tokens, task.vocab_size)
    if target_wer == 0.0:
        return list(tokens), 0.0
    V = task.vocab_size
    out = []
    for t in tokens:
        if rng.random() >= target_wer:
            out.append(t)
            continue
        op = rng.choice(3, p=OP_MIX)
        if op == 0:
            if rng.random() < CONFUSABLE_BIAS:
                out.append(int(task.confusable[t]))
            else:
                other = int(rng.integers(V - 1))
                out.append(other if other < t else other + 1)
        elif op == 2:
            out.append(t)
            out.append(int(rng.integers(V)))
    if not out:
        # keep MT inputs non-empty: everything deleted becomes one confusion
        out = [int(task.confusable[tokens[0]])]
    return out, wer(tokens, out)


def _schedule_counts(n, fractions):
    raw = [n * f for f in fractions]
    counts = [int(np.floor(r)) for r in raw]
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - sum(counts)]:
        counts[i] += 1
    return counts


def gen_corpus(task, n, wer_schedule, rng, length_range=(6, 12), noise_sigma=1.0):
    """Generate ``n`` samples; ``wer_schedule`` is a list of (target_wer, fraction).

    Samples whose scheduled target WER is 0 are tagged golden, the rest asr.
    """
    if n <= 0:
        raise ValueError(f"corpus size must be positive, got {n}")
    if not wer_schedule:
        raise ValueError("empty WER schedule")
    fractions = [float(f) for _, f in wer_schedule]
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"schedule fractions must be >= 0 and sum to 1, got {fractions}")
    lo, hi = length_range
    if not 1 <= lo <= hi:
        raise ValueError(f"bad sentence length range {length_range}")
    counts = _schedule_counts(n, fractions)
    targets = np.repeat([float(w) for w, _ in wer_schedule], counts)
    targets = targets[rng.permutation(n)]
    samples = []
    for w in targets:
        length = int(rng.integers(lo, hi + 1))
        src = [int(t) for t in rng.integers(task.vocab_size, size=length)]
        frames = synth_speech(src, task, noise_sigma, rng)
        src_asr, realized = asr_corrupt(src, float(w), task, rng)
        samples.append(Sample(
            frames=frames,
            src_golden=src,
            src_asr=src_asr,
            tgt=apply_target_map(src, task),
            transcript_kind=GOLDEN if w == 0.0 else ASR,
            realized_wer=float(realized),
        ))
    return samples


def sample_to_record(s):
    return {
        "frames": s.frames.tolist(),
        "src": list(s.src_golden),
        "src_asr": list(s.src_asr),
        "tgt": list(s.tgt),
        "kind": s.transcript_kind,
        "wer": s.realized_wer,
    }


def record_to_sample(rec):
    frames = np.asarray(rec["frames"], dtype=np.float64)
    if frames.ndim != 2:
        raise ValueError("frames must be a 2-D array")
    kind = rec["kind"]
    if kind not in KINDS:
        raise ValueError(f"unknown transcript kind {kind!r}")
    return Sample(
        frames=frames,
        src_golden=[int(t) for t in rec["src"]],
        src_asr=[int(t) for t in rec["src_asr"]],
        tgt=[int(t) for t in rec["tgt"]],
        transcript_kind=kind,
        realized_wer=float(rec["wer"]),
    )


def write_corpus(path, samples):
    with open(path, "w") as fh:
        for s in samples:
            fh.write(json.dumps(sample_to_record(s)))
            fh.write("\n")


def read_corpus(path):
    samples = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                samples.append(record_to_sample(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise CorpusFormatError(f"{path}: line {lineno}: {exc}") from exc
    return samples


def save_task(path, task):
    with open(path, "w") as fh:
        json.dump(task.to_dict(), fh)
        fh.write("\n")


def load_task(path):
    with open(path) as fh:
        try:
            return TaskSpec.from_dict(json.load(fh))
        except (ValueError, KeyError, TypeError) as exc:
            raise CorpusFormatError(f"{path}: {exc}") from exc
