"""Word error rate and corpus BLEU over integer token sequences."""
import math
from collections import Counter

from .kernels import edit_distance

MAX_ORDER = 4


def wer(ref, hyp):
    """Levenshtein distance (unit sub/del/ins costs) divided by ``len(ref)``.

    Examples:
        >>> wer([1, 2, 3], [1, 4, 3])
        0.3333333333333333
        >>> wer([1, 2], [])
        1.0
    """
    if len(ref) == 0:
        raise ValueError("wer needs a non-empty reference")
    return edit_distance(list(ref), list(hyp)) / len(ref)


def _ngrams(tokens, n):
    return Counter(tuple(tokens[i:i + n]) for i in range(len(tokens) - n + 1))


def bleu_stats(refs, hyps):
    """Accumulate clipped n-gram matches, n-gram totals and lengths."""
    if len(refs) != len(hyps):
        raise ValueError(f"got {len(refs)} references but {len(hyps)} hypotheses")
    correct = [0] * MAX_ORDER
    total = [0] * MAX_ORDER
    sys_len = ref_len = 0
    for ref, hyp in zip(refs, hyps):
        ref, hyp = list(ref), list(hyp)
        sys_len += len(hyp)
        ref_len += len(ref)
        for n in range(1, MAX_ORDER + 1):
            h = _ngrams(hyp, n)
            r = _ngrams(ref, n)
            correct[n - 1] += sum(min(c, r[g]) for g, c in h.items())
            total[n - 1] += max(len(hyp) - n + 1, 0)
    return correct, total, sys_len, ref_len


def _log(x):
    return math.log(x) if x > 0 else -9999999999.0


def bleu_from_stats(correct, total, sys_len, ref_len):
    """BLEU in [0, 100] with exponential smoothing of zero-match orders.

    Zero-match orders get precision ``1 / (2**k * total)`` where ``k`` counts
    the zero-match orders seen so far. Orders for which the hypotheses hold
    no n-grams at all (every sentence shorter than ``n``) are dropped from
    the geometric mean, so a corpus of short sentences still scores itself
    at 100.
    """
    precisions = []
    smooth = 1.0
    for n in range(MAX_ORDER):
        if total[n] == 0:
            break
        if correct[n] == 0:
            smooth *= 2
            precisions.append(100.0 / (smooth * total[n]))
        else:
            precisions.append(100.0 * correct[n] / total[n])
    if not precisions:
        return 0.0
    score = math.exp(sum(_log(p) for p in precisions) / len(precisions))
    if sys_len < ref_len:
        bp = math.exp(1 - ref_len / sys_len) if sys_len > 0 else 0.0
    else:
        bp = 1.0
    return min(100.0, max(0.0, bp * score))


def bleu(refs, hyps):
    """Corpus BLEU (1..4-grams, exp smoothing, brevity penalty), token level."""
    if len(refs) == 0:
        raise ValueError("bleu needs at least one sentence pair")
    return bleu_from_stats(*bleu_stats(refs, hyps))


def exact_match(refs, hyps):
    if len(refs) != len(hyps):
        raise ValueError(f"got {len(refs)} references but {len(hyps)} hypotheses")
    if not refs:
        return 0.0
    return sum(list(r) == list(h) for r, h in zip(refs, hyps)) / len(refs)
