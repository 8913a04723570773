"""Pure-Python twins of the compiled kernels in ``_ckernels.pyx``."""


def edit_distance(a, b):
    """Unit-cost Levenshtein distance between two integer sequences."""
    m, n = len(a), len(b)
    row = list(range(n + 1))
    for i in range(1, m + 1):
        prev_diag, row[0] = row[0], i
        ai = a[i - 1]
        for j in range(1, n + 1):
            tmp = row[j]
            if ai == b[j - 1]:
                row[j] = prev_diag
            else:
                row[j] = 1 + min(prev_diag, tmp, row[j - 1])
            prev_diag = tmp
    return row[n]


def edit_distance_batch(refs, hyps):
    """Edit distance for each aligned (ref, hyp) pair."""
    if len(refs) != len(hyps):
        raise ValueError("refs and hyps differ in length")
    return [edit_distance(r, h) for r, h in zip(refs, hyps)]
