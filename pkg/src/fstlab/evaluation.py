"""Decoding in the three input modes, corpus reports, WER buckets and ablations."""
import csv
import json
import math
from dataclasses import asdict, dataclass

import torch

from .checkpoint import Checkpoint
from .metrics import bleu, exact_match
from .model import BOS, EOS, N_SPECIAL, ids_to_tgt, make_batch
from .synthdata import ASR

EVAL_MODES = ("st", "mt_golden", "mt_asr", "ft")
DEFAULT_BUCKET_EDGES = (0.0, 0.05, 0.15, 0.30, 0.50, 1.0)

# eval mode -> (model pass, transcript fed, quality tag)
_MODE_INPUTS = {
    "st": ("st", "golden", None),
    "mt_golden": ("mt", "golden", None),
    "mt_asr": ("mt", "asr", None),
    "ft": ("ft", "asr", "asr"),
    "ft_golden": ("ft", "golden", "golden"),
}

ABLATIONS = {
    "full": (),
    "-asr": ("asr",),
    "-asr-kd-jsd": ("asr", "kd", "jsd"),
    "-asr-kd-jsd-ctr-car": ("asr", "kd", "jsd", "ctr", "car"),
}


def _model(m):
    if isinstance(m, Checkpoint):
        return m.model
    if isinstance(m, str):
        return Checkpoint(m).model
    return m


def _target_mask(model):
    V = model.config.vocab_size
    allowed = torch.zeros(model.config.n_vocab, dtype=torch.bool)
    allowed[N_SPECIAL + V:N_SPECIAL + 2 * V] = True
    allowed[EOS] = True
    return allowed


def _length_cap(sample, text):
    src = sample.src_asr if text == "asr" else sample.src_golden
    return 2 * len(src) + 8


def _memory(model, samples, mode, text, tag):
    dtype = next(model.parameters()).dtype
    batch = make_batch(samples, model.config.vocab_size, dtype, text_source=text, tag=tag)
    return model.memory_for(batch, mode)


@torch.no_grad()
def greedy_decode(model, samples, mode, text="asr", tag=None):
    """Batched greedy decoding; returns model-id sequences without BOS/EOS."""
    model.eval()
    mem, lens = _memory(model, samples, mode, text, tag)
    allowed = _target_mask(model)
    B = len(samples)
    caps = [_length_cap(s, text) for s in samples]
    prefix = torch.full((B, 1), BOS, dtype=torch.long)
    done = torch.zeros(B, dtype=torch.bool)
    out = [[] for _ in range(B)]
    for t in range(max(caps)):
        logits = model.decode(mem, lens, prefix)[:, -1]
        logits = logits.masked_fill(~allowed, float("-inf"))
        nxt = logits.argmax(-1)
        for i in range(B):
            if done[i]:
                continue
            if nxt[i] == EOS or len(out[i]) >= caps[i]:
                done[i] = True
            else:
                out[i].append(int(nxt[i]))
        if bool(done.all()):
            break
        prefix = torch.cat([prefix, nxt[:, None]], dim=1)
    return out


@torch.no_grad()
def sequence_logprob(model, sample, mode, ids, text="asr", tag=None):
    """Log-probability of model-id sequence ``ids`` followed by EOS."""
    model.eval()
    mem, lens = _memory(model, [sample], mode, text, tag)
    prefix = torch.tensor([[BOS] + list(ids)])
    logits = model.decode(mem, lens, prefix)[0]
    logits = logits.masked_fill(~_target_mask(model), float("-inf"))
    logp = torch.log_softmax(logits, -1)
    target = list(ids) + [EOS]
    return float(sum(logp[i, t] for i, t in enumerate(target)))


@torch.no_grad()
def beam_decode(model, sample, mode, beam, text="asr", tag=None):
    """Beam search by summed log-probability (no length normalization)."""
    model.eval()
    mem, lens = _memory(model, [sample], mode, text, tag)
    allowed = _target_mask(model)
    cap = _length_cap(sample, text)
    live = [(0.0, [])]
    finished = []
    for t in range(cap + 1):
        if not live:
            break
        prefix = torch.tensor([[BOS] + ids for _, ids in live])
        m = mem.expand(len(live), -1, -1)
        logits = model.decode(m, lens.expand(len(live)), prefix)[:, -1]
        logp = torch.log_softmax(logits.masked_fill(~allowed, float("-inf")), -1)
        cands = []
        for (score, ids), row in zip(live, logp):
            top = torch.topk(row, min(beam, int(allowed.sum())))
            for lp, tok in zip(top.values.tolist(), top.indices.tolist()):
                if tok == EOS or len(ids) >= cap:
                    # at the cap only EOS may follow
                    final = score + (lp if tok == EOS else float(row[EOS]))
                    cands.append((final, ids, True))
                else:
                    cands.append((score + lp, ids + [tok], False))
        cands.sort(key=lambda c: -c[0])
        live = []
        for score, ids, fin in cands[:beam]:
            (finished if fin else live).append((score, ids))
        if finished and live and max(f[0] for f in finished) >= live[0][0]:
            break
    pool = finished or live
    return max(pool, key=lambda c: c[0])[1]


def translate(model, sample, mode, beam=1, text=None):
    """Translate one sample; ``mode`` is st | mt | ft. Returns raw target tokens.

    For mt/ft the transcript defaults to the one the sample carries for its
    kind; the fused pass tags it golden or asr accordingly.
    """
    model = _model(model)
    if beam < 1:
        raise ValueError("beam must be >= 1")
    if text is None:
        text = "asr" if sample.transcript_kind == ASR else "golden"
    tag = text if mode == "ft" else None
    if beam == 1:
        ids = greedy_decode(model, [sample], mode, text, tag)[0]
    else:
        ids = beam_decode(model, sample, mode, beam, text, tag)
    return ids_to_tgt(ids, model.config.vocab_size)


def decode_corpus(model, samples, mode, text="asr", tag=None, chunk=100):
    model = _model(model)
    if mode == "ft" and tag is None:
        tag = text
    hyps = []
    for i in range(0, len(samples), chunk):
        ids = greedy_decode(model, samples[i:i + chunk], mode, text, tag)
        hyps.extend(ids_to_tgt(x, model.config.vocab_size) for x in ids)
    return hyps


def decode_mode(model, samples, eval_mode):
    mode, text, tag = _MODE_INPUTS[eval_mode]
    return decode_corpus(model, samples, mode, text, tag)


@dataclass
class EvalReport:
    mode: str
    bleu: float
    exact_match: float
    n_sentences: int


def evaluate(model, corpus, modes=EVAL_MODES):
    if not corpus:
        raise ValueError("empty evaluation corpus")
    model = _model(model)
    refs = [s.tgt for s in corpus]
    reports = []
    for mode in modes:
        if mode not in _MODE_INPUTS:
            raise ValueError(f"unknown eval mode {mode!r}")
        hyps = decode_mode(model, corpus, mode)
        reports.append(EvalReport(mode, bleu(refs, hyps), exact_match(refs, hyps), len(corpus)))
    return reports


def asr_split(corpus):
    return [s for s in corpus if s.transcript_kind == ASR]


@dataclass
class WerBucketRow:
    lo: float
    hi: float
    n: int
    bleu_ft: float | None
    bleu_mt_asr: float | None
    delta: float | None

    @property
    def bucket(self):
        return (self.lo, self.hi)


def bucket_index(w, edges):
    edges = list(edges)
    if w < edges[0]:
        raise ValueError(f"WER {w} below the first bucket edge")
    for i in range(len(edges) - 1):
        if edges[i] <= w < edges[i + 1]:
            return i
    return len(edges) - 1


def wer_bucket_analysis(model, corpus, edges=DEFAULT_BUCKET_EDGES):
    """FT vs MT-asr BLEU per realized-WER bucket.

    Buckets are ``[edges[i], edges[i+1])`` plus ``[edges[-1], inf)`` so they
    partition ``[0, inf)`` when ``edges[0] == 0``.
    """
    edges = [float(e) for e in edges]
    if edges != sorted(edges) or len(set(edges)) != len(edges):
        raise ValueError("bucket edges must be strictly increasing")
    model = _model(model)
    ft = decode_mode(model, corpus, "ft")
    mt = decode_mode(model, corpus, "mt_asr")
    groups = [[] for _ in edges]
    for i, s in enumerate(corpus):
        groups[bucket_index(s.realized_wer, edges)].append(i)
    his = edges[1:] + [math.inf]
    rows = []
    for lo, hi, idx in zip(edges, his, groups):
        if not idx:
            rows.append(WerBucketRow(lo, hi, 0, None, None, None))
            continue
        refs = [corpus[i].tgt for i in idx]
        b_ft = bleu(refs, [ft[i] for i in idx])
        b_mt = bleu(refs, [mt[i] for i in idx])
        rows.append(WerBucketRow(lo, hi, len(idx), b_ft, b_mt, b_ft - b_mt))
    return rows


def score_model(model, test):
    """Table-5 style columns on the asr split: MT golden, MT asr, ST, FT BLEU."""
    split = asr_split(test) or test
    return {r.mode: r.bleu for r in evaluate(model, split, ("mt_golden", "mt_asr", "st", "ft"))}


def ablation_run(train_corpus, test_corpus, model_config, base_config, masks=None, seeds=(0,),
                 dev=None, progress=None, on_model=None):
    """Train one model per (mask, seed) and score it. Returns a list of row dicts.

    ``progress(row)`` is called after each run; ``on_model(row, model)`` lets a
    caller keep trained models for further analysis.
    """
    from dataclasses import replace

    from .trainer import train

    masks = ABLATIONS if masks is None else masks
    rows = []
    for name, mask in masks.items():
        for seed in seeds:
            cfg = replace(base_config, ablate=frozenset(mask), seed=seed)
            result = train(train_corpus, cfg, model_config, dev=dev)
            row = {"config": name, "seed": seed, **score_model(result.model, test_corpus)}
            rows.append(row)
            if progress:
                progress(row)
            if on_model:
                on_model(row, result.model)
    return rows


# -- report files ---------------------------------------------------------------


def write_reports(reports, csv_path, jsonl_path):
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["mode", "bleu", "exact_match", "n_sentences"])
        for r in reports:
            w.writerow([r.mode, repr(r.bleu), repr(r.exact_match), r.n_sentences])
    with open(jsonl_path, "w") as fh:
        for r in reports:
            fh.write(json.dumps(asdict(r)) + "\n")


def write_bucket_rows(rows, csv_path, jsonl_path):
    fmt = lambda v: "" if v is None else repr(v)  # noqa: E731
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["wer_lo", "wer_hi", "n", "bleu_ft", "bleu_mt_asr", "delta"])
        for r in rows:
            w.writerow([repr(r.lo), repr(r.hi), r.n, fmt(r.bleu_ft), fmt(r.bleu_mt_asr), fmt(r.delta)])
    with open(jsonl_path, "w") as fh:
        for r in rows:
            d = asdict(r)
            if math.isinf(d["hi"]):
                d["hi"] = None
            fh.write(json.dumps(d) + "\n")


ABLATION_COLUMNS = ["config", "seed", "mt_golden", "mt_asr", "st", "ft"]


def write_ablation(rows, csv_path):
    with open(csv_path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
