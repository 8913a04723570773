"""Multi-task training loop, learning-rate schedule and finite-difference checker."""
import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import torch

from .checkpoint import Checkpoint, save_checkpoint
from .losses import TERMS, LossWeights, combine, total_loss
from .model import FSTModel, ModelConfig, make_batch
from .quantize import fit_kmeans

log = logging.getLogger(__name__)

METRIC_FIELDS = ["step"] + [f"l_{t}" for t in TERMS] + ["total", "lr"]
DTYPES = {"float32": torch.float32, "float64": torch.float64}


class NonFiniteLossError(RuntimeError):
    def __init__(self, term, step):
        super().__init__(f"non-finite loss term {term!r} at step {step}")
        self.term = term
        self.step = step


@dataclass
class TrainConfig:
    lr_max: float = 3e-3
    warmup_steps: int = 200
    adam_beta1: float = 0.9
    adam_beta2: float = 0.98
    max_steps: int = 3000
    batch_size: int = 16
    seed: int = 0
    weights: LossWeights = field(default_factory=LossWeights)
    ablate: frozenset = frozenset()
    dtype: str = "float32"
    threads: int = 1
    eval_every: int = 500
    dev_size: int = 200
    pretrain_mt_steps: int = 0
    finetune_lr_ratio: float = 0.12
    kmeans_start: int = 500
    kmeans_refit_every: int = 500
    kmeans_fit_samples: int = 64
    clip_norm: float = 0.0

    def __post_init__(self):
        self.ablate = frozenset(self.ablate)
        if self.warmup_steps < 1:
            raise ValueError("warmup_steps must be >= 1")
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2 (contrastive negatives)")
        if self.clip_norm < 0:
            raise ValueError("clip_norm must be >= 0")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")
        unknown = self.ablate - set(TERMS)
        if unknown:
            raise ValueError(f"unknown loss terms in ablation mask: {sorted(unknown)}")

    @property
    def torch_dtype(self):
        return DTYPES[self.dtype]

    @property
    def total_steps(self):
        return self.pretrain_mt_steps + self.max_steps

    def to_dict(self):
        d = {f.name: getattr(self, f.name) for f in fields(self) if f.name not in ("weights", "ablate")}
        d.update(asdict(self.weights))
        d["ablate"] = sorted(self.ablate)
        return d


def split_flat_config(flat):
    """Split a flat key/value dict into (ModelConfig, TrainConfig)."""
    model_keys = {f.name for f in fields(ModelConfig)}
    weight_keys = {f.name for f in fields(LossWeights)}
    train_keys = {f.name for f in fields(TrainConfig)} - {"weights"}
    m, w, t = {}, {}, {}
    for k, v in flat.items():
        if k in model_keys:
            m[k] = v
        elif k in weight_keys:
            w[k] = v
        elif k in train_keys:
            t[k] = v
        else:
            raise ValueError(f"unknown config key {k!r}")
    if isinstance(t.get("ablate"), str):
        t["ablate"] = [x for x in t["ablate"].split(",") if x]
    return ModelConfig(**m), TrainConfig(weights=LossWeights(**w), **t)


def lr_schedule(step, lr_max, warmup):
    """Linear warmup to ``lr_max`` at ``warmup``, then inverse-square-root decay."""
    if step < 1:
        raise ValueError("step counts from 1")
    return lr_max * min(step / warmup, math.sqrt(warmup / step))


def train_step(model, optimizer, samples, weights, lr, ablate=frozenset(), step=0, clip_norm=0.0):
    """One Adam update on the weighted objective; returns float terms (64-bit).

    ``clip_norm > 0`` rescales the global gradient norm to at most that value.
    """
    if len(samples) < 2:
        raise ValueError("a training batch needs at least 2 samples")
    dtype = next(model.parameters()).dtype
    model.train()
    batch = make_batch(samples, model.config.vocab_size, dtype)
    out = model(batch)
    losses = total_loss(out, batch, weights, ablate)
    terms = {t: float(v.detach()) for t, v in losses.terms().items()}
    for t, v in terms.items():
        if not math.isfinite(v):
            raise NonFiniteLossError(t, step)
    for g in optimizer.param_groups:
        g["lr"] = lr
    optimizer.zero_grad(set_to_none=True)
    losses.total.backward()
    if clip_norm > 0:
        torch.nn.utils.clip_grad_norm_(model.parameters(), clip_norm)
    optimizer.step()
    row = {"step": step, **{f"l_{t}": terms[t] for t in TERMS}}
    row["total"] = float(combine(terms, weights))
    row["lr"] = lr
    return row


@dataclass
class TrainResult:
    model: FSTModel
    rows: list
    best_score: float
    best_step: int


class Trainer:
    """Stateful loop around :func:`train_step` with resumable state."""

    MT_ONLY = frozenset(TERMS) - {"mt"}

    def __init__(self, corpus, config, model_config, dev=None, out_dir=None):
        if not corpus:
            raise ValueError("empty training corpus")
        self.corpus = corpus
        self.dev = dev[: config.dev_size] if dev else None
        self.config = config
        self.out_dir = out_dir
        torch.set_num_threads(config.threads)
        torch.manual_seed(config.seed)
        self.model = FSTModel(model_config).to(config.torch_dtype)
        self.optimizer = self._make_optimizer()
        self.rng = np.random.default_rng(config.seed)
        self.step = 0
        self.perm, self.pos = [], 0
        self.best_score, self.best_step = -1.0, 0
        self.rows = []

    def _make_optimizer(self):
        c = self.config
        return torch.optim.Adam(self.model.parameters(), lr=c.lr_max, betas=(c.adam_beta1, c.adam_beta2))

    # -- state ---------------------------------------------------------------

    def state(self):
        return {
            "step": self.step,
            "perm": [int(i) for i in self.perm],
            "pos": self.pos,
            "rng": self.rng.bit_generator.state,
            "best_score": self.best_score,
            "best_step": self.best_step,
        }

    def save(self, path):
        save_checkpoint(path, self.model, self.config, self.optimizer, self.state())

    @classmethod
    def resume(cls, path, corpus, dev=None, out_dir=None, config=None):
        ckpt = Checkpoint(path)
        if ckpt.trainer_state is None:
            raise ValueError(f"{path} holds no trainer state")
        if config is None:
            _, config = split_flat_config(ckpt.train_config_dict)
        self = cls(corpus, config, ckpt.model_config, dev=dev, out_dir=out_dir)
        self.model.load_state_dict(ckpt.model.state_dict())
        if ckpt.model_config.quantizer == "kmeans":
            self.model.codebook_ready = ckpt.model.codebook_ready
        ckpt.restore_optimizer(self.optimizer)
        st = ckpt.trainer_state
        self.step, self.perm, self.pos = st["step"], st["perm"], st["pos"]
        self.rng.bit_generator.state = st["rng"]
        self.best_score, self.best_step = st["best_score"], st["best_step"]
        ckpt.restore_torch_rng()
        return self

    # -- loop ------------------------------------------------------------------

    def next_batch(self):
        B = self.config.batch_size
        if self.pos + B > len(self.perm):
            self.perm = self.rng.permutation(len(self.corpus)).tolist()
            self.pos = 0
        idx = self.perm[self.pos:self.pos + B]
        self.pos += B
        return [self.corpus[i] for i in idx]

    def phase(self, step):
        c = self.config
        if step <= c.pretrain_mt_steps:
            return "mt", step, c.lr_max, self.MT_ONLY
        lr_max = c.lr_max * c.finetune_lr_ratio if c.pretrain_mt_steps else c.lr_max
        return "joint", step - c.pretrain_mt_steps, lr_max, c.ablate

    def lr_at(self, step):
        _, s, lr_max, _ = self.phase(step)
        return lr_schedule(s, lr_max, self.config.warmup_steps)

    def maybe_fit_codebook(self, step):
        c = self.config
        if self.model.config.quantizer != "kmeans" or step < c.kmeans_start:
            return
        if (step - c.kmeans_start) % c.kmeans_refit_every:
            return
        idx = self.rng.choice(len(self.corpus), size=min(c.kmeans_fit_samples, len(self.corpus)), replace=False)
        batch = make_batch([self.corpus[i] for i in idx], self.model.config.vocab_size, c.torch_dtype)
        self.model.eval()
        with torch.no_grad():
            feats, lens = self.model.speech_features(batch.frames, batch.frame_lens)
        vecs = torch.cat([feats[i, : lens[i]] for i in range(len(idx))]).double().numpy()
        K = self.model.config.codebook_size
        book = fit_kmeans(vecs, K, iters=20, seed=c.seed + step)
        self.model.codebook.copy_(torch.from_numpy(book.codes).to(self.model.codebook.dtype))
        self.model.codebook_ready = True

    def dev_score(self):
        from .evaluation import decode_corpus
        from .metrics import bleu

        hyps = decode_corpus(self.model, self.dev, "ft", text="asr")
        return bleu([s.tgt for s in self.dev], hyps)

    def run_step(self):
        self.step += 1
        step = self.step
        self.maybe_fit_codebook(step)
        _, _, _, ablate = self.phase(step)
        row = train_step(self.model, self.optimizer, self.next_batch(), self.config.weights,
                         self.lr_at(step), ablate, step, self.config.clip_norm)
        self.rows.append(row)
        return row

    def train(self, until=None):
        c = self.config
        until = c.total_steps if until is None else until
        writer = fh = None
        if self.out_dir:
            os.makedirs(self.out_dir, exist_ok=True)
            path = os.path.join(self.out_dir, "metrics.csv")
            new = self.step == 0 or not os.path.exists(path)
            fh = open(path, "w" if new else "a", newline="")
            writer = csv.DictWriter(fh, fieldnames=METRIC_FIELDS)
            if new:
                writer.writeheader()
        try:
            while self.step < until:
                row = self.run_step()
                if writer:
                    writer.writerow({k: repr(v) if isinstance(v, float) else v for k, v in row.items()})
                if self.dev and (self.step % c.eval_every == 0 or self.step == c.total_steps):
                    score = self.dev_score()
                    log.info("step %d dev FT BLEU %.2f", self.step, score)
                    if score > self.best_score:
                        self.best_score, self.best_step = score, self.step
                        if self.out_dir:
                            save_checkpoint(os.path.join(self.out_dir, "checkpoint_best.npz"),
                                            self.model, self.config)
        finally:
            if fh:
                fh.close()
        if self.out_dir:
            self.save(os.path.join(self.out_dir, "checkpoint_last.npz"))
        return TrainResult(self.model, self.rows, self.best_score, self.best_step)


def train(corpus, config, model_config, dev=None, out_dir=None):
    return Trainer(corpus, config, model_config, dev=dev, out_dir=out_dir).train()


def grad_check(loss_fn, params, eps=1e-6, dtype=torch.float64):
    """Max relative error between autograd and central differences.

    ``loss_fn`` maps a 1-D parameter tensor (cast to ``dtype``) to a scalar
    tensor. The error per coordinate is ``|fd - analytic| / max(1, |analytic|)``.
    At 32-bit precision use a larger ``eps`` (around 1e-3).
    """
    if eps <= 0:
        raise ValueError("eps must be > 0")
    w = params.detach().clone().to(dtype).requires_grad_(True)
    f0 = loss_fn(w)
    if not torch.isfinite(f0):
        raise ValueError("loss is not finite at the check point")
    (analytic,) = torch.autograd.grad(f0, w, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(w)
    worst = 0.0
    with torch.no_grad():
        for i in range(w.numel()):
            wp = w.detach().clone()
            wp[i] += eps
            fp = float(loss_fn(wp))
            wp[i] -= 2 * eps
            fm = float(loss_fn(wp))
            if not (math.isfinite(fp) and math.isfinite(fm)):
                raise ValueError(f"non-finite loss while perturbing coordinate {i}")
            fd = (fp - fm) / (2 * eps)
            a = float(analytic[i])
            worst = max(worst, abs(fd - a) / max(1.0, abs(a)))
    return worst


def config_to_json(model_config, train_config):
    d = model_config.to_dict()
    d.update(train_config.to_dict())
    return json.dumps(d, sort_keys=True)
