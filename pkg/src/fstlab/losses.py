"""Training objective: four cross-entropies plus CTR, CAR, KD and JSD terms.

Every function accepts a single sample (``L x V`` logits, ``L x d``
representations) or a padded batch with a validity mask / lengths. Sequence
terms are averaged over valid positions per sample, then over the batch.
"""
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F

TERMS = ("st", "mt", "ft", "asr", "ctr", "car", "kd", "jsd")


@dataclass
class LossWeights:
    alpha: float = 0.8
    beta: float = 1.0
    gamma: float = 0.02
    delta: float = 1.0
    tau: float = 0.02
    label_smoothing: float = 0.1

    def __post_init__(self):
        vals = asdict(self)
        if any(not math.isfinite(v) or v < 0 for v in vals.values()):
            raise ValueError(f"loss weights must be finite and >= 0: {vals}")
        if not 0 <= self.alpha <= 1:
            raise ValueError(f"alpha must lie in [0, 1], got {self.alpha}")
        if self.tau <= 0:
            raise ValueError(f"tau must be > 0, got {self.tau}")
        if not 0 <= self.label_smoothing < 1:
            raise ValueError(f"label smoothing must lie in [0, 1), got {self.label_smoothing}")

    def coefficients(self):
        a = self.alpha
        return {"st": a, "mt": a, "ft": 1.0, "asr": 1.0, "ctr": self.beta,
                "car": self.gamma, "kd": 1.0 - a, "jsd": self.delta}


@dataclass
class LossBreakdown:
    st: torch.Tensor
    mt: torch.Tensor
    ft: torch.Tensor
    asr: torch.Tensor
    ctr: torch.Tensor
    car: torch.Tensor
    kd: torch.Tensor
    jsd: torch.Tensor
    total: torch.Tensor

    def terms(self):
        return {t: getattr(self, t) for t in TERMS}

    def as_floats(self):
        return {k: float(getattr(self, k).detach()) for k in TERMS + ("total",)}


def combine(terms, weights):
    coef = weights.coefficients()
    return sum(coef[t] * terms[t] for t in TERMS)


def _as_batch(x, mask):
    """Promote a single-sample tensor to a batch of one with a full mask."""
    if mask is None:
        if x.dim() == 2:
            x = x[None]
        mask = torch.ones(x.shape[:2], dtype=torch.bool)
    return x, mask


def _masked_mean(per_pos, mask):
    m = mask.to(per_pos.dtype)
    per_sample = (per_pos * m).sum(1) / m.sum(1)
    return per_sample.mean()


def ce_loss(logits, targets, label_smoothing=0.0, mask=None):
    """Smoothed cross-entropy; ``label_smoothing`` spread over the other V-1 classes."""
    if logits.shape[:-1] != targets.shape:
        raise ValueError(f"logits {tuple(logits.shape)} do not match targets {tuple(targets.shape)}")
    if not 0 <= label_smoothing < 1:
        raise ValueError("label smoothing must lie in [0, 1)")
    logits, mask = _as_batch(logits, mask)
    targets = targets.view(logits.shape[:2])
    logp = F.log_softmax(logits, dim=-1)
    nll = -logp.gather(-1, targets[..., None]).squeeze(-1)
    if label_smoothing > 0:
        V = logits.shape[-1]
        rest = -(logp.sum(-1)) - nll
        per_pos = (1 - label_smoothing) * nll + label_smoothing / (V - 1) * rest
    else:
        per_pos = nll
    return _masked_mean(per_pos, mask)


def mean_pool(x, lens=None):
    if lens is None:
        return x.mean(dim=-2)
    m = (torch.arange(x.shape[1])[None, :] < lens[:, None]).to(x.dtype)
    return (x * m[..., None]).sum(1) / lens[:, None].to(x.dtype)


def ctr_loss(u, v, tau):
    """In-batch N-pair contrastive loss on pooled speech ``u`` / text ``v`` (B x d)."""
    B = u.shape[0]
    if B < 2:
        raise ValueError("contrastive loss needs a batch of at least 2")
    if tau <= 0:
        raise ValueError("tau must be > 0")
    nu, nv = u.norm(dim=-1), v.norm(dim=-1)
    if bool((nu == 0).any()) or bool((nv == 0).any()):
        raise ValueError("zero-norm pooled vector")
    sim = (u / nu[:, None]) @ (v / nv[:, None]).T
    return F.cross_entropy(sim / tau, torch.arange(B))


def stop_gradient(x):
    """The single detach point used for the KD teacher and the CAR target."""
    return x.detach()


def _unit_rows(x, mask):
    n = x.norm(dim=-1)
    if bool(((n == 0) & mask).any()):
        raise ValueError("zero-norm row in CAR input")
    n = torch.where(mask, n, torch.ones_like(n))
    return x / n[..., None]


def _row_softmax_project(sim, key_mask, values):
    sim = sim.masked_fill(~key_mask[:, None, :], float("-inf"))
    return torch.softmax(sim, dim=-1) @ values


def car_pair(X, Y, x_lens=None, y_lens=None):
    """Cross-attentive regularizer between sequences ``X`` (m x d) and ``Y`` (n x d).

    ``Y`` is projected onto ``X``'s length with a row-softmax of cosine
    similarities and compared (mean squared error) to ``X``'s own
    self-projection, which is held constant.
    """
    if X.shape[-1] != Y.shape[-1]:
        raise ValueError("CAR inputs must share the feature dimension")
    if X.dim() == 2:
        if len(X) == 0 or len(Y) == 0:
            raise ValueError("CAR inputs must be non-empty")
        X, Y = X[None], Y[None]
        x_lens = torch.tensor([X.shape[1]])
        y_lens = torch.tensor([Y.shape[1]])
    xm = torch.arange(X.shape[1])[None, :] < x_lens[:, None]
    ym = torch.arange(Y.shape[1])[None, :] < y_lens[:, None]
    xu, yu = _unit_rows(X, xm), _unit_rows(Y, ym)
    cross = _row_softmax_project(xu @ yu.transpose(1, 2), ym, Y)
    target = stop_gradient(_row_softmax_project(xu @ xu.transpose(1, 2), xm, X))
    sq = ((target - cross) ** 2).mean(-1)
    return _masked_mean(sq, xm)


def car_loss(a, e, f, a_lens=None, e_lens=None, f_lens=None):
    return car_pair(a, f, a_lens, f_lens) + car_pair(e, f, e_lens, f_lens)


def kd_loss(student_logits, teacher_logits, mask=None):
    """Full-vocabulary cross-entropy from the (detached) teacher distribution."""
    if student_logits.shape != teacher_logits.shape:
        raise ValueError("student and teacher logits differ in shape")
    student_logits, mask = _as_batch(student_logits, mask)
    teacher_logits = teacher_logits.view(student_logits.shape)
    q = torch.softmax(stop_gradient(teacher_logits), dim=-1)
    per_pos = -(q * F.log_softmax(student_logits, dim=-1)).sum(-1)
    return _masked_mean(per_pos, mask)


def _kl_terms(logp, logm):
    # 0 * log 0 = 0 for classes with exactly zero probability
    t = logp.exp() * (logp - logm)
    return torch.where(torch.isneginf(logp), torch.zeros_like(t), t)


def jsd_loss(p_logits, q_logits, mask=None):
    """Jensen-Shannon divergence between the two softmax distributions (nats)."""
    if p_logits.shape != q_logits.shape:
        raise ValueError("JSD inputs differ in shape")
    p_logits, mask = _as_batch(p_logits, mask)
    q_logits = q_logits.view(p_logits.shape)
    logp = F.log_softmax(p_logits, dim=-1)
    logq = F.log_softmax(q_logits, dim=-1)
    logm = torch.logaddexp(logp, logq) - math.log(2.0)
    kl_pm = _kl_terms(logp, logm).sum(-1)
    kl_qm = _kl_terms(logq, logm).sum(-1)
    # rounding can overshoot the ln 2 bound by an ulp on near-disjoint rows
    per_pos = (0.5 * kl_pm + 0.5 * kl_qm).clamp(0.0, math.log(2.0))
    return _masked_mean(per_pos, mask)


def total_loss(out, batch, weights, ablate=frozenset()):
    """Weighted sum of all enabled terms; ablated terms are exactly 0 and never computed.

    ``out`` is a :class:`~fstlab.model.MultitaskOutputs`, ``batch`` the
    :class:`~fstlab.model.Batch` it came from.
    """
    unknown = set(ablate) - set(TERMS)
    if unknown:
        raise ValueError(f"unknown loss terms {sorted(unknown)}")
    eps = weights.label_smoothing
    tm = out.tgt_mask
    zero = out.logits_ft.new_zeros(())
    compute = {
        "st": lambda: ce_loss(out.logits_st, batch.tgt_out, eps, tm),
        "mt": lambda: ce_loss(out.logits_mt, batch.tgt_out, eps, tm),
        "ft": lambda: ce_loss(out.logits_ft, batch.tgt_out, eps, tm),
        "asr": lambda: ce_loss(out.logits_asr, batch.asr_out, eps, out.asr_mask),
        "ctr": lambda: ctr_loss(mean_pool(out.a, out.a_lens), mean_pool(out.e, out.e_lens), weights.tau),
        "car": lambda: car_loss(out.h_a, out.h_e, out.h_f, out.a_lens, out.e_lens, out.f_lens),
        "kd": lambda: kd_loss(out.logits_st, out.logits_ft, tm) + kd_loss(out.logits_mt, out.logits_ft, tm),
        "jsd": lambda: jsd_loss(out.logits_st, out.logits_ft, tm) + jsd_loss(out.logits_mt, out.logits_ft, tm),
    }
    terms = {t: (zero if t in ablate else compute[t]()) for t in TERMS}
    return LossBreakdown(**terms, total=combine(terms, weights))
