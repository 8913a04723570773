"""The fused speech-text network.

Speech frames go through a linear frame projection and two strided
convolutions (length shrunk by 4); transcripts through a token embedding.
Both get sinusoidal positions restarted at 0 per segment. The fused input is

    [P_s; a; P_t; P_g; e]

with learned prompt tags and ``P_g`` chosen by transcript quality. One shared
transformer encoder/decoder serves the speech (ST), text (MT), fused (FT) and
recognition (ASR) passes.

Token ids: the model vocabulary holds four specials, then the ``V`` source
tokens, then the ``V`` target tokens (disjoint ranges, one shared table).
"""
import math
from dataclasses import asdict, dataclass, field, fields

import torch
import torch.nn.functional as F
from torch import nn

from .quantize import distance_logits_init, quantize_gumbel, quantize_hard
from .synthdata import ASR, GOLDEN

PAD, BOS, BOS_ASR, EOS = 0, 1, 2, 3
N_SPECIAL = 4

TAG_SPEECH, TAG_TEXT, TAG_GOLDEN, TAG_ASR = range(4)


@dataclass
class ModelConfig:
    vocab_size: int = 32
    frame_dim: int = 8
    hidden: int = 64
    n_enc: int = 2
    n_dec: int = 2
    n_heads: int = 4
    ffn_dim: int = 256
    conv_kernel: int = 5
    conv_stride: int = 2
    conv_padding: int = 2
    conv_layers: int = 2
    dropout: float = 0.15
    positional: bool = True
    quantizer: str = "none"  # none | kmeans | gumbel
    codebook_size: int = 64
    gumbel_temperature: float = 1.0
    asr_decoder: str = "separate"  # separate | shared
    tie_embeddings: bool = False

    def __post_init__(self):
        if self.hidden % self.n_heads:
            raise ValueError(f"hidden {self.hidden} not divisible by n_heads {self.n_heads}")
        if self.quantizer not in ("none", "kmeans", "gumbel"):
            raise ValueError(f"unknown quantizer {self.quantizer!r}")
        if self.asr_decoder not in ("separate", "shared"):
            raise ValueError(f"unknown asr_decoder {self.asr_decoder!r}")
        if self.vocab_size < 1 or self.frame_dim < 1:
            raise ValueError("vocab_size and frame_dim must be positive")

    @property
    def n_vocab(self):
        return N_SPECIAL + 2 * self.vocab_size

    @property
    def downsample(self):
        return self.conv_stride ** self.conv_layers

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def src_ids(tokens, V):
    return [N_SPECIAL + int(t) for t in tokens]


def tgt_ids(tokens, V):
    return [N_SPECIAL + V + int(t) for t in tokens]


def ids_to_tgt(ids, V):
    """Strip model ids back to raw target tokens (non-target ids dropped)."""
    lo = N_SPECIAL + V
    return [int(i) - lo for i in ids if lo <= i < lo + V]


def ids_to_src(ids, V):
    return [int(i) - N_SPECIAL for i in ids if N_SPECIAL <= i < N_SPECIAL + V]


def conv_out_len(n, kernel=5, stride=2, padding=2):
    return (n + 2 * padding - kernel) // stride + 1


def speech_len(n_frames, config):
    for _ in range(config.conv_layers):
        n_frames = conv_out_len(n_frames, config.conv_kernel, config.conv_stride, config.conv_padding)
    return n_frames


def sinusoid_table(max_len, dim):
    pos = torch.arange(max_len, dtype=torch.float64)[:, None]
    i = torch.arange(0, dim, 2, dtype=torch.float64)
    angle = pos / torch.pow(10000.0, i / dim)
    table = torch.zeros(max_len, dim, dtype=torch.float64)
    table[:, 0::2] = torch.sin(angle)
    table[:, 1::2] = torch.cos(angle[:, : dim // 2])
    return table


def lengths_to_mask(lens, max_len):
    """True where a position is padding."""
    return torch.arange(max_len, device=lens.device)[None, :] >= lens[:, None]


def _stack(xs):
    L = max(x.shape[1] for x in xs)
    return torch.cat([F.pad(x, (0, 0, 0, L - x.shape[1])) for x in xs])


def _stack_ids(xs):
    L = max(x.shape[1] for x in xs)
    return torch.cat([F.pad(x, (0, L - x.shape[1]), value=PAD) for x in xs])


class MultiHeadAttention(nn.Module):
    def __init__(self, hidden, n_heads):
        super().__init__()
        self.n_heads = n_heads
        self.head_dim = hidden // n_heads
        self.q = nn.Linear(hidden, hidden)
        self.k = nn.Linear(hidden, hidden)
        self.v = nn.Linear(hidden, hidden)
        self.o = nn.Linear(hidden, hidden)

    def forward(self, x, mem, key_pad=None, causal=False, need_weights=False):
        B, Lq, H = x.shape
        Lk = mem.shape[1]

        def split(t, L):
            return t.view(B, L, self.n_heads, self.head_dim).transpose(1, 2)

        q, k, v = split(self.q(x), Lq), split(self.k(mem), Lk), split(self.v(mem), Lk)
        scores = q @ k.transpose(-1, -2) / math.sqrt(self.head_dim)
        if key_pad is not None:
            scores = scores.masked_fill(key_pad[:, None, None, :], float("-inf"))
        if causal:
            future = torch.ones(Lq, Lk, dtype=torch.bool, device=x.device).triu(1)
            scores = scores.masked_fill(future, float("-inf"))
        probs = torch.softmax(scores, dim=-1)
        out = probs @ v
        out = self.o(out.transpose(1, 2).reshape(B, Lq, H))
        return (out, probs) if need_weights else out


class FeedForward(nn.Module):
    def __init__(self, hidden, ffn_dim):
        super().__init__()
        self.fc1 = nn.Linear(hidden, ffn_dim)
        self.fc2 = nn.Linear(ffn_dim, hidden)

    def forward(self, x):
        return self.fc2(F.gelu(self.fc1(x)))


class EncoderLayer(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.norm1 = nn.LayerNorm(c.hidden)
        self.attn = MultiHeadAttention(c.hidden, c.n_heads)
        self.norm2 = nn.LayerNorm(c.hidden)
        self.ffn = FeedForward(c.hidden, c.ffn_dim)
        self.dropout = c.dropout

    def forward(self, x, pad, need_weights=False):
        attn = self.attn(self.norm1(x), self.norm1(x), key_pad=pad, need_weights=need_weights)
        if need_weights:
            attn, probs = attn
        x = x + F.dropout(attn, self.dropout, self.training)
        x = x + F.dropout(self.ffn(self.norm2(x)), self.dropout, self.training)
        return (x, probs) if need_weights else x


class DecoderLayer(nn.Module):
    def __init__(self, c):
        super().__init__()
        self.norm1 = nn.LayerNorm(c.hidden)
        self.self_attn = MultiHeadAttention(c.hidden, c.n_heads)
        self.norm2 = nn.LayerNorm(c.hidden)
        self.cross_attn = MultiHeadAttention(c.hidden, c.n_heads)
        self.norm3 = nn.LayerNorm(c.hidden)
        self.ffn = FeedForward(c.hidden, c.ffn_dim)
        self.dropout = c.dropout

    def forward(self, y, mem, mem_pad, y_pad):
        h = self.norm1(y)
        y = y + F.dropout(self.self_attn(h, h, key_pad=y_pad, causal=True), self.dropout, self.training)
        y = y + F.dropout(self.cross_attn(self.norm2(y), mem, key_pad=mem_pad), self.dropout, self.training)
        y = y + F.dropout(self.ffn(self.norm3(y)), self.dropout, self.training)
        return y


class GumbelQuantizer(nn.Module):
    """Code-selection logits from a linear map of each row; codes are learned."""

    def __init__(self, hidden, K, temperature):
        super().__init__()
        self.proj = nn.Linear(hidden, K)
        self.codes = nn.Parameter(torch.randn(K, hidden))
        self.temperature = temperature
        distance_logits_init(self.proj, self.codes.detach())

    def forward(self, x):
        return quantize_gumbel(x, self.proj, self.codes, self.temperature, training=self.training)


@dataclass
class Batch:
    """Padded tensors for a list of samples (model ids, not raw tokens)."""

    frames: torch.Tensor
    frame_lens: torch.Tensor
    text: torch.Tensor
    text_lens: torch.Tensor
    kinds: torch.Tensor
    tgt_in: torch.Tensor
    tgt_out: torch.Tensor
    tgt_lens: torch.Tensor
    asr_in: torch.Tensor
    asr_out: torch.Tensor
    asr_lens: torch.Tensor

    @property
    def size(self):
        return self.frames.shape[0]


def _pad(seqs, value=PAD):
    L = max(len(s) for s in seqs)
    return torch.tensor([list(s) + [value] * (L - len(s)) for s in seqs], dtype=torch.long)


def make_batch(samples, V, dtype=torch.float64, text_source="input", tag=None):
    """Collate samples.

    ``text_source`` picks the transcript fed to the text/fused passes:
    ``"input"`` (asr tokens when the sample is asr-kind), ``"golden"`` or
    ``"asr"``. ``tag`` overrides the quality tag (``"golden"``/``"asr"``);
    by default it follows the transcript actually fed.
    """
    if not samples:
        raise ValueError("empty batch")
    frames, texts, kinds, tgt_in, tgt_out, asr_in, asr_out = [], [], [], [], [], [], []
    for s in samples:
        if len(s.frames) == 0:
            raise ValueError("empty frame sequence")
        frames.append(torch.as_tensor(s.frames, dtype=dtype))
        if text_source == "input":
            text, kind = s.src_input, s.transcript_kind
        elif text_source == "golden":
            text, kind = s.src_golden, GOLDEN
        elif text_source == "asr":
            text, kind = s.src_asr, ASR
        else:
            raise ValueError(f"unknown text source {text_source!r}")
        if tag is not None:
            kind = tag
        texts.append(src_ids(text, V) + [EOS])
        kinds.append(TAG_ASR if kind == ASR else TAG_GOLDEN)
        y = tgt_ids(s.tgt, V)
        tgt_in.append([BOS] + y)
        tgt_out.append(y + [EOS])
        x = src_ids(s.src_golden, V)
        asr_in.append([BOS_ASR] + x)
        asr_out.append(x + [EOS])
    T = max(len(f) for f in frames)
    d_f = frames[0].shape[1]
    fr = torch.zeros(len(frames), T, d_f, dtype=dtype)
    for i, f in enumerate(frames):
        fr[i, : len(f)] = f
    lens = lambda seqs: torch.tensor([len(s) for s in seqs], dtype=torch.long)  # noqa: E731
    return Batch(
        frames=fr,
        frame_lens=lens(frames),
        text=_pad(texts),
        text_lens=lens(texts),
        kinds=torch.tensor(kinds, dtype=torch.long),
        tgt_in=_pad(tgt_in),
        tgt_out=_pad(tgt_out),
        tgt_lens=lens(tgt_in),
        asr_in=_pad(asr_in),
        asr_out=_pad(asr_out),
        asr_lens=lens(asr_in),
    )


@dataclass
class MultitaskOutputs:
    """Batched representations and logits; ``*_lens`` give valid lengths.

    ``a``, ``e``, ``f`` are encoder inputs (speech, text, fused);
    ``h_a``, ``h_e``, ``h_f`` the matching shared-encoder states. The
    translation logits have one row per target token plus one for EOS.
    """

    a: torch.Tensor
    a_lens: torch.Tensor
    e: torch.Tensor
    e_lens: torch.Tensor
    f: torch.Tensor
    f_lens: torch.Tensor
    h_a: torch.Tensor
    h_e: torch.Tensor
    h_f: torch.Tensor
    logits_st: torch.Tensor
    logits_mt: torch.Tensor
    logits_ft: torch.Tensor
    logits_asr: torch.Tensor
    tgt_mask: torch.Tensor = field(repr=False)
    asr_mask: torch.Tensor = field(repr=False)


class FSTModel(nn.Module):
    def __init__(self, config):
        super().__init__()
        c = self.config = config
        self.frame_proj = nn.Linear(c.frame_dim, c.hidden)
        self.convs = nn.ModuleList(
            nn.Conv1d(c.hidden, c.hidden, c.conv_kernel, c.conv_stride, c.conv_padding)
            for _ in range(c.conv_layers)
        )
        self.embed = nn.Embedding(c.n_vocab, c.hidden, padding_idx=PAD)
        nn.init.normal_(self.embed.weight, std=c.hidden ** -0.5)
        with torch.no_grad():
            self.embed.weight[PAD].zero_()
        self.tags = nn.Parameter(torch.randn(4, c.hidden))
        self.encoder = nn.ModuleList(EncoderLayer(c) for _ in range(c.n_enc))
        self.enc_norm = nn.LayerNorm(c.hidden)
        self.decoder = nn.ModuleList(DecoderLayer(c) for _ in range(c.n_dec))
        self.dec_norm = nn.LayerNorm(c.hidden)
        if c.asr_decoder == "separate":
            self.asr_layers = nn.ModuleList(DecoderLayer(c) for _ in range(c.n_dec))
            self.asr_dec_norm = nn.LayerNorm(c.hidden)
        if not c.tie_embeddings:
            self.out_proj = nn.Linear(c.hidden, c.n_vocab, bias=False)
            nn.init.normal_(self.out_proj.weight, std=c.hidden ** -0.5)
        self.register_buffer("pos_table", sinusoid_table(1024, c.hidden), persistent=False)
        if c.quantizer == "gumbel":
            self.quantizer = GumbelQuantizer(c.hidden, c.codebook_size, c.gumbel_temperature)
        elif c.quantizer == "kmeans":
            self.register_buffer("codebook", torch.zeros(c.codebook_size, c.hidden))
            self.codebook_ready = False

    # -- building blocks -------------------------------------------------

    def positions(self, L, dtype):
        if not self.config.positional:
            return torch.zeros(L, self.config.hidden, dtype=dtype)
        return self.pos_table[:L].to(dtype)

    def speech_features(self, frames, frame_lens):
        """Frame projection + strided convs, before positions. Returns (x, lens)."""
        if frames.shape[1] == 0 or int(frame_lens.min()) < 1:
            raise ValueError("empty frame sequence")
        c = self.config
        x = self.frame_proj(frames)
        lens = frame_lens
        x = x.masked_fill(lengths_to_mask(lens, x.shape[1])[..., None], 0.0)
        for conv in self.convs:
            x = F.gelu(conv(x.transpose(1, 2))).transpose(1, 2)
            lens = conv_out_len(lens, c.conv_kernel, c.conv_stride, c.conv_padding)
            x = x.masked_fill(lengths_to_mask(lens, x.shape[1])[..., None], 0.0)
        return x, lens

    def add_positions(self, x, lens):
        x = x + self.positions(x.shape[1], x.dtype)[None]
        return x.masked_fill(lengths_to_mask(lens, x.shape[1])[..., None], 0.0)

    def speech_encode(self, frames, frame_lens=None):
        """Speech representation ``a``. Accepts a single T x d_f sequence or a padded batch."""
        single = frames.dim() == 2
        if single:
            if frames.shape[0] == 0:
                raise ValueError("empty frame sequence")
            frames = frames[None]
            frame_lens = torch.tensor([frames.shape[1]])
        x, lens = self.speech_features(frames, frame_lens)
        a = self.add_positions(x, lens)
        return a[0] if single else (a, lens)

    def embed_text(self, ids, lens=None):
        """Transcript representation ``e`` from model ids (single 1-D or padded batch)."""
        single = ids.dim() == 1
        if single:
            if ids.numel() == 0:
                raise ValueError("empty token sequence")
            ids = ids[None]
            lens = torch.tensor([ids.shape[1]])
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.config.n_vocab):
            raise ValueError("token id outside the model vocabulary")
        if int(lens.min()) < 1:
            raise ValueError("empty token sequence")
        x = self.embed(ids) * math.sqrt(self.config.hidden)
        e = self.add_positions(x, lens)
        return e[0] if single else (e, lens)

    def fuse(self, a, e, kind):
        """``[P_s; a; P_t; P_g(kind); e]`` for one sample (``kind`` is golden/asr)."""
        if len(a) == 0 or len(e) == 0:
            raise ValueError("fuse needs non-empty speech and text representations")
        g = TAG_ASR if kind == ASR else TAG_GOLDEN
        t = self.tags.to(a.dtype)
        return torch.cat([t[TAG_SPEECH:TAG_SPEECH + 1], a, t[TAG_TEXT:TAG_TEXT + 1], t[g:g + 1], e], dim=0)

    def fuse_batch(self, a, a_lens, e, e_lens, kinds):
        t = self.tags.to(a.dtype)
        rows = [
            torch.cat([t[TAG_SPEECH:TAG_SPEECH + 1], a[i, : a_lens[i]], t[TAG_TEXT:TAG_TEXT + 1],
                       t[kinds[i]:kinds[i] + 1], e[i, : e_lens[i]]], dim=0)
            for i in range(a.shape[0])
        ]
        lens = a_lens + e_lens + 3
        f = nn.utils.rnn.pad_sequence(rows, batch_first=True)
        return f, lens

    def encode(self, x, lens=None, need_weights=False):
        """Shared transformer encoder; length preserving."""
        single = x.dim() == 2
        if single:
            x = x[None]
            lens = torch.tensor([x.shape[1]])
        if x.shape[1] == 0:
            raise ValueError("empty encoder input")
        pad = lengths_to_mask(lens, x.shape[1])
        h = F.dropout(x, self.config.dropout, self.training)
        weights = []
        for layer in self.encoder:
            if need_weights:
                h, w = layer(h, pad, need_weights=True)
                weights.append(w)
            else:
                h = layer(h, pad)
        h = self.enc_norm(h)
        if single:
            h = h[0]
            weights = [w[0] for w in weights]
        return (h, weights) if need_weights else h

    def decode(self, memory, mem_lens, prefix, prefix_lens=None, asr=False):
        """Causal decoder logits over the full model vocabulary.

        ``memory``: B x L x H (or L x H); ``prefix``: B x P model ids (or P).
        ``asr=True`` runs the transcript decoder, which is the translation
        decoder itself when ``asr_decoder == "shared"``.
        """
        single = memory.dim() == 2
        if single:
            memory, prefix = memory[None], prefix[None]
            mem_lens = torch.tensor([memory.shape[1]])
        if memory.shape[1] == 0:
            raise ValueError("empty encoder memory")
        if prefix_lens is None:
            prefix_lens = torch.full((prefix.shape[0],), prefix.shape[1], dtype=torch.long)
        layers, norm = self.decoder, self.dec_norm
        if asr and self.config.asr_decoder == "separate":
            layers, norm = self.asr_layers, self.asr_dec_norm
        mem_pad = lengths_to_mask(mem_lens, memory.shape[1])
        y_pad = lengths_to_mask(prefix_lens, prefix.shape[1])
        y = self.embed(prefix) * math.sqrt(self.config.hidden)
        y = y + self.positions(prefix.shape[1], y.dtype)[None]
        y = F.dropout(y, self.config.dropout, self.training)
        for layer in layers:
            y = layer(y, memory, mem_pad, y_pad)
        w = self.embed.weight if self.config.tie_embeddings else self.out_proj.weight
        logits = norm(y) @ w.T
        return logits[0] if single else logits

    # -- quantization hook ------------------------------------------------

    def quantize_speech(self, x):
        c = self.config
        if c.quantizer == "gumbel":
            return self.quantizer(x)
        if c.quantizer == "kmeans" and self.codebook_ready:
            from .quantize import quantize_hard

            return quantize_hard(x, self.codebook)
        return x

    # -- full passes --------------------------------------------------------

    def forward(self, batch):
        return self.forward_multitask(batch)

    def forward_multitask(self, batch):
        """ST, MT, FT and ASR passes for a collated batch through shared weights.

        The speech, text and fused sequences are encoded separately. The three
        translation passes share one stacked 3B decoder batch, kept independent
        by padding; the ASR pass joins that stack only when the transcript
        decoder is shared.
        """
        B = batch.size
        feats, a_lens = self.speech_features(batch.frames, batch.frame_lens)
        a = self.add_positions(feats, a_lens)
        e, e_lens = self.embed_text(batch.text, batch.text_lens)
        if self.config.quantizer != "none":
            a_fuse = self.add_positions(self.quantize_speech(feats), a_lens)
        else:
            a_fuse = a
        f, f_lens = self.fuse_batch(a_fuse, a_lens, e, e_lens, batch.kinds)
        h_a = self.encode(a, a_lens)
        h_e = self.encode(e, e_lens)
        h_f = self.encode(f, f_lens)

        Ly, Lx = batch.tgt_in.shape[1], batch.asr_in.shape[1]
        if self.config.asr_decoder == "shared":
            mem = _stack([h_a, h_e, h_f, h_a])
            mem_lens = torch.cat([a_lens, e_lens, f_lens, a_lens])
            prefix = _stack_ids([batch.tgt_in] * 3 + [batch.asr_in])
            prefix_lens = torch.cat([batch.tgt_lens] * 3 + [batch.asr_lens])
            logits = self.decode(mem, mem_lens, prefix, prefix_lens)
            logits_asr = logits[3 * B:, :Lx]
        else:
            mem = _stack([h_a, h_e, h_f])
            mem_lens = torch.cat([a_lens, e_lens, f_lens])
            logits = self.decode(mem, mem_lens, torch.cat([batch.tgt_in] * 3), torch.cat([batch.tgt_lens] * 3))
            logits_asr = self.decode(h_a, a_lens, batch.asr_in, batch.asr_lens, asr=True)
        return MultitaskOutputs(
            a=a, a_lens=a_lens, e=e, e_lens=e_lens, f=f, f_lens=f_lens,
            h_a=h_a, h_e=h_e, h_f=h_f,
            logits_st=logits[:B, :Ly], logits_mt=logits[B:2 * B, :Ly],
            logits_ft=logits[2 * B:3 * B, :Ly], logits_asr=logits_asr,
            tgt_mask=~lengths_to_mask(batch.tgt_lens, Ly),
            asr_mask=~lengths_to_mask(batch.asr_lens, Lx),
        )

    def memory_for(self, batch, mode):
        """Encoder memory for inference in ``mode`` (st | mt | ft)."""
        if mode == "st":
            a, lens = self.speech_encode(batch.frames, batch.frame_lens)
            return self.encode(a, lens), lens
        if mode == "mt":
            e, lens = self.embed_text(batch.text, batch.text_lens)
            return self.encode(e, lens), lens
        if mode == "ft":
            feats, a_lens = self.speech_features(batch.frames, batch.frame_lens)
            e, e_lens = self.embed_text(batch.text, batch.text_lens)
            a = self.add_positions(self.quantize_speech(feats), a_lens)
            f, lens = self.fuse_batch(a, a_lens, e, e_lens, batch.kinds)
            return self.encode(f, lens), lens
        raise ValueError(f"unknown mode {mode!r}")
