import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from fstlab.checkpoint import Checkpoint, save_checkpoint
from fstlab.model import (
    BOS, EOS, N_SPECIAL, TAG_ASR, TAG_GOLDEN, TAG_SPEECH, TAG_TEXT, FSTModel, ModelConfig,
    conv_out_len, ids_to_src, ids_to_tgt, make_batch, speech_len, src_ids, tgt_ids,
)
from fstlab.synthdata import ASR, GOLDEN

from conftest import tiny_config


def closed_form(T):
    ell = lambda L: (L + 2 * 2 - 5) // 2 + 1  # noqa: E731
    return ell(ell(T))


def test_config_invariants():
    c = ModelConfig()
    assert c.downsample == 4
    assert c.n_vocab == 4 + 2 * 32
    with pytest.raises(ValueError):
        ModelConfig(hidden=10, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(quantizer="pq")
    assert ModelConfig.from_dict(c.to_dict()) == c


def test_id_ranges_disjoint():
    V = 8
    s, t = src_ids(range(V), V), tgt_ids(range(V), V)
    assert min(s) == N_SPECIAL and max(s) < min(t) and max(t) == N_SPECIAL + 2 * V - 1
    assert ids_to_tgt(t + [EOS], V) == list(range(V))
    assert ids_to_src(s + [BOS], V) == list(range(V))


@pytest.mark.parametrize("T,want", [(100, 25), (1, 1), (7, 2)])
def test_conv_length_examples(tiny_model, T, want):
    a = tiny_model.speech_encode(torch.zeros(T, 4, dtype=torch.float64))
    assert a.shape == (want, 16)
    assert speech_len(T, tiny_model.config) == want


def test_conv_length_law_exhaustive(tiny_model):
    for T in range(1, 501):
        assert speech_len(T, tiny_model.config) == closed_form(T)
        assert conv_out_len(conv_out_len(T)) == closed_form(T)
    frames = torch.randn(3, 500, 4, dtype=torch.float64)
    for T in (1, 2, 3, 4, 5, 9, 63, 257, 500):
        a = tiny_model.speech_encode(frames[0, :T])
        assert len(a) == closed_form(T)


def test_speech_encode_rejects_empty(tiny_model):
    with pytest.raises(ValueError):
        tiny_model.speech_encode(torch.zeros(0, 4, dtype=torch.float64))


def test_padded_speech_matches_unpadded(tiny_model):
    x = torch.randn(13, 4, dtype=torch.float64)
    single = tiny_model.speech_encode(x)
    batch = torch.zeros(2, 30, 4, dtype=torch.float64)
    batch[0, :13] = x
    batch[1] = torch.randn(30, 4)
    a, lens = tiny_model.speech_encode(batch, torch.tensor([13, 30]))
    assert int(lens[0]) == len(single)
    assert torch.allclose(a[0, : len(single)], single, atol=1e-12)


def test_embed_text_positions(tiny_model):
    ids = torch.tensor([5, 5, 5])
    e = tiny_model.embed_text(ids)
    assert not torch.equal(e[0], e[1])
    torch.manual_seed(0)
    flat = FSTModel(tiny_config(positional=False)).double().eval()
    e = flat.embed_text(ids)
    assert torch.equal(e[0], e[1]) and torch.equal(e[1], e[2])


def test_embed_text_row_locality(tiny_model):
    a = tiny_model.embed_text(torch.tensor([5, 6, 7]))
    b = tiny_model.embed_text(torch.tensor([5, 9, 7]))
    assert torch.equal(a[0], b[0]) and torch.equal(a[2], b[2])
    assert not torch.equal(a[1], b[1])


def test_embed_text_errors_and_determinism(tiny_model):
    with pytest.raises(ValueError):
        tiny_model.embed_text(torch.tensor([], dtype=torch.long))
    with pytest.raises(ValueError):
        tiny_model.embed_text(torch.tensor([tiny_model.config.n_vocab]))
    ids = torch.tensor([4, 7, 9])
    assert torch.equal(tiny_model.embed_text(ids), tiny_model.embed_text(ids))


def test_fuse_layout(tiny_model):
    a = torch.randn(25, 16, dtype=torch.float64)
    e = torch.randn(10, 16, dtype=torch.float64)
    fg = tiny_model.fuse(a, e, GOLDEN)
    fa = tiny_model.fuse(a, e, ASR)
    assert fg.shape == (38, 16)
    assert torch.equal(fg[1:26], a)
    rows_differ = (fg != fa).any(1).nonzero().flatten().tolist()
    assert rows_differ == [27]
    tags = tiny_model.tags.detach()
    assert torch.equal(fg[27], tags[TAG_GOLDEN]) and torch.equal(fa[27], tags[TAG_ASR])


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 12), st.integers(1, 12), st.sampled_from([GOLDEN, ASR]), st.integers(0, 1000))
def test_fuse_slices_recover_parts(la, le, kind, seed):
    torch.manual_seed(0)
    model = FSTModel(tiny_config()).double()
    g = torch.Generator().manual_seed(seed)
    a = torch.randn(la, 16, generator=g, dtype=torch.float64)
    e = torch.randn(le, 16, generator=g, dtype=torch.float64)
    f = model.fuse(a, e, kind)
    tags = model.tags.detach()
    assert len(f) == la + le + 3
    assert torch.equal(f[0], tags[TAG_SPEECH])
    assert torch.equal(f[1:1 + la], a)
    assert torch.equal(f[1 + la], tags[TAG_TEXT])
    assert torch.equal(f[2 + la], tags[TAG_ASR if kind == ASR else TAG_GOLDEN])
    assert torch.equal(f[3 + la:], e)


def test_fuse_rejects_empty(tiny_model):
    with pytest.raises(ValueError):
        tiny_model.fuse(torch.zeros(0, 16), torch.zeros(2, 16), GOLDEN)


def test_fuse_batch_matches_single(tiny_model):
    a = torch.randn(2, 6, 16, dtype=torch.float64)
    e = torch.randn(2, 4, 16, dtype=torch.float64)
    a_lens, e_lens = torch.tensor([6, 3]), torch.tensor([2, 4])
    f, lens = tiny_model.fuse_batch(a, a_lens, e, e_lens, torch.tensor([TAG_GOLDEN, TAG_ASR]))
    assert lens.tolist() == [11, 10]
    assert torch.equal(f[0, :11], tiny_model.fuse(a[0], e[0, :2], GOLDEN))
    assert torch.equal(f[1, :10], tiny_model.fuse(a[1, :3], e[1], ASR))


def test_encode_contract(tiny_model):
    x = torch.randn(9, 16, dtype=torch.float64)
    h, weights = tiny_model.encode(x, need_weights=True)
    assert h.shape == x.shape
    for w in weights:
        assert torch.allclose(w.sum(-1), torch.ones_like(w.sum(-1)), atol=1e-5)
    assert not torch.allclose(h, tiny_model.encode(torch.randn(9, 16, dtype=torch.float64)))
    assert torch.equal(h, tiny_model.encode(x))
    with pytest.raises(ValueError):
        tiny_model.encode(torch.zeros(0, 16, dtype=torch.float64))


def test_encode_ignores_padding(tiny_model):
    x = torch.randn(5, 16, dtype=torch.float64)
    padded = torch.cat([x, torch.randn(3, 16, dtype=torch.float64)])[None]
    h = tiny_model.encode(padded, torch.tensor([5]))[0, :5]
    assert torch.allclose(h, tiny_model.encode(x), atol=1e-12)


def test_decode_bos_only(tiny_model):
    mem = torch.randn(4, 16, dtype=torch.float64)
    logits = tiny_model.decode(mem, None, torch.tensor([BOS]))
    assert logits.shape == (1, tiny_model.config.n_vocab)
    assert torch.allclose(torch.softmax(logits, -1).sum(-1), torch.ones(1, dtype=torch.float64), atol=1e-5)
    with pytest.raises(ValueError):
        tiny_model.decode(torch.zeros(0, 16, dtype=torch.float64), None, torch.tensor([BOS]))


@settings(max_examples=60, deadline=None)
@given(st.lists(st.integers(4, 19), min_size=2, max_size=10), st.data())
def test_decode_causal(prefix, data):
    torch.manual_seed(0)
    model = FSTModel(tiny_config()).double().eval()
    mem = torch.randn(5, 16, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    ids = torch.tensor([BOS] + prefix)
    i = data.draw(st.integers(1, len(ids) - 1))
    edited = ids.clone()
    edited[i:] = torch.tensor(data.draw(st.lists(st.integers(4, 19), min_size=len(ids) - i,
                                                 max_size=len(ids) - i)))
    a, b = model.decode(mem, None, ids), model.decode(mem, None, edited)
    assert torch.equal(a[:i], b[:i])


def _sample(corpus, kind):
    return next(s for s in corpus if s.transcript_kind == kind and s.src_asr != s.src_golden) \
        if kind == ASR else next(s for s in corpus if s.transcript_kind == kind)


def test_make_batch_text_source(corpus):
    s = _sample(corpus, ASR)
    V = 8
    b = make_batch([s], V)
    assert b.text[0, : b.text_lens[0] - 1].tolist() == src_ids(s.src_asr, V)
    assert b.text[0, b.text_lens[0] - 1] == EOS
    assert b.kinds.tolist() == [TAG_ASR]
    assert b.asr_out[0, : len(s.src_golden)].tolist() == src_ids(s.src_golden, V)
    g = make_batch([s], V, text_source="golden")
    assert g.text[0, :-1].tolist() == src_ids(s.src_golden, V) and g.kinds.tolist() == [TAG_GOLDEN]
    forced = make_batch([s], V, text_source="golden", tag=ASR)
    assert forced.kinds.tolist() == [TAG_ASR]
    with pytest.raises(ValueError):
        make_batch([], V)
    with pytest.raises(ValueError):
        make_batch([s], V, text_source="oracle")


def test_forward_shapes(tiny_model, corpus):
    batch = make_batch(corpus[:4], 8)
    out = tiny_model(batch)
    B, Ly, Lx = 4, batch.tgt_in.shape[1], batch.asr_in.shape[1]
    n = tiny_model.config.n_vocab
    for lg in (out.logits_st, out.logits_mt, out.logits_ft):
        assert lg.shape == (B, Ly, n)
    assert out.logits_asr.shape == (B, Lx, n)
    for i, s in enumerate(corpus[:4]):
        assert int(out.tgt_mask[i].sum()) == len(s.tgt) + 1
        assert int(out.asr_mask[i].sum()) == len(s.src_golden) + 1
        assert int(out.f_lens[i]) == int(out.a_lens[i]) + int(out.e_lens[i]) + 3


def test_forward_golden_mt_ft_same_text(tiny_model, corpus):
    s = _sample(corpus, GOLDEN)
    assert s.src_asr == s.src_golden
    out = tiny_model(make_batch([s], 8))
    La = int(out.a_lens[0])
    assert torch.equal(out.f[0, La + 3:int(out.f_lens[0])], out.e[0, : int(out.e_lens[0])])


def test_forward_deterministic_in_eval(tiny_model, corpus):
    batch = make_batch(corpus[:3], 8)
    a, b = tiny_model(batch), tiny_model(batch)
    assert torch.equal(a.logits_ft, b.logits_ft) and torch.equal(a.logits_asr, b.logits_asr)


def test_batched_forward_matches_single(tiny_model, corpus):
    out = tiny_model(make_batch(corpus[:5], 8))
    for i, s in enumerate(corpus[:5]):
        one = tiny_model(make_batch([s], 8))
        Ly = len(s.tgt) + 1
        assert torch.allclose(out.logits_st[i, :Ly], one.logits_st[0], atol=1e-10)
        assert torch.allclose(out.logits_ft[i, :Ly], one.logits_ft[0], atol=1e-10)
        Lx = len(s.src_golden) + 1
        assert torch.allclose(out.logits_asr[i, :Lx], one.logits_asr[0], atol=1e-10)


@pytest.mark.parametrize("asr_decoder", ["separate", "shared"])
def test_parameter_sharing_and_tags(asr_decoder, corpus):
    """Every pass reaches the one shared encoder; translation passes share a decoder; all four tags train."""
    torch.manual_seed(0)
    model = FSTModel(tiny_config(asr_decoder=asr_decoder)).double()
    batch = make_batch(corpus[:6], 8)
    enc, dec = model.encoder[0].attn.q.weight, model.decoder[0].cross_attn.k.weight
    for name in ("logits_st", "logits_mt", "logits_ft", "logits_asr"):
        model.zero_grad()
        getattr(model(batch), name).sum().backward()
        assert enc.grad is not None and enc.grad.abs().sum() > 0, name
        reaches_dec = dec.grad is not None and dec.grad.abs().sum() > 0
        assert reaches_dec == (name != "logits_asr" or asr_decoder == "shared"), name
        if asr_decoder == "separate":
            asr_k = model.asr_layers[0].cross_attn.k.weight.grad
            assert (asr_k is not None and asr_k.abs().sum() > 0) == (name == "logits_asr"), name
    model.zero_grad()
    model(batch).logits_ft.pow(2).sum().backward()
    assert (model.tags.grad.abs().sum(1) > 0).all()
    ids = {id(p) for p in model.parameters()}
    assert len(ids) == len(list(model.parameters()))


@pytest.mark.parametrize("tie", [True, False])
def test_output_projection_tying(tie, corpus):
    torch.manual_seed(0)
    model = FSTModel(tiny_config(tie_embeddings=tie)).double()
    assert hasattr(model, "out_proj") != tie
    model(make_batch(corpus[:3], 8)).logits_mt.sum().backward()
    assert model.embed.weight.grad.abs().sum() > 0
    if not tie:
        assert model.out_proj.weight.grad.abs().sum() > 0


def test_asr_decoder_validated():
    with pytest.raises(ValueError):
        tiny_config(asr_decoder="ctc")


@pytest.mark.parametrize("quantizer", ["kmeans", "gumbel"])
def test_quantizer_drop_in(quantizer, corpus):
    torch.manual_seed(0)
    base = FSTModel(tiny_config()).double().eval()
    torch.manual_seed(0)
    q = FSTModel(tiny_config(quantizer=quantizer)).double().eval()
    if quantizer == "kmeans":
        q.codebook.copy_(torch.randn(8, 16))
        q.codebook_ready = True
    batch = make_batch(corpus[:4], 8)
    a, b = base(batch), q(batch)
    for name in ("logits_st", "logits_mt", "logits_ft", "logits_asr", "f"):
        assert getattr(a, name).shape == getattr(b, name).shape
    # only the fused pass sees quantized speech
    assert torch.equal(a.logits_mt, b.logits_mt)
    assert not torch.equal(a.logits_ft, b.logits_ft)


@pytest.mark.parametrize("dtype", [torch.float32, torch.float64])
def test_checkpoint_round_trip(tmp_path, corpus, dtype):
    torch.manual_seed(3)
    model = FSTModel(tiny_config(quantizer="kmeans")).to(dtype).eval()
    model.codebook.copy_(torch.randn(8, 16))
    model.codebook_ready = True
    path = tmp_path / "m.npz"
    save_checkpoint(path, model)
    ck = Checkpoint(path)
    assert ck.model_config == model.config
    for (k, v), (k2, v2) in zip(model.state_dict().items(), ck.model.state_dict().items()):
        assert k == k2 and v.dtype == v2.dtype and torch.equal(v, v2)
    assert ck.model.codebook_ready
    batch = make_batch(corpus[:2], 8, dtype)
    assert torch.equal(model(batch).logits_ft, ck.model(batch).logits_ft)
    save_checkpoint(tmp_path / "again.npz", ck.model)
    z1, z2 = np.load(path), np.load(tmp_path / "again.npz")
    assert sorted(z1.files) == sorted(z2.files)
    for k in z1.files:
        assert np.array_equal(z1[k], z2[k])


def test_checkpoint_rejects_foreign_file(tmp_path):
    path = tmp_path / "x.npz"
    np.savez(path, a=np.zeros(2))
    with pytest.raises(ValueError):
        Checkpoint(path)
