import numpy as np
import pytest
import torch

from speechsem.lm import (
    AdapterConfig,
    DenoiseConfig,
    DenoisingLM,
    add_adapters,
    adapter_param_count,
    corrupt,
    encode,
    encode_many,
    evaluate_lm,
    frame_token_index,
    pretrain_lm,
    special_ids,
    unigram_perplexity,
    upsample,
)
from speechsem.numerics import parameter_hashes

SMALL = DenoiseConfig(d_model=32, d_ff=64, heads=4, layers=2, epochs=3, batch_size=8)


def _sentences(n, seed=0, vocab=12):
    rng = np.random.default_rng(seed)
    return [list(map(int, rng.integers(vocab, size=int(rng.integers(3, 7))))) for _ in range(n)]


@pytest.fixture(scope="module")
def model():
    torch.manual_seed(0)
    return DenoisingLM(12, SMALL).eval()


def test_copy_task_learns():
    text = _sentences(20)
    cfg = DenoiseConfig(mask_rate=0, deletion_rate=0, d_model=32, d_ff=64, epochs=60, batch_size=10, lr=3e-3)
    m, _ = pretrain_lm(text, 12, cfg, seed=0)
    assert evaluate_lm(m, text, cfg)["token_accuracy"] > 0.95


def test_perplexity_trend_and_determinism():
    text = _sentences(40, seed=1)
    m1, log1 = pretrain_lm(text, 12, SMALL, seed=3)
    m2, log2 = pretrain_lm(text, 12, SMALL, seed=3)
    assert log1 == log2
    assert parameter_hashes(m1) == parameter_hashes(m2)
    ppl = [r["train_perplexity"] for r in log1]
    assert all(b <= a * 1.05 for a, b in zip(ppl, ppl[1:]))
    assert ppl[-1] < ppl[0]


def test_empty_corpus():
    with pytest.raises(ValueError):
        pretrain_lm([], 12, SMALL)


def test_bad_rates():
    with pytest.raises(ValueError):
        DenoiseConfig(mask_rate=1.0)


def test_corrupt_never_empty_and_masks():
    cfg = DenoiseConfig(mask_rate=0.5, deletion_rate=0.0)
    out = corrupt(list(range(50)), cfg, np.random.default_rng(0), 99)
    assert len(out) == 50 and 10 < out.count(99) < 40
    assert corrupt([1], DenoiseConfig(mask_rate=0, deletion_rate=0.99, span_max=1), np.random.default_rng(1), 99)


def test_encode_shape_and_oov(model):
    seq = encode([1, 2, 3, 4], model)
    assert seq.embeddings.shape == (4, 32) and seq.token_ids == [1, 2, 3, 4]
    with pytest.raises(KeyError):
        encode([model.vocab_size], model)
    assert encode([], model).embeddings.shape == (0, 32)


def test_encode_is_position_sensitive(model):
    with torch.no_grad():
        a = encode([1, 2, 3], model).embeddings
        b = encode([2, 1, 3], model).embeddings
    assert (a - b).abs().sum(1).min() > 0


def test_encode_many_matches_single(model):
    seqs = [[1, 2, 3], [], [4, 5]]
    with torch.no_grad():
        many = encode_many(seqs, model)
        for s, e in zip(seqs, many):
            assert e.shape[0] == len(s)
            if s:
                torch.testing.assert_close(e, encode(s, model).embeddings, atol=1e-5, rtol=0)


def test_adapters_identity_and_freezing():
    torch.manual_seed(1)
    m = DenoisingLM(12, SMALL).eval()
    toks = [3, 1, 4, 1, 5]
    with torch.no_grad():
        base = encode(toks, m).embeddings.clone()
    n_before = sum(p.numel() for p in m.parameters())
    add_adapters(m, AdapterConfig(bottleneck_dim=8))
    with torch.no_grad():
        after = encode(toks, m).embeddings
    assert (after - base).abs().max() <= 1e-6
    n_after = sum(p.numel() for p in m.parameters())
    assert n_after - n_before == adapter_param_count(32, 8, 2)
    trainable = {k for k, p in m.named_parameters() if p.requires_grad}
    assert trainable and all(".adapter." in k for k in trainable)


def test_adapter_count_formula():
    assert adapter_param_count(64, 8, 2) == 2 * (2 * 64 * 8 + 8 + 64 + 2 * 64)


def test_frozen_lm_survives_adapter_training():
    torch.manual_seed(2)
    m = add_adapters(DenoisingLM(12, SMALL))
    start = parameter_hashes(m)
    base = {k: v for k, v in start.items() if ".adapter." not in k}
    opt = torch.optim.SGD([p for p in m.parameters() if p.requires_grad], lr=0.1)
    for _ in range(3):
        opt.zero_grad()
        encode([1, 2, 3], m).embeddings.pow(2).sum().backward()
        opt.step()
    now = parameter_hashes(m)
    assert all(now[k] == h for k, h in base.items())
    assert any(now[k] != start[k] for k in now if ".adapter.up" in k)


def test_pretrained_beats_unigram():
    from speechsem.corpus import build_language, generate_corpus

    spec = build_language(0)
    b = generate_corpus(spec, {"train": 6, "dev": 6, "test": 6, "text_only": 300})
    train, dev = b.unpaired_text[:250], b.unpaired_text[250:]
    cfg = DenoiseConfig(d_model=32, d_ff=64, epochs=6, batch_size=16)
    m, _ = pretrain_lm(train, spec.n_subwords, cfg, seed=0)
    assert evaluate_lm(m, dev, cfg)["perplexity"] < unigram_perplexity(train, dev, spec.n_subwords)


def test_special_ids():
    assert special_ids(20) == {"pad": 20, "bos": 21, "eos": 22, "mask": 23, "sep": 24}


# ---------------------------------------------------------------- upsampling

def test_upsample_single_token():
    e = torch.randn(1, 4)
    out, flag = upsample(e, [0] * 7, 7)
    assert not flag and torch.equal(out, e.expand(7, 4))


def test_upsample_two_blocks():
    e = torch.randn(2, 3)
    out, _ = upsample(e, [0] * 5 + [1] * 5, 10)
    assert torch.equal(out[:5], e[0].expand(5, 3)) and torch.equal(out[5:], e[1].expand(5, 3))


def test_upsample_empty_is_flagged_zero():
    out, flag = upsample(torch.zeros(0, 3), [-1] * 4, 4)
    assert flag and torch.equal(out, torch.zeros(4, 3))


@pytest.mark.parametrize("seed", range(10))
def test_upsample_matches_loop(seed):
    rng = np.random.default_rng(seed)
    n_tok, n_frames = int(rng.integers(1, 5)), int(rng.integers(1, 20))
    align = [int(x) for x in rng.integers(-1, n_tok, size=n_frames)]
    e = torch.randn(n_tok, 3)
    out, _ = upsample(e, align, n_frames)
    prev = 0
    for f in range(n_frames):
        if align[f] >= 0:
            prev = align[f]
        assert torch.equal(out[f], e[prev])
    assert out.shape[0] == n_frames


def test_upsample_without_alignment_spreads_tokens():
    assert frame_token_index(None, 2, 4) == [0, 0, 1, 1]


def test_upsample_rejects_bad_alignment():
    with pytest.raises(ValueError):
        frame_token_index([0, 1], 2, 3)
    with pytest.raises(ValueError):
        frame_token_index([0, 2, 2], 2, 3)
