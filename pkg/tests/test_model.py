import itertools
import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from qada.corpus import GenConfig, QaExample, generate_domain_pair, make_example
from qada.model import (
    ContractError,
    DecodeError,
    ModelConfig,
    build_model,
    decode_span,
    encode_examples,
    load_checkpoint,
    save_checkpoint,
    span_ce,
    state_fingerprint,
)
from qada.numerics import Rng, module_gradient_check


@pytest.fixture(scope="module")
def data():
    pair = generate_domain_pair(GenConfig(n_source=8, n_target=8), Rng(0))
    examples = [make_example(r, pair.vocab) for r in pair.source[:4] + pair.target[:4]]
    return pair.vocab, examples


def tiny(vocab_size, **kw):
    cfg = dict(d_model=16, n_layers=2, n_heads=2, d_ff=32, dropout=0.0)
    cfg.update(kw)
    return build_model(ModelConfig(vocab_size, **cfg), seed=0, dtype=torch.float64)


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(10, d_model=10, n_heads=4)
    with pytest.raises(ValueError):
        ModelConfig(10, n_layers=0)


# --- batch layout --------------------------------------------------------------------


def test_batch_layout_and_masks(data):
    _, examples = data
    batch = encode_examples(examples)
    for b, ex in enumerate(examples):
        (qs, qe), (cs, ce) = batch.question_spans[b], batch.context_spans[b]
        assert qe <= cs - 1 and batch.input_ids[b, 0] == 2 and batch.input_ids[b, qe] == 3 and batch.input_ids[b, ce] == 3
        assert batch.input_ids[b, qs:qe].tolist() == list(ex.question_ids)
        assert batch.input_ids[b, cs:ce].tolist() == list(ex.context_ids)
        assert batch.attention_mask[b, : ce + 1].all() and not batch.attention_mask[b, ce + 1 :].any()
        real = torch.zeros_like(batch.attention_mask[b])
        real[qs:qe] = True
        real[cs:ce] = True
        answer, other = batch.answer_mask[b], batch.nonanswer_mask[b]
        assert not (answer & other).any()
        assert torch.equal(answer | other, real)
        assert torch.equal(answer & batch.context_mask[b], answer)
        s, e = ex.answer
        assert (batch.start_positions[b], batch.end_positions[b]) == (cs + s, cs + e)


def test_unlabeled_examples_encode_minus_one(data):
    _, examples = data
    batch = encode_examples([ex.unlabeled() for ex in examples[:2]])
    assert batch.start_positions.tolist() == [-1, -1]
    assert not batch.answer_mask.any()


def test_context_truncated_to_max_len(data):
    _, examples = data
    batch = encode_examples(examples, max_len=20)
    assert batch.input_ids.shape[1] <= 20


# --- embedding and overrides -------------------------------------------------------


def _plain_rows(model, batch):
    return model.tok_emb(batch.input_ids) + model.pos_emb[: batch.input_ids.shape[1]] + model.seg_emb(batch.segment_ids)


def test_embed_without_overrides_is_lookup(data):
    vocab, examples = data
    model = tiny(len(vocab))
    batch = encode_examples(examples[:2])
    torch.testing.assert_close(model.embed(batch), _plain_rows(model, batch), rtol=0, atol=0)


def test_identity_override_changes_nothing(data):
    vocab, examples = data
    model = tiny(len(vocab))
    batch = encode_examples(examples[:2])
    qs = batch.question_spans[0][0]
    own = model.tok_emb.weight[batch.input_ids[0, qs]]
    torch.testing.assert_close(model.embed(batch, {(0, qs): own}), model.embed(batch), rtol=0, atol=0)


def test_mixture_override_is_average_plus_position():
    model = build_model(ModelConfig(10, d_model=4, n_heads=1, d_ff=8, dropout=0.0), 0, torch.float64)
    with torch.no_grad():
        model.tok_emb.weight.copy_(torch.arange(40, dtype=torch.float64).view(10, 4))
    ex = QaExample("t", "x y", "q", (4, 5), ((0, 1), (2, 3)), (6, 7), answer=(0, 0))
    batch = encode_examples([ex])
    row = 0.5 * model.tok_emb.weight[8] + 0.5 * model.tok_emb.weight[9]
    out = model.embed(batch, {(0, 1): row})
    expected = torch.tensor([34.0, 35.0, 36.0, 37.0], dtype=torch.float64) + model.pos_emb[1] + model.seg_emb.weight[0]
    torch.testing.assert_close(out[0, 1], expected)


def test_override_outside_question_rejected(data):
    vocab, examples = data
    model = tiny(len(vocab))
    batch = encode_examples(examples[:1])
    cs = batch.context_spans[0][0]
    with pytest.raises(ContractError):
        model.embed(batch, {(0, cs): model.tok_emb.weight[5]})


def test_override_gradient_reaches_embedding_rows(data):
    vocab, examples = data
    model = tiny(len(vocab))
    batch = encode_examples(examples[:1])
    qs = batch.question_spans[0][0]
    row = 0.7 * model.tok_emb.weight[10] + 0.3 * model.tok_emb.weight[11]
    out = model(batch, overrides={(0, qs): row})
    out.start_logits[0, batch.context_spans[0][0]].backward()
    grad = model.tok_emb.weight.grad
    assert grad[10].abs().sum() > 0 and grad[11].abs().sum() > 0


# --- encoder and cutoff ------------------------------------------------------------


def test_attention_rows_are_distributions(data):
    vocab, examples = data
    model = tiny(len(vocab))
    batch = encode_examples(examples)
    out = model(batch)
    for weights in out.attentions:
        assert (weights >= 0).all()
        sums = weights.sum(-1)
        real = batch.attention_mask[:, None, :].expand_as(sums)
        torch.testing.assert_close(sums[real], torch.ones_like(sums[real]))
        assert (weights[..., ~batch.attention_mask[0]][0] == 0).all()


def test_logits_finite_exactly_on_context(data):
    vocab, examples = data
    out = tiny(len(vocab))(encode_examples(examples))
    batch = encode_examples(examples)
    assert torch.equal(torch.isfinite(out.start_logits), batch.context_mask)
    assert torch.equal(torch.isfinite(out.end_logits), batch.context_mask)


def test_empty_plan_is_vanilla(data):
    vocab, examples = data
    model = tiny(len(vocab))
    batch = encode_examples(examples)
    a = model.encode(batch)[0]
    b = model.encode(batch, cutoff=[[None] * len(examples), [None] * len(examples)])[0]
    assert torch.equal(a, b)


def _capture_layer_input(model, layer):
    seen = {}

    def hook(module, args):
        seen["x"] = args[0].detach().clone()

    return seen, model.blocks[layer].register_forward_pre_hook(hook)


def test_cutoff_zeroes_span_exactly(data):
    vocab, examples = data
    model = tiny(len(vocab))
    batch = encode_examples(examples[:2])
    cs = batch.context_spans[0][0]
    seen, handle = _capture_layer_input(model, 1)
    model.encode(batch, cutoff=[[(cs + 5, cs + 9), None]])
    handle.remove()
    x = seen["x"]
    assert (x[0, cs + 5 : cs + 9] == 0).all()
    assert (x[0].abs().sum(-1) == 0).sum() == 4
    assert (x[1].abs().sum(-1) != 0)[batch.attention_mask[1]].all()


def test_cutoff_matches_multiplicative_mask(data):
    vocab, examples = data
    model = tiny(len(vocab))
    batch = encode_examples(examples[:2])
    cs = batch.context_spans[1][0]
    span = (cs + 2, cs + 6)
    got = model.encode(batch, cutoff=[[None, span], None])[0]
    # reference: run the blocks by hand and zero with a multiplication mask
    keep = torch.ones(batch.input_ids.shape, dtype=torch.float64)
    keep[1, span[0] : span[1]] = 0.0
    x = model.embed(batch)
    x, _ = model.blocks[0](x, batch.attention_mask)
    x = x * keep[:, :, None]
    x, _ = model.blocks[1](x, batch.attention_mask)
    ref = model.ln_f(x)
    real = batch.attention_mask
    assert torch.equal(got[real], ref[real])


def test_cutoff_on_final_layer_rejected(data):
    vocab, examples = data
    model = tiny(len(vocab))
    batch = encode_examples(examples[:1])
    cs = batch.context_spans[0][0]
    with pytest.raises(ContractError):
        model.encode(batch, cutoff=[None, [(cs, cs + 1)]])


def test_cutoff_outside_context_rejected(data):
    vocab, examples = data
    model = tiny(len(vocab))
    batch = encode_examples(examples[:1])
    qs = batch.question_spans[0][0]
    with pytest.raises(ContractError):
        model.encode(batch, cutoff=[[(qs, qs + 1)], None])


def test_cutoff_of_padding_is_noop(data):
    vocab, examples = data
    model = tiny(len(vocab))
    batch = encode_examples(examples[:2])
    lengths = batch.attention_mask.sum(-1).tolist()
    short = int(np.argmin(lengths))
    width = batch.input_ids.shape[1]
    assert lengths[short] < width
    plan = [[None, None], None]
    plan[0][short] = (lengths[short], width)
    a = model.encode(batch)[0]
    b = model.encode(batch, cutoff=plan)[0]
    real = batch.attention_mask
    assert torch.equal(a[real], b[real])


def test_attention_captured_before_cutoff(data):
    vocab, examples = data
    model = tiny(len(vocab))
    batch = encode_examples(examples[:1])
    cs = batch.context_spans[0][0]
    _, plain = model.encode(batch)
    _, cut = model.encode(batch, cutoff=[[(cs, cs + 3)], None])
    assert torch.equal(plain[0], cut[0])
    assert not torch.equal(plain[1], cut[1])


def test_callable_plan_receives_layer_attention(data):
    vocab, examples = data
    model = tiny(len(vocab), n_layers=3)
    batch = encode_examples(examples[:2])
    calls = []

    def plan(layer, attention):
        calls.append((layer, tuple(attention.shape)))
        return [None, None]

    model.encode(batch, cutoff=plan)
    assert [c[0] for c in calls] == [0, 1]
    assert all(shape[1] == 2 for _, shape in calls)


# --- evaluation-mode consistency ---------------------------------------------------


def test_duplicate_rows_identical_in_eval(data):
    vocab, examples = data
    model = tiny(len(vocab)).eval()
    out = model(encode_examples([examples[0], examples[0]]))
    assert torch.equal(out.start_logits[0], out.start_logits[1])


def test_permutation_consistency(data):
    vocab, examples = data
    model = tiny(len(vocab)).eval()
    order = [3, 0, 2, 1]
    a = model(encode_examples(examples[:4]))
    b = model(encode_examples([examples[i] for i in order]))
    for new, old in enumerate(order):
        n = int(encode_examples([examples[old]]).attention_mask.sum())
        torch.testing.assert_close(b.start_logits[new, :n], a.start_logits[old, :n])


def test_build_model_is_seeded_and_leaves_global_rng_alone(data):
    vocab, _ = data
    torch.manual_seed(5)
    state = torch.random.get_rng_state()
    a, b = tiny(len(vocab)), tiny(len(vocab))
    assert torch.equal(torch.random.get_rng_state(), state)
    assert state_fingerprint(a) == state_fingerprint(b)


# --- gradients ---------------------------------------------------------------------


def test_span_ce_gradient_check(data):
    vocab, examples = data
    model = tiny(len(vocab)).train()
    batch = encode_examples(examples[:3])

    def loss(m):
        out = m(batch)
        return span_ce(out, batch.start_positions, batch.end_positions)

    assert module_gradient_check(model, loss, max_coords_per_param=6, rng=Rng(0)) < 1e-4


# --- decoding ----------------------------------------------------------------------


def test_decode_one_hot():
    s = torch.full((10,), -30.0)
    e = torch.full((10,), -30.0)
    s[3], e[5] = 30.0, 30.0
    start, end, conf = decode_span(s, e, 12)
    assert (start, end) == (3, 5) and conf == pytest.approx(1.0, abs=1e-12)


def test_decode_uniform_tie_break():
    start, end, conf = decode_span(torch.zeros(10), torch.zeros(10), 10)
    assert (start, end) == (0, 0)
    assert conf == pytest.approx(0.1, abs=1e-15)


def test_decode_respects_inf_mask_and_length():
    s = torch.tensor([float("-inf"), 0.0, 5.0, 0.0])
    e = torch.tensor([float("-inf"), 9.0, 0.0, 0.0])
    start, end, _ = decode_span(s, e, 2)
    assert start >= 1 and end >= start and end - start < 2


def test_decode_errors():
    with pytest.raises(DecodeError):
        decode_span(torch.full((4,), float("-inf")), torch.full((4,), float("-inf")), 3)


def brute_force_decode(s, e, max_len):
    ps = np.exp(s - s.max()) / np.exp(s - s.max()).sum()
    pe = np.exp(e - e.max()) / np.exp(e - e.max()).sum()
    best = None
    for i, j in itertools.product(range(len(s)), repeat=2):
        if i <= j < i + max_len:
            score = ps[i] * pe[j]
            # strict > keeps the first pair in (start, end) order on ties
            if best is None or score > best[0]:
                best = (score, i, j)
    return best[1], best[2], math.sqrt(best[0])


@settings(max_examples=100, deadline=None)
@given(
    n=st.integers(1, 16),
    max_len=st.integers(1, 16),
    seed=st.integers(0, 10_000),
)
def test_decode_matches_enumeration(n, max_len, seed):
    g = np.random.default_rng(seed)
    s, e = g.normal(size=n) * 3, g.normal(size=n) * 3
    got = decode_span(torch.tensor(s), torch.tensor(e), max_len)
    want = brute_force_decode(s, e, max_len)
    assert got[:2] == want[:2]
    assert got[2] == pytest.approx(want[2], rel=1e-12)


# --- checkpoints -------------------------------------------------------------------


def test_checkpoint_roundtrip_bitwise(tmp_path, data):
    vocab, examples = data
    model = tiny(len(vocab))
    model.train()
    model(encode_examples(examples))  # moves batch-norm running stats
    save_checkpoint(tmp_path / "m.ckpt", model, {"seed": 3})
    loaded, meta = load_checkpoint(tmp_path / "m.ckpt")
    assert meta == {"seed": 3}
    assert state_fingerprint(loaded) == state_fingerprint(model)
    assert loaded.cfg == model.cfg


def test_checkpoint_float32_roundtrip(tmp_path, data):
    vocab, _ = data
    model = build_model(ModelConfig(len(vocab), d_model=16, n_heads=2, d_ff=32), 1)
    save_checkpoint(tmp_path / "m.ckpt", model)
    loaded, _ = load_checkpoint(tmp_path / "m.ckpt")
    assert loaded.tok_emb.weight.dtype == torch.float32
    assert state_fingerprint(loaded) == state_fingerprint(model)


def test_checkpoint_rejects_foreign_file(tmp_path):
    (tmp_path / "x.ckpt").write_text('{"format": "other"}')
    with pytest.raises(ValueError):
        load_checkpoint(tmp_path / "x.ckpt")
