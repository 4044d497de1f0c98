import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mgpolicy.autodiff import Tensor, tensor
from mgpolicy.envs import collect_demonstrations
from mgpolicy.errors import (CapacityError, CompatibilityError, ContractError,
                             ParameterError, ShapeError)
from mgpolicy.rng import stream
from mgpolicy.tokenizer import ActionTokenizer
from mgpolicy.transformer import (MaskedGenerativePolicy, PassCounter, attention,
                                  corrupt, end_id, full_vocab_logits, head_to_vocab,
                                  head_width, layer_norm, mask_id, mgt_loss, n_vocab,
                                  pad_id, vocab_to_head, window_indices)
from oracles import assert_close, fd_grad, softmax_ref


# ---- id space ----------------------------------------------------------------

def test_id_space_layout():
    assert (mask_id(4), end_id(4), pad_id(4)) == (4, 5, 6)
    assert n_vocab(4) == 7 and head_width(4) == 6
    got = vocab_to_head([0, 3, 5, 6], 4)
    assert got.tolist() == [0, 3, 4, 5]
    back = head_to_vocab(got, 4)
    assert back.tolist() == [0, 3, 5, 6]


def test_mask_is_not_a_target():
    with pytest.raises(ContractError):
        vocab_to_head([1, 4], 4)
    with pytest.raises(ParameterError):
        vocab_to_head([7], 4)
    with pytest.raises(ParameterError):
        head_to_vocab([6], 4)


@given(st.integers(2, 64))
@settings(max_examples=30, deadline=None)
def test_head_mapping_roundtrip(K):
    ids = np.array([i for i in range(n_vocab(K)) if i != mask_id(K)])
    assert np.array_equal(head_to_vocab(vocab_to_head(ids, K), K), ids)
    cols = np.arange(head_width(K))
    assert np.array_equal(vocab_to_head(head_to_vocab(cols, K), K), cols)


def test_full_vocab_logits_zero_mass_on_mask():
    K = 3
    head = np.array([[0.5, -1.0, 2.0, 0.0, 1.0]])  # K+2 = 5 wide
    full = full_vocab_logits(head, K)
    assert full.shape == (1, n_vocab(K))
    assert full[0, mask_id(K)] == -np.inf
    probs = softmax_ref(full)
    assert probs[0, mask_id(K)] == 0.0
    assert_close(np.delete(probs, mask_id(K), axis=1), softmax_ref(head))
    with pytest.raises(ShapeError):
        full_vocab_logits(head, 4)


# ---- corruption ----------------------------------------------------------------

def test_corrupt_ratio_extremes():
    K = 8
    tokens = np.array([[0, 3, 7, end_id(K), pad_id(K), pad_id(K)]])
    rng = stream(0, "corrupt")
    out, flags = corrupt(tokens, 1.0, 0.0, K, rng)
    assert out[0].tolist() == [mask_id(K)] * 4 + [pad_id(K)] * 2
    assert flags[0].tolist() == [True] * 4 + [False] * 2
    out, flags = corrupt(tokens, 0.0, 0.0, K, rng)
    assert np.array_equal(out, tokens) and not flags.any()


def test_corrupt_perturbs_only_visible_codes():
    K = 8
    rng = stream(1, "corrupt")
    tokens = np.tile(np.array([2, 5, end_id(K), pad_id(K)]), (400, 1))
    out, flags = corrupt(tokens, 0.0, 0.5, K, rng)
    assert not flags.any()
    changed = out != tokens
    assert not changed[:, 2:].any()  # END and PAD never perturbed
    assert changed[:, :2].sum() > 0
    swapped = out[changed]
    assert ((swapped >= 0) & (swapped < K)).all()
    assert (swapped != tokens[changed]).all()


def test_corrupt_masked_count_is_binomial():
    K = 16
    n, N, ratio = 400, 25, 0.7
    rng = stream(2, "corrupt")
    tokens = rng.integers(0, K, size=(n, N))
    _, flags = corrupt(tokens, ratio, 0.0, K, rng)
    total = int(flags.sum())
    mean = n * N * ratio
    sigma = np.sqrt(n * N * ratio * (1 - ratio))
    assert abs(total - mean) <= 3 * sigma


def test_corrupt_per_row_ratio_and_determinism():
    K = 4
    tokens = np.zeros((2, 50), dtype=np.int64)
    out, flags = corrupt(tokens, np.array([0.0, 1.0]), 0.0, K, stream(3, "c"))
    assert not flags[0].any() and flags[1].all()
    a = corrupt(tokens, 0.5, 0.1, K, stream(4, "c"))
    b = corrupt(tokens, 0.5, 0.1, K, stream(4, "c"))
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    with pytest.raises(ParameterError):
        corrupt(tokens, 1.5, 0.0, K, stream(5, "c"))


@given(st.integers(2, 32), st.floats(0.0, 1.0), st.integers(0, 1000))
@settings(max_examples=40, deadline=None)
def test_corrupt_invariants(K, ratio, seed):
    rng = stream(seed, "corrupt-prop")
    tokens = rng.integers(0, K, size=(3, 12))
    tokens[0, 9:] = pad_id(K)
    tokens[0, 8] = end_id(K)
    out, flags = corrupt(tokens, ratio, 0.1, K, rng)
    pad = tokens == pad_id(K)
    assert np.array_equal(out[pad], tokens[pad])  # PAD untouched
    assert not flags[pad].any()
    assert (out[flags] == mask_id(K)).all()
    vis = ~flags & ~pad
    changed = vis & (out != tokens)
    assert (tokens[changed] < K).all() and (out[changed] < K).all()


# ---- loss ---------------------------------------------------------------------

def test_mgt_loss_hand_value():
    # K=2: head columns [code0, code1, END, PAD]. Row 0 targets code0 with
    # logits [ln 2, 0, 0, 0] -> p = 2/5, NLL = ln 2.5. Row 1 is PAD: dropped.
    K = 2
    logits = tensor(np.array([[[np.log(2.0), 0.0, 0.0, 0.0],
                               [0.0, 0.0, 0.0, 0.0]]]), requires_grad=True)
    targets = np.array([[0, pad_id(K)]])
    flags = np.array([[True, False]])
    loss = mgt_loss(logits, targets, flags, K)
    assert_close(loss.item(), np.log(2.5), rtol=1e-12, label="mgt_loss")
    loss.backward()
    assert np.allclose(logits.grad[0, 1], 0.0)  # PAD row gets no gradient


def test_mgt_loss_masked_only_switch():
    K = 2
    logits = tensor(np.zeros((1, 3, 4)), requires_grad=True)
    targets = np.array([[0, 1, 0]])
    flags = np.array([[False, True, False]])
    full = mgt_loss(logits, targets, flags, K, masked_only=False)
    part = mgt_loss(logits, targets, flags, K, masked_only=True)
    assert_close(full.item(), np.log(4.0), rtol=1e-12)
    assert_close(part.item(), np.log(4.0), rtol=1e-12)
    part.backward()
    assert np.allclose(logits.grad[0, 0], 0.0) and np.allclose(logits.grad[0, 2], 0.0)
    assert not np.allclose(logits.grad[0, 1], 0.0)


def test_mgt_loss_all_ignored_warns_zero():
    K = 2
    logits = tensor(np.zeros((1, 2, 4)), requires_grad=True)
    targets = np.full((1, 2), pad_id(K))
    with pytest.warns(RuntimeWarning):
        loss = mgt_loss(logits, targets, np.zeros((1, 2), bool), K)
    assert loss.item() == 0.0


# ---- network pieces ---------------------------------------------------------------

def test_layer_norm_hand_value():
    x = tensor(np.array([[1.0, 3.0]]))
    g = tensor(np.ones(2))
    b = tensor(np.zeros(2))
    got = layer_norm(x, g, b, eps=1e-5).data
    want = np.array([[-1.0, 1.0]]) / np.sqrt(1.0 + 1e-5)
    assert_close(got, want, rtol=1e-12, label="layer_norm")


def test_layer_norm_gradient_matches_fd():
    rng = stream(6, "ln-fd")
    arrays = [rng.normal(size=(2, 5)), rng.normal(size=5), rng.normal(size=5)]

    def loss_np(arrs):
        x, g, b = (tensor(a, requires_grad=True) for a in arrs)
        return layer_norm(x, g, b).tanh().sum().item()

    leaves = [tensor(a, requires_grad=True) for a in arrays]
    out = layer_norm(*leaves).tanh().sum()
    out.backward()
    for leaf, fd in zip(leaves, fd_grad(loss_np, arrays)):
        assert_close(leaf.grad, fd, rtol=1e-4, atol=1e-7, label="ln grad")


def test_attention_probs_from_reference():
    # single head, one query: output must be the softmax-weighted value mix
    q = np.array([[[1.0, 0.0]]])
    k = np.array([[[1.0, 0.0], [0.0, 1.0]]])
    v = np.array([[[2.0, 0.0], [0.0, 4.0]]])
    got = attention(tensor(q), tensor(k), tensor(v)).data
    w = softmax_ref(np.array([1.0, 0.0]) / np.sqrt(2.0))
    want = (w[:, None] * v[0]).sum(axis=0)[None, None]
    assert_close(got, want, rtol=1e-12, label="attention")


def test_two_heads_split_the_width():
    rng = stream(7, "attn")
    q, k, v = (rng.normal(size=(1, 3, 4)) for _ in range(3))
    got = attention(tensor(q), tensor(k), tensor(v), n_heads=2).data
    lo = attention(tensor(q[..., :2]), tensor(k[..., :2]), tensor(v[..., :2])).data
    hi = attention(tensor(q[..., 2:]), tensor(k[..., 2:]), tensor(v[..., 2:])).data
    assert_close(got, np.concatenate([lo, hi], axis=-1), rtol=1e-12)
    with pytest.raises(ParameterError):
        attention(tensor(q), tensor(k), tensor(v), n_heads=3)


def test_attention_gradient_matches_fd():
    rng = stream(8, "attn-fd")
    arrays = [rng.normal(size=(1, 2, 4)), rng.normal(size=(1, 3, 4)),
              rng.normal(size=(1, 3, 4))]

    def loss_np(arrs):
        q, k, v = (tensor(a, requires_grad=True) for a in arrs)
        return (attention(q, k, v, n_heads=2) ** 2).sum().item()

    leaves = [tensor(a, requires_grad=True) for a in arrays]
    (attention(*leaves, n_heads=2) ** 2).sum().backward()
    for leaf, fd in zip(leaves, fd_grad(loss_np, arrays)):
        assert_close(leaf.grad, fd, rtol=1e-4, atol=1e-7, label="attn grad")


def test_window_indices_repeat_pad():
    assert window_indices(0, 4).tolist() == [0, 0, 0, 0]
    assert window_indices(2, 4).tolist() == [0, 0, 1, 2]
    assert window_indices(9, 4).tolist() == [6, 7, 8, 9]


# ---- fitted policy ---------------------------------------------------------------

@pytest.fixture(scope="module")
def small_fit():
    demos = collect_demonstrations("reach", 4, seed=1)
    acts = np.stack([d.actions for d in demos])
    tok = ActionTokenizer(codebook_size=16, code_dim=8, channels=16,
                          steps=300, seed=0).fit(acts)
    mgp = MaskedGenerativePolicy(tokenizer=tok, model_dim=48, steps=500,
                                 batch_size=8, seed=0).fit(demos)
    return demos, tok, mgp


def _ctx(demo, t=0):
    idx = window_indices(t, 4)
    return demo.observations[idx][None], demo.states[idx][None]


def test_forward_shape_and_purity(small_fit):
    demos, tok, mgp = small_fit
    K, N = mgp.codebook_size_, mgp.n_tokens_
    canvas = np.full((1, N), mask_id(K), dtype=np.int64)
    a = mgp.forward_logits(canvas, _ctx(demos[0]))
    b = mgp.forward_logits(canvas, _ctx(demos[0]))
    assert a.shape == (1, N, head_width(K))
    assert np.array_equal(a, b)


def test_forward_depends_on_context_and_tokens(small_fit):
    demos, tok, mgp = small_fit
    K, N = mgp.codebook_size_, mgp.n_tokens_
    canvas = np.full((1, N), mask_id(K), dtype=np.int64)
    a = mgp.forward_logits(canvas, _ctx(demos[0]))
    b = mgp.forward_logits(canvas, _ctx(demos[1]))
    assert not np.array_equal(a, b)
    other = canvas.copy()
    other[0, 0] = 3
    c = mgp.forward_logits(other, _ctx(demos[0]))
    assert not np.array_equal(a, c)


def test_forward_counts_passes(small_fit):
    demos, tok, mgp = small_fit
    K, N = mgp.codebook_size_, mgp.n_tokens_
    canvas = np.full((2, N), mask_id(K), dtype=np.int64)
    obs, st_ = _ctx(demos[0])
    ctx = (np.repeat(obs, 2, axis=0), np.repeat(st_, 2, axis=0))
    pc = PassCounter()
    mgp.forward_logits(canvas, ctx, counter=pc, kind="plan")
    mgp.forward_logits(canvas, ctx, counter=pc, kind="refine")
    mgp.forward_logits(canvas, ctx, counter=pc, kind="refine")
    assert pc.total == 3 and pc.by_kind == {"plan": 1, "refine": 2}


def test_forward_capacity_limits(small_fit):
    demos, tok, mgp = small_fit
    K, N = mgp.codebook_size_, mgp.max_tokens_
    obs, st_ = _ctx(demos[0])
    with pytest.raises(CapacityError):
        mgp.forward_logits(np.zeros((1, N + 1), dtype=np.int64), (obs, st_))
    canvas = np.full((1, 2), mask_id(K), dtype=np.int64)
    with pytest.raises(CapacityError):
        mgp.forward_logits(canvas, (obs, st_), positions=np.array([0, N]))
    with pytest.raises(ShapeError):
        mgp.forward_logits(canvas, (obs[:, :2], st_))


def test_relative_positions_change_logits(small_fit):
    demos, tok, mgp = small_fit
    K = mgp.codebook_size_
    canvas = np.full((1, 2), mask_id(K), dtype=np.int64)
    a = mgp.forward_logits(canvas, _ctx(demos[0]), positions=np.array([0, 1]))
    b = mgp.forward_logits(canvas, _ctx(demos[0]), positions=np.array([4, 5]))
    assert a.shape == b.shape and not np.array_equal(a, b)


def test_unfitted_policy_rejects_calls():
    from sklearn.exceptions import NotFittedError
    mgp = MaskedGenerativePolicy()
    with pytest.raises(NotFittedError):
        mgp.forward_logits(np.zeros((1, 2), dtype=np.int64),
                           (np.zeros((1, 4, 4)), np.zeros((1, 4, 2))))


def test_fit_requires_fitted_tokenizer():
    demos = collect_demonstrations("reach", 2, seed=0)
    with pytest.raises(ParameterError):
        MaskedGenerativePolicy(tokenizer=None).fit(demos)
    from sklearn.exceptions import NotFittedError
    with pytest.raises(NotFittedError):
        MaskedGenerativePolicy(tokenizer=ActionTokenizer()).fit(demos)


def test_loss_decreases(small_fit):
    demos, tok, mgp = small_fit
    lc = mgp.loss_curve_
    assert len(lc) == 500
    assert lc[-50:].mean() < 0.5 * lc[:50].mean()


def test_masked_prediction_recovers_expert_tokens(small_fit):
    demos, tok, mgp = small_fit
    K = mgp.codebook_size_
    tokens = tok.transform(np.stack([d.actions for d in demos]))
    rng = stream(9, "acc-check")
    hits = total = 0
    for i, d in enumerate(demos):
        canvas, flags = corrupt(tokens[i][None], 0.5, 0.0, K, rng)
        pred = mgp.forward_logits(canvas, _ctx(d))[0].argmax(axis=1)
        want = vocab_to_head(tokens[i], K)
        hits += int((pred[flags[0]] == want[flags[0]]).sum())
        total += int(flags.sum())
    # chance level is 1/16; the near-overfit corpus should sit far above it
    assert total > 0 and hits / total >= 0.6


def test_fit_is_reproducible():
    demos = collect_demonstrations("reach", 3, seed=2)
    acts = np.stack([d.actions for d in demos])
    tok = ActionTokenizer(codebook_size=8, code_dim=4, channels=8,
                          steps=60, seed=0).fit(acts)
    kw = dict(tokenizer=tok, model_dim=16, steps=40, batch_size=4)
    a = MaskedGenerativePolicy(seed=3, **kw).fit(demos)
    b = MaskedGenerativePolicy(seed=3, **kw).fit(demos)
    c = MaskedGenerativePolicy(seed=4, **kw).fit(demos)
    for name, t in a.params_.items():
        assert np.array_equal(t.data, b.params_[name].data)
    assert any(not np.array_equal(t.data, c.params_[name].data)
               for name, t in a.params_.items())


def test_plan_draw_invariants(small_fit):
    demos, tok, mgp = small_fit
    K, N, chunk = mgp.codebook_size_, mgp.n_tokens_, mgp.chunk_
    tokens = tok.transform(np.stack([d.actions for d in demos]))
    # independent idle point: first token whose steps are all zero-action
    moving = np.flatnonzero(np.abs(demos[0].actions).max(axis=1) > 0.0)
    idle = N if moving.size == 0 else min(N, -(-(moving[-1] + 1) // chunk))
    assert idle < N  # reach experts idle after arrival
    rng = stream(10, "draw")
    saw_history = saw_end = False
    for _ in range(200):
        canvas, tgt, flags, ow, sw, m = mgp._draw_plan(
            rng, tokens[0], tokens[1], demos[0].observations,
            demos[0].states, N, K, chunk, idle)
        assert np.array_equal(canvas[:m], tgt[:m])  # history enters verbatim
        assert not flags[:m].any()
        assert (canvas[flags] == mask_id(K)).all()
        pad = tgt == pad_id(K)
        assert np.array_equal(canvas[pad], tgt[pad])
        assert not flags[pad].any()
        perturbed = np.flatnonzero(~flags & ~pad & (canvas != tgt))
        assert (perturbed >= m).all()
        assert (canvas[perturbed] < K).all() and (tgt[perturbed] < K).all()
        ends = np.flatnonzero(tgt == end_id(K))
        if ends.size:
            saw_end = True
            assert ends.size == 1 and ends[0] == max(m, idle)
            assert (tgt[ends[0] + 1:] == pad_id(K)).all()
            assert (tgt[:ends[0]] < K).all()
        saw_history = saw_history or m > 0
        assert ow.shape == (4, demos[0].observations.shape[1])
        assert sw.shape == (4, 2)
    assert saw_history and saw_end


def test_plan_draw_never_truncates_without_idle_tail(small_fit):
    demos, tok, mgp = small_fit
    K, N, chunk = mgp.codebook_size_, mgp.n_tokens_, mgp.chunk_
    tokens = tok.transform(np.stack([d.actions for d in demos]))
    rng = stream(12, "draw")
    for _ in range(200):
        _, tgt, _, _, _, _ = mgp._draw_plan(
            rng, tokens[0], tokens[1], demos[0].observations,
            demos[0].states, N, K, chunk, N)
        assert (tgt < K).all()  # no END, no PAD


def test_plan_draw_history_scramble(small_fit):
    demos, tok, mgp = small_fit
    K, N, chunk = mgp.codebook_size_, mgp.n_tokens_, mgp.chunk_
    tokens = tok.transform(np.stack([d.actions for d in demos]))
    assert not np.array_equal(tokens[0], tokens[1])
    mgp.history_scramble = 1.0
    mgp.zero_history_fraction = 0.0
    try:
        rng = stream(13, "draw")
        scrambled = 0
        for _ in range(100):
            canvas, tgt, flags, _, _, m = mgp._draw_plan(
                rng, tokens[0], tokens[1], demos[0].observations,
                demos[0].states, N, K, chunk, N)
            # history becomes the decoy's, as input and as target
            assert np.array_equal(canvas[:m], tokens[1][:m])
            assert np.array_equal(tgt[:m], tokens[1][:m])
            assert np.array_equal(tgt[m:], tokens[0][m:])  # suffix stays true
            assert not flags[:m].any()
            scrambled += int(not np.array_equal(tgt[:m], tokens[0][:m]))
        assert scrambled > 0
    finally:
        mgp.history_scramble = 0.0
        mgp.zero_history_fraction = 0.25


def test_window_draw_invariants(small_fit):
    demos, tok, mgp = small_fit
    K, N, chunk = mgp.codebook_size_, mgp.n_tokens_, mgp.chunk_
    tokens = tok.transform(np.stack([d.actions for d in demos]))
    rng = stream(11, "draw")
    for _ in range(100):
        canvas, tgt, flags, ow, sw, m = mgp._draw_window(
            rng, tokens[0], demos[0].observations, demos[0].states, N, K, chunk)
        S = mgp.short_tokens
        assert canvas.shape == (S,) and tgt.shape == (S,)
        assert 0 <= m <= N - S
        assert np.array_equal(tgt, tokens[0, m:m + S])
        assert (canvas[flags] == mask_id(K)).all()


def test_state_roundtrip(small_fit):
    demos, tok, mgp = small_fit
    arrays = mgp.state_arrays()
    clone = MaskedGenerativePolicy(**{k: v for k, v in mgp.get_params(deep=False).items()})
    clone.load_state_arrays(arrays)
    K, N = mgp.codebook_size_, mgp.n_tokens_
    canvas = np.full((1, N), mask_id(K), dtype=np.int64)
    a = mgp.forward_logits(canvas, _ctx(demos[0]))
    b = clone.forward_logits(canvas, _ctx(demos[0]))
    assert np.array_equal(a, b)
    assert clone.task_ == "reach" and clone.chunk_ == tok.rate


def test_state_load_rejects_wrong_codebook(small_fit):
    demos, tok, mgp = small_fit
    arrays = mgp.state_arrays()
    other = MaskedGenerativePolicy(tokenizer=ActionTokenizer(codebook_size=99))
    with pytest.raises(CompatibilityError):
        other.load_state_arrays(arrays)
