"""Conditional masked transformer over discrete action tokens.

A bidirectional transformer predicts the code id at every position of a
partially-masked token canvas, conditioned on a short window of recent
observations and robot states. Canvas ids extend the codebook with three
control tokens:

    0..K-1  codebook ids   embedding row = id, head column = id
    K       MASK (unknown) embedding row only; the head cannot emit it
    K+1     END            head column K
    K+2     PAD            head column K + 1

The output head is therefore K + 2 wide. full_vocab_logits() widens head
logits back to the K + 3 id space with -inf in the MASK slot, so callers
that want a distribution over all ids see exactly zero mass there.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .autodiff import (Tensor, concat, cross_entropy, embedding, matmul,
                       softmax_rows, tensor)
from .envs import TASKS
from .errors import (CapacityError, CompatibilityError, ContractError,
                     ParameterError, ShapeError)
from .optim import ParameterStore, adam_step, glorot_uniform, step_lr
from .rng import stream
from .validation import check_fitted


# ---- id space ---------------------------------------------------------------

def mask_id(codebook_size: int) -> int:
    return codebook_size


def end_id(codebook_size: int) -> int:
    return codebook_size + 1


def pad_id(codebook_size: int) -> int:
    return codebook_size + 2


def n_vocab(codebook_size: int) -> int:
    return codebook_size + 3


def head_width(codebook_size: int) -> int:
    return codebook_size + 2


def vocab_to_head(ids, codebook_size: int) -> np.ndarray:
    """Canvas ids -> head columns. MASK has no column and is rejected."""
    ids = np.asarray(ids, dtype=np.int64)
    if (ids < 0).any() or (ids >= n_vocab(codebook_size)).any():
        raise ParameterError(f"id outside [0, {n_vocab(codebook_size)})")
    if (ids == mask_id(codebook_size)).any():
        raise ContractError("MASK is never a prediction target")
    return np.where(ids > codebook_size, ids - 1, ids)


def head_to_vocab(cols, codebook_size: int) -> np.ndarray:
    """Head columns -> canvas ids (codes map to themselves, then END, PAD)."""
    cols = np.asarray(cols, dtype=np.int64)
    if (cols < 0).any() or (cols >= head_width(codebook_size)).any():
        raise ParameterError(f"head column outside [0, {head_width(codebook_size)})")
    return np.where(cols >= codebook_size, cols + 1, cols)


def full_vocab_logits(head_logits: np.ndarray, codebook_size: int) -> np.ndarray:
    """(..., K+2) head logits -> (..., K+3) id logits, -inf at MASK."""
    head_logits = np.asarray(head_logits, dtype=np.float64)
    if head_logits.shape[-1] != head_width(codebook_size):
        raise ShapeError(f"head logits last dim {head_logits.shape[-1]} != "
                         f"{head_width(codebook_size)}")
    return np.insert(head_logits, codebook_size, -np.inf, axis=-1)


# ---- bookkeeping ------------------------------------------------------------

class PassCounter:
    """Counts model forward passes, total and by kind."""

    def __init__(self):
        self.total = 0
        self.by_kind: dict[str, int] = {}

    def add(self, kind: str = "forward", n: int = 1):
        self.total += n
        self.by_kind[kind] = self.by_kind.get(kind, 0) + n

    def __repr__(self):
        return f"PassCounter(total={self.total}, by_kind={self.by_kind})"


def window_indices(t: int, steps: int) -> np.ndarray:
    """Timestep indices of the context window ending at t, repeat-padded at 0."""
    return np.clip(np.arange(t - steps + 1, t + 1), 0, None)


FOURIER_BANDS = 6
DELTA_GAIN = 20.0


def lift_window(win: np.ndarray, tracked=None) -> np.ndarray:
    """(B, T, d) -> (B, T, (d + n_tracked) * (1 + 2 * FOURIER_BANDS)) features.

    The tracked columns (every column when None) keep their history and
    contribute gained frame-to-frame deltas; every other column is
    replaced by its final-frame value across the window, so only its
    current reading enters. Then sin/cos bands at octave frequencies of
    everything. Plan targets are steep functions of coordinate
    differences far below the coordinates' own scale (a goal that drifts
    0.005 a step decides the whole correction), and a small network
    underfits such high-frequency maps from raw inputs; the bands make
    those differences linearly separable, and the deltas hand a tracked
    signal's velocity over as a first-class input. History is restricted
    to columns that move on their own: the trajectory of the agent's own
    coordinates depends on who is acting, so a conditional fit to expert
    motion extrapolates whenever the executed motion differs from the
    corpus, while the expert's choice itself needs only the current pose."""
    if tracked is None:
        sel = np.arange(win.shape[-1])
    else:
        sel = np.asarray(tracked, dtype=np.intp)
    base = win
    if sel.size < win.shape[-1]:
        hold = np.ones(win.shape[-1], dtype=bool)
        hold[sel] = False
        base = win.copy()
        base[:, :, hold] = win[:, -1:, hold]
    if sel.size:
        delta = np.zeros(win.shape[:-1] + (sel.size,))
        delta[:, 1:] = (win[:, 1:, sel] - win[:, :-1, sel]) * DELTA_GAIN
        base = np.concatenate([base, delta], axis=-1)
    feats = [base]
    for k in range(FOURIER_BANDS):
        w = np.pi * (2.0 ** k)
        feats.append(np.sin(w * base))
        feats.append(np.cos(w * base))
    return np.concatenate(feats, axis=-1)


def lifted_dim(d: int, n_tracked: int | None = None) -> int:
    """Feature width lift_window produces for raw per-frame width d and
    n_tracked tracked columns (all d of them when None)."""
    return (d + (d if n_tracked is None else n_tracked)) * (1 + 2 * FOURIER_BANDS)


# ---- training-time corruption -------------------------------------------------

def corrupt(tokens, mask_ratio, perturb_rho: float, codebook_size: int,
            rng: np.random.Generator):
    """Masking noise for training canvases.

    Candidates are every non-PAD position (codes and END both stay
    generatable). Each candidate is independently masked with prob
    mask_ratio; surviving code tokens are then swapped for a different
    uniform code with prob perturb_rho, so the model learns to treat
    visible neighbours as evidence rather than truth. END is maskable
    but never perturbed. Returns (corrupted, was_masked).

    mask_ratio may be a scalar or a per-row (B,) array.
    """
    tokens = np.asarray(tokens, dtype=np.int64)
    if tokens.ndim != 2:
        raise ShapeError(f"corrupt expects (B, N) tokens, got {tokens.shape}")
    B, N = tokens.shape
    ratio = np.broadcast_to(np.asarray(mask_ratio, dtype=np.float64), (B,))
    if (ratio < 0).any() or (ratio > 1).any():
        raise ParameterError("mask ratio must be in [0, 1]")
    if not 0.0 <= perturb_rho < 1.0:
        raise ParameterError(f"perturb rho must be in [0, 1), got {perturb_rho}")
    candidates = tokens != pad_id(codebook_size)
    was_masked = (rng.random((B, N)) < ratio[:, None]) & candidates
    out = np.where(was_masked, mask_id(codebook_size), tokens)
    if perturb_rho > 0.0:
        swap = ((rng.random((B, N)) < perturb_rho) & candidates & ~was_masked
                & (tokens < codebook_size))
        if swap.any():
            # draw from the K-1 other codes, shifting past the current id
            alt = rng.integers(0, codebook_size - 1, size=int(swap.sum()))
            out[swap] = alt + (alt >= tokens[swap])
    return out, was_masked


def mgt_loss(logits: Tensor, targets, was_masked, codebook_size: int,
             masked_only: bool = False) -> Tensor:
    """Mean NLL over non-PAD target positions.

    logits (B, N, K+2), targets (B, N) canvas ids. With masked_only the
    mean runs only over positions that were MASK in the input.
    """
    tgt = np.asarray(targets, dtype=np.int64)
    B, N, W = logits.shape
    if tgt.shape != (B, N):
        raise ShapeError(f"targets {tgt.shape} vs logits {logits.shape}")
    keep = tgt != pad_id(codebook_size)
    if masked_only:
        keep = keep & np.asarray(was_masked, dtype=bool)
    idx = np.flatnonzero(keep.reshape(-1))
    flat = logits.reshape(B * N, W)
    return cross_entropy(flat[idx], vocab_to_head(tgt.reshape(-1)[idx], codebook_size))


def loss_positions(targets, was_masked, codebook_size: int,
                   masked_only: bool) -> int:
    """How many positions mgt_loss would average over (for mixture weights)."""
    tgt = np.asarray(targets, dtype=np.int64)
    keep = tgt != pad_id(codebook_size)
    if masked_only:
        keep = keep & np.asarray(was_masked, dtype=bool)
    return int(keep.sum())


# ---- network pieces ------------------------------------------------------------

def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    return (x - mu) / ((var + eps) ** 0.5) * gain + bias


def attention(q: Tensor, k: Tensor, v: Tensor, n_heads: int = 1) -> Tensor:
    """Scaled dot-product attention. q (B, N, D), k/v (B, M, D) -> (B, N, D)."""
    B, N, D = q.shape
    M = k.shape[1]
    if D % n_heads:
        raise ParameterError(f"model dim {D} not divisible by {n_heads} heads")
    dh = D // n_heads
    qh = q.reshape(B, N, n_heads, dh).transpose(0, 2, 1, 3)
    kh = k.reshape(B, M, n_heads, dh).transpose(0, 2, 1, 3)
    vh = v.reshape(B, M, n_heads, dh).transpose(0, 2, 1, 3)
    scores = matmul(qh, kh.transpose(0, 1, 3, 2)) * (dh ** -0.5)
    mix = matmul(softmax_rows(scores), vh)
    return mix.transpose(0, 2, 1, 3).reshape(B, N, D)


class MaskedGenerativePolicy(BaseEstimator):
    """Masked-token policy over a frozen tokenizer's code space.

    fit() consumes expert demonstrations for one task; the nested
    `tokenizer` must already be fitted (stage one trains and freezes it
    before this estimator ever sees data). Training mixes two sample
    shapes so a single set of weights serves both samplers:

      plan samples   full-horizon canvases at absolute positions with a
                     visible m-token history prefix and corrupted pending
                     region, context window taken at step m * chunk;
      window samples short canvases re-based to position 0 (no history),
                     matching the receding-horizon sampler's queries.

    Experts idle (emit exact-zero actions) once their task motion is
    done, so a slice of plan samples is truncated with END at the first
    fully idle token and PAD after it. That keeps END emittable while
    tying it to completion; a demo with no idle tail never teaches END,
    which matters for tasks whose success is judged at the horizon.

    history_scramble swaps the visible history prefix for another demo's
    prefix (targets included: the history stays a copy task) on that
    fraction of plan samples. At replan time the executed prefix is the
    policy's own output and can encode a motion pattern the observations
    contradict; scrambling removes the train-time guarantee that history
    and suffix agree, which forces the suffix prediction to anchor on
    the observation window instead of shortcutting through the prefix.
    """

    def __init__(self, tokenizer=None, model_dim=128, n_heads=1, cross_blocks=2,
                 self_blocks=2, ffn_mult=4, context_steps=4, max_tokens=None,
                 mask_ratio_low=0.5, mask_ratio_high=1.0, perturb_rho=0.1,
                 plan_fraction=0.7, zero_history_fraction=0.25,
                 varlen_fraction=0.3, history_scramble=0.0,
                 pending_scramble=0.0, short_tokens=2,
                 loss_masked_only=False, obs_tracked_dims=None,
                 state_tracked_dims=None,
                 steps=3000, batch_size=16, learning_rate=3e-4,
                 lr_decay_gamma=0.1, lr_milestones=(0.7, 0.9), seed=0):
        self.tokenizer = tokenizer
        self.model_dim = model_dim
        self.n_heads = n_heads
        self.cross_blocks = cross_blocks
        self.self_blocks = self_blocks
        self.ffn_mult = ffn_mult
        self.context_steps = context_steps
        self.max_tokens = max_tokens
        self.mask_ratio_low = mask_ratio_low
        self.mask_ratio_high = mask_ratio_high
        self.perturb_rho = perturb_rho
        self.plan_fraction = plan_fraction
        self.zero_history_fraction = zero_history_fraction
        self.varlen_fraction = varlen_fraction
        self.history_scramble = history_scramble
        self.pending_scramble = pending_scramble
        self.short_tokens = short_tokens
        self.loss_masked_only = loss_masked_only
        self.obs_tracked_dims = obs_tracked_dims
        self.state_tracked_dims = state_tracked_dims
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_decay_gamma = lr_decay_gamma
        self.lr_milestones = lr_milestones
        self.seed = seed

    # ---- parameters -------------------------------------------------------

    def _build_params(self, codebook_size: int, obs_dim: int, state_dim: int,
                      max_tokens: int) -> ParameterStore:
        rng = stream(self.seed, "mgt-init")
        D, F, H = self.model_dim, self.model_dim * self.ffn_mult, self.model_dim // 2
        if D % 2:
            raise ParameterError(f"model dim must be even, got {D}")
        store = ParameterStore()
        store.add("emb.tok", rng.normal(0.0, 0.02, size=(n_vocab(codebook_size), D)))
        store.add("emb.pos", rng.normal(0.0, 0.02, size=(max_tokens, D)))
        store.add("emb.ctxpos", rng.normal(0.0, 0.02, size=(self.context_steps, D)))

        def linear(name, d_in, d_out):
            store.add(name + ".w", glorot_uniform((d_in, d_out), rng))
            store.add(name + ".b", np.zeros(d_out))

        def norm(name):
            store.add(name + ".g", np.ones(D))
            store.add(name + ".b", np.zeros(D))

        def n_tracked(dims, d):
            return d if dims is None else len(dims)

        linear("ctx.obs.1",
               lifted_dim(obs_dim, n_tracked(self.obs_tracked_dims, obs_dim)), H)
        linear("ctx.obs.2", H, H)
        linear("ctx.state.1",
               lifted_dim(state_dim, n_tracked(self.state_tracked_dims, state_dim)), H)
        linear("ctx.state.2", H, H)
        blocks = [f"cross{i}" for i in range(self.cross_blocks)] + \
                 [f"self{i}" for i in range(self.self_blocks)]
        for b in blocks:
            norm(f"{b}.ln_q")
            if b.startswith("cross"):
                norm(f"{b}.ln_kv")
            for w in ("wq", "wk", "wv", "wo"):
                store.add(f"{b}.{w}", glorot_uniform((D, D), rng))
            norm(f"{b}.ln_f")
            linear(f"{b}.ffn.1", D, F)
            linear(f"{b}.ffn.2", F, D)
        norm("final_ln")
        linear("head", D, head_width(codebook_size))
        return store

    # ---- forward ------------------------------------------------------------

    def _mlp(self, P: ParameterStore, name: str, x: Tensor) -> Tensor:
        h = (matmul(x, P[name + ".1.w"]) + P[name + ".1.b"]).silu()
        return matmul(h, P[name + ".2.w"]) + P[name + ".2.b"]

    def _encode_context(self, P: ParameterStore, obs_win, state_win) -> Tensor:
        """(B, T_p, obs_dim) + (B, T_p, state_dim) -> (B, T_p, D) context tokens."""
        ho = self._mlp(P, "ctx.obs",
                       tensor(lift_window(obs_win, self.obs_tracked_dims)))
        hs = self._mlp(P, "ctx.state",
                       tensor(lift_window(state_win, self.state_tracked_dims)))
        return concat([ho, hs], axis=-1) + P["emb.ctxpos"]

    def _ffn(self, P: ParameterStore, b: str, x: Tensor) -> Tensor:
        h = layer_norm(x, P[f"{b}.ln_f.g"], P[f"{b}.ln_f.b"])
        return self._mlp(P, f"{b}.ffn", h)

    def _logits(self, P: ParameterStore, tokens, obs_win, state_win,
                positions) -> Tensor:
        x = embedding(P["emb.tok"], tokens) + embedding(P["emb.pos"], positions)
        ctx = self._encode_context(P, obs_win, state_win)
        for i in range(self.cross_blocks):
            b = f"cross{i}"
            qn = layer_norm(x, P[f"{b}.ln_q.g"], P[f"{b}.ln_q.b"])
            kvn = layer_norm(ctx, P[f"{b}.ln_kv.g"], P[f"{b}.ln_kv.b"])
            mix = attention(matmul(qn, P[f"{b}.wq"]), matmul(kvn, P[f"{b}.wk"]),
                            matmul(kvn, P[f"{b}.wv"]), self.n_heads)
            x = x + matmul(mix, P[f"{b}.wo"])
            x = x + self._ffn(P, b, x)
        for i in range(self.self_blocks):
            b = f"self{i}"
            xn = layer_norm(x, P[f"{b}.ln_q.g"], P[f"{b}.ln_q.b"])
            mix = attention(matmul(xn, P[f"{b}.wq"]), matmul(xn, P[f"{b}.wk"]),
                            matmul(xn, P[f"{b}.wv"]), self.n_heads)
            x = x + matmul(mix, P[f"{b}.wo"])
            x = x + self._ffn(P, b, x)
        xn = layer_norm(x, P["final_ln.g"], P["final_ln.b"])
        return matmul(xn, P["head.w"]) + P["head.b"]

    def forward_logits(self, tokens, context, positions=None, counter=None,
                       kind: str = "forward") -> np.ndarray:
        """One forward pass: head logits (B, N, K+2) for a batch of canvases.

        tokens (B, N) canvas ids; context = (obs_window, state_window) with
        shapes (B, T_p, obs_dim) and (B, T_p, state_dim). positions defaults
        to arange(N); anything at or past the trained capacity raises.
        Passing a PassCounter increments it by one.
        """
        check_fitted(self, "params_")
        tokens = np.asarray(tokens, dtype=np.int64)
        if tokens.ndim != 2:
            raise ShapeError(f"tokens must be (B, N), got {tokens.shape}")
        B, N = tokens.shape
        obs_win = np.asarray(context[0], dtype=np.float64)
        state_win = np.asarray(context[1], dtype=np.float64)
        if obs_win.shape != (B, self.context_steps, self.obs_dim_):
            raise ShapeError(f"obs window {obs_win.shape} != "
                             f"({B}, {self.context_steps}, {self.obs_dim_})")
        if state_win.shape != (B, self.context_steps, self.state_dim_):
            raise ShapeError(f"state window {state_win.shape} != "
                             f"({B}, {self.context_steps}, {self.state_dim_})")
        if N > self.max_tokens_:
            raise CapacityError(f"{N} tokens exceeds capacity {self.max_tokens_}")
        if positions is None:
            positions = np.arange(N)
        positions = np.asarray(positions, dtype=np.int64)
        if positions.shape[-1] != N:
            raise ShapeError(f"positions {positions.shape} vs {N} tokens")
        if positions.size and (positions.min() < 0 or positions.max() >= self.max_tokens_):
            raise CapacityError(f"position outside [0, {self.max_tokens_})")
        if counter is not None:
            counter.add(kind)
        return self._logits(self.params_, tokens, obs_win, state_win, positions).data

    # ---- training -----------------------------------------------------------

    def _draw_plan(self, rng, tokens_i, decoy_i, obs_i, states_i, N, K, chunk,
                   idle_from):
        m = 0 if rng.random() < self.zero_history_fraction else int(rng.integers(1, N))
        tgt = tokens_i.copy()
        if m > 0 and rng.random() < self.history_scramble:
            tgt[:m] = decoy_i[:m]
        if idle_from < N and rng.random() < self.varlen_fraction:
            L = max(m, int(idle_from))
            tgt[L] = end_id(K)
            tgt[L + 1:] = pad_id(K)
        canvas = tgt.copy()
        flags = np.zeros(N, dtype=bool)
        ratio = rng.uniform(self.mask_ratio_low, self.mask_ratio_high)
        corr, msk = corrupt(tgt[None, m:], ratio, self.perturb_rho, K, rng)
        canvas[m:] = corr[0]
        flags[m:] = msk[0]
        if rng.random() < self.pending_scramble:
            # visible pending tokens swapped for another demo's coherent plan
            # while targets stay true: the situation every replan is in, where
            # the committed suffix no longer matches the observations. Trains
            # the fill-in to anchor on the window over neighbouring tokens and
            # drives the echoed probability of a mismatched visible token
            # down, which is what makes confidence rankings worth acting on.
            swap = (np.arange(N) >= m) & ~flags & (canvas < K)
            canvas[swap] = decoy_i[swap]
        idx = window_indices(chunk * m, self.context_steps)
        return canvas, tgt, flags, obs_i[idx], states_i[idx], m

    def _draw_window(self, rng, tokens_i, obs_i, states_i, N, K, chunk):
        S = self.short_tokens
        m = int(rng.integers(0, N - S + 1))
        tgt = tokens_i[m:m + S].copy()
        ratio = rng.uniform(self.mask_ratio_low, self.mask_ratio_high)
        canvas, flags = corrupt(tgt[None], ratio, self.perturb_rho, K, rng)
        idx = window_indices(chunk * m, self.context_steps)
        return canvas[0], tgt, flags[0], obs_i[idx], states_i[idx], m

    def fit(self, demos, y=None, callback=None):
        """demos: expert Demonstrations for one task (see envs).

        callback, when given, runs as callback(self, step_i) after every
        optimizer step; the fitted attributes are live from step 0 so a
        callback can evaluate the in-progress policy.
        """
        if self.tokenizer is None:
            raise ParameterError("a fitted tokenizer is required")
        check_fitted(self.tokenizer, "codes_")
        demos = list(demos)
        if not demos:
            raise ParameterError("empty demonstration corpus")
        task = demos[0].task
        if any(d.task != task for d in demos):
            raise ParameterError("demonstrations mix tasks")
        actions = np.stack([d.actions for d in demos])
        obs = np.stack([d.observations for d in demos])
        states = np.stack([d.states for d in demos])
        tokens = self.tokenizer.transform(actions)
        n, N = tokens.shape
        K = self.tokenizer.codebook_size
        chunk = self.tokenizer.rate
        # first fully idle token per demo (N when the expert never idles)
        moving = np.abs(actions).max(axis=2) > 0.0
        last_move = np.where(moving.any(axis=1),
                             actions.shape[1] - 1 - moving[:, ::-1].argmax(axis=1),
                             -1)
        idle_from = np.minimum(N, -(-(last_move + 1) // chunk))
        cap = N if self.max_tokens is None else self.max_tokens
        if N > cap:
            raise CapacityError(f"{N}-token plans exceed max_tokens={cap}")
        if not 1 <= self.short_tokens <= N:
            raise ParameterError(f"short_tokens={self.short_tokens} vs {N}-token plans")

        store = self._build_params(K, obs.shape[2], states.shape[2], cap)
        self.params_ = store
        self.codebook_size_ = K
        self.n_tokens_ = N
        self.max_tokens_ = cap
        self.chunk_ = chunk
        self.obs_dim_ = obs.shape[2]
        self.state_dim_ = states.shape[2]
        self.horizon_ = actions.shape[1]
        self.task_ = task
        self.loss_curve_ = np.zeros(0)

        rng = stream(self.seed, "mgt-fit")
        pos_plan = np.arange(N)
        pos_win = np.arange(self.short_tokens)
        losses = []
        for step_i in range(self.steps):
            plan_rows, win_rows = [], []
            for _ in range(self.batch_size):
                i = int(rng.integers(0, n))
                if rng.random() < self.plan_fraction:
                    j = int(rng.integers(0, n))
                    plan_rows.append(self._draw_plan(
                        rng, tokens[i], tokens[j], obs[i], states[i], N, K,
                        chunk, idle_from[i]))
                else:
                    win_rows.append(self._draw_window(
                        rng, tokens[i], obs[i], states[i], N, K, chunk))
            parts = []
            for rows, pos in ((plan_rows, pos_plan), (win_rows, pos_win)):
                if not rows:
                    continue
                canvas, tgt, flags, ow, sw, _ = (np.stack(c) for c in zip(*rows))
                kept = loss_positions(tgt, flags, K, self.loss_masked_only)
                if kept == 0:
                    continue
                logits = self._logits(store, canvas, ow, sw, pos)
                parts.append((mgt_loss(logits, tgt, flags, K, self.loss_masked_only),
                              kept))
            total = sum(k for _, k in parts)
            loss = sum((l * (k / total) for l, k in parts), tensor(0.0))
            store.zero_grad()
            loss.backward()
            adam_step(store, store.gradients(),
                      lr=step_lr(self.learning_rate, step_i, self.steps,
                                 self.lr_decay_gamma, self.lr_milestones))
            losses.append(loss.item())
            if callback is not None:
                self.loss_curve_ = np.asarray(losses)
                callback(self, step_i)

        self.loss_curve_ = np.asarray(losses)
        return self

    # ---- checkpoint state -------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        check_fitted(self, "params_")
        out = {
            "meta": np.array([self.codebook_size_, self.n_tokens_,
                              self.max_tokens_, self.chunk_, self.obs_dim_,
                              self.state_dim_, self.horizon_,
                              TASKS.index(self.task_)], dtype=np.float64),
            "loss_curve": self.loss_curve_,
        }
        for name, arr in self.params_.state_arrays().items():
            out["param." + name] = arr
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        try:
            meta = arrays["meta"]
        except KeyError:
            raise ParameterError("policy state missing 'meta' array") from None
        (K, self.n_tokens_, self.max_tokens_, self.chunk_, self.obs_dim_,
         self.state_dim_, self.horizon_, task_i) = (int(v) for v in meta)
        self.codebook_size_ = K
        self.task_ = TASKS[task_i]
        if self.tokenizer is not None and getattr(self.tokenizer, "codebook_size", K) != K:
            raise CompatibilityError(
                f"policy trained against a {K}-code book, tokenizer has "
                f"{self.tokenizer.codebook_size}")
        store = self._build_params(K, self.obs_dim_, self.state_dim_,
                                   self.max_tokens_)
        store.load_arrays({k[len("param."):]: v for k, v in arrays.items()
                           if k.startswith("param.")})
        self.params_ = store
        self.loss_curve_ = arrays["loss_curve"].copy()
        return self
