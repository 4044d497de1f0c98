"""VQ-VAE action tokenizer.

Maps action sequences (T, j) to N = T / downsample^blocks discrete code
ids and back. Encoder and decoder are small residual 1-D CNNs; the
codebook is trained with EMA updates plus dead-code resets and is frozen
after fit. Loss: rec_weight * mean|a - a_hat| + commit_weight *
mean (y_hat - sg[y])^2, where y is the quantized latent.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .autodiff import Tensor, conv1d, pad1d, stop_gradient, tensor
from .errors import CompatibilityError, ParameterError, ShapeError
from .optim import ParameterStore, adam_step, glorot_uniform, step_lr
from .rng import stream
from .validation import as_action_batch, as_token_batch, check_fitted

EMA_EPS = 1e-9


def quantize(latents: np.ndarray, codes: np.ndarray) -> np.ndarray:
    """Exact nearest code id per latent row; ties go to the lowest index.

    Distances are computed directly as sum((z - c)^2), chunked over rows,
    so results match a brute-force scan bit for bit.
    """
    latents = np.asarray(latents, dtype=np.float64)
    codes = np.asarray(codes, dtype=np.float64)
    if latents.ndim != 2 or codes.ndim != 2 or latents.shape[1] != codes.shape[1]:
        raise ShapeError(f"quantize: latents {latents.shape} vs codes {codes.shape}")
    out = np.empty(latents.shape[0], dtype=np.int64)
    chunk = max(1, int(2**22 // max(1, codes.shape[0] * codes.shape[1])))
    for lo in range(0, latents.shape[0], chunk):
        z = latents[lo:lo + chunk]
        d = ((z[:, None, :] - codes[None, :, :]) ** 2).sum(axis=2)
        out[lo:lo + chunk] = np.argmin(d, axis=1)  # argmin returns first min
    return out


def ema_update(counts: np.ndarray, sums: np.ndarray, latents: np.ndarray,
               indices: np.ndarray, decay: float):
    """In-place EMA codebook statistics update. Returns refreshed codes."""
    if not 0.0 <= decay < 1.0:
        raise ParameterError(f"ema decay must be in [0, 1), got {decay}")
    K = counts.shape[0]
    n_k = np.bincount(indices, minlength=K).astype(np.float64)
    batch_sums = np.zeros_like(sums)
    np.add.at(batch_sums, indices, latents)
    counts *= decay
    counts += (1.0 - decay) * n_k
    sums *= decay
    sums += (1.0 - decay) * batch_sums
    return sums / (counts[:, None] + EMA_EPS)


def reset_dead_codes(codes: np.ndarray, counts: np.ndarray, sums: np.ndarray,
                     latents: np.ndarray, threshold: float,
                     rng: np.random.Generator) -> int:
    """Resample codes whose usage EMA fell below threshold from batch latents."""
    dead = np.flatnonzero(counts < threshold)
    if dead.size == 0:
        return 0
    picks = rng.integers(0, latents.shape[0], size=dead.size)
    codes[dead] = latents[picks]
    counts[dead] = 1.0
    sums[dead] = codes[dead]
    return int(dead.size)


def vq_loss(actions: Tensor, recon: Tensor, latents: Tensor, quantized,
            rec_weight: float, commit_weight: float) -> Tensor:
    """rec_weight * mean|a - a_hat| + commit_weight * mean (y_hat - sg[y])^2.

    The quantized values y sit behind stop_gradient: the commitment term
    moves the encoder toward the codes, never the codes toward the encoder
    (codes move only via EMA)."""
    q = quantized if isinstance(quantized, Tensor) else tensor(quantized)
    rec = (actions - recon).abs().mean()
    commit = ((latents - stop_gradient(q)) ** 2).mean()
    return rec * rec_weight + commit * commit_weight


class ActionTokenizer(BaseEstimator, TransformerMixin):
    """fit on (n, T, j) expert actions; transform to (n, N) code ids.

    With kernel_size=1 the strided convolutions (and their transposed-conv
    mirrors in the decoder) are the only temporal mixing, so each code sees
    exactly the downsample**strided_blocks actions it covers and decoding a
    token never depends on its neighbours. That keeps isolated one-token
    course corrections intact through an encode/decode round trip; wider
    kernels blur them into adjacent chunks."""

    def __init__(self, codebook_size=1024, code_dim=16, channels=64,
                 strided_blocks=2, downsample=2, kernel_size=1,
                 rec_weight=1.0, commit_weight=0.02, ema_decay=0.99,
                 dead_code_threshold=1e-3, reset_interval=50, enable_resets=True,
                 steps=2000, batch_size=8, learning_rate=1e-3,
                 lr_decay_gamma=0.1, lr_milestones=(0.6, 0.85),
                 holdout_fraction=0.0, seed=0):
        self.codebook_size = codebook_size
        self.code_dim = code_dim
        self.channels = channels
        self.strided_blocks = strided_blocks
        self.downsample = downsample
        self.kernel_size = kernel_size
        self.rec_weight = rec_weight
        self.commit_weight = commit_weight
        self.ema_decay = ema_decay
        self.dead_code_threshold = dead_code_threshold
        self.reset_interval = reset_interval
        self.enable_resets = enable_resets
        self.steps = steps
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.lr_decay_gamma = lr_decay_gamma
        self.lr_milestones = lr_milestones
        self.holdout_fraction = holdout_fraction
        self.seed = seed

    def _lr_at(self, step_i: int) -> float:
        return step_lr(self.learning_rate, step_i, self.steps,
                       self.lr_decay_gamma, self.lr_milestones)

    @property
    def rate(self) -> int:
        """Actions per token."""
        return self.downsample ** self.strided_blocks

    # ---- parameter construction -----------------------------------------

    def _build_params(self, action_dim: int) -> ParameterStore:
        rng = stream(self.seed, "tokenizer-init")
        C, d, k, s = self.channels, self.code_dim, self.kernel_size, self.downsample
        store = ParameterStore()

        def conv(name, c_out, c_in, width):
            store.add(name, glorot_uniform((c_out, c_in, width), rng))

        conv("enc.in", C, action_dim, k)
        for b in range(self.strided_blocks):
            conv(f"enc.down{b}", C, C, s)
            conv(f"enc.res{b}.a", C, C, k)
            conv(f"enc.res{b}.b", C, C, k)
        conv("enc.out", d, C, k)
        conv("dec.in", C, d, k)
        for b in range(self.strided_blocks):
            conv(f"dec.up{b}", s * C, C, 1)
            conv(f"dec.res{b}.a", C, C, k)
            conv(f"dec.res{b}.b", C, C, k)
        conv("dec.out", action_dim, C, k)
        return store

    def _same(self, x: Tensor, w: Tensor) -> Tensor:
        pad = (w.shape[-1] - 1) // 2
        return conv1d(pad1d(x, pad, w.shape[-1] - 1 - pad), w, stride=1)

    def _up(self, x: Tensor, w: Tensor) -> Tensor:
        """Width-s stride-s transposed conv: every input position expands
        into s outputs, each its own linear map of that position alone.
        Mirrors the width-s stride-s downsampling conv in the encoder."""
        s = self.downsample
        y = conv1d(x, w)
        B, SC, N = y.shape
        return y.reshape(B, s, SC // s, N).transpose(0, 2, 3, 1).reshape(
            B, SC // s, N * s)

    def _encode(self, store: ParameterStore, actions: np.ndarray) -> Tensor:
        """(B, T, j) -> latent tensor (B, N, d). Pure in the parameters."""
        x = tensor(actions).transpose(0, 2, 1)
        h = self._same(x, store["enc.in"]).silu()
        for b in range(self.strided_blocks):
            h = conv1d(h, store[f"enc.down{b}"], stride=self.downsample)
            r = self._same(self._same(h, store[f"enc.res{b}.a"]).silu(),
                           store[f"enc.res{b}.b"])
            h = h + r
        z = self._same(h, store["enc.out"])
        return z.transpose(0, 2, 1)

    def _decode(self, store: ParameterStore, latents) -> Tensor:
        """(B, N, d) latent rows -> (B, T, j) actions in [-1, 1]."""
        x = latents if isinstance(latents, Tensor) else tensor(latents)
        x = x.transpose(0, 2, 1)
        h = self._same(x, store["dec.in"]).silu()
        for b in range(self.strided_blocks):
            h = self._up(h, store[f"dec.up{b}"])
            r = self._same(self._same(h, store[f"dec.res{b}.a"]).silu(),
                           store[f"dec.res{b}.b"])
            h = h + r
        y = self._same(h, store["dec.out"]).tanh()
        return y.transpose(0, 2, 1)

    # ---- estimator API ----------------------------------------------------

    def fit(self, X, y=None):
        X = as_action_batch(X)
        n, T, j = X.shape
        if T % self.rate != 0:
            raise ShapeError(f"sequence length {T} not divisible by rate {self.rate}")
        if self.holdout_fraction > 0 and n >= 2:
            n_hold = max(1, int(round(n * self.holdout_fraction)))
            order = stream(self.seed, "tokenizer-split").permutation(n)
            hold, train = X[order[:n_hold]], X[order[n_hold:]]
        else:
            hold, train = None, X

        store = self._build_params(j)
        batch_rng = stream(self.seed, "tokenizer-batches")
        reset_rng = stream(self.seed, "tokenizer-resets")
        K, d = self.codebook_size, self.code_dim

        codes = counts = sums = None
        losses = []
        for step_i in range(self.steps):
            idx = batch_rng.integers(0, len(train), size=min(self.batch_size, len(train)))
            batch = train[idx]
            z = self._encode(store, batch)
            flat = z.data.reshape(-1, d)
            if codes is None:
                # codebook bootstrapped from the first batch of encoder outputs;
                # usage starts at the dead threshold so a code must actually be
                # assigned to stay alive past the first reset sweep
                picks = stream(self.seed, "tokenizer-codebook-init").integers(
                    0, flat.shape[0], size=K)
                codes = flat[picks].copy()
                counts = np.full(K, self.dead_code_threshold)
                sums = codes * counts[:, None]
            assign = quantize(flat, codes)
            zq = codes[assign].reshape(z.shape)
            # straight-through: decoder sees quantized values, encoder gets
            # the reconstruction gradient as if it produced them
            dec_in = z + tensor(zq - z.data)
            recon = self._decode(store, dec_in)
            loss = vq_loss(tensor(batch), recon, z, zq,
                           self.rec_weight, self.commit_weight)
            store.zero_grad()
            loss.backward()
            adam_step(store, store.gradients(), lr=self._lr_at(step_i))
            codes = ema_update(counts, sums, flat, assign, self.ema_decay)
            if self.enable_resets and (step_i + 1) % self.reset_interval == 0:
                reset_dead_codes(codes, counts, sums, flat,
                                 self.dead_code_threshold, reset_rng)
            losses.append(loss.item())

        self.action_dim_ = j
        self.n_tokens_ = T // self.rate
        self.seq_len_ = T
        self.params_ = store
        self.codes_ = codes
        self.ema_counts_ = counts
        self.ema_sums_ = sums
        self.loss_curve_ = np.asarray(losses)
        self.usage_fraction_ = float(np.mean(counts >= self.dead_code_threshold))
        self.train_l1_ = self.reconstruction_l1(train)
        self.holdout_l1_ = self.reconstruction_l1(hold) if hold is not None else None
        return self

    def transform(self, X) -> np.ndarray:
        check_fitted(self, "codes_")
        X = as_action_batch(X, self.action_dim_)
        z = self._encode(self.params_, X).data
        flat = quantize(z.reshape(-1, self.code_dim), self.codes_)
        return flat.reshape(X.shape[0], -1)

    def inverse_transform(self, tokens) -> np.ndarray:
        check_fitted(self, "codes_")
        tokens = as_token_batch(tokens, self.codebook_size)
        latents = self.codes_[tokens]
        return self._decode(self.params_, latents).data

    def encode_latents(self, X) -> np.ndarray:
        check_fitted(self, "codes_")
        return self._encode(self.params_, as_action_batch(X, self.action_dim_)).data

    def reconstruct(self, X) -> np.ndarray:
        return self.inverse_transform(self.transform(X))

    def reconstruction_l1(self, X) -> float:
        """Mean absolute per-component reconstruction error."""
        X = as_action_batch(X, self.action_dim_)
        return float(np.mean(np.abs(X - self.reconstruct(X))))

    def reconstruction_l2_per_step(self, X) -> float:
        """Mean over steps of the squared L2 action error."""
        X = as_action_batch(X, self.action_dim_)
        return float(np.mean(np.sum((X - self.reconstruct(X)) ** 2, axis=2)))

    def score(self, X, y=None) -> float:
        return -self.reconstruction_l1(X)

    # ---- checkpoint state -------------------------------------------------

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Fitted state as named arrays; constructor params travel as config."""
        check_fitted(self, "codes_")
        hold = np.nan if self.holdout_l1_ is None else self.holdout_l1_
        out = {
            "meta": np.array([self.action_dim_, self.n_tokens_, self.seq_len_],
                             dtype=np.float64),
            "metrics": np.array([self.usage_fraction_, self.train_l1_, hold]),
            "codes": self.codes_,
            "ema_counts": self.ema_counts_,
            "ema_sums": self.ema_sums_,
            "loss_curve": self.loss_curve_,
        }
        for name, arr in self.params_.state_arrays().items():
            out["param." + name] = arr
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]):
        try:
            meta = arrays["meta"]
        except KeyError:
            raise ParameterError("tokenizer state missing 'meta' array") from None
        if arrays["codes"].shape != (self.codebook_size, self.code_dim):
            raise CompatibilityError(
                f"codebook {arrays['codes'].shape} does not match configured "
                f"({self.codebook_size}, {self.code_dim})")
        self.action_dim_ = int(meta[0])
        self.n_tokens_ = int(meta[1])
        self.seq_len_ = int(meta[2])
        store = self._build_params(self.action_dim_)
        store.load_arrays({k[len("param."):]: v for k, v in arrays.items()
                           if k.startswith("param.")})
        self.params_ = store
        self.codes_ = np.asarray(arrays["codes"], dtype=np.float64).copy()
        self.ema_counts_ = arrays["ema_counts"].copy()
        self.ema_sums_ = arrays["ema_sums"].copy()
        self.loss_curve_ = arrays["loss_curve"].copy()
        self.usage_fraction_ = float(arrays["metrics"][0])
        self.train_l1_ = float(arrays["metrics"][1])
        h = float(arrays["metrics"][2])
        self.holdout_l1_ = None if np.isnan(h) else h
        return self
