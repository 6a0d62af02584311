"""Hierarchical recurrent encoder with time-interval and subsequence attention, plus two task heads.

Shapes use B (batch), L (padded sequence length), Q (padded subsequence count),
F (features per station), N (stations per sample).
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor, glorot

ENCODERS = ("hierarchical", "local", "global")


@dataclass(frozen=True)
class ModelConfig:
    F: int = 7
    N: int = 7
    K: int = 16
    d_l: int = 8
    d_b: int = 64
    d_u: int = 64
    d_f: int = 32
    T: int = 3
    num_modes: int = 3
    encoder: str = "hierarchical"
    dt_scale: float = 60.0  # seconds per unit fed to the time attention

    def __post_init__(self):
        for name in ("F", "N", "K", "d_l", "d_b", "d_u", "d_f", "T"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.num_modes < 2:
            raise ValueError("num_modes must be >= 2")
        if self.encoder not in ENCODERS:
            raise ValueError(f"encoder must be one of {ENCODERS}")

    @property
    def bottom_input(self) -> int:
        return self.F * self.N if self.encoder == "global" else self.N * self.d_l

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**d)


TINY = ModelConfig(F=4, N=3, K=2, d_l=4, d_b=4, d_u=4, d_f=4, T=2)


def _lstm_params(store: ParamStore, rng, prefix: str, n_in: int, hid: int) -> None:
    W = glorot(rng, (n_in + hid, 4 * hid), n_in + hid, 4 * hid)
    store.add(f"{prefix}.Wx", W[:n_in])
    store.add(f"{prefix}.Wh", W[n_in:])
    b = np.zeros(4 * hid)
    b[hid : 2 * hid] = 1.0  # forget gate
    store.add(f"{prefix}.b", b)


def _dense(store: ParamStore, rng, prefix: str, n_in: int, n_out: int) -> None:
    store.add(f"{prefix}.W", glorot(rng, (n_in, n_out), n_in, n_out))
    store.add(f"{prefix}.b", np.zeros(n_out))


def mode_head_names(cfg: ModelConfig) -> list[str]:
    names = []
    for m in range(1, cfg.T):
        names += [f"mode.h{m}.W", f"mode.h{m}.b"]
    return names + ["mode.out.W", "mode.out.b"]


def init_params(cfg: ModelConfig, seed: int = 0) -> ParamStore:
    """Glorot-uniform weights, zero biases, forget-gate biases at 1, log-variances at 0."""
    rng = np.random.default_rng(seed)
    store = ParamStore()
    if cfg.encoder in ("hierarchical", "local"):
        store.add("conv.W", glorot(rng, (cfg.K, cfg.F), cfg.F, cfg.K))
        store.add("conv.b", np.zeros(cfg.K))
        _lstm_params(store, rng, "local", cfg.K, cfg.d_l)
    if cfg.encoder == "local":
        _dense(store, rng, "dense", cfg.N * cfg.d_l, cfg.d_f)
    else:
        store.add("time.w", glorot(rng, (1, 1), 1, 1))
        store.add("time.b", np.zeros(1))
        _lstm_params(store, rng, "bottom", cfg.bottom_input, cfg.d_b)
        _lstm_params(store, rng, "upper", cfg.d_b, cfg.d_u)
        store.add("att.W", glorot(rng, (cfg.d_u, cfg.d_u), cfg.d_u, cfg.d_u))
        store.add("att.b", np.zeros(cfg.d_u))
        store.add("att.v", glorot(rng, (cfg.d_u, 1), cfg.d_u, 1))
        store.add("out.Wb", glorot(rng, (cfg.d_b, cfg.d_f), cfg.d_b + cfg.d_u, cfg.d_f))
        store.add("out.Wu", glorot(rng, (cfg.d_u, cfg.d_f), cfg.d_b + cfg.d_u, cfg.d_f))
        store.add("out.b", np.zeros(cfg.d_f))
    _dense(store, rng, "pos", cfg.d_f, 2)
    for m in range(1, cfg.T):
        _dense(store, rng, f"mode.h{m}", cfg.d_f, cfg.d_f)
    _dense(store, rng, "mode.out", cfg.d_f, cfg.num_modes)
    store.add("unc.s1", np.zeros(1))
    store.add("unc.s2", np.zeros(1))
    return store


# --- building blocks --------------------------------------------------------


def lstm_cell(gx: Tensor, h: Optional[Tensor], c: Optional[Tensor], Wh: Tensor, hid: int,
              forget_scale: Optional[Tensor] = None):
    """One LSTM step. `gx` holds the input projection (+bias) for the 4 gates [z, f, g, o].

    With `forget_scale` a, the forget gate is multiplied by a and the input gate by (1 - a).
    A None state means the zero state.
    """
    gates = gx if h is None else ad.add(gx, ad.matmul(h, Wh))
    z = ad.tanh(ad.slice_lastdim(gates, 0, hid))
    f = ad.sigmoid(ad.slice_lastdim(gates, hid, 2 * hid))
    g = ad.sigmoid(ad.slice_lastdim(gates, 2 * hid, 3 * hid))
    o = ad.sigmoid(ad.slice_lastdim(gates, 3 * hid, 4 * hid))
    if forget_scale is not None:
        f = ad.scale_rows(f, forget_scale)
        g = ad.scale_rows(g, 1.0 - forget_scale)
    c_new = ad.mul(g, z) if c is None else ad.add(ad.mul(f, c), ad.mul(g, z))
    h_new = ad.mul(o, ad.tanh(c_new))
    return h_new, c_new, f


def local_predictor(X, store: ParamStore, cfg: ModelConfig) -> Tensor:
    """(..., F, N) feature matrices -> (..., N*d_l) concatenated station-order LSTM states."""
    X = ad.as_tensor(X)
    lead = X.shape[:-2]
    conv = ad.relu(ad.conv1d_full_height(X, store.tensor("conv.W"), store.tensor("conv.b")))
    perm = tuple(range(len(lead))) + (len(lead) + 1, len(lead))
    seq = ad.reshape(ad.transpose(conv, perm), (-1, cfg.N, cfg.K))  # (M, N, K)
    gx = ad.add(ad.matmul(seq, store.tensor("local.Wx")), store.tensor("local.b"))
    Wh = store.tensor("local.Wh")
    h = c = None
    states = []
    for n in range(cfg.N):
        h, c, _ = lstm_cell(ad.select(gx, n, axis=1), h, c, Wh, cfg.d_l)
        states.append(h)
    return ad.reshape(ad.concat(states, axis=-1), lead + (cfg.N * cfg.d_l,))


def subsequence_starts(subseq: np.ndarray) -> np.ndarray:
    """True where a step opens a new subsequence (first step, or subsequence id changed)."""
    starts = np.ones(subseq.shape, dtype=bool)
    starts[:, 1:] = subseq[:, 1:] != subseq[:, :-1]
    return starts


def time_attention(delta_t: np.ndarray, store: ParamStore, cfg: ModelConfig) -> Tensor:
    """a = tanh(w * dt + b) per step, dt in units of cfg.dt_scale seconds; shape (B, L)."""
    dt = np.asarray(delta_t, dtype=float)[..., None] / cfg.dt_scale
    a = ad.tanh(ad.add(ad.matmul(ad.Tensor(dt), store.tensor("time.w")), store.tensor("time.b")))
    return ad.reshape(a, dt.shape[:-1])


def bottom_layer(P: Tensor, delta_t: np.ndarray, subseq: np.ndarray, store: ParamStore, cfg: ModelConfig):
    """Time-aware LSTM over the steps of each subsequence, state reset at subsequence starts.

    Returns hidden states (B, L, d_b), time attention a (B, L), and the scaled forget gates per step.
    """
    B, L = subseq.shape
    a_all = time_attention(delta_t, store, cfg)
    gx_all = ad.add(ad.matmul(P, store.tensor("bottom.Wx")), store.tensor("bottom.b"))
    Wh = store.tensor("bottom.Wh")
    keep = (~subsequence_starts(subseq)).astype(float)
    h = c = None
    states, forget = [], []
    for t in range(L):
        if t > 0:
            h = ad.scale_rows(h, keep[:, t])
            c = ad.scale_rows(c, keep[:, t])
        a_t = ad.select(a_all, t, axis=1)
        h, c, f = lstm_cell(ad.select(gx_all, t, axis=1), h, c, Wh, cfg.d_b, forget_scale=a_t)
        states.append(h)
        forget.append(f)
    return ad.stack(states, axis=1), a_all, forget


def assignment(subseq: np.ndarray, mask: np.ndarray, Q: Optional[int] = None) -> np.ndarray:
    """One-hot (B, L, Q) step-to-subsequence map; padded steps map nowhere."""
    B, L = subseq.shape
    Q = int(subseq.max()) + 1 if Q is None else Q
    A = np.zeros((B, L, max(Q, 1)))
    b, t = np.nonzero(np.asarray(mask) > 0)
    A[b, t, subseq[b, t]] = 1.0
    return A


def upper_layer(Hb: Tensor, A: np.ndarray, store: ParamStore, cfg: ModelConfig):
    """Sum bottom states per subsequence, run an LSTM across subsequences, attend.

    Returns context vectors s (B, Q, d_u), attention weights beta (B, Q), upper states (B, Q, d_u).
    """
    qmask = A.sum(axis=1) > 0
    Pu = ad.matmul(ad.Tensor(np.swapaxes(A, 1, 2)), Hb)  # (B, Q, d_b)
    Q = A.shape[2]
    gx_all = ad.add(ad.matmul(Pu, store.tensor("upper.Wx")), store.tensor("upper.b"))
    Wh = store.tensor("upper.Wh")
    h = c = None
    states = []
    for i in range(Q):
        h, c, _ = lstm_cell(ad.select(gx_all, i, axis=1), h, c, Wh, cfg.d_u)
        states.append(h)
    Hu = ad.stack(states, axis=1)
    s, beta = attend(Hu, qmask, store)
    return s, beta, Hu


def attend(Hu: Tensor, qmask: np.ndarray, store: ParamStore):
    """Scores u = v^T tanh(W h + b), beta = softmax over real subsequences, s = beta * h."""
    score = ad.tanh(ad.add(ad.matmul(Hu, store.tensor("att.W")), store.tensor("att.b")))
    u = ad.reshape(ad.matmul(score, store.tensor("att.v")), qmask.shape)
    beta = ad.softmax_lastdim(u, mask=qmask)
    return ad.scale_rows(Hu, beta), beta


def output_layer(Hb: Tensor, s_step: Tensor, store: ParamStore) -> Tensor:
    """v = tanh(Wb h_b + Wu s + b), each step paired with its subsequence's context vector."""
    z = ad.add(ad.matmul(Hb, store.tensor("out.Wb")), ad.matmul(s_step, store.tensor("out.Wu")))
    return ad.tanh(ad.add(z, store.tensor("out.b")))


def position_head(V: Tensor, store: ParamStore) -> Tensor:
    return ad.sigmoid(ad.linear(V, store.tensor("pos.W"), store.tensor("pos.b")))


def mode_logits(V: Tensor, store: ParamStore, cfg: ModelConfig) -> Tensor:
    h = V
    for m in range(1, cfg.T):
        h = ad.sigmoid(ad.linear(h, store.tensor(f"mode.h{m}.W"), store.tensor(f"mode.h{m}.b")))
    return ad.linear(h, store.tensor("mode.out.W"), store.tensor("mode.out.b"))


def mode_head(V: Tensor, store: ParamStore, cfg: ModelConfig) -> Tensor:
    """T-1 sigmoid FC layers, a final FC layer, softmax over modes."""
    return ad.softmax_lastdim(mode_logits(V, store, cfg))


@dataclass
class SequenceOutput:
    positions: Tensor  # (B, L, 2) in the unit box
    mode_probs: Tensor  # (B, L, num_modes)
    features: Tensor  # (B, L, d_f)
    beta: Optional[Tensor] = None  # (B, Q)
    time_gate: Optional[Tensor] = None  # (B, L)


def encode(features, delta_t, subseq, mask, store: ParamStore, cfg: ModelConfig):
    """Shared encoder: (B, L, F, N) inputs -> (B, L, d_f) feature vectors."""
    X = ad.as_tensor(features)
    B, L = X.shape[:2]
    subseq = np.asarray(subseq)
    if cfg.encoder == "local":
        p = local_predictor(X, store, cfg)
        return ad.tanh(ad.linear(p, store.tensor("dense.W"), store.tensor("dense.b"))), None, None
    if cfg.encoder == "global":
        P = ad.reshape(X, (B, L, cfg.F * cfg.N))
    else:
        P = local_predictor(X, store, cfg)
    Hb, a_all, _ = bottom_layer(P, delta_t, subseq, store, cfg)
    A = assignment(subseq, mask)
    s, beta, _ = upper_layer(Hb, A, store, cfg)
    s_step = ad.matmul(ad.Tensor(A), s)
    return output_layer(Hb, s_step, store), beta, a_all


def prnet_forward(features, delta_t, subseq, mask, store: ParamStore, cfg: ModelConfig) -> SequenceOutput:
    """Full forward pass; the encoder output feeds both heads."""
    V, beta, a_all = encode(features, delta_t, subseq, mask, store, cfg)
    return SequenceOutput(position_head(V, store), mode_head(V, store, cfg), V, beta, a_all)
