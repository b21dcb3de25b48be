"""Shared MLP scorer with analytic gradients.

The scorer maps one meta-representation block to a scalar::

    Linear(Dropout(ReLU(Linear(... Dropout(ReLU(Linear(x)))))))

For classification it is applied to every class block with the same
parameters, giving one score per class; for regression it is applied once.
Weight matrices are stored as (out, in).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ShapeMismatch


@dataclass
class ScorerParams:
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    dropout: float = 0.1

    def __post_init__(self):
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeMismatch("weights and biases must pair up")
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            if b.shape != (W.shape[0],):
                raise ShapeMismatch(f"layer {i}: bias {b.shape} does not match weight {W.shape}")
            if i and W.shape[1] != self.weights[i - 1].shape[0]:
                raise ShapeMismatch(f"layer {i}: input width {W.shape[1]} does not chain")
        if self.weights[-1].shape[0] != 1:
            raise ShapeMismatch("the head must produce a scalar")

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def hidden_width(self) -> int:
        return self.weights[0].shape[0]

    @property
    def depth(self) -> int:
        """Number of hidden blocks (excluding the linear head)."""
        return len(self.weights) - 1

    @property
    def dtype(self):
        return self.weights[0].dtype

    def tensors(self) -> list[np.ndarray]:
        """All parameter tensors in checkpoint order: W0, b0, W1, b1, ..."""
        out = []
        for W, b in zip(self.weights, self.biases):
            out.extend((W, b))
        return out

    @classmethod
    def from_tensors(cls, tensors, dropout: float = 0.1) -> "ScorerParams":
        return cls(list(tensors[0::2]), list(tensors[1::2]), dropout)

    def copy(self) -> "ScorerParams":
        return ScorerParams([W.copy() for W in self.weights], [b.copy() for b in self.biases], self.dropout)

    def astype(self, dtype) -> "ScorerParams":
        return ScorerParams(
            [W.astype(dtype) for W in self.weights], [b.astype(dtype) for b in self.biases], self.dropout
        )

    def zeros_like(self) -> "ScorerParams":
        return ScorerParams(
            [np.zeros_like(W) for W in self.weights], [np.zeros_like(b) for b in self.biases], self.dropout
        )

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self.tensors())

    def checksum(self) -> str:
        import hashlib

        h = hashlib.sha256()
        for t in self.tensors():
            h.update(np.ascontiguousarray(t).tobytes())
        return h.hexdigest()


def init_params(input_dim: int, hidden_width: int = 256, seed: int = 0, depth: int = 3,
                dropout: float = 0.1, dtype=np.float32) -> ScorerParams:
    """Uniform fan-based (Glorot) initialization, zero biases."""
    if input_dim < 1 or hidden_width < 1 or depth < 1:
        raise ValueError("dimensions must be >= 1")
    rng = np.random.default_rng(seed)
    widths = [input_dim] + [hidden_width] * depth + [1]
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        bound = np.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
    return ScorerParams(weights, biases, dropout)


@dataclass
class ForwardTrace:
    inputs: np.ndarray
    pre: list[np.ndarray] = field(default_factory=list)
    post: list[np.ndarray] = field(default_factory=list)
    masks: list[np.ndarray | None] = field(default_factory=list)


def forward(params: ScorerParams, X: np.ndarray, rng: np.random.Generator | None = None,
            train: bool | None = None):
    """Score every row of X.

    In training mode (default: whenever ``rng`` is given) the call also
    returns a ForwardTrace, and inverted dropout is applied if ``rng`` is
    present.  Inference mode returns scores only.
    """
    X = np.asarray(X, dtype=params.dtype)
    if X.ndim != 2 or X.shape[1] != params.input_dim:
        raise ShapeMismatch(f"expected rows of width {params.input_dim}, got {X.shape}")
    if train is None:
        train = rng is not None
    trace = ForwardTrace(X) if train else None
    h = X
    keep = 1.0 - params.dropout
    scale = params.dtype.type(1.0 / keep)
    for W, b in zip(params.weights[:-1], params.biases[:-1]):
        z = h @ W.T
        z += b
        a = np.maximum(z, 0)
        mask = None
        if train and rng is not None and params.dropout > 0:
            mask = rng.random(a.shape, dtype=np.float32) < keep
            np.multiply(a, mask, out=a)
            a *= scale
        if train:
            trace.pre.append(z)
            trace.post.append(a)
            trace.masks.append(mask)
        h = a
    out = h @ params.weights[-1].T
    out += params.biases[-1]
    out = out[:, 0]
    return (out, trace) if train else out


def backward(params: ScorerParams, trace: ForwardTrace, dout: np.ndarray) -> ScorerParams:
    """Gradients of sum(dout * out) given a training-mode trace."""
    dout = np.asarray(dout, dtype=params.dtype)
    scale = params.dtype.type(1.0 / (1.0 - params.dropout))
    grads_W = [None] * len(params.weights)
    grads_b = [None] * len(params.biases)
    h_last = trace.post[-1] if trace.post else trace.inputs
    grads_W[-1] = (dout @ h_last)[None, :]
    grads_b[-1] = np.array([dout.sum()], dtype=params.dtype)
    dz = np.multiply.outer(dout, params.weights[-1][0])
    for i in range(len(params.weights) - 2, -1, -1):
        # dz holds d(loss)/d(post-activation) here; turn it into d/d(pre-activation)
        if trace.masks[i] is not None:
            np.multiply(dz, trace.masks[i], out=dz)
            dz *= scale
        np.multiply(dz, trace.pre[i] > 0, out=dz)
        h_in = trace.post[i - 1] if i > 0 else trace.inputs
        grads_W[i] = dz.T @ h_in
        grads_b[i] = dz.sum(axis=0)
        if i > 0:
            dz = dz @ params.weights[i]
    return ScorerParams(grads_W, grads_b, params.dropout)


def score_block(params: ScorerParams, block, mode: str = "infer", seed: int | None = None):
    """Score a single block.  ``mode='train'`` returns (score, trace)."""
    block = np.asarray(block)
    if block.shape != (params.input_dim,):
        raise ShapeMismatch(f"block of length {block.shape} does not match input_dim {params.input_dim}")
    if mode == "infer":
        return float(forward(params, block[None, :])[0])
    if mode == "train":
        out, trace = forward(params, block[None, :], np.random.default_rng(seed))
        return float(out[0]), trace
    raise ValueError(f"unknown mode {mode!r}")


def _as_blocks(meta) -> np.ndarray:
    blocks = getattr(meta, "blocks", meta)
    return np.asarray(blocks)


def batch_scores(params: ScorerParams, blocks: np.ndarray) -> np.ndarray:
    """Inference scores for blocks shaped (B, contexts, input_dim) -> (B, contexts)."""
    blocks = np.asarray(blocks)
    if blocks.ndim != 3 or blocks.shape[2] != params.input_dim:
        raise ShapeMismatch(f"expected (B, contexts, {params.input_dim}), got {blocks.shape}")
    B, C, D = blocks.shape
    return forward(params, blocks.reshape(B * C, D)).reshape(B, C)


def class_scores(params: ScorerParams, meta) -> np.ndarray:
    """One score per class block of a single meta-representation."""
    blocks = _as_blocks(meta)
    if blocks.ndim != 2:
        raise ShapeMismatch("a single meta-representation has shape (contexts, input_dim)")
    return batch_scores(params, blocks[None])[0]


def predict_class(scores) -> int:
    """argmax with ties going to the smallest index."""
    return int(np.argmax(np.asarray(scores)))


def loss_and_grad(params: ScorerParams, blocks, labels, task: str, rng: np.random.Generator | None = None,
                  need_grad: bool = True):
    """Mean cross-entropy (classification) or mean squared error (regression).

    ``blocks`` has shape (B, contexts, input_dim); all class blocks share
    the parameters, so their gradient contributions add up.  Dropout is
    active only when ``rng`` is supplied and ``params.dropout > 0``.
    """
    blocks = np.asarray(blocks)
    if blocks.ndim != 3 or blocks.shape[2] != params.input_dim:
        raise ShapeMismatch(f"expected (B, contexts, {params.input_dim}), got {blocks.shape}")
    B, C, D = blocks.shape
    if B == 0:
        raise ValueError("empty batch")
    if task == "regression" and C != 1:
        raise ShapeMismatch("regression meta-representations have a single context")
    labels = np.asarray(labels)
    if labels.shape != (B,):
        raise ShapeMismatch("one label per batch row is required")

    flat = blocks.reshape(B * C, D)
    if need_grad:
        out, trace = forward(params, flat, rng, train=True)
    else:
        out = forward(params, flat)
    scores = out.reshape(B, C).astype(np.float64)

    if task == "classification":
        y = labels.astype(np.int64)
        if np.any(y < 0) or np.any(y >= C):
            raise ValueError("class label out of range")
        shift = scores.max(axis=1, keepdims=True)
        expd = np.exp(scores - shift)
        total = expd.sum(axis=1, keepdims=True)
        logp = scores - shift - np.log(total)
        loss = float(-logp[np.arange(B), y].mean())
        dscores = expd / total
        dscores[np.arange(B), y] -= 1.0
        dscores /= B
    else:
        resid = scores[:, 0] - labels.astype(np.float64)
        loss = float(np.mean(resid * resid))
        dscores = (2.0 / B) * resid[:, None]

    if not need_grad:
        return loss, None
    return loss, backward(params, trace, dscores.reshape(B * C))


@dataclass
class OptimizerState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0
    kind: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


def init_optimizer(params: ScorerParams, kind: str = "adam") -> OptimizerState:
    if kind not in ("adam", "sgd"):
        raise ValueError(f"unknown optimizer {kind!r}")
    zeros = [np.zeros(t.shape) for t in params.tensors()]
    return OptimizerState(m=zeros, v=[z.copy() for z in zeros], kind=kind)


def optimizer_step(params: ScorerParams, grads: ScorerParams, state: OptimizerState, lr: float,
                   trainable=None) -> tuple[ScorerParams, OptimizerState]:
    """One Adam (bias-corrected) or plain SGD update.

    ``trainable`` optionally lists tensor positions (checkpoint order) to
    update; all others are returned untouched.
    """
    p_t = params.tensors()
    g_t = grads.tensors()
    if [t.shape for t in p_t] != [t.shape for t in g_t]:
        raise ShapeMismatch("gradient shapes do not match parameters")
    which = set(range(len(p_t))) if trainable is None else set(trainable)
    t = state.t + 1
    new_p, new_m, new_v = [], [], []
    for i, (p, g, m, v) in enumerate(zip(p_t, g_t, state.m, state.v)):
        if i not in which:
            new_p.append(p)
            new_m.append(m)
            new_v.append(v)
            continue
        if state.kind == "sgd":
            new_p.append((p - lr * g).astype(p.dtype))
            new_m.append(m)
            new_v.append(v)
            continue
        g64 = g.astype(np.float64)
        m = state.beta1 * m + (1.0 - state.beta1) * g64
        v = state.beta2 * v + (1.0 - state.beta2) * g64 * g64
        m_hat = m / (1.0 - state.beta1 ** t)
        v_hat = v / (1.0 - state.beta2 ** t)
        step = lr * m_hat / (np.sqrt(v_hat) + state.eps)
        new_p.append((p - step).astype(p.dtype))
        new_m.append(m)
        new_v.append(v)
    new_state = OptimizerState(new_m, new_v, t, state.kind, state.beta1, state.beta2, state.eps)
    return ScorerParams.from_tensors(new_p, params.dropout), new_state


def head_indices(params: ScorerParams) -> list[int]:
    """Tensor positions of the final linear head."""
    n = len(params.tensors())
    return [n - 2, n - 1]
