"""Minimal differentiable-network kernel in float64 numpy.

Two architectures live here: the scorer (one hidden rectifier layer, one
raw output score) shared by every base model and the unified model, and
the sequence predictor (two-layer bidirectional LSTM followed by a small
fully-connected head) that forecasts the next epoch's score vectors.
Gradients are hand-written reverse mode; both nets keep their parameters
in one flat vector so optimizer steps, broadcasting and checkpointing are
single array operations.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import CheckpointError, ShapeError

CHECKPOINT_MAGIC = b"AHL1"


def _sigmoid(x):
    # piecewise form avoids overflow warnings for large |x|
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _uniform_block(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


class ScorerNet:
    """d -> hidden -> 1 scorer: ``score = W2 . relu(W1 x + b1) + b2``.

    Parameters are a flat vector in declaration order W1, b1, W2, b2.
    """

    def __init__(self, dim: int, hidden: int, theta: np.ndarray):
        self.dim = dim
        self.hidden = hidden
        expected = self.param_count(dim, hidden)
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (expected,):
            raise ShapeError(f"scorer wants {expected} parameters, got {theta.shape}")
        self.theta = theta

    @staticmethod
    def param_count(dim: int, hidden: int) -> int:
        return dim * hidden + hidden + hidden + 1

    @classmethod
    def init(cls, dim: int, hidden: int, rng: np.random.Generator) -> "ScorerNet":
        w1 = _uniform_block(rng, (hidden, dim), dim)
        b1 = _uniform_block(rng, (hidden,), dim)
        w2 = _uniform_block(rng, (hidden,), hidden)
        b2 = _uniform_block(rng, (1,), hidden)
        return cls(dim, hidden, np.concatenate([w1.ravel(), b1, w2, b2]))

    def copy(self) -> "ScorerNet":
        return ScorerNet(self.dim, self.hidden, self.theta.copy())

    def _views(self):
        d, h = self.dim, self.hidden
        w1 = self.theta[: d * h].reshape(h, d)
        b1 = self.theta[d * h : d * h + h]
        w2 = self.theta[d * h + h : d * h + 2 * h]
        b2 = self.theta[-1]
        return w1, b1, w2, b2

    def forward(self, x: np.ndarray):
        """Scores for a batch (n, d) -> (n,), or a single vector -> float."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        X = x[None, :] if single else x
        if X.shape[1] != self.dim:
            raise ShapeError(f"input dim {X.shape[1]} != net dim {self.dim}")
        scores, _ = self.forward_with_cache(X)
        return float(scores[0]) if single else scores

    def forward_with_cache(self, X):
        w1, b1, w2, b2 = self._views()
        z1 = X @ w1.T + b1
        a1 = np.maximum(z1, 0.0)
        scores = a1 @ w2 + b2
        return scores, (X, z1, a1)

    def backward(self, cache, dscores: np.ndarray) -> np.ndarray:
        """Gradient of sum(dscores . scores) w.r.t. the flat parameters."""
        X, z1, a1 = cache
        w1, b1, w2, b2 = self._views()
        dw2 = a1.T @ dscores
        db2 = dscores.sum()
        da1 = np.outer(dscores, w2)
        dz1 = da1 * (z1 > 0)
        dw1 = dz1.T @ X
        db1 = dz1.sum(axis=0)
        return np.concatenate([dw1.ravel(), db1, dw2, [db2]])

    def descriptor(self) -> dict:
        return {"kind": "scorer", "dim": self.dim, "hidden": self.hidden}


class SequencePredictor:
    """Forecasts the next score vector from a history window.

    Input is (n, K, T); each of the two stacked layers runs one LSTM of
    hidden size 7 per direction, the final states of the last layer's two
    directions feed a 14-unit rectifier layer and a linear map back to T.
    """

    HIDDEN = 7
    FC_HIDDEN = 2 * HIDDEN

    def __init__(self, t_dim: int, theta: np.ndarray):
        self.t_dim = t_dim
        self._blocks = self._block_table(t_dim)
        expected = sum(int(np.prod(shape)) for _, shape, _ in self._blocks)
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (expected,):
            raise ShapeError(f"sequence net wants {expected} parameters, got {theta.shape}")
        self.theta = theta
        self._offsets = {}
        pos = 0
        for name, shape, _ in self._blocks:
            size = int(np.prod(shape))
            self._offsets[name] = (pos, shape)
            pos += size

    @classmethod
    def _block_table(cls, t_dim):
        # (name, shape, fan_in); recurrent and bias blocks scale with the
        # hidden width, input maps with their input width
        H = cls.HIDDEN
        table = []
        for layer, in_dim in (("l1", t_dim), ("l2", 2 * H)):
            for direction in ("f", "b"):
                table.append((f"{layer}{direction}.W", (4 * H, in_dim), in_dim))
                table.append((f"{layer}{direction}.U", (4 * H, H), H))
                table.append((f"{layer}{direction}.b", (4 * H,), H))
        table.append(("fc.W", (cls.FC_HIDDEN, 2 * H), 2 * H))
        table.append(("fc.b", (cls.FC_HIDDEN,), 2 * H))
        table.append(("out.W", (t_dim, cls.FC_HIDDEN), cls.FC_HIDDEN))
        table.append(("out.b", (t_dim,), cls.FC_HIDDEN))
        return table

    @classmethod
    def init(cls, t_dim: int, rng: np.random.Generator) -> "SequencePredictor":
        parts = [
            _uniform_block(rng, shape, fan).ravel()
            for _, shape, fan in cls._block_table(t_dim)
        ]
        return cls(t_dim, np.concatenate(parts))

    def copy(self) -> "SequencePredictor":
        return SequencePredictor(self.t_dim, self.theta.copy())

    def block(self, name: str) -> np.ndarray:
        pos, shape = self._offsets[name]
        return self.theta[pos : pos + int(np.prod(shape))].reshape(shape)

    def _grad_block(self, grad, name):
        pos, shape = self._offsets[name]
        return grad[pos : pos + int(np.prod(shape))].reshape(shape)

    def forward(self, history: np.ndarray) -> np.ndarray:
        """(n, K, T) history -> (n, T) prediction; also accepts (K, T)."""
        out, _ = self.forward_with_cache(history)
        return out

    def forward_with_cache(self, history):
        S = np.asarray(history, dtype=np.float64)
        single = S.ndim == 2
        if single:
            S = S[None, :, :]
        if S.ndim != 3 or S.shape[2] != self.t_dim:
            raise ShapeError(f"history must be (n, K, {self.t_dim}), got {S.shape}")
        h1f, cache1f = self._lstm_forward(S, "l1f")
        h1b, cache1b = self._lstm_forward(S[:, ::-1], "l1b")
        u = np.concatenate([h1f, h1b[:, ::-1]], axis=2)
        h2f, cache2f = self._lstm_forward(u, "l2f")
        h2b, cache2b = self._lstm_forward(u[:, ::-1], "l2b")
        head = np.concatenate([h2f[:, -1], h2b[:, -1]], axis=1)
        wf, bf = self.block("fc.W"), self.block("fc.b")
        wo, bo = self.block("out.W"), self.block("out.b")
        zf = head @ wf.T + bf
        af = np.maximum(zf, 0.0)
        out = af @ wo.T + bo
        cache = (S, cache1f, cache1b, u, cache2f, cache2b, head, zf, af, single)
        return (out[0] if single else out), cache

    def backward(self, cache, dout: np.ndarray) -> np.ndarray:
        """Gradient of sum(dout . output) w.r.t. the flat parameters."""
        S, cache1f, cache1b, u, cache2f, cache2b, head, zf, af, single = cache
        dout = np.asarray(dout, dtype=np.float64)
        if single:
            dout = dout[None, :]
        grad = np.zeros_like(self.theta)
        H = self.HIDDEN
        n, K, _ = S.shape

        wf, wo = self.block("fc.W"), self.block("out.W")
        self._grad_block(grad, "out.W")[...] = dout.T @ af
        self._grad_block(grad, "out.b")[...] = dout.sum(axis=0)
        daf = dout @ wo
        dzf = daf * (zf > 0)
        self._grad_block(grad, "fc.W")[...] = dzf.T @ head
        self._grad_block(grad, "fc.b")[...] = dzf.sum(axis=0)
        dhead = dzf @ wf

        dh2f = np.zeros((n, K, H))
        dh2f[:, -1] = dhead[:, :H]
        dh2b = np.zeros((n, K, H))
        dh2b[:, -1] = dhead[:, H:]
        du_f = self._lstm_backward(cache2f, dh2f, grad, "l2f")
        du_b = self._lstm_backward(cache2b, dh2b, grad, "l2b")
        du = du_f + du_b[:, ::-1]

        dh1f = du[:, :, :H]
        dh1b = du[:, :, H:][:, ::-1]
        self._lstm_backward(cache1f, dh1f, grad, "l1f")
        self._lstm_backward(cache1b, dh1b, grad, "l1b")
        return grad

    def _lstm_forward(self, x_seq, prefix):
        W, U, b = self.block(f"{prefix}.W"), self.block(f"{prefix}.U"), self.block(f"{prefix}.b")
        H = self.HIDDEN
        n, K, _ = x_seq.shape
        h = np.zeros((n, H))
        c = np.zeros((n, H))
        h_seq = np.empty((n, K, H))
        steps = []
        for t in range(K):
            x_t = x_seq[:, t]
            z = x_t @ W.T + h @ U.T + b
            i = _sigmoid(z[:, :H])
            f = _sigmoid(z[:, H : 2 * H])
            g = np.tanh(z[:, 2 * H : 3 * H])
            o = _sigmoid(z[:, 3 * H :])
            c_new = f * c + i * g
            tanh_c = np.tanh(c_new)
            h_new = o * tanh_c
            steps.append((x_t, h, c, i, f, g, o, tanh_c))
            h, c = h_new, c_new
            h_seq[:, t] = h_new
        return h_seq, steps

    def _lstm_backward(self, steps, dh_out, grad, prefix):
        W = self.block(f"{prefix}.W")
        U = self.block(f"{prefix}.U")
        dW = self._grad_block(grad, f"{prefix}.W")
        dU = self._grad_block(grad, f"{prefix}.U")
        db = self._grad_block(grad, f"{prefix}.b")
        H = self.HIDDEN
        n, K, _ = dh_out.shape
        dx_seq = np.empty((n, K, W.shape[1]))
        dh_next = np.zeros((n, H))
        dc_next = np.zeros((n, H))
        for t in reversed(range(K)):
            x_t, h_prev, c_prev, i, f, g, o, tanh_c = steps[t]
            dh = dh_out[:, t] + dh_next
            do = dh * tanh_c
            dc = dc_next + dh * o * (1.0 - tanh_c ** 2)
            di = dc * g
            dg = dc * i
            df = dc * c_prev
            dc_next = dc * f
            dz = np.concatenate(
                [di * i * (1 - i), df * f * (1 - f), dg * (1 - g ** 2), do * o * (1 - o)],
                axis=1,
            )
            dW += dz.T @ x_t
            dU += dz.T @ h_prev
            db += dz.sum(axis=0)
            dx_seq[:, t] = dz @ W
            dh_next = dz @ U
        return dx_seq

    def descriptor(self) -> dict:
        return {"kind": "sequence", "t_dim": self.t_dim}


class AdamState:
    """Bias-corrected Adam. Moments are lazily sized on the first step;
    one state must not be shared across threads."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr <= 0:
            raise ValueError("learning rate must be > 0")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, theta: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(theta)
            self.v = np.zeros_like(theta)
        if grad.shape != theta.shape:
            raise ShapeError("gradient/parameter shape mismatch")
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad ** 2
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return theta - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def adam_step(state: AdamState, theta: np.ndarray, grad: np.ndarray):
    """Functional form: returns (updated theta, same state advanced by one)."""
    return state.step(theta, grad), state


def save_checkpoint(path, net) -> None:
    """Versioned binary checkpoint: magic, descriptor, raw float64 params."""
    desc = json.dumps(net.descriptor(), sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(desc)))
        fh.write(desc)
        fh.write(np.ascontiguousarray(net.theta, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {raw[:4]!r}")
    (desc_len,) = struct.unpack("<I", raw[4:8])
    desc = json.loads(raw[8 : 8 + desc_len].decode("utf-8"))
    theta = np.frombuffer(raw[8 + desc_len :], dtype="<f8").copy()
    if desc.get("kind") == "scorer":
        return ScorerNet(int(desc["dim"]), int(desc["hidden"]), theta)
    if desc.get("kind") == "sequence":
        return SequencePredictor(int(desc["t_dim"]), theta)
    raise CheckpointError(f"{path}: unknown architecture {desc.get('kind')!r}")
