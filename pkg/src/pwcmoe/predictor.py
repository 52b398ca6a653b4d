"""Importance predictor: estimates each token's aggregation weight from its
embedding alone, so the client can rank non-sensitive tokens without running
the remote experts.

Architecture: linear projection to a reduced width, a stack of post-norm
transformer encoder blocks (multi-head self-attention + feedforward, residual
connections, layer norm), and a scalar scoring head normalized by softmax
over the sequence. No positional encoding: importance is content-based, and
the model stays permutation-equivariant by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import tensor as T
from .rng import RngStream
from .tensor import Tensor


@dataclass
class PredictorConfig:
    d: int
    proj_dim: int = 32
    layers: int = 2
    heads: int = 4
    learning_rate: float = 2e-3
    epochs: int = 30
    batch_size: int = 16

    def __post_init__(self):
        if self.proj_dim > self.d:
            raise ValueError("proj_dim must not exceed the embedding dim")
        if self.layers < 1:
            raise ValueError("need at least one encoder layer")
        if self.proj_dim % self.heads != 0:
            raise ValueError(
                f"heads ({self.heads}) must divide proj_dim ({self.proj_dim})"
            )


@dataclass
class ImportanceRecord:
    embeddings: np.ndarray  # (L, d) token embeddings
    target: np.ndarray      # (L,) ground-truth aggregation weights

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        self.target = np.asarray(self.target, dtype=np.float64).reshape(-1)
        if self.embeddings.shape[0] != self.target.shape[0]:
            raise ValueError("embeddings/target length mismatch")
        if self.target.min() < 0 or abs(self.target.sum() - 1.0) > 1e-6:
            raise ValueError("target is not a distribution")


class ImportancePredictor:
    def __init__(self, config: PredictorConfig, rng: RngStream):
        self.config = config
        r = rng.spawn("predictor-init")
        d, p = config.d, config.proj_dim
        self.w_in = self._p(r, (d, p), 1.0 / math.sqrt(d))
        self.b_in = self._p(r, (p,), 0.0)
        self.blocks = []
        for _ in range(config.layers):
            blk = {
                "wq": self._p(r, (p, p), 1.0 / math.sqrt(p)),
                "wk": self._p(r, (p, p), 1.0 / math.sqrt(p)),
                "wv": self._p(r, (p, p), 1.0 / math.sqrt(p)),
                "wo": self._p(r, (p, p), 1.0 / math.sqrt(p)),
                "bo": self._p(r, (p,), 0.0),
                "ln1_g": Tensor(np.ones(p), requires_grad=True),
                "ln1_b": Tensor(np.zeros(p), requires_grad=True),
                "ffn_w1": self._p(r, (p, 2 * p), math.sqrt(2.0 / p)),
                "ffn_b1": self._p(r, (2 * p,), 0.0),
                "ffn_w2": self._p(r, (2 * p, p), math.sqrt(2.0 / (2 * p))),
                "ffn_b2": self._p(r, (p,), 0.0),
                "ln2_g": Tensor(np.ones(p), requires_grad=True),
                "ln2_b": Tensor(np.zeros(p), requires_grad=True),
            }
            self.blocks.append(blk)
        self.w_score = self._p(r, (p, 1), 1.0 / math.sqrt(p))
        self.b_score = self._p(r, (1,), 0.0)

    @staticmethod
    def _p(rng: RngStream, shape, scale: float) -> Tensor:
        data = rng.normal(0.0, 1.0, shape) * scale if scale else np.zeros(shape)
        return Tensor(data, requires_grad=True)

    def parameters(self) -> dict:
        params = {"w_in": self.w_in, "b_in": self.b_in,
                  "w_score": self.w_score, "b_score": self.b_score}
        for i, blk in enumerate(self.blocks):
            for k, v in blk.items():
                params[f"block{i}.{k}"] = v
        return params

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()

    def _attention(self, h: Tensor, blk: dict) -> Tensor:
        p = self.config.proj_dim
        dh = p // self.config.heads
        q = T.matmul(h, blk["wq"])
        k = T.matmul(h, blk["wk"])
        v = T.matmul(h, blk["wv"])
        heads = []
        for i in range(self.config.heads):
            qh = T.narrow(q, 1, i * dh, dh)
            kh = T.narrow(k, 1, i * dh, dh)
            vh = T.narrow(v, 1, i * dh, dh)
            scores = T.matmul(qh, T.transpose(kh)) * (1.0 / math.sqrt(dh))
            heads.append(T.matmul(T.softmax(scores, axis=-1), vh))
        return T.matmul(T.concat(heads, axis=1), blk["wo"]) + blk["bo"]

    def predict(self, embeddings) -> Tensor:
        """Importance distribution over the sequence; shape (L, 1), sums to 1."""
        x = embeddings if isinstance(embeddings, Tensor) else Tensor(embeddings)
        h = T.matmul(x, self.w_in) + self.b_in
        for blk in self.blocks:
            h = T.layer_norm(h + self._attention(h, blk), blk["ln1_g"], blk["ln1_b"])
            ffn = T.matmul(T.relu(T.matmul(h, blk["ffn_w1"]) + blk["ffn_b1"]),
                           blk["ffn_w2"]) + blk["ffn_b2"]
            h = T.layer_norm(h + ffn, blk["ln2_g"], blk["ln2_b"])
        scores = T.matmul(h, self.w_score) + self.b_score
        return T.softmax(scores, axis=0)

    def scores_np(self, embeddings: np.ndarray) -> np.ndarray:
        with T.no_grad():
            return self.predict(embeddings).data.reshape(-1)


def kl_loss(alpha, alpha_hat: Tensor) -> Tensor:
    """KL(alpha || alpha_hat) in nats, with 0 ln 0 taken as 0."""
    alpha = np.asarray(getattr(alpha, "data", alpha), dtype=np.float64).reshape(-1)
    L = alpha.shape[0]
    ah_flat = T.reshape(alpha_hat, (L, 1))
    support = np.flatnonzero(alpha > 0)
    if np.any(ah_flat.data.reshape(-1)[support] <= 0):
        raise ValueError("alpha_hat has zero mass where alpha > 0")
    ah = T.gather_rows(ah_flat, support)
    a = alpha[support].reshape(-1, 1)
    const = float(np.sum(a * np.log(a)))
    return T.tsum(T.log(ah) * (-a)) + const


def collect_dataset(model, data) -> list:
    """(embedding, alpha) pairs from noise-free full-sequence forwards of a
    trained classifier."""
    records = []
    with T.no_grad():
        for seq, _ in data:
            res = model.forward(seq, mode="eval")
            records.append(ImportanceRecord(
                embeddings=res.h.data.copy(),
                target=res.alpha.data.reshape(-1).copy(),
            ))
    return records


@dataclass
class PredictorTrace:
    epochs: list = field(default_factory=list)
    mean_kl: list = field(default_factory=list)


class DivergenceError(RuntimeError):
    pass


def train_predictor(
    records: list,
    config: PredictorConfig,
    seed: int,
    log=None,
) -> tuple:
    """Adam minibatch descent on mean KL; deterministic under a fixed seed."""
    if not records:
        raise ValueError("no training records")
    predictor = ImportancePredictor(config, RngStream(seed, "predictor"))
    params = predictor.parameters()
    m = {k: np.zeros_like(p.data) for k, p in params.items()}
    v = {k: np.zeros_like(p.data) for k, p in params.items()}
    beta1, beta2, eps = 0.9, 0.999, 1e-8
    step = 0
    shuffle_rng = RngStream(seed, "predictor/shuffle")
    trace = PredictorTrace()
    n = len(records)
    for epoch in range(config.epochs):
        order = shuffle_rng.permutation(n)
        epoch_kl = []
        for start in range(0, n, config.batch_size):
            batch = [records[i] for i in order[start:start + config.batch_size]]
            predictor.zero_grad()
            loss = None
            for rec in batch:
                kl = kl_loss(rec.target, predictor.predict(rec.embeddings))
                loss = kl if loss is None else loss + kl
            loss = loss * (1.0 / len(batch))
            if not np.isfinite(loss.item()):
                raise DivergenceError(f"predictor loss diverged at epoch {epoch + 1}")
            T.backward(loss)
            epoch_kl.append(loss.item())
            step += 1
            for k, p in params.items():
                if p.grad is None:
                    continue
                m[k] = beta1 * m[k] + (1 - beta1) * p.grad
                v[k] = beta2 * v[k] + (1 - beta2) * p.grad ** 2
                mh = m[k] / (1 - beta1 ** step)
                vh = v[k] / (1 - beta2 ** step)
                p.data = p.data - config.learning_rate * mh / (np.sqrt(vh) + eps)
        trace.epochs.append(epoch + 1)
        trace.mean_kl.append(float(np.mean(epoch_kl)))
        if log:
            log(f"predictor epoch {epoch + 1}: mean KL {trace.mean_kl[-1]:.5f}")
    return predictor, trace


def save_predictor(predictor: ImportancePredictor, path: str):
    from dataclasses import asdict

    from .checkpoint import MAGIC_PREDICTOR, save_container

    save_container(path, MAGIC_PREDICTOR, asdict(predictor.config),
                   {k: p.data for k, p in predictor.parameters().items()})


def load_predictor(path: str) -> ImportancePredictor:
    import dataclasses

    from .checkpoint import MAGIC_PREDICTOR, load_container

    cfg_raw, arrays = load_container(path, MAGIC_PREDICTOR)
    casts = {"int": int, "float": float}
    kwargs = {f.name: casts[str(f.type)](cfg_raw[f.name])
              for f in dataclasses.fields(PredictorConfig)}
    predictor = ImportancePredictor(PredictorConfig(**kwargs), RngStream(0, "load"))
    for k, p in predictor.parameters().items():
        if k not in arrays:
            raise KeyError(f"{path}: missing parameter array {k!r}")
        p.data = np.asarray(arrays[k], dtype=np.float64).reshape(p.data.shape)
    return predictor


def mean_kl(predictor: ImportancePredictor, records: list) -> float:
    with T.no_grad():
        vals = [kl_loss(r.target, predictor.predict(r.embeddings)).item()
                for r in records]
    return float(np.mean(vals))
