"""Fine-tuning of truncated SVD factors and gradient-based SLC rank selection.

Models are chains of factored linear layers ``y = U diag(sigma) V^T x`` with a
ReLU between layers. Batches are row-major: ``x`` has shape (batch, inputs).
"""
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import InvalidInput, TrainingDiverged
from .svdcore import SvdFactor, svd_decompose, truncate, truncate_to_threshold

KINDS = ("teacher-regression", "two-layer-classification")


@dataclass(frozen=True, eq=False)
class SyntheticTask:
    """Deterministic stand-in for a downstream fine-tuning dataset.

    ``teachers`` generate the labels; ``pretrained`` are perturbed copies of
    them playing the role of the checkpoint that gets decomposed.
    """

    kind: str
    input_dim: int
    output_dim: int
    sample_count: int
    seed: int
    teachers: tuple
    pretrained: tuple
    x: np.ndarray
    y: np.ndarray
    x_val: np.ndarray
    y_val: np.ndarray

    @property
    def classification(self):
        return self.kind == "two-layer-classification"

    def loss(self, factors, split="val"):
        x, y = (self.x_val, self.y_val) if split == "val" else (self.x, self.y)
        return _loss(forward_chain(factors, x)[0], y, self.classification)

    def dense_loss(self, weights, split="val"):
        fs = [(w, np.ones(w.shape[1]), np.eye(w.shape[1])) for w in weights]
        return self.loss(fs, split)

    def decompose(self, rank=None):
        """SVD of the pretrained weights, truncated to ``rank`` or the hard threshold."""
        out = []
        for w in self.pretrained:
            f = svd_decompose(w)
            out.append(truncate_to_threshold(f) if rank is None else truncate(f, min(rank, f.rank)))
        return out


def _orthogonal(rng, n):
    q, r = np.linalg.qr(rng.standard_normal((n, n)))
    return q * np.sign(np.diag(r))


def teacher_regression(input_dim=64, output_dim=64, sample_count=4096, seed=0,
                       teacher_rank=None, decay=1.0, shift=0.3, label_noise=0.1, holdout=1024):
    """Linear teacher with power-law spectrum; labels ``W x + noise``.

    ``teacher_rank`` keeps only that many nonzero singular values (a target a
    rank-k student can represent exactly).
    """
    if min(input_dim, output_dim, sample_count, holdout) < 1:
        raise InvalidInput("dimensions and sample counts must be positive")
    rng = np.random.default_rng(seed)
    n = min(input_dim, output_dim)
    a = _orthogonal(rng, output_dim)[:, :n]
    b = _orthogonal(rng, input_dim)[:, :n]
    s = 3.0 * np.arange(1, n + 1, dtype=float) ** (-decay)
    if teacher_rank is not None:
        s[teacher_rank:] = 0.0
    w = (a * s) @ b.T
    pert = rng.standard_normal(w.shape) / math.sqrt(n) * s[s > 0].mean()
    w0 = w + shift * pert
    x = rng.standard_normal((sample_count, input_dim))
    xv = rng.standard_normal((holdout, input_dim))
    y = x @ w.T + label_noise * rng.standard_normal((sample_count, output_dim))
    yv = xv @ w.T + label_noise * rng.standard_normal((holdout, output_dim))
    return SyntheticTask("teacher-regression", input_dim, output_dim, sample_count, seed,
                         (w,), (w0,), x, y, xv, yv)


def two_layer_classification(input_dim=32, hidden_dim=64, classes=10, sample_count=4096,
                             seed=0, shift=0.3, holdout=1024):
    """Labels are the argmax of a random ReLU teacher network."""
    if min(input_dim, hidden_dim, classes, sample_count, holdout) < 1:
        raise InvalidInput("dimensions and sample counts must be positive")
    rng = np.random.default_rng(seed)
    w1 = rng.standard_normal((hidden_dim, input_dim)) / math.sqrt(input_dim)
    w2 = rng.standard_normal((classes, hidden_dim)) * (3.0 / math.sqrt(hidden_dim))
    teachers = (w1, w2)
    pretrained = tuple(w + shift * np.std(w) * rng.standard_normal(w.shape) for w in teachers)
    x = rng.standard_normal((sample_count, input_dim))
    xv = rng.standard_normal((holdout, input_dim))

    def label(a):
        return np.argmax(np.maximum(a @ w1.T, 0.0) @ w2.T, axis=1)

    return SyntheticTask("two-layer-classification", input_dim, classes, sample_count, seed,
                         teachers, pretrained, x, label(x), xv, label(xv))


def make_task(kind, **kw):
    if kind == "teacher-regression":
        return teacher_regression(**kw)
    if kind == "two-layer-classification":
        return two_layer_classification(**kw)
    raise InvalidInput(f"unknown task kind {kind!r}")


# --- forward / backward ----------------------------------------------------

def _check(u, sigma, v, n_in=None):
    if u.ndim != 2 or v.ndim != 2 or sigma.ndim != 1:
        raise InvalidInput("u, v must be 2-D and sigma 1-D")
    if u.shape[1] != sigma.size or v.shape[1] != sigma.size:
        raise InvalidInput(f"rank mismatch: u {u.shape}, sigma {sigma.shape}, v {v.shape}")
    if n_in is not None and n_in != v.shape[0]:
        raise InvalidInput(f"input length {n_in} does not match v rows {v.shape[0]}")


def forward_factored(u, sigma, v, x):
    """``U diag(sigma) V^T x`` as two thin products; ``x`` may be a batch of rows."""
    u, sigma, v, x = (np.asarray(a, dtype=np.float64) for a in (u, sigma, v, x))
    _check(u, sigma, v, x.shape[-1])
    return ((x @ v) * sigma) @ u.T


def grad_sigma(u, sigma, v, x, upstream):
    """Exact ``dL/dsigma`` given ``dL/dy``: ``(U^T upstream)_r (V^T x)_r``.

    Batched inputs sum over the batch.
    """
    u, sigma, v, x, upstream = (np.asarray(a, dtype=np.float64) for a in (u, sigma, v, x, upstream))
    _check(u, sigma, v, x.shape[-1])
    if upstream.shape[-1] != u.shape[0] or upstream.shape[:-1] != x.shape[:-1]:
        raise InvalidInput("upstream gradient shape does not match the output")
    g = (upstream @ u) * (x @ v)
    return g if g.ndim == 1 else g.sum(axis=0)


def _as_uv(f):
    return (f.u, f.sigma, f.v) if isinstance(f, SvdFactor) else f


def forward_chain(factors, x):
    """Run a factored network; returns the output and a cache for backprop."""
    cache = []
    h = x
    for i, f in enumerate(factors):
        u, s, v = _as_uv(f)
        z = h @ v
        out = (z * s) @ u.T
        cache.append((h, z))
        h = np.maximum(out, 0.0) if i < len(factors) - 1 else out
    return h, cache


def _loss(out, y, classification):
    if classification:
        m = out.max(axis=1, keepdims=True)
        lse = m[:, 0] + np.log(np.exp(out - m).sum(axis=1))
        return float(np.mean(lse - out[np.arange(len(y)), y]))
    return float(np.mean((out - y) ** 2))


def _loss_grad(out, y, classification):
    if classification:
        p = np.exp(out - out.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(len(y)), y] -= 1.0
        return p / len(y)
    return 2.0 * (out - y) / out.size


def backward_chain(factors, cache, dout):
    """Gradients ``(dU, dsigma, dV)`` per layer."""
    grads = [None] * len(factors)
    for i in range(len(factors) - 1, -1, -1):
        u, s, v = _as_uv(factors[i])
        h, z = cache[i]
        gz = dout @ u                     # dL/d(z * s)
        grads[i] = (dout.T @ (z * s), (gz * z).sum(axis=0), h.T @ (gz * s))
        if i:
            dout = ((gz * s) @ v.T) * (h > 0)
    return grads


# --- fine-tuning -------------------------------------------------------------

@dataclass(frozen=True)
class FinetuneConfig:
    epochs: int = 3
    learning_rate: float = 1e-3
    batch_size: int = 32
    optimizer: str = "adam"
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidInput("epochs must be >= 1")
        if not self.learning_rate > 0:
            raise InvalidInput("learning_rate must be > 0")
        if self.batch_size < 1:
            raise InvalidInput("batch_size must be >= 1")
        if self.optimizer not in ("adam", "sgd"):
            raise InvalidInput(f"unknown optimizer {self.optimizer!r}")


@dataclass
class GradientRecord:
    """Per-rank sum of ``|dL/dsigma_r|`` over every optimizer step."""

    values: np.ndarray
    steps: int = 0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or np.any(self.values < 0):
            raise InvalidInput("gradient record must be a non-negative vector")

    def __len__(self):
        return self.values.size

    def add(self, g):
        self.values += np.abs(g)
        self.steps += 1


@dataclass
class FinetuneResult:
    factors: list
    records: list
    history: list = field(default_factory=list)  # held-out loss before and after each epoch

    def __iter__(self):
        return iter((self.factors, self.records))


def finetune(factors, task, cfg=None):
    """Adam (or SGD) on all of U, sigma and V; records |dL/dsigma| per step.

    Unpacks as ``factors, records``; the held-out loss trace is in ``history``.
    """
    with np.errstate(over="ignore", invalid="ignore"):
        return _finetune(factors, task, cfg or FinetuneConfig())


def _finetune(factors, task, cfg):
    params = [[f.u.copy(), f.sigma.copy(), f.v.copy()] for f in factors]
    dims_in = [p[2].shape[0] for p in params]
    if dims_in[0] != task.input_dim:
        raise InvalidInput(f"first layer takes {dims_in[0]} inputs, task has {task.input_dim}")
    records = [GradientRecord(np.zeros(p[1].size)) for p in params]
    m = [[np.zeros_like(a) for a in p] for p in params]
    v2 = [[np.zeros_like(a) for a in p] for p in params]
    rng = np.random.default_rng(cfg.seed)
    history = [task.loss(params)]
    t = 0
    n = len(task.x)
    for _ in range(cfg.epochs):
        perm = rng.permutation(n)
        for i in range(0, n, cfg.batch_size):
            idx = perm[i:i + cfg.batch_size]
            out, cache = forward_chain(params, task.x[idx])
            if not np.all(np.isfinite(out)):
                raise TrainingDiverged(f"non-finite activations at step {t}")
            grads = backward_chain(params, cache, _loss_grad(out, task.y[idx], task.classification))
            t += 1
            for li, (p, g) in enumerate(zip(params, grads)):
                records[li].add(g[1])
                for j in range(3):
                    if cfg.optimizer == "sgd":
                        step = g[j]
                    else:
                        m[li][j] = cfg.beta1 * m[li][j] + (1 - cfg.beta1) * g[j]
                        v2[li][j] = cfg.beta2 * v2[li][j] + (1 - cfg.beta2) * g[j] ** 2
                        mh = m[li][j] / (1 - cfg.beta1 ** t)
                        vh = v2[li][j] / (1 - cfg.beta2 ** t)
                        step = mh / (np.sqrt(vh) + cfg.eps)
                    if cfg.weight_decay:
                        p[j] -= cfg.learning_rate * cfg.weight_decay * p[j]
                    p[j] -= cfg.learning_rate * step
        loss = task.loss(params)
        if not math.isfinite(loss):
            raise TrainingDiverged("held-out loss became non-finite")
        history.append(loss)
    out = [SvdFactor(*p) for p in params]
    return FinetuneResult(out, records, history)


def gradient_probe(factors, task, batches=64, batch_size=16):
    """Sum of ``|dL/dsigma|`` over held-out minibatches at frozen parameters.

    Gives a like-for-like sensitivity profile before and after fine-tuning.
    """
    need = batches * batch_size
    if need > len(task.x_val):
        raise InvalidInput(f"probe needs {need} held-out samples, task has {len(task.x_val)}")
    acc = [np.zeros(_as_uv(f)[1].size) for f in factors]
    for b in range(batches):
        sl = slice(b * batch_size, (b + 1) * batch_size)
        out, cache = forward_chain(factors, task.x_val[sl])
        grads = backward_chain(factors, cache, _loss_grad(out, task.y_val[sl], task.classification))
        for a, g in zip(acc, grads):
            a += np.abs(g[1])
    return acc


def _count(k, k_percent):
    if not 0 <= k_percent <= 100:
        raise InvalidInput("k_percent must lie in [0, 100]")
    # round half up so that e.g. 10% of 5 ranks protects one
    return min(k, int(math.floor(k * k_percent / 100.0 + 0.5)))


def leading_fraction(g, percent=10.0):
    """Share of the total mass held by the leading ``percent`` of ranks (at least one)."""
    g = np.abs(np.asarray(g, dtype=np.float64))
    q = max(1, _count(g.size, percent))
    total = g.sum()
    return float(g[:q].sum() / total) if total > 0 else 0.0


def top_fraction(g, percent=10.0):
    """Share of the total mass held by the largest ``percent`` of entries."""
    g = np.abs(np.asarray(g, dtype=np.float64))
    return leading_fraction(np.sort(g)[::-1], percent)


# --- rank selection ----------------------------------------------------------

@dataclass(frozen=True)
class ProtectionPlan:
    slc_ranks: tuple
    mlc_ranks: tuple
    k_percent: float

    @property
    def rank(self):
        return len(self.slc_ranks) + len(self.mlc_ranks)

    @classmethod
    def from_order(cls, order, k_percent):
        order = [int(i) for i in order]
        q = _count(len(order), k_percent)
        slc = tuple(sorted(order[:q]))
        mlc = tuple(sorted(order[q:]))
        return cls(slc, mlc, float(k_percent))

    def slc_mask(self):
        m = np.zeros(self.rank, dtype=bool)
        m[list(self.slc_ranks)] = True
        return m

    def to_dict(self):
        return {"k_percent": self.k_percent, "slc_ranks": list(self.slc_ranks),
                "mlc_ranks": list(self.mlc_ranks)}


def _descending(scores):
    # stable sort of the negated scores keeps the lower index first on ties
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def select_slc_ranks(g, k_percent):
    """Protect the ranks with the largest accumulated gradient magnitude."""
    vals = g.values if isinstance(g, GradientRecord) else np.asarray(g, dtype=np.float64)
    return ProtectionPlan.from_order(_descending(np.abs(vals)), k_percent)


def select_baseline_ranks(mode, factor, k_percent, seed=0):
    """Comparison selections: ``first-k`` (singular-value order), ``weight-magnitude``
    (row norm of the merged ``diag(sigma) V^T``) or ``random``.
    """
    u, s, v = _as_uv(factor)
    k = s.size
    if mode in ("first-k", "rank"):
        order = np.arange(k)
    elif mode in ("weight-magnitude", "magnitude"):
        order = _descending(np.linalg.norm(s[:, None] * v.T, axis=1))
    elif mode == "random":
        order = np.random.default_rng(seed).permutation(k)
    else:
        raise InvalidInput(f"unknown selection mode {mode!r}")
    return ProtectionPlan.from_order(order, k_percent)


# --- noise evaluation --------------------------------------------------------

def inject_rank_noise(factors, plans, sigma, rng):
    """Multiplicative noise on the merged factors of every MLC rank.

    Each layer is rewritten as ``u' diag(1) b'^T`` with ``b = diag(sigma) V^T``;
    rows of ``b`` and columns of ``u`` belonging to SLC ranks stay exact.
    """
    out = []
    for f, plan in zip(factors, plans):
        if not plan.mlc_ranks:
            out.append(f)       # fully protected: bit-identical to the noise-free layer
            continue
        u, s, v = _as_uv(f)
        b = s[:, None] * v.T
        keep = plan.slc_mask()
        nb = b * (1.0 + sigma * rng.standard_normal(b.shape) * ~keep[:, None])
        nu = u * (1.0 + sigma * rng.standard_normal(u.shape) * ~keep[None, :])
        out.append(SvdFactor(nu, np.ones(s.size), nb.T))
    return out


def noisy_loss(factors, plans, task, sigma=0.025, draws=20, seed=0):
    """Mean held-out loss over ``draws`` noise realisations."""
    if not any(p.mlc_ranks for p in plans):
        return float(task.loss(factors))    # every draw would be identical
    rng = np.random.default_rng(seed)
    return float(np.mean([task.loss(inject_rank_noise(factors, plans, sigma, rng))
                          for _ in range(draws)]))
