"""Desk-scale federated objectives with exact gradients.

``MatFactTask`` fits ``W0 + s*B@A`` to per-client targets under squared
Frobenius loss. Its block smoothness constants and global optimum are
available in closed form, which is what the convergence checks need.

``LogisticTask`` is softmax regression on class-conditional Gaussian
features, partitioned across clients with label skew.
"""

import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import PreconditionError, ShapeError
from .linalg import singular_values, spectral_norm
from .lora import LoRAPair, delta_w

IDENTITY_TOL = 1e-10


@dataclass(frozen=True, eq=False)
class GradPair:
    g_a: np.ndarray
    g_b: np.ndarray

    def is_finite(self):
        return bool(np.all(np.isfinite(self.g_a)) and np.all(np.isfinite(self.g_b)))

    def norm_sq(self, a=True, b=True):
        total = 0.0
        if a:
            total += float(np.sum(self.g_a * self.g_a))
        if b:
            total += float(np.sum(self.g_b * self.g_b))
        return total


def _check_pair_shape(pair, shape):
    if pair.shape != tuple(shape):
        raise ShapeError(f"pair produces {pair.shape} update, task expects {tuple(shape)}")


# -- matrix factorization ---------------------------------------------------


@dataclass(frozen=True, eq=False)
class MatFactTask:
    base: np.ndarray
    targets: np.ndarray  # (N, m, n)
    rank: int
    mean_target: np.ndarray = field(init=False)
    variance_offset: float = field(init=False)

    def __post_init__(self):
        targets = np.asarray(self.targets, dtype=np.float64)
        base = np.asarray(self.base, dtype=np.float64)
        if targets.ndim != 3 or targets.shape[1:] != base.shape:
            raise ShapeError(f"targets {targets.shape} do not match base {base.shape}")
        if not 1 <= self.rank <= min(base.shape):
            raise PreconditionError(f"rank {self.rank} exceeds min(m, n) = {min(base.shape)}")
        mean = targets.mean(axis=0)
        spread = targets - mean
        offset = float(np.sum(spread * spread)) / (2 * targets.shape[0])
        object.__setattr__(self, "base", base)
        object.__setattr__(self, "targets", targets)
        object.__setattr__(self, "mean_target", mean)
        object.__setattr__(self, "variance_offset", offset)
        self._verify_loss_identity()

    def _verify_loss_identity(self):
        rng = np.random.default_rng(12345)
        m, n = self.base.shape
        probe = LoRAPair(rng.normal(size=(self.rank, n)), rng.normal(size=(m, self.rank)), self.rank)
        direct = np.mean([matfact_loss(self, i, probe) for i in range(self.n_clients)])
        resid = self.mean_target - self.base - delta_w(probe)
        closed = 0.5 * float(np.sum(resid * resid)) + self.variance_offset
        if abs(direct - closed) > IDENTITY_TOL * max(1.0, abs(direct)):
            raise ArithmeticError(f"global loss identity failed: {direct} vs {closed}")

    @property
    def n_clients(self):
        return self.targets.shape[0]

    @property
    def shape(self):
        return self.base.shape

    def loss(self, i, pair):
        return matfact_loss(self, i, pair)

    def loss_grad(self, i, pair, rng=None, batch_size=None):
        return matfact_loss(self, i, pair), matfact_grad(self, i, pair)

    def global_loss(self, pair):
        return matfact_global_loss(self, pair)

    def global_grad(self, pair):
        return matfact_global_grad(self, pair)


def make_matfact_task(n_clients, rows, cols, rank, rng, *, heterogeneity=0.5,
                      heterogeneity_mode="isotropic", signal_scale=1.0,
                      tail_scale=0.3, base_scale=1.0):
    """Random instance with a controlled spectrum for the mean residual.

    The mean residual ``M_bar - W0`` has ``rank`` leading singular values
    in ``signal_scale * [1, 2]`` and the rest in ``tail_scale * [0, 1]``.
    Client targets deviate from the mean by centered Gaussian noise of
    scale ``heterogeneity``; with ``heterogeneity_mode="tail"`` the noise is
    projected off the leading singular subspaces, which keeps the global
    optimum a common stationary point of every client objective.
    """
    if heterogeneity_mode not in ("isotropic", "tail"):
        raise PreconditionError(f"unknown heterogeneity_mode {heterogeneity_mode!r}")
    k = min(rows, cols)
    if not 1 <= rank <= k:
        raise PreconditionError(f"rank {rank} exceeds min(rows, cols) = {k}")
    u, _ = np.linalg.qr(rng.normal(size=(rows, rows)))
    v, _ = np.linalg.qr(rng.normal(size=(cols, cols)))
    top = np.sort(signal_scale * rng.uniform(1.0, 2.0, size=rank))[::-1]
    tail = np.sort(tail_scale * rng.uniform(0.0, 1.0, size=k - rank))[::-1]
    sigma = np.concatenate([top, tail])
    residual = (u[:, :k] * sigma) @ v[:, :k].T
    base = base_scale * rng.normal(size=(rows, cols)) / np.sqrt(cols)
    noise = heterogeneity * rng.normal(size=(n_clients, rows, cols))
    noise -= noise.mean(axis=0)
    if heterogeneity_mode == "tail":
        pu = np.eye(rows) - u[:, :rank] @ u[:, :rank].T
        pv = np.eye(cols) - v[:, :rank] @ v[:, :rank].T
        noise = np.einsum("ij,njk,kl->nil", pu, noise, pv)
    targets = base + residual + noise
    return MatFactTask(base, targets, rank)


def _matfact_residual(task, target, pair):
    _check_pair_shape(pair, task.shape)
    return task.base + delta_w(pair) - target


def matfact_loss(task, i, pair):
    r = _matfact_residual(task, task.targets[i], pair)
    return 0.5 * float(np.sum(r * r))


def _bilinear_grad(resid, pair):
    s = pair.scaling
    return GradPair(g_a=s * (pair.b.T @ resid), g_b=s * (resid @ pair.a.T))


def matfact_grad(task, i, pair):
    return _bilinear_grad(_matfact_residual(task, task.targets[i], pair), pair)


def matfact_global_loss(task, pair):
    r = _matfact_residual(task, task.mean_target, pair)
    return 0.5 * float(np.sum(r * r)) + task.variance_offset


def matfact_global_grad(task, pair):
    # the mean of client gradients is the gradient against the mean target
    return _bilinear_grad(_matfact_residual(task, task.mean_target, pair), pair)


def matfact_optimum(task):
    """Global minimum over rank-``task.rank`` updates (Eckart-Young)."""
    sv = singular_values(task.mean_target - task.base)
    return 0.5 * float(np.sum(sv[task.rank:] ** 2)) + task.variance_offset


def matfact_block_smoothness(pair):
    """Exact Lipschitz constants ``(L_a, L_b)`` of the block gradients."""
    s = pair.scaling
    l_b = (s * spectral_norm(pair.a)) ** 2 if np.any(pair.a) else 0.0
    l_a = (s * spectral_norm(pair.b)) ** 2 if np.any(pair.b) else 0.0
    return l_a, l_b


# -- label-skewed softmax regression ----------------------------------------

BINARY_PARTITION = [[0.9, 0.1]] * 3 + [[0.1, 0.9]] * 3 + [[0.5, 0.5]] * 4
TERNARY_PARTITION = ([[0.9, 0.05, 0.05]] * 4 + [[0.05, 0.9, 0.05]] * 3
                     + [[0.05, 0.05, 0.9]] * 3)
PARTITION_PRESETS = {"binary": BINARY_PARTITION, "ternary": TERNARY_PARTITION}


@dataclass(frozen=True, eq=False)
class LogisticTask:
    base: np.ndarray  # (n_features, n_classes)
    train_x: list
    train_y: list
    test_x: list
    test_y: list
    partition_spec: list

    @property
    def n_clients(self):
        return len(self.train_x)

    @property
    def n_classes(self):
        return self.base.shape[1]

    @property
    def shape(self):
        return self.base.shape

    def loss(self, i, pair):
        return logistic_loss_grad(self, i, pair)[0]

    def loss_grad(self, i, pair, rng=None, batch_size=None):
        x, y = self.train_x[i], self.train_y[i]
        if rng is not None and batch_size is not None and batch_size < len(y):
            idx = rng.choice(len(y), size=batch_size, replace=False)
            x, y = x[idx], y[idx]
        return softmax_loss_grad(x, y, self.base, pair)

    def global_loss(self, pair):
        return float(np.mean([self.loss(i, pair) for i in range(self.n_clients)]))

    def pooled_test(self):
        return np.concatenate(self.test_x), np.concatenate(self.test_y)

    def global_grad(self, pair):
        grads = [logistic_loss_grad(self, i, pair)[1] for i in range(self.n_clients)]
        return GradPair(np.mean([g.g_a for g in grads], axis=0),
                        np.mean([g.g_b for g in grads], axis=0))


def softmax_loss_grad(x, y, base, pair):
    """Mean cross-entropy of ``softmax(x @ (base + delta_w))`` and its factor gradients."""
    if len(y) == 0:
        raise PreconditionError("empty shard")
    _check_pair_shape(pair, base.shape)
    logits = x @ (base + delta_w(pair))
    logits = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.sum(np.exp(logits), axis=1))
    n = len(y)
    loss = float(np.mean(log_z - logits[np.arange(n), y]))
    probs = np.exp(logits - log_z[:, None])
    probs[np.arange(n), y] -= 1.0
    g_w = x.T @ probs / n
    return loss, _bilinear_grad(g_w, pair)


def logistic_loss_grad(task, i, pair):
    return softmax_loss_grad(task.train_x[i], task.train_y[i], task.base, pair)


def predict(x, base, pair):
    return np.argmax(x @ (base + delta_w(pair)), axis=1)


def accuracy(task, i, pair, split="test"):
    """Fraction of correct argmax predictions.

    ``split`` is ``"test"`` or ``"train"`` for client ``i``'s own shard, or
    ``"pooled"`` for the union of every client's held-out split (``i`` is
    then ignored).
    """
    if split == "pooled":
        x, y = task.pooled_test()
    elif split == "test":
        x, y = task.test_x[i], task.test_y[i]
    elif split == "train":
        x, y = task.train_x[i], task.train_y[i]
    else:
        raise PreconditionError(f"unknown split {split!r}")
    if len(y) == 0:
        raise PreconditionError(f"empty {split} split")
    return float(np.mean(predict(x, task.base, pair) == y))


def largest_remainder_counts(proportions, total):
    p = np.asarray(proportions, dtype=np.float64)
    if p.ndim != 1 or np.any(p < 0) or abs(p.sum() - 1.0) > 1e-9:
        raise PreconditionError(f"invalid class proportions {list(proportions)}")
    raw = p * total
    counts = np.floor(raw).astype(int)
    short = total - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def partition_labels(n_clients, proportions_spec, samples_per_client, rng):
    """Per-client label arrays with class counts set by largest-remainder rounding."""
    if len(proportions_spec) != n_clients:
        raise PreconditionError(f"{len(proportions_spec)} proportion vectors for {n_clients} clients")
    out = []
    for props in proportions_spec:
        counts = largest_remainder_counts(props, samples_per_client)
        labels = np.repeat(np.arange(len(counts)), counts)
        out.append(rng.permutation(labels).astype(np.int32))
    return out


def make_logistic_task(proportions_spec, samples_per_client, n_features, rng, *,
                       class_separation=2.0, holdout_fraction=0.2, base_scale=1.0):
    spec = [list(map(float, p)) for p in proportions_spec]
    n_classes = len(spec[0])
    if any(len(p) != n_classes for p in spec):
        raise PreconditionError("all proportion vectors need the same length")
    if n_classes < 2 or n_features < n_classes:
        raise PreconditionError("need n_classes >= 2 and n_features >= n_classes")
    n_test = int(round(holdout_fraction * samples_per_client))
    if n_test < 1 or n_test >= samples_per_client:
        raise PreconditionError("holdout split must leave both splits nonempty")
    labels = partition_labels(len(spec), spec, samples_per_client, rng)
    base = base_scale * rng.normal(size=(n_features, n_classes)) / np.sqrt(n_features)
    train_x, train_y, test_x, test_y = [], [], [], []
    for y in labels:
        x = rng.normal(size=(len(y), n_features))
        x[np.arange(len(y)), y] += class_separation
        train_x.append(x[n_test:])
        train_y.append(y[n_test:])
        test_x.append(x[:n_test])
        test_y.append(y[:n_test])
    return LogisticTask(base, train_x, train_y, test_x, test_y, spec)


# -- flat binary persistence ------------------------------------------------

MAGIC = b"ADFLORA\x00"
FORMAT_VERSION = 1
KIND_MATFACT = 1
KIND_LOGISTIC = 2


def _f64(a):
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def save_task(task, path):
    """Write a task as ``magic | u32 version | u32 kind | dims | row-major body``."""
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION,
                                 KIND_MATFACT if isinstance(task, MatFactTask) else KIND_LOGISTIC)]
    if isinstance(task, MatFactTask):
        m, n = task.shape
        chunks.append(struct.pack("<IIII", task.n_clients, m, n, task.rank))
        chunks += [_f64(task.base), _f64(task.targets)]
    else:
        nf, nc = task.shape
        chunks.append(struct.pack("<III", task.n_clients, nf, nc))
        chunks.append(_f64(task.base))
        for i in range(task.n_clients):
            chunks.append(struct.pack("<II", len(task.train_y[i]), len(task.test_y[i])))
            chunks += [_f64(task.partition_spec[i]), _f64(task.train_x[i]), _f64(task.test_x[i]),
                       np.asarray(task.train_y[i], dtype="<i4").tobytes(),
                       np.asarray(task.test_y[i], dtype="<i4").tobytes()]
    with open(path, "wb") as fh:
        fh.write(b"".join(chunks))


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def unpack(self, fmt):
        vals = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += struct.calcsize(fmt)
        return vals

    def array(self, dtype, shape):
        count = int(np.prod(shape))
        out = np.frombuffer(self.buf, dtype=dtype, count=count, offset=self.pos).reshape(shape)
        self.pos += count * np.dtype(dtype).itemsize
        return out.astype(np.float64 if dtype == "<f8" else np.int64)


def load_task(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a task file")
    rd = _Reader(buf)
    rd.pos = len(MAGIC)
    version, kind = rd.unpack("<II")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported format version {version}")
    if kind == KIND_MATFACT:
        n_clients, m, n, rank = rd.unpack("<IIII")
        base = rd.array("<f8", (m, n))
        targets = rd.array("<f8", (n_clients, m, n))
        return MatFactTask(base, targets, rank)
    if kind == KIND_LOGISTIC:
        n_clients, nf, nc = rd.unpack("<III")
        base = rd.array("<f8", (nf, nc))
        train_x, train_y, test_x, test_y, spec = [], [], [], [], []
        for _ in range(n_clients):
            n_train, n_test = rd.unpack("<II")
            spec.append(rd.array("<f8", (nc,)).tolist())
            train_x.append(rd.array("<f8", (n_train, nf)))
            test_x.append(rd.array("<f8", (n_test, nf)))
            train_y.append(rd.array("<i4", (n_train,)))
            test_y.append(rd.array("<i4", (n_test,)))
        return LogisticTask(base, train_x, train_y, test_x, test_y, spec)
    raise ValueError(f"{path}: unknown task kind {kind}")
