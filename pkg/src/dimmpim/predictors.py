"""Latency predictors used by the scheduler.

T_PIM is linear in (sum of decode tokens, decode count, prefill tokens
offloaded).  T_GPU is the sum of a per-request prefill-attention forest over
(chunk, finished) and a batched-FC forest over (total chunk tokens, decode
count).  Forests are fitted with scikit-learn, then flattened into padded
numpy arrays so that prediction over many candidate chunk sizes is one
vectorized walk instead of a per-call sklearn dispatch.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
from sklearn.ensemble import RandomForestRegressor

from .config import SchedulerParams


def relative_error(Y, Y_hat) -> float:
    Y = np.asarray(Y, dtype=np.float64)
    Y_hat = np.asarray(Y_hat, dtype=np.float64)
    if Y.shape != Y_hat.shape:
        raise ValueError(f"length mismatch: {Y.size} observed vs {Y_hat.size} predicted")
    if Y.size == 0:
        raise ValueError("empty observation list")
    if np.any(Y <= 0):
        raise ValueError("observations must be > 0")
    return float(np.mean(np.abs(Y - Y_hat) / Y))


class FlatForest:
    """Padded array form of a fitted RandomForestRegressor."""

    def __init__(self, rf: RandomForestRegressor):
        trees = [e.tree_ for e in rf.estimators_]
        width = max(t.node_count for t in trees)
        T = len(trees)
        self.left = np.full((T, width), -1, dtype=np.int64)
        self.right = np.full((T, width), -1, dtype=np.int64)
        self.feature = np.zeros((T, width), dtype=np.int64)
        self.threshold = np.zeros((T, width))
        self.value = np.zeros((T, width))
        for i, t in enumerate(trees):
            n = t.node_count
            self.left[i, :n] = t.children_left
            self.right[i, :n] = t.children_right
            self.feature[i, :n] = np.maximum(t.feature, 0)
            self.threshold[i, :n] = t.threshold
            self.value[i, :n] = t.value[:, 0, 0]
        self.depth = max(e.get_depth() for e in rf.estimators_)
        self.rows = np.arange(T)[:, None]

    def predict(self, X) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        node = np.zeros((self.rows.shape[0], X.shape[0]), dtype=np.int64)
        cols = np.arange(X.shape[0])[None, :]
        for _ in range(self.depth):
            f = self.feature[self.rows, node]
            go_left = X[cols, f] <= self.threshold[self.rows, node]
            nxt = np.where(go_left, self.left[self.rows, node], self.right[self.rows, node])
            node = np.where(nxt >= 0, nxt, node)
        return self.value[self.rows, node].mean(axis=0)


@dataclass
class Window:
    size: int
    X: deque = field(default_factory=deque)
    y: deque = field(default_factory=deque)

    def add(self, x, y):
        self.X.append(tuple(float(v) for v in x))
        self.y.append(float(y))
        while len(self.y) > self.size:
            self.X.popleft()
            self.y.popleft()

    def __len__(self):
        return len(self.y)

    def arrays(self):
        return np.array(self.X, dtype=np.float64), np.array(self.y, dtype=np.float64)


class Predictor:
    """Interface used by the scheduler.

    ``fd``/``ids`` are the decode token counts and request ids of one
    sub-batch, ``chunks`` the [(request_id, chunk)] prefill offloaded during
    its PIM phase.
    """

    ready = True

    def t_pim(self, fd, ids, chunks) -> float:
        raise NotImplementedError

    def t_pim_scan(self, fd, ids, chunks, rid, cand_c) -> np.ndarray:
        return np.array([self.t_pim(fd, ids, list(chunks) + [(rid, int(c))]) for c in cand_c])

    def t_gpu(self, c, f, n_fd) -> float:
        raise NotImplementedError

    def t_gpu_scan(self, base_c, base_f, cand_c, cand_f, n_fd) -> np.ndarray:
        """T_GPU for fixed prefill chunks plus one candidate chunk of varying size."""
        return np.array([self.t_gpu(list(base_c) + [c], list(base_f) + [cand_f], n_fd) for c in cand_c])

    def record(self, sample):
        pass


@dataclass
class IterationSample:
    """Observed quantities of one sub-batch phase."""

    sum_fd: float
    n_fd: int
    sum_c_other: float
    t_pim: float
    prefill: list  # [(c, f, t_p_ns)]
    sum_c: float
    n_fd_batch: int
    t_batch: float


class LearnedPredictor(Predictor):
    def __init__(self, params: SchedulerParams | None = None, seed: int = 0):
        self.p = params or SchedulerParams()
        self.seed = seed
        self.pim_win = Window(self.p.window)
        self.tp_win = Window(self.p.window)
        self.batch_win = Window(self.p.window)
        self.coef = None
        self.forest_p: FlatForest | None = None
        self.forest_b: FlatForest | None = None
        self.since = 0
        self.retrains = 0

    @property
    def ready(self) -> bool:
        return self.coef is not None and self.forest_b is not None

    def record(self, s: IterationSample):
        self.pim_win.add((s.sum_fd, s.n_fd, s.sum_c_other), s.t_pim)
        for c, f, t in s.prefill:
            self.tp_win.add((c, f), t)
        self.batch_win.add((s.sum_c, s.n_fd_batch), s.t_batch)
        self.since += 1
        if not self.ready and len(self.pim_win) >= self.p.min_samples:
            self.retrain()
        elif self.since >= self.p.retrain_every:
            self.retrain()

    def _forest(self, win: Window):
        X, y = win.arrays()
        rf = RandomForestRegressor(n_estimators=self.p.trees, max_depth=self.p.tree_depth,
                                   random_state=self.seed, n_jobs=None)
        rf.fit(X, y)
        return FlatForest(rf)

    def retrain(self):
        if len(self.pim_win) < self.p.min_samples:
            return
        X, y = self.pim_win.arrays()
        A = np.column_stack([X, np.ones(len(y))])
        self.coef = np.linalg.lstsq(A, y, rcond=None)[0]
        if len(self.tp_win) >= self.p.min_samples:
            self.forest_p = self._forest(self.tp_win)
        self.forest_b = self._forest(self.batch_win)
        self.since = 0
        self.retrains += 1

    def linear(self, sum_fd, n_fd, sum_c_other):
        sc = np.asarray(sum_c_other, dtype=float)
        x = np.column_stack(np.broadcast_arrays(
            np.asarray(sum_fd, dtype=float), np.asarray(n_fd, dtype=float), sc, np.ones_like(sc)))
        return np.maximum(x @ self.coef, 0.0)

    def t_pim(self, fd, ids, chunks) -> float:
        return float(self.linear(float(np.sum(fd)), len(fd), float(sum(c for _, c in chunks)))[0])

    def t_pim_scan(self, fd, ids, chunks, rid, cand_c) -> np.ndarray:
        base = float(sum(c for _, c in chunks))
        return self.linear(float(np.sum(fd)), len(fd), base + np.asarray(cand_c, dtype=float))

    def _tp(self, c, f):
        c = np.asarray(c, dtype=float)
        f = np.asarray(f, dtype=float)
        if self.forest_p is None:
            return np.zeros(c.shape)
        out = self.forest_p.predict(np.column_stack([c.ravel(), f.ravel()])).reshape(c.shape)
        return np.where(c > 0, out, 0.0)

    def t_gpu(self, c, f, n_fd):
        c = list(c)
        tp = float(self._tp(c, f).sum()) if c else 0.0
        tb = float(self.forest_b.predict([[sum(c), n_fd]])[0])
        return tp + tb

    def t_gpu_scan(self, base_c, base_f, cand_c, cand_f, n_fd):
        cand = np.asarray(cand_c, dtype=float)
        base = float(self._tp(list(base_c), list(base_f)).sum()) if len(base_c) else 0.0
        tp = self._tp(cand, np.full_like(cand, cand_f))
        tb = self.forest_b.predict(np.column_stack([sum(base_c) + cand, np.full_like(cand, n_fd)]))
        return base + tp + tb


class OraclePredictor(Predictor):
    """Exact predictions from the simulator's own cost functions."""

    def __init__(self, costs):
        self.costs = costs

    def t_gpu(self, c, f, n_fd) -> float:
        return self.costs.t_gpu(c, f, n_fd)

    def t_gpu_scan(self, base_c, base_f, cand_c, cand_f, n_fd) -> np.ndarray:
        return self.costs.t_gpu_scan(base_c, base_f, cand_c, cand_f, n_fd)

    def t_pim(self, fd, ids, chunks) -> float:
        return self.costs.t_pim(fd, ids, chunks)

    def t_pim_scan(self, fd, ids, chunks, rid, cand_c) -> np.ndarray:
        return self.costs.t_pim_scan(fd, ids, chunks, rid, cand_c)
