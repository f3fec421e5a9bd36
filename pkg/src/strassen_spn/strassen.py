"""Search for exact ternary bilinear algorithms for n x n matrix multiplication.

A rank-r algorithm is a triple of ternary matrices (W_a, W_b, W_c) with
``vec(AB) = W_c[(W_b vec(B)) * (W_a vec(A))]`` for all A, B (vec stacks
columns). Training runs many random restarts at once; each restart's
arithmetic is independent of how many restarts share a batch, so results do
not depend on chunking or parallelism.
"""

from __future__ import annotations

import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from .errors import ValidationError
from .layers import naive_bilinear, vec

logger = logging.getLogger(__name__)

STRASSEN_W_A = np.array(
    [[1, 0, 0, 1], [0, 1, 0, 1], [1, 0, 0, 0], [0, 0, 0, 1], [1, 0, 1, 0], [-1, 1, 0, 0], [0, 0, 1, -1]], np.int8
)
STRASSEN_W_B = np.array(
    [[1, 0, 0, 1], [1, 0, 0, 0], [0, 0, 1, -1], [-1, 1, 0, 0], [0, 0, 0, 1], [1, 0, 1, 0], [0, 1, 0, 1]], np.int8
)
STRASSEN_W_C = np.array(
    [[1, 0, 0, 1, -1, 0, 1], [0, 1, 0, 1, 0, 0, 0], [0, 0, 1, 0, 1, 0, 0], [1, -1, 1, 0, 0, 1, 0]], np.int8
)


@dataclass
class BilinearSolution:
    n: int
    r: int
    W_a: np.ndarray
    W_b: np.ndarray
    W_c: np.ndarray
    exact: bool = False
    seed: Optional[int] = None
    restart_index: Optional[int] = None
    loss: Optional[float] = None

    def __post_init__(self):
        self.W_a, self.W_b, self.W_c = (_ternary(w, name) for w, name in
                                        ((self.W_a, "W_a"), (self.W_b, "W_b"), (self.W_c, "W_c")))
        n2 = self.n * self.n
        if self.W_a.shape != (self.r, n2) or self.W_b.shape != (self.r, n2) or self.W_c.shape != (n2, self.r):
            raise ValidationError(
                f"expected W_a, W_b of shape ({self.r}, {n2}) and W_c of shape ({n2}, {self.r}), got "
                f"{self.W_a.shape}, {self.W_b.shape}, {self.W_c.shape}"
            )

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "r": self.r,
            "W_a": self.W_a.tolist(),
            "W_b": self.W_b.tolist(),
            "W_c": self.W_c.tolist(),
            "exact": bool(self.exact),
            "seed": self.seed,
            "restart_index": self.restart_index,
            "loss": _finite_or_none(self.loss),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BilinearSolution":
        try:
            return cls(int(d["n"]), int(d["r"]), np.array(d["W_a"]), np.array(d["W_b"]), np.array(d["W_c"]),
                       bool(d.get("exact", False)), d.get("seed"), d.get("restart_index"), d.get("loss"))
        except KeyError as exc:
            raise ValidationError(f"solution is missing field {exc}") from None


def _finite_or_none(x: Optional[float]) -> Optional[float]:
    return float(x) if x is not None and np.isfinite(x) else None


def _ternary(w, name: str) -> np.ndarray:
    arr = np.asarray(w)
    if arr.dtype.kind == "f" and not np.array_equal(arr, np.round(arr)):
        raise ValidationError(f"{name} has non-integer entries")
    if not np.isin(arr, (-1, 0, 1)).all():
        raise ValidationError(f"{name} has entries outside {{-1, 0, 1}}")
    return arr.astype(np.int8)


def strassen_solution() -> BilinearSolution:
    """Strassen's rank-7 algorithm for 2 x 2 matrices."""
    return BilinearSolution(2, 7, STRASSEN_W_A, STRASSEN_W_B, STRASSEN_W_C, exact=True)


def matmul_tensor(n: int) -> np.ndarray:
    """The 0/1 tensor M with vec(AB)_i = sum_{k,l} M[i,k,l] vec(A)_k vec(B)_l."""
    M = np.zeros((n * n,) * 3, dtype=np.int64)
    for i in range(n):
        for j in range(n):
            for t in range(n):
                M[i + j * n, i + t * n, t + j * n] = 1
    return M


def decomposition_tensor(W_a, W_b, W_c) -> np.ndarray:
    """sum_j W_c[i,j] W_a[j,k] W_b[j,l] in exact integer arithmetic."""
    a, b, c = (np.asarray(w, dtype=np.int64) for w in (W_a, W_b, W_c))
    return np.einsum("ij,jk,jl->ikl", c, a, b)


def verify_exact(sol: BilinearSolution) -> bool:
    """True iff the ternary triple reproduces the matrix multiplication tensor exactly."""
    for name in ("W_a", "W_b", "W_c"):
        _ternary(getattr(sol, name), name)
    return bool(np.array_equal(decomposition_tensor(sol.W_a, sol.W_b, sol.W_c), matmul_tensor(sol.n)))


def gen_dataset(count: int, n: int = 2, seed: int = 0, dtype=np.float32) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """``count`` pairs (A, B) with i.i.d. uniform [-1, 1] entries, and their products."""
    if count <= 0:
        raise ValidationError("count must be positive")
    rng = np.random.default_rng(seed)
    A = rng.uniform(-1, 1, (count, n, n))
    B = rng.uniform(-1, 1, (count, n, n))
    return A.astype(dtype), B.astype(dtype), (A @ B).astype(dtype)


# ---------------------------------------------------------------------------
# Vectorized training over restarts
# ---------------------------------------------------------------------------


@dataclass
class SearchPlan:
    pairs: int = 100_000
    batch_size: int = 4
    lr_full: float = 0.1
    lr_quant: float = 0.001
    momentum: float = 0.9
    epochs_full: int = 1
    epochs_quant: int = 1


def ternarize_batch(W: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-restart ternarization of a stack of matrices (R, rows, cols) -> (pattern, alpha)."""
    delta = W.dtype.type(0.7) * np.abs(W).mean(axis=(-1, -2), keepdims=True)
    T = np.where(W > delta, 1, np.where(W < -delta, -1, 0)).astype(W.dtype)
    nnz = np.abs(T).sum(axis=(-1, -2), keepdims=True)
    alpha = (np.abs(W) * np.abs(T)).sum(axis=(-1, -2), keepdims=True) / np.maximum(nnz, 1)
    return T, alpha


def spn_loss_and_grads(Wa, Wb, Wc, a, b, c):
    """L2 loss and gradients of a stack of bilinear SPNs on one mini-batch.

    Shapes: W_a, W_b (R, r, n2); W_c (R, n2, r); a, b, c (batch, n2).
    Loss per restart is ``0.5 * mean_outputs (y - c)^2`` averaged over the batch.
    """
    bs, n2 = c.shape
    u = (Wa[:, None] * a[None, :, None, :]).sum(-1)  # R, batch, r
    v = (Wb[:, None] * b[None, :, None, :]).sum(-1)
    h = u * v
    y = (Wc[:, None] * h[:, :, None, :]).sum(-1)  # R, batch, n2
    e = y - c
    loss = (e * e).sum(axis=(1, 2)) / (2 * n2 * bs)
    dy = e * e.dtype.type(1.0 / (n2 * bs))
    gWc = (dy[:, :, :, None] * h[:, :, None, :]).sum(1)
    dh = (Wc[:, None] * dy[:, :, :, None]).sum(2)
    gWa = ((dh * v)[:, :, :, None] * a[None, :, None, :]).sum(1)
    gWb = ((dh * u)[:, :, :, None] * b[None, :, None, :]).sum(1)
    return loss, gWa, gWb, gWc


def init_weights(n: int, r: int, seeds: List[int], dtype=np.float32):
    n2 = n * n
    Wa = np.empty((len(seeds), r, n2), dtype)
    Wb = np.empty((len(seeds), r, n2), dtype)
    Wc = np.empty((len(seeds), n2, r), dtype)
    for i, s in enumerate(seeds):
        rng = np.random.default_rng(s)
        Wa[i] = rng.uniform(-1, 1, (r, n2))
        Wb[i] = rng.uniform(-1, 1, (r, n2))
        Wc[i] = rng.uniform(-1, 1, (n2, r))
    return Wa, Wb, Wc


def train_restarts(n: int, r: int, seeds: List[int], plan: SearchPlan, data_seed: int):
    """Run the two-phase schedule for each init seed; returns ternary patterns and final-epoch losses."""
    A, B, C = gen_dataset(plan.pairs, n, data_seed)
    a, b, c = vec(A), vec(B), vec(C)
    Wa, Wb, Wc = init_weights(n, r, seeds)
    f = np.float32
    mom = f(plan.momentum)
    vel = [np.zeros_like(W) for W in (Wa, Wb, Wc)]
    epoch_loss = np.zeros(len(seeds))
    schedule = [(False, plan.lr_full)] * plan.epochs_full + [(True, plan.lr_quant)] * plan.epochs_quant
    for quantized, lr in schedule:
        lr = f(lr)
        epoch_loss = np.zeros(len(seeds))
        steps = 0
        for s in range(0, plan.pairs, plan.batch_size):
            sl = slice(s, s + plan.batch_size)
            if quantized:
                (Ta, aa), (Tb, ab), (Tc, ac) = ternarize_batch(Wa), ternarize_batch(Wb), ternarize_batch(Wc)
                Ea, Eb, Ec = aa * Ta, ab * Tb, ac * Tc
            else:
                Ea, Eb, Ec = Wa, Wb, Wc
            with np.errstate(over="ignore", invalid="ignore"):
                loss, *grads = spn_loss_and_grads(Ea, Eb, Ec, a[sl], b[sl], c[sl])
                for W, v, g in zip((Wa, Wb, Wc), vel, grads):
                    v *= mom
                    v += g
                    W -= lr * v
            epoch_loss += loss
            steps += 1
        epoch_loss /= steps
    patterns = [ternarize_batch(W)[0].astype(np.int8) for W in (Wa, Wb, Wc)]
    return patterns, epoch_loss


@dataclass
class SearchResult:
    solution: Optional[BilinearSolution]
    report: List[dict] = field(default_factory=list)

    @property
    def found(self) -> bool:
        return self.solution is not None


def _chunk_job(args):
    n, r, seeds, plan, data_seed = args
    return train_restarts(n, r, seeds, plan, data_seed)


def search(
    n: int = 2,
    r: int = 7,
    restarts: int = 100,
    seed: int = 0,
    plan: SearchPlan = SearchPlan(),
    init: str = "uniform",
    chunk: int = 100,
    jobs: int = 1,
) -> SearchResult:
    """Look for an exact rank-``r`` ternary algorithm.

    Restart ``i`` initializes from seed ``seed + i``; the training pairs are drawn
    from ``seed``. Every restart's final ternary pattern is checked with
    :func:`verify_exact`, and the lowest-index exact one is returned.
    ``init="construction"`` starts from the naive r = n^3 algorithm instead.
    """
    if r < 1 or n < 1:
        raise ValidationError("n and r must be positive")
    if init == "construction":
        if r != n ** 3:
            raise ValidationError(f"construction init needs r = n^3 = {n ** 3}")
        W_a, W_b, W_c = naive_bilinear(n, n, n)
        sol = BilinearSolution(n, r, W_a, W_b, W_c, seed=seed, restart_index=0, loss=0.0)
        sol.exact = verify_exact(sol)
        return SearchResult(sol if sol.exact else None, [{"restart": 0, "seed": seed, "loss": 0.0,
                                                           "exact": sol.exact}])
    if init != "uniform":
        raise ValidationError(f"unknown init {init!r}")

    seeds = [seed + i for i in range(restarts)]
    chunks = [seeds[i:i + chunk] for i in range(0, restarts, chunk)]
    jobs_args = [(n, r, ch, plan, seed) for ch in chunks]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            outputs = list(pool.map(_chunk_job, jobs_args))
    else:
        outputs = [_chunk_job(a) for a in jobs_args]

    report: List[dict] = []
    best: Optional[BilinearSolution] = None
    for ch, ((Pa, Pb, Pc), losses) in zip(chunks, outputs):
        for j, s in enumerate(ch):
            idx = s - seed
            cand = BilinearSolution(n, r, Pa[j], Pb[j], Pc[j], seed=s, restart_index=idx, loss=float(losses[j]))
            cand.exact = verify_exact(cand)
            report.append({"restart": idx, "seed": s, "loss": _finite_or_none(losses[j]), "exact": cand.exact})
            if cand.exact and best is None:
                best = cand
    logger.info("search n=%d r=%d: %d/%d restarts exact", n, r, sum(x["exact"] for x in report), restarts)
    return SearchResult(best, report)
