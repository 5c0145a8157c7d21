"""Single-layer forward-pass complexity sweep.

Four implementations over a window-size sweep on one fixed input: the
linear-memory shared-query layer, the same layer computed through explicit
k**2 patch extraction, center-query window attention through patch
extraction, and direct convolution. Transient memory comes from the
deterministic AllocationLedger (never OS RSS); latency from a monotonic wall
clock, single-threaded, mean/std plus median over the post-warmup repeats.

The unfold-based paths here duplicate the oracle math with a memory-conscious
schedule (keys are patch-extracted, consumed, and freed before values are),
so they stay runnable at the reference 256x256x64 input where holding both
patch buffers at k=15 would not fit. They are tested for agreement against
the oracles at small sizes.
"""

from __future__ import annotations

import gc
import statistics
import time
from dataclasses import dataclass

import numpy as np

from .layer import QnAConfig, QnAParams, init_params, qna_forward, used_queries
from .model import _qna_flops
from .oracles import SasaParams, unfold
from .tensor import (
    AllocationLedger,
    ShapeError,
    make_rng,
    conv2d,
    same_output_size,
    softmax_rows,
    truncated_normal,
)

IMPLS = ("qna_efficient", "qna_unfold", "sasa_unfold", "conv")
DEFAULT_K_SWEEP = (3, 5, 7, 9, 11, 13, 15)
_DTYPES = {"f32": np.float32, "f64": np.float64}


@dataclass(frozen=True)
class BenchCase:
    impl: str
    H: int
    W: int
    D: int
    k: int
    stride: int = 1
    heads: int = 1
    num_queries: int = 1
    dtype: str = "f32"
    repeats: int = 5
    warmup: int = 2

    def __post_init__(self) -> None:
        if self.impl not in IMPLS:
            raise ShapeError(f"unknown impl {self.impl!r}; expected one of {IMPLS}")
        if min(self.H, self.W, self.D, self.k, self.stride, self.heads, self.num_queries) < 1:
            raise ShapeError("case dimensions must be >= 1")
        if self.dtype not in _DTYPES:
            raise ShapeError(f"dtype must be 'f32' or 'f64', got {self.dtype!r}")
        if self.repeats < 5:
            raise ShapeError(f"repeats must be >= 5, got {self.repeats}")
        if self.warmup < 2:
            raise ShapeError(f"warmup must be >= 2, got {self.warmup}")
        if self.D % self.heads != 0:
            raise ShapeError(f"D {self.D} not divisible by heads {self.heads}")


@dataclass
class BenchRow:
    impl: str
    k: int
    stride: int
    H: int
    W: int
    D: int
    heads: int
    num_queries: int
    dtype: str
    latency_ms_mean: float
    latency_ms_std: float
    latency_ms_median: float
    peak_extra_bytes: int
    mac_count: int


# ---------------------------------------------------------------------------
# Timed implementations
# ---------------------------------------------------------------------------


def _qna_unfold_forward(x, cfg: QnAConfig, params: QnAParams, ledger) -> np.ndarray:
    """Patch-extraction route to the same function as qna_forward."""
    H, W, Din = x.shape
    L, h, dh, Dout = cfg.num_queries, cfg.heads, cfg.head_dim, cfg.dim_out
    k = cfg.k
    x2 = x.reshape(H * W, Din)
    q = used_queries(cfg, params)
    if cfg.scale_scores:
        q = q / np.sqrt(np.asarray(dh, dtype=x.dtype))
    neg_inf = np.asarray(-np.inf, dtype=x.dtype)

    keys = (x2 @ params.w_k).reshape(H, W, Dout)
    kp = unfold(keys, k, cfg.stride, ledger)
    del keys
    Hp, Wp = kp.patches.shape[0], kp.patches.shape[1]
    n_out = Hp * Wp
    kp_flat = kp.patches.reshape(n_out, k * k, Dout)
    mask_flat = kp.mask.reshape(n_out, k * k)
    weighted = np.empty((L, h, n_out, k * k), dtype=x.dtype)
    for l in range(L):
        for g in range(h):
            sl = slice(g * dh, (g + 1) * dh)
            logits = kp_flat[:, :, sl] @ q[l, sl]
            logits += params.bias[l].reshape(k * k)
            logits = np.where(mask_flat, logits, neg_inf)
            att = softmax_rows(logits, ledger)
            weighted[l, g] = att * params.mix[l]
    del kp, kp_flat, mask_flat

    values = (x2 @ params.w_v + params.b_v).reshape(H, W, Dout)
    vp = unfold(values, k, cfg.stride, ledger).patches.reshape(n_out, k * k, Dout)
    del values
    y = np.zeros((n_out, Dout), dtype=x.dtype)
    for l in range(L):
        for g in range(h):
            sl = slice(g * dh, (g + 1) * dh)
            y[:, sl] += np.matmul(weighted[l, g][:, None, :], vp[:, :, sl])[:, 0, :]
    del vp
    return (y @ params.w_o + params.b_o).reshape(Hp, Wp, Dout)


def _sasa_unfold_forward(x, k: int, stride: int, params: SasaParams, ledger) -> np.ndarray:
    """Center-query window attention via patch extraction, keys freed before
    values are extracted."""
    H, W, D = x.shape
    x2 = x.reshape(H * W, D)
    d_att = params.w_q.shape[1]
    queries = (x2 @ params.w_q).reshape(H, W, d_att)[::stride, ::stride]
    queries = np.ascontiguousarray(queries / np.sqrt(np.asarray(d_att, dtype=x.dtype)))
    Hp, Wp = queries.shape[0], queries.shape[1]
    n_out = Hp * Wp

    keys = (x2 @ params.w_k).reshape(H, W, d_att)
    kp = unfold(keys, k, stride, ledger)
    del keys
    logits = np.matmul(kp.patches.reshape(n_out, k * k, d_att),
                       queries.reshape(n_out, d_att, 1))[:, :, 0]
    logits = np.where(kp.mask.reshape(n_out, k * k), logits,
                      np.asarray(-np.inf, dtype=x.dtype))
    del kp
    att = softmax_rows(logits, ledger)

    values = (x2 @ params.w_v).reshape(H, W, params.w_v.shape[1])
    vp = unfold(values, k, stride, ledger).patches.reshape(n_out, k * k, -1)
    del values
    out = np.matmul(att[:, None, :], vp)[:, 0, :]
    return out.reshape(Hp, Wp, -1)


def _build_runner(case: BenchCase, rng):
    """(callable(ledger) -> output, mac_count) with inputs drawn from rng."""
    dt = _DTYPES[case.dtype]
    x = rng.standard_normal((case.H, case.W, case.D)).astype(dt)
    hp = same_output_size(case.H, case.stride)
    wp = same_output_size(case.W, case.stride)

    if case.impl in ("qna_efficient", "qna_unfold"):
        cfg = QnAConfig(
            k=case.k, stride=case.stride, heads=case.heads,
            num_queries=case.num_queries, dim_in=case.D, dim_out=case.D,
        )
        params = init_params(cfg, rng, dtype=dt)
        macs = _qna_flops(cfg, case.H, case.W)
        if case.impl == "qna_efficient":
            return (lambda ledger: qna_forward(x, cfg, params, ledger)), macs
        return (lambda ledger: _qna_unfold_forward(x, cfg, params, ledger)), macs

    if case.impl == "sasa_unfold":
        params = SasaParams(
            w_q=truncated_normal(rng, (case.D, case.D), dtype=dt),
            w_k=truncated_normal(rng, (case.D, case.D), dtype=dt),
            w_v=truncated_normal(rng, (case.D, case.D), dtype=dt),
        )
        d2 = case.D * case.D
        macs = (2 * case.H * case.W + hp * wp) * d2 + 2 * case.k * case.k * hp * wp * case.D
        return (lambda ledger: _sasa_unfold_forward(x, case.k, case.stride, params, ledger)), macs

    w = truncated_normal(rng, (case.k, case.k, case.D, case.D), dtype=dt)
    macs = hp * wp * case.k * case.k * case.D * case.D
    return (lambda ledger: conv2d(x, w, case.stride, "same", ledger)), macs


def run_sweep(cases, seed: int = 42, progress=None) -> list[BenchRow]:
    """One BenchRow per case, in case order.

    Inputs and weights are redrawn from the same seed for every case, so byte
    counts are deterministic; only the latency fields vary run to run. The
    ledger pass is separate from the timed repeats (recording is cheap but
    not free), relying on the ops' allocation pattern being data-independent.
    """
    rows: list[BenchRow] = []
    for case in cases:
        fn, macs = _build_runner(case, make_rng(seed))
        gc.collect()

        ledger = AllocationLedger()
        fn(ledger)
        peak = ledger.peak_extra_bytes

        for _ in range(case.warmup):
            fn(None)
        times_ms = []
        for _ in range(case.repeats):
            gc.collect()
            t0 = time.perf_counter()
            fn(None)
            times_ms.append((time.perf_counter() - t0) * 1e3)

        row = BenchRow(
            impl=case.impl, k=case.k, stride=case.stride,
            H=case.H, W=case.W, D=case.D,
            heads=case.heads, num_queries=case.num_queries, dtype=case.dtype,
            latency_ms_mean=statistics.fmean(times_ms),
            latency_ms_std=statistics.pstdev(times_ms),
            latency_ms_median=statistics.median(times_ms),
            peak_extra_bytes=peak,
            mac_count=macs,
        )
        rows.append(row)
        if progress is not None:
            progress(row)
        del fn
        gc.collect()
    return rows


CSV_HEADER = "impl,k,stride,H,W,D,heads,L,dtype,latency_ms_mean,latency_ms_std,peak_extra_bytes,mac_count"


def emit_csv(rows, path) -> None:
    """Pinned column set; floats via repr (C-locale, round-trippable)."""
    lines = [CSV_HEADER]
    for r in rows:
        lines.append(
            f"{r.impl},{r.k},{r.stride},{r.H},{r.W},{r.D},{r.heads},{r.num_queries},"
            f"{r.dtype},{r.latency_ms_mean!r},{r.latency_ms_std!r},"
            f"{r.peak_extra_bytes},{r.mac_count}"
        )
    with open(path, "w", newline="") as f:
        f.write("\n".join(lines) + "\n")


def default_cases(H: int = 256, W: int = 256, D: int = 64, dtype: str = "f32",
                  impls=IMPLS, k_values=DEFAULT_K_SWEEP,
                  repeats: int = 5, warmup: int = 2) -> list[BenchCase]:
    """The reference sweep: every impl at every window size, one fixed input."""
    return [
        BenchCase(impl=impl, H=H, W=W, D=D, k=k, dtype=dtype, repeats=repeats, warmup=warmup)
        for impl in impls
        for k in k_values
    ]
