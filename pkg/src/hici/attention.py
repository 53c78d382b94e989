"""The hierarchical attention module: construct, integrate, broadcast.

One layer maps a T x d sequence to a T x d sequence in three stages:

  1. local construction: the sequence is split into N = T/S contiguous
     segments; M shared learnable slot vectors cross-attend into each
     segment (in a d_b-wide bottleneck, H heads) to produce a local
     representation L_i of shape M x d per segment.
  2. global integration: all N*M local rows are pooled into five
     complementary column statistics (mean, max, min, population std,
     l2-normalized mean), compressed through a shared two-stage map
     d -> d_s -> d_b (each stage a projection followed by LayerNorm),
     then K learnable queries cross-attend over the five compressed rows
     and the result is expanded back to width d and scaled by a strictly
     positive softplus gate, giving the global context G of shape K x d.
  3. top-down broadcast: each segment attends over [G; L_i; X_i] with
     queries drawn from its own tokens only, H heads of width d/H, one
     softmax across all K+M+S visible positions, and no output
     projection (the host block applies its own).

M and K are fixed constants, so the bytes held by G and each L_i do not
grow with T. With the strictly causal scope the context presented to
segment i is built exclusively from positions before it: G_i pools
segments < i and the local block is L_{i-1} (zeros for segment 0), so
token t never sees information from positions > t.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .config import SCOPE_PRECEDING, HiCIConfig
from .tensor import (
    ShapeError,
    Tensor,
    concat_cols,
    concat_rows,
    flop_scope,
    l2_normalize,
    layer_norm,
    matmul,
    matmul_nt,
    max_rows,
    mean_rows,
    min_rows,
    mul_const,
    no_grad,
    parameter,
    reshape,
    scale,
    slice_cols,
    slice_rows,
    softmax_rows,
    softplus,
    std_rows,
)

# ---------------------------------------------------------------------------
# parameters


@dataclass
class LocalParams:
    """Slot queries and the bottleneck cross-attention of stage 1."""

    slots: Tensor   # M x d
    w_q: Tensor     # d x d_b
    w_k: Tensor     # d x d_b
    w_v: Tensor     # d x d_b
    w_o: Tensor     # d_b x d


@dataclass
class GlobalParams:
    """Shared compression, slot selection and gated expansion of stage 2."""

    compress_w1: Tensor  # d x d_s
    compress_g1: Tensor  # d_s
    compress_b1: Tensor  # d_s
    compress_w2: Tensor  # d_s x d_b
    compress_g2: Tensor  # d_b
    compress_b2: Tensor  # d_b
    queries: Tensor      # K x d_b
    w_q: Tensor          # d_b x d_b
    w_k: Tensor          # d_b x d_b
    w_v: Tensor          # d_b x d_b
    w_o: Tensor          # d_b x d_b
    expand: Tensor       # d_b x d
    gate_raw: Tensor     # scalar, gate = softplus(gate_raw) > 0


@dataclass
class BroadcastParams:
    """Query/key/value projections of stage 3 (no output projection)."""

    w_q: Tensor  # d x d
    w_k: Tensor  # d x d
    w_v: Tensor  # d x d


@dataclass
class HiCIParams:
    local: LocalParams
    global_: GlobalParams
    broadcast: BroadcastParams


def _xavier(rng, fan_in, fan_out):
    a = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=(fan_in, fan_out))


def init_hici_params(cfg: HiCIConfig, rng) -> HiCIParams:
    """Fresh parameters: slots/queries ~ N(0, 0.02), Xavier projections,
    unit LayerNorm affine, gate_raw = 0 (gate = ln 2)."""
    cfg.validate()
    d, d_b, d_s = cfg.d, cfg.d_b, cfg.d_s
    local = LocalParams(
        slots=parameter(rng.normal(0.0, 0.02, size=(cfg.M, d))),
        w_q=parameter(_xavier(rng, d, d_b)),
        w_k=parameter(_xavier(rng, d, d_b)),
        w_v=parameter(_xavier(rng, d, d_b)),
        w_o=parameter(_xavier(rng, d_b, d)),
    )
    global_ = GlobalParams(
        compress_w1=parameter(_xavier(rng, d, d_s)),
        compress_g1=parameter(np.ones(d_s)),
        compress_b1=parameter(np.zeros(d_s)),
        compress_w2=parameter(_xavier(rng, d_s, d_b)),
        compress_g2=parameter(np.ones(d_b)),
        compress_b2=parameter(np.zeros(d_b)),
        queries=parameter(rng.normal(0.0, 0.02, size=(cfg.K, d_b))),
        w_q=parameter(_xavier(rng, d_b, d_b)),
        w_k=parameter(_xavier(rng, d_b, d_b)),
        w_v=parameter(_xavier(rng, d_b, d_b)),
        w_o=parameter(_xavier(rng, d_b, d_b)),
        expand=parameter(_xavier(rng, d_b, d)),
        gate_raw=parameter(np.zeros(1)),
    )
    broadcast_p = BroadcastParams(
        w_q=parameter(_xavier(rng, d, d)),
        w_k=parameter(_xavier(rng, d, d)),
        w_v=parameter(_xavier(rng, d, d)),
    )
    return HiCIParams(local=local, global_=global_, broadcast=broadcast_p)


def named_tensors(params: HiCIParams, prefix=""):
    """Flat `{name: Tensor}` view in a stable order."""
    out = {}
    for group, obj in (("local", params.local), ("global", params.global_),
                       ("broadcast", params.broadcast)):
        for field in obj.__dataclass_fields__:
            out[f"{prefix}{group}.{field}"] = getattr(obj, field)
    return out


# ---------------------------------------------------------------------------
# attention-mass diagnostics


@dataclass
class AttnMassRecord:
    """Share of broadcast attention mass per (layer, head) on each region."""

    layer: int
    head: int
    frac_global: float
    frac_local: float
    frac_segment: float


class AttnMassAccumulator:
    """Sums broadcast attention probability mass per head and region.

    Fractions are normalized by the number of queries seen, so with
    uniform probabilities over K+M+S fully visible positions the global
    fraction is exactly K/(K+M+S).
    """

    def __init__(self, n_heads):
        self.n_heads = n_heads
        self.mass = np.zeros((n_heads, 3))
        self.n_queries = np.zeros(n_heads)

    def record(self, head, probs, n_global, n_local):
        # fsum is exactly rounded, so the uniform-probe baseline comes out
        # as the correctly rounded K/(K+M+S) rather than one ulp off
        ctx = n_global + n_local
        self.mass[head, 0] += math.fsum(probs[:, :n_global].ravel())
        self.mass[head, 1] += math.fsum(probs[:, n_global:ctx].ravel())
        self.mass[head, 2] += math.fsum(probs[:, ctx:].ravel())
        self.n_queries[head] += probs.shape[0]

    def records(self, layer=0):
        out = []
        for h in range(self.n_heads):
            nq = self.n_queries[h]
            if nq == 0:
                raise ValueError("no attention mass recorded")
            out.append(AttnMassRecord(
                layer=layer,
                head=h,
                frac_global=float(self.mass[h, 0] / nq),
                frac_local=float(self.mass[h, 1] / nq),
                frac_segment=float(self.mass[h, 2] / nq),
            ))
        return out


# ---------------------------------------------------------------------------
# stages


def partition(x, seg_len):
    """Split T x d into T/S contiguous S x d segments, order preserved."""
    x_rows = x.data.shape[0]
    if x_rows % seg_len != 0:
        raise ShapeError(
            f"sequence length T={x_rows} is not divisible by segment length S={seg_len}")
    return [slice_rows(x, i * seg_len, (i + 1) * seg_len)
            for i in range(x_rows // seg_len)]


def _mha(q, k, v, n_heads, visible=None, uniform_probe=False, mass=None, regions=(0, 0)):
    """Multi-head scaled dot-product attention, heads split contiguously.

    Scale is 1/sqrt(per-head width). No output projection; callers add
    their own where the architecture has one. `uniform_probe` replaces
    the attention logits with zeros (uniform over visible positions),
    a diagnostic switch for exact attention-mass baselines.
    """
    width = q.data.shape[1]
    if width % n_heads != 0:
        raise ShapeError(f"attention width {width} not divisible by {n_heads} heads")
    dk = width // n_heads
    inv_scale = 1.0 / math.sqrt(dk)
    outs = []
    for h in range(n_heads):
        qh = slice_cols(q, h * dk, (h + 1) * dk)
        kh = slice_cols(k, h * dk, (h + 1) * dk)
        vh = slice_cols(v, h * dk, (h + 1) * dk)
        if uniform_probe:
            logits = Tensor(np.zeros((q.data.shape[0], k.data.shape[0])))
        else:
            logits = mul_const(matmul_nt(qh, kh), inv_scale)
        probs = softmax_rows(logits, visible)
        if mass is not None:
            mass.record(h, probs.data, regions[0], regions[1])
        outs.append(matmul(probs, vh))
    return concat_cols(outs) if n_heads > 1 else outs[0]


def local_construct(x_seg, p: LocalParams, cfg: HiCIConfig):
    """Compress one S x d segment into M x d via bottleneck cross-attention."""
    if x_seg.data.shape != (cfg.S, cfg.d):
        raise ShapeError(
            f"local_construct: segment shape {x_seg.data.shape} vs expected ({cfg.S}, {cfg.d})")
    q = matmul(p.slots, p.w_q)
    k = matmul(x_seg, p.w_k)
    v = matmul(x_seg, p.w_v)
    attended = _mha(q, k, v, cfg.H)
    return matmul(attended, p.w_o)


def pooled_stats(l_rows):
    """Five complementary column statistics of the stacked local rows.

    Rows of the result: mean, max, min, population std, l2-normalized
    mean. Exact-summation reductions make the outcome independent of row
    order, so any permutation of segments leaves the pool bit-identical.
    """
    mean = mean_rows(l_rows)
    mx = max_rows(l_rows)
    mn = min_rows(l_rows)
    sd = std_rows(l_rows)
    direction = l2_normalize(mean)
    d = l_rows.data.shape[1]
    return concat_rows([reshape(t, (1, d)) for t in (mean, mx, mn, sd, direction)])


def integrate_global(l_list, p: GlobalParams, cfg: HiCIConfig, gate_override=None):
    """Pool local representations into the K x d global context.

    `gate_override` (diagnostic) bypasses the learned softplus gate with
    a fixed scalar so gate linearity can be checked in isolation.
    """
    if not l_list:
        raise ValueError("integrate_global needs at least one segment of local slots")
    l_cat = concat_rows(l_list)
    z = pooled_stats(l_cat)
    z1 = layer_norm(matmul(z, p.compress_w1), p.compress_g1, p.compress_b1, cfg.ln_eps)
    z2 = layer_norm(matmul(z1, p.compress_w2), p.compress_g2, p.compress_b2, cfg.ln_eps)
    q = matmul(p.queries, p.w_q)
    k = matmul(z2, p.w_k)
    v = matmul(z2, p.w_v)
    selected = matmul(_mha(q, k, v, cfg.H), p.w_o)
    expanded = matmul(selected, p.expand)
    gate = softplus(p.gate_raw) if gate_override is None else Tensor([float(gate_override)])
    return scale(expanded, gate)


def _segment_visibility(n_ctx, seg_len):
    """Causal mask: context positions always visible, tokens only up to self."""
    vis = np.ones((seg_len, n_ctx + seg_len), dtype=bool)
    vis[:, n_ctx:] = np.tril(np.ones((seg_len, seg_len), dtype=bool))
    return vis


def broadcast(x_seg, l_ctx, g_ctx, p: BroadcastParams, cfg: HiCIConfig,
              mass=None, uniform_probe=False):
    """Context-conditioned update of one segment.

    Keys/values come from [G; L; X_i] (absent blocks are skipped), queries
    from the segment tokens only; H heads of width d/H under one softmax
    across all visible positions; no output projection. With the causal
    mask a query at offset t sees every context position but only segment
    positions <= t.
    """
    if x_seg.data.shape != (cfg.S, cfg.d):
        raise ShapeError(
            f"broadcast: segment shape {x_seg.data.shape} vs expected ({cfg.S}, {cfg.d})")
    parts = [t for t in (g_ctx, l_ctx) if t is not None]
    n_global = g_ctx.data.shape[0] if g_ctx is not None else 0
    n_local = l_ctx.data.shape[0] if l_ctx is not None else 0
    aug = concat_rows(parts + [x_seg]) if parts else x_seg
    with flop_scope("broadcast_proj"):
        q = matmul(x_seg, p.w_q)
        k = matmul(aug, p.w_k)
        v = matmul(aug, p.w_v)
    visible = (_segment_visibility(n_global + n_local, cfg.S)
               if cfg.causal_segment_mask else None)
    with flop_scope("broadcast_attn"):
        return _mha(q, k, v, cfg.H, visible=visible, uniform_probe=uniform_probe,
                    mass=mass, regions=(n_global, n_local))


def hici_forward(x, params: HiCIParams, cfg: HiCIConfig,
                 mass=None, uniform_probe=False):
    """Full three-stage pass: T x d in, T x d out, T divisible by S.

    With global_scope='all_segments' one shared G pools every segment and
    each segment's own L_i sits in its context. The strictly causal
    'preceding_segments' scope gives segment i a G pooled from segments
    < i and the local block L_{i-1}; segment 0 receives zeros for both.
    """
    cfg.validate()
    if x.data.ndim != 2 or x.data.shape[1] != cfg.d:
        raise ShapeError(f"hici_forward: input shape {x.data.shape} vs width d={cfg.d}")
    segments = partition(x, cfg.S)
    n_seg = len(segments)

    l_list = None
    if cfg.M > 0:
        with flop_scope("local"):
            l_list = [local_construct(s, params.local, cfg) for s in segments]

    g_for_seg = [None] * n_seg
    l_for_seg = [None] * n_seg
    if cfg.M > 0:
        if cfg.global_scope == SCOPE_PRECEDING:
            zeros_l = Tensor(np.zeros((cfg.M, cfg.d)))
            l_for_seg = [zeros_l] + l_list[:-1]
        else:
            l_for_seg = l_list
    if cfg.K > 0:
        with flop_scope("global"):
            if cfg.global_scope == SCOPE_PRECEDING:
                zeros_g = Tensor(np.zeros((cfg.K, cfg.d)))
                g_for_seg = [zeros_g] + [
                    integrate_global(l_list[:i], params.global_, cfg)
                    for i in range(1, n_seg)]
            else:
                shared = integrate_global(l_list, params.global_, cfg)
                g_for_seg = [shared] * n_seg

    outs = [broadcast(seg, l_for_seg[i], g_for_seg[i], params.broadcast, cfg,
                      mass=mass, uniform_probe=uniform_probe)
            for i, seg in enumerate(segments)]
    return concat_rows(outs) if n_seg > 1 else outs[0]


def collect_attn_mass(x, params: HiCIParams, cfg: HiCIConfig,
                      uniform_probe=False, layer=0):
    """Broadcast attention-mass fractions per head for one layer.

    Runs a gradient-free forward pass; per head, sums the probability
    mass landing on global / local / segment positions over every query
    of every segment and normalizes by the query count. The three
    fractions of a record sum to 1 up to softmax rounding.
    """
    acc = AttnMassAccumulator(cfg.H)
    with no_grad():
        hici_forward(x, params, cfg, mass=acc, uniform_probe=uniform_probe)
    return acc.records(layer=layer)
