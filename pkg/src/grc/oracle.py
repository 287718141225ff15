"""Independent checks: central finite differences and a scalar-loop GRC-Attention.

``reference_grc_step`` re-derives one training-stage forward pass with plain
Python floats and ``math`` only. It does not import the tensor module, so a
systematic bug there cannot hide in both paths.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass
from typing import Callable, Optional

import numpy as np

from .errors import OracleError

REL_DELTA = 1e-12
MAX_BTT = 4
MAX_D = 8


# ---------------------------------------------------------------------------
# finite differences


def finite_diff_grad(f: Callable[[np.ndarray], float], theta: np.ndarray, eps: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``f`` at ``theta`` (float64)."""
    theta = np.array(theta, dtype=np.float64, copy=True)
    grad = np.zeros_like(theta)
    flat = theta.reshape(-1)
    g = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        fp = f(theta)
        flat[i] = orig - eps
        fm = f(theta)
        flat[i] = orig
        if not (math.isfinite(fp) and math.isfinite(fm)):
            coord = np.unravel_index(i, theta.shape)
            raise OracleError(f"non-finite function value near coordinate {tuple(int(c) for c in coord)}")
        g[i] = (fp - fm) / (2 * eps)
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, delta: float = REL_DELTA) -> np.ndarray:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), delta)


@dataclass
class GradCheckReport:
    name: str
    max_rel_err: float
    max_abs_err: float
    passed: bool
    tolerance: float
    size: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def gradcheck_model(model, batch, eps: float = 1e-5, tol: float = 1e-5,
                    names: Optional[list[str]] = None) -> list[GradCheckReport]:
    """Compare tape gradients of the training loss with central differences, per parameter.

    The model must be float64. Cache state is restored before every evaluation
    so that each loss evaluation starts from the same ``C_{t-1}``.
    """
    from .tensor import Tape

    if model.dtype != np.float64:
        raise OracleError("gradient checks need a float64 model")
    snapshot = model.cache_state()

    def loss_value() -> float:
        model.load_cache_state(snapshot)
        _, loss = model.forward(batch, training=True)
        return float(loss.data)

    model.zero_grad()
    model.load_cache_state(snapshot)
    with Tape() as tape:
        _, loss = model.forward(batch, training=True)
    tape.backward(loss)
    analytic = {n: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data))
                for n, p in model.named_parameters()}

    reports = []
    for name, p in model.named_parameters():
        if names is not None and name not in names:
            continue
        original = p.data.copy()

        def f(theta, p=p):
            p.data = theta
            return loss_value()

        numeric = finite_diff_grad(f, original, eps)
        p.data = original
        a = analytic[name]
        rel = float(relative_error(a, numeric).max())
        absd = float(np.abs(a - numeric).max())
        reports.append(GradCheckReport(name, rel, absd, rel < tol, tol, int(a.size)))
    model.load_cache_state(snapshot)
    model.zero_grad()
    return reports


# ---------------------------------------------------------------------------
# scalar-loop reference


def _sig(v: float) -> float:
    if v >= 0:
        return 1.0 / (1.0 + math.exp(-v))
    e = math.exp(v)
    return e / (1.0 + e)


def _affine(rows, w, b=None):
    """rows: list of vectors; w: [in][out]."""
    n_out = len(w[0])
    out = []
    for r in rows:
        vec = []
        for j in range(n_out):
            s = b[j] if b is not None else 0.0
            for i in range(len(r)):
                s += r[i] * w[i][j]
            vec.append(s)
        out.append(vec)
    return out


def _softmax(v):
    m = max(v)
    e = [math.exp(x - m) for x in v]
    s = sum(e)
    return [x / s for x in e]


def _attend(q_rows, k_rows, v_rows, heads, scale_width):
    """Per-head scaled dot-product attention; returns rows of concatenated head outputs."""
    dq = len(q_rows[0]) // heads
    dv = len(v_rows[0]) // heads
    scale = 1.0 / math.sqrt(scale_width / heads)
    out = [[0.0] * (dv * heads) for _ in q_rows]
    for h in range(heads):
        for i, q in enumerate(q_rows):
            scores = []
            for k in k_rows:
                s = 0.0
                for c in range(dq):
                    s += q[h * dq + c] * k[h * dq + c]
                scores.append(s * scale)
            w = _softmax(scores)
            for c in range(dv):
                acc = 0.0
                for j, v in enumerate(v_rows):
                    acc += w[j] * v[h * dv + c]
                out[i][h * dv + c] = acc
    return out


def _resample(tokens, t_m):
    """Linear resampling of a token list to ``t_m`` tokens (endpoints aligned)."""
    t = len(tokens)
    if t == t_m:
        return [list(r) for r in tokens]
    width = len(tokens[0])
    out = []
    for j in range(t_m):
        if t == 1:
            out.append(list(tokens[0]))
            continue
        pos = (t - 1) / 2.0 if t_m == 1 else j * (t - 1) / (t_m - 1)
        lo = min(int(math.floor(pos)), t - 2)
        a = pos - lo
        out.append([(1.0 - a) * tokens[lo][c] + a * tokens[lo + 1][c] for c in range(width)])
    return out


def reference_grc_step(x, params: dict, c_prev, heads: int, ratio: float = 0.5, training: bool = True,
                       return_branches: bool = False):
    """One GRC-Attention forward pass with explicit loops.

    ``x`` is ``[B][T][D]``; ``params`` holds nested lists with weights stored
    ``[in][out]``: q_w q_b k_w v_w v_b out_w out_b qb_w qb_b kb_w vb_w vb_b
    w_u b_u w_r b_r w_c b_c lam. Returns ``(C_t, O)``; with
    ``return_branches`` also the merged self and cached branch outputs.
    """
    b_sz, t_len, d = len(x), len(x[0]), len(x[0][0])
    t_m, d_m = len(c_prev), len(c_prev[0])
    if max(b_sz, t_len, t_m) > MAX_BTT or d > MAX_D:
        raise OracleError(f"oracle capped at B,T,T_m <= {MAX_BTT} and D <= {MAX_D}")
    if d_m != int(math.floor(ratio * d + 0.5)):
        raise OracleError("cache width does not match the caching ratio")
    p = params
    x_bar = [[row[:d_m] for row in seq] for seq in x]

    if training:
        per_item = []
        for bi in range(b_sz):
            xi = _resample(x_bar[bi], t_m)
            c_i = []
            for s in range(t_m):
                joint = xi[s] + c_prev[s]
                gu = [_sig(v) for v in _affine([joint], p["w_u"], p["b_u"])[0]]
                gr = [_sig(v) for v in _affine([joint], p["w_r"], p["b_r"])[0]]
                reset = xi[s] + [gr[c] * c_prev[s][c] for c in range(d_m)]
                cand = _affine([reset], p["w_c"], p["b_c"])[0]
                c_i.append([(1.0 - gu[c]) * c_prev[s][c] + gu[c] * cand[c] for c in range(d_m)])
            per_item.append(c_i)
        c_t = [[sum(per_item[bi][s][c] for bi in range(b_sz)) / b_sz for c in range(d_m)] for s in range(t_m)]
    else:
        c_t = [list(r) for r in c_prev]

    k_mem = _affine(c_t, p["kb_w"])
    v_mem = _affine(c_t, p["vb_w"], p["vb_b"])
    dh = d // heads
    outs, selfs, mems = [], [], []
    for bi in range(b_sz):
        q = _affine(x[bi], p["q_w"], p["q_b"])
        k = _affine(x[bi], p["k_w"])
        v = _affine(x[bi], p["v_w"], p["v_b"])
        o_self = _attend(q, k, v, heads, d)
        q_mem = _affine(x_bar[bi], p["qb_w"], p["qb_b"])
        o_mem = _attend(q_mem, k_mem, v_mem, heads, d_m)
        mixed = []
        for i in range(t_len):
            row = []
            for c in range(d):
                s = _sig(p["lam"][c // dh])
                row.append(s * o_mem[i][c] + (1.0 - s) * o_self[i][c])
            mixed.append(row)
        outs.append(_affine(mixed, p["out_w"], p["out_b"]))
        selfs.append(o_self)
        mems.append(o_mem)
    if return_branches:
        return c_t, outs, selfs, mems
    return c_t, outs


def layer_params(layer) -> dict:
    """Nested-list copy of a :class:`GrcAttentionLayer`'s weights for the oracle."""
    c = layer.cache
    src = {
        "q_w": layer.q.weight, "q_b": layer.q.bias, "k_w": layer.k.weight,
        "v_w": layer.v.weight, "v_b": layer.v.bias, "out_w": layer.out.weight, "out_b": layer.out.bias,
        "qb_w": layer.q_bar.weight, "qb_b": layer.q_bar.bias, "kb_w": layer.k_bar.weight,
        "vb_w": layer.v_bar.weight, "vb_b": layer.v_bar.bias,
        "w_u": c.w_u, "b_u": c.b_u, "w_r": c.w_r, "b_r": c.b_r, "w_c": c.w_c, "b_c": c.b_c,
        "lam": layer.lam,
    }
    return {k: v.data.astype(float).tolist() for k, v in src.items()}


# ---------------------------------------------------------------------------
# canned instances


def tiny_instance(batch: int = 1, tokens: int = 2, cache_len: int = 2, d_model: int = 4, d_cache: int = 2,
                  heads: int = 2, seed: int = 0, vocab: int = 5, num_classes: int = 3):
    """A float64 one-block classifier plus a batch, with a warm random cache and random lambda.

    A zero cache would give the reset gate an identically zero gradient, which
    a relative-error check cannot score, so the cache starts non-zero.
    """
    from .model import ModelConfig, build_model
    from .tasks import TaskBatch

    cfg = ModelConfig(layers=1, d_model=d_model, heads=heads, cache_len=cache_len, cache_ratio=d_cache / d_model,
                      ffn_mult=2, vocab=vocab, max_len=tokens, num_classes=num_classes)
    model = build_model(cfg, seed, np.float64)
    rng = np.random.default_rng([seed, 99])
    layer = model.blocks[0].attn
    if layer.d_m != d_cache:
        raise OracleError(f"D_m={d_cache} is not reachable from D={d_model}")
    layer.cache.C = rng.standard_normal((cache_len, d_cache))
    layer.lam.data = rng.standard_normal(heads)
    for _, p in model.named_parameters():
        if p.data.ndim == 1:
            p.data = p.data + 0.1 * rng.standard_normal(p.shape)
    ids = rng.integers(0, vocab, size=(batch, tokens))
    labels = rng.integers(0, num_classes, size=batch)
    return model, TaskBatch(ids, labels)


def random_layer_instance(rng: np.random.Generator, max_b: int = 3, max_t: int = 4, d_choices=(4, 8)):
    """Random tiny GRC-Attention layer, input and previous cache (float64)."""
    from .attention import GrcAttentionLayer

    d = int(rng.choice(d_choices))
    heads = int(rng.choice([h for h in (1, 2, 4) if d % h == 0 and (d // 2) % h == 0]))
    t_m = int(rng.integers(1, MAX_BTT + 1))
    layer = GrcAttentionLayer(d, heads, t_m, 0.5, np.random.default_rng(int(rng.integers(1 << 31))), np.float64)
    for _, p in layer.named_parameters():
        p.data = rng.standard_normal(p.shape)
    layer.cache.C = rng.standard_normal((t_m, layer.d_m))
    b = int(rng.integers(1, max_b + 1))
    t = int(rng.integers(1, max_t + 1))
    x = rng.standard_normal((b, t, d))
    return layer, x


def oracle_agreement(instances: int = 100, seed: int = 0) -> float:
    """Max |library - oracle| over random instances, covering both the new cache and the output."""
    from .tensor import Tensor

    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        layer, x = random_layer_instance(rng)
        c_prev = layer.cache.C.copy()
        params = layer_params(layer)
        c_ref, o_ref = reference_grc_step(x.tolist(), params, c_prev.tolist(), layer.heads)
        out = layer(Tensor(x), training=True)
        worst = max(worst, float(np.abs(np.array(o_ref) - out.data).max()),
                    float(np.abs(np.array(c_ref) - layer.cache.C).max()))
    return worst
