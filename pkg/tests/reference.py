"""Loop-based reference computations used as test oracles."""
import math

import numpy as np


def gelu(v):
    return 0.5 * v * (1 + math.tanh(math.sqrt(2 / math.pi) * (v + 0.044715 * v ** 3)))


def layer_norm_vec(x, g, b, eps=1e-5):
    mu = sum(x) / len(x)
    var = sum((v - mu) ** 2 for v in x) / len(x)
    return [(x[i] - mu) / math.sqrt(var + eps) * g[i] + b[i] for i in range(len(x))]


def vecmat(v, m):
    return [sum(v[k] * m[k][j] for k in range(len(v))) for j in range(len(m[0]))]


def vadd(a, b):
    return [x + y for x, y in zip(a, b)]


def softmax_list(scores):
    top = max(scores)
    e = [math.exp(s - top) for s in scores]
    z = sum(e)
    return [v / z for v in e]


def encoder_forward(params, ids, mask):
    """Per-position, per-head scalar forward of one sequence; returns all layer outputs."""
    cfg = params.config
    d, h = cfg.hidden_dim, cfg.num_heads
    dh = d // h
    P = lambda t: t.data.tolist()  # noqa: E731
    tok, pos = P(params.tok_emb), P(params.pos_emb)
    L = len(ids)
    x = [vadd(tok[ids[p]], pos[p]) for p in range(L)]
    outs = [x]
    for lp in params.layers:
        wq, wk, wv, wo = P(lp.wq), P(lp.wk), P(lp.wv), P(lp.wo)
        bq, bk, bv, bo = P(lp.bq), P(lp.bk), P(lp.bv), P(lp.bo)
        q = [vadd(vecmat(x[p], wq), bq) for p in range(L)]
        k = [vadd(vecmat(x[p], wk), bk) for p in range(L)]
        v = [vadd(vecmat(x[p], wv), bv) for p in range(L)]
        new = []
        for p in range(L):
            ctx = [0.0] * d
            for head in range(h):
                sl = range(head * dh, (head + 1) * dh)
                keys = [j for j in range(L) if mask[j]]
                scores = [sum(q[p][c] * k[j][c] for c in sl) / math.sqrt(dh) for j in keys]
                alpha = softmax_list(scores)
                for a, j in zip(alpha, keys):
                    for c in sl:
                        ctx[c] += a * v[j][c]
            att = vadd(vecmat(ctx, wo), bo)
            y = layer_norm_vec(vadd(x[p], att), P(lp.ln1_g), P(lp.ln1_b))
            hid = [gelu(u) for u in vadd(vecmat(y, P(lp.w1)), P(lp.b1))]
            f = vadd(vecmat(hid, P(lp.w2)), P(lp.b2))
            new.append(layer_norm_vec(vadd(y, f), P(lp.ln2_g), P(lp.ln2_b)))
        x = new
        outs.append(x)
    return [np.array(o) for o in outs]


def attentive_pool(h, mask, w, b, u):
    rows = [i for i in range(len(h)) if mask[i]]
    scores = []
    for i in rows:
        proj = [math.tanh(sum(h[i][k] * w[k][j] for k in range(len(h[i]))) + b[j]) for j in range(len(b))]
        scores.append(sum(u[j] * proj[j] for j in range(len(u))))
    alpha = softmax_list(scores)
    out = [0.0] * len(h[0])
    for a, i in zip(alpha, rows):
        for c in range(len(out)):
            out[c] += a * h[i][c]
    return np.array(out)
