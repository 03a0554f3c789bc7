"""Finite-difference gradient suite: every differentiable op plus the full student objective."""
from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from ..distill.losses import DistillSpec
from ..distill.student import ProjectionSet, distill_losses, init_student
from ..distill.teachers import TeacherBundle, teacher_outputs
from ..encoder import AttentivePooler, Classifier, ClassifierHead, EncoderConfig, attentive_pool, classify
from ..numcore import ops
from ..numcore.gradcheck import check_gradients, finite_diff_grad, relative_error
from ..numcore.rng import Rng
from ..numcore.tensor import Tape, Tensor

F64 = np.float64


@dataclass
class GradResult:
    name: str
    max_rel_error: float
    num_params: int
    seconds: float

    def passed(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def _leaf(rng: Rng, shape, name: str, shift: float = 0.0, scale: float = 1.0) -> Tensor:
    t = Tensor(rng.normal(shape, scale, F64) + shift, requires_grad=True, name=name)
    return t


def _weighted(out: Tensor, r: np.ndarray) -> Tensor:
    """Scalar probe ``sum(out * r)`` so every output element carries a distinct weight."""
    return ops.sum(ops.mul(out, Tensor.wrap(r)))


def op_cases(seed: int = 0) -> list[tuple[str, Callable[[], Tensor], list]]:
    """(name, loss builder, leaf tensors) for each differentiable primitive."""
    rng = Rng(seed)
    cases = []

    def add_case(name, builder, leaves, out_shape=None):
        probe = {}

        def loss():
            out = builder()
            if out.ndim == 0:
                return out
            if "r" not in probe:
                probe["r"] = Rng(seed + len(cases) + 1).normal(out.shape, 1.0, F64)
            return _weighted(out, probe["r"])

        cases.append((name, loss, leaves))

    a = _leaf(rng, (3, 4), "a")
    b = _leaf(rng, (3, 4), "b")
    row = _leaf(rng, (4,), "row")
    add_case("add", lambda: ops.add(a, row), [a, row])
    add_case("sub", lambda: ops.sub(a, b), [a, b])
    add_case("mul", lambda: ops.mul(a, b), [a, b])
    add_case("mul_scalar", lambda: ops.mul(a, 0.37), [a])
    add_case("neg", lambda: ops.neg(a), [a])
    add_case("exp", lambda: ops.exp(a), [a])
    pos = Tensor(np.abs(rng.normal((3, 4), 1.0, F64)) + 0.5, requires_grad=True, name="pos")
    add_case("log", lambda: ops.log(pos), [pos])
    add_case("tanh", lambda: ops.tanh(a), [a])
    away = Tensor(np.sign(rng.normal((3, 4), 1.0, F64)) * (0.2 + np.abs(rng.normal((3, 4), 1.0, F64))),
                  requires_grad=True, name="away")
    add_case("relu", lambda: ops.relu(away), [away])
    add_case("gelu", lambda: ops.gelu(a), [a])
    keep = rng.uniform((3, 4)) > 0.3
    add_case("dropout", lambda: ops.dropout(a, keep, 0.3), [a])
    add_case("sum_axis", lambda: ops.sum(a, axis=0), [a])
    add_case("mean", lambda: ops.mean(a, axis=-1, keepdims=True), [a])
    add_case("reshape", lambda: ops.reshape(a, (2, 6)), [a])
    t3 = _leaf(rng, (2, 3, 4), "t3")
    add_case("transpose", lambda: ops.transpose(t3, (2, 0, 1)), [t3])
    add_case("swap_last", lambda: ops.swap_last(t3), [t3])
    add_case("getitem", lambda: ops.getitem(a, (np.array([0, 2, 2]), slice(1, 3))), [a])
    table = _leaf(rng, (6, 3), "table")
    ids = np.array([[1, 4, 4], [0, 5, 2]])
    add_case("embedding", lambda: ops.embedding(table, ids), [table])
    add_case("concat", lambda: ops.concat([a, b], axis=1), [a, b])
    m1, m2 = _leaf(rng, (2, 3, 4), "m1"), _leaf(rng, (2, 4, 5), "m2")
    add_case("matmul", lambda: ops.matmul(m1, m2), [m1, m2])
    w, bias = _leaf(rng, (4, 5), "w"), _leaf(rng, (5,), "bias")
    add_case("linear", lambda: ops.linear(t3, w, bias), [t3, w, bias])
    smask = np.array([[True, True, False, True], [True, False, False, False], [True] * 4])
    add_case("softmax_tempered", lambda: ops.softmax(a, 2.5), [a])
    add_case("softmax_masked", lambda: ops.softmax(a, 1.0, mask=smask), [a])
    add_case("softmax_rows", lambda: ops.softmax_rows(a, 0.7), [a])
    add_case("log_softmax", lambda: ops.log_softmax(a, 1.5), [a])
    g, beta = _leaf(rng, (4,), "gain", 1.0, 0.3), _leaf(rng, (4,), "beta")
    add_case("layer_norm", lambda: ops.layer_norm(t3, g, beta), [t3, g, beta])
    tgt = Tensor(ops.softmax(Tensor(rng.normal((3, 4), 1.0, F64))).data, requires_grad=True, name="target")
    prob = Tensor(ops.softmax(Tensor(rng.normal((3, 4), 1.0, F64))).data, requires_grad=True, name="pred")
    add_case("cross_entropy", lambda: ops.cross_entropy(tgt, prob), [tgt, prob])
    add_case("softmax_cross_entropy", lambda: ops.softmax_cross_entropy(tgt, a, 2.0), [tgt, a])
    add_case("mse", lambda: ops.mse(a, b), [a, b])
    hmask = np.array([[True, True, False], [True, False, False]])
    t3b = _leaf(rng, (2, 3, 4), "t3b")
    add_case("masked_mse", lambda: ops.masked_mse(t3, t3b, hmask), [t3, t3b])

    d, heads = 4, 2
    x = _leaf(rng, (2, 3, d), "x")
    attn = [_leaf(rng, s, n, scale=0.5) for n, s in
            (("wq", (d, d)), ("bq", (d,)), ("wk", (d, d)), ("bk", (d,)),
             ("wv", (d, d)), ("bv", (d,)), ("wo", (d, d)), ("bo", (d,)))]
    add_case("self_attention", lambda: ops.self_attention(x, *attn, hmask, heads), [x] + attn)
    ffn = [_leaf(rng, s, n, scale=0.5) for n, s in (("w1", (d, 6)), ("b1", (6,)), ("w2", (6, d)), ("b2", (d,)))]
    add_case("feed_forward_gelu", lambda: ops.feed_forward(x, *ffn, "gelu"), [x] + ffn)
    add_case("feed_forward_relu", lambda: ops.feed_forward(x, *ffn, "relu"), [x] + ffn)

    pooler = AttentivePooler.init(d, 3, rng, F64)
    head = ClassifierHead.init(d, 3, rng, F64)
    for p in pooler.parameters() + head.parameters():
        p.data = rng.normal(p.shape, 0.5, F64)
    add_case("attentive_pool", lambda: attentive_pool(x, hmask, pooler), [x] + pooler.parameters())
    pooled = _leaf(rng, (2, d), "pooled")
    add_case("classify", lambda: classify(pooled, head, 1.5)[1], [pooled] + head.parameters())
    return cases


def toy_objective(seed: int = 0, temperature: float = 2.0, weighting: str = "loss-weighted"):
    """The summed hidden + distillation + task loss on a 2-teacher, d=8, K=2, T=2 model.

    Returns ``(loss builder, named leaf tensors)`` in float64.
    """
    rng = Rng(seed)
    tcfg = EncoderConfig(vocab_size=20, max_seq_len=8, hidden_dim=8, num_heads=2, ffn_dim=16,
                         num_layers=4, dropout=0.0)
    spec = DistillSpec(num_teachers=2, student_layers=2, layer_ratio=2, temperature=temperature,
                       weighting=weighting, projection_init="gaussian")
    bundle = TeacherBundle.init(tcfg, 2, 3, [rng, rng], query_dim=4, shared=True, dtype=F64)
    ids = np.array([[1, 5, 7, 9, 2, 0], [1, 3, 3, 0, 0, 0], [1, 11, 4, 6, 8, 2]])
    mask = ids != 0
    gold = np.eye(3)[[0, 2, 1]]
    outs = teacher_outputs(bundle, ids, mask, list(range(5)))
    enc = init_student(bundle.encoders[0], 2)
    student = Classifier(enc, AttentivePooler.init(8, 4, rng, F64), ClassifierHead.init(8, 3, rng, F64))
    proj = ProjectionSet.init(2, 2, 8, 8, "gaussian", rng, F64)
    for p in proj.parameters():
        p.data = np.eye(8) + rng.normal((8, 8), 0.1, F64)
    named = {**student.named_tensors(), **proj.named_tensors()}
    # Move away from the 0.02-std init, where query/key gradients are ~1e-8 and
    # finite-difference round-off dominates any relative comparison.
    for k, t in named.items():
        t.name = k
        if k.startswith("proj."):
            continue
        base = 1.0 if k.split(".")[-1].endswith("_g") else 0.0
        t.data = base + rng.normal(t.shape, 0.1 if base else 0.4, F64)

    def loss():
        return distill_losses(student, proj, outs, ids, mask, gold, spec)["total"]

    return loss, named


def run_gradsuite(h: float = 1e-4, seed: int = 0, include_objective: bool = True,
                  log: Optional[Callable[[str], None]] = None) -> list[GradResult]:
    results = []
    for name, loss, leaves in op_cases(seed):
        t0 = time.perf_counter()
        errs = check_gradients(loss, leaves, h)
        results.append(GradResult(name, max(errs.values()), sum(p.size for p in leaves),
                                  time.perf_counter() - t0))
        if log:
            log(f"{name:24s} {results[-1].max_rel_error:.2e}")
    if include_objective:
        loss, named = toy_objective(seed)
        t0 = time.perf_counter()
        err, per_tensor = objective_error(loss, list(named.values()), h)
        worst = max(per_tensor, key=per_tensor.get)
        results.append(GradResult("full_objective", err, sum(p.size for p in named.values()),
                                  time.perf_counter() - t0))
        if log:
            log(f"{'full_objective':24s} {err:.2e} (per-tensor worst {worst} {per_tensor[worst]:.1e})")
    return results


def objective_error(loss_fn: Callable[[], Tensor], params: list, h: float = 1e-4) -> tuple[float, dict]:
    """Relative error of the whole gradient vector, plus per-tensor errors.

    Whole-vector comparison is the criterion: some tensors (attention key
    biases) have an exactly zero true gradient, and per-tensor ratios for
    them measure only finite-difference noise.
    """
    for p in params:
        p.requires_grad = True
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    analytic, numeric, per = [], [], {}
    for i, p in enumerate(params):
        a = p.grad if p.grad is not None else np.zeros_like(p.data)
        n = finite_diff_grad(lambda _x: loss_fn().item(), p, h)
        analytic.append(a.ravel())
        numeric.append(n.ravel())
        per[p.name or str(i)] = relative_error(a, n)
    return relative_error(np.concatenate(analytic), np.concatenate(numeric)), per
