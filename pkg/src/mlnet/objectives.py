"""Training losses: baseline OVA objectives, mixup terms, consistency, and their sum.

The scalar loss functions take probability rows (or batches of rows) and
return batch means. The composite :func:`loss_total` also returns exact
gradients for every network parameter.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Optional

import numpy as np

from .errors import DomainError, ShapeError
from .memory import MemoryBank, NeighborSet, loss_nil
from .model import Network, sigmoid, softmax

CLAMP = 1e-12
MIXUP_MODES = ("cross", "source", "off")


@dataclass
class LossWeights:
    gamma: float = 0.1  # open-set entropy
    beta1: float = 0.5  # neighborhood invariance
    beta2: float = 0.1  # manifold mixup
    eta: float = 0.16  # consistency constraint
    alpha: float = 2.0  # Beta(alpha, alpha) shape

    def __post_init__(self):
        for name in ("gamma", "beta1", "beta2", "eta", "alpha"):
            if getattr(self, name) < 0:
                raise DomainError(f"{name} must be non-negative")


def _clog(x):
    return np.log(np.maximum(x, CLAMP))


def _neglog_slope(x):
    """d/dx of -log(max(x, CLAMP)); zero where the clamp is active."""
    return np.where(x > CLAMP, -1.0 / np.maximum(x, CLAMP), 0.0)


def _rows(a, name):
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[None, :]
    if a.ndim != 2:
        raise ShapeError(f"{name} must be a row or a batch of rows")
    return a


def _labels(labels, n, k):
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    if labels.shape != (n,):
        raise ShapeError(f"{labels.size} labels for {n} rows")
    if np.any(labels < 0) or np.any(labels >= k):
        raise DomainError(f"label outside [0, {k})")
    return labels


# per-sample terms: values (B,) and gradients w.r.t. logit-space inputs

def cls_terms(pc, labels):
    rows = np.arange(pc.shape[0])
    py = pc[rows, labels]
    values = -_clog(py)
    grad = pc.copy()
    grad[rows, labels] -= 1.0
    grad[py <= CLAMP] = 0.0
    return values, grad


def ova_terms(pos, neg, labels):
    """Hard-negative one-vs-all. Gradients are w.r.t. the logit gap u = pos - neg."""
    n, k = pos.shape
    rows = np.arange(n)
    masked = pos.copy()
    masked[rows, labels] = -np.inf
    hard = np.argmax(masked, axis=1)
    values = -_clog(pos[rows, labels]) - _clog(neg[rows, hard])
    grad = np.zeros_like(pos)
    # dp/du = p * q
    grad[rows, labels] = _neglog_slope(pos[rows, labels]) * pos[rows, labels] * neg[rows, labels]
    grad[rows, hard] = -_neglog_slope(neg[rows, hard]) * pos[rows, hard] * neg[rows, hard]
    return values, grad


def oem_terms(pos, neg):
    k = pos.shape[1]
    lp, lq = _clog(pos), _clog(neg)
    values = -(pos * lp + neg * lq).sum(axis=1) / k
    dp = -(lp + (pos > CLAMP) - lq - (neg > CLAMP)) / k
    return values, dp * pos * neg


def cmm_terms(pos, neg, labels):
    rows = np.arange(pos.shape[0])
    values = -_clog(neg[rows, labels])
    grad = np.zeros_like(pos)
    grad[rows, labels] = -_neglog_slope(neg[rows, labels]) * pos[rows, labels] * neg[rows, labels]
    return values, grad


def cc_terms(pc, pos, neg, stop_grad=True):
    """Returns values, gradient w.r.t. open gaps, gradient w.r.t. closed logits."""
    k = pc.shape[1]
    values = -(pc * pos).sum(axis=1) / k
    grad_u = -(pc / k) * pos * neg
    if stop_grad:
        grad_a = np.zeros_like(pc)
    else:
        g = -pos / k
        grad_a = pc * (g - (pc * g).sum(axis=1, keepdims=True))
    return values, grad_u, grad_a


# scalar losses on probability rows

def loss_cls(closed_probs_row, label) -> float:
    pc = _rows(closed_probs_row, "closed_probs")
    labels = _labels(label, pc.shape[0], pc.shape[1])
    return float(cls_terms(pc, labels)[0].mean())


def loss_ova(open_pos_row, label) -> float:
    pos = _rows(open_pos_row, "open_pos")
    if pos.shape[1] < 2:
        raise DomainError("one-vs-all loss needs K >= 2")
    labels = _labels(label, pos.shape[0], pos.shape[1])
    return float(ova_terms(pos, 1.0 - pos, labels)[0].mean())


def loss_oem(open_pos_row) -> float:
    pos = _rows(open_pos_row, "open_pos")
    return float(oem_terms(pos, 1.0 - pos)[0].mean())


def loss_cc(closed_probs_row, open_pos_row) -> float:
    pc, pos = _rows(closed_probs_row, "closed_probs"), _rows(open_pos_row, "open_pos")
    if pc.shape != pos.shape:
        raise ShapeError("closed and open rows differ in shape")
    return float(cc_terms(pc, pos, 1.0 - pos)[0].mean())


def cc_open_score_grad(closed_probs_row, open_pos_row) -> np.ndarray:
    """d loss_cc / d open positive score, per class: -p_c(l) / K."""
    pc = np.asarray(closed_probs_row, dtype=np.float64)
    return -pc / pc.shape[-1]


def loss_base(net: Network, source_x, source_y, target_x, gamma: float = 0.1) -> float:
    """Source CE + hard-negative OVA, plus gamma times target open-set entropy."""
    zs = net.extractor_forward(source_x)[-1]
    zt = net.extractor_forward(target_x)[-1]
    k = net.num_classes
    labels = _labels(source_y, zs.shape[0], k)
    pc = softmax(net.closed_logits(zs), axis=1)
    us = _gap(net, zs)
    ut = _gap(net, zt)
    src = cls_terms(pc, labels)[0] + ova_terms(sigmoid(us), sigmoid(-us), labels)[0]
    tgt = oem_terms(sigmoid(ut), sigmoid(-ut))[0]
    return float(src.mean() + gamma * tgt.mean())


def _gap(net, z):
    o = net.open_logits(z)
    return o[..., 0] - o[..., 1]


def sample_mix_coeff(rng: np.random.Generator, alpha: float, size=None):
    """Beta(alpha, alpha) draw built from two Gamma(alpha) draws."""
    if alpha <= 0:
        raise DomainError("alpha must be positive")
    g1 = rng.gamma(alpha, size=size)
    g2 = rng.gamma(alpha, size=size)
    return g1 / (g1 + g2)


def mix_features(z_src, z_tgt, lam):
    z_src = np.asarray(z_src, dtype=np.float64)
    z_tgt = np.asarray(z_tgt, dtype=np.float64)
    if z_src.shape != z_tgt.shape:
        raise ShapeError(f"cannot mix {z_src.shape} with {z_tgt.shape}")
    lam = np.asarray(lam, dtype=np.float64)
    if lam.ndim == 1 and z_src.ndim == 2:
        lam = lam[:, None]
    return lam * z_src + (1.0 - lam) * z_tgt


def loss_cmm(net: Network, z_mix, source_label) -> float:
    """-log(1 - p_o(y | z_mix)) averaged over the mixed rows."""
    z_mix = _rows(z_mix, "z_mix")
    labels = _labels(source_label, z_mix.shape[0], net.num_classes)
    u = _gap(net, z_mix)
    return float(cmm_terms(sigmoid(u), sigmoid(-u), labels)[0].mean())


def loss_smm(net: Network, z_mix, label_a, label_b) -> float:
    """Within-source mixup penalty on both labels; pairs sharing a label are skipped."""
    z_mix = _rows(z_mix, "z_mix")
    n, k = z_mix.shape[0], net.num_classes
    la, lb = _labels(label_a, n, k), _labels(label_b, n, k)
    keep = la != lb
    if not keep.any():
        return 0.0
    u = _gap(net, z_mix[keep])
    pos, neg = sigmoid(u), sigmoid(-u)
    values = cmm_terms(pos, neg, la[keep])[0] + cmm_terms(pos, neg, lb[keep])[0]
    return float(values.mean())


# composite objective

@dataclass
class LossBreakdown:
    cls: float = 0.0
    ova: float = 0.0
    oem: float = 0.0
    nil: float = 0.0
    cmm: float = 0.0
    cc: float = 0.0
    total: float = 0.0


@dataclass
class ObjectiveContext:
    """Per-iteration inputs of :func:`loss_total` that are not network parameters.

    ``coefficients`` maps term names (cls, ova, oem, nil, cmm, smm, cc) to the
    multiplier applied in the total; a zero skips the term entirely.
    """
    coefficients: Dict[str, float]
    lambdas: Optional[np.ndarray] = None
    smm_partner: Optional[np.ndarray] = None
    bank: Optional[MemoryBank] = None
    neighbors: Dict[int, NeighborSet] = field(default_factory=dict)
    cc_stop_grad: bool = True
    cmm_heads_only: bool = False
    # fixed closed-set coefficients for the consistency term (target rows);
    # lets a finite-difference check see the stop-gradient objective
    cc_coefficients: Optional[np.ndarray] = None


def term_coefficients(weights: LossWeights, epoch: int, mixup: str = "cross") -> Dict[str, float]:
    """Multipliers of each loss term for a given epoch; NIL stays off in epoch 1."""
    if mixup not in MIXUP_MODES:
        raise DomainError(f"unknown mixup mode {mixup!r}")
    return {
        "cls": 1.0,
        "ova": 1.0,
        "oem": weights.gamma,
        "nil": weights.beta1 if epoch >= 2 else 0.0,
        "cmm": weights.beta2 if mixup == "cross" else 0.0,
        "smm": weights.beta2 if mixup == "source" else 0.0,
        "cc": weights.eta,
    }


def loss_total(net: Network, source_x, source_y, target_x, target_idx, ctx: ObjectiveContext,
               with_grad: bool = True):
    """Weighted training objective for one paired batch.

    Returns ``(breakdown, grads)``; ``grads`` is ``None`` when ``with_grad`` is
    false. Source row i is paired with target row i for mixup.
    """
    c = ctx.coefficients
    source_x = np.asarray(source_x, dtype=np.float64)
    target_x = np.asarray(target_x, dtype=np.float64)
    bs, bt = source_x.shape[0], target_x.shape[0]
    if bs == 0 or bt == 0:
        raise DomainError("empty batch")
    k = net.num_classes
    labels = _labels(source_y, bs, k)

    acts = net.extractor_forward(np.vstack([source_x, target_x]))
    z = acts[-1]
    zs, zt = z[:bs], z[bs:]
    a = net.closed_logits(z)
    pc = softmax(a, axis=1)
    u = _gap(net, z)
    pos, neg = sigmoid(u), sigmoid(-u)

    out = LossBreakdown()
    d_a = np.zeros_like(a)
    d_u = np.zeros_like(u)
    d_z = np.zeros_like(z)
    mix_rows = []  # (z_mix, d_u on mixed rows, left index, right index, lambdas)

    if c.get("cls", 0):
        v, g = cls_terms(pc[:bs], labels)
        out.cls = float(v.mean())
        d_a[:bs] += c["cls"] * g / bs
    if c.get("ova", 0):
        v, g = ova_terms(pos[:bs], neg[:bs], labels)
        out.ova = float(v.mean())
        d_u[:bs] += c["ova"] * g / bs
    if c.get("oem", 0):
        v, g = oem_terms(pos[bs:], neg[bs:])
        out.oem = float(v.mean())
        d_u[bs:] += c["oem"] * g / bt
    if c.get("cc", 0):
        coef = pc[bs:] if ctx.cc_coefficients is None else np.asarray(ctx.cc_coefficients, dtype=np.float64)
        v, gu, ga = cc_terms(coef, pos[bs:], neg[bs:], ctx.cc_stop_grad or ctx.cc_coefficients is not None)
        out.cc = float(v.mean())
        d_u[bs:] += c["cc"] * gu / bt
        d_a[bs:] += c["cc"] * ga / bt
    if c.get("nil", 0):
        if ctx.bank is None:
            raise DomainError("neighborhood loss needs a memory bank")
        idx = np.asarray(target_idx, dtype=np.int64)
        total = 0.0
        for row, j in enumerate(idx):
            v, g = loss_nil(ctx.bank, int(j), zt[row], ctx.neighbors.get(int(j)))
            total += v
            d_z[bs + row] += c["nil"] * g / bt
        out.nil = total / bt
    if c.get("cmm", 0):
        n = min(bs, bt)
        lam = np.asarray(ctx.lambdas, dtype=np.float64)[:n]
        zm = mix_features(zs[:n], zt[:n], lam)
        um = _gap(net, zm)
        v, g = cmm_terms(sigmoid(um), sigmoid(-um), labels[:n])
        out.cmm = float(v.mean())
        mix_rows.append((zm, c["cmm"] * g / n, np.arange(n), bs + np.arange(n), lam))
    if c.get("smm", 0):
        partner = np.asarray(ctx.smm_partner, dtype=np.int64)
        lam = np.asarray(ctx.lambdas, dtype=np.float64)[:bs]
        keep = labels != labels[partner]
        if keep.any():
            left, right, lam = np.flatnonzero(keep), partner[keep], lam[keep]
            zm = mix_features(zs[left], zs[right], lam)
            um = _gap(net, zm)
            pm, qm = sigmoid(um), sigmoid(-um)
            va, ga = cmm_terms(pm, qm, labels[left])
            vb, gb = cmm_terms(pm, qm, labels[right])
            out.cmm = float((va + vb).mean())
            mix_rows.append((zm, c["smm"] * (ga + gb) / left.size, left, right, lam))

    out.total = (c.get("cls", 0) * out.cls + c.get("ova", 0) * out.ova + c.get("oem", 0) * out.oem
                 + c.get("nil", 0) * out.nil + c.get("cmm", 0) * out.cmm + c.get("smm", 0) * out.cmm
                 + c.get("cc", 0) * out.cc)
    if not with_grad:
        return out, None

    w_c, w_o = net.params["closed.weight"], net.params["open.weight"]
    grads = {
        "closed.weight": d_a.T @ z,
        "closed.bias": d_a.sum(axis=0),
    }
    d_o = np.stack([d_u, -d_u], axis=-1)
    grads["open.weight"] = np.einsum("bkc,bd->kcd", d_o, z)
    grads["open.bias"] = d_o.sum(axis=0)
    d_z += d_a @ w_c + np.einsum("bkc,kcd->bd", d_o, w_o)

    for zm, gm, left, right, lam in mix_rows:
        d_om = np.stack([gm, -gm], axis=-1)
        grads["open.weight"] += np.einsum("bkc,bd->kcd", d_om, zm)
        grads["open.bias"] += d_om.sum(axis=0)
        if not ctx.cmm_heads_only:
            d_zm = np.einsum("bkc,kcd->bd", d_om, w_o)
            np.add.at(d_z, left, lam[:, None] * d_zm)
            np.add.at(d_z, right, (1.0 - lam)[:, None] * d_zm)

    grads.update(net.extractor_backward(acts, d_z))
    return out, grads
