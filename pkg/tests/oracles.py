"""Independent reference implementations used by the unit and acceptance tests.

Each oracle is written from the definition (pairwise counts, explicit loops,
closed-form formulas) and shares no code with the package.
"""

import math
from decimal import Decimal, localcontext
from fractions import Fraction


def auc_pairwise(labels, scores) -> float:
    pos = [s for y, s in zip(labels, scores) if y == 1]
    neg = [s for y, s in zip(labels, scores) if y == 0]
    credit = 0.0
    for p in pos:
        for n in neg:
            credit += 1.0 if p > n else 0.5 if p == n else 0.0
    return credit / (len(pos) * len(neg))


def youden_scan(labels, scores):
    """Exhaustive scan: (best threshold, best J as a Fraction).

    Candidates are the midpoints between adjacent distinct scores plus one
    point strictly below and one strictly above all scores.
    """
    distinct = sorted(set(float(s) for s in scores))
    below = math.nextafter(distinct[0], -math.inf)
    above = math.nextafter(distinct[-1], math.inf)
    candidates = [below] + [(a + b) / 2 for a, b in zip(distinct, distinct[1:])] + [above]
    n_pos = sum(1 for y in labels if y == 1)
    n_neg = len(labels) - n_pos
    best_t, best_j = None, None
    for t in sorted(candidates):
        tp = sum(1 for y, s in zip(labels, scores) if y == 1 and s >= t)
        tn = sum(1 for y, s in zip(labels, scores) if y == 0 and s < t)
        j = Fraction(tp, n_pos) + Fraction(tn, n_neg) - 1
        if best_j is None or j > best_j:
            best_t, best_j = t, j
    return best_t, best_j


def youden_j(labels, scores, t) -> Fraction:
    n_pos = sum(1 for y in labels if y == 1)
    n_neg = len(labels) - n_pos
    tp = sum(1 for y, s in zip(labels, scores) if y == 1 and s >= t)
    tn = sum(1 for y, s in zip(labels, scores) if y == 0 and s < t)
    return Fraction(tp, n_pos) + Fraction(tn, n_neg) - 1


def bce_scalar(z: float, y: float) -> float:
    """-[y log sigmoid(z) + (1 - y) log(1 - sigmoid(z))] from the textbook formula.

    Evaluated with 50 significant digits: in float64, 1 - sigmoid(30) cancels
    catastrophically and the formula itself would be off by ~1e-3.
    """
    with localcontext() as ctx:
        ctx.prec = 50
        z, y = Decimal(z), Decimal(y)
        p = 1 / (1 + (-z).exp())
        return float(-(y * p.ln() + (1 - y) * (1 - p).ln()))


def multitask_loss_reference(age_pred, sex_logit, dx_logit, age_true, sex_true, dx_true):
    l_age = sum(abs(a - p) for a, p in zip(age_true, age_pred))
    l_sex = sum(bce_scalar(z, y) for z, y in zip(sex_logit, sex_true))
    l_dx = sum(bce_scalar(z, y) for z, y in zip(dx_logit, dx_true))
    return l_age, l_sex, l_dx, l_age + l_sex + l_dx


def occlusion_positions_reference(n: int, patch: int, stride: int):
    """Start indices: every stride step that fits, plus one flush with the end if needed."""
    starts = []
    s = 0
    while s + patch <= n:
        starts.append(s)
        s += stride
    if not starts or starts[-1] + patch < n:
        starts.append(n - patch)
    return starts


def finite_difference_check(model, loss_of_model, n_params: int, rng, eps: float = 1e-6):
    """Compare autograd with central differences on ``n_params`` sampled scalars.

    ``model`` must already be in float64. Returns the largest relative error,
    measured as |g_auto - g_fd| / max(|g_auto|, |g_fd|, 1e-8).
    """
    import torch

    params = [p for p in model.parameters() if p.requires_grad]
    model.zero_grad()
    loss_of_model().backward()
    sizes = [p.numel() for p in params]
    worst = 0.0
    for _ in range(n_params):
        which = int(rng.choice(len(params), p=[s / sum(sizes) for s in sizes]))
        p = params[which]
        flat = int(rng.integers(p.numel()))
        idx = tuple(int(i) for i in torch.unravel_index(torch.tensor(flat), p.shape))
        auto = 0.0 if p.grad is None else float(p.grad[idx])
        with torch.no_grad():
            orig = p[idx].item()
            p[idx] = orig + eps
            up = float(loss_of_model())
            p[idx] = orig - eps
            down = float(loss_of_model())
            p[idx] = orig
        fd = (up - down) / (2 * eps)
        worst = max(worst, abs(auto - fd) / max(abs(auto), abs(fd), 1e-8))
    return worst
