"""Adversarial attacks against a :class:`~signattack.model.Model`.

Linf attacks (FGSM, BIM, PGD, UAP), L2 attacks (L-BFGS, Carlini-Wagner) and
the L0 one-pixel attack. Every attack returns :class:`AttackResult` records
whose success rule is shared:

* untargeted: the label changed, or the model no longer recognizes anything
  (top probability below the reject threshold);
* targeted: the label equals the target and is recognized.

Images are (H, W, 3) float arrays in [0, 1]; the ``*_batch`` variants take
(N, H, W, 3) stacks and return one result per image.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .model import (
    DEFAULT_REJECT_THRESHOLD,
    Model,
    Prediction,
    prediction_from_probs,
)

KINDS = ("LBFGS", "FGSM", "CW", "BIM", "PGD", "ONEPIXEL", "UAP")
SWEEP_KINDS = ("FGSM", "BIM", "PGD", "UAP")
NORM_OF = {
    "ONEPIXEL": "L0",
    "CW": "L2",
    "LBFGS": "L2",
    "FGSM": "Linf",
    "BIM": "Linf",
    "PGD": "Linf",
    "UAP": "Linf",
}
DEFAULT_FGSM_GRID = (2 / 255, 4 / 255, 8 / 255, 16 / 255)
DEFAULT_C_GRID = tuple(np.logspace(-2, 2, 8))
CW_SHRINK = 1e-6


@dataclass
class AttackConfig:
    kind: str
    epsilon: float = 8 / 255
    alpha: float | None = None  # None -> epsilon / 10
    iterations: int = 40
    targeted: bool = False
    target_label: int | None = None
    norm: str | None = None  # None -> the kind's natural norm
    seed: int = 0
    random_start: bool = True
    # Carlini-Wagner
    kappa: float = 0.0
    binary_search_steps: int = 6
    cw_iters: int = 200
    lr: float = 0.01
    # L-BFGS
    c_grid: tuple[float, ...] = DEFAULT_C_GRID
    memory: int = 10
    max_iters: int = 50
    # one-pixel differential evolution
    popsize: int = 60
    de_iters: int = 75
    F: float = 0.5
    CR: float = 0.9

    def __post_init__(self):
        self.kind = self.kind.upper()
        if self.kind not in KINDS:
            raise ValueError(f"unknown attack kind {self.kind!r}; valid kinds: {', '.join(KINDS)}")
        if self.norm is None:
            self.norm = NORM_OF[self.kind]
        if self.norm != NORM_OF[self.kind]:
            raise ValueError(f"{self.kind} uses the {NORM_OF[self.kind]} norm, not {self.norm}")
        if not 0.0 <= self.epsilon <= 1.0:
            raise ValueError(f"epsilon must lie in [0, 1], got {self.epsilon}")
        if self.alpha is None:
            self.alpha = self.epsilon / 10
        if self.alpha < 0 or (self.alpha == 0 and self.epsilon > 0):
            raise ValueError("alpha must be positive")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.targeted and self.target_label is None and self.kind != "LBFGS":
            raise ValueError("targeted attacks need a target_label")
        self.c_grid = tuple(float(c) for c in self.c_grid)


@dataclass
class AttackResult:
    kind: str
    adversarial_image: np.ndarray
    perturbation: np.ndarray
    before: Prediction
    after: Prediction
    success: bool
    l0: int
    l2: float
    linf: float
    iterations_used: int
    epsilon: float | None = None
    target_label: int | None = None
    extra: dict = field(default_factory=dict)


@dataclass
class UniversalPerturbation:
    delta: np.ndarray
    epsilon: float
    fooling_rate: float


def perturbation_norms(perturbation: np.ndarray) -> tuple[int, float, float]:
    """(L0 over spatial positions, L2, Linf)."""
    p = np.asarray(perturbation, dtype=np.float64)
    l0 = int(np.count_nonzero(np.any(p != 0, axis=-1)))
    return l0, float(np.sqrt(np.sum(p * p))), float(np.max(np.abs(p))) if p.size else 0.0


def is_success(before: Prediction, after: Prediction, targeted: bool = False,
               target_label: int | None = None) -> bool:
    if targeted:
        return after.label == target_label and after.recognized
    return after.label != before.label or not after.recognized


def _predictions(model: Model, images: np.ndarray, reject: float) -> list[Prediction]:
    return [prediction_from_probs(p, reject) for p in model.probabilities(images)]


def _result(model: Model, kind: str, image: np.ndarray, adv: np.ndarray, before: Prediction,
            reject: float, iterations: int, targeted: bool = False,
            target_label: int | None = None, epsilon: float | None = None,
            after: Prediction | None = None, **extra) -> AttackResult:
    perturbation = adv - image
    adversarial = np.clip(image + perturbation, 0.0, 1.0)
    if after is None or not np.array_equal(adversarial, adv):
        after = prediction_from_probs(model.probabilities(adversarial), reject)
    l0, l2, linf = perturbation_norms(perturbation)
    return AttackResult(
        kind, adversarial, perturbation, before, after,
        is_success(before, after, targeted, target_label),
        l0, l2, linf, iterations, epsilon, target_label, extra,
    )


def _check_image(model: Model, image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3:
        raise ValueError(f"expected one (H, W, C) image, got shape {image.shape}")
    model.check_images(image[None])
    if image.min() < 0 or image.max() > 1:
        raise ValueError("image values must lie in [0, 1]")
    return image


def _check_batch(model: Model, images: np.ndarray, labels) -> tuple[np.ndarray, np.ndarray]:
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if images.ndim != 4 or len(images) != len(labels):
        raise ValueError("need (N, H, W, C) images with N labels")
    model.check_images(images)
    return images, labels


def _check_epsilon(epsilon: float) -> None:
    if epsilon < 0:
        raise ValueError(f"epsilon must be non-negative, got {epsilon}")


# ---------------------------------------------------------------------------
# Linf gradient-sign attacks


def fgsm_step(image: np.ndarray, gradient: np.ndarray, epsilon: float) -> np.ndarray:
    """clip(image + epsilon * sign(gradient), 0, 1)."""
    return np.clip(image + epsilon * np.sign(gradient), 0.0, 1.0)


def project_linf(candidate: np.ndarray, original: np.ndarray, epsilon: float) -> np.ndarray:
    """Clamp into the epsilon-ball around ``original``, then into the [0, 1] box."""
    return np.clip(np.clip(candidate, original - epsilon, original + epsilon), 0.0, 1.0)


def _ascent_gradient(model: Model, x: np.ndarray, labels: np.ndarray, targeted: bool,
                     target: np.ndarray | None) -> np.ndarray:
    """Direction that increases the attack objective (CE on the true label, or
    negative CE on the target)."""
    if targeted:
        g, _ = model.loss_gradient(x, target)
        return -g
    g, _ = model.loss_gradient(x, labels)
    return g


def _targets(targeted: bool, target_label, n: int) -> np.ndarray | None:
    if not targeted:
        return None
    if target_label is None:
        raise ValueError("targeted attacks need a target_label")
    return np.broadcast_to(np.asarray(target_label, dtype=np.int64), (n,)).copy()


def fgsm_batch(model: Model, images: np.ndarray, labels, epsilon: float,
               targeted: bool = False, target_label=None,
               reject_threshold: float = DEFAULT_REJECT_THRESHOLD) -> list[AttackResult]:
    _check_epsilon(epsilon)
    images, labels = _check_batch(model, images, labels)
    target = _targets(targeted, target_label, len(labels))
    befores = _predictions(model, images, reject_threshold)
    adv = fgsm_step(images, _ascent_gradient(model, images, labels, targeted, target), epsilon)
    afters = _predictions(model, np.clip(images + (adv - images), 0.0, 1.0), reject_threshold)
    return [
        _result(model, "FGSM", images[i], adv[i], befores[i], reject_threshold, 1, targeted,
                None if target is None else int(target[i]), epsilon, afters[i])
        for i in range(len(images))
    ]


def fgsm(model: Model, image: np.ndarray, true_label: int, epsilon: float,
         targeted: bool = False, target_label: int | None = None,
         reject_threshold: float = DEFAULT_REJECT_THRESHOLD) -> AttackResult:
    """Fast gradient sign method: one step of size epsilon along sign(grad)."""
    image = _check_image(model, image)
    return fgsm_batch(model, image[None], [true_label], epsilon, targeted,
                      target_label, reject_threshold)[0]


def _iterative_linf(kind: str, model: Model, images: np.ndarray, labels, epsilon: float,
                    alpha: float, iterations: int, start: np.ndarray, targeted: bool,
                    target_label, reject: float) -> list[AttackResult]:
    _check_epsilon(epsilon)
    if iterations < 1:
        raise ValueError("iterations must be >= 1")
    images, labels = _check_batch(model, images, labels)
    n = len(images)
    target = _targets(targeted, target_label, n)
    befores = _predictions(model, images, reject)
    x = start.copy()
    used = np.zeros(n, dtype=int)
    active = np.ones(n, dtype=bool)
    afters: list[Prediction | None] = [None] * n
    for _ in range(iterations):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        g = _ascent_gradient(model, x[idx], labels[idx], targeted,
                             None if target is None else target[idx])
        x[idx] = project_linf(x[idx] + alpha * np.sign(g), images[idx], epsilon)
        used[idx] += 1
        for j, pred in zip(idx, _predictions(model, x[idx], reject)):
            afters[j] = pred
            t = None if target is None else int(target[j])
            if is_success(befores[j], pred, targeted, t):
                active[j] = False
    return [
        _result(model, kind, images[i], x[i], befores[i], reject, int(used[i]), targeted,
                None if target is None else int(target[i]), epsilon, afters[i])
        for i in range(n)
    ]


def bim_batch(model: Model, images: np.ndarray, labels, epsilon: float,
              alpha: float | None = None, iterations: int = 40, targeted: bool = False,
              target_label=None,
              reject_threshold: float = DEFAULT_REJECT_THRESHOLD) -> list[AttackResult]:
    alpha = epsilon / 10 if alpha is None else alpha
    images = np.asarray(images, dtype=np.float64)
    return _iterative_linf("BIM", model, images, labels, epsilon, alpha, iterations,
                           images, targeted, target_label, reject_threshold)


def bim(model: Model, image: np.ndarray, true_label: int, epsilon: float,
        alpha: float | None = None, iterations: int = 40, targeted: bool = False,
        target_label: int | None = None,
        reject_threshold: float = DEFAULT_REJECT_THRESHOLD) -> AttackResult:
    """Basic iterative method: repeated FGSM steps of size alpha, kept inside
    the epsilon-ball; stops early once the attack succeeds."""
    image = _check_image(model, image)
    return bim_batch(model, image[None], [true_label], epsilon, alpha, iterations,
                     targeted, target_label, reject_threshold)[0]


def pgd_batch(model: Model, images: np.ndarray, labels, epsilon: float,
              alpha: float | None = None, iterations: int = 40, random_start: bool = True,
              seed: int = 0, targeted: bool = False, target_label=None,
              reject_threshold: float = DEFAULT_REJECT_THRESHOLD) -> list[AttackResult]:
    alpha = epsilon / 10 if alpha is None else alpha
    images = np.asarray(images, dtype=np.float64)
    start = images
    if random_start and epsilon > 0:
        rng = np.random.default_rng(seed)
        start = np.clip(images + rng.uniform(-epsilon, epsilon, size=images.shape), 0.0, 1.0)
    return _iterative_linf("PGD", model, images, labels, epsilon, alpha, iterations,
                           start, targeted, target_label, reject_threshold)


def pgd(model: Model, image: np.ndarray, true_label: int, epsilon: float,
        alpha: float | None = None, iterations: int = 40, random_start: bool = True,
        seed: int = 0, targeted: bool = False, target_label: int | None = None,
        reject_threshold: float = DEFAULT_REJECT_THRESHOLD) -> AttackResult:
    """Projected gradient descent in the Linf ball, optionally from a uniform
    random start inside the ball."""
    image = _check_image(model, image)
    return pgd_batch(model, image[None], [true_label], epsilon, alpha, iterations,
                     random_start, seed, targeted, target_label, reject_threshold)[0]


# ---------------------------------------------------------------------------
# L-BFGS


@dataclass
class LBFGSResult:
    x: np.ndarray
    fun: float
    grad: np.ndarray
    iterations: int
    converged: bool


def two_loop_direction(g: np.ndarray, s_hist: Sequence[np.ndarray],
                       y_hist: Sequence[np.ndarray]) -> np.ndarray:
    """Search direction -H g from the L-BFGS two-loop recursion.

    With an empty history this is plain steepest descent, -g.
    """
    q = g.copy()
    alphas = []
    for s, y in zip(reversed(s_hist), reversed(y_hist)):
        rho = 1.0 / np.dot(y, s)
        a = rho * np.dot(s, q)
        q -= a * y
        alphas.append((rho, a))
    if s_hist:
        s, y = s_hist[-1], y_hist[-1]
        q *= np.dot(s, y) / np.dot(y, y)
    for (s, y), (rho, a) in zip(zip(s_hist, y_hist), reversed(alphas)):
        b = rho * np.dot(y, q)
        q += s * (a - b)
    return -q


def lbfgs_minimize(fun: Callable[[np.ndarray], tuple[float, np.ndarray]], x0: np.ndarray,
                   memory: int = 10, max_iters: int = 100, tol: float = 1e-10,
                   armijo: float = 1e-4,
                   project: Callable[[np.ndarray], np.ndarray] | None = None) -> LBFGSResult:
    """Minimise ``fun`` (returning value and gradient) with L-BFGS.

    Backtracking (halving) line search with the Armijo condition. If
    ``project`` is given, every trial point is projected and the sufficient
    decrease test uses the projected step.
    """
    if memory < 0:
        raise ValueError("memory must be >= 0")
    proj = project if project is not None else (lambda v: v)
    x = proj(np.asarray(x0, dtype=np.float64).copy())
    f, g = fun(x)
    s_hist: list[np.ndarray] = []
    y_hist: list[np.ndarray] = []

    def stationarity(x, g):
        return float(np.max(np.abs(proj(x - g) - x))) if g.size else 0.0

    it = 0
    converged = stationarity(x, g) <= tol
    while not converged and it < max_iters:
        d = two_loop_direction(g, s_hist, y_hist) if memory else -g
        if np.dot(g, d) >= 0:
            s_hist.clear()
            y_hist.clear()
            d = -g
        t = 1.0 if s_hist else min(1.0, 1.0 / max(np.linalg.norm(g), 1e-300))
        accepted = False
        for _ in range(60):
            x_new = proj(x + t * d)
            step = x_new - x
            decrease = np.dot(g, step)
            if not np.any(step):
                break
            f_new, g_new = fun(x_new)
            if np.isfinite(f_new) and f_new <= f + armijo * decrease:
                accepted = True
                break
            t *= 0.5
        it += 1
        if not accepted:
            break
        y = g_new - g
        sy = np.dot(step, y)
        if memory and sy > 1e-12 * np.dot(y, y):
            s_hist.append(step)
            y_hist.append(y)
            if len(s_hist) > memory:
                s_hist.pop(0)
                y_hist.pop(0)
        x, f, g = x_new, f_new, g_new
        converged = stationarity(x, g) <= tol
    return LBFGSResult(x, float(f), g, it, converged)


def lbfgs_attack(model: Model, image: np.ndarray, target_label: int,
                 c_grid: Sequence[float] = DEFAULT_C_GRID, memory: int = 10,
                 max_iters: int = 50,
                 reject_threshold: float = DEFAULT_REJECT_THRESHOLD) -> AttackResult:
    """Targeted box-constrained L-BFGS attack.

    For each c (ascending) minimise ``c * ||r||^2 + CE(image + r, target)``,
    clipping ``image + r`` into [0, 1] after every accepted step. Returns the
    successful candidate with the smallest L2 norm, or, if no c succeeds, the
    attempt that gave the target the highest probability.
    """
    if len(c_grid) == 0:
        raise ValueError("c_grid must not be empty")
    image = _check_image(model, image)
    if not 0 <= target_label < model.num_classes:
        raise ValueError(f"target_label {target_label} out of range")
    before = prediction_from_probs(model.probabilities(image), reject_threshold)
    target = np.array([target_label])
    shape = image.shape
    flat = image.reshape(-1)

    def project(r):
        return np.clip(flat + r, 0.0, 1.0) - flat

    best: AttackResult | None = None
    fallback: AttackResult | None = None
    for c in sorted(float(c) for c in c_grid):
        def objective(r, c=c):
            g, z = model.loss_gradient((flat + r).reshape(shape), target)
            ce = float(ad.softmax_cross_entropy(Tensor(z[None]), target, reduction="sum").data)
            return c * float(np.dot(r, r)) + ce, 2.0 * c * r + g.reshape(-1)

        opt = lbfgs_minimize(objective, np.zeros_like(flat), memory=memory,
                             max_iters=max_iters, project=project)
        adv = np.clip(flat + opt.x, 0.0, 1.0).reshape(shape)
        res = _result(model, "LBFGS", image, adv, before, reject_threshold, opt.iterations,
                      True, int(target_label), None, c=c)
        if res.success and (best is None or res.l2 < best.l2):
            best = res
        if fallback is None or (res.after.probabilities[target_label]
                                > fallback.after.probabilities[target_label]):
            fallback = res
    return best if best is not None else fallback


# ---------------------------------------------------------------------------
# Carlini-Wagner L2


def tanh_to_image(w: np.ndarray) -> np.ndarray:
    return (np.tanh(w) + 1.0) / 2.0


def image_to_tanh(image: np.ndarray, shrink: float = CW_SHRINK) -> np.ndarray:
    """Inverse of :func:`tanh_to_image` after shrinking into [shrink, 1 - shrink]."""
    inner = image * (1.0 - 2.0 * shrink) + shrink
    return np.arctanh(2.0 * inner - 1.0)


def cw_margin(logits: np.ndarray, label: np.ndarray, kappa: float,
              targeted: bool) -> tuple[np.ndarray, np.ndarray]:
    """Margin loss per row and the runner-up class index.

    targeted: max(max_{j != t} Z_j - Z_t, -kappa);
    untargeted: max(Z_t - max_{j != t} Z_j, -kappa), t being the true label.
    """
    n = len(logits)
    rows = np.arange(n)
    own = logits[rows, label]
    others = logits.copy()
    others[rows, label] = -np.inf
    runner = np.argmax(others, axis=1)
    gap = others[rows, runner] - own
    return np.maximum(-gap if not targeted else gap, -kappa), runner


def cw_l2_batch(model: Model, images: np.ndarray, labels, targeted: bool = False,
                target_label=None, kappa: float = 0.0, binary_search_steps: int = 6,
                iters: int = 200, lr: float = 0.01, c_range: tuple[float, float] = (1e-3, 1e2),
                abort_early: bool = True,
                reject_threshold: float = DEFAULT_REJECT_THRESHOLD) -> list[AttackResult]:
    """Carlini-Wagner L2 with Adam on the tanh-reparameterised image.

    The trade-off constant c is bisected geometrically inside ``c_range``
    (starting from the geometric midpoint) once per binary-search step, per
    image.
    """
    images, labels = _check_batch(model, images, labels)
    n = len(images)
    target = _targets(targeted, target_label, n)
    loss_label = target if targeted else labels
    befores = _predictions(model, images, reject_threshold)
    w0 = image_to_tanh(images)
    lo = np.full(n, float(c_range[0]))
    hi = np.full(n, float(c_range[1]))
    c = np.sqrt(lo * hi)
    best_l2 = np.full(n, np.inf)
    best_adv = images.copy()
    best_after: list[Prediction | None] = [None] * n
    total_iters = np.zeros(n, dtype=int)
    b1, b2, eps_adam = 0.9, 0.999, 1e-8
    check_every = max(1, iters // 10)

    for _ in range(binary_search_steps):
        w = w0.copy()
        m = np.zeros_like(w)
        v = np.zeros_like(w)
        found = np.zeros(n, dtype=bool)
        active = np.ones(n, dtype=bool)
        prev = np.full(n, np.inf)
        for step in range(1, iters + 1):
            idx = np.flatnonzero(active)
            if idx.size == 0:
                break
            xw = tanh_to_image(w[idx])
            coeff = np.zeros((idx.size, model.num_classes))
            margins = np.zeros(idx.size)

            def objective(z, idx=idx, coeff=coeff, margins=margins):
                zd = z.data
                if not np.all(np.isfinite(zd)):
                    raise FloatingPointError("non-finite logits in C&W objective")
                f, runner = cw_margin(zd, loss_label[idx], kappa, targeted)
                margins[:] = f
                live = f > -kappa
                rows = np.flatnonzero(live)
                sgn = 1.0 if targeted else -1.0
                coeff[rows, runner[rows]] += sgn * c[idx][rows]
                coeff[rows, loss_label[idx][rows]] -= sgn * c[idx][rows]
                return ad.sum_all(ad.mul(z, Tensor(coeff)))

            g_x, logits, _ = model.input_gradient(xw, objective)
            diff = xw - images[idx]
            l2sq = np.sum(diff * diff, axis=(1, 2, 3))
            loss = l2sq + c[idx] * margins

            # record successful iterates before stepping
            probs = ad.softmax(logits)
            for k, i in enumerate(idx):
                pred = prediction_from_probs(probs[k], reject_threshold)
                t = None if target is None else int(target[i])
                if is_success(befores[i], pred, targeted, t):
                    found[i] = True
                    l2 = math.sqrt(l2sq[k])
                    if l2 < best_l2[i]:
                        best_l2[i] = l2
                        best_adv[i] = xw[k]
                        best_after[i] = pred

            g_x = g_x + 2.0 * diff
            g_w = g_x * (1.0 - np.tanh(w[idx]) ** 2) / 2.0
            m[idx] = b1 * m[idx] + (1 - b1) * g_w
            v[idx] = b2 * v[idx] + (1 - b2) * g_w * g_w
            mhat = m[idx] / (1 - b1 ** step)
            vhat = v[idx] / (1 - b2 ** step)
            w[idx] -= lr * mhat / (np.sqrt(vhat) + eps_adam)
            total_iters[idx] += 1

            if abort_early and step % check_every == 0:
                stalled = loss > prev[idx] * 0.9999
                active[idx[stalled]] = False
                prev[idx] = loss
        hi = np.where(found, np.minimum(hi, c), hi)
        lo = np.where(found, lo, np.maximum(lo, c))
        c = np.sqrt(lo * hi)

    results = []
    for i in range(n):
        t = None if target is None else int(target[i])
        if np.isfinite(best_l2[i]):
            adv, after = best_adv[i], best_after[i]
        else:
            adv, after = images[i], befores[i]
        results.append(_result(model, "CW", images[i], adv, befores[i], reject_threshold,
                               int(total_iters[i]), targeted, t, None, after))
    return results


def cw_l2(model: Model, image: np.ndarray, label: int, targeted: bool = False,
          target_label: int | None = None, kappa: float = 0.0,
          binary_search_steps: int = 6, iters: int = 200, lr: float = 0.01,
          reject_threshold: float = DEFAULT_REJECT_THRESHOLD) -> AttackResult:
    """Carlini-Wagner L2 on one image; ``label`` is the true class (the loss
    uses ``target_label`` instead when ``targeted``)."""
    image = _check_image(model, image)
    return cw_l2_batch(model, image[None], [label], targeted, target_label, kappa,
                       binary_search_steps, iters, lr,
                       reject_threshold=reject_threshold)[0]


# ---------------------------------------------------------------------------
# One-pixel attack


def apply_pixel(image: np.ndarray, candidates: np.ndarray) -> np.ndarray:
    """Images with one pixel overwritten per candidate (row, col, r, g, b)."""
    h, w, _ = image.shape
    candidates = np.atleast_2d(candidates)
    rows = np.clip(np.rint(candidates[:, 0]), 0, h - 1).astype(int)
    cols = np.clip(np.rint(candidates[:, 1]), 0, w - 1).astype(int)
    out = np.repeat(image[None], len(candidates), axis=0)
    out[np.arange(len(candidates)), rows, cols] = np.clip(candidates[:, 2:5], 0.0, 1.0)
    return out


def one_pixel(model: Model, image: np.ndarray, true_label: int, popsize: int = 60,
              de_iters: int = 75, F: float = 0.5, CR: float = 0.9, seed: int = 0,
              targeted: bool = False, target_label: int | None = None,
              reject_threshold: float = DEFAULT_REJECT_THRESHOLD) -> AttackResult:
    """Differential evolution (DE/rand/1/bin) over a single pixel's position
    and colour.

    Untargeted fitness is the true class probability, targeted fitness is
    ``1 - p(target)``; lower is better. The returned pixel is never worse
    than the unmodified image.
    """
    if popsize < 4:
        raise ValueError("popsize must be >= 4 (DE mutation needs 3 distinct partners)")
    image = _check_image(model, image)
    if targeted and target_label is None:
        raise ValueError("targeted attacks need a target_label")
    h, w, _ = image.shape
    rng = np.random.default_rng(seed)
    low = np.zeros(5)
    high = np.array([h - 1, w - 1, 1.0, 1.0, 1.0])

    def evaluate(cands):
        probs = model.probabilities(apply_pixel(image, cands))
        fit = 1.0 - probs[:, target_label] if targeted else probs[:, true_label]
        return fit, probs

    base_probs = model.probabilities(image)
    before = prediction_from_probs(base_probs, reject_threshold)
    base_fit = 1.0 - base_probs[target_label] if targeted else base_probs[true_label]

    pop = low + rng.random((popsize, 5)) * (high - low)
    fit, probs = evaluate(pop)
    generations = 0

    def best_succeeds():
        i = int(np.argmin(fit))
        pred = prediction_from_probs(probs[i], reject_threshold)
        return fit[i] <= base_fit and is_success(before, pred, targeted, target_label)

    for _ in range(de_iters):
        if best_succeeds():
            break
        trials = np.empty_like(pop)
        for i in range(popsize):
            others = rng.choice(popsize - 1, size=3, replace=False)
            a, b, c = others + (others >= i)
            mutant = np.clip(pop[a] + F * (pop[b] - pop[c]), low, high)
            cross = rng.random(5) < CR
            cross[rng.integers(5)] = True
            trials[i] = np.where(cross, mutant, pop[i])
        trial_fit, trial_probs = evaluate(trials)
        better = trial_fit <= fit
        pop[better] = trials[better]
        fit[better] = trial_fit[better]
        probs[better] = trial_probs[better]
        generations += 1

    i = int(np.argmin(fit))
    adv = apply_pixel(image, pop[i])[0] if fit[i] <= base_fit else image.copy()
    return _result(model, "ONEPIXEL", image, adv, before, reject_threshold, generations,
                   targeted, target_label, None, candidate=pop[i].copy())


# ---------------------------------------------------------------------------
# Universal perturbation


def mean_loss_gradient(model: Model, images: np.ndarray, labels,
                       chunk: int = 64) -> np.ndarray:
    images, labels = _check_batch(model, images, labels)
    total = np.zeros(images.shape[1:])
    for s in range(0, len(images), chunk):
        g, _ = model.loss_gradient(images[s:s + chunk], labels[s:s + chunk])
        total += g.sum(axis=0)
    return total / len(images)


def fooling_rate(model: Model, delta: np.ndarray, images: np.ndarray,
                 reject_threshold: float = DEFAULT_REJECT_THRESHOLD,
                 chunk: int = 256) -> float:
    """Fraction of images whose prediction changes (new label or lost
    recognition) when ``delta`` is added and the result clipped to [0, 1]."""
    images = np.asarray(images, dtype=np.float64)
    if len(images) == 0:
        raise ValueError("no images to measure a fooling rate on")
    fooled = 0
    for s in range(0, len(images), chunk):
        x = images[s:s + chunk]
        before = _predictions(model, x, reject_threshold)
        after = _predictions(model, np.clip(x + delta, 0.0, 1.0), reject_threshold)
        fooled += sum(is_success(b, a) for b, a in zip(before, after))
    return fooled / len(images)


def uap(model: Model, images: np.ndarray, labels, epsilon: float,
        eval_images: np.ndarray | None = None,
        reject_threshold: float = DEFAULT_REJECT_THRESHOLD) -> UniversalPerturbation:
    """epsilon * sign of the loss gradient averaged over ``images``.

    The fooling rate is measured on ``eval_images`` (default: ``images``).
    """
    _check_epsilon(epsilon)
    if len(images) == 0:
        raise ValueError("uap needs at least one image")
    delta = epsilon * np.sign(mean_loss_gradient(model, images, labels))
    held_out = images if eval_images is None else eval_images
    return UniversalPerturbation(delta, epsilon, fooling_rate(model, delta, held_out,
                                                              reject_threshold))


def apply_universal(model: Model, image: np.ndarray, delta: np.ndarray, epsilon: float,
                    reject_threshold: float = DEFAULT_REJECT_THRESHOLD) -> AttackResult:
    image = _check_image(model, image)
    before = prediction_from_probs(model.probabilities(image), reject_threshold)
    return _result(model, "UAP", image, np.clip(image + delta, 0.0, 1.0), before,
                   reject_threshold, 1, epsilon=epsilon)


# ---------------------------------------------------------------------------
# Dispatch and sweeps


def run_attack(model: Model, image: np.ndarray, label: int, cfg: AttackConfig,
               reject_threshold: float = DEFAULT_REJECT_THRESHOLD,
               universal: UniversalPerturbation | None = None) -> AttackResult:
    """Run the attack described by ``cfg`` on one image.

    UAP needs a precomputed ``universal`` perturbation. Untargeted L-BFGS
    targets the clean image's runner-up class.
    """
    kind = cfg.kind
    tgt = cfg.target_label
    if kind == "FGSM":
        return fgsm(model, image, label, cfg.epsilon, cfg.targeted, tgt, reject_threshold)
    if kind == "BIM":
        return bim(model, image, label, cfg.epsilon, cfg.alpha, cfg.iterations, cfg.targeted,
                   tgt, reject_threshold)
    if kind == "PGD":
        return pgd(model, image, label, cfg.epsilon, cfg.alpha, cfg.iterations,
                   cfg.random_start, cfg.seed, cfg.targeted, tgt, reject_threshold)
    if kind == "CW":
        return cw_l2(model, image, label, cfg.targeted, tgt, cfg.kappa,
                     cfg.binary_search_steps, cfg.cw_iters, cfg.lr, reject_threshold)
    if kind == "LBFGS":
        if tgt is None:
            probs = model.probabilities(image).copy()
            probs[int(np.argmax(probs))] = -np.inf
            tgt = int(np.argmax(probs))
        return lbfgs_attack(model, image, tgt, cfg.c_grid, cfg.memory, cfg.max_iters,
                            reject_threshold)
    if kind == "ONEPIXEL":
        return one_pixel(model, image, label, cfg.popsize, cfg.de_iters, cfg.F, cfg.CR,
                         cfg.seed, cfg.targeted, tgt, reject_threshold)
    if kind == "UAP":
        if universal is None:
            raise ValueError("UAP needs a precomputed universal perturbation")
        return apply_universal(model, image, universal.delta, universal.epsilon,
                               reject_threshold)
    raise ValueError(f"unknown attack kind {kind!r}")


@dataclass
class SweepPoint:
    epsilon: float
    success_rate: float
    results: list[AttackResult]


def misclassified(result: AttackResult, true_label: int) -> bool:
    return result.after.label != true_label or not result.after.recognized


def epsilon_sweep(model: Model, attack_kind: str, images: np.ndarray, labels,
                  epsilon_grid: Sequence[float], seed: int = 0, iterations: int = 40,
                  uap_images: np.ndarray | None = None, uap_labels=None,
                  reject_threshold: float = DEFAULT_REJECT_THRESHOLD) -> list[SweepPoint]:
    """Misclassification rate of attacked images at each epsilon.

    An example counts as a success when its attacked prediction differs from
    the ground-truth label or is not recognized, so the epsilon = 0 entry is
    the clean model's error rate on the slice. BIM/PGD use alpha = eps / 10;
    UAP's perturbation is computed on ``uap_images`` (default: the slice).
    """
    kind = attack_kind.upper()
    if kind not in SWEEP_KINDS:
        raise ValueError(f"sweeps support {', '.join(SWEEP_KINDS)}, not {attack_kind!r}")
    grid = [float(e) for e in epsilon_grid]
    if any(b <= a for a, b in zip(grid, grid[1:])):
        raise ValueError("epsilon grid must be strictly increasing")
    images, labels = _check_batch(model, images, labels)
    points = []
    for eps in grid:
        if eps == 0:
            results = fgsm_batch(model, images, labels, 0.0, reject_threshold=reject_threshold)
            for r in results:
                r.kind = kind
        elif kind == "FGSM":
            results = fgsm_batch(model, images, labels, eps, reject_threshold=reject_threshold)
        elif kind == "BIM":
            results = bim_batch(model, images, labels, eps, eps / 10, iterations,
                                reject_threshold=reject_threshold)
        elif kind == "PGD":
            results = pgd_batch(model, images, labels, eps, eps / 10, iterations, True, seed,
                                reject_threshold=reject_threshold)
        else:
            src_x = images if uap_images is None else uap_images
            src_y = labels if uap_labels is None else uap_labels
            delta = eps * np.sign(mean_loss_gradient(model, src_x, src_y))
            results = [apply_universal(model, x, delta, eps, reject_threshold) for x in images]
        rate = float(np.mean([misclassified(r, int(y)) for r, y in zip(results, labels)]))
        points.append(SweepPoint(eps, rate, results))
    return points
