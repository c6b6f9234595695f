"""Strongly convex testbed for the O(1/T) rate of block-masked federated descent.

Every device k owns a quadratic F_k(w) = 1/2 w'Q_k w - b_k'w whose parameter
vector is cut into contiguous blocks playing the role of layers. Devices run
the masked local update on the blocks their width back-propagates through,
and the server aggregates block-wise exactly as it does for neural networks.
"""
from __future__ import division

import logging
import warnings
from collections import namedtuple

import numpy as np
from joblib import Parallel, delayed

from fedpmt.aggregation import aggregate, compute_weights
from fedpmt.exceptions import DivergenceError, WidthMenuError, ZeroTailError
from fedpmt.model import LayerGrads, LayerParams

logger = logging.getLogger(__name__)

Psi = namedtuple('Psi', ['proof_form', 'statement_form'])

Constants = namedtuple('Constants', ['L', 'mu', 'G2', 'delta2', 'gamma1'])


class QuadraticTask(object):
    """Per-device quadratic objectives with closed-form optima.

    Attributes:
    --------------
    Q: numpy.ndarray
        (K, d, d) positive definite matrices.

    b: numpy.ndarray
        (K, d) linear terms.

    mu: float
        Strong convexity modulus (every Q_k has eigenvalues >= mu).

    blocks: list of slice
        Contiguous blocks of the parameter vector, shallow to deep.

    local_optima: numpy.ndarray
        (K, d) per-device minimisers w_k*.

    w_star: numpy.ndarray
        Minimiser of the average objective F = mean_k F_k.
    """

    def __init__(self, Q, b, mu, blocks):
        self.Q = np.asarray(Q, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        self.mu = float(mu)
        self.blocks = list(blocks)
        self.local_optima = np.array([np.linalg.solve(q, v) for q, v in zip(self.Q, self.b)])
        self.Q_mean = self.Q.mean(axis=0)
        self.b_mean = self.b.mean(axis=0)
        self.w_star = np.linalg.solve(self.Q.sum(axis=0), self.b.sum(axis=0))
        self.f_star = self.loss(self.w_star)
        self.device_f_star = np.array([self.device_loss(k, w)
                                       for k, w in enumerate(self.local_optima)])

    @property
    def num_devices(self):
        return self.Q.shape[0]

    @property
    def dim(self):
        return self.Q.shape[1]

    @property
    def num_blocks(self):
        return len(self.blocks)

    @property
    def smoothness(self):
        """L: largest eigenvalue over all device Hessians."""
        return float(max(np.linalg.eigvalsh(q)[-1] for q in self.Q))

    def device_loss(self, k, w):
        return 0.5 * w.dot(self.Q[k]).dot(w) - self.b[k].dot(w)

    def device_grad(self, k, w):
        return self.Q[k].dot(w) - self.b[k]

    def loss(self, w):
        return 0.5 * w.dot(self.Q_mean).dot(w) - self.b_mean.dot(w)

    def grad(self, w):
        return self.Q_mean.dot(w) - self.b_mean

    def gap(self, w):
        """F(w) - F*, evaluated as 1/2 (w - w*)'Q (w - w*)."""
        e = w - self.w_star
        return 0.5 * e.dot(self.Q_mean).dot(e)

    def split(self, w):
        return [(w[s],) for s in self.blocks]


def build_quadratic_task(num_devices, dim, num_blocks, heterogeneity, seed, mu=1.,
                         normalize=True):
    """Random strongly convex task.

    Q_k = A_k'A_k + mu I with Gaussian A_k, b_k = Q_k w_k where the planted
    solutions w_k = w0 + heterogeneity * noise. With ``normalize`` the Gram
    term is divided by dim, keeping L near 4 + mu whatever the dimension;
    the unscaled form has L of order 4 dim.
    """
    if dim % num_blocks:
        raise ValueError('dim {} cannot be split into {} blocks'.format(dim, num_blocks))
    if not mu > 0:
        raise ValueError('mu must be > 0. Found: {}.'.format(mu))
    rng = np.random.RandomState(seed)
    A = rng.normal(size=(num_devices, dim, dim))
    Q = np.einsum('kij,kil->kjl', A, A)
    if normalize:
        Q /= dim
    Q += mu * np.eye(dim)
    w0 = rng.normal(size=dim)
    planted = w0 + heterogeneity * rng.normal(size=(num_devices, dim))
    b = np.einsum('kij,kj->ki', Q, planted)
    size = dim // num_blocks
    blocks = [slice(i * size, (i + 1) * size) for i in range(num_blocks)]
    task = QuadraticTask(Q, b, mu, blocks)
    assert min(np.linalg.eigvalsh(q)[0] for q in Q) >= mu * (1 - 1e-9)
    return task


class RateFit(namedtuple('RateFit', ['gaps', 'slope', 'intercept', 'window', 'lam',
                                     'epsilon', 'max_grad_sq'])):
    """Loss gaps F(w^t) - F* for t = 0..T and their log-log fit.

    ``slope`` and ``intercept`` fit log(gap) against log(t + lam) over the
    rounds of ``window`` only (NaN when fewer than two rounds fall in it).
    """

    @property
    def rounds(self):
        return np.arange(len(self.gaps))

    @property
    def terminal_gap(self):
        return float(self.gaps[-1])


def fit_rate(gaps, lam, window):
    """Least-squares slope/intercept of log gap vs log(t + lam) in ``window``."""
    gaps = np.asarray(gaps, dtype=np.float64)
    t = np.arange(len(gaps))
    inside = (t >= window[0]) & (t <= window[1]) & (gaps > 0)
    if inside.sum() < 2:
        return np.nan, np.nan
    slope, intercept = np.polyfit(np.log(t[inside] + lam), np.log(gaps[inside]), 1)
    return float(slope), float(intercept)


def default_lambda(task, epsilon, tau=1):
    """max(4 L / (mu epsilon), tau), small enough steps from the first round."""
    return max(4. * task.smoothness / (task.mu * epsilon), float(tau))


def run_convex_fedpmt(task, menu, assignment, epsilon=0.5, lam=None, tau=1,
                      rounds=1000, noise_std=0., seed=0, window=(100, 10000),
                      w_init=None):
    """Block-masked federated descent with steps 2 / (mu epsilon (t + lam)).

    Parameters:
    --------------
    task: QuadraticTask
        The objectives.

    menu: WidthMenu
        Menu over ``task.num_blocks`` blocks.

    assignment: list of int
        Widths of the |S| devices sampled each round; every round the sampled
        devices receive these widths in a fresh random order.

    epsilon: float
        Information-retention factor in (0, 1].

    lam: float or None
        Step offset; ``default_lambda`` when None.

    tau: int
        Local steps per round.

    rounds: int
        T.

    noise_std: float
        Standard deviation of the Gaussian noise added to every gradient
        coordinate (0 = exact gradients).

    seed: int
        Seeds device sampling, width order and noise.

    window: tuple
        Round window of the rate fit.

    Returns:
    --------------
    fit: RateFit
    """
    if not 0 < epsilon <= 1:
        raise ValueError('epsilon must be in (0, 1]. Found: {}.'.format(epsilon))
    if menu.num_layers != task.num_blocks:
        raise WidthMenuError('menu has {} layers, task has {} blocks'.format(
            menu.num_layers, task.num_blocks))
    per_round = len(assignment)
    if not 1 <= per_round <= task.num_devices:
        raise ValueError('{} devices per round out of {}'.format(per_round, task.num_devices))
    lam = default_lambda(task, epsilon, tau) if lam is None else float(lam)
    if not lam > 0:
        raise ValueError('lam must be > 0. Found: {}.'.format(lam))

    rng = np.random.RandomState(seed)
    masks = [menu.mask(i) for i in assignment]
    w = np.zeros(task.dim) if w_init is None else np.array(w_init, dtype=np.float64)
    gaps = np.empty(rounds + 1)
    gaps[0] = task.gap(w)
    max_grad_sq = 0.
    for t in range(1, rounds + 1):
        eta = 2. / (task.mu * epsilon * (t + lam))
        selected = np.sort(rng.choice(task.num_devices, per_round, replace=False))
        order = rng.permutation(per_round)
        updates, round_masks = [], []
        for k, i in zip(selected, order):
            mask = masks[i]
            on = np.concatenate([np.full(s.stop - s.start, bool(m))
                                 for s, m in zip(task.blocks, mask)])
            w_k = w.copy()
            for _ in range(tau):
                g = task.device_grad(k, w_k)
                if noise_std:
                    g = g + noise_std * rng.normal(size=task.dim)
                max_grad_sq = max(max_grad_sq, g.dot(g))
                w_k = w_k - eta * g * on
            updates.append(LayerGrads(task.split(w - w_k), mask))
            round_masks.append(mask)
        new = aggregate(LayerParams(task.split(w)), updates,
                        weights=compute_weights(round_masks))
        w = np.concatenate([block[0] for block in new])
        gaps[t] = task.gap(w)
        if not np.isfinite(gaps[t]) or gaps[t] > 10. * gaps[0] > 0:
            raise DivergenceError(t, gaps[t], gaps[0])
    slope, intercept = fit_rate(gaps, lam, window)
    return RateFit(gaps, slope, intercept, tuple(window), lam, epsilon, max_grad_sq)


def run_convex_sweep(task, menu, assignment, seeds, n_jobs=1, **kwargs):
    """Run one lab per seed and fit the rate of their mean gap curve.

    Returns:
    --------------
    fits: list of RateFit
        One per seed.

    mean_fit: RateFit
        Fit of the gap averaged over seeds.
    """
    fits = Parallel(n_jobs=n_jobs)(
        delayed(run_convex_fedpmt)(task, menu, assignment, seed=s, **kwargs)
        for s in seeds)
    gaps = np.mean([f.gaps for f in fits], axis=0)
    lam, window = fits[0].lam, fits[0].window
    slope, intercept = fit_rate(gaps, lam, window)
    mean_fit = RateFit(gaps, slope, intercept, window, lam, fits[0].epsilon,
                       max(f.max_grad_sq for f in fits))
    return fits, mean_fit


def compute_psi(width_proportions, num_widths, per_round):
    """Model-splitting constant.

    proof_form = sum_i |I| |S| / sum_{j >= i} p_j, the form used in the
    bound; statement_form = sum_i 1 / sum_{j >= i} p_j.
    """
    p = np.asarray(width_proportions, dtype=np.float64)
    if len(p) != num_widths:
        raise ValueError('{} proportions for {} widths'.format(len(p), num_widths))
    if (p < 0).any() or abs(p.sum() - 1.) > 1e-9:
        raise ValueError('proportions must be >= 0 and sum to 1. Found: {}.'.format(p))
    tails = np.cumsum(p[::-1])[::-1]
    if (tails <= 0).any():
        raise ZeroTailError(int(np.flatnonzero(tails <= 0)[0]) + 1)
    statement = float(np.sum(1. / tails))
    return Psi(num_widths * per_round * statement, statement)


def compute_lambda(task):
    """Non-iid degree: mean_k (F* - F_k*), always >= 0."""
    return float(np.mean(task.f_star - task.device_f_star))


def gap_bound(gamma1, lam, tau, G, L, mu, delta2, epsilon, psi, num_widths,
              per_round, Lambda, T):
    """Right-hand side of the expected-gap bound after T rounds.

    1/(T+lam) * ((lam+1) gamma1 / 2 + 2 D / mu^2) with
    D = (8 (tau-1)^2 G^2 + 2 L (|I| psi + |S| + epsilon) Lambda
         + 2 delta2 psi) / epsilon^2.
    ``T`` may be an array.
    """
    if epsilon == 0:
        raise ValueError('epsilon must be nonzero')
    delta = (8. * (tau - 1) ** 2 * G ** 2
             + 2. * L * (num_widths * psi + per_round + epsilon) * Lambda
             + 2. * delta2 * psi) / epsilon ** 2
    T = np.asarray(T, dtype=np.float64)
    bound = ((lam + 1.) * gamma1 / 2. + 2. * delta / mu ** 2) / (T + lam)
    return float(bound) if bound.ndim == 0 else bound


theorem1_bound = gap_bound


def estimate_constants(task, fit, noise_std=0., w_init=None):
    """L, mu, G^2, delta^2 and gamma1 measured on ``task`` and a finished run."""
    w1 = np.zeros(task.dim) if w_init is None else np.asarray(w_init, dtype=np.float64)
    delta2 = task.dim * noise_std ** 2
    e = w1 - task.w_star
    return Constants(task.smoothness, task.mu, fit.max_grad_sq + delta2, delta2,
                     float(e.dot(e)))


def check_bound(task, fit, menu, assignment, tau=1, noise_std=0., w_init=None):
    """Compare every recorded gap with the bound; violations only warn.

    Returns:
    --------------
    bound: numpy.ndarray
        Bound value for every round 0..T.

    violations: int
        Rounds whose gap exceeds the bound.
    """
    counts = np.bincount(assignment, minlength=menu.num_widths + 1)[1:]
    psi = compute_psi(counts / counts.sum(), menu.num_widths, len(assignment))
    c = estimate_constants(task, fit, noise_std, w_init)
    bound = gap_bound(c.gamma1, fit.lam, tau, np.sqrt(c.G2), c.L, c.mu,
                      c.delta2, fit.epsilon, psi.proof_form, menu.num_widths,
                      len(assignment), compute_lambda(task), fit.rounds)
    violations = int((fit.gaps > bound).sum())
    if violations:
        warnings.warn('loss gap above the bound in {} of {} rounds'.format(
            violations, len(fit.gaps)))
    return bound, violations
