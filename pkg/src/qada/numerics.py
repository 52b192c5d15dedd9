"""Sampling primitives, masked softmax and a finite-difference gradient checker.

Tensors and reverse-mode autodiff come from torch; everything here that draws
random numbers goes through :class:`Rng` so runs are reproducible from a seed.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np
import torch


class NumericError(ArithmeticError):
    """Raised when a function under test returns a non-finite value."""


class Rng:
    """Seeded random stream (PCG64). ``split`` derives independent child streams."""

    def __init__(self, seed: int | np.random.SeedSequence = 0):
        if isinstance(seed, np.random.SeedSequence):
            self._seq = seed
            self.seed = int(seed.entropy) if isinstance(seed.entropy, int) else 0
        else:
            self.seed = int(seed)
            self._seq = np.random.SeedSequence(self.seed)
        self.gen = np.random.Generator(np.random.PCG64(self._seq))

    def split(self, n: int) -> list["Rng"]:
        return [Rng(s) for s in self._seq.spawn(n)]

    def uniform(self) -> float:
        return float(self.gen.random())

    def normal(self) -> float:
        return float(self.gen.standard_normal())

    def integers(self, low: int, high: int) -> int:
        return int(self.gen.integers(low, high))

    def categorical(self, probs) -> int:
        """Inverse-CDF draw from a probability vector."""
        p = np.asarray(probs, dtype=np.float64)
        cdf = np.cumsum(p)
        u = self.uniform() * cdf[-1]
        idx = int(np.searchsorted(cdf, u, side="right"))
        # zero-probability entries can never be returned, even at the right edge
        while idx >= len(p) or p[idx] == 0.0:
            idx -= 1
        return idx

    def choice(self, n: int, k: int) -> list[int]:
        """``k`` distinct indices from ``range(n)``, uniformly."""
        return [int(i) for i in self.gen.choice(n, size=k, replace=False)]

    def torch_seed(self) -> int:
        return int(self.gen.integers(0, 2**63 - 1))

    @contextlib.contextmanager
    def torch_scope(self):
        """Seed torch's global generator (dropout) from this stream; restore it on exit."""
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(self.torch_seed())
            yield

    def state(self) -> dict:
        return self.gen.bit_generator.state

    def set_state(self, state: dict) -> None:
        self.gen.bit_generator.state = state


def log_gamma_sample(alpha: float, rng: Rng) -> float:
    """Log of a Gamma(alpha, 1) variate.

    Marsaglia-Tsang squeeze/rejection for alpha >= 1.  For alpha < 1 the
    boost ``G(alpha) = G(alpha + 1) * U**(1/alpha)`` is applied in log space,
    since ``U**(1/0.01)`` routinely underflows to zero in linear space.
    """
    if not alpha > 0 or math.isnan(alpha):
        raise ValueError(f"gamma shape must be positive, got {alpha!r}")
    boost = 0.0
    if alpha < 1.0:
        u = rng.uniform()
        while u == 0.0:
            u = rng.uniform()
        boost = math.log(u) / alpha
        alpha += 1.0
    d = alpha - 1.0 / 3.0
    c = 1.0 / math.sqrt(9.0 * d)
    while True:
        x = rng.normal()
        v = 1.0 + c * x
        if v <= 0.0:
            continue
        v = v * v * v
        u = rng.uniform()
        if u < 1.0 - 0.0331 * x**4:
            return math.log(d * v) + boost
        if u > 0.0 and math.log(u) < 0.5 * x * x + d * (1.0 - v + math.log(v)):
            return math.log(d * v) + boost


def gamma_sample(alpha: float, rng: Rng) -> float:
    return math.exp(log_gamma_sample(alpha, rng))


def dirichlet_sample(alphas: Sequence[float], rng: Rng) -> np.ndarray:
    """Draw simplex coefficients by normalising independent Gamma(alpha_j, 1) variates."""
    alphas = [float(a) for a in alphas]
    if not alphas:
        raise ValueError("dirichlet_sample needs at least one concentration")
    for a in alphas:
        if math.isnan(a) or a <= 0:
            raise ValueError(f"Dirichlet concentrations must be positive, got {a!r}")
    logs = np.array([log_gamma_sample(a, rng) for a in alphas])
    logs -= logs.max()
    eta = np.exp(logs)
    return eta / eta.sum()


def masked_softmax(logits, mask, dim: int = -1):
    """Softmax over ``dim`` restricted to ``mask``; masked entries are exactly 0.

    Accepts torch tensors (differentiable) or array-likes (returns numpy).
    """
    as_numpy = not isinstance(logits, torch.Tensor)
    x = torch.as_tensor(np.asarray(logits, dtype=np.float64)) if as_numpy else logits
    m = torch.as_tensor(np.asarray(mask, dtype=bool)) if not isinstance(mask, torch.Tensor) else mask
    m = m.to(torch.bool).expand_as(x)
    if not bool(m.any(dim=dim).all()):
        raise ValueError("masked_softmax: mask selects no position")
    neg_inf = torch.tensor(float("-inf"), dtype=x.dtype)
    filled = torch.where(m, x, neg_inf)
    shift = filled.max(dim=dim, keepdim=True).values.detach()
    e = torch.where(m, torch.exp(filled - shift), torch.zeros((), dtype=x.dtype))
    out = e / e.sum(dim=dim, keepdim=True)
    return out.numpy() if as_numpy else out


def finite_diff_check(
    fn: Callable[[torch.Tensor], torch.Tensor],
    point,
    epsilon: float = 1e-6,
    coords: Sequence[int] | None = None,
) -> float:
    """Max over coordinates of ``|analytic - central| / max(1, |analytic|)``.

    ``fn`` maps a flat double tensor to a scalar tensor.  ``coords`` restricts
    the central-difference sweep to a subset of coordinates.
    """
    x = torch.as_tensor(point, dtype=torch.float64).detach().clone().reshape(-1)
    x.requires_grad_(True)
    y = fn(x)
    if not torch.isfinite(y).all():
        raise NumericError(f"function value is not finite at the check point: {y}")
    (analytic,) = torch.autograd.grad(y, x, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x)
    analytic = analytic.detach()
    idx = range(x.numel()) if coords is None else coords
    worst = 0.0
    with torch.no_grad():
        base = x.detach().clone()
        for i in idx:
            xp = base.clone()
            xp[i] += epsilon
            xm = base.clone()
            xm[i] -= epsilon
            fp, fm = fn(xp), fn(xm)
            if not (torch.isfinite(fp) and torch.isfinite(fm)):
                raise NumericError(f"non-finite function value while perturbing coordinate {i}")
            numeric = (float(fp) - float(fm)) / (2 * epsilon)
            a = float(analytic[i])
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


def module_gradient_check(
    module: torch.nn.Module,
    loss_fn: Callable[[torch.nn.Module], torch.Tensor],
    epsilon: float = 1e-6,
    max_coords_per_param: int | None = None,
    rng: Rng | None = None,
) -> float:
    """Same error measure as :func:`finite_diff_check`, over a module's parameters.

    Parameters are perturbed in place and restored.  ``loss_fn`` must be
    deterministic given the parameters: fix sampled plans, indices and kernel
    bandwidths before calling.  Use float64 parameters.
    """
    params = [p for p in module.parameters() if p.requires_grad]
    loss = loss_fn(module)
    if not torch.isfinite(loss):
        raise NumericError(f"loss is not finite: {loss}")
    grads = torch.autograd.grad(loss, params, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, grads):
            flat = p.view(-1)
            g = torch.zeros_like(p).view(-1) if g is None else g.reshape(-1)
            if max_coords_per_param is None or flat.numel() <= max_coords_per_param:
                idx = range(flat.numel())
            else:
                idx = sorted((rng or Rng(0)).choice(flat.numel(), max_coords_per_param))
            for i in idx:
                orig = flat[i].item()
                flat[i] = orig + epsilon
                fp = float(loss_fn(module))
                flat[i] = orig - epsilon
                fm = float(loss_fn(module))
                flat[i] = orig
                if not (math.isfinite(fp) and math.isfinite(fm)):
                    raise NumericError("non-finite loss while perturbing a parameter")
                numeric = (fp - fm) / (2 * epsilon)
                a = float(g[i])
                worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst
