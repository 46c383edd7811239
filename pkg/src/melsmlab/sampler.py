"""Dynamic Hamiltonian Monte Carlo (multinomial no-U-turn variant).

One sampler serves every model in the package: it only needs a target
exposing ``dim`` and ``log_density_and_grad``.  Warmup runs dual-averaging
step-size adaptation toward a target acceptance rate together with diagonal
mass-matrix estimation over expanding windows; the returned draws cover the
post-warmup phase only.  Everything is deterministic given the seed.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.special import ndtri
from scipy.stats import rankdata

from .rng import stream

DIVERGENCE_THRESHOLD = 1000.0
MAX_INIT_ATTEMPTS = 100


class SamplerError(RuntimeError):
    """Unrecoverable sampling failure (bad initialization, invalid config)."""


@dataclass(frozen=True)
class SamplerConfig:
    chains: int = 2
    warmup_iters: int = 1000
    sampling_iters: int = 1000
    target_accept: float = 0.8
    max_tree_depth: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.chains < 1 or self.warmup_iters < 1 or self.sampling_iters < 1:
            raise ValueError("chains, warmup_iters and sampling_iters must be positive")
        if not 0.0 < self.target_accept < 1.0:
            raise ValueError("target_accept must lie in (0, 1)")
        if self.max_tree_depth < 1:
            raise ValueError("max_tree_depth must be positive")

    def to_dict(self) -> dict:
        return {
            "chains": self.chains,
            "warmup_iters": self.warmup_iters,
            "sampling_iters": self.sampling_iters,
            "target_accept": self.target_accept,
            "max_tree_depth": self.max_tree_depth,
            "seed": self.seed,
        }


class SimpleTarget:
    """Adapter turning a plain (logp, grad) callable into a sampler target."""

    def __init__(self, fn: Callable[[np.ndarray], tuple[float, np.ndarray]], dim: int,
                 names: list[str] | None = None):
        self.fn = fn
        self.dim = dim
        self._names = names

    def log_density_and_grad(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        return self.fn(x)

    def constrained_names(self) -> list[str]:
        return self._names or [f"x.{i}" for i in range(self.dim)]

    def constrain(self, draws: np.ndarray) -> np.ndarray:
        return draws


@dataclass
class Fit:
    parameter_names: list[str]
    draws: np.ndarray  # (chains, sampling_iters, n_params), post-warmup only
    summaries: dict[str, dict[str, float]]
    diagnostics: dict
    config: SamplerConfig
    unconstrained_draws: np.ndarray | None = field(default=None, repr=False)

    @property
    def failed(self) -> bool:
        return bool(self.diagnostics.get("failed", False))

    def draws_for(self, name: str) -> np.ndarray:
        idx = self.parameter_names.index(name)
        return self.draws[:, :, idx].reshape(-1)

    def to_json_dict(self) -> dict:
        return {
            "parameter_names": self.parameter_names,
            "summaries": self.summaries,
            "diagnostics": self.diagnostics,
            "config": self.config.to_dict(),
        }

    def save_json(self, path: str | Path, save_draws: bool = False) -> None:
        path = Path(path)
        path.write_text(json.dumps(self.to_json_dict(), indent=2, sort_keys=True) + "\n",
                        encoding="utf-8")
        if save_draws:
            side = path.with_suffix(".draws.csv")
            flat = self.draws.reshape(-1, self.draws.shape[2])
            chain_col = np.repeat(np.arange(self.draws.shape[0]), self.draws.shape[1])
            with side.open("w", encoding="utf-8") as fh:
                fh.write(",".join(["chain"] + self.parameter_names) + "\n")
                for c, row in zip(chain_col, flat):
                    fh.write(str(int(c)) + "," + ",".join(repr(float(v)) for v in row) + "\n")


# --- interval and convergence diagnostics -----------------------------------


def credible_interval(draws: np.ndarray, level: float) -> tuple[float, float]:
    """Equal-tailed interval from empirical quantiles (type-7 interpolation)."""
    draws = np.asarray(draws, dtype=float)
    if draws.size == 0:
        raise ValueError("draws must be non-empty")
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie in (0, 1)")
    tail = (1.0 - level) / 2.0
    lo, hi = np.quantile(draws, [tail, 1.0 - tail])
    return float(lo), float(hi)


def _check_chain_shape(draws: np.ndarray) -> np.ndarray:
    draws = np.atleast_2d(np.asarray(draws, dtype=float))
    if draws.shape[0] < 2:
        raise ValueError("need at least 2 chains")
    if draws.shape[1] < 4:
        raise ValueError("need at least 4 draws per chain")
    return draws


def _split_chains(draws: np.ndarray) -> np.ndarray:
    half = draws.shape[1] // 2
    return np.vstack([draws[:, :half], draws[:, -half:]])


def compute_rhat(draws: np.ndarray) -> float:
    """Split-chain potential scale reduction factor."""
    draws = _split_chains(_check_chain_shape(draws))
    n = draws.shape[1]
    chain_means = draws.mean(axis=1)
    chain_vars = draws.var(axis=1, ddof=1)
    within = chain_vars.mean()
    if within == 0.0:
        return math.nan
    var_plus = (n - 1) / n * within + np.var(chain_means, ddof=1)
    return float(math.sqrt(var_plus / within))


def _autocov(x: np.ndarray) -> np.ndarray:
    n = len(x)
    x = x - x.mean()
    size = 2 ** math.ceil(math.log2(2 * n))
    f = np.fft.rfft(x, size)
    acov = np.fft.irfft(f * np.conj(f), size)[:n].real
    return acov / n


def compute_ess(draws: np.ndarray) -> float:
    """Rank-normalized effective sample size.

    Chains are split, pooled ranks mapped through the normal quantile
    function, and the autocorrelation sum truncated at the first negative
    paired sum (Geyer's initial positive sequence).
    """
    draws = _split_chains(_check_chain_shape(draws))
    m, n = draws.shape
    ranks = rankdata(draws, method="average").reshape(draws.shape)
    z = ndtri((ranks - 0.5) / draws.size)
    acov = np.array([_autocov(z[c]) for c in range(m)])
    mean_var = acov[:, 0].mean() * n / (n - 1)
    var_plus = mean_var * (n - 1) / n + np.var(z.mean(axis=1), ddof=1)
    if var_plus == 0.0:
        return math.nan
    rho = 1.0 - (mean_var - acov.mean(axis=0)) / var_plus
    tau = 0.0
    t = 0
    while t + 1 < n:
        paired = rho[t] + rho[t + 1]
        if paired < 0.0:
            break
        tau += paired
        t += 2
    tau = max(2.0 * tau - 1.0, 1.0 / math.log10(draws.size + 10.0))
    return float(draws.size / tau)


# --- leapfrog and tree building ----------------------------------------------


@dataclass
class _Point:
    theta: np.ndarray
    r: np.ndarray
    logp: float
    grad: np.ndarray


@dataclass
class _Tree:
    minus: _Point
    plus: _Point
    prop: _Point
    log_sum_w: float
    sum_alpha: float
    n_alpha: int
    divergent: bool
    turned: bool


class _Hamiltonian:
    def __init__(self, target, inv_mass: np.ndarray):
        self.target = target
        self.inv_mass = inv_mass

    def kinetic(self, r: np.ndarray) -> float:
        return 0.5 * float(self.inv_mass @ (r * r))

    def draw_momentum(self, rng: np.random.Generator) -> np.ndarray:
        return rng.standard_normal(len(self.inv_mass)) / np.sqrt(self.inv_mass)

    def leapfrog(self, point: _Point, eps: float) -> _Point:
        r_half = point.r + 0.5 * eps * point.grad
        theta = point.theta + eps * self.inv_mass * r_half
        logp, grad = self.target.log_density_and_grad(theta)
        r = r_half + 0.5 * eps * grad
        return _Point(theta=theta, r=r, logp=logp, grad=grad)

    def log_joint(self, point: _Point) -> float:
        if not np.isfinite(point.logp):
            return -math.inf
        return point.logp - self.kinetic(point.r)

    def is_uturn(self, minus: _Point, plus: _Point) -> bool:
        dtheta = plus.theta - minus.theta
        return (
            float(dtheta @ (self.inv_mass * minus.r)) < 0.0
            or float(dtheta @ (self.inv_mass * plus.r)) < 0.0
        )


def _build_tree(ham: _Hamiltonian, point: _Point, depth: int, eps: float, h0: float,
                rng: np.random.Generator) -> _Tree:
    if depth == 0:
        new = ham.leapfrog(point, eps)
        log_joint = ham.log_joint(new)
        log_w = log_joint - h0 if math.isfinite(log_joint) else -math.inf
        divergent = not (log_w > -DIVERGENCE_THRESHOLD)
        alpha = math.exp(min(0.0, log_w)) if math.isfinite(log_w) else 0.0
        return _Tree(minus=new, plus=new, prop=new, log_sum_w=log_w,
                     sum_alpha=alpha, n_alpha=1, divergent=divergent, turned=False)

    first = _build_tree(ham, point, depth - 1, eps, h0, rng)
    if first.divergent or first.turned:
        return first
    start = first.plus if eps > 0 else first.minus
    second = _build_tree(ham, start, depth - 1, eps, h0, rng)

    log_sum_w = np.logaddexp(first.log_sum_w, second.log_sum_w)
    prop = first.prop
    if math.isfinite(second.log_sum_w) and (
        math.log(rng.random()) < second.log_sum_w - log_sum_w
    ):
        prop = second.prop
    minus = first.minus if eps > 0 else second.minus
    plus = second.plus if eps > 0 else first.plus
    turned = second.turned or ham.is_uturn(minus, plus)
    return _Tree(
        minus=minus, plus=plus, prop=prop, log_sum_w=float(log_sum_w),
        sum_alpha=first.sum_alpha + second.sum_alpha,
        n_alpha=first.n_alpha + second.n_alpha,
        divergent=second.divergent, turned=turned,
    )


def _find_reasonable_epsilon(ham: _Hamiltonian, point: _Point,
                             rng: np.random.Generator) -> float:
    eps = 1.0
    r = ham.draw_momentum(rng)
    start = _Point(theta=point.theta, r=r, logp=point.logp, grad=point.grad)
    h0 = ham.log_joint(start)

    def log_ratio(e: float) -> float:
        new = ham.leapfrog(start, e)
        lj = ham.log_joint(new)
        return lj - h0 if math.isfinite(lj) else -math.inf

    ratio = log_ratio(eps)
    direction = 1.0 if ratio > math.log(0.5) else -1.0
    for _ in range(100):
        eps *= 2.0**direction
        ratio = log_ratio(eps)
        if direction * ratio <= direction * math.log(0.5):
            break
        if eps > 1e7 or eps < 1e-10:
            break
    return eps


class _DualAveraging:
    gamma = 0.05
    t0 = 10.0
    kappa = 0.75

    def __init__(self, eps: float, delta: float):
        self.delta = delta
        self.restart(eps)

    def restart(self, eps: float) -> None:
        self.mu = math.log(10.0 * eps)
        self.log_eps = math.log(eps)
        self.log_eps_bar = math.log(eps)
        self.h_bar = 0.0
        self.count = 0

    def update(self, accept_stat: float) -> float:
        self.count += 1
        frac = 1.0 / (self.count + self.t0)
        self.h_bar = (1.0 - frac) * self.h_bar + frac * (self.delta - accept_stat)
        self.log_eps = self.mu - math.sqrt(self.count) / self.gamma * self.h_bar
        eta = self.count**-self.kappa
        self.log_eps_bar = eta * self.log_eps + (1.0 - eta) * self.log_eps_bar
        return math.exp(self.log_eps)

    @property
    def adapted_eps(self) -> float:
        return math.exp(self.log_eps_bar)


def _mass_windows(warmup: int) -> tuple[int, int, list[int]]:
    """Stan-style warmup split: fast start, expanding slow windows, fast end."""
    init_buffer, term_buffer, base = 75, 50, 25
    if init_buffer + term_buffer + base > warmup:
        init_buffer = max(1, int(0.15 * warmup))
        term_buffer = max(1, int(0.10 * warmup))
        base = warmup - init_buffer - term_buffer
        if base < 1:
            return warmup, 0, []
    ends = []
    pos = init_buffer
    size = base
    while True:
        nxt = pos + size
        if nxt + 2 * size > warmup - term_buffer:
            ends.append(warmup - term_buffer)
            break
        ends.append(nxt)
        pos = nxt
        size *= 2
    return init_buffer, term_buffer, ends


class _Welford:
    def __init__(self, dim: int):
        self.count = 0
        self.mean = np.zeros(dim)
        self.m2 = np.zeros(dim)

    def push(self, x: np.ndarray) -> None:
        self.count += 1
        delta = x - self.mean
        self.mean += delta / self.count
        self.m2 += delta * (x - self.mean)

    def variance(self) -> np.ndarray:
        if self.count < 2:
            return np.ones_like(self.mean)
        var = self.m2 / (self.count - 1)
        # Stan's shrinkage toward unit scale keeps small windows sane
        w = self.count / (self.count + 5.0)
        return w * var + 1e-3 * (1.0 - w) * np.ones_like(var)


def _run_chain(target, init: np.ndarray, config: SamplerConfig, chain: int):
    rng = stream(config.seed, "chain", chain)
    dim = target.dim

    point = None
    for _ in range(MAX_INIT_ATTEMPTS):
        theta = init + rng.uniform(-2.0, 2.0, dim)
        logp, grad = target.log_density_and_grad(theta)
        if np.isfinite(logp) and np.all(np.isfinite(grad)):
            point = _Point(theta=theta, r=np.zeros(dim), logp=logp, grad=grad)
            break
    if point is None:
        raise SamplerError(
            f"chain {chain}: no finite log density after {MAX_INIT_ATTEMPTS} jittered attempts"
        )

    inv_mass = np.ones(dim)
    ham = _Hamiltonian(target, inv_mass)
    eps = _find_reasonable_epsilon(ham, point, rng)
    da = _DualAveraging(eps, config.target_accept)
    init_buffer, term_buffer, window_ends = _mass_windows(config.warmup_iters)
    welford = _Welford(dim)

    draws = np.empty((config.sampling_iters, dim))
    divergences = 0
    max_depth_hits = 0
    warmup_divergences = 0

    total = config.warmup_iters + config.sampling_iters
    for it in range(total):
        warming = it < config.warmup_iters
        r0 = ham.draw_momentum(rng)
        point = _Point(theta=point.theta, r=r0, logp=point.logp, grad=point.grad)
        h0 = ham.log_joint(point)

        tree = _Tree(minus=point, plus=point, prop=point, log_sum_w=0.0,
                     sum_alpha=0.0, n_alpha=0, divergent=False, turned=False)
        depth = 0
        while depth < config.max_tree_depth:
            go_forward = rng.random() < 0.5
            edge = tree.plus if go_forward else tree.minus
            sub = _build_tree(ham, edge, depth, eps if go_forward else -eps, h0, rng)
            tree.sum_alpha += sub.sum_alpha
            tree.n_alpha += sub.n_alpha
            if sub.divergent or sub.turned:
                tree.divergent |= sub.divergent
                break
            if math.isfinite(sub.log_sum_w) and (
                math.log(rng.random()) < sub.log_sum_w - tree.log_sum_w
            ):
                tree.prop = sub.prop
            tree.log_sum_w = float(np.logaddexp(tree.log_sum_w, sub.log_sum_w))
            if go_forward:
                tree.plus = sub.plus
            else:
                tree.minus = sub.minus
            depth += 1
            if ham.is_uturn(tree.minus, tree.plus):
                break
        else:
            max_depth_hits += 1

        point = tree.prop
        accept_stat = tree.sum_alpha / max(tree.n_alpha, 1)

        if warming:
            if tree.divergent:
                warmup_divergences += 1
            eps = da.update(accept_stat)
            in_slow = window_ends and init_buffer <= it < window_ends[-1]
            if in_slow:
                welford.push(point.theta)
            if window_ends and (it + 1) in window_ends:
                inv_mass = welford.variance()
                ham = _Hamiltonian(target, inv_mass)
                welford = _Welford(dim)
                eps = _find_reasonable_epsilon(ham, point, rng)
                da.restart(eps)
            if it + 1 == config.warmup_iters:
                eps = da.adapted_eps
        else:
            if tree.divergent:
                divergences += 1
            draws[it - config.warmup_iters] = point.theta

    all_divergent = warmup_divergences >= config.warmup_iters
    return draws, {
        "divergences": divergences,
        "warmup_divergences": warmup_divergences,
        "max_depth_hits": max_depth_hits,
        "step_size": eps,
        "all_divergent_warmup": all_divergent,
    }


def nuts_sample(target, init: np.ndarray | None, config: SamplerConfig) -> Fit:
    """Sample the target posterior; returns post-warmup draws plus diagnostics."""
    dim = target.dim
    if init is None:
        init = np.zeros(dim)
    init = np.asarray(init, dtype=float)
    if init.shape != (dim,):
        raise SamplerError(f"init has shape {init.shape}, expected ({dim},)")
    value, grad = target.log_density_and_grad(init)
    if not np.isfinite(value) or not np.all(np.isfinite(grad)):
        raise SamplerError("target log density is not finite at the initial point")

    chain_draws = []
    chain_info = []
    for c in range(config.chains):
        draws_c, info_c = _run_chain(target, init, config, c)
        chain_draws.append(draws_c)
        chain_info.append(info_c)
    unconstrained = np.stack(chain_draws)

    names = (
        target.constrained_names()
        if hasattr(target, "constrained_names")
        else [f"x.{i}" for i in range(dim)]
    )
    if hasattr(target, "constrain"):
        flat = unconstrained.reshape(-1, dim)
        constrained = target.constrain(flat).reshape(
            config.chains, config.sampling_iters, len(names)
        )
    else:
        constrained = unconstrained

    summaries: dict[str, dict[str, float]] = {}
    rhat: dict[str, float] = {}
    ess: dict[str, float] = {}
    qlevels = (0.025, 0.25, 0.5, 0.75, 0.975)
    for k, name in enumerate(names):
        series = constrained[:, :, k]
        pooled = series.reshape(-1)
        qs = np.quantile(pooled, qlevels)
        summaries[name] = {
            "mean": float(pooled.mean()),
            "sd": float(pooled.std(ddof=1)) if pooled.size > 1 else 0.0,
            **{f"q{int(q * 1000) / 10:g}": float(v) for q, v in zip(qlevels, qs)},
        }
        if config.chains >= 2 and config.sampling_iters >= 4:
            rhat[name] = compute_rhat(series)
            ess[name] = compute_ess(series)

    rhat_vals = [v for v in rhat.values() if not math.isnan(v)]
    diagnostics = {
        "rhat": rhat,
        "ess": ess,
        "rhat_max": max(rhat_vals) if rhat_vals else math.nan,
        "divergence_count": int(sum(i["divergences"] for i in chain_info)),
        "max_depth_hits": int(sum(i["max_depth_hits"] for i in chain_info)),
        "step_sizes": [i["step_size"] for i in chain_info],
        "failed": bool(all(i["all_divergent_warmup"] for i in chain_info)),
    }
    return Fit(
        parameter_names=list(names),
        draws=constrained,
        summaries=summaries,
        diagnostics=diagnostics,
        config=config,
        unconstrained_draws=unconstrained,
    )
