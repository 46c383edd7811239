"""Joint location-scale mixed model: likelihood, priors, analytic gradients.

The outcome for subject i at encounter j is normal with mean
``mu = x'beta_y + z'u_y_i`` and standard deviation
``omega = exp(x'beta_w + z'u_w_i)``; the log link keeps omega positive.

Sampling happens on an unconstrained vector: fixed effects, log random-effect
standard deviations, canonical partial correlations of one joint
random-effect correlation matrix (Cholesky parameterization), and
standardized subject effects ``z_re`` (non-centered: the subject effects are
``u_i = diag(sd) @ L @ z_i``).  All gradients are exact; a finite-difference
suite pins them down in the tests.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .data import LongitudinalDataset
from .formula import DesignMatrices, FormulaAst, build_design

LOG_2PI = math.log(2.0 * math.pi)
RE_SD_PRIOR_DF = 3.0
DEFAULT_STUDENT_DF = 3.0


class NumericalError(FloatingPointError):
    """Non-finite posterior value or gradient (overflow, not clamped away)."""

    def __init__(self, message: str, coordinate: int | None = None):
        self.coordinate = coordinate
        if coordinate is not None:
            message += f" (coordinate {coordinate})"
        super().__init__(message)


@dataclass(frozen=True)
class PriorConfig:
    fixed_effect_sd: float = 10.0
    re_sd_scale: float = 2.5
    lkj_eta: float = 1.0

    def __post_init__(self):
        for name in ("fixed_effect_sd", "re_sd_scale", "lkj_eta"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")


@dataclass(frozen=True)
class MelsmSpec:
    location: FormulaAst
    scale: FormulaAst
    priors: PriorConfig = PriorConfig()
    student_df: float | None = None

    def __post_init__(self):
        if self.location.response != "y":
            raise ValueError(f"location response must be 'y', got '{self.location.response}'")
        if self.scale.response != "log(omega)":
            raise ValueError(
                f"scale response must be 'log(omega)', got '{self.scale.response}'"
            )
        if self.student_df is not None and self.student_df <= 0:
            raise ValueError("student_df must be strictly positive")


@dataclass
class ParameterVector:
    beta_y: np.ndarray
    beta_w: np.ndarray
    log_sd_y: np.ndarray
    log_sd_w: np.ndarray
    corr_chol_raw: np.ndarray
    z_re: np.ndarray  # (n_subjects, q_y + q_w)


@dataclass
class LinearPredictors:
    mu: np.ndarray
    omega: np.ndarray


def _family_of(ast: FormulaAst) -> str:
    return ast.random_terms[0].re_family if ast.random_terms else "gaussian"


def _half_student_t_const(df: float, scale: float) -> float:
    return (
        math.log(2.0)
        + math.lgamma((df + 1.0) / 2.0)
        - math.lgamma(df / 2.0)
        - 0.5 * math.log(df * math.pi)
        - math.log(scale)
    )


def _student_t_const(df: float) -> float:
    return (
        math.lgamma((df + 1.0) / 2.0)
        - math.lgamma(df / 2.0)
        - 0.5 * math.log(df * math.pi)
    )


def build_corr_chol(raw: np.ndarray, q: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Map unconstrained coordinates to the Cholesky factor of a correlation matrix.

    Returns (L, z, s) where z holds the partial correlations tanh(raw) and
    s[i, j] the squared norm still unallocated in row i before column j;
    both are cached for the reverse pass.
    """
    L = np.eye(q)
    z = np.zeros((q, q))
    s = np.ones((q, q))
    k = 0
    for i in range(1, q):
        rem = 1.0
        for jj in range(i):
            zz = math.tanh(raw[k])
            k += 1
            z[i, jj] = zz
            s[i, jj] = rem
            L[i, jj] = zz * math.sqrt(rem)
            rem *= 1.0 - zz * zz
        L[i, i] = math.sqrt(rem)
    return L, z, s


def corr_chol_backprop(
    grad_L: np.ndarray, L: np.ndarray, z: np.ndarray, s: np.ndarray, q: int
) -> np.ndarray:
    """Pull a gradient on L entries (lower triangle incl. diagonal) back to raw."""
    out = np.zeros(q * (q - 1) // 2)
    k = 0
    for i in range(1, q):
        prods = grad_L[i, : i + 1] * L[i, : i + 1]
        suffix = np.concatenate([np.cumsum(prods[::-1])[::-1], [0.0]])
        for jj in range(i):
            zz = z[i, jj]
            out[k] = grad_L[i, jj] * math.sqrt(s[i, jj]) * (1.0 - zz * zz) - zz * suffix[jj + 1]
            k += 1
    return out


class MelsmModel:
    """Posterior density with analytic gradient for one spec on one dataset."""

    def __init__(self, spec: MelsmSpec, data: LongitudinalDataset):
        self.spec = spec
        self.data = data
        self.design_y: DesignMatrices = build_design(spec.location, data)
        self.design_w: DesignMatrices = build_design(spec.scale, data)
        self.x_y = np.ascontiguousarray(self.design_y.x)
        self.x_w = np.ascontiguousarray(self.design_w.x)
        self.z_y = np.ascontiguousarray(self.design_y.z)
        self.z_w = np.ascontiguousarray(self.design_w.z)
        self.subj = data.subject_index
        self.n_subjects = data.n_subjects
        self.y = data.y

        self.p_y = self.x_y.shape[1]
        self.p_w = self.x_w.shape[1]
        self.q_y = self.z_y.shape[1]
        self.q_w = self.z_w.shape[1]
        self.q = self.q_y + self.q_w
        self.n_corr = self.q * (self.q - 1) // 2
        self.n_z = self.n_subjects * self.q

        self.family_y = _family_of(spec.location)
        self.family_w = _family_of(spec.scale)
        df = spec.student_df if spec.student_df is not None else DEFAULT_STUDENT_DF
        self.student_df = float(df)

        o = 0
        self.sl_beta_y = slice(o, o + self.p_y); o += self.p_y
        self.sl_beta_w = slice(o, o + self.p_w); o += self.p_w
        self.sl_log_sd_y = slice(o, o + self.q_y); o += self.q_y
        self.sl_log_sd_w = slice(o, o + self.q_w); o += self.q_w
        self.sl_corr = slice(o, o + self.n_corr); o += self.n_corr
        self.sl_z = slice(o, o + self.n_z); o += self.n_z
        self.dim = o

        priors = spec.priors
        self._beta_const = -0.5 * (LOG_2PI + 2.0 * math.log(priors.fixed_effect_sd))
        self._sd_const = _half_student_t_const(RE_SD_PRIOR_DF, priors.re_sd_scale)
        self._z_norm_const = -0.5 * LOG_2PI
        self._z_t_const = _student_t_const(self.student_df)
        # LkjCholesky(L | eta) ∝ prod_k L_kk^(q - k + 2 eta - 2), k = 2..q (1-based)
        self._lkj_coeff = np.array(
            [self.q - i + 2.0 * priors.lkj_eta - 3.0 for i in range(1, self.q)]
        )

    # --- parameter plumbing -------------------------------------------------

    def init_vector(self) -> np.ndarray:
        return np.zeros(self.dim)

    def unpack(self, x: np.ndarray) -> ParameterVector:
        if x.shape != (self.dim,):
            raise ValueError(f"parameter vector has length {x.shape}, expected ({self.dim},)")
        return ParameterVector(
            beta_y=x[self.sl_beta_y],
            beta_w=x[self.sl_beta_w],
            log_sd_y=x[self.sl_log_sd_y],
            log_sd_w=x[self.sl_log_sd_w],
            corr_chol_raw=x[self.sl_corr],
            z_re=x[self.sl_z].reshape(self.n_subjects, self.q),
        )

    def pack(self, pv: ParameterVector) -> np.ndarray:
        x = np.empty(self.dim)
        x[self.sl_beta_y] = pv.beta_y
        x[self.sl_beta_w] = pv.beta_w
        x[self.sl_log_sd_y] = pv.log_sd_y
        x[self.sl_log_sd_w] = pv.log_sd_w
        x[self.sl_corr] = pv.corr_chol_raw
        x[self.sl_z] = np.asarray(pv.z_re).reshape(-1)
        return x

    def _subject_effects(self, pv: ParameterVector) -> tuple[np.ndarray, ...]:
        sd = np.concatenate([np.exp(pv.log_sd_y), np.exp(pv.log_sd_w)])
        if self.q == 0:
            empty = np.empty((self.n_subjects, 0))
            return empty, empty, np.eye(0), sd, np.zeros((0, 0)), np.ones((0, 0))
        L, zc, sc = build_corr_chol(pv.corr_chol_raw, self.q)
        m_lz = pv.z_re @ L.T
        u = m_lz * sd
        return u, m_lz, L, sd, zc, sc

    # --- public operations ---------------------------------------------------

    def predict_linear(self, pv: ParameterVector) -> LinearPredictors:
        """Row-wise location mean and residual standard deviation."""
        u = self._subject_effects(pv)[0]
        mu = self.x_y @ pv.beta_y
        eta_w = self.x_w @ pv.beta_w
        if self.q_y:
            mu = mu + np.einsum("ij,ij->i", self.z_y, u[self.subj, : self.q_y])
        if self.q_w:
            eta_w = eta_w + np.einsum("ij,ij->i", self.z_w, u[self.subj, self.q_y :])
        return LinearPredictors(mu=mu, omega=np.exp(eta_w))

    def log_likelihood(self, pv: ParameterVector) -> float:
        value = self._loglik_terms(pv)[0]
        if not np.isfinite(value):
            raise NumericalError("log-likelihood overflowed to a non-finite value")
        return value

    def _loglik_terms(self, pv: ParameterVector):
        u = self._subject_effects(pv)[0]
        mu = self.x_y @ pv.beta_y
        eta_w = self.x_w @ pv.beta_w
        if self.q_y:
            mu = mu + np.einsum("ij,ij->i", self.z_y, u[self.subj, : self.q_y])
        if self.q_w:
            eta_w = eta_w + np.einsum("ij,ij->i", self.z_w, u[self.subj, self.q_y :])
        r = self.y - mu
        inv_w2 = np.exp(-2.0 * eta_w)
        value = float(np.sum(-0.5 * LOG_2PI - eta_w - 0.5 * r * r * inv_w2))
        return value, r, inv_w2, eta_w

    def log_prior(self, pv: ParameterVector) -> float:
        priors = self.spec.priors
        val = 0.0
        for beta in (pv.beta_y, pv.beta_w):
            val += beta.size * self._beta_const - 0.5 * float(beta @ beta) / priors.fixed_effect_sd**2
        log_sd = np.concatenate([pv.log_sd_y, pv.log_sd_w])
        if log_sd.size:
            sd2 = np.exp(2.0 * log_sd)
            val += float(
                np.sum(
                    self._sd_const
                    - 0.5
                    * (RE_SD_PRIOR_DF + 1.0)
                    * np.log1p(sd2 / (RE_SD_PRIOR_DF * priors.re_sd_scale**2))
                    + log_sd
                )
            )
        if self.q >= 2:
            L, zc, _ = build_corr_chol(pv.corr_chol_raw, self.q)
            val += self._corr_prior_value(L, zc)
        val += self._z_block_logpdf(pv.z_re[:, : self.q_y], self.family_y)
        val += self._z_block_logpdf(pv.z_re[:, self.q_y :], self.family_w)
        return val

    def _corr_prior_value(self, L: np.ndarray, zc: np.ndarray) -> float:
        """LKJ log density on the Cholesky factor plus the transform log-Jacobian.

        Returns -inf at the boundary (a partial correlation saturated at +-1),
        where the density vanishes.  The eta-dependent normalizing constant is
        omitted, as usual for sampling.
        """
        diag = np.diag(L)[1:]
        if np.any(diag <= 0.0):
            return -math.inf
        val = float(self._lkj_coeff @ np.log(diag))
        for i in range(1, self.q):
            for jj in range(i):
                one = 1.0 - zc[i, jj] * zc[i, jj]
                if one <= 0.0:
                    return -math.inf
                val += (1.0 + 0.5 * (i - 1 - jj)) * math.log(one)
        return val

    def _z_block_logpdf(self, z: np.ndarray, family: str) -> float:
        if z.size == 0:
            return 0.0
        if family == "gaussian":
            return float(z.size * self._z_norm_const - 0.5 * np.sum(z * z))
        df = self.student_df
        return float(
            z.size * self._z_t_const - 0.5 * (df + 1.0) * np.sum(np.log1p(z * z / df))
        )

    def log_posterior_and_grad(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        """Log posterior and its exact gradient; raises on non-finite output."""
        value, grad = self._logp_grad(x)
        if not np.isfinite(value):
            raise NumericalError("log posterior is non-finite")
        bad = np.flatnonzero(~np.isfinite(grad))
        if bad.size:
            raise NumericalError("gradient is non-finite", coordinate=int(bad[0]))
        return value, grad

    def log_density_and_grad(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        """Sampler-facing wrapper: non-finite evaluations become -inf leaves."""
        value, grad = self._logp_grad(x)
        if not np.isfinite(value) or not np.all(np.isfinite(grad)):
            return -np.inf, np.zeros(self.dim)
        return value, grad

    def _logp_grad(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        priors = self.spec.priors
        pv = self.unpack(x)
        grad = np.zeros(self.dim)
        u, m_lz, L, sd, zc, sc = self._subject_effects(pv)

        with np.errstate(over="ignore", invalid="ignore", under="ignore", divide="ignore"):
            mu = self.x_y @ pv.beta_y
            eta_w = self.x_w @ pv.beta_w
            if self.q_y:
                mu = mu + np.einsum("ij,ij->i", self.z_y, u[self.subj, : self.q_y])
            if self.q_w:
                eta_w = eta_w + np.einsum("ij,ij->i", self.z_w, u[self.subj, self.q_y :])
            r = self.y - mu
            inv_w2 = np.exp(-2.0 * eta_w)
            r2w = r * r * inv_w2
            value = float(np.sum(-0.5 * LOG_2PI - eta_w - 0.5 * r2w))

            g_mu = r * inv_w2
            g_eta = r2w - 1.0

            grad[self.sl_beta_y] = self.x_y.T @ g_mu
            grad[self.sl_beta_w] = self.x_w.T @ g_eta

            if self.q:
                g_u = np.empty((self.n_subjects, self.q))
                for k in range(self.q_y):
                    g_u[:, k] = np.bincount(
                        self.subj, weights=self.z_y[:, k] * g_mu, minlength=self.n_subjects
                    )
                for k in range(self.q_w):
                    g_u[:, self.q_y + k] = np.bincount(
                        self.subj, weights=self.z_w[:, k] * g_eta, minlength=self.n_subjects
                    )

                # u = (z_re @ L.T) * sd: pull back to z_re, log-sd, and L
                grad[self.sl_z] = ((g_u * sd) @ L).reshape(-1)
                grad_sd = np.einsum("ik,ik->k", g_u, m_lz)
                grad_log_sd = grad_sd * sd
                grad_corr = np.zeros(self.n_corr)
                if self.q >= 2:
                    grad_L = (g_u.T @ pv.z_re) * sd[:, None]
                    grad_L[np.arange(1, self.q), np.arange(1, self.q)] += (
                        self._lkj_coeff / np.diag(L)[1:]
                    )
                    grad_corr = corr_chol_backprop(grad_L, L, zc, sc, self.q)
                    k = 0
                    for i in range(1, self.q):
                        for jj in range(i):
                            grad_corr[k] -= (i - jj + 1.0) * zc[i, jj]
                            k += 1
                grad[self.sl_corr] = grad_corr

            # priors on fixed effects
            value += (
                (self.p_y + self.p_w) * self._beta_const
                - 0.5
                * (float(pv.beta_y @ pv.beta_y) + float(pv.beta_w @ pv.beta_w))
                / priors.fixed_effect_sd**2
            )
            grad[self.sl_beta_y] -= pv.beta_y / priors.fixed_effect_sd**2
            grad[self.sl_beta_w] -= pv.beta_w / priors.fixed_effect_sd**2

            # half-Student-t prior on sds, log parameterization
            if self.q:
                log_sd = np.concatenate([pv.log_sd_y, pv.log_sd_w])
                sd2 = sd * sd
                nu_s2 = RE_SD_PRIOR_DF * priors.re_sd_scale**2
                value += float(
                    np.sum(
                        self._sd_const
                        - 0.5 * (RE_SD_PRIOR_DF + 1.0) * np.log1p(sd2 / nu_s2)
                        + log_sd
                    )
                )
                sd_prior_grad = 1.0 - (RE_SD_PRIOR_DF + 1.0) * sd2 / (nu_s2 + sd2)
                grad_log_sd = grad_log_sd + sd_prior_grad
                grad[self.sl_log_sd_y] = grad_log_sd[: self.q_y]
                grad[self.sl_log_sd_w] = grad_log_sd[self.q_y :]

            # LKJ density and the transform Jacobian (the likelihood part of
            # the corr gradient already flowed through corr_chol_backprop)
            if self.q >= 2:
                value += self._corr_prior_value(L, zc)

            # standardized subject effects
            if self.q:
                zy = pv.z_re[:, : self.q_y]
                zw = pv.z_re[:, self.q_y :]
                value += self._z_block_logpdf(zy, self.family_y)
                value += self._z_block_logpdf(zw, self.family_w)
                gz = np.empty_like(pv.z_re)
                gz[:, : self.q_y] = self._z_block_grad(zy, self.family_y)
                gz[:, self.q_y :] = self._z_block_grad(zw, self.family_w)
                grad[self.sl_z] += gz.reshape(-1)

        return value, grad

    def _z_block_grad(self, z: np.ndarray, family: str) -> np.ndarray:
        if family == "gaussian":
            return -z
        df = self.student_df
        return -(df + 1.0) * z / (df + z * z)

    # --- reporting ------------------------------------------------------------

    def constrained_names(self) -> list[str]:
        names = [f"beta_y.{c}" for c in self.design_y.x_names]
        names += [f"beta_w.{c}" for c in self.design_w.x_names]
        for c in self.design_y.z_names:
            names.append("sd_re_location" if c == "intercept" else f"sd_re_location.{c}")
        for c in self.design_w.z_names:
            names.append("sd_re_scale" if c == "intercept" else f"sd_re_scale.{c}")
        if self.has_rho:
            names.append("rho")
        for i in range(self.n_subjects):
            for k in range(self.q):
                names.append(f"z.{i}.{k}")
        return names

    @property
    def has_rho(self) -> bool:
        return (
            self.q_y >= 1
            and self.q_w >= 1
            and self.design_y.z_names[:1] == ["intercept"]
            and self.design_w.z_names[:1] == ["intercept"]
        )

    def constrain(self, draws: np.ndarray) -> np.ndarray:
        """Map unconstrained draws (n, dim) to the named constrained scale."""
        n = draws.shape[0]
        cols: list[np.ndarray] = [
            draws[:, self.sl_beta_y],
            draws[:, self.sl_beta_w],
            np.exp(draws[:, self.sl_log_sd_y]),
            np.exp(draws[:, self.sl_log_sd_w]),
        ]
        if self.has_rho:
            rho = np.empty((n, 1))
            for t in range(n):
                L = build_corr_chol(draws[t, self.sl_corr], self.q)[0]
                rho[t, 0] = (L @ L.T)[self.q_y, 0]
            cols.append(rho)
        cols.append(draws[:, self.sl_z])
        return np.concatenate(cols, axis=1)
