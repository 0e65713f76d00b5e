"""Finite HMM with Gaussian or vector-autoregressive emissions.

Provides exact likelihood evaluation through a scaled forward recursion,
maximum-likelihood training via Baum-Welch, Viterbi mode decoding, and a
value-exact text serialization for trained skill models.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.linalg import cho_factor, cho_solve

_LOG_2PI = float(np.log(2.0 * np.pi))
_ROW_SUM_TOL = 1e-10
COV_FLOOR = 1e-6

GAUSSIAN_KINDS = ("gaussian_full", "gaussian_diag", "gaussian_spherical")
VAR_KIND = "var"


class ModelError(Exception):
    """Invalid model construction or evaluation input."""


def _floor_covariance(cov, floor=COV_FLOOR):
    """Symmetrize and clamp eigenvalues at `floor`."""
    cov = 0.5 * (cov + cov.T)
    vals, vecs = np.linalg.eigh(cov)
    vals = np.maximum(vals, floor)
    return (vecs * vals) @ vecs.T


def _check_pd(cov, name):
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ModelError(f"{name} must be square")
    if not np.allclose(cov, cov.T, atol=1e-9):
        raise ModelError(f"{name} must be symmetric")
    if np.linalg.eigvalsh(cov)[0] <= 0:
        raise ModelError(f"{name} must be positive definite")
    return cov


class _GaussianCache:
    """Per-mode Cholesky factors and log-normalizers for N(mu_k, cov_k)."""

    def __init__(self, means, covs):
        self.means = means
        self.chols = []
        self.logdets = []
        for cov in covs:
            c, low = cho_factor(cov, lower=True)
            self.chols.append((c, low))
            self.logdets.append(2.0 * float(np.sum(np.log(np.diag(c)))))

    def logpdf(self, resid_k, k):
        """Log-density of residuals (n, d) under mode k's zero-mean Gaussian."""
        d = resid_k.shape[-1]
        sol = cho_solve(self.chols[k], np.atleast_2d(resid_k).T)
        quad = np.einsum("dn,dn->n", np.atleast_2d(resid_k).T, sol)
        return -0.5 * (d * _LOG_2PI + self.logdets[k] + quad)


@dataclass(frozen=True)
class GaussianEmission:
    """Per-mode Gaussian observation model (full/diag/spherical covariance)."""

    kind: str
    means: np.ndarray  # (K, d)
    covs: np.ndarray  # (K, d, d)

    def __post_init__(self):
        if self.kind not in GAUSSIAN_KINDS:
            raise ModelError(f"unknown Gaussian kind {self.kind!r}")
        object.__setattr__(self, "means", np.asarray(self.means, dtype=float))
        object.__setattr__(self, "covs", np.asarray(self.covs, dtype=float))
        for k in range(self.K):
            _check_pd(self.covs[k], f"covariance of mode {k}")
        object.__setattr__(self, "_cache", _GaussianCache(self.means, self.covs))

    @property
    def K(self):
        return self.means.shape[0]

    @property
    def dim(self):
        return self.means.shape[1]

    @property
    def order(self):
        return 0

    def log_density_matrix(self, features) -> np.ndarray:
        """(T, K) per-sample, per-mode log-densities."""
        features = np.asarray(features, dtype=float)
        T = features.shape[0]
        out = np.empty((T, self.K))
        for k in range(self.K):
            out[:, k] = self._cache.logpdf(features - self.means[k], k)
        return out


@dataclass(frozen=True)
class VAREmission:
    """Per-mode linear dynamics: y_t = A^(k) x_t + e_t, e_t ~ N(0, cov_k).

    x_t stacks the previous `order` observations (most recent first). Missing
    lags at the start of a sequence are filled by repeating the first sample.
    """

    order: int
    coefs: np.ndarray  # (K, d, d*order)
    covs: np.ndarray  # (K, d, d)

    def __post_init__(self):
        object.__setattr__(self, "coefs", np.asarray(self.coefs, dtype=float))
        object.__setattr__(self, "covs", np.asarray(self.covs, dtype=float))
        if self.order < 1:
            raise ModelError("VAR order must be >= 1")
        K, d, m = self.coefs.shape
        if m != d * self.order:
            raise ModelError(f"coef shape {self.coefs.shape} inconsistent with order {self.order}")
        for k in range(K):
            _check_pd(self.covs[k], f"noise covariance of mode {k}")
        object.__setattr__(self, "_cache", _GaussianCache(np.zeros((K, d)), self.covs))

    @property
    def kind(self):
        return VAR_KIND

    @property
    def K(self):
        return self.coefs.shape[0]

    @property
    def dim(self):
        return self.coefs.shape[1]

    def lag_matrix(self, features) -> np.ndarray:
        """(T, d*order) lag-stacked regressors with repeated-first-sample warm-up."""
        features = np.asarray(features, dtype=float)
        T, d = features.shape
        cols = []
        for i in range(1, self.order + 1):
            lagged = np.empty_like(features)
            lagged[i:] = features[:-i] if i < T else features[:0]
            lagged[:i] = features[0] if T else 0.0
            cols.append(lagged)
        return np.concatenate(cols, axis=1) if T else np.zeros((0, d * self.order))

    def log_density_matrix(self, features) -> np.ndarray:
        features = np.asarray(features, dtype=float)
        X = self.lag_matrix(features)
        T = features.shape[0]
        out = np.empty((T, self.K))
        for k in range(self.K):
            resid = features - X @ self.coefs[k].T
            out[:, k] = self._cache.logpdf(resid, k)
        return out

    def log_density_single(self, y, history) -> np.ndarray:
        """(K,) log-densities of one sample given the lag history.

        `history` lists the previous samples, most recent last; shorter
        histories are padded with their first entry (or y itself if empty).
        """
        y = np.asarray(y, dtype=float)
        hist = list(history)
        if not hist:
            hist = [y]
        while len(hist) < self.order:
            hist.insert(0, hist[0])
        x = np.concatenate([hist[-i] for i in range(1, self.order + 1)])
        resid = y[None, :] - np.einsum("kdm,m->kd", self.coefs, x)
        out = np.empty(self.K)
        for k in range(self.K):
            out[k] = self._cache.logpdf(resid[k], k)[0]
        return out


@dataclass(frozen=True)
class SkillModel:
    """HMM over sub-action modes of one skill: pi0, transition matrix, emission."""

    skill_id: str
    pi0: np.ndarray
    trans: np.ndarray
    emission: GaussianEmission | VAREmission

    def __post_init__(self):
        object.__setattr__(self, "pi0", np.asarray(self.pi0, dtype=float))
        object.__setattr__(self, "trans", np.asarray(self.trans, dtype=float))
        K = self.emission.K
        if self.pi0.shape != (K,) or self.trans.shape != (K, K):
            raise ModelError("pi0/trans shape inconsistent with emission mode count")
        if np.any(self.pi0 < 0) or np.any(self.trans < 0):
            raise ModelError("probabilities must be non-negative")
        if abs(self.pi0.sum() - 1.0) > _ROW_SUM_TOL:
            raise ModelError("pi0 must sum to 1")
        rows = self.trans.sum(axis=1)
        if np.any(np.abs(rows - 1.0) > _ROW_SUM_TOL):
            raise ModelError("transition rows must sum to 1")

    @property
    def K(self):
        return self.emission.K

    @property
    def dim(self):
        return self.emission.dim


def emission_logdensity(model: SkillModel, history, y, k) -> float:
    """Log-density (nats) of one observation under mode k.

    `history` supplies the lagged samples for VAR emissions and is ignored
    for Gaussian kinds.
    """
    y = np.asarray(y, dtype=float)
    em = model.emission
    if isinstance(em, VAREmission):
        return float(em.log_density_single(y, history)[k])
    return float(em.log_density_matrix(y[None, :])[0, k])


def _check_features(model, features):
    features = np.atleast_2d(np.asarray(features, dtype=float))
    if features.size and features.shape[1] != model.dim:
        raise ModelError(
            f"feature dimension {features.shape[1]} != model dimension {model.dim}"
        )
    return features


@dataclass
class ForwardState:
    """Resumable scaled-forward state: normalized filter and accumulated log-scale."""

    alpha: np.ndarray | None = None  # None before the first observation
    logscale: float = 0.0
    history: list = field(default_factory=list)  # last `order` samples for VAR

    @property
    def loglik(self) -> float:
        return self.logscale


def forward_step(model: SkillModel, state: ForwardState, y) -> ForwardState:
    """Advance the scaled forward recursion by one observation (in place)."""
    y = np.asarray(y, dtype=float)
    if isinstance(model.emission, VAREmission):
        logb = model.emission.log_density_single(y, state.history)
        state.history.append(y)
        if len(state.history) > model.emission.order:
            del state.history[0]
    else:
        logb = model.emission.log_density_matrix(y[None, :])[0]
    prior = model.pi0 if state.alpha is None else state.alpha @ model.trans
    # Combine in log space so extreme samples (collisions can sit thousands
    # of nats from every mode) cannot underflow the filter to zero.
    with np.errstate(divide="ignore"):
        logw = np.log(prior) + logb
    shift = np.max(logw)
    if not np.isfinite(shift):
        raise ModelError("forward step underflow: no mode supports the observation")
    weighted = np.exp(logw - shift)
    total = weighted.sum()
    state.alpha = weighted / total
    state.logscale += float(np.log(total) + shift)
    return state


def forward_lcurve(model: SkillModel, features) -> np.ndarray:
    """Per-prefix cumulative log-likelihoods L_1..L_T (L_0 = 0 omitted)."""
    features = _check_features(model, features)
    T = features.shape[0]
    if T == 0:
        return np.zeros(0)
    logb = model.emission.log_density_matrix(features)
    out = np.empty(T)
    alpha = None
    logscale = 0.0
    for t in range(T):
        prior = model.pi0 if alpha is None else alpha @ model.trans
        with np.errstate(divide="ignore"):
            logw = np.log(prior) + logb[t]
        shift = np.max(logw)
        if not np.isfinite(shift):
            raise ModelError("forward recursion underflow")
        weighted = np.exp(logw - shift)
        total = weighted.sum()
        alpha = weighted / total
        logscale += float(np.log(total) + shift)
        out[t] = logscale
    return out


def forward_loglik(model: SkillModel, features) -> float:
    """log P(y_1..y_T | model); 0.0 for the empty sequence."""
    features = _check_features(model, features)
    if features.shape[0] == 0:
        return 0.0
    return float(forward_lcurve(model, features)[-1])


def viterbi_modes(model: SkillModel, features) -> np.ndarray:
    """Argmax joint-probability mode path; ties break toward lower mode index."""
    features = _check_features(model, features)
    T = features.shape[0]
    if T == 0:
        raise ModelError("viterbi requires a non-empty trial")
    with np.errstate(divide="ignore"):
        logpi0 = np.log(model.pi0)
        logA = np.log(model.trans)
    logb = model.emission.log_density_matrix(features)
    delta = logpi0 + logb[0]
    back = np.zeros((T, model.K), dtype=int)
    for t in range(1, T):
        cand = delta[:, None] + logA
        back[t] = np.argmax(cand, axis=0)  # first (lowest) argmax on ties
        delta = cand[back[t], np.arange(model.K)] + logb[t]
    path = np.empty(T, dtype=int)
    path[-1] = int(np.argmax(delta))
    for t in range(T - 1, 0, -1):
        path[t - 1] = back[t, path[t]]
    return path


@dataclass(frozen=True)
class FitConfig:
    """Baum-Welch settings."""

    max_iter: int = 100
    tol: float = 1e-5
    seed: int = 0
    var_order: int = 1
    cov_floor: float = COV_FLOOR


@dataclass(frozen=True)
class FitResult:
    model: SkillModel
    logliks: tuple[float, ...]  # total data log-likelihood per EM iteration


def _kmeans_pp_init(vectors, K, rng):
    """Seeded k-means++ center selection plus a few Lloyd refinements."""
    n = vectors.shape[0]
    centers = [vectors[rng.integers(n)]]
    for _ in range(1, K):
        d2 = np.min(
            [np.sum((vectors - c) ** 2, axis=1) for c in centers], axis=0
        )
        total = d2.sum()
        if total <= 0:
            centers.append(vectors[rng.integers(n)])
            continue
        centers.append(vectors[rng.choice(n, p=d2 / total)])
    centers = np.array(centers)
    for _ in range(10):
        d2 = ((vectors[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        assign = np.argmin(d2, axis=1)
        for k in range(K):
            sel = assign == k
            if sel.any():
                centers[k] = vectors[sel].mean(axis=0)
    return centers, assign


def _gaussian_mstep(kind, features, gamma, cov_floor):
    d = features.shape[1]
    K = gamma.shape[1]
    weights = gamma.sum(axis=0)
    means = (gamma.T @ features) / weights[:, None]
    covs = np.empty((K, d, d))
    for k in range(K):
        resid = features - means[k]
        cov = (gamma[:, k][:, None] * resid).T @ resid / weights[k]
        if kind == "gaussian_diag":
            cov = np.diag(np.diag(cov))
        elif kind == "gaussian_spherical":
            cov = np.eye(d) * (np.trace(cov) / d)
        covs[k] = _floor_covariance(cov, cov_floor)
    return GaussianEmission(kind=kind, means=means, covs=covs)


def _var_mstep(order, features, lags, gamma, cov_floor):
    d = features.shape[1]
    m = d * order
    K = gamma.shape[1]
    coefs = np.empty((K, d, m))
    covs = np.empty((K, d, d))
    ridge = 1e-8 * np.eye(m)
    for k in range(K):
        w = gamma[:, k]
        Sxx = (w[:, None] * lags).T @ lags + ridge
        Syx = (w[:, None] * features).T @ lags
        coefs[k] = np.linalg.solve(Sxx, Syx.T).T
        resid = features - lags @ coefs[k].T
        cov = (w[:, None] * resid).T @ resid / w.sum()
        covs[k] = _floor_covariance(cov, cov_floor)
    return VAREmission(order=order, coefs=coefs, covs=covs)


def _forward_backward(model, features):
    """Scaled forward-backward. Returns (loglik, gamma, xi_sum, first_gamma)."""
    T = features.shape[0]
    K = model.K
    logb = model.emission.log_density_matrix(features)
    shift = logb.max(axis=1)
    b = np.exp(logb - shift[:, None])
    alpha = np.empty((T, K))
    scale = np.empty(T)
    alpha[0] = model.pi0 * b[0]
    scale[0] = alpha[0].sum()
    alpha[0] /= scale[0]
    for t in range(1, T):
        alpha[t] = (alpha[t - 1] @ model.trans) * b[t]
        scale[t] = alpha[t].sum()
        alpha[t] /= scale[t]
    beta = np.empty((T, K))
    beta[-1] = 1.0
    xi_sum = np.zeros((K, K))
    for t in range(T - 2, -1, -1):
        beta[t] = (model.trans @ (b[t + 1] * beta[t + 1])) / scale[t + 1]
        xi = (
            alpha[t][:, None]
            * model.trans
            * (b[t + 1] * beta[t + 1])[None, :]
            / scale[t + 1]
        )
        xi_sum += xi
    gamma = alpha * beta
    gamma /= gamma.sum(axis=1, keepdims=True)
    loglik = float(np.sum(np.log(scale)) + np.sum(shift))
    return loglik, gamma, xi_sum, gamma[0]


def baum_welch_fit(
    data, K, kind="gaussian_full", config: FitConfig | None = None, skill_id=None
) -> FitResult:
    """Fit a SkillModel by EM on a TrialSet (or list of feature arrays).

    Empty modes (total responsibility < 1e-8) are re-seeded at a random
    training sample instead of failing.
    """
    config = config or FitConfig()
    if hasattr(data, "feature_arrays"):
        skill_id = skill_id or data.skill_id
        seqs = data.feature_arrays()
    else:
        seqs = [np.asarray(s, dtype=float) for s in data]
    skill_id = skill_id or "skill"
    seqs = [s for s in seqs if s.shape[0] > 0]
    if not seqs:
        raise ModelError("no training data")
    d = seqs[0].shape[1]
    allfeat = np.concatenate(seqs, axis=0)
    if allfeat.shape[0] < K:
        raise ModelError("total sample count must be >= K")
    rng = np.random.default_rng(config.seed)

    order = config.var_order
    if kind == VAR_KIND:
        for s in seqs:
            if s.shape[0] <= order:
                raise ModelError("every trial must be longer than the VAR order")

    # Initialization: k-means++ clustering on feature vectors (lag-stacked for VAR).
    if kind == VAR_KIND:
        lag_arrays = []
        dummy = VAREmission(order=order, coefs=np.zeros((1, d, d * order)), covs=np.eye(d)[None])
        for s in seqs:
            lag_arrays.append(dummy.lag_matrix(s))
        alllags = np.concatenate(lag_arrays, axis=0)
        stacked = np.concatenate([allfeat, alllags], axis=1)
        _, assign = _kmeans_pp_init(stacked, K, rng)
        gamma0 = np.full((allfeat.shape[0], K), 1e-3)
        gamma0[np.arange(allfeat.shape[0]), assign] = 1.0
        emission = _var_mstep(order, allfeat, alllags, gamma0, config.cov_floor)
    else:
        centers, assign = _kmeans_pp_init(allfeat, K, rng)
        gamma0 = np.full((allfeat.shape[0], K), 1e-3)
        gamma0[np.arange(allfeat.shape[0]), assign] = 1.0
        emission = _gaussian_mstep(kind, allfeat, gamma0, config.cov_floor)

    pi0 = np.full(K, 1.0 / K)
    trans = np.full((K, K), 0.1 / max(K - 1, 1))
    np.fill_diagonal(trans, 0.9 if K > 1 else 1.0)
    trans /= trans.sum(axis=1, keepdims=True)
    model = SkillModel(skill_id=skill_id, pi0=pi0, trans=trans, emission=emission)

    logliks = []
    for _ in range(config.max_iter):
        total_ll = 0.0
        gamma_all = []
        xi_total = np.zeros((K, K))
        first_total = np.zeros(K)
        for s in seqs:
            ll, gamma, xi_sum, first = _forward_backward(model, s)
            total_ll += ll
            gamma_all.append(gamma)
            xi_total += xi_sum
            first_total += first
        logliks.append(total_ll)
        gamma_cat = np.concatenate(gamma_all, axis=0)

        # Re-seed modes that lost all responsibility.
        occupancy = gamma_cat.sum(axis=0)
        for k in np.flatnonzero(occupancy < 1e-8):
            j = rng.integers(gamma_cat.shape[0])
            gamma_cat[j] = 0.0
            gamma_cat[j, k] = 1.0
            occupancy = gamma_cat.sum(axis=0)

        pi0 = first_total / first_total.sum()
        trans = xi_total + 1e-12
        trans /= trans.sum(axis=1, keepdims=True)
        if kind == VAR_KIND:
            emission = _var_mstep(order, allfeat, alllags, gamma_cat, config.cov_floor)
        else:
            emission = _gaussian_mstep(kind, allfeat, gamma_cat, config.cov_floor)
        model = SkillModel(skill_id=skill_id, pi0=pi0, trans=trans, emission=emission)
        if len(logliks) >= 2 and abs(logliks[-1] - logliks[-2]) < config.tol * (
            1.0 + abs(logliks[-2])
        ):
            break
    return FitResult(model=model, logliks=tuple(logliks))


# ---------------------------------------------------------------------------
# Serialization: structured text, value-exact round trip at 17 significant digits.

def _fmt_matrix(name, mat, fh):
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    fh.write(f"{name} {mat.shape[0]} {mat.shape[1]}\n")
    for row in mat:
        fh.write(" ".join(f"{v:.17g}" for v in row) + "\n")


def save_model(model: SkillModel, path):
    """Write a SkillModel as structured text (see load_model)."""
    em = model.emission
    with open(path, "w") as fh:
        fh.write(f"skill {model.skill_id}\n")
        fh.write(f"kind {em.kind}\n")
        fh.write(f"K {model.K}\n")
        fh.write(f"dim {model.dim}\n")
        fh.write(f"order {getattr(em, 'order', 0)}\n")
        _fmt_matrix("pi0", model.pi0, fh)
        _fmt_matrix("trans", model.trans, fh)
        if em.kind == VAR_KIND:
            for k in range(model.K):
                _fmt_matrix(f"coef{k}", em.coefs[k], fh)
                _fmt_matrix(f"cov{k}", em.covs[k], fh)
        else:
            _fmt_matrix("means", em.means, fh)
            for k in range(model.K):
                _fmt_matrix(f"cov{k}", em.covs[k], fh)


def _read_matrix(lines, idx, name):
    parts = lines[idx].split()
    if parts[0] != name:
        raise ModelError(f"expected matrix {name!r}, found {parts[0]!r}")
    rows, cols = int(parts[1]), int(parts[2])
    mat = np.array(
        [[float(v) for v in lines[idx + 1 + r].split()] for r in range(rows)]
    )
    if mat.shape != (rows, cols):
        raise ModelError(f"matrix {name!r} shape mismatch")
    return mat, idx + 1 + rows


def load_model(path) -> SkillModel:
    with open(path) as fh:
        lines = [ln.rstrip("\n") for ln in fh if ln.strip()]
    header = {}
    idx = 0
    for key in ("skill", "kind", "K", "dim", "order"):
        tag, value = lines[idx].split(None, 1)
        if tag != key:
            raise ModelError(f"expected header {key!r}, found {tag!r}")
        header[key] = value
        idx += 1
    K = int(header["K"])
    kind = header["kind"]
    pi0, idx = _read_matrix(lines, idx, "pi0")
    trans, idx = _read_matrix(lines, idx, "trans")
    if kind == VAR_KIND:
        coefs, covs = [], []
        for k in range(K):
            c, idx = _read_matrix(lines, idx, f"coef{k}")
            coefs.append(c)
            s, idx = _read_matrix(lines, idx, f"cov{k}")
            covs.append(s)
        emission = VAREmission(
            order=int(header["order"]), coefs=np.array(coefs), covs=np.array(covs)
        )
    else:
        means, idx = _read_matrix(lines, idx, "means")
        covs = []
        for k in range(K):
            s, idx = _read_matrix(lines, idx, f"cov{k}")
            covs.append(s)
        emission = GaussianEmission(kind=kind, means=means, covs=np.array(covs))
    return SkillModel(
        skill_id=header["skill"], pi0=pi0.ravel(), trans=trans, emission=emission
    )
