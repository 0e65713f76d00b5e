import numpy as np
import pytest

from taskguard import hmm


def random_gaussian_model(rng, K, d, kind="gaussian_full", skill_id="skill"):
    means = rng.normal(size=(K, d)) * 2.0
    covs = np.empty((K, d, d))
    for k in range(K):
        A = rng.normal(size=(d, d))
        covs[k] = A @ A.T + d * np.eye(d)
    if kind == "gaussian_diag":
        covs = np.array([np.diag(np.diag(c)) for c in covs])
    elif kind == "gaussian_spherical":
        covs = np.array([np.eye(d) * (np.trace(c) / d) for c in covs])
    pi0 = rng.dirichlet(np.ones(K))
    trans = rng.dirichlet(np.ones(K), size=K)
    emission = hmm.GaussianEmission(kind=kind, means=means, covs=covs)
    return hmm.SkillModel(skill_id=skill_id, pi0=pi0, trans=trans, emission=emission)


def random_var_model(rng, K, d, order=1, skill_id="skill"):
    coefs = rng.normal(size=(K, d, d * order)) * 0.3
    covs = np.empty((K, d, d))
    for k in range(K):
        A = rng.normal(size=(d, d))
        covs[k] = A @ A.T + d * np.eye(d)
    pi0 = rng.dirichlet(np.ones(K))
    trans = rng.dirichlet(np.ones(K), size=K)
    emission = hmm.VAREmission(order=order, coefs=coefs, covs=covs)
    return hmm.SkillModel(skill_id=skill_id, pi0=pi0, trans=trans, emission=emission)


def brute_force_loglik(model, features):
    """Enumerate every mode path and sum path probabilities (oracle)."""
    import itertools

    features = np.asarray(features, dtype=float)
    T = features.shape[0]
    if T == 0:
        return 0.0
    logb = model.emission.log_density_matrix(features)
    with np.errstate(divide="ignore"):
        logpi0 = np.log(model.pi0)
        logA = np.log(model.trans)
    path_logs = []
    for path in itertools.product(range(model.K), repeat=T):
        lp = logpi0[path[0]] + logb[0, path[0]]
        for t in range(1, T):
            lp += logA[path[t - 1], path[t]] + logb[t, path[t]]
        path_logs.append(lp)
    path_logs = np.array(path_logs)
    m = path_logs.max()
    return float(m + np.log(np.exp(path_logs - m).sum()))


def sample_hmm(model, T, rng):
    """Draw one observation sequence (and its mode path) from a model."""
    K, d = model.K, model.dim
    zs = np.empty(T, dtype=int)
    ys = np.empty((T, d))
    z = rng.choice(K, p=model.pi0)
    em = model.emission
    for t in range(T):
        zs[t] = z
        if isinstance(em, hmm.VAREmission):
            if t == 0:
                hist = np.zeros(d * em.order)
            else:
                pieces = []
                for i in range(1, em.order + 1):
                    pieces.append(ys[t - i] if t - i >= 0 else ys[0])
                hist = np.concatenate(pieces)
            mean = em.coefs[z] @ hist
        else:
            mean = em.means[z]
        ys[t] = rng.multivariate_normal(mean, em.covs[z])
        z = rng.choice(K, p=model.trans[z])
    return ys, zs


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
