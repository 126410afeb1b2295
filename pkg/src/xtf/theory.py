"""Numerical lab for the gradient-alignment story behind token filtering.

Works over explicit finite populations of score vectors: a core component
and a noise component mixed with weight eps, and a selector that drops core
mass at rate alpha and keeps noise mass at rate beta. Every identity and
bound is evaluated two ways: closed form versus direct computation from the
mixture gradients, under an arbitrary SPD preconditioner (identity or a
damped second-moment "Fisher" matrix).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .data import subseed


class GeometryError(ValueError):
    """Preconditioner is not symmetric positive definite."""


class SingularityError(ValueError):
    """Undamped second-moment matrix is rank deficient."""


class DegenerateSelectorError(ValueError):
    """Selector keeps no mass (Z_fil = 0) or the core gradient vanishes."""


class PreconditionError(ValueError):
    """A stated precondition (e.g. the step-radius bound) is violated."""


class Geometry:
    """Cached SPD factorization: inner products and solves in the M^-1 metric."""

    def __init__(self, M: np.ndarray):
        M = np.asarray(M, dtype=np.float64)
        if M.ndim != 2 or M.shape[0] != M.shape[1]:
            raise GeometryError(f"preconditioner must be square, got {M.shape}")
        if not np.allclose(M, M.T, atol=1e-10):
            raise GeometryError("preconditioner must be symmetric")
        try:
            self._factor = cho_factor(M)
        except np.linalg.LinAlgError as exc:
            raise GeometryError(f"preconditioner is not positive definite: {exc}") from exc
        self.M = M

    def solve(self, b: np.ndarray) -> np.ndarray:
        return cho_solve(self._factor, b)

    def inner(self, x: np.ndarray, y: np.ndarray) -> float:
        return float(x @ self.solve(y))

    def norm_sq(self, x: np.ndarray) -> float:
        return self.inner(x, x)


def damped_fisher(phis: np.ndarray, weights: np.ndarray, lam: float) -> np.ndarray:
    """Weighted second moment of the score population plus lam * I,
    symmetrized by averaging with its transpose."""
    phis = np.asarray(phis, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if phis.ndim != 2 or phis.shape[0] == 0:
        raise ValueError("need a non-empty (n, d) score population")
    F = (phis * weights[:, None]).T @ phis + lam * np.eye(phis.shape[1])
    F = (F + F.T) / 2.0
    eigs = np.linalg.eigvalsh(F)
    if eigs[0] <= 1e-12 * max(1.0, eigs[-1]):
        raise SingularityError(
            f"damped second moment is numerically singular (min eigenvalue {eigs[0]:.3e}); "
            "increase the damping"
        )
    return F


@dataclass(frozen=True)
class PreconditionerSpec:
    mode: str = "identity"  # identity | damped_fisher
    lam: float = 1e-3

    def build(self, spec: "MixtureSpec") -> np.ndarray:
        if self.mode == "identity":
            return np.eye(spec.dim)
        if self.mode == "damped_fisher":
            phis = np.vstack([spec.core_vectors, spec.noise_vectors])
            weights = np.concatenate(
                [(1.0 - spec.eps) * spec.core_weights, spec.eps * spec.noise_weights]
            )
            return damped_fisher(phis, weights, self.lam)
        raise ValueError(f"unknown preconditioner mode {self.mode!r}")


@dataclass
class MixtureSpec:
    """Core/noise score populations plus selector and bias parameters."""

    dim: int
    eps: float
    alpha: float
    beta: float
    core_vectors: np.ndarray  # (n_core, dim)
    core_weights: np.ndarray  # positive, sums to 1
    noise_vectors: np.ndarray
    noise_weights: np.ndarray
    rho_c: float = 0.0
    rho_n: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("core_weights", "noise_weights"):
            w = np.asarray(getattr(self, name), dtype=np.float64)
            if np.any(w <= 0):
                raise ValueError(f"{name} must be strictly positive")
            setattr(self, name, w / w.sum())
        self.core_vectors = np.asarray(self.core_vectors, dtype=np.float64)
        self.noise_vectors = np.asarray(self.noise_vectors, dtype=np.float64)
        if not 0.0 <= self.eps < 1.0:
            raise ValueError("eps must be in [0, 1)")
        if min(self.alpha, self.beta) < 0 or max(self.alpha, self.beta) > 1:
            raise ValueError("alpha and beta must be in [0, 1]")

    @property
    def selector_skill(self) -> float:
        return 1.0 - self.alpha - self.beta


def random_mixture(
    seed: int,
    dim: int = 8,
    eps: float | None = None,
    alpha: float | None = None,
    beta: float | None = None,
    rho_c: float = 0.0,
    rho_n: float = 0.0,
) -> MixtureSpec:
    rng = np.random.default_rng(seed)
    n_core = int(rng.integers(3, 8))
    n_noise = int(rng.integers(3, 8))
    return MixtureSpec(
        dim=dim,
        eps=float(rng.uniform(0.05, 0.8)) if eps is None else eps,
        alpha=float(rng.uniform(0.0, 0.45)) if alpha is None else alpha,
        beta=float(rng.uniform(0.0, 0.45)) if beta is None else beta,
        core_vectors=rng.normal(size=(n_core, dim)),
        core_weights=rng.uniform(0.2, 1.0, size=n_core),
        noise_vectors=rng.normal(size=(n_noise, dim)),
        noise_weights=rng.uniform(0.2, 1.0, size=n_noise),
        rho_c=rho_c,
        rho_n=rho_n,
        seed=seed,
    )


@dataclass
class MixtureGradients:
    g_core: np.ndarray
    g_noise: np.ndarray
    g_train: np.ndarray
    g_fil: np.ndarray
    z_fil: float


def _unit_in_metric(rng: np.random.Generator, geo: Geometry, dim: int) -> np.ndarray:
    u = rng.normal(size=dim)
    return u / np.sqrt(geo.norm_sq(u))


def mixture_gradients(spec: MixtureSpec, mode: str = "strong", M: np.ndarray | None = None) -> MixtureGradients:
    """Population gradients and the renormalized filtered gradient.

    Strong mode assumes the selector is independent of the token given its
    component. Weak mode perturbs each selected-component mean by a seeded
    random direction whose M^-1 norm is exactly rho * the core gradient's.
    """
    a, b = 1.0 - spec.eps, spec.eps
    z_fil = a * (1.0 - spec.alpha) + b * spec.beta
    if z_fil <= 0.0:
        raise DegenerateSelectorError(f"selector keeps no mass: Z_fil = {z_fil}")
    g_core = spec.core_weights @ spec.core_vectors
    g_noise = spec.noise_weights @ spec.noise_vectors
    g_train = a * g_core + b * g_noise
    if mode == "strong":
        g_core_sel, g_noise_sel = g_core, g_noise
    elif mode == "weak":
        if M is None:
            raise ValueError("weak-bias mode needs the preconditioner to scale the bias norms")
        geo = Geometry(M)
        norm_core = np.sqrt(geo.norm_sq(g_core))
        rng_c = np.random.default_rng(subseed(spec.seed, "bias-core"))
        rng_n = np.random.default_rng(subseed(spec.seed, "bias-noise"))
        g_core_sel = g_core + spec.rho_c * norm_core * _unit_in_metric(rng_c, geo, spec.dim)
        g_noise_sel = g_noise + spec.rho_n * norm_core * _unit_in_metric(rng_n, geo, spec.dim)
    else:
        raise ValueError(f"unknown selector mode {mode!r}")
    g_fil = (a * (1.0 - spec.alpha) * g_core_sel + b * spec.beta * g_noise_sel) / z_fil
    return MixtureGradients(g_core, g_noise, g_train, g_fil, z_fil)


def alignment(g_core: np.ndarray, g: np.ndarray, M: np.ndarray) -> float:
    """Inner product between the ideal descent direction and g in the M^-1
    metric, via an SPD solve (never an explicit inverse)."""
    return Geometry(M).inner(g_core, g)


def alignment_gain_exact(spec: MixtureSpec, M: np.ndarray) -> dict:
    """Closed-form alignment gain versus the direct difference of alignments."""
    geo = Geometry(M)
    grads = mixture_gradients(spec, "strong")
    a, b = 1.0 - spec.eps, spec.eps
    core_sq = geo.norm_sq(grads.g_core)
    cross = geo.inner(grads.g_core, grads.g_noise)
    formula = a * b * spec.selector_skill / grads.z_fil * (core_sq - cross)
    direct = geo.inner(grads.g_core, grads.g_fil) - geo.inner(grads.g_core, grads.g_train)
    return {"gain_formula": formula, "gain_direct": direct}


def coherence(spec: MixtureSpec, M: np.ndarray) -> float:
    """zeta estimate: <g_core, g_noise> / ||g_core||^2 in the M^-1 metric."""
    geo = Geometry(M)
    grads = mixture_gradients(spec, "strong")
    core_sq = geo.norm_sq(grads.g_core)
    if core_sq == 0.0:
        raise DegenerateSelectorError("core gradient vanishes; coherence undefined")
    return geo.inner(grads.g_core, grads.g_noise) / core_sq


def alignment_gain_lower_bound(spec: MixtureSpec, M: np.ndarray) -> dict:
    """Strong-selector lower bound with zeta set to its estimate (tight)."""
    geo = Geometry(M)
    grads = mixture_gradients(spec, "strong")
    a, b = 1.0 - spec.eps, spec.eps
    core_sq = geo.norm_sq(grads.g_core)
    if core_sq == 0.0:
        raise DegenerateSelectorError("core gradient vanishes")
    zeta = geo.inner(grads.g_core, grads.g_noise) / core_sq
    bound = a * b * spec.selector_skill * (1.0 - zeta) / grads.z_fil * core_sq
    direct = alignment_gain_exact(spec, M)["gain_direct"]
    return {"bound": bound, "gain_direct": direct, "zeta": zeta, "holds": direct >= bound - 1e-12}


def weak_bias_gain_bound(spec: MixtureSpec, M: np.ndarray) -> dict:
    """Bias-robust lower bound; positive whenever the selection-bias term is
    dominated by the strong-selector gain."""
    geo = Geometry(M)
    strong = mixture_gradients(spec, "strong")
    weak = mixture_gradients(spec, "weak", M)
    a, b = 1.0 - spec.eps, spec.eps
    core_sq = geo.norm_sq(strong.g_core)
    if core_sq == 0.0:
        raise DegenerateSelectorError("core gradient vanishes")
    zeta = geo.inner(strong.g_core, strong.g_noise) / core_sq
    gain_term = a * b * spec.selector_skill * (1.0 - zeta)
    bias_term = a * (1.0 - spec.alpha) * spec.rho_c + b * spec.beta * spec.rho_n
    lower_bound = (gain_term - bias_term) / strong.z_fil * core_sq
    gain_direct = geo.inner(strong.g_core, weak.g_fil) - geo.inner(strong.g_core, weak.g_train)
    return {
        "lower_bound": lower_bound,
        "gain_direct": gain_direct,
        "positivity_condition": gain_term > bias_term,
        "holds": gain_direct >= lower_bound - 1e-9,
    }


# ---------------------------------------------------------------------------
# One-step comparison on a quadratic ideal risk
# ---------------------------------------------------------------------------


@dataclass
class OneStepScenario:
    """Quadratic ideal risk 0.5 (theta - theta*)^T H (theta - theta*), chosen
    so its gradient at theta equals minus the mixture's core gradient."""

    H: np.ndarray
    theta: np.ndarray
    theta_star: np.ndarray
    radius: float

    @property
    def smoothness(self) -> float:
        return float(np.linalg.eigvalsh(self.H)[-1])

    def loss(self, theta: np.ndarray) -> float:
        d = theta - self.theta_star
        return 0.5 * float(d @ self.H @ d)


def make_one_step_scenario(seed: int, spec: MixtureSpec, radius: float = 1e6) -> OneStepScenario:
    rng = np.random.default_rng(seed)
    A = rng.normal(size=(spec.dim, spec.dim))
    H = A.T @ A / spec.dim + 0.5 * np.eye(spec.dim)
    theta = rng.normal(size=spec.dim)
    g_core = mixture_gradients(spec, "strong").g_core
    theta_star = theta + np.linalg.solve(H, g_core)
    return OneStepScenario(H, theta, theta_star, radius)


def one_step_compare(scenario: OneStepScenario, spec: MixtureSpec, M: np.ndarray, eta: float) -> dict:
    """Take one preconditioned step per arm from the same point and compare.

    Checks the per-arm descent inequality with L = lambda_max(H) and the
    filtered-minus-unfiltered difference against
        -eta * gain + (L/2) * eta^2 * (||step_fil||^2 + ||step_train||^2),
    whose zero crossing gives the small-step threshold eta_max.
    """
    geo = Geometry(M)
    grads = mixture_gradients(spec, "strong")
    step_fil = -geo.solve(grads.g_fil)
    step_train = -geo.solve(grads.g_train)
    n_fil = float(step_fil @ step_fil)
    n_train = float(step_train @ step_train)
    max_norm = max(np.sqrt(n_fil), np.sqrt(n_train))
    if eta * max_norm > scenario.radius:
        raise PreconditionError(
            f"step {eta * max_norm:.3e} exceeds the local radius {scenario.radius:.3e}"
        )
    L = scenario.smoothness
    align_fil = geo.inner(grads.g_core, grads.g_fil)
    align_train = geo.inner(grads.g_core, grads.g_train)
    gain = align_fil - align_train
    eta_max = min(
        2.0 * gain / (L * (n_fil + n_train)) if gain > 0 else 0.0,
        scenario.radius / max_norm,
    )
    loss_0 = scenario.loss(scenario.theta)
    loss_fil = scenario.loss(scenario.theta - eta * step_fil)
    loss_train = scenario.loss(scenario.theta - eta * step_train)
    bound_rhs = -eta * gain + 0.5 * L * eta**2 * (n_fil + n_train)
    tol = 1e-12 * max(1.0, abs(loss_0))
    return {
        "loss_fil": loss_fil,
        "loss_train": loss_train,
        "loss_start": loss_0,
        "gain": gain,
        "eta_max": eta_max,
        "bound_rhs": bound_rhs,
        "descent_ok_fil": loss_fil <= loss_0 - eta * align_fil + 0.5 * L * eta**2 * n_fil + tol,
        "descent_ok_train": loss_train <= loss_0 - eta * align_train + 0.5 * L * eta**2 * n_train + tol,
        "difference_ok": loss_fil - loss_train <= bound_rhs + tol,
    }


# ---------------------------------------------------------------------------
# High-confidence (low-novelty) token bounds in the Fisher geometry
# ---------------------------------------------------------------------------


@dataclass
class KNBoundScenario:
    """Toy softmax model: logits z = W x, scores taken w.r.t. the context
    vector, so the per-logit gradient norm is bounded by W's max row norm."""

    W: np.ndarray  # (n_tokens, dim)
    contexts: np.ndarray  # (n_pairs, dim)
    tokens: np.ndarray  # (n_pairs,)
    weights: np.ndarray  # (n_pairs,), sums to 1
    delta: float
    lam: float = 1e-3

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.weights = self.weights / self.weights.sum()
        if not 0.0 < self.delta < 1.0:
            raise ValueError("delta must be in (0, 1)")

    @property
    def logit_lipschitz(self) -> float:
        return float(np.max(np.linalg.norm(self.W, axis=1)))


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max())
    return e / e.sum()


def kn_scores(scenario: KNBoundScenario) -> tuple[np.ndarray, np.ndarray]:
    """Per-pair score vectors phi = W^T (e_t - p) and probabilities p_t."""
    n, d = scenario.contexts.shape
    phis = np.empty((n, d))
    probs = np.empty(n)
    for i in range(n):
        p = _softmax(scenario.W @ scenario.contexts[i])
        t = scenario.tokens[i]
        e = np.zeros(scenario.W.shape[0])
        e[t] = 1.0
        phis[i] = scenario.W.T @ (e - p)
        probs[i] = p[t]
    return phis, probs


def kn_fisher(scenario: KNBoundScenario) -> np.ndarray:
    """Model-expectation Fisher over contexts: for each context, the exact
    sum over all tokens weighted by the model's own probabilities."""
    d = scenario.contexts.shape[1]
    F = np.zeros((d, d))
    for i in range(scenario.contexts.shape[0]):
        p = _softmax(scenario.W @ scenario.contexts[i])
        # phi for token k is W^T (e_k - p); accumulate sum_k p_k phi_k phi_k^T
        diffs = np.eye(scenario.W.shape[0]) - p[None, :]
        phis_c = diffs @ scenario.W  # row k = phi_k^T
        F += scenario.weights[i] * (phis_c * p[:, None]).T @ phis_c
    F += scenario.lam * np.eye(d)
    return (F + F.T) / 2.0


def kn_bounds_check(scenario: KNBoundScenario) -> dict:
    """Verify the score-norm bounds and the vanishing-contribution bounds for
    the high-confidence pair set."""
    phis, probs = kn_scores(scenario)
    F = kn_fisher(scenario)
    eigs = np.linalg.eigvalsh(F)
    mu = float(eigs[0])
    geo = Geometry(F)
    lz = scenario.logit_lipschitz
    factor = 2.0 * lz / np.sqrt(mu)
    tol = 1e-9

    euclid_viol = 0.0
    fisher_viol = 0.0
    for i in range(phis.shape[0]):
        slack = 1.0 - probs[i]
        euclid_viol = max(euclid_viol, float(np.linalg.norm(phis[i])) - 2.0 * lz * slack)
        fisher_viol = max(fisher_viol, np.sqrt(geo.norm_sq(phis[i])) - factor * slack)

    kn_set = probs >= 1.0 - scenario.delta
    mass = float(scenario.weights[kn_set].sum())
    result = {
        "mu": mu,
        "logit_lipschitz": lz,
        "kn_mass": mass,
        "score_bound_ok": euclid_viol <= tol and fisher_viol <= tol,
        "euclid_violation": euclid_viol,
        "fisher_violation": fisher_viol,
        "vacuous": not bool(kn_set.any()),
    }
    if result["vacuous"]:
        result["contribution_bound_ok"] = True
        result["alignment_impact_ok"] = True
        return result
    contribution = (scenario.weights[kn_set, None] * phis[kn_set]).sum(axis=0)
    contribution_norm = np.sqrt(geo.norm_sq(contribution))
    contribution_bound = factor * scenario.delta * mass
    g_train = (scenario.weights[:, None] * phis).sum(axis=0)
    g_rest = (scenario.weights[~kn_set, None] * phis[~kn_set]).sum(axis=0)
    impact = abs(geo.inner(g_train, g_train) - geo.inner(g_train, g_rest))
    impact_bound = contribution_bound * np.sqrt(geo.norm_sq(g_train))
    result.update(
        {
            "contribution_norm": contribution_norm,
            "contribution_bound": contribution_bound,
            "contribution_bound_ok": contribution_norm <= contribution_bound + tol,
            "alignment_impact": impact,
            "alignment_impact_bound": impact_bound,
            "alignment_impact_ok": impact <= impact_bound + tol,
        }
    )
    return result


def make_kn_scenario(seed: int, dim: int = 8, n_low: int = 14, n_high: int = 6, delta: float = 0.05) -> KNBoundScenario:
    """Pairs with controlled confidence: high-confidence contexts are built
    by inverting W on a spiked logit vector, the rest are random."""
    rng = np.random.default_rng(seed)
    W = rng.normal(size=(dim, dim))
    while abs(np.linalg.det(W)) < 1e-6:
        W = rng.normal(size=(dim, dim))
    contexts = []
    tokens = []
    target_p = 1.0 - delta / 2.0
    spike = np.log((dim - 1) * target_p / (1.0 - target_p))
    for _ in range(n_high):
        t = int(rng.integers(dim))
        z = np.zeros(dim)
        z[t] = spike
        contexts.append(np.linalg.solve(W, z))
        tokens.append(t)
    for _ in range(n_low):
        contexts.append(rng.normal(size=dim) * 0.3)
        tokens.append(int(rng.integers(dim)))
    n = n_high + n_low
    return KNBoundScenario(
        W=W,
        contexts=np.array(contexts),
        tokens=np.array(tokens),
        weights=np.full(n, 1.0 / n),
        delta=delta,
    )


# ---------------------------------------------------------------------------
# Full verification sweep
# ---------------------------------------------------------------------------


def _preconditioners(spec: MixtureSpec, lam: float = 1e-3) -> list[tuple[str, np.ndarray]]:
    return [
        ("identity", PreconditionerSpec("identity").build(spec)),
        ("damped_fisher", PreconditionerSpec("damped_fisher", lam).build(spec)),
    ]


def verify_theory(seed: int = 0) -> dict:
    """Run every check batch; returns per-check instance counts, the largest
    violation seen, and pass flags."""
    checks: list[dict] = []

    def add(name: str, instances: int, max_violation: float, ok: bool) -> None:
        checks.append(
            {"name": name, "instances": instances, "max_violation": max_violation, "pass": bool(ok)}
        )

    # exact alignment-gain identity, both preconditioners
    worst = 0.0
    for i in range(200):
        spec = random_mixture(subseed(seed, f"exact-{i}"))
        for _, M in _preconditioners(spec):
            r = alignment_gain_exact(spec, M)
            rel = abs(r["gain_formula"] - r["gain_direct"]) / (1.0 + abs(r["gain_direct"]))
            worst = max(worst, rel)
    add("alignment_gain_exact_identity", 200, worst, worst <= 1e-9)

    # edge cases: no noise, and a skill-less selector
    worst = 0.0
    for i in range(50):
        spec = random_mixture(subseed(seed, f"edge-eps-{i}"), eps=0.0)
        for _, M in _preconditioners(spec):
            r = alignment_gain_exact(spec, M)
            worst = max(worst, abs(r["gain_formula"]), abs(r["gain_direct"]))
    add("edge_no_noise_zero_gain", 50, worst, worst <= 1e-12)
    worst = 0.0
    for i in range(50):
        rng = np.random.default_rng(subseed(seed, f"edge-ab-{i}"))
        alpha = float(rng.uniform(0.0, 1.0))
        spec = random_mixture(subseed(seed, f"edge-ab-{i}"), alpha=alpha, beta=1.0 - alpha)
        for _, M in _preconditioners(spec):
            r = alignment_gain_exact(spec, M)
            worst = max(worst, abs(r["gain_formula"]), abs(r["gain_direct"]))
    add("edge_random_selector_zero_gain", 50, worst, worst <= 1e-12)

    # sign law
    violations = 0
    for i in range(100):
        spec = random_mixture(subseed(seed, f"sign-{i}"))
        for _, M in _preconditioners(spec):
            geo = Geometry(M)
            grads = mixture_gradients(spec, "strong")
            lhs = alignment_gain_exact(spec, M)["gain_direct"]
            rhs = spec.selector_skill * (
                geo.norm_sq(grads.g_core) - geo.inner(grads.g_core, grads.g_noise)
            )
            if abs(rhs) > 1e-9 and np.sign(lhs) != np.sign(rhs):
                violations += 1
    add("alignment_gain_sign_law", 100, float(violations), violations == 0)

    # strong lower bound (zeta estimated, so it is tight)
    worst = 0.0
    count = 0
    i = 0
    while count < 100:
        spec = random_mixture(subseed(seed, f"lb-{i}"))
        i += 1
        if coherence(spec, np.eye(spec.dim)) >= 1.0:
            continue
        count += 1
        for _, M in _preconditioners(spec):
            r = alignment_gain_lower_bound(spec, M)
            worst = max(worst, r["bound"] - r["gain_direct"])
    add("alignment_gain_lower_bound", 100, worst, worst <= 1e-12)

    # weak-bias robustness
    worst = 0.0
    for i in range(100):
        rng = np.random.default_rng(subseed(seed, f"wb-rho-{i}"))
        spec = random_mixture(
            subseed(seed, f"wb-{i}"),
            rho_c=float(rng.uniform(0.0, 0.3)),
            rho_n=float(rng.uniform(0.0, 0.3)),
        )
        for _, M in _preconditioners(spec):
            r = weak_bias_gain_bound(spec, M)
            worst = max(worst, r["lower_bound"] - r["gain_direct"])
    add("weak_bias_gain_bound", 100, worst, worst <= 1e-9)

    # one-step comparison on random quadratics
    worst = 0.0
    ordering_bad = 0
    count = 0
    i = 0
    while count < 50:
        spec = random_mixture(subseed(seed, f"os-{i}"))
        i += 1
        if coherence(spec, np.eye(spec.dim)) >= 1.0 or spec.selector_skill <= 0.0:
            continue
        scenario = make_one_step_scenario(subseed(seed, f"os-scn-{i}"), spec)
        for _, M in _preconditioners(spec):
            probe = one_step_compare(scenario, spec, M, eta=0.0)
            if probe["eta_max"] <= 0.0:
                continue
            r = one_step_compare(scenario, spec, M, eta=probe["eta_max"] / 2.0)
            worst = max(
                worst,
                r["loss_fil"] - r["loss_train"] - r["bound_rhs"],
                0.0 if r["descent_ok_fil"] else 1.0,
                0.0 if r["descent_ok_train"] else 1.0,
            )
            if r["gain"] > 0 and r["loss_fil"] > r["loss_train"] + 1e-12:
                ordering_bad += 1
        count += 1
    add("one_step_difference_bound", 50, worst, worst <= 1e-12)
    add("one_step_filtered_not_worse", 50, float(ordering_bad), ordering_bad == 0)

    # score-norm bound on many random toy draws
    worst = 0.0
    rng = np.random.default_rng(subseed(seed, "kn-euclid"))
    for _ in range(1000):
        dim = int(rng.integers(3, 10))
        W = rng.normal(size=(dim, dim))
        x = rng.normal(size=dim) * float(rng.uniform(0.1, 3.0))
        t = int(rng.integers(dim))
        p = _softmax(W @ x)
        e = np.zeros(dim)
        e[t] = 1.0
        phi = W.T @ (e - p)
        lz = float(np.max(np.linalg.norm(W, axis=1)))
        worst = max(worst, float(np.linalg.norm(phi)) - 2.0 * lz * (1.0 - p[t]))
    add("kn_euclidean_score_bound", 1000, worst, worst <= 1e-9)

    # Fisher contribution and alignment-impact bounds across confidence levels
    worst = 0.0
    n_scen = 0
    for delta in (0.1, 0.05, 0.01):
        for i in range(34 if delta != 0.01 else 32):
            scenario = make_kn_scenario(subseed(seed, f"kn-{delta}-{i}"), delta=delta)
            r = kn_bounds_check(scenario)
            n_scen += 1
            worst = max(worst, r["euclid_violation"], r["fisher_violation"])
            if not r["vacuous"]:
                worst = max(
                    worst,
                    r["contribution_norm"] - r["contribution_bound"],
                    r["alignment_impact"] - r["alignment_impact_bound"],
                )
    add("kn_fisher_contribution_bounds", n_scen, worst, worst <= 1e-9)

    return {"seed": seed, "checks": checks, "all_pass": all(c["pass"] for c in checks)}


def gain_sweep_rows(seed: int = 0, n_per_axis: int = 5) -> list[dict]:
    """Gain as a function of selector and mixture parameters, for CSV export."""
    rows = []
    base = random_mixture(subseed(seed, "sweep-base"))
    grid = np.linspace(0.05, 0.9, n_per_axis)
    for eps in grid:
        for alpha in np.linspace(0.0, 0.45, n_per_axis):
            for beta in np.linspace(0.0, 0.45, n_per_axis):
                spec = MixtureSpec(
                    dim=base.dim,
                    eps=float(eps),
                    alpha=float(alpha),
                    beta=float(beta),
                    core_vectors=base.core_vectors,
                    core_weights=base.core_weights,
                    noise_vectors=base.noise_vectors,
                    noise_weights=base.noise_weights,
                    seed=base.seed,
                )
                M = np.eye(spec.dim)
                r = alignment_gain_exact(spec, M)
                rows.append(
                    {
                        "eps": float(eps),
                        "alpha": float(alpha),
                        "beta": float(beta),
                        "zeta": coherence(spec, M),
                        "gain_formula": r["gain_formula"],
                        "gain_direct": r["gain_direct"],
                    }
                )
    return rows
