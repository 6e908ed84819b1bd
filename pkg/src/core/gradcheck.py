"""Gradientenprüfung: analytische Gradienten gegen zentrale Differenzen.

Scopes:
    nn        MLP- und GRU-Gradienten (BPTT)
    dynamics  Gauss-NLL der Ensemble-Modelle
    sac       Critic- und Actor-Verlust
    meta      Meta-Gradient durch das virtuelle Update

Jeder Lauf enthält eine Negativkontrolle: ein absichtlich verfälschter
Gradient muss durchfallen.
"""

from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from src.core.dynamics import ModelStats, init_ensemble, nll_loss, nll_loss_and_grad, rollout_batch
from src.core.envs import env_reward, get_env_spec
from src.core.nn import (
    GradCheckReport,
    GruSpec,
    MlpSpec,
    ParamVector,
    finite_diff_check,
    gru_sequence,
    gru_sequence_grad,
    init_gru_params,
    init_mlp_params,
    mlp_eval,
    mlp_grad,
)
from src.core.replay import TransitionBatch
from src.core.reweight import (
    FeatureNormalizer,
    MetaProblem,
    build_feature_batch,
    feature_dim,
    flatten_rollouts,
    init_weight_net,
    normalize,
)
from src.core.sac import (
    ImaginaryNoise,
    SacState,
    actor_loss,
    actor_loss_and_grad,
    critic_loss,
    critic_loss_and_grad,
    init_sac,
)
from src.utils.logger import get_logger
from src.utils.rng import make_rng

logger = get_logger(__name__)

SCOPES = ("nn", "dynamics", "sac", "meta")
TOLERANCE = 1e-6
META_TOLERANCE = 1e-4
FD_STEP = 1e-5
META_FD_STEP = 1e-4


@dataclass
class GradcheckResult:
    scope: str
    reports: list[GradCheckReport] = field(default_factory=list)
    control: GradCheckReport | None = None

    @property
    def passed(self) -> bool:
        control_ok = self.control is not None and not self.control.passed
        return control_ok and all(r.passed for r in self.reports)

    @property
    def exit_code(self) -> int:
        return 0 if self.passed else 1


# ---------------------------------------------------------------------------
# Instanzen
# ---------------------------------------------------------------------------


def _tanh_mlp(rng: np.random.Generator, d_in: int, d_out: int) -> MlpSpec:
    hidden = tuple(int(h) for h in rng.integers(2, 6, size=int(rng.integers(1, 3))))
    return MlpSpec(d_in, hidden, d_out, ("tanh",) * len(hidden) + ("identity",))


def _mlp_case(rng: np.random.Generator) -> tuple[Callable[[np.ndarray], float], ParamVector, ParamVector]:
    spec = _tanh_mlp(rng, int(rng.integers(1, 5)), int(rng.integers(1, 4)))
    params = init_mlp_params(spec, rng)
    params = params.with_values(params.values + 0.1 * rng.standard_normal(params.size))
    x = rng.standard_normal((int(rng.integers(1, 6)), spec.input_dim))
    up = rng.standard_normal((x.shape[0], spec.output_dim))
    grad, _ = mlp_grad(spec, params, x, up)

    def fn(values: np.ndarray) -> float:
        return float(np.sum(up * mlp_eval(spec, params.with_values(values), x)))

    return fn, params, grad


def _gru_case(rng: np.random.Generator) -> tuple[Callable[[np.ndarray], float], ParamVector, ParamVector]:
    spec = GruSpec(int(rng.integers(1, 4)), int(rng.integers(1, 5)))
    params = init_gru_params(spec, rng)
    params = params.with_values(params.values + 0.1 * rng.standard_normal(params.size))
    T, n = int(rng.integers(1, 5)), int(rng.integers(1, 4))
    inputs = rng.standard_normal((T, n, spec.input_dim))
    h0 = 0.5 * rng.standard_normal((n, spec.hidden_dim))
    ups = rng.standard_normal((T, n, spec.hidden_dim))
    grad = gru_sequence_grad(spec, params, inputs, ups, h0)

    def fn(values: np.ndarray) -> float:
        return float(np.sum(ups * gru_sequence(spec, params.with_values(values), inputs, h0)))

    return fn, params, grad


def _random_batch(rng: np.random.Generator, n: int, state_dim: int, action_dim: int) -> TransitionBatch:
    s = rng.standard_normal((n, state_dim))
    return TransitionBatch(
        s,
        rng.uniform(-1.0, 1.0, size=(n, action_dim)),
        rng.standard_normal(n),
        s + 0.1 * rng.standard_normal((n, state_dim)),
    )


def _nll_case(rng: np.random.Generator) -> tuple[Callable[[np.ndarray], float], ParamVector, ParamVector]:
    S, A = int(rng.integers(1, 4)), int(rng.integers(1, 3))
    hidden = tuple(int(h) for h in rng.integers(2, 6, size=2))
    ens = init_ensemble(S, A, 1, hidden, rng, activation="tanh")
    stats = ModelStats(
        rng.standard_normal(S + A),
        rng.uniform(0.5, 2.0, S + A),
        rng.standard_normal(S),
        rng.uniform(0.5, 2.0, S),
    )
    ens.set_stats(stats)
    model = ens.models[0]
    batch = _random_batch(rng, int(rng.integers(2, 8)), S, A)
    _, grad = nll_loss_and_grad(model, batch.states, batch.actions, batch.next_states)

    def fn(values: np.ndarray) -> float:
        probe = replace(model, params=model.params.with_values(values))
        return nll_loss(probe, batch.states, batch.actions, batch.next_states)

    return fn, model.params, grad


def _tiny_sac(rng: np.random.Generator, S: int, A: int) -> SacState:
    hidden = (int(rng.integers(3, 7)),)
    sac = init_sac(
        S, A, rng, -np.ones(A), np.ones(A), hidden_dims=hidden,
        init_alpha=float(rng.uniform(0.1, 1.0)), activation="tanh",
    )
    sac.targets = [t.with_values(t.values + 0.2 * rng.standard_normal(t.size)) for t in sac.targets]
    return sac


def _critic_case(rng: np.random.Generator) -> tuple[Callable[[np.ndarray], float], ParamVector, ParamVector]:
    S, A = int(rng.integers(1, 4)), int(rng.integers(1, 3))
    sac = _tiny_sac(rng, S, A)
    batch = _random_batch(rng, int(rng.integers(1, 6)), S, A)
    noise = rng.standard_normal((len(batch), A))
    weights = rng.uniform(0.1, 1.0, len(batch))
    _, grads = critic_loss_and_grad(sac, batch, weights=weights, noise=noise)
    split = sac.critics[0].size
    joint = np.concatenate([grads[0].values, grads[1].values])

    def fn(values: np.ndarray) -> float:
        params = [sac.critics[0].with_values(values[:split]), sac.critics[1].with_values(values[split:])]
        return critic_loss(sac, batch, weights=weights, noise=noise, critic_params=params)

    return fn, ParamVector(np.concatenate([c.values for c in sac.critics]), (("critics", (2 * split,)),)), joint


def _actor_case(rng: np.random.Generator) -> tuple[Callable[[np.ndarray], float], ParamVector, ParamVector]:
    S, A = int(rng.integers(1, 4)), int(rng.integers(1, 3))
    sac = _tiny_sac(rng, S, A)
    states = rng.standard_normal((int(rng.integers(1, 6)), S))
    noise = rng.standard_normal((states.shape[0], A))
    _, grad = actor_loss_and_grad(sac, states, noise=noise)

    def fn(values: np.ndarray) -> float:
        return actor_loss(sac, states, noise=noise, actor_params=sac.actor.with_values(values))

    return fn, sac.actor, grad


def build_tiny_meta_problem(rng: np.random.Generator, mu: float = 0.05) -> MetaProblem:
    """Kleine Meta-Instanz: Pendel-Dimensionen, H=3, B=2, M=2, winzige tanh-Netze."""
    spec = get_env_spec("pendulum")
    S, A = spec.state_dim, spec.action_dim
    horizon, n_rollouts, n_real = 3, 4, 6
    ens = init_ensemble(S, A, 2, (5,), rng, activation="tanh", log_std_bounds=(-3.0, -1.0))
    sac = _tiny_sac(rng, S, A)
    starts = rng.standard_normal((n_rollouts, S))
    actions = rng.uniform(-2.0, 2.0, size=(n_rollouts, horizon, A))
    rollouts = rollout_batch(ens, starts, actions, horizon, 2, lambda s, a, sn: env_reward(spec, s, a, sn), rng)
    wnet = init_weight_net(feature_dim(S, A), rng, hidden_dim=4)
    head_w = wnet.params.segment("head_w")
    head_w[...] = 0.5 * rng.standard_normal(head_w.shape)
    normalizer = FeatureNormalizer(feature_dim(S, A))
    feats = build_feature_batch(rollouts)
    normalizer.update(feats)
    inputs = np.transpose(normalize(normalizer, feats), (1, 0, 2))
    imag = flatten_rollouts(rollouts)
    real = _random_batch(rng, n_real, S, A)
    return MetaProblem(
        sac=sac,
        wnet=wnet,
        inputs=inputs,
        imag=imag,
        imag_noise=ImaginaryNoise.draw(rng, imag.n_transitions, imag.n_sets, A),
        real_batch=real,
        real_noise=ImaginaryNoise.draw(rng, n_real, n_real, A),
        mu=mu,
        alpha=sac.alpha,
    )


def _meta_case(rng: np.random.Generator) -> tuple[Callable[[np.ndarray], float], ParamVector, ParamVector]:
    problem = build_tiny_meta_problem(rng)
    _, grad = problem.gradient()
    return problem.objective, problem.wnet.params, grad


_CASES: dict[str, list[tuple[str, Callable]]] = {
    "nn": [("mlp", _mlp_case), ("gru", _gru_case)],
    "dynamics": [("gaussian_nll", _nll_case)],
    "sac": [("critic_loss", _critic_case), ("actor_loss", _actor_case)],
    "meta": [("meta_gradient", _meta_case)],
}


# ---------------------------------------------------------------------------
# Lauf
# ---------------------------------------------------------------------------


def negative_control(rng: np.random.Generator) -> GradCheckReport:
    """Verfälschter MLP-Gradient; der Report muss FAIL zeigen."""
    fn, params, grad = _mlp_case(rng)
    corrupted = grad.values.copy()
    i = int(rng.integers(0, corrupted.size))
    corrupted[i] += 0.1 * max(float(np.max(np.abs(corrupted))), 1.0)
    return finite_diff_check(fn, params, corrupted, TOLERANCE, FD_STEP, name="negative_control")


def run_gradcheck(scope: str, seed: int = 0, instances: int | None = None) -> GradcheckResult:
    """Führt die Prüfungen eines Scopes aus (20 Instanzen, meta: 5)."""
    if scope not in SCOPES:
        raise ValueError(f"Unbekannter Scope: {scope} (erlaubt: {', '.join(SCOPES)})")
    rng = make_rng(seed)
    is_meta = scope == "meta"
    count = instances if instances is not None else (5 if is_meta else 20)
    tol = META_TOLERANCE if is_meta else TOLERANCE
    step = META_FD_STEP if is_meta else FD_STEP

    result = GradcheckResult(scope)
    for name, case in _CASES[scope]:
        for k in range(count):
            fn, params, grad = case(rng)
            report = finite_diff_check(fn, params, grad, tol, step, name=f"{name}[{k}]")
            result.reports.append(report)
            if not report.passed:
                logger.warning("%s", report)
    result.control = negative_control(rng)
    logger.info(
        "Gradcheck %s: %d/%d bestanden, Negativkontrolle %s",
        scope,
        sum(r.passed for r in result.reports),
        len(result.reports),
        "ok" if not result.control.passed else "NICHT erkannt",
    )
    return result
