"""Experiment driver, toy study and evaluation metrics.

Seeding: every source of randomness is a ``numpy.random.Generator`` built
from ``SeedSequence(master_seed, spawn_key=(stream, index))``:

* stream 0, index t: round ``t`` (client sampling, then per-client seeds)
* stream 1, index 0: model initialisation
* stream 2, index 0: marginalized prediction at the final evaluation

Because each child depends only on ``(master_seed, stream, index)``, a run
is reproducible round by round and independent of how many rounds ran
before.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from . import gaussian as G
from .config import ConfigError, ExperimentConfig
from .datagen import (
    NIWParams,
    fixed_toy_fixture,
    gen_fed_classification,
    random_spd,
    sample_toy_clients,
    true_global_mean,
)
from .gaussian import MeanFieldGaussian
from .inference import InferenceConfig, TiltedProblem, exact_diag_infer
from .models import DatasetShard, ModelSpec, logistic, mlp, predict_proba, read_csv
from .protocol import (
    ClientRecord,
    RoundMetrics,
    ServerState,
    fedavg_state,
    handoff,
    run_round,
    save_checkpoint,
)

log = logging.getLogger(__name__)

REPORT_SCHEMA = 1
ROUND_STREAM, INIT_STREAM, PREDICT_STREAM = 0, 1, 2


def child_rng(seed: int, stream: int, index: int = 0) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(stream, index)))


# ---------------------------------------------------------------- metrics


def ece(probs, labels, n_bins: int = 15) -> float:
    """Expected calibration error over uniform top-1 confidence bins.

    Bins are ``[i/n, (i+1)/n)`` except the last, which also includes 1.
    """
    probs = np.asarray(probs, dtype=float)
    labels = np.asarray(labels)
    if probs.ndim != 2 or len(probs) == 0:
        raise ValueError("probs must be a non-empty (n, C) array")
    if labels.shape != (len(probs),):
        raise ValueError("labels must have one entry per row of probs")
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    conf = probs.max(axis=1)
    correct = (probs.argmax(axis=1) == labels).astype(float)
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    bins = np.clip(np.searchsorted(edges, conf, side="right") - 1, 0, n_bins - 1)
    total = 0.0
    n = len(conf)
    for b in range(n_bins):
        mask = bins == b
        if mask.any():
            total += mask.sum() / n * abs(correct[mask].mean() - conf[mask].mean())
    return float(total)


def marginalized_predict(q_global: MeanFieldGaussian, spec: ModelSpec, x, n_samples: int = 10, rng=None) -> np.ndarray:
    """Average of ``predict_proba`` over parameter draws from ``q_global``."""
    if not q_global.is_proper:
        raise G.NotProperError("marginalized prediction needs a proper posterior")
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    rng = np.random.default_rng() if rng is None else rng
    thetas = G.sample(q_global, rng, size=n_samples)
    return np.mean([predict_proba(spec, th, x) for th in thetas], axis=0)


def running_average(series, window: int) -> np.ndarray:
    """Trailing mean over ``min(window, t)`` points at position ``t``."""
    if window < 1:
        raise ValueError("window must be >= 1")
    s = np.asarray(series, dtype=float)
    if s.size == 0:
        return s
    csum = np.concatenate([[0.0], np.cumsum(s)])
    idx = np.arange(1, s.size + 1)
    lo = np.maximum(idx - window, 0)
    return (csum[idx] - csum[lo]) / (idx - lo)


def rounds_to_threshold(series, threshold: float, window: int = 10) -> int | None:
    """First 1-based round whose running average reaches ``threshold``."""
    ra = running_average(series, window)
    hits = np.flatnonzero(ra >= threshold)
    return int(hits[0]) + 1 if hits.size else None


def best_within(series, horizon: int, window: int = 100) -> float:
    """Best running average over the first ``horizon`` rounds (clamped)."""
    ra = running_average(series, window)
    if ra.size == 0:
        raise ValueError("empty series")
    return float(ra[: max(1, min(horizon, ra.size))].max())


def multilabel_eval(scores, labels, threshold: float = 0.5) -> dict:
    """Thresholded multilabel precision, recall, micro-F1 and macro-F1."""
    scores = np.asarray(scores, dtype=float)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape or scores.ndim != 2:
        raise ValueError(f"scores {scores.shape} and labels {labels.shape} must be equal (n, tags) arrays")
    pred = scores >= threshold
    tp = (pred & labels).sum(axis=0)
    fp = (pred & ~labels).sum(axis=0)
    fn = (~pred & labels).sum(axis=0)

    def f1(t, p, n):
        denom = 2 * t + p + n
        return np.where(denom > 0, 2 * t / np.maximum(denom, 1), 0.0)

    tp_all, fp_all, fn_all = tp.sum(), fp.sum(), fn.sum()
    return {
        "precision": float(tp_all / (tp_all + fp_all)) if tp_all + fp_all else 0.0,
        "recall": float(tp_all / (tp_all + fn_all)) if tp_all + fn_all else 0.0,
        "micro_f1": float(f1(tp_all, fp_all, fn_all)),
        "macro_f1": float(np.mean(f1(tp, fp, fn))),
    }


# ---------------------------------------------------------------- toy study


def toy_fedpa(specs: list[ModelSpec]) -> np.ndarray:
    """One-shot FedPA: mode of the product of diagonal projections."""
    d = specs[0].param_dim
    q = G.improper_uniform(d)
    for s in specs:
        q = G.product(q, exact_diag_infer(TiltedProblem(s, None, G.improper_uniform(d), np.zeros(d))))
    return G.mode(q)


def toy_fedavg(specs: list[ModelSpec]) -> np.ndarray:
    """One-shot FedAvg analogue: unweighted mean of the client means."""
    return np.mean([s.mean for s in specs], axis=0)


def toy_fedep(specs: list[ModelSpec], damping: float = 1.0, max_rounds: int = 500, tol: float = 1e-10):
    """Full-participation FedEP with exact diagonal inference.

    Stops once no natural-mean coordinate of ``q_global`` moves by ``tol``
    or more in a round. Returns ``(mode, rounds)``.
    """
    d = specs[0].param_dim
    clients = {str(i): ClientRecord.new(i, s) for i, s in enumerate(specs)}
    server = ServerState(G.improper_uniform(d), G.improper_uniform(d), "fedep", damping, len(specs))
    cfg = InferenceConfig(backend="exact")
    ids = list(clients)
    rng = np.random.default_rng(0)
    for t in range(1, max_rounds + 1):
        before = server.q_global.eta.copy()
        run_round(server, clients, ids, cfg, rng)
        if np.max(np.abs(server.q_global.eta - before)) < tol:
            break
    return G.mode(server.q_global), t


def toy_study(n_draws: int = 200, niw: NIWParams | None = None, rng=None, damping: float = 1.0) -> dict:
    """Distance between each strategy's estimate and the true global mean.

    Each draw samples a random SPD scale ``Psi = A'A + 0.1 I`` and two
    clients from the normal-inverse-Wishart with that scale.
    """
    if n_draws < 1:
        raise ValueError("n_draws must be >= 1")
    base = niw or NIWParams()
    rng = np.random.default_rng(0) if rng is None else rng
    d = base.mu0.size
    dist = {"fedavg": [], "fedpa": [], "fedep": []}
    rounds = []
    resampled = 0
    for _ in range(n_draws):
        params = NIWParams(base.mu0, base.lam, base.nu, random_spd(d, rng))
        specs, extra = sample_toy_clients(params, 2, rng)
        resampled += extra
        truth = true_global_mean(specs)
        ep, r = toy_fedep(specs, damping)
        rounds.append(r)
        for name, est in (("fedavg", toy_fedavg(specs)), ("fedpa", toy_fedpa(specs)), ("fedep", ep)):
            dist[name].append(float(np.linalg.norm(est - truth)))
    ep_d, pa_d, avg_d = (np.array(dist[k]) for k in ("fedep", "fedpa", "fedavg"))
    return {
        "schema": REPORT_SCHEMA,
        "n_draws": n_draws,
        "niw": {"mu0": base.mu0.tolist(), "nu": base.nu, "lambda": base.lam},
        "resampled": resampled,
        "strategies": {
            k: {"mean": float(np.mean(v)), "sd": float(np.std(v, ddof=1)) if n_draws > 1 else 0.0}
            for k, v in dist.items()
        },
        "fedep_lt_fedpa": float(np.mean(ep_d < pa_d)),
        "fedpa_lt_fedavg": float(np.mean(pa_d < avg_d)),
        "fedep_rounds_max": int(max(rounds)),
        "distances": {k: v for k, v in dist.items()},
    }


# ---------------------------------------------------------------- experiments


@dataclass
class EvalReport:
    point_accuracy: float | None = None
    marginal_accuracy: float | None = None
    ece15_point: float | None = None
    ece15_marginal: float | None = None
    eval_loss: float | None = None
    precision: float | None = None
    recall: float | None = None
    micro_f1: float | None = None
    macro_f1: float | None = None
    rounds_to_threshold: dict = field(default_factory=dict)
    best_within: dict = field(default_factory=dict)
    rounds: int = 0
    floored_total: int = 0

    def to_dict(self) -> dict:
        return {"schema": REPORT_SCHEMA, **asdict(self)}


@dataclass
class Setup:
    """Everything an experiment needs before its first round."""

    spec: ModelSpec | None
    clients: dict[str, ClientRecord]
    server: ServerState
    test: DatasetShard | None
    truth: np.ndarray | None
    total_data: int


def load_data(cfg: ExperimentConfig):
    """``(train_shards, test_shard)`` for classification sources."""
    if cfg.source == "synthetic":
        return gen_fed_classification(cfg.fedclass_config(), np.random.default_rng(cfg.data_seed))
    if cfg.source == "csv":
        train = read_csv(cfg.train_csv)
        p = train[0].x.shape[1]
        test_parts = read_csv(cfg.test_csv, input_dim=p)
        test = DatasetShard(
            np.concatenate([s.x for s in test_parts]), np.concatenate([s.y for s in test_parts]), "test"
        )
        return train, test
    raise ConfigError(f"source {cfg.source!r} has no classification data", "source")


def build(cfg: ExperimentConfig, seed: int) -> Setup:
    client_opt = cfg.client_state_optimizer()
    server_opt = cfg.server_optimizer()
    strategy = cfg.strategy
    if cfg.source == "toy":
        specs = fixed_toy_fixture()
        clients = {str(i): ClientRecord.new(i, s, client_optim=client_opt) for i, s in enumerate(specs)}
        d = 2
        spec, test, truth = None, None, true_global_mean(specs)
        theta0 = np.zeros(d)
    elif cfg.source == "niw-study":
        raise ConfigError("use the toy-study command for source = niw-study", "source")
    else:
        shards, test = load_data(cfg)
        c = max(int(max(s.y.max() for s in shards)), int(test.y.max())) + 1
        c = max(c, cfg.num_classes if cfg.source == "synthetic" else 2)
        p = shards[0].x.shape[1]
        spec = logistic(p, c) if cfg.model == "logistic" else mlp(p, cfg.hidden_dim, c)
        d = spec.param_dim
        theta0 = cfg.init_scale * child_rng(seed, INIT_STREAM).standard_normal(d)
        clients = {
            s.client_id: ClientRecord.new(s.client_id, spec, s, client_opt, theta0) for s in shards
        }
        truth = None
    total = sum(c.n_data for c in clients.values())
    if cfg.prior_precision > 0:
        prior = MeanFieldGaussian(np.zeros(d), np.full(d, cfg.prior_precision))
    else:
        prior = G.improper_uniform(d)
    if strategy == "fedavg" or cfg.burn_in > 0:
        damping = cfg.damping if strategy == "fedavg" else (cfg.burn_in_damping or cfg.damping)
        server = fedavg_state(theta0, damping, server_opt, len(clients))
        server.prior = prior
    else:
        server = ServerState(prior, prior, strategy, cfg.damping, len(clients), server_opt.fresh(), server_opt.fresh())
    return Setup(spec, clients, server, test, truth, total)


def evaluate(setup: Setup, theta_fallback=None) -> tuple[float | None, float | None]:
    """``(eval_loss, eval_accuracy)`` of the global mode; read only."""
    q = setup.server.q_global
    if setup.truth is not None:
        if not q.is_proper:
            return None, None
        return float(np.linalg.norm(G.mode(q) - setup.truth)), None
    theta = G.mode(q) if q.is_proper else theta_fallback
    probs = predict_proba(setup.spec, theta, setup.test.x)
    p_true = probs[np.arange(len(probs)), setup.test.y]
    loss = float(-np.mean(np.log(np.maximum(p_true, 1e-300))))
    acc = float(np.mean(probs.argmax(axis=1) == setup.test.y))
    return loss, acc


def run_experiment(
    cfg: ExperimentConfig,
    seed: int | None = None,
    on_round: Callable[[RoundMetrics], None] | None = None,
    checkpoint_dir=None,
):
    """Burn-in rounds of FedAvg, then ``cfg.strategy`` rounds up to ``cfg.rounds``.

    ``on_round`` sees each round's metrics as soon as they exist, so a
    caller can persist a partial trace if a later round raises.
    Returns ``(trace, report)``.
    """
    seed = cfg.seed if seed is None else seed
    setup = build(cfg, seed)
    server, clients = setup.server, setup.clients
    inf_cfg = cfg.inference_config()
    ids = list(clients)
    m = min(cfg.clients_per_round, len(ids))
    theta0 = next(iter(clients.values())).last_theta
    trace: list[RoundMetrics] = []
    for t in range(1, cfg.rounds + 1):
        if t == cfg.burn_in + 1 and cfg.burn_in > 0 and cfg.strategy != "fedavg":
            handoff(server, clients, cfg.strategy, setup.total_data, cfg.alpha_cov)
            server.damping = cfg.damping
        rng = child_rng(seed, ROUND_STREAM, t)
        sampled = [ids[i] for i in sorted(rng.choice(len(ids), size=m, replace=False))]
        _, metrics = run_round(server, clients, sampled, inf_cfg, rng)
        if t % cfg.eval_interval == 0 or t == cfg.rounds:
            metrics.eval_loss, metrics.eval_accuracy = evaluate(setup, theta0)
        trace.append(metrics)
        if on_round is not None:
            on_round(metrics)
        if checkpoint_dir is not None and cfg.checkpoint_interval and t % cfg.checkpoint_interval == 0:
            save_checkpoint(f"{checkpoint_dir}/checkpoint_{t:06d}.json", server, clients)
    return trace, final_report(cfg, setup, trace, seed, theta0)


def final_report(cfg: ExperimentConfig, setup: Setup, trace: list[RoundMetrics], seed: int, theta0) -> EvalReport:
    report = EvalReport(rounds=len(trace), floored_total=setup.server.floored_total)
    loss, acc = evaluate(setup, theta0)
    report.eval_loss = loss
    if setup.truth is not None:
        return report
    q = setup.server.q_global
    theta = G.mode(q) if q.is_proper else theta0
    probs = predict_proba(setup.spec, theta, setup.test.x)
    report.point_accuracy = acc
    report.ece15_point = ece(probs, setup.test.y)
    if setup.server.strategy != "fedavg" and q.is_proper:
        mprobs = marginalized_predict(q, setup.spec, setup.test.x, cfg.marginal_samples, child_rng(seed, PREDICT_STREAM))
        report.marginal_accuracy = float(np.mean(mprobs.argmax(axis=1) == setup.test.y))
        report.ece15_marginal = ece(mprobs, setup.test.y)
    evaluated = [(r.round, r.eval_accuracy) for r in trace if r.eval_accuracy is not None]
    series = [a for _, a in evaluated]
    for thr in cfg.thresholds:
        idx = rounds_to_threshold(series, thr) if series else None
        report.rounds_to_threshold[repr(thr)] = evaluated[idx - 1][0] if idx is not None else None
    for h in cfg.horizons:
        within = [a for r, a in evaluated if r <= h]
        report.best_within[str(h)] = best_within(within, h) if within else None
    return report


def summarize(reports: list[EvalReport]) -> dict:
    """Mean and sd of every numeric report field across seed repeats."""
    out = {"schema": REPORT_SCHEMA, "n_repeats": len(reports), "fields": {}}
    for name in ("point_accuracy", "marginal_accuracy", "ece15_point", "ece15_marginal", "eval_loss"):
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        if vals:
            out["fields"][name] = {
                "mean": float(np.mean(vals)),
                "sd": float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0,
            }
    return out

