"""Evaluation protocol: stratified episodes, bootstrap aggregation, reports.

The protocol runs 3 cohorts x 4 patients x 4 seeds x 5 repeats = 240
episodes. Repeats perturb the episode stream deterministically (the stream
seed mixes seed and repeat), otherwise repeats of a deterministic policy
would be vacuous.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import metrics, nets
from .env import GlucoseEnv, Scenario, default_scenario
from .patients import Cohort

DEFAULT_SEEDS = (1, 100, 1000, 10000)
REPEATS_PER_SEED = 5
METRIC_NAMES = ("normalized_return", "tir", "survival", "mean_dosage")


@dataclass(frozen=True)
class EvalProtocol:
    cohorts: tuple[Cohort, ...] = (Cohort.ADULT, Cohort.ADOLESCENT, Cohort.CHILD)
    patients_per_cohort: int = 4
    seeds: tuple[int, ...] = DEFAULT_SEEDS
    repeats_per_seed: int = REPEATS_PER_SEED
    bootstrap_resamples: int = 1000

    @property
    def episodes_per_patient(self) -> int:
        return len(self.seeds) * self.repeats_per_seed


@dataclass
class EpisodeRecord:
    cohort: str
    patient_id: int
    seed: int
    repeat: int
    bg: list
    actions: list
    rewards: list
    termination_cause: str | None
    truncated: bool
    error: str | None = None

    @property
    def episode_return(self) -> float:
        return float(sum(self.rewards))

    @property
    def survived(self) -> bool:
        return self.truncated

    @property
    def tir(self) -> float:
        return metrics.tir(self.bg)

    @property
    def mean_dosage(self) -> float:
        return float(np.mean(self.actions)) if self.actions else 0.0


class Policy:
    """Per-episode decision policy. Subclasses override act()."""

    def reset(self, rng: np.random.Generator):
        pass

    def act(self, observation, history) -> float:
        raise NotImplementedError


class ScriptedPolicy(Policy):
    """Named scripted baselines used in tests and as comparison anchors."""

    def __init__(self, name: str):
        self.name = name
        self._rng = None
        if name.startswith("constant:"):
            self._dose = float(name.split(":", 1)[1])
        elif name == "zero":
            self._dose = 0.0
        elif name == "max":
            self._dose = 9.0
        elif name == "warmstart-random":
            self._dose = None
        else:
            raise ValueError(f"unknown scripted policy {name!r}")

    def reset(self, rng):
        self._rng = rng

    def act(self, observation, history):
        if self._dose is not None:
            return self._dose
        return 0.9 * int(self._rng.integers(0, 3))


class DqnPolicy(Policy):
    def __init__(self, qnet: nets.DenseNet, eps_test: float = 0.001):
        self.qnet = qnet
        self.eps_test = eps_test
        self._rng = None

    def reset(self, rng):
        self._rng = rng

    def act(self, observation, history):
        from .dqn import bin_to_rate, featurize
        if self.eps_test > 0 and self._rng.random() < self.eps_test:
            return bin_to_rate(int(self._rng.integers(0, 11)))
        q, _ = nets.forward(self.qnet, featurize(observation.flat))
        return bin_to_rate(int(np.argmax(q)))


class PpoEvalPolicy(Policy):
    """Deterministic PPO evaluation: transformed mean action."""

    def __init__(self, ppo_policy):
        self.policy = ppo_policy

    def act(self, observation, history):
        from .dqn import featurize
        a = self.policy.mean_action(featurize(observation.flat))
        return float(np.clip(a, 0.0, 9.0))


class LlmPolicy(Policy):
    def __init__(self, kind, config, transport=None, audit=None):
        from .llm import PromptKind
        self.kind = PromptKind(kind)
        self.config = config
        self.transport = transport
        self.audit = audit

    def act(self, observation, history):
        from .llm import llm_act
        action, exchange = llm_act(history, self.kind, self.config,
                                   transport=self.transport)
        if self.audit is not None:
            self.audit.record(exchange)
        return action


@dataclass
class PolicySpec:
    """Discriminated policy description resolvable to a Policy instance."""

    kind: str                        # dqn | ppo | llm | scripted
    label: str = ""
    checkpoint_path: str | None = None
    eps_test: float = 0.001
    scripted_name: str = "zero"
    llm_kind: str = "base"
    llm_config: object = None
    llm_transport: object = None
    policy_obj: Policy | None = None  # in-memory shortcut (tests, training)

    def resolve(self) -> Policy:
        if self.policy_obj is not None:
            return self.policy_obj
        if self.kind == "scripted":
            return ScriptedPolicy(self.scripted_name)
        if self.kind == "dqn":
            if not self.checkpoint_path:
                raise ValueError("dqn policy requires a checkpoint path")
            qnet = nets.load_params(self.checkpoint_path)
            return DqnPolicy(qnet, eps_test=self.eps_test)
        if self.kind == "ppo":
            if not self.checkpoint_path:
                raise ValueError("ppo policy requires a checkpoint path")
            return PpoEvalPolicy(load_ppo_checkpoint(self.checkpoint_path))
        if self.kind == "llm":
            from .llm import LlmConfig
            config = self.llm_config or LlmConfig()
            return LlmPolicy(self.llm_kind, config, transport=self.llm_transport)
        raise ValueError(f"unknown policy kind {self.kind!r}")


def save_ppo_checkpoint(policy, path):
    """Actor parameters plus a JSON side-car with the policy head config."""
    nets.save_params(policy.actor, path)
    meta = {
        "log_sigma": float(policy.log_sigma),
        "transform": policy.transform,
        "d_max": policy.d_max,
        "conditioned_sigma": policy.conditioned_sigma,
        "mu_offset": policy.mu_offset,
    }
    with open(str(path) + ".json", "w") as fh:
        json.dump(meta, fh, sort_keys=True)


def load_ppo_checkpoint(path):
    from .ppo import PpoPolicy
    actor = nets.load_params(path)
    with open(str(path) + ".json") as fh:
        meta = json.load(fh)
    return PpoPolicy(actor=actor, log_sigma=np.array(meta["log_sigma"]),
                     transform=meta["transform"], d_max=meta["d_max"],
                     conditioned_sigma=meta["conditioned_sigma"],
                     mu_offset=meta["mu_offset"])


def episode_seed_sequence(seed: int, repeat: int) -> np.random.SeedSequence:
    """Deterministic stream for one (seed, repeat) pair."""
    return np.random.SeedSequence([int(seed), int(repeat), 0xE7A1])


def run_episode(policy_spec: PolicySpec, scenario: Scenario, seed: int,
                repeat: int) -> EpisodeRecord:
    policy = policy_spec.resolve()
    ss = episode_seed_sequence(seed, repeat)
    env_ss, policy_ss = ss.spawn(2)
    env = GlucoseEnv(scenario)
    obs = env.reset(env_ss)
    policy.reset(np.random.default_rng(policy_ss))

    bg, actions, rewards = [env.history[0].bg_true], [], []
    truncated = False
    for _ in range(64):
        action = float(policy.act(obs, env.history))
        res = env.step(action)
        actions.append(action)
        rewards.append(res.reward)
        bg.append(res.info["bg_true"])
        obs = res.observation
        if res.terminated or res.truncated:
            truncated = res.truncated
            break
    return EpisodeRecord(cohort=scenario.cohort.value,
                         patient_id=scenario.patient_id,
                         seed=seed, repeat=repeat, bg=bg, actions=actions,
                         rewards=rewards,
                         termination_cause=env.termination_cause,
                         truncated=truncated)


def run_protocol(policy_spec: PolicySpec, protocol: EvalProtocol,
                 scenarios=None, workers: int = 1) -> list[EpisodeRecord]:
    """All protocol episodes. Per-episode failures are recorded, not fatal."""
    jobs = []
    for cohort in protocol.cohorts:
        for pid in range(protocol.patients_per_cohort):
            scenario = (scenarios or {}).get((cohort, pid)) \
                or default_scenario(cohort, pid)
            for seed in protocol.seeds:
                for repeat in range(protocol.repeats_per_seed):
                    jobs.append((scenario, seed, repeat))

    def one(job):
        scenario, seed, repeat = job
        try:
            return run_episode(policy_spec, scenario, seed, repeat)
        except Exception as exc:  # noqa: BLE001 - recorded per episode
            return EpisodeRecord(cohort=scenario.cohort.value,
                                 patient_id=scenario.patient_id,
                                 seed=seed, repeat=repeat, bg=[], actions=[],
                                 rewards=[], termination_cause=None,
                                 truncated=False, error=str(exc))

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            records = list(pool.map(one, jobs))
    else:
        records = [one(job) for job in jobs]
    return records


@dataclass
class MetricsReport:
    policy_label: str
    protocol_hash: str
    strata: dict      # stratum -> metric name -> MetricSummary
    incomplete_strata: list

    def to_dict(self) -> dict:
        def enc(summary):
            return {"mean": round(summary.mean, 6),
                    "ci_low": round(summary.ci_low, 6),
                    "ci_high": round(summary.ci_high, 6),
                    "n": summary.n}
        return {
            "policy": self.policy_label,
            "protocol_hash": self.protocol_hash,
            "incomplete_strata": sorted(self.incomplete_strata),
            "strata": {name: {m: enc(s) for m, s in group.items()}
                       for name, group in self.strata.items()},
        }


def protocol_hash(protocol: EvalProtocol, scenarios=None) -> str:
    """Digest over every knob that shapes the episode set."""
    desc = {
        "cohorts": [c.value for c in protocol.cohorts],
        "patients_per_cohort": protocol.patients_per_cohort,
        "seeds": list(protocol.seeds),
        "repeats_per_seed": protocol.repeats_per_seed,
        "bootstrap_resamples": protocol.bootstrap_resamples,
        "scenarios": {},
    }
    from .patients import get_patient
    for cohort in protocol.cohorts:
        for pid in range(protocol.patients_per_cohort):
            scenario = (scenarios or {}).get((cohort, pid)) \
                or default_scenario(cohort, pid)
            params = get_patient(cohort, pid)
            desc["scenarios"][f"{cohort.value}/{pid}"] = {
                "meals": [(m.time_offset, m.carbs)
                          for m in scenario.meal_schedule],
                "initial_bg_range": list(scenario.initial_bg_range),
                "start_clock": scenario.episode_start_clock,
                "jitter": [scenario.meal_jitter_min,
                           scenario.meal_jitter_carb_frac],
                "noise": [params.noise_sigma, params.cgm_sigma],
            }
    blob = json.dumps(desc, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _metric_values(records):
    return {
        "normalized_return": [metrics.normalized_return(r.episode_return)
                              for r in records],
        "tir": [r.tir for r in records],
        "survival": [1.0 if r.survived else 0.0 for r in records],
        "mean_dosage": [r.mean_dosage for r in records],
    }


def aggregate(records, protocol: EvalProtocol, policy_label: str = "",
              scenarios=None) -> MetricsReport:
    records = [r for r in records]
    if not records:
        raise ValueError("aggregate requires at least one record")
    # Stable order so aggregation is permutation-invariant.
    records.sort(key=lambda r: (r.cohort, r.patient_id, r.seed, r.repeat))
    ok = [r for r in records if r.error is None]
    incomplete = sorted({r.cohort for r in records if r.error is not None})

    strata = {}
    groups = {c.value: [r for r in ok if r.cohort == c.value]
              for c in protocol.cohorts}
    groups["overall"] = ok
    for name, group in groups.items():
        if not group:
            incomplete.append(name)
            continue
        summaries = {}
        for metric_name, values in _metric_values(group).items():
            seed = zlib.crc32(f"{name}/{metric_name}".encode())
            summaries[metric_name] = metrics.bootstrap_ci(
                values, resamples=protocol.bootstrap_resamples, seed=seed)
        strata[name] = summaries
    return MetricsReport(policy_label=policy_label,
                         protocol_hash=protocol_hash(protocol, scenarios),
                         strata=strata,
                         incomplete_strata=sorted(set(incomplete)))


def select_best_checkpoint(training_log) -> int:
    """Epoch with the highest normalised training return; ties -> earliest."""
    entries = list(training_log)
    if not entries:
        raise ValueError("training log is empty")
    best_epoch, best_return = None, -math.inf
    for entry in entries:
        epoch = entry.epoch if hasattr(entry, "epoch") else entry[0]
        ret = entry.train_return if hasattr(entry, "train_return") else entry[1]
        if ret is None or (isinstance(ret, float) and math.isnan(ret)):
            continue
        if ret > best_return:
            best_epoch, best_return = epoch, ret
    if best_epoch is None:
        raise ValueError("training log carries no finite returns")
    return best_epoch


def compare_policies(reports: list[MetricsReport]) -> dict:
    """Side-by-side table of >= 2 reports sharing a protocol hash."""
    if len(reports) < 2:
        raise ValueError("need at least two reports to compare")
    hashes = {r.protocol_hash for r in reports}
    if len(hashes) != 1:
        raise ValueError(f"protocol hash mismatch across reports: {hashes}")
    ordered = sorted(
        reports,
        key=lambda r: -r.strata["overall"]["normalized_return"].mean)
    table = {"policies": [r.policy_label for r in ordered],
             "protocol_hash": ordered[0].protocol_hash, "rows": []}
    best = ordered[0]
    for stratum in ordered[0].strata:
        for metric_name in METRIC_NAMES:
            cells = []
            ref = best.strata[stratum][metric_name]
            for report in ordered:
                s = report.strata[stratum][metric_name]
                overlap = not (s.ci_low > ref.ci_high or s.ci_high < ref.ci_low)
                cells.append({"mean": s.mean, "ci": [s.ci_low, s.ci_high],
                              "ci_overlaps_best": overlap})
            table["rows"].append({"stratum": stratum, "metric": metric_name,
                                  "cells": cells})
    return table


def emit_report(report: MetricsReport, path, format: str = "json"):
    """Write the report with stable field order; re-emission is byte-stable."""
    if format == "json":
        blob = json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n"
        with open(path, "w", newline="") as fh:
            fh.write(blob)
    elif format == "csv":
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            header = ["stratum"]
            for m in METRIC_NAMES:
                header += [f"{m}_mean", f"{m}_ci_low", f"{m}_ci_high"]
            writer.writerow(header)
            for stratum in report.strata:
                row = [stratum]
                for m in METRIC_NAMES:
                    s = report.strata[stratum][m]
                    row += [round(s.mean, 6), round(s.ci_low, 6),
                            round(s.ci_high, 6)]
                writer.writerow(row)
    else:
        raise ValueError(f"unknown report format {format!r}")


def load_report(path) -> MetricsReport:
    with open(path) as fh:
        raw = json.load(fh)
    strata = {}
    for name, group in raw["strata"].items():
        strata[name] = {m: metrics.MetricSummary(
            mean=v["mean"], ci_low=v["ci_low"], ci_high=v["ci_high"], n=v["n"])
            for m, v in group.items()}
    return MetricsReport(policy_label=raw["policy"],
                         protocol_hash=raw["protocol_hash"],
                         strata=strata,
                         incomplete_strata=list(raw["incomplete_strata"]))
