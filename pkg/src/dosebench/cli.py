"""Command-line entry point: train, eval, compare, mock-llm."""

from __future__ import annotations

import argparse
import datetime
import hashlib
import json
import sys
from pathlib import Path

from . import harness, nets
from .patients import Cohort


def _run_dir(base: str, tag: str) -> Path:
    stamp = datetime.datetime.now().strftime("%Y%m%d-%H%M%S")
    digest = hashlib.sha256(tag.encode()).hexdigest()[:8]
    path = Path(base) / f"{stamp}-{digest}"
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_config(path):
    import yaml
    if path is None:
        return {}
    with open(path) as fh:
        return yaml.safe_load(fh) or {}


def cmd_train(args):
    overrides = _load_config(args.config)
    run = _run_dir(args.out, f"{args.algo}-{args.env}-{args.prior}-{args.seed}")
    if args.algo == "dqn":
        from .dqn import DqnConfig, train_dqn
        config = DqnConfig(use_prior=args.prior == "on",
                           **{k: v for k, v in overrides.items()
                              if k in DqnConfig.__dataclass_fields__})
        result = train_dqn(args.env, config, args.seed)
        for epoch, net in result.checkpoints:
            nets.save_params(net, run / f"checkpoint-{epoch:03d}.dnet")
    else:
        import numpy as np
        from .ppo import PpoConfig, PpoPolicy, default_mu_offset, train_ppo
        transform = "tanh" if args.prior == "on" else "clip"
        config = PpoConfig(transform=transform,
                           **{k: v for k, v in overrides.items()
                              if k in PpoConfig.__dataclass_fields__})
        result = train_ppo(args.env, config, args.seed)
        offset = config.mu_offset if config.mu_offset is not None \
            else default_mu_offset(config.transform, config.d_max)
        for epoch, actor, log_sigma, _value in result.checkpoints:
            policy = PpoPolicy(actor=actor, log_sigma=np.array(log_sigma),
                               transform=config.transform, d_max=config.d_max,
                               conditioned_sigma=config.conditioned_sigma,
                               mu_offset=offset)
            harness.save_ppo_checkpoint(policy,
                                        run / f"checkpoint-{epoch:03d}.dnet")
    log_rows = [vars(entry) for entry in result.log]
    with open(run / "training_log.json", "w") as fh:
        json.dump(log_rows, fh, indent=2, sort_keys=True)
    try:
        best = harness.select_best_checkpoint(result.log)
    except ValueError:
        best = result.log[-1].epoch  # no finished episode yet: keep latest
    with open(run / "best_checkpoint.txt", "w") as fh:
        fh.write(f"{best}\n")
    print(f"run dir: {run}")
    print(f"best checkpoint (training return): epoch {best}")


def cmd_eval(args):
    protocol = harness.EvalProtocol()
    if args.policy == "checkpoint":
        kind = "ppo" if Path(str(args.path) + ".json").exists() else "dqn"
        spec = harness.PolicySpec(kind=kind, checkpoint_path=args.path,
                                  label=args.label or Path(args.path).stem)
    elif args.policy == "llm":
        from .llm import LlmConfig
        spec = harness.PolicySpec(
            kind="llm", llm_kind=args.kind,
            llm_config=LlmConfig(base_url=args.base_url or "",
                                 model_name=args.model,
                                 temperature=args.temperature),
            label=args.label or f"llm-{args.model}-{args.kind}")
    else:
        spec = harness.PolicySpec(kind="scripted", scripted_name=args.name,
                                  label=args.label or f"scripted-{args.name}")
    records = harness.run_protocol(spec, protocol, workers=args.workers)
    report = harness.aggregate(records, protocol, policy_label=spec.label)
    run = _run_dir(args.out, spec.label)
    harness.emit_report(report, run / "report.json", "json")
    harness.emit_report(report, run / "report.csv", "csv")
    overall = report.strata["overall"]
    print(f"run dir: {run}")
    for name, summary in overall.items():
        print(f"{name}: {summary.mean:.2f} "
              f"[{summary.ci_low:.2f}, {summary.ci_high:.2f}]")


def cmd_compare(args):
    reports = [harness.load_report(p) for p in args.reports]
    table = harness.compare_policies(reports)
    print(json.dumps(table, indent=2, sort_keys=True))


def cmd_mock_llm(args):
    from .llm import ScriptedMockServer
    with open(args.script) as fh:
        script = [line.rstrip("\n") for line in fh if line.strip()]
    server = ScriptedMockServer(script, port=args.port).start()
    print(f"mock chat-completions server on {server.base_url} "
          f"({len(script)} scripted replies, cycling)")
    try:
        import time
        while True:
            time.sleep(1)
    except KeyboardInterrupt:
        server.stop()


def build_parser():
    parser = argparse.ArgumentParser(
        prog="dosebench",
        description="Insulin-dosing benchmark: simulator, RL agents, "
                    "LLM policies, evaluation protocol.")
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a DQN or PPO agent")
    p_train.add_argument("--algo", choices=["dqn", "ppo"], required=True)
    p_train.add_argument("--env", required=True,
                         choices=[c.value for c in Cohort] + ["mixed"])
    p_train.add_argument("--prior", choices=["on", "off"], default="off")
    p_train.add_argument("--seed", type=int, default=1)
    p_train.add_argument("--config", default=None,
                         help="YAML overrides for the algorithm config")
    p_train.add_argument("--out", default="runs")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser("eval", help="run the 240-episode protocol")
    eval_sub = p_eval.add_subparsers(dest="policy", required=True)
    p_ck = eval_sub.add_parser("checkpoint")
    p_ck.add_argument("path")
    p_llm = eval_sub.add_parser("llm")
    p_llm.add_argument("--kind", default="base",
                       choices=["base", "prior", "cot", "meal-cot"])
    p_llm.add_argument("--model", default="qwen2.5-7b-instruct")
    p_llm.add_argument("--temperature", type=float, default=0.7)
    p_llm.add_argument("--base-url", default=None)
    p_sc = eval_sub.add_parser("scripted")
    p_sc.add_argument("--name", default="zero")
    for sp in (p_ck, p_llm, p_sc):
        sp.add_argument("--label", default=None)
        sp.add_argument("--workers", type=int, default=1)
        sp.add_argument("--out", default="runs")
    p_eval.set_defaults(func=cmd_eval)

    p_cmp = sub.add_parser("compare", help="compare emitted reports")
    p_cmp.add_argument("reports", nargs="+")
    p_cmp.set_defaults(func=cmd_compare)

    p_mock = sub.add_parser("mock-llm", help="serve scripted replies")
    p_mock.add_argument("--script", required=True,
                        help="text file, one reply per line")
    p_mock.add_argument("--port", type=int, default=0)
    p_mock.set_defaults(func=cmd_mock_llm)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
