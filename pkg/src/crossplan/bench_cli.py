"""Command-line workbench: train, evaluate, plot, print-config.

Evaluation follows the stratified protocol: behaviour combinations are
cycled (or sampled without replacement when there are more combinations
than episodes), each episode gets a fresh spawn seed, and everything is
averaged over several evaluation seeds derived from the base seed.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import sys
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import hiplanner
from .contingency import PenaltyConfig, train_concurrent
from .hiplanner import PlannerConfig
from .qlearn import TrainConfig, greedy_policy, load_checkpoint, save_checkpoint
from .traffic_env import EnvConfig, EnvParams, IntersectionEnv

DEFAULT_CONTROLLERS = ("pi_star", "pi1_noinit", "pi1_init", "h_noinit", "h_init")

_CHECKPOINTS = {
    "pi_star": "pi_star.ckpt",
    "pi1_init": "pi1_init.ckpt",
    "pi1_noinit": "pi1_noinit.ckpt",
}

TRAINING_CSV_FIELDS = (
    "episode",
    "policy",
    "raw_score",
    "penalized_score",
    "metric",
    "epsilon",
    "steps",
    "handoff",
)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs; round-trips losslessly through text form."""

    env: EnvConfig = field(default_factory=EnvConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    penalty: PenaltyConfig = field(default_factory=PenaltyConfig)
    planner: PlannerConfig = field(default_factory=PlannerConfig)
    seed: int = 0
    eval_reps: int = 4
    out_dir: str = "runs"


_SECTIONS = {
    "env": EnvConfig,
    "train": TrainConfig,
    "penalty": PenaltyConfig,
    "planner": PlannerConfig,
}


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


def _parse_value(text: str, default) -> object:
    if isinstance(default, bool):
        if text.lower() not in ("true", "false"):
            raise ValueError(f"expected true/false, got {text!r}")
        return text.lower() == "true"
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    return text


def config_to_text(cfg: ExperimentConfig) -> str:
    """Canonical key-value form; parseable back by parse_config."""
    lines = []
    lines.append(f"seed = {cfg.seed}")
    lines.append(f"eval_reps = {cfg.eval_reps}")
    lines.append(f"out_dir = {cfg.out_dir}")
    for section, section_cls in _SECTIONS.items():
        lines.append("")
        value = getattr(cfg, section)
        for f in fields(section_cls):
            lines.append(f"{section}.{f.name} = {_format_value(getattr(value, f.name))}")
    return "\n".join(lines) + "\n"


def parse_config(text: str) -> ExperimentConfig:
    """Parse the plain-text key-value form; unknown keys are errors."""
    defaults = ExperimentConfig()
    top: dict[str, object] = {}
    sections: dict[str, dict[str, object]] = {name: {} for name in _SECTIONS}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if "." in key:
            section, name = key.split(".", 1)
            if section not in _SECTIONS:
                raise ValueError(f"line {lineno}: unknown section {section!r}")
            section_default = getattr(defaults, section)
            if not hasattr(section_default, name):
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            sections[section][name] = _parse_value(value, getattr(section_default, name))
        else:
            if key not in ("seed", "eval_reps", "out_dir"):
                raise ValueError(f"line {lineno}: unknown key {key!r}")
            top[key] = _parse_value(value, getattr(defaults, key))
    kwargs = dict(top)
    for section, cls in _SECTIONS.items():
        kwargs[section] = replace(getattr(defaults, section), **sections[section])
    return ExperimentConfig(**kwargs)


def load_config(path: str) -> ExperimentConfig:
    return parse_config(Path(path).read_text())


# -- train ------------------------------------------------------------------------


def cmd_train(
    cfg: ExperimentConfig,
    out_dir: str | None = None,
    no_buffer_init: bool = False,
    progress: bool = False,
) -> dict[str, Path]:
    """Train both policies and write checkpoints plus the training CSV.

    With no_buffer_init the contingency agent trains with beta = 0 and is
    saved under the no-init name; the optimal agent is unaffected either
    way (it has its own rng stream), so its checkpoint is identical across
    the two variants.
    """
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    env = IntersectionEnv(cfg.env)
    pcfg = replace(cfg.penalty, beta=0.0) if no_buffer_init else cfg.penalty
    result = train_concurrent(env, pcfg, cfg.train, seed=cfg.seed, progress=progress)

    variant = "noinit" if no_buffer_init else "init"
    meta = {
        "seed": cfg.seed,
        "variant": variant,
        "train": {f.name: getattr(cfg.train, f.name) for f in fields(TrainConfig)},
        "penalty": {f.name: getattr(pcfg, f.name) for f in fields(PenaltyConfig)},
        "n_targets": cfg.env.n_targets,
    }
    paths: dict[str, Path] = {}

    star_path = out / _CHECKPOINTS["pi_star"]
    save_checkpoint(str(star_path), result.pi_star.net, {**meta, "policy": "pi_star"})
    paths["pi_star"] = star_path

    pi1_name = f"pi1_{variant}"
    pi1_path = out / _CHECKPOINTS[pi1_name]
    save_checkpoint(str(pi1_path), result.pi_one.net, {**meta, "policy": pi1_name})
    paths[pi1_name] = pi1_path

    csv_path = out / f"training_{variant}.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(TRAINING_CSV_FIELDS)
        for r in result.records:
            writer.writerow(
                [
                    r.index,
                    r.policy,
                    r.raw_score,
                    r.penalized_score,
                    r.metric,
                    r.epsilon,
                    r.steps,
                    int(r.handoff_init),
                ]
            )
    paths["training_csv"] = csv_path
    return paths


# -- eval -------------------------------------------------------------------------


@dataclass(frozen=True)
class EvalRow:
    controller: str
    rep: int
    episode: int
    mu: str  # behaviour codes, e.g. "01"
    outcome: str  # success | collision | timeout
    score: float
    steps: int


@dataclass(frozen=True)
class ControllerSummary:
    controller: str
    episodes: int
    successes: int
    collisions: int
    timeouts: int
    success_rate: float
    avg_score: float  # mean score over non-collision episodes


@dataclass(frozen=True)
class EvalReport:
    summaries: dict[str, ControllerSummary]
    rows: list[EvalRow]


def stratified_mu(n_targets: int, m_eval: int, rng: np.random.Generator) -> list[EnvParams]:
    """Behaviour combinations for one evaluation repetition.

    When all 2^N combinations fit in the budget they are cycled in
    lexicographic order (each visit gets a fresh spawn seed elsewhere);
    otherwise m_eval distinct combinations are drawn without replacement.
    """
    combos = [EnvParams(tuple(c)) for c in itertools.product((0, 1), repeat=n_targets)]
    if len(combos) <= m_eval:
        return [combos[i % len(combos)] for i in range(m_eval)]
    order = rng.permutation(len(combos))[:m_eval]
    return [combos[int(i)] for i in order]


def _episode_rngs(seed: int, rep: int, episode: int):
    env_rng = np.random.default_rng(np.random.SeedSequence([seed, 101, rep, episode]))
    planner_rng = np.random.default_rng(np.random.SeedSequence([seed, 202, rep, episode]))
    return env_rng, planner_rng


def _load_policy(out: Path, name: str, controller: str):
    path = out / _CHECKPOINTS[name]
    if not path.exists():
        raise FileNotFoundError(
            f"controller {controller!r} needs checkpoint {name!r} at {path}; run train first"
        )
    net, _ = load_checkpoint(str(path))
    return greedy_policy(net)


def cmd_eval(
    cfg: ExperimentConfig,
    out_dir: str | None = None,
    controllers: tuple[str, ...] = DEFAULT_CONTROLLERS,
    m_eval: int | None = None,
    trace_dir: str | None = None,
) -> EvalReport:
    """Evaluate controllers over stratified behaviour draws and write CSVs."""
    out = Path(out_dir if out_dir is not None else cfg.out_dir)
    env = IntersectionEnv(cfg.env)
    m = m_eval if m_eval is not None else cfg.planner.m_eval
    unknown = [c for c in controllers if c not in DEFAULT_CONTROLLERS]
    if unknown:
        raise ValueError(f"unknown controllers {unknown}; choose from {DEFAULT_CONTROLLERS}")

    rows: list[EvalRow] = []
    for controller in controllers:
        if controller.startswith("h_"):
            pi1_name = "pi1_init" if controller == "h_init" else "pi1_noinit"
            portfolio = {
                "pi_star": _load_policy(out, "pi_star", controller),
                "pi1": _load_policy(out, pi1_name, controller),
            }
            single = None
        else:
            single = _load_policy(out, controller, controller)
            portfolio = None

        for rep in range(cfg.eval_reps):
            mu_rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, 303, rep]))
            mu_list = stratified_mu(cfg.env.n_targets, m, mu_rng)
            for i, mu in enumerate(mu_list):
                env_rng, planner_rng = _episode_rngs(cfg.seed, rep, i)
                if portfolio is not None:
                    ep = hiplanner.run_episode(
                        env, portfolio, mu, cfg.planner, env_rng, planner_rng
                    )
                    if trace_dir is not None:
                        Path(trace_dir).mkdir(parents=True, exist_ok=True)
                        hiplanner.write_planner_trace(
                            str(Path(trace_dir) / f"{controller}_r{rep}_e{i}.csv"),
                            ep,
                            list(portfolio),
                        )
                else:
                    ep = hiplanner.run_greedy_episode(env, single, mu, env_rng)
                outcome = (
                    "collision" if ep.collision else ("success" if ep.success else "timeout")
                )
                rows.append(
                    EvalRow(
                        controller=controller,
                        rep=rep,
                        episode=i,
                        mu="".join(str(b) for b in mu.behaviours),
                        outcome=outcome,
                        score=ep.trace.raw_score,
                        steps=ep.steps,
                    )
                )

    summaries = _summarize(controllers, rows)
    out.mkdir(parents=True, exist_ok=True)
    _write_eval_csvs(out, rows, summaries)
    _print_summary_table(summaries)
    return EvalReport(summaries=summaries, rows=rows)


def _summarize(
    controllers: tuple[str, ...], rows: list[EvalRow]
) -> dict[str, ControllerSummary]:
    summaries = {}
    for controller in controllers:
        sub = [r for r in rows if r.controller == controller]
        successes = sum(r.outcome == "success" for r in sub)
        collisions = sum(r.outcome == "collision" for r in sub)
        timeouts = sum(r.outcome == "timeout" for r in sub)
        non_failure = [r.score for r in sub if r.outcome != "collision"]
        summaries[controller] = ControllerSummary(
            controller=controller,
            episodes=len(sub),
            successes=successes,
            collisions=collisions,
            timeouts=timeouts,
            success_rate=successes / len(sub) if sub else float("nan"),
            avg_score=float(np.mean(non_failure)) if non_failure else float("nan"),
        )
    return summaries


def _write_eval_csvs(
    out: Path, rows: list[EvalRow], summaries: dict[str, ControllerSummary]
) -> None:
    ordered = sorted(rows, key=lambda r: (r.controller, r.rep, r.episode))
    with open(out / "eval_episodes.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["controller", "rep", "episode", "mu", "outcome", "score", "steps"])
        for r in ordered:
            writer.writerow(
                [r.controller, r.rep, r.episode, r.mu, r.outcome, r.score, r.steps]
            )
    with open(out / "eval_summary.csv", "w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(
            [
                "controller",
                "success_rate",
                "avg_score",
                "episodes",
                "successes",
                "collisions",
                "timeouts",
            ]
        )
        for name in sorted(summaries):
            s = summaries[name]
            writer.writerow(
                [
                    s.controller,
                    s.success_rate,
                    s.avg_score,
                    s.episodes,
                    s.successes,
                    s.collisions,
                    s.timeouts,
                ]
            )


def _print_summary_table(summaries: dict[str, ControllerSummary]) -> None:
    print(f"{'controller':<14} {'success':>8} {'avg score':>10} {'episodes':>9}")
    for name, s in summaries.items():
        print(f"{name:<14} {s.success_rate:>8.3f} {s.avg_score:>10.3f} {s.episodes:>9}")


# -- plot -------------------------------------------------------------------------


def moving_average(values: list[float], window: int) -> list[float]:
    """Trailing mean over up to `window` latest points; window=1 is identity."""
    if window < 1:
        raise ValueError("window must be >= 1")
    out = []
    for i in range(len(values)):
        tail = values[max(0, i - window + 1) : i + 1]
        out.append(sum(tail) / len(tail))
    return out


def cmd_plot(paths: list[str], window: int = 25, out_dir: str | None = None) -> list[Path]:
    """Smooth training CSVs into plot-ready columnar data, one file per input."""
    outputs = []
    for path_str in paths:
        path = Path(path_str)
        with open(path, newline="") as f:
            rows = list(csv.DictReader(f))
        if not rows:
            raise ValueError(f"{path}: no data rows to plot")
        series: dict[str, dict[str, list[float]]] = {}
        for row in rows:
            policy = series.setdefault(row["policy"], {"raw_score": [], "metric": []})
            policy["raw_score"].append(float(row["raw_score"]))
            policy["metric"].append(float(row["metric"]))
        out_path = (
            Path(out_dir) / f"{path.stem}_smoothed.csv"
            if out_dir
            else path.with_name(f"{path.stem}_smoothed.csv")
        )
        out_path.parent.mkdir(parents=True, exist_ok=True)
        with open(out_path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["policy", "episode", "raw_score_smooth", "metric_smooth"])
            for policy, cols in series.items():
                scores = moving_average(cols["raw_score"], window)
                metrics = moving_average(cols["metric"], window)
                for i, (s, m) in enumerate(zip(scores, metrics)):
                    writer.writerow([policy, i, s, m])
        outputs.append(out_path)
    return outputs


# -- CLI --------------------------------------------------------------------------


def cmd_print_config() -> str:
    return config_to_text(ExperimentConfig())


def _resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg = replace(cfg, seed=args.seed)
    if getattr(args, "out", None) is not None:
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="crossplan",
        description="Train, evaluate and inspect contingency-planning policies "
        "for the intersection-crossing task.",
    )
    parser.add_argument(
        "--print-config", action="store_true", help="print default config and exit"
    )
    sub = parser.add_subparsers(dest="command")

    p_train = sub.add_parser("train", help="train optimal and contingency policies")
    p_train.add_argument("--config", help="experiment config file")
    p_train.add_argument("--seed", type=int, help="override config seed")
    p_train.add_argument("--out", help="override output directory")
    p_train.add_argument(
        "--no-buffer-init",
        action="store_true",
        help="train the contingency policy without replay-buffer initialization (beta=0)",
    )
    p_train.add_argument("--progress", action="store_true", help="print progress to stderr")

    p_eval = sub.add_parser("eval", help="evaluate controllers over behaviour combinations")
    p_eval.add_argument("--config", help="experiment config file")
    p_eval.add_argument("--seed", type=int, help="override config seed")
    p_eval.add_argument("--out", help="override output directory")
    p_eval.add_argument(
        "--controllers",
        help=f"comma-separated subset of {','.join(DEFAULT_CONTROLLERS)}",
    )
    p_eval.add_argument("--m-eval", type=int, help="episodes per evaluation repetition")
    p_eval.add_argument("--trace-dir", help="write per-episode planner traces here")

    p_plot = sub.add_parser("plot", help="smooth training CSVs into plot data")
    p_plot.add_argument("csvs", nargs="+", help="training CSV files")
    p_plot.add_argument("--window", type=int, default=25, help="moving-average window")
    p_plot.add_argument("--out", help="output directory (default: next to input)")

    sub.add_parser("print-config", help="print default config and exit")

    args = parser.parse_args(argv)
    if args.print_config or args.command == "print-config":
        sys.stdout.write(cmd_print_config())
        return 0
    if args.command == "train":
        cfg = _resolve_config(args)
        paths = cmd_train(cfg, no_buffer_init=args.no_buffer_init, progress=args.progress)
        for name, path in paths.items():
            print(f"{name}: {path}")
        return 0
    if args.command == "eval":
        cfg = _resolve_config(args)
        controllers = (
            tuple(args.controllers.split(",")) if args.controllers else DEFAULT_CONTROLLERS
        )
        cmd_eval(cfg, controllers=controllers, m_eval=args.m_eval, trace_dir=args.trace_dir)
        return 0
    if args.command == "plot":
        for path in cmd_plot(args.csvs, window=args.window, out_dir=args.out):
            print(path)
        return 0
    parser.print_help()
    return 2


if __name__ == "__main__":
    raise SystemExit(main())
