"""Command-line front end: run one experiment, sweep a parameter grid, or
compare finished runs."""

from __future__ import annotations

import argparse
import itertools
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .errors import MasaflError
from .harness import run_experiment
from .reporting import (
    RunManifest,
    compare_runs,
    config_from_dict,
    config_to_dict,
    emit_results,
    format_comparison,
    render_summary,
    write_manifest,
)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


def _load_raw_config(path) -> dict:
    if path is None:
        return {}
    text = Path(path).read_text()
    return json.loads(text) if text.strip() else {}


def _apply_overrides(raw: dict, args) -> dict:
    if args.seed is not None:
        raw["seed"] = args.seed
    if args.defense is not None:
        raw["defense"] = args.defense
    if args.attack is not None:
        raw["attack"] = None if args.attack in ("none", "null") else {"kind": args.attack}
    return raw


def _run_single(raw: dict, out_dir: Path) -> dict:
    cfg = config_from_dict(raw)
    started = _now()
    report = run_experiment(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = emit_results(report, out_dir)
    manifest = RunManifest(
        config=config_to_dict(cfg),
        code_version=__version__,
        started=started,
        finished=_now(),
        outputs={k: Path(v).name for k, v in outputs.items()},
    )
    outputs["manifest"] = write_manifest(manifest, out_dir)
    return {"report": report, "outputs": outputs}


def _cmd_run(args) -> int:
    raw = _apply_overrides(_load_raw_config(args.config), args)
    result = _run_single(raw, Path(args.out))
    sys.stdout.write(render_summary(result["report"]))
    sys.stdout.write(f"artifacts: {Path(args.out).resolve()}\n")
    return 0


def _set_dotted(raw: dict, dotted: str, value) -> None:
    keys = dotted.split(".")
    node = raw
    for key in keys[:-1]:
        node = node.setdefault(key, {})
    node[keys[-1]] = value


def _cmd_sweep(args) -> int:
    spec = _load_raw_config(args.config)
    if "grid" not in spec:
        raise MasaflError("sweep config needs a 'grid' section of dotted-key lists")
    base = spec.get("base", {})
    if args.seed is not None:
        base["seed"] = args.seed
    grid = spec["grid"]
    keys = sorted(grid)
    out_root = Path(args.out)
    out_root.mkdir(parents=True, exist_ok=True)
    summary_lines = ["combo," + ",".join(keys) + ",final_ma,final_ba,final_ra,tpr,fpr"]
    for combo in itertools.product(*(grid[k] for k in keys)):
        raw = json.loads(json.dumps(base))  # deep copy
        label = "_".join(f"{k}={v}" for k, v in zip(keys, combo))
        for k, v in zip(keys, combo):
            _set_dotted(raw, k, v)
        result = _run_single(raw, out_root / label)
        s = result["report"].summary
        tpr = s.get("tpr_post_warmup")
        fpr = s.get("fpr_post_warmup")
        summary_lines.append(
            f"{label}," + ",".join(repr(v) for v in combo)
            + f",{s['final_ma']!r},{s['final_ba']!r},{s['final_ra']!r}"
            + f",{'' if tpr is None else repr(tpr)},{'' if fpr is None else repr(fpr)}"
        )
        sys.stdout.write(f"done {label}\n")
    (out_root / "sweep_summary.csv").write_text("\n".join(summary_lines) + "\n")
    sys.stdout.write(f"sweep summary: {out_root / 'sweep_summary.csv'}\n")
    return 0


def _cmd_compare(args) -> int:
    rows = compare_runs(args.manifests)
    sys.stdout.write(format_comparison(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="masafl",
        description="Deterministic federated-learning simulator with backdoor "
        "attacks and robust aggregation defenses.",
    )
    parser.add_argument("--version", action="version", version=f"masafl {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run one experiment")
    run_p.add_argument("--config", help="JSON config file; omit for all defaults")
    run_p.add_argument("--out", default="masafl_out", help="output directory")
    run_p.add_argument("--seed", type=int, help="override the config seed")
    run_p.add_argument("--defense", help="override the defense rule")
    run_p.add_argument("--attack", help="override the attack kind ('none' disables)")
    run_p.set_defaults(func=_cmd_run)

    sweep_p = sub.add_parser("sweep", help="run a grid of experiments")
    sweep_p.add_argument("--config", required=True,
                         help="JSON with 'base' config and 'grid' of dotted-key lists")
    sweep_p.add_argument("--out", default="masafl_sweep", help="output directory")
    sweep_p.add_argument("--seed", type=int, help="override the base seed")
    sweep_p.set_defaults(func=_cmd_sweep)

    cmp_p = sub.add_parser("compare", help="compare finished runs")
    cmp_p.add_argument("manifests", nargs="+", help="manifest.json paths")
    cmp_p.set_defaults(func=_cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (MasaflError, OSError, json.JSONDecodeError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
