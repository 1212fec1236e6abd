"""Config file parsing, result persistence, and run comparison.

Configs are JSON with nested sections mirroring ExperimentConfig; every
unset field takes the library default. Emitted artifacts are a per-round
CSV, a full JSON report (including per-client unlearning losses and
scores when the masa defense ran), and a plain-text summary table.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .attacks import AttackSpec, TrainConfig
from .data import PoisonSpec, TriggerSpec, plus_trigger
from .errors import ComparisonError, ConfigError
from .harness import ExperimentConfig, ExperimentReport, RoundReport
from .masa import MasaConfig

CSV_HEADER = "round,ma,ba,ra,tpr,fpr,n_selected"

_TOP_LEVEL_KEYS = {
    "n_clients", "clients_per_round", "rounds", "attack_ratio", "attack",
    "poison", "distribution", "dirichlet_alpha", "defense", "defense_params",
    "train", "masa", "classes", "per_class", "test_per_class", "image_shape",
    "hidden_units", "proxy_fraction", "proxy_shifted", "seed", "n_workers",
}


@dataclass
class RunManifest:
    """What was run, with which code, and where the artifacts landed."""

    config: dict
    code_version: str
    started: str
    finished: str
    outputs: dict = field(default_factory=dict)


def _check_keys(section: str, raw: dict, allowed) -> None:
    for key in raw:
        if key not in allowed:
            where = f"{section}.{key}" if section else key
            raise ConfigError(f"unknown config key {where!r}")


def _build(section: str, cls, raw: dict):
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigError(f"{section}: {exc}") from exc
    except ConfigError as exc:
        raise ConfigError(f"{section}: {exc}") from exc


def _parse_trigger(raw) -> TriggerSpec:
    if raw is None:
        return plus_trigger()
    _check_keys("poison.trigger", raw, {"pattern", "anchor", "shape_name", "value"})
    anchor = tuple(raw.get("anchor", (1, 1)))
    if "pattern" in raw:
        pattern = tuple((int(r), int(c), float(v)) for r, c, v in raw["pattern"])
        return TriggerSpec(pattern, anchor=anchor, shape_name=raw.get("shape_name", "plus"))
    return plus_trigger(anchor=anchor, value=float(raw.get("value", 1.0)))


def _parse_attack(raw) -> AttackSpec | None:
    if raw is None:
        return None
    if isinstance(raw, str):
        if raw in ("none", "null", ""):
            return None
        return _build("attack", AttackSpec, {"kind": raw})
    _check_keys("attack", raw, {
        "kind", "scale_factor", "pgd_radius_factor", "mask_percentile",
        "lie_z", "dba_part_index",
    })
    return _build("attack", AttackSpec, raw)


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Validated ExperimentConfig from a (possibly partial) plain dict."""
    _check_keys("", raw, _TOP_LEVEL_KEYS)
    kwargs = dict(raw)

    if "attack" in kwargs:
        kwargs["attack"] = _parse_attack(kwargs["attack"])
    if "poison" in kwargs:
        poison_raw = dict(kwargs["poison"])
        _check_keys("poison", poison_raw, {"ratio", "target_label", "trigger"})
        poison_raw["trigger"] = _parse_trigger(poison_raw.get("trigger"))
        kwargs["poison"] = _build("poison", PoisonSpec, poison_raw)
    if "train" in kwargs:
        _check_keys("train", kwargs["train"], {
            "epochs", "learning_rate", "lr_decay", "momentum", "batch_size",
        })
        kwargs["train"] = _build("train", TrainConfig, kwargs["train"])
    if "masa" in kwargs:
        _check_keys("masa", kwargs["masa"], {
            "fusion_degree", "filter_radius", "unlearn_epochs", "unlearn_rate",
            "unlearn_momentum", "batch_size", "loss_cap",
        })
        kwargs["masa"] = _build("masa", MasaConfig, kwargs["masa"])
    if "image_shape" in kwargs:
        kwargs["image_shape"] = tuple(int(v) for v in kwargs["image_shape"])

    return _build("config", ExperimentConfig, kwargs)


def parse_config(path) -> ExperimentConfig:
    """Read a JSON config file; an empty file means all defaults."""
    text = Path(path).read_text()
    if not text.strip():
        raw = {}
    else:
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: top level must be an object")
    return config_from_dict(raw)


def config_to_dict(cfg: ExperimentConfig) -> dict:
    """Plain-dict snapshot that parses back to an equal config."""
    out = asdict(cfg)
    out["image_shape"] = list(cfg.image_shape)
    if cfg.attack is not None:
        out["attack"] = asdict(cfg.attack)
    out["poison"] = {
        "ratio": cfg.poison.ratio,
        "target_label": cfg.poison.target_label,
        "trigger": {
            "pattern": [list(p) for p in cfg.poison.trigger.pattern],
            "anchor": list(cfg.poison.trigger.anchor),
            "shape_name": cfg.poison.trigger.shape_name,
        },
    }
    return out


def _fmt(value) -> str:
    if value is None:
        return ""
    return repr(float(value))


def round_to_dict(r: RoundReport) -> dict:
    return {
        "round": r.round_index,
        "ma": r.ma,
        "ba": r.ba,
        "ra": r.ra,
        "tpr": r.tpr,
        "fpr": r.fpr,
        "sampled": list(r.sampled),
        "malicious_sampled": list(r.malicious_sampled),
        "selected": list(r.selected),
        "n_selected": r.n_selected,
        "global_update_norm": r.global_update_norm,
        "unlearning": r.unlearning,
    }


def render_csv(report: ExperimentReport) -> str:
    lines = [CSV_HEADER]
    for r in report.rounds:
        lines.append(
            f"{r.round_index},{_fmt(r.ma)},{_fmt(r.ba)},{_fmt(r.ra)},"
            f"{_fmt(r.tpr)},{_fmt(r.fpr)},{r.n_selected}"
        )
    return "\n".join(lines) + "\n"


def render_summary(report: ExperimentReport) -> str:
    s = report.summary
    defense = report.config.get("defense", "?")
    lines = [
        f"{'method':<12}{'MA':>9}{'BA':>9}{'RA':>9}",
        f"{defense:<12}{s['final_ma']:>9.2f}{s['final_ba']:>9.2f}{s['final_ra']:>9.2f}",
    ]
    if s.get("tpr_all") is not None:
        lines.append("")
        lines.append(f"{'window':<14}{'TPR':>9}{'FPR':>9}")
        lines.append(
            f"{'all rounds':<14}{s['tpr_all']:>9.2f}"
            f"{(s['fpr_all'] if s['fpr_all'] is not None else float('nan')):>9.2f}"
        )
        if s.get("tpr_post_warmup") is not None:
            lines.append(
                f"{'post-warmup':<14}{s['tpr_post_warmup']:>9.2f}"
                f"{(s['fpr_post_warmup'] if s['fpr_post_warmup'] is not None else float('nan')):>9.2f}"
            )
    return "\n".join(lines) + "\n"


def emit_results(report: ExperimentReport, out_dir) -> dict:
    """Write rounds.csv, report.json, and summary.txt; returns the paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {
        "csv": out / "rounds.csv",
        "report": out / "report.json",
        "summary": out / "summary.txt",
    }
    try:
        paths["csv"].write_text(render_csv(report))
        payload = {
            "config": report.config,
            "summary": report.summary,
            "rounds": [round_to_dict(r) for r in report.rounds],
        }
        paths["report"].write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
        paths["summary"].write_text(render_summary(report))
    except OSError as exc:
        raise OSError(f"failed writing results under {out}: {exc}") from exc
    return {k: str(v) for k, v in paths.items()}


def write_manifest(manifest: RunManifest, out_dir) -> str:
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(asdict(manifest), indent=2, sort_keys=True) + "\n")
    return str(path)


def _scenario_key(config: dict) -> dict:
    ignored = {"defense", "defense_params", "masa", "seed", "n_workers",
               "proxy_fraction", "proxy_shifted"}
    return {k: v for k, v in config.items() if k not in ignored}


def load_manifest(path) -> tuple[RunManifest, dict]:
    """Manifest plus its referenced report payload."""
    p = Path(path)
    if not p.exists():
        raise ComparisonError(f"manifest not found: {p}")
    raw = json.loads(p.read_text())
    manifest = RunManifest(**raw)
    report_path = Path(manifest.outputs.get("report", p.parent / "report.json"))
    if not report_path.is_absolute():
        report_path = p.parent / report_path
    if not report_path.exists():
        raise ComparisonError(f"report not found: {report_path}")
    return manifest, json.loads(report_path.read_text())


def compare_runs(manifest_paths) -> list[dict]:
    """Side-by-side defense comparison for runs of one scenario.

    Rows carry avg BA / avg RA plus deltas against the best run; the
    lowest-BA and highest-RA runs are flagged.
    """
    paths = list(manifest_paths)
    if len(paths) < 2:
        raise ComparisonError("need at least two manifests to compare")
    entries = []
    scenario = None
    for path in paths:
        manifest, payload = load_manifest(path)
        key = _scenario_key(payload["config"])
        if scenario is None:
            scenario = key
        elif key != scenario:
            raise ComparisonError(
                f"{path}: scenario differs from {paths[0]} "
                f"(dataset/attack settings must match)"
            )
        entries.append((manifest, payload))

    best_ba = min(e[1]["summary"]["final_ba"] for e in entries)
    best_ra = max(e[1]["summary"]["final_ra"] for e in entries)
    rows = []
    for (manifest, payload), path in zip(entries, paths):
        s = payload["summary"]
        flags = ""
        if s["final_ba"] == best_ba:
            flags += "*"
        if s["final_ra"] == best_ra:
            flags += "+"
        rows.append({
            "manifest": str(path),
            "defense": payload["config"].get("defense", "?"),
            "seed": payload["config"].get("seed"),
            "ma": s["final_ma"],
            "ba": s["final_ba"],
            "ra": s["final_ra"],
            "ba_delta": s["final_ba"] - best_ba,
            "ra_delta": best_ra - s["final_ra"],
            "flags": flags,
        })
    return rows


def format_comparison(rows) -> str:
    """Plain-text table; '*' marks the lowest BA, '+' the highest RA."""
    lines = [
        f"{'defense':<12}{'seed':>6}{'MA':>9}{'BA':>9}{'RA':>9}{'dBA':>8}{'dRA':>8}  flags",
    ]
    for r in rows:
        lines.append(
            f"{r['defense']:<12}{r['seed']:>6}{r['ma']:>9.2f}{r['ba']:>9.2f}"
            f"{r['ra']:>9.2f}{r['ba_delta']:>8.2f}{r['ra_delta']:>8.2f}  {r['flags']}"
        )
    return "\n".join(lines) + "\n"
