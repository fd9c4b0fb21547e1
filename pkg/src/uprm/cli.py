"""Command-line front end for reproducible generate/train/eval runs.

Configuration is a flat UTF-8 file of `section.key = value` lines; flags
override config keys, config keys override built-in defaults. Every
command writes its effective configuration into the output directory so
a run can be reproduced from that file and the seed alone.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical
failure.
"""

import argparse
import math
import sys
from pathlib import Path

import numpy as np

from . import numerics as nm
from .datagen import builtin_profile, generate_dataset, read_dataset, write_dataset
from .errors import ConfigError, ContractError, DataError, TrainingError, UprmError
from .metrics import evaluate, report_table, write_report
from .router import DEFAULT_ALPHA, expert_utilization
from .seeding import derive_rng
from .training import (
    ABLATIONS,
    DEFAULT_WARMUP_RATIO,
    DEFAULT_WEIGHT_DECAY,
    DESK_LR,
    LoraConfig,
    ModelConfig,
    init_model,
    model_forward,
    param_count,
    predict_segments,
    read_checkpoint,
    train,
    write_checkpoint,
    write_loss_trace,
)

COMMANDS = ("gen-data", "train", "eval", "ablate", "inspect-router", "grad-check")

# key -> (type tag, default); booleans are written as true/false
SCHEMA = {
    "seed": ("int", 0),
    "out": ("str", ""),
    "data": ("str", ""),
    "eval_data": ("str", ""),
    "ckpt": ("str", ""),
    "ckpt_no_ptr": ("str", ""),
    "profile.name": ("str", "cuva-like"),
    "profile.video_count": ("int", 250),
    "profile.frames_per_video": ("int", 64),
    "profile.threat_rate": ("float", 0.5),
    "profile.pose_presence_rate": ("float", None),
    "profile.background_presence_rate": ("float", None),
    "profile.relation_presence_rate": ("float", None),
    "profile.cause_vocab_size": ("int", 8),
    "profile.coarse_plant": ("float", None),
    "profile.background_plant": ("float", None),
    "profile.cause_plant": ("float", None),
    "model.d": ("int", 32),
    "model.heads": ("int", 4),
    "model.node_dim": ("int", 16),
    "model.ore_layers": ("int", 2),
    "model.head_hidden": ("int", 0),
    "model.cause_vocab": ("int", 8),
    "optim.epochs": ("int", 1),
    "optim.batch_size": ("int", 8),
    "optim.lr": ("float", DESK_LR),
    "optim.warmup_ratio": ("float", DEFAULT_WARMUP_RATIO),
    "optim.weight_decay": ("float", DEFAULT_WEIGHT_DECAY),
    "optim.alpha": ("float", DEFAULT_ALPHA),
    "lora.enabled": ("bool", False),
    "lora.rank": ("int", 16),
    "lora.scale": ("float", 32.0),
    "lora.dropout": ("float", 0.05),
    "eval.threshold": ("float", 0.5),
    "ablate.variants": ("str", "full " + " ".join(ABLATIONS)),
    "grad.seeds": ("int", 10),
    "grad.corrupt_case": ("str", ""),  # test hook: break one case on purpose
}

# profile keys that pass straight through to the generator profile
_PROFILE_OVERRIDES = (
    "frames_per_video", "threat_rate", "pose_presence_rate",
    "background_presence_rate", "relation_presence_rate",
    "cause_vocab_size", "coarse_plant", "background_plant", "cause_plant",
)


def _parse_value(key: str, raw: str):
    kind = SCHEMA[key][0]
    raw = raw.strip()
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError("expected true or false")
            return low == "true"
        return raw
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {raw!r} ({e})") from e


class RunConfig:
    """Effective configuration: defaults, then file keys, then flags."""

    def __init__(self):
        self.values = {k: default for k, (_, default) in SCHEMA.items()}

    def __getitem__(self, key):
        return self.values[key]

    def set(self, key: str, raw: str):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = _parse_value(key, raw)

    @classmethod
    def load(cls, path) -> "RunConfig":
        cfg = cls()
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        seen = set()
        for i, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"{path}:{i}: expected key = value, got {line!r}")
            key, _, raw = line.partition("=")
            key = key.strip()
            if key in seen:
                raise ConfigError(f"{path}:{i}: duplicate key {key!r}")
            seen.add(key)
            cfg.set(key, raw)
        return cfg

    def validate(self):
        self.build_profile()
        self.build_model_config()
        if self["optim.epochs"] < 1:
            raise ConfigError(f"optim.epochs must be >= 1, got {self['optim.epochs']}")
        if self["optim.batch_size"] < 1:
            raise ConfigError(
                f"optim.batch_size must be >= 1, got {self['optim.batch_size']}")
        for key in ("optim.lr", "optim.warmup_ratio", "optim.weight_decay",
                    "optim.alpha"):
            v = self[key]
            if not (math.isfinite(v) and v >= 0.0):
                raise ConfigError(f"{key} must be finite and >= 0, got {v}")
        if not 0.0 < self["eval.threshold"] <= 1.0:
            raise ConfigError(
                f"eval.threshold must be in (0, 1], got {self['eval.threshold']}")
        if self["grad.seeds"] < 1:
            raise ConfigError(f"grad.seeds must be >= 1, got {self['grad.seeds']}")
        for name in self["ablate.variants"].split():
            if name != "full" and name not in ABLATIONS:
                raise ConfigError(
                    f"unknown ablation variant {name!r}; "
                    f"choose from full, {', '.join(ABLATIONS)}")

    def build_profile(self):
        overrides = {}
        for field in _PROFILE_OVERRIDES:
            v = self[f"profile.{field}"]
            if v is not None:
                overrides[field] = v
        return builtin_profile(self["profile.name"],
                               video_count=self["profile.video_count"],
                               seed=self["seed"], **overrides)

    def build_model_config(self) -> ModelConfig:
        return ModelConfig(
            d=self["model.d"], heads=self["model.heads"],
            node_dim=self["model.node_dim"], ore_layers=self["model.ore_layers"],
            head_hidden=self["model.head_hidden"],
            cause_vocab=self["model.cause_vocab"],
            lora=LoraConfig(rank=self["lora.rank"], scale=self["lora.scale"],
                            dropout=self["lora.dropout"],
                            enabled=self["lora.enabled"]),
        )

    def echo(self, path):
        lines = []
        for key in sorted(SCHEMA):
            v = self.values[key]
            if v is None:
                continue  # unset optional override; the preset value applies
            if isinstance(v, bool):
                v = "true" if v else "false"
            elif isinstance(v, float):
                v = repr(v)
            lines.append(f"{key} = {v}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def _out_dir(cfg: RunConfig, command: str) -> Path:
    out = Path(cfg["out"] or f"runs/{command}")
    out.mkdir(parents=True, exist_ok=True)
    cfg.echo(out / "config.txt")
    return out


def _required_path(cfg: RunConfig, key: str) -> Path:
    raw = cfg[key]
    if not raw:
        raise ConfigError(f"config key {key!r} is required for this command")
    return Path(raw)


def _load_videos(cfg: RunConfig, key: str = "data"):
    return read_dataset(_required_path(cfg, key))


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig) -> int:
    out = _out_dir(cfg, "gen-data")
    profile = cfg.build_profile()
    videos = generate_dataset(profile)
    path = out / "dataset.txt"
    write_dataset(videos, path, profile)
    n = len(videos)
    pose = sum(any(g is not None for g in v.poses.frames) for v in videos) / n
    bg = sum(v.background is not None for v in videos) / n
    rel = sum(any(s is not None for s in v.scenes) for v in videos) / n
    threat = sum(bool(v.ground_truth) for v in videos) / n
    print(f"wrote {path} ({n} videos, {profile.frames_per_video} frames each)")
    print(f"pose rate {pose:.4f}")
    print(f"background rate {bg:.4f}")
    print(f"relation rate {rel:.4f}")
    print(f"threat rate {threat:.4f}")
    return 0


def cmd_train(cfg: RunConfig) -> int:
    out = _out_dir(cfg, "train")
    videos = _load_videos(cfg)
    seed = cfg["seed"]
    params = init_model(derive_rng(seed, "model"), cfg.build_model_config())
    params, trace = train(
        params, videos, epochs=cfg["optim.epochs"],
        batch_size=cfg["optim.batch_size"], alpha=cfg["optim.alpha"],
        seed=seed, base_lr=cfg["optim.lr"],
        warmup_ratio=cfg["optim.warmup_ratio"],
        weight_decay=cfg["optim.weight_decay"])
    write_checkpoint(params, out / "model.ckpt", seed=seed)
    write_loss_trace(trace, out / "trace.txt")
    print(f"trained {param_count(params)} parameters for {len(trace)} steps")
    print(f"final loss {trace[-1][1]:.6f}")
    print(f"wrote {out / 'model.ckpt'} and {out / 'trace.txt'}")
    return 0


def cmd_eval(cfg: RunConfig) -> int:
    out = _out_dir(cfg, "eval")
    videos = _load_videos(cfg)
    params, _ = read_checkpoint(_required_path(cfg, "ckpt"))
    threshold = cfg["eval.threshold"]
    preds = {v.id: predict_segments(params, v, threshold=threshold)
             for v in videos}
    report = evaluate(preds, videos)
    write_report(report, out / "report.txt")
    print(report_table(report), end="")
    print(f"wrote {out / 'report.txt'}")
    return 0


def _format_rows(headers, rows) -> str:
    widths = [max(len(h), *(len(r[i]) for r in rows))
              for i, h in enumerate(headers)]
    lines = ["  ".join(h.ljust(w) for h, w in zip(headers, widths)).rstrip(),
             "  ".join("-" * w for w in widths)]
    for r in rows:
        lines.append("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip())
    return "\n".join(lines) + "\n"


def cmd_ablate(cfg: RunConfig) -> int:
    out = _out_dir(cfg, "ablate")
    train_videos = _load_videos(cfg)
    if cfg["eval_data"]:
        eval_videos = _load_videos(cfg, "eval_data")
    else:
        eval_videos = train_videos
        print("note: eval_data not set, scoring on the training data")
    seed = cfg["seed"]
    threshold = cfg["eval.threshold"]
    init = init_model(derive_rng(seed, "model"), cfg.build_model_config())
    variants = cfg["ablate.variants"].split()
    rows = []
    for name in variants:
        ablation = None if name == "full" else name
        fitted, _ = train(
            init, train_videos, epochs=cfg["optim.epochs"],
            batch_size=cfg["optim.batch_size"], alpha=cfg["optim.alpha"],
            seed=seed, base_lr=cfg["optim.lr"],
            warmup_ratio=cfg["optim.warmup_ratio"],
            weight_decay=cfg["optim.weight_decay"], ablation=ablation)
        preds = {v.id: predict_segments(fitted, v, threshold=threshold,
                                        ablation=ablation)
                 for v in eval_videos}
        rep = evaluate(preds, eval_videos)
        label = name if name == "full" else "w/o " + {
            "no_hpe": "HPE", "no_ore": "ORE", "no_vbe": "VBE",
            "no_upe": "UPE", "no_ptr": "PTR"}[name]
        rows.append([label, f"{rep.fnr:.4f}", f"{rep.f2:.4f}",
                     f"{rep.mean_map:.4f}"])
    table = _format_rows(["variant", "FNR", "F2", "mean-mAP"], rows)
    (out / "ablation.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    print(f"wrote {out / 'ablation.txt'}")
    return 0


def _utilization_row(params, videos):
    decisions = [model_forward(params, v)[2] for v in videos]
    shares = expert_utilization(decisions)
    fine = shares[:3] / shares[:3].sum()
    entropy = float(-(fine * np.log(fine, where=fine > 0,
                                    out=np.zeros_like(fine))).sum())
    return shares, entropy


def cmd_inspect_router(cfg: RunConfig) -> int:
    out = _out_dir(cfg, "inspect-router")
    videos = _load_videos(cfg)
    full_params, _ = read_checkpoint(_required_path(cfg, "ckpt"))
    ptr_params, _ = read_checkpoint(_required_path(cfg, "ckpt_no_ptr"))
    rows = []
    for label, params in (("full", full_params), ("w/o PTR", ptr_params)):
        shares, entropy = _utilization_row(params, videos)
        rows.append([label] + [f"{s:.4f}" for s in shares] + [f"{entropy:.4f}"])
    table = _format_rows(
        ["model", "pose", "relation", "background", "coarse", "fine-entropy"],
        rows)
    (out / "router.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    print(f"wrote {out / 'router.txt'}")
    return 0


def cmd_grad_check(cfg: RunConfig) -> int:
    out = _out_dir(cfg, "grad-check")
    n_seeds = cfg["grad.seeds"]
    corrupt = cfg["grad.corrupt_case"]
    if corrupt and corrupt not in nm.GRAD_CASES:
        raise ConfigError(f"grad.corrupt_case {corrupt!r} is not a registered case")
    rows = []
    failed = []
    for name in sorted(nm.GRAD_CASES):
        worst = 0.0
        ok = True
        for seed in range(n_seeds):
            f, inputs, mc = nm.GRAD_CASES[name](seed)
            if name == corrupt:
                f = _corrupt(f)
            rep = nm.grad_check(f, inputs, max_coords=mc)
            worst = max(worst, rep.max_rel_error)
            ok = ok and rep.passed
        rows.append([name, str(n_seeds), f"{worst:.3e}",
                     "PASS" if ok else "FAIL"])
        if not ok:
            failed.append(name)
    table = _format_rows(["op", "seeds", "max-rel-error", "status"], rows)
    (out / "grad_report.txt").write_text(table, encoding="utf-8")
    print(table, end="")
    if failed:
        print(f"gradient check failed for: {', '.join(failed)}", file=sys.stderr)
        return 4
    print(f"all {len(rows)} cases passed at {n_seeds} seeds each")
    return 0


def _corrupt(f):
    """Add a term the tape cannot see, so the adjoint comes out wrong."""
    def broken(*args):
        drift = 0.05 * float(np.sum(nm.value_of(args[0])))
        return nm.add(f(*args), np.full((1, 1), drift))
    return broken


# ---------------------------------------------------------------------------
# argument parsing and dispatch


_DISPATCH = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "inspect-router": cmd_inspect_router,
    "grad-check": cmd_grad_check,
}


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="uprm",
        description="Synthetic security-video threat detection runs: data "
                    "generation, training, evaluation, ablations, router "
                    "inspection, and gradient checking.",
        epilog="UPRM_THREADS caps the worker count (default: all cores).")
    sub = parser.add_subparsers(dest="command", required=True)
    descriptions = {
        "gen-data": "generate a synthetic dataset and print modality rates",
        "train": "train a model on a dataset file, write checkpoint + trace",
        "eval": "score a checkpoint on a dataset, write a metric report",
        "ablate": "train and score every expert/regularizer ablation variant",
        "inspect-router": "tabulate expert utilization for two checkpoints",
        "grad-check": "finite-difference check of every registered adjoint",
    }
    for name in COMMANDS:
        p = sub.add_parser(name, help=descriptions[name])
        p.add_argument("--config", metavar="PATH", help="key=value config file")
        p.add_argument("--seed", type=int, metavar="N")
        p.add_argument("--out", metavar="DIR")
        p.add_argument("--alpha", type=float, metavar="R",
                       help="trade-off loss weight")
        p.add_argument("--threshold", type=float, metavar="R",
                       help="segment decoding threshold")
        p.add_argument("--profile", metavar="NAME",
                       help="builtin generator profile")
    return parser


_FLAG_KEYS = {"seed": "seed", "out": "out", "alpha": "optim.alpha",
              "threshold": "eval.threshold", "profile": "profile.name"}


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig()
        for flag, key in _FLAG_KEYS.items():
            v = getattr(args, flag)
            if v is not None:
                cfg.set(key, str(v))
        cfg.validate()
        return _DISPATCH[args.command](cfg)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except TrainingError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except ContractError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except UprmError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
