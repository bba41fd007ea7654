"""Command-line entry point: ``coldnas {prepare,search,eval,canon,report}``."""

from __future__ import annotations

import argparse
import configparser
import hashlib
import io
import json
import logging
import os
import sys
import time
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Optional

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4

log = logging.getLogger("coldnas")

# Final hyperparameters per benchmark; the synthetic column is sized for a single CPU core.
TABLE5 = {
    "movielens": {"learning_rate": 5e-5, "r_dim": 1024, "max_epochs": 50},
    "bookcrossing": {"learning_rate": 5e-6, "r_dim": 512, "max_epochs": 50},
    "lastfm": {"learning_rate": 1e-4, "r_dim": 256, "max_epochs": 100},
    "synthetic": {"learning_rate": 1e-3, "r_dim": 32, "max_epochs": 150, "emb_dim": 8,
                  "hidden": "32,16,8,1", "optimizer": "adam", "input_bias": False, "patience": 150},
}
STRATEGIES = ("oneshot", "bilevel", "random_original", "random_transformed", "fixed_film")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    # [dataset]
    path: str = ""
    format: str = "synthetic"  # movielens | csv | synthetic
    preset: str = "synthetic"
    N: int = 20
    min_len: int = 40
    max_len: int = 200
    seed: int = 0
    columns: str = ""  # csv only: "col:role, col:role"
    subsample: float = 1.0  # fraction of users kept
    planted: str = "h*p1+p2"
    n_users: int = 300
    n_items: int = 200
    noise_sd: float = 0.05
    # [model]
    emb_dim: int = 32
    hidden: str = "128,64,32,1"
    r_dim: int = 1024
    input_bias: bool = True
    # [search]
    strategy: str = "oneshot"
    learning_rate: float = 1e-4
    batch_size: int = 32
    max_epochs: int = 50
    K: int = 4
    optimizer: str = "sgd"
    patience: int = 5
    min_delta: float = 1e-4
    alpha_lr: float = 0.0  # 0 means: same as learning_rate
    alpha_optimizer: str = ""
    alpha_steps: int = 1
    budget: int = 10
    C: int = 4
    # [output]
    out_dir: str = "runs"

    SECTIONS = {
        "dataset": ("path", "format", "preset", "N", "min_len", "max_len", "seed", "columns", "subsample",
                    "planted", "n_users", "n_items", "noise_sd"),
        "model": ("emb_dim", "hidden", "r_dim", "input_bias"),
        "search": ("strategy", "learning_rate", "batch_size", "max_epochs", "K", "optimizer", "patience",
                   "min_delta", "alpha_lr", "alpha_optimizer", "alpha_steps", "budget", "C"),
        "output": ("out_dir",),
    }

    @classmethod
    def from_file(cls, path: Optional[str]) -> "RunConfig":
        parser = configparser.ConfigParser()
        parser.optionxform = str  # keep key case (N, K, C)
        if path:
            if not Path(path).exists():
                raise ConfigError(f"config file not found: {path}")
            try:
                parser.read(path, encoding="utf-8")
            except configparser.Error as e:
                raise ConfigError(str(e)) from e
        preset = parser.get("dataset", "preset", fallback="synthetic")
        if preset not in TABLE5:
            raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(TABLE5)}")
        values = {**TABLE5[preset]}
        types = {f.name: f.type for f in fields(cls)}
        for section, keys in cls.SECTIONS.items():
            if not parser.has_section(section):
                continue
            for key in parser[section]:
                if key not in keys:
                    raise ConfigError(f"unknown key [{section}] {key}")
                values[key] = parser[section][key]
        for extra in parser.sections():
            if extra not in cls.SECTIONS:
                raise ConfigError(f"unknown section [{extra}]")
        out = {}
        for key, raw in values.items():
            out[key] = _coerce(key, raw, types[key])
        cfg = cls(**out)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.format not in ("movielens", "csv", "synthetic"):
            raise ConfigError(f"unknown dataset format {self.format!r}")
        if self.format != "synthetic":
            if not self.path or not Path(self.path).exists():
                raise ConfigError(f"dataset path does not exist: {self.path!r}")
        if self.format == "csv" and not self.columns:
            raise ConfigError("csv datasets need a 'columns' mapping")
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown strategy {self.strategy!r}; choose from {STRATEGIES}")
        widths = self.hidden_widths()
        if not widths or min(widths) < 1 or self.emb_dim < 1 or self.r_dim < 1:
            raise ConfigError("model widths must be positive")
        if widths[-1] != 1:
            raise ConfigError("the last hidden width must be 1")
        if not 0 < self.subsample <= 1:
            raise ConfigError("subsample must lie in (0, 1]")
        if self.learning_rate <= 0 or self.budget < 1 or self.K < 1:
            raise ConfigError("learning_rate, budget and K must be positive")

    def hidden_widths(self) -> tuple[int, ...]:
        try:
            return tuple(int(w) for w in str(self.hidden).split(",") if w.strip())
        except ValueError:
            raise ConfigError(f"bad hidden widths {self.hidden!r}") from None

    def model_config(self):
        from .model import ModelConfig

        return ModelConfig(self.emb_dim, self.hidden_widths(), self.r_dim, self.input_bias)

    def train_config(self):
        from .search import TrainConfig

        return TrainConfig(self.learning_rate, self.batch_size, self.max_epochs, self.K, self.seed,
                           self.optimizer, self.patience, self.min_delta, self.alpha_lr or None,
                           self.alpha_optimizer or None, self.alpha_steps)

    def to_ini(self) -> str:
        parser = configparser.ConfigParser()
        parser.optionxform = str
        for section, keys in self.SECTIONS.items():
            parser[section] = {k: str(getattr(self, k)) for k in keys}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()

    @property
    def out(self) -> Path:
        return Path(self.out_dir)


def _coerce(key, raw, typ):
    if not isinstance(raw, str):
        return raw
    try:
        if typ in (bool, "bool"):
            if raw.strip().lower() in ("1", "true", "yes", "on"):
                return True
            if raw.strip().lower() in ("0", "false", "no", "off"):
                return False
            raise ValueError
        if typ in (int, "int"):
            return int(raw)
        if typ in (float, "float"):
            return float(raw)
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None
    return raw.strip()


# --- commands ---------------------------------------------------------------


def _prepared_dir(cfg: RunConfig) -> Path:
    return cfg.out / "prepared"


def _sha(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def load_dataset(cfg: RunConfig):
    from . import data

    if cfg.format == "synthetic":
        ds, truth = data.make_synthetic(cfg.planted, cfg.n_users, cfg.n_items, cfg.noise_sd, cfg.seed)
        return ds, truth
    if cfg.format == "movielens":
        root = Path(cfg.path)
        ds = data.parse_movielens(root / "ratings.dat", root / "users.dat", root / "movies.dat")
    else:
        spec = {}
        for part in cfg.columns.split(","):
            if ":" not in part:
                raise ConfigError(f"bad column mapping {part!r}; expected col:role")
            col, role = (s.strip() for s in part.split(":", 1))
            spec[col] = role
        ds = data.parse_generic_csv(cfg.path, spec, name=cfg.preset)
    return ds, None


def subsample_users(interactions, fraction: float, seed: int):
    import numpy as np

    if fraction >= 1.0:
        return interactions
    users = sorted({it.user_id for it in interactions})
    keep = set(np.random.default_rng(seed).choice(users, size=max(1, round(fraction * len(users))), replace=False).tolist())
    return [it for it in interactions if it.user_id in keep]


def cmd_prepare(cfg: RunConfig) -> int:
    from . import data

    ds, truth = load_dataset(cfg)
    interactions = subsample_users(ds.interactions, cfg.subsample, cfg.seed)
    overrides = {"N": cfg.N, "min_len": cfg.min_len, "max_len": cfg.max_len} if cfg.preset != "bookcrossing" else {}
    split = data.prepare_split(interactions, cfg.preset, cfg.seed, **overrides)
    out = _prepared_dir(cfg)
    out.mkdir(parents=True, exist_ok=True)
    digest = data.save_split(split, ds.schema, out / "split.npz")
    _write(out / "schema.json", json.dumps(ds.schema.to_dict(), indent=1))
    if ds.encoder.tables:
        ds.encoder.save(out / "encodings")
    counts = split.counts()
    manifest = {
        "dataset": ds.schema.name,
        "users_per_split": counts,
        "kept_users": sum(counts.values()),
        "interactions": len(interactions),
        "split_sha256": digest,
        "schema_hash": ds.schema.fingerprint(),
        "seed": cfg.seed,
        "parse_stats": ds.stats,
    }
    if truth is not None:
        manifest["planted"] = {"expression": str(truth.planted), "layer": truth.layer}
        _write(out / "planted.json", json.dumps(manifest["planted"], indent=1))
    _write(out / "manifest.json", json.dumps(manifest, indent=1, sort_keys=True))
    print(f"prepared {manifest['kept_users']} users: " + ", ".join(f"{k}={v}" for k, v in counts.items()))
    print(f"manifest sha256 {_sha(out / 'manifest.json')}")
    return EXIT_OK


def _load_prepared(cfg: RunConfig):
    from . import data

    path = _prepared_dir(cfg) / "split.npz"
    if not path.exists():
        raise data.DataError(f"no prepared split at {path}; run 'coldnas prepare' first")
    return data.load_split(path)


def cmd_search(cfg: RunConfig) -> int:
    from .search import MetricsLog, run_search

    split, schema = _load_prepared(cfg)
    out = cfg.out / "search" / cfg.strategy
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "config.ini", cfg.to_ini())
    metrics = out / "metrics.jsonl"
    if metrics.exists():
        metrics.unlink()
    log_ = MetricsLog(metrics)
    t0 = time.perf_counter()
    res = run_search(split, schema, cfg.strategy, cfg.train_config(), cfg.model_config(), cfg.budget, cfg.C, log_)
    if res.supernet is not None:
        res.supernet.save(out / "supernet.npz")
        _write(out / "alphas.json", json.dumps(res.alphas.to_list()))
    res.model.save(out / "model.npz")
    notation = res.assignment.notation()
    _write(out / "structure.json", json.dumps(res.assignment.to_dict(), indent=1))
    _write(out / "structure.txt", "\n".join(f"M^{l}: {s}" for l, s in enumerate(notation)) + "\n")
    timings = dict(res.timings)
    timings["overhead"] = max(0.0, time.perf_counter() - t0 - timings["total"])
    _write(out / "timings.json", json.dumps(timings, indent=1))
    if res.report is not None:
        _write(out / "report.json", res.report.to_json())
    _write(out / "log_checksum.txt", log_.checksum() + "\n")
    print("selected structure:")
    for l, s in enumerate(notation):
        print(f"  M^{l} = {s}")
    print(f"timing: search {timings['search']:.1f}s, retrain {timings['retrain']:.1f}s, eval {timings['eval']:.1f}s")
    if res.report is not None:
        _print_reports([("test", res.report)])
    return EXIT_OK


def _print_reports(rows, ks=(3, 5)) -> None:
    header = ["split", "MSE", "MAE"] + [f"nDCG{k}" for k in ks] + ["n_tasks"]
    print("\t".join(header))
    for name, rep in rows:
        r = rep.row(ks)
        print("\t".join([name] + [f"{r[h]:.4f}" for h in header[1:-1]] + [str(r["n_tasks"])]))


def cmd_eval(cfg: RunConfig, checkpoint: Optional[str], fractions, ks) -> int:
    import numpy as np

    from .data import DataError
    from .evaluation import evaluate
    from .model import CheckpointError, ColdStartModel

    split, schema = _load_prepared(cfg)
    ckpt = Path(checkpoint) if checkpoint else cfg.out / "search" / cfg.strategy / "model.npz"
    if not ckpt.exists():
        raise DataError(f"checkpoint not found: {ckpt}")
    try:
        model = ColdStartModel.load(ckpt, schema)
    except CheckpointError as e:
        raise DataError(str(e)) from e
    rows = []
    rng = np.random.default_rng(cfg.seed)
    for f in fractions:
        tasks = split.test
        if f < 1.0:
            tasks = [t.with_support([t.support[i] for i in sorted(rng.choice(len(t.support), max(1, round(f * len(t.support))), replace=False))])
                     for t in split.test]
        rows.append((f"support={f:g}", evaluate(model, tasks, ks=ks)))
    _print_reports(rows, ks)
    out = cfg.out / "eval"
    out.mkdir(parents=True, exist_ok=True)
    lines = ["fraction\tMSE\tMAE\t" + "\t".join(f"nDCG{k}" for k in ks)]
    for (name, rep), f in zip(rows, fractions):
        r = rep.row(ks)
        lines.append("\t".join([f"{f:g}", f"{r['MSE']:.6f}", f"{r['MAE']:.6f}"] + [f"{r[f'nDCG{k}']:.6f}" for k in ks]))
    _write(out / "eval.tsv", "\n".join(lines) + "\n")
    return EXIT_OK


def cmd_canon(expr: str, trials: int) -> int:
    from .algebra import canonicalize, verify_equivalence
    from .modulation import parse_expr

    e = parse_expr(expr)
    cf, recipe = canonicalize(e)
    dev = verify_equivalence(e, cf, recipe, trials=trials)
    print(f"input:     {e}")
    print(f"canonical: {cf.as_expr().to_string(slot_name=lambda k: f'q{cf.positions[k - 1]}') if len(cf) else 'h (identity)'}")
    for pos, text in recipe.describe().items():
        print(f"  q{pos} = {text}")
    print(f"max |deviation| over {trials} trials: {dev:.3e}")
    return EXIT_OK


def random_search_curve(records) -> list[tuple[int, float, float]]:
    """(candidates tried, cumulative seconds, best val loss) from per-epoch random-search records.

    Each candidate's records restart at epoch 1.
    """
    runs: list[list[dict]] = []
    for r in records:
        if r["epoch"] == 1 or not runs:
            runs.append([])
        runs[-1].append(r)
    pts, best, t = [], float("inf"), 0.0
    for n, run in enumerate(runs, start=1):
        t += run[-1]["elapsed_sec"]
        best = min(best, min(r["val_loss"] for r in run))
        pts.append((n, t, best))
    return pts


def cmd_report(cfg: RunConfig) -> int:
    import numpy as np

    from . import plotting
    from .modulation import ModulationAssignment, SupernetAlphas, select_topk

    root = cfg.out / "search"
    if not root.exists():
        from .data import DataError

        raise DataError(f"nothing to report under {root}; run 'coldnas search' first")
    out = cfg.out / "report"
    out.mkdir(parents=True, exist_ok=True)
    rows = ["strategy\tMSE\tMAE\tnDCG3\tnDCG5\tsearch_sec\tretrain_sec\tstructure"]
    search_curves = {}
    made = []
    for d in sorted(p for p in root.iterdir() if p.is_dir()):
        recs = [json.loads(ln) for ln in (d / "metrics.jsonl").read_text().splitlines()] if (d / "metrics.jsonl").exists() else []
        curves = {}
        for r in recs:
            curves.setdefault(r["phase"], []).append(r)
        if curves:
            made.append(plotting.loss_curves(curves, out / f"loss_{d.name}.png"))
        if (d / "alphas.json").exists():
            a = SupernetAlphas(np.array(json.loads((d / "alphas.json").read_text())))
            made.append(plotting.alpha_heatmap(a.values, out / f"alphas_{d.name}.png", select_topk(a, cfg.K).mask()))
        rand = [r for r in recs if r["phase"].startswith("random_")]
        if rand:
            search_curves[d.name] = random_search_curve(rand)
        rep = json.loads((d / "report.json").read_text()) if (d / "report.json").exists() else {}
        tim = json.loads((d / "timings.json").read_text()) if (d / "timings.json").exists() else {}
        struct = ModulationAssignment.from_dict(json.loads((d / "structure.json").read_text())) if (d / "structure.json").exists() else None
        rows.append("\t".join([d.name] + [f"{rep.get(k, float('nan')):.4f}" for k in ("MSE", "MAE", "nDCG3", "nDCG5")]
                              + [f"{tim.get('search', 0.0):.2f}", f"{tim.get('retrain', 0.0):.2f}",
                                 " | ".join(struct.notation()) if struct else "-"]))
    if search_curves:
        made.append(plotting.search_curves(search_curves, out / "random_search.png"))
    _write(out / "summary.tsv", "\n".join(rows) + "\n")
    print("\n".join(rows))
    for p in made:
        print(f"wrote {p}")
    return EXIT_OK


# --- argument parsing -------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="coldnas", description="Modulation-structure search for cold-start recommendation.")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="INI file with [dataset] [model] [search] [output] sections")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--threads", type=int, default=None, help="cap on BLAS/OpenMP worker threads")
    sub = p.add_subparsers(dest="command", required=True)
    sub.add_parser("prepare", parents=[common], help="parse data and write the task split")
    s = sub.add_parser("search", parents=[common], help="search, retrain and evaluate")
    s.add_argument("--strategy", choices=STRATEGIES)
    s.add_argument("--budget", type=int, help="candidates for random search")
    s.add_argument("--fixed-film", action="store_true", help="skip search and retrain FiLM at every layer")
    e = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on the test users")
    e.add_argument("--checkpoint", metavar="PATH")
    e.add_argument("--strategy", choices=STRATEGIES)
    e.add_argument("--support-fraction", type=float, action="append",
                   help="keep this fraction of each support set (repeatable)")
    e.add_argument("--k", default="3,5", help="comma-separated nDCG cutoffs")
    c = sub.add_parser("canon", help="canonicalize a modulation expression")
    c.add_argument("expr")
    c.add_argument("--trials", type=int, default=1000)
    sub.add_parser("report", parents=[common], help="render figures and a summary table")
    return p


def _limit_threads(n: Optional[int]) -> None:
    if n is None:
        return
    if n < 1:
        raise ConfigError("--threads must be positive")
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "NUMEXPR_NUM_THREADS"):
        os.environ[var] = str(n)


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=os.environ.get("COLDNAS_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        _limit_threads(getattr(args, "threads", None))
        if args.command == "canon":
            from .modulation import ExprSyntaxError

            try:
                return cmd_canon(args.expr, args.trials)
            except ExprSyntaxError as err:
                print(str(err), file=sys.stderr)
                return EXIT_CONFIG
        cfg = RunConfig.from_file(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if getattr(args, "strategy", None):
            cfg.strategy = args.strategy
        if getattr(args, "budget", None) is not None:
            cfg.budget = args.budget
        if getattr(args, "fixed_film", False):
            cfg.strategy = "fixed_film"
        cfg.validate()
        if args.command == "prepare":
            return cmd_prepare(cfg)
        if args.command == "search":
            return cmd_search(cfg)
        if args.command == "eval":
            ks = tuple(int(k) for k in args.k.split(","))
            return cmd_eval(cfg, args.checkpoint, args.support_fraction or [1.0], ks)
        if args.command == "report":
            return cmd_report(cfg)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as err:  # map library errors onto exit codes
        from .data import DataError
        from .search import DivergenceError

        if isinstance(err, DataError):
            print(f"data error: {err}", file=sys.stderr)
            return EXIT_DATA
        if isinstance(err, DivergenceError):
            print(f"diverged: {err}", file=sys.stderr)
            return EXIT_DIVERGED
        raise
    return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
