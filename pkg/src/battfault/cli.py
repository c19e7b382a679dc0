"""Batch CLI wiring the pipeline: synth, pretrain, detect, tsne, cost.

Every command is a pure function of (config file, flags, input files, seed);
re-running with identical inputs produces byte-identical output files.

Exit codes: 0 success, 2 usage/config error, 3 I/O error, 4 numerical
failure, 5 data inadequacy (e.g. a split missing a label class).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import os
import sys

import numpy as np

from . import dataio, downstream, evalkit, model, pretrain
from .numcore import NonFiniteError, SeededRng

EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NUMERIC = 4
EXIT_DATA = 5


class ConfigError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class EvalConfig:
    split_ratio: float = 0.8
    aggregator: str = "mean"
    fault_rate: float = 0.00038
    fault_cost_cny: float = 5_000_000.0
    inspection_cost_cny: float = 8_000.0
    tsne_perplexity: float = 12.0
    tsne_iterations: int = 500
    tsne_max_points: int = 600

    def cost_params(self) -> evalkit.CostParams:
        return evalkit.CostParams(self.fault_rate, self.fault_cost_cny, self.inspection_cost_cny)


@dataclasses.dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    seq_len: int = 128
    generator: dataio.FleetConfig = dataclasses.field(default_factory=dataio.FleetConfig)
    model: model.ModelConfig = dataclasses.field(default_factory=model.ModelConfig.desk_default)
    pretrain: pretrain.PretrainConfig = dataclasses.field(default_factory=pretrain.PretrainConfig)
    gbdt: downstream.GbdtConfig = dataclasses.field(default_factory=downstream.GbdtConfig)
    eval: EvalConfig = dataclasses.field(default_factory=EvalConfig)


_SECTIONS = {
    "generator": dataio.FleetConfig,
    "model": model.ModelConfig,
    "pretrain": pretrain.PretrainConfig,
    "gbdt": downstream.GbdtConfig,
    "eval": EvalConfig,
}


def _build_section(cls, values: dict, section: str):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - names)
    if unknown:
        raise ConfigError(f"unknown key {unknown[0]!r} in config section {section!r}")
    coerced = {k: tuple(v) if isinstance(v, list) else v for k, v in values.items()}
    try:
        return cls(**coerced)
    except (ValueError, TypeError) as exc:
        raise ConfigError(f"invalid config section {section!r}: {exc}") from None


def load_config(path=None, seed_override=None) -> RunConfig:
    """Read a JSON config file with full defaulting; unknown keys are rejected."""
    raw = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            try:
                raw = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ConfigError(f"config {path} is not valid JSON: {exc}") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"config {path} must contain a JSON object")
    top_names = {"seed", "seq_len"} | set(_SECTIONS)
    unknown = sorted(set(raw) - top_names)
    if unknown:
        raise ConfigError(f"unknown top-level config key {unknown[0]!r}")
    kwargs = {}
    if "seed" in raw:
        kwargs["seed"] = int(raw["seed"])
    if "seq_len" in raw:
        kwargs["seq_len"] = int(raw["seq_len"])
    for section, cls in _SECTIONS.items():
        if section in raw:
            if not isinstance(raw[section], dict):
                raise ConfigError(f"config section {section!r} must be an object")
            kwargs[section] = _build_section(cls, raw[section], section)
    cfg = RunConfig(**kwargs)
    if seed_override is not None:
        cfg = dataclasses.replace(cfg, seed=int(seed_override))
    if cfg.model.M_max < cfg.seq_len + 1:
        raise ConfigError(f"model.M_max={cfg.model.M_max} must be >= seq_len+1={cfg.seq_len + 1}")
    return cfg


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _load_dataset(cfg: RunConfig, data_dir):
    data_path = os.path.join(data_dir, "snippets.csv")
    meta_path = os.path.join(data_dir, "meta.csv")
    return dataio.load_csv(data_path, meta_path, cfg.seq_len)


def _write_loss_history(history, path):
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write("epoch,train_loss,val_loss\n")
        for epoch, tr, va in history:
            fh.write(f"{epoch},{repr(tr)},{repr(va)}\n")


def _write_norm_stats(stats: dataio.NormStats, path):
    doc = {
        "mean": [float(x) for x in stats.mean],
        "std": [float(x) for x in stats.std],
        "meta_mean": [float(x) for x in stats.meta_mean],
        "meta_std": [float(x) for x in stats.meta_std],
    }
    with open(path, "w", newline="\n", encoding="utf-8") as fh:
        fh.write(json.dumps(doc, indent=1, sort_keys=True) + "\n")


def cmd_synth(args) -> int:
    cfg = load_config(args.config, args.seed)
    gen = dataclasses.replace(cfg.generator, seq_len=cfg.seq_len)
    ds = dataio.synth_fleet(gen, cfg.seed)
    os.makedirs(args.out, exist_ok=True)
    dataio.write_csv(ds, os.path.join(args.out, "snippets.csv"), os.path.join(args.out, "meta.csv"))
    vehicles = ds.vehicle_ids()
    n_fault = sum(ds.vehicle_label(v) for v in vehicles)
    print(f"wrote {len(ds)} snippets from {len(vehicles)} vehicles "
          f"({n_fault} faulty) to {args.out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config, args.seed)
    ds = _load_dataset(cfg, args.data)
    train, val, _ = dataio.vehicle_split(ds, cfg.eval.split_ratio, cfg.seed)
    stats = dataio.fit_norm(train)
    train_n = dataio.apply_norm(train, stats)
    val_n = dataio.apply_norm(val, stats)

    rng = SeededRng(cfg.seed, ("init",))
    if args.init_from:
        source = pretrain.load_checkpoint(args.init_from)
        params, transfer = pretrain.transfer_init(source, cfg.model, rng)
        print(f"warm start from {args.init_from}: copied {len(transfer.copied)} arrays, "
              f"{len(transfer.fresh)} fresh")
        for name in transfer.copied:
            print(f"  copied {name}")
    else:
        params = model.init_params(cfg.model, rng)

    pcfg = dataclasses.replace(cfg.pretrain, seed=cfg.seed)
    ckpt, history = pretrain.run_pretrain(train_n, val_n, params, cfg.model, pcfg, log=print)

    os.makedirs(args.out, exist_ok=True)
    pretrain.save_checkpoint(ckpt, os.path.join(args.out, "checkpoint.json"))
    _write_loss_history(history, os.path.join(args.out, "loss_history.csv"))
    _write_norm_stats(stats, os.path.join(args.out, "norm_stats.json"))
    print(f"final train loss {history[-1][1]:.6f}, val loss {history[-1][2]:.6f}")
    return 0


def cmd_detect(args) -> int:
    cfg = load_config(args.config, args.seed)
    ds = _load_dataset(cfg, args.data)
    ckpt = pretrain.load_checkpoint(args.checkpoint)
    if ckpt.config.D != len(ds.channel_names) or ckpt.config.K != len(ds.meta_names):
        raise ConfigError(
            f"checkpoint dims (D={ckpt.config.D}, K={ckpt.config.K}) incompatible with data "
            f"(D={len(ds.channel_names)}, K={len(ds.meta_names)})")
    params = ckpt.to_params()

    train, val, _ = dataio.vehicle_split(ds, cfg.eval.split_ratio, cfg.seed)
    stats = dataio.fit_norm(train)
    train_n = dataio.apply_norm(train, stats)
    val_n = dataio.apply_norm(val, stats)

    feats_train = downstream.extract_features(params, ckpt.config, train_n)
    feats_val = downstream.extract_features(params, ckpt.config, val_n)
    gbdt = downstream.train_gbdt(feats_train, cfg.gbdt, cfg.seed)

    X_val = np.stack([f.values for f in feats_val], axis=0)
    snip_scores = downstream.predict_proba_batch(gbdt, X_val)
    snip_labels = np.array([f.label for f in feats_val])

    veh = evalkit.vehicle_scores(snip_scores, [f.vehicle_id for f in feats_val],
                                 cfg.eval.aggregator)
    veh_ids = sorted(veh)
    veh_scores = np.array([veh[v] for v in veh_ids])
    veh_labels = np.array([val_n.vehicle_label(v) for v in veh_ids])

    cost_params = cfg.eval.cost_params()
    points = evalkit.roc_points(veh_scores, veh_labels)
    cost, thr, pt = evalkit.min_expected_cost(veh_scores, veh_labels, cost_params)
    report = evalkit.EvaluationReport(
        snippet_auroc=evalkit.auroc(snip_scores, snip_labels),
        vehicle_auroc=evalkit.auroc(veh_scores, veh_labels),
        roc_points=points,
        min_expected_cost=cost,
        min_cost_threshold=thr,
        min_cost_point=pt,
        n_pos_vehicles=int(veh_labels.sum()),
        n_neg_vehicles=int((veh_labels == 0).sum()),
        n_pos_snippets=int(snip_labels.sum()),
        n_neg_snippets=int((snip_labels == 0).sum()),
        cost_params=cost_params,
        config_echo={"seq_len": cfg.seq_len, "gbdt": dataclasses.asdict(cfg.gbdt),
                     "aggregator": cfg.eval.aggregator, "split_ratio": cfg.eval.split_ratio},
        seeds={"seed": cfg.seed},
    )
    os.makedirs(args.out, exist_ok=True)
    evalkit.emit_report(report, args.out)
    downstream.save_gbdt(gbdt, os.path.join(args.out, "classifier.json"))
    print(f"vehicle AUROC {report.vehicle_auroc:.4f}, snippet AUROC "
          f"{report.snippet_auroc:.4f}, min expected cost {cost:.2f} CNY at threshold {thr}")
    return 0


def cmd_tsne(args) -> int:
    cfg = load_config(args.config, args.seed)
    ds = _load_dataset(cfg, args.data)
    stats = dataio.fit_norm(ds)
    ds_n = dataio.apply_norm(ds, stats)

    n = len(ds_n)
    limit = cfg.eval.tsne_max_points
    if n > limit and not args.subsample:
        raise ConfigError(f"{n} snippets exceeds t-SNE bound {limit}; pass --subsample N")
    snippets = list(ds_n.snippets)
    if args.subsample and n > args.subsample:
        keep = SeededRng(cfg.seed, ("tsne_subsample",)).choice(n, size=args.subsample)
        snippets = [snippets[i] for i in sorted(int(i) for i in keep)]

    if args.raw:
        X = np.stack([s.channels.reshape(-1) for s in snippets], axis=0)
        mode = "raw"
    else:
        ckpt = pretrain.load_checkpoint(args.checkpoint)
        params = ckpt.to_params()
        sub = dataio.FleetDataset(tuple(snippets), ds_n.channel_names, ds_n.meta_names)
        feats = downstream.extract_features(params, ckpt.config, sub)
        X = np.stack([f.values[:ckpt.config.H] for f in feats], axis=0)
        mode = "embedding"

    coords, kl = evalkit.tsne(X, cfg.eval.tsne_perplexity, cfg.eval.tsne_iterations, cfg.seed)
    groups = [s.vehicle_id for s in snippets]
    score = evalkit.mixing_score(X, groups)
    rows = [(float(c[0]), float(c[1]), s.vehicle_id, s.label)
            for c, s in zip(coords, snippets)]
    os.makedirs(args.out, exist_ok=True)
    evalkit.write_tsne_outputs(rows, args.out, stem=f"tsne_{mode}")
    print(f"mode={mode} points={len(rows)} mixing_score={score:.4f} final_kl={kl[-1]:.4f}")
    return 0


def cmd_cost(args) -> int:
    params = evalkit.CostParams(
        p=args.p if args.p is not None else 0.00038,
        c_f=args.c_f if args.c_f is not None else 5_000_000.0,
        c_r=args.c_r if args.c_r is not None else 8_000.0,
    )
    if not (0.0 <= args.q_tp <= 1.0 and 0.0 <= args.q_fp <= 1.0):
        raise ConfigError(f"rates must be in [0,1], got q_tp={args.q_tp}, q_fp={args.q_fp}")
    cost = evalkit.expected_cost(params, args.q_tp, args.q_fp)
    print(repr(cost))
    return 0


# ---------------------------------------------------------------------------
# Entry point
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="battfault",
        description="Masked-signal pretraining and fault detection for battery charge snippets.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, checkpoint=False):
        p.add_argument("--config", default=None, help="JSON config file (defaults apply)")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        p.add_argument("--out", required=True, help="output directory")
        if data:
            p.add_argument("--data", required=True,
                           help="directory containing snippets.csv and meta.csv")
        if checkpoint:
            p.add_argument("--checkpoint", help="encoder checkpoint JSON")

    p = sub.add_parser("synth", help="generate a synthetic fleet as CSV files")
    common(p)
    p.set_defaults(fn=cmd_synth)

    p = sub.add_parser("pretrain", help="masked-signal pretraining on a dataset")
    common(p, data=True)
    p.add_argument("--init-from", default=None, help="warm-start checkpoint")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("detect", help="frozen-encoder features + boosted-tree detection")
    common(p, data=True, checkpoint=True)
    p.set_defaults(fn=cmd_detect)

    p = sub.add_parser("tsne", help="2D projection of raw features or encoder embeddings")
    common(p, data=True, checkpoint=True)
    p.add_argument("--raw", action="store_true", help="project flattened normalized channels")
    p.add_argument("--subsample", type=int, default=None, help="random subsample size")
    p.set_defaults(fn=cmd_tsne)

    p = sub.add_parser("cost", help="expected direct cost at an operating point")
    p.add_argument("--q-tp", type=float, required=True, dest="q_tp")
    p.add_argument("--q-fp", type=float, required=True, dest="q_fp")
    p.add_argument("--p", type=float, default=None, help="fault rate override")
    p.add_argument("--c-f", type=float, default=None, dest="c_f", help="fault cost override")
    p.add_argument("--c-r", type=float, default=None, dest="c_r", help="inspection cost override")
    p.set_defaults(fn=cmd_cost)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "command", None) == "detect" and not args.checkpoint:
        print("error: detect requires --checkpoint", file=sys.stderr)
        return EXIT_CONFIG
    if getattr(args, "command", None) == "tsne" and not args.raw and not args.checkpoint:
        print("error: tsne requires --checkpoint unless --raw", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.fn(args)
    except (ConfigError, pretrain.CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except dataio.ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except NonFiniteError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except evalkit.SingleClassError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        msg = str(exc)
        if "single-class" in msg or "both classes" in msg:
            print(f"error: {msg}", file=sys.stderr)
            return EXIT_DATA
        print(f"error: {msg}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
