"""Pipeline CLI: synth | prep | train | embed | eval | sweep | report.

One JSON config file drives every stage; scalar fields can be overridden
with --set dotted.path=value. All randomness flows from the single global
seed through per-stage derivations (sha256 of "<seed>:<stage>"). Every
artifact embeds the config hash of the sections it depends on, and stages
refuse inputs whose hashes do not match the active config.

Exit codes: 0 success, 2 config error, 3 validation/provenance error,
4 training divergence.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from nep import backend
from nep.errors import (
    CohortParseError,
    ConfigError,
    DivergenceError,
    NepError,
    ProvenanceError,
    SamplingError,
    ValidationError,
)
from nep import embedding, evaluate, metrics, model, sampling, serialize, synthgen, training
from nep.events import event_type_frequencies, load_cohort, write_cohort

DEFAULT_CONFIG = {
    "seed": 2026,
    "out_dir": "runs/desk",
    "synth": {
        "n_patients": 4600,
        "codes_per_type": {"diagnosis": 10, "lab": 10, "medication": 10,
                           "vital": 10, "procedure": 10},
        "n_risk_groups": 2,
        "mode_weights": [0.6, 0.3, 0.1],
        "transition_smoothing": 0.01,
        # medians 140 / 2400 days; keeps the risk groups well separated
        "hazards": [0.004951051289713895, 0.00028881132523331054],
        "gap_mean_days": {"diagnosis": 14.0, "lab": 2.0, "medication": 5.0,
                          "vital": 1.0, "procedure": 21.0},
        "min_events": 40,
        "max_events": 60,
        "censor_horizon_days": 1095.0,
        "min_count": 2,
    },
    "sampling": {
        "alpha": 0.5,
        "n_instances": 60000,
        "train_patients": 2000,
    },
    "serializer": {
        "window": 16,
        "max_tokens": 512,
        "predict_time": False,
        "include_short_history": False,
    },
    "model": {
        "n_layers": 2,
        "d_model": 64,
        "n_heads": 4,
        "max_positions": 512,
    },
    "train": {
        "total_steps": 2400,
        "peak_lr": 0.002,
        "warmup_fraction": 0.1,
        "global_batch": 64,
        "micro_batch": 64,
        "adapter_rank": 0,
        "weight_decay": 0.01,
        "beta1": 0.9,
        "beta2": 0.999,
        "epsilon": 1e-08,
        "mask_mode": "causal",
        "mlm_mask_rate": 0.15,
        "eval_heldout": True,
        "heldout_instances": 2000,
    },
    "embed": {
        "pooling": "mean",
        "format": "csv",
    },
    "eval": {
        "k_folds": 5,
        "l2_strength": 0.001,
        "n_resamples": 1000,
        "sweep_sizes": [100, 500, 2000],
        "survival_threshold_days": 365.0,
    },
}

# Sections whose values feed each stage's provenance hash.
_STAGE_SECTIONS = {
    "synth": ["synth"],
    "prep": ["synth", "sampling", "serializer"],
    "train": ["synth", "sampling", "serializer", "model", "train"],
    "embed": ["synth", "sampling", "serializer", "model", "train", "embed"],
    "eval": ["synth", "sampling", "serializer", "model", "train", "embed", "eval"],
}


def derive_seed(seed: int, stage: str) -> int:
    digest = hashlib.sha256(f"{seed}:{stage}".encode()).hexdigest()
    return int(digest[:16], 16) & (2**63 - 1)


def section_hash(config: dict, sections) -> str:
    payload = {"seed": config["seed"]}
    for sec in sections:
        payload[sec] = config[sec]
    blob = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


def _check_keys(user, defaults, path=""):
    for key, value in user.items():
        where = f"{path}{key}"
        if key not in defaults:
            raise ConfigError(f"unknown config field: {where}")
        default = defaults[key]
        if isinstance(default, dict) and key not in ("codes_per_type",
                                                     "gap_mean_days"):
            if not isinstance(value, dict):
                raise ConfigError(f"{where} must be an object")
            _check_keys(value, default, where + ".")
        elif isinstance(default, bool) and not isinstance(value, bool):
            raise ConfigError(f"{where} must be a boolean")
        elif isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{where} must be a number")


def _merge(base, user):
    out = copy.deepcopy(base)
    for key, value in user.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict) \
                and key not in ("codes_per_type", "gap_mean_days"):
            out[key] = _merge(out[key], value)
        else:
            out[key] = copy.deepcopy(value)
    return out


def load_config(path=None, overrides=(), seed=None, out_dir=None) -> dict:
    user = {}
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                user = json.load(fh)
        except OSError as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config {path} is not valid JSON: {exc}") from exc
    _check_keys(user, DEFAULT_CONFIG)
    config = _merge(DEFAULT_CONFIG, user)
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects key.path=value, got {item!r}")
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = config
        parts = key.split(".")
        probe = DEFAULT_CONFIG
        for part in parts[:-1]:
            if not isinstance(probe, dict) or part not in probe:
                raise ConfigError(f"unknown config field: {key}")
            probe = probe[part]
            node = node.setdefault(part, {})
        if not isinstance(probe, dict) or \
                (parts[-1] not in probe and parts[-2:-1] != ["codes_per_type"]
                 and parts[-2:-1] != ["gap_mean_days"]):
            raise ConfigError(f"unknown config field: {key}")
        node[parts[-1]] = value
    if seed is not None:
        config["seed"] = seed
    if out_dir is not None:
        config["out_dir"] = out_dir
    root = os.environ.get("NEP_OUT")
    if root and not os.path.isabs(config["out_dir"]):
        config["out_dir"] = os.path.join(root, config["out_dir"])
    return config


def _out(config) -> Path:
    path = Path(config["out_dir"])
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_meta(path, payload):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _read_meta(path):
    if not Path(path).exists():
        raise ProvenanceError(f"missing artifact metadata: {path}")
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def _cohort_spec(config) -> synthgen.CohortSpec:
    s = config["synth"]
    return synthgen.CohortSpec(
        n_patients=s["n_patients"],
        codes_per_type=dict(s["codes_per_type"]),
        n_risk_groups=s["n_risk_groups"],
        mode_weights=tuple(s["mode_weights"]),
        transition_smoothing=s["transition_smoothing"],
        hazards=tuple(s["hazards"]),
        gap_mean_days=dict(s["gap_mean_days"]),
        min_events=s["min_events"],
        max_events=s["max_events"],
        censor_horizon_days=s["censor_horizon_days"],
        seed=derive_seed(config["seed"], "synth"),
    )


def _window_config(config) -> serialize.WindowConfig:
    s = config["serializer"]
    return serialize.WindowConfig(window=s["window"], max_tokens=s["max_tokens"],
                                  predict_time=s["predict_time"],
                                  include_short_history=s["include_short_history"])


def _load_cohort(config, out):
    path = out / "cohort.jsonl"
    if not path.exists():
        raise ProvenanceError(f"missing cohort file {path}; run synth first")
    return load_cohort(path, min_count=config["synth"]["min_count"])


def _split(config, cohort):
    n_train = config["sampling"]["train_patients"]
    if not 0 < n_train < len(cohort):
        raise ValidationError(
            f"sampling.train_patients must be in (0, {len(cohort)})")
    return cohort[:n_train], cohort[n_train:]


def _model_config(config, vocab_size) -> model.ModelConfig:
    m = config["model"]
    return model.ModelConfig(vocab_size=vocab_size, n_layers=m["n_layers"],
                             d_model=m["d_model"], n_heads=m["n_heads"],
                             max_positions=m["max_positions"])


def _train_config(config) -> training.TrainConfig:
    t = config["train"]
    return training.TrainConfig(
        total_steps=t["total_steps"], peak_lr=t["peak_lr"],
        warmup_fraction=t["warmup_fraction"], global_batch=t["global_batch"],
        micro_batch=t["micro_batch"], adapter_rank=t["adapter_rank"],
        weight_decay=t["weight_decay"], beta1=t["beta1"], beta2=t["beta2"],
        epsilon=t["epsilon"], seed=derive_seed(config["seed"], "train"),
        mask_mode=t["mask_mode"], mlm_mask_rate=t["mlm_mask_rate"])


def _sample_instances(config, pool, vocab, stage: str, n_instances: int):
    freqs = event_type_frequencies(pool)
    dist = sampling.type_distribution(freqs, config["sampling"]["alpha"])
    cfg = sampling.SamplingConfig(alpha=config["sampling"]["alpha"],
                                  n_instances=n_instances,
                                  seed=derive_seed(config["seed"], stage))
    selections = sampling.sample_training_positions(pool, dist, cfg)
    window = _window_config(config)
    by_patient = {r.patient_id: r for r in pool}
    instances = []
    for sel in selections:
        instances.extend(serialize.build_instances(by_patient[sel.patient_id],
                                                   vocab, window, [sel]))
    return selections, instances


# ---------------------------------------------------------------------------
# commands


def cmd_synth(config) -> int:
    out = _out(config)
    spec = _cohort_spec(config)
    cohort, oracle = synthgen.generate_cohort(spec)
    write_cohort(cohort, out / "cohort.jsonl")
    synthgen.write_oracle(oracle, out / "oracle.json")
    _write_meta(out / "synth_meta.json", {
        "config_hash": section_hash(config, _STAGE_SECTIONS["synth"]),
        "seed": config["seed"],
        "n_patients": len(cohort),
        "n_events": sum(len(r.events) for r in cohort),
    })
    print(f"synth: wrote {len(cohort)} patients to {out / 'cohort.jsonl'}")
    return 0


def cmd_prep(config) -> int:
    out = _out(config)
    cohort, vocab = _load_cohort(config, out)
    pool, _ = _split(config, cohort)
    selections, instances = _sample_instances(
        config, pool, vocab, "sampling", config["sampling"]["n_instances"])
    sampling.write_selections(selections, out / "selections.jsonl")
    serialize.write_instances(instances, out / "instances.jsonl")
    _write_meta(out / "prep_meta.json", {
        "config_hash": section_hash(config, _STAGE_SECTIONS["prep"]),
        "serializer_hash": section_hash(config, ["serializer"]),
        "seed": config["seed"],
        "vocab_fingerprint": vocab.fingerprint(),
        "vocab_size": vocab.size,
        "n_instances": len(instances),
    })
    print(f"prep: wrote {len(instances)} instances to {out / 'instances.jsonl'}")
    return 0


def cmd_train(config) -> int:
    out = _out(config)
    prep_meta = _read_meta(out / "prep_meta.json")
    expected = section_hash(config, _STAGE_SECTIONS["prep"])
    if prep_meta["config_hash"] != expected:
        raise ProvenanceError(
            "instances.jsonl was built from a different config "
            f"({prep_meta['config_hash']} != {expected}); rerun prep")
    instances = serialize.load_instances(out / "instances.jsonl")
    params = model.init_params(_model_config(config, prep_meta["vocab_size"]),
                               seed=derive_seed(config["seed"], "model"))
    train_cfg = _train_config(config)
    result = training.train(instances, params, train_cfg)
    final = result.params
    if result.adapters is not None:
        final = model.adapter_merge(result.params, result.adapters)

    meta = {
        "config_hash": section_hash(config, _STAGE_SECTIONS["train"]),
        "serializer_hash": section_hash(config, ["serializer"]),
        "vocab_fingerprint": prep_meta["vocab_fingerprint"],
        "seed": config["seed"],
        "final_loss": result.curve[-1][1],
        "wall_time_s": result.wall_time_s,
        "backend": backend.backend_name(),
    }
    if config["train"]["eval_heldout"]:
        cohort, vocab = _load_cohort(config, out)
        _, holdout = _split(config, cohort)
        _, heldout_instances = _sample_instances(
            config, holdout, vocab, "heldout",
            config["train"]["heldout_instances"])
        meta["heldout_cross_entropy"] = training.response_cross_entropy(
            final, heldout_instances)
        oracle_path = out / "oracle.json"
        if oracle_path.exists():
            oracle = synthgen.load_oracle(oracle_path)
            meta["oracle_entropy"] = synthgen.oracle_conditional_entropy(oracle)
    model.save_checkpoint(out / "checkpoint.npz", final, meta)
    training.write_loss_curve(result.curve, out / "loss_curve.csv")
    _write_meta(out / "train_meta.json", meta)
    line = (f"train: {len(result.curve)} steps, final loss "
            f"{result.curve[-1][1]:.4f}, {result.wall_time_s:.1f}s")
    if "heldout_cross_entropy" in meta:
        line += f", heldout CE {meta['heldout_cross_entropy']:.4f}"
    if "oracle_entropy" in meta:
        line += f" (oracle floor {meta['oracle_entropy']:.4f})"
    print(line)
    return 0


def cmd_embed(config, checkpoint=None) -> int:
    out = _out(config)
    ckpt_path = Path(checkpoint) if checkpoint else out / "checkpoint.npz"
    if not ckpt_path.exists():
        raise ProvenanceError(f"missing checkpoint {ckpt_path}; run train first")
    params, meta = model.load_checkpoint(ckpt_path)
    current = section_hash(config, ["serializer"])
    if meta.get("serializer_hash") != current:
        raise ProvenanceError(
            "checkpoint was trained under a different serializer config "
            f"({meta.get('serializer_hash')} != {current})")
    cohort, vocab = _load_cohort(config, out)
    _, holdout = _split(config, cohort)
    emb = embedding.embed_cohort(
        params, vocab, holdout, _window_config(config),
        pooling=config["embed"]["pooling"],
        extra_provenance={
            "serializer_hash": current,
            "config_hash": section_hash(config, _STAGE_SECTIONS["embed"]),
            "seed": config["seed"],
        })
    fmt = config["embed"]["format"]
    if fmt == "csv":
        embedding.write_embeddings_csv(emb, out / "embeddings.csv")
        path = out / "embeddings.csv"
    elif fmt == "binary":
        embedding.write_embeddings_binary(emb, out / "embeddings.bin")
        path = out / "embeddings.bin"
    else:
        raise ConfigError(f"embed.format must be csv or binary, got {fmt!r}")
    print(f"embed: wrote {emb.matrix.shape[0]}x{emb.matrix.shape[1]} to {path}")
    return 0


def _load_embeddings(config, out, path=None):
    if path is None:
        for candidate in (out / "embeddings.csv", out / "embeddings.bin"):
            if candidate.exists():
                path = candidate
                break
    if path is None or not Path(path).exists():
        raise ProvenanceError("missing embeddings; run embed first")
    emb = embedding.read_embeddings(path)
    current = section_hash(config, ["serializer"])
    if emb.provenance.get("serializer_hash") != current:
        raise ProvenanceError(
            "embeddings were built under a different serializer config "
            f"({emb.provenance.get('serializer_hash')} != {current})")
    return emb


def cmd_eval(config, embeddings_path=None) -> int:
    out = _out(config)
    emb = _load_embeddings(config, out, embeddings_path)
    cohort, _ = _load_cohort(config, out)
    _, holdout = _split(config, cohort)
    if [r.patient_id for r in holdout] != emb.patient_ids:
        raise ProvenanceError("embedding rows do not match the holdout patients")
    cfg_hash = section_hash(config, _STAGE_SECTIONS["eval"])
    e = config["eval"]
    for task in evaluate.tasks_from_cohort(holdout, e["survival_threshold_days"]):
        report = evaluate.cross_validate(
            emb.matrix, task, k=e["k_folds"],
            seed=derive_seed(config["seed"], f"eval:{task.name}"),
            l2_strength=e["l2_strength"], n_resamples=e["n_resamples"],
            config_hash=cfg_hash)
        report.write_json(out / f"metrics_{task.name}.json")
        print(f"eval[{task.name}]: {report.metric} median "
              f"{report.median:.4f} point {report.point:.4f} "
              f"[{report.ci_lo:.4f}, {report.ci_hi:.4f}]")
    return 0


def cmd_sweep(config) -> int:
    out = _out(config)
    ckpt_path = out / "checkpoint.npz"
    if not ckpt_path.exists():
        raise ProvenanceError(f"missing checkpoint {ckpt_path}; run train first")
    params, meta = model.load_checkpoint(ckpt_path)
    current = section_hash(config, ["serializer"])
    if meta.get("serializer_hash") != current:
        raise ProvenanceError("checkpoint serializer config mismatch")
    cohort, vocab = _load_cohort(config, out)
    _, holdout = _split(config, cohort)
    window = _window_config(config)
    pooling = config["embed"]["pooling"]

    untrained = model.init_params(_model_config(config, params.config.vocab_size),
                                  seed=derive_seed(config["seed"], "model"))
    features = {
        "nep_trained": embedding.embed_cohort(params, vocab, holdout, window,
                                              pooling).matrix,
        "untrained": embedding.embed_cohort(untrained, vocab, holdout, window,
                                            pooling).matrix,
        "bag_of_events": evaluate.bag_of_events_baseline(holdout, vocab),
    }
    e = config["eval"]
    survival = [t for t in evaluate.tasks_from_cohort(
        holdout, e["survival_threshold_days"])
        if isinstance(t, evaluate.SurvivalTask)]
    if not survival:
        raise ValidationError("sweep needs a survival task in the cohort")
    rows = evaluate.label_efficiency_sweep(
        features, survival[0], e["sweep_sizes"], k=e["k_folds"],
        seed=derive_seed(config["seed"], "sweep"),
        l2_strength=e["l2_strength"], n_resamples=e["n_resamples"])
    cfg_hash = section_hash(config, _STAGE_SECTIONS["eval"])
    evaluate.write_sweep_csv(rows, out / "sweep.csv")
    evaluate.write_sweep_json(rows, out / "sweep.json", cfg_hash)
    for r in rows:
        print(f"sweep[{r.feature_source} @ {r.size}]: {r.metric} median "
              f"{r.median:.4f}")
    return 0


def cmd_report(run_dir) -> int:
    out = Path(run_dir)
    if not out.exists():
        raise ValidationError(f"run directory {out} does not exist")
    lines = ["# Run report", ""]
    for meta_name in ("synth_meta.json", "prep_meta.json", "train_meta.json"):
        path = out / meta_name
        if path.exists():
            meta = _read_meta(path)
            lines.append(f"## {meta_name}")
            for key in sorted(meta):
                lines.append(f"- {key}: {meta[key]}")
            lines.append("")
    for metric_file in sorted(out.glob("metrics_*.json")):
        report = metrics.load_report(metric_file)
        lines.append(f"## {metric_file.name}")
        lines.append(f"- metric: {report.metric}")
        lines.append(f"- median over folds: {report.median:.4f}")
        lines.append(f"- point (pooled): {report.point:.4f} "
                     f"[{report.ci_lo:.4f}, {report.ci_hi:.4f}]")
        lines.append(f"- folds: {', '.join(f'{v:.4f}' for v in report.folds)}")
        lines.append(f"- config_hash: {report.config_hash}")
        lines.append("")
    sweep_path = out / "sweep.json"
    if sweep_path.exists():
        with open(sweep_path, encoding="utf-8") as fh:
            sweep = json.load(fh)
        lines.append("## label-efficiency sweep")
        lines.append("| feature_source | size | metric | median | 95% CI |")
        lines.append("|---|---|---|---|---|")
        for r in sweep["rows"]:
            lines.append(f"| {r['feature_source']} | {r['size']} | {r['metric']} "
                         f"| {r['median']:.4f} | [{r['ci_lo']:.4f}, "
                         f"{r['ci_hi']:.4f}] |")
        lines.append("")
    text = "\n".join(lines)
    with open(out / "report.md", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nep",
        description="Next-event prediction pipeline on synthetic clinical "
                    "event streams.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("synth", "prep", "train", "embed", "eval", "sweep"):
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="override the global seed")
        p.add_argument("--out", help="override the output directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VAL",
                       help="override a scalar config field by dotted path")
        if name == "embed":
            p.add_argument("--checkpoint", help="checkpoint path override")
        if name == "eval":
            p.add_argument("--embeddings", help="embeddings path override")
    p = sub.add_parser("report")
    p.add_argument("run_dir", help="run directory to aggregate")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "report":
            return cmd_report(args.run_dir)
        config = load_config(args.config, args.set, args.seed, args.out)
        if args.command == "synth":
            return cmd_synth(config)
        if args.command == "prep":
            return cmd_prep(config)
        if args.command == "train":
            return cmd_train(config)
        if args.command == "embed":
            return cmd_embed(config, args.checkpoint)
        if args.command == "eval":
            return cmd_eval(config, args.embeddings)
        if args.command == "sweep":
            return cmd_sweep(config)
        raise ConfigError(f"unknown command {args.command!r}")
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        if exc.recent_losses:
            print(f"recent losses: {exc.recent_losses}", file=sys.stderr)
        return 4
    except (ValidationError, CohortParseError, ProvenanceError,
            SamplingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except NepError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
