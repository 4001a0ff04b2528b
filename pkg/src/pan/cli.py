"""Command-line entry point: gen | train | eval | gradcheck | sweep.

Every command is a pure function of (input files, flags, seed) to output
files; re-running with identical inputs reproduces every artifact byte for
byte. Exit codes: 0 success, 1 runtime or assertion failure, 2 usage error.
The fully resolved configuration is echoed to ``run.json`` in the output
directory before any work starts. ``PAN_SEED`` provides the default seed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import csm as csm_mod
from . import data as data_mod
from . import evaluation as ev
from . import training as tr
from .attributes import label_dimension, randomize_labels
from .encoders import EncoderSpec, SimilarityGraph, normalize_adjacency
from .errors import (
    BundleFormatError,
    ContractError,
    DimensionError,
    GenerationError,
    NumericError,
    SamplingError,
)
from .rng import derive_seed, generator

PAN_ERRORS = (
    BundleFormatError, ContractError, DimensionError,
    GenerationError, NumericError, SamplingError, IndexError,
)

GEN_TASKS = {
    "compat-manifest": "compatibility_manifestation",
    "fewshot-clusters": "fewshot_clusters",
    "linear-separable": "linear_separable",
}
FA_FLAGS = {"and": "and", "or": "or", "xor": "xor", "xnor": "xnor", "and-xor": "and_xor"}
EVAL_TASKS = ("pair-acc", "fitb", "auc", "fewshot", "recall", "attr-map", "rank-report")


def _default_seed() -> int:
    return int(os.environ.get("PAN_SEED", "0"))


def _config_fingerprint(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=1) + "\n")


def _write_run_manifest(out_dir: Path, command: str, config: dict) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": command,
        "config": config,
        "fingerprint": _config_fingerprint(config),
    }
    _write_json(out_dir / "run.json", manifest)
    return manifest


def _write_metric_files(out_dir: Path, report: ev.MetricReport, fingerprint: str) -> None:
    payload = report.to_dict()
    payload["config_fingerprint"] = fingerprint
    _write_json(out_dir / "metrics.json", payload)
    low = "" if report.interval is None else repr(float(report.interval[0]))
    high = "" if report.interval is None else repr(float(report.interval[1]))
    lines = [
        "metric,value,interval_low,interval_high,count,config_fingerprint",
        f"{report.name},{repr(float(report.value))},{low},{high},{report.count},{fingerprint}",
    ]
    (out_dir / "metrics.csv").write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------

def _add_gen_parser(sub) -> None:
    p = sub.add_parser("gen", help="generate a synthetic dataset bundle")
    p.add_argument("--task", choices=sorted(GEN_TASKS), required=True)
    p.add_argument("--out", required=True, help="output bundle directory")
    p.add_argument("--items", type=int, default=500)
    p.add_argument("--dim", type=int, default=16)
    p.add_argument("--attrs", type=int, default=6)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--noise", type=float, default=0.2)
    p.add_argument("--manifestations", type=int, default=2)
    p.add_argument("--density", type=float, default=0.8)
    p.add_argument("--classes", type=int, default=20)
    p.add_argument("--separation", type=float, default=10.0)
    p.add_argument("--hamming", type=int, default=1)


def _cmd_gen(args) -> int:
    seed = _default_seed() if args.seed is None else args.seed
    spec = data_mod.SyntheticSpec(
        n_items=args.items,
        d=args.dim,
        m_attributes=args.attrs,
        noise_sd=args.noise,
        task_kind=GEN_TASKS[args.task],
        manifestation_count=args.manifestations,
        attr_density=args.density,
        n_classes=args.classes,
        cluster_separation=args.separation,
        hamming_threshold=args.hamming,
    )
    out_dir = Path(args.out)
    config = {"task": args.task, "seed": seed, **spec.__dict__}
    _write_run_manifest(out_dir, "gen", config)
    bundle, report = data_mod.generate(spec, seed)
    data_mod.save_bundle(out_dir, bundle)
    _write_json(out_dir / "oracle_report.json", report)
    print(f"wrote bundle with {bundle.n} items, {bundle.graph.num_edges} edges to {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------

def _add_train_flags(p) -> None:
    p.add_argument("--encoder", choices=("identity", "mlp", "gcn"), default="identity")
    p.add_argument("--mlp-dims", default="24,16", help="comma-separated MLP layer dims")
    p.add_argument("--activation", choices=("relu", "linear"), default="relu")
    p.add_argument("--gcn-layers", type=int, default=2)
    p.add_argument("--gcn-hidden", type=int, default=16)
    p.add_argument("--dropout", type=float, default=0.5)
    p.add_argument("--edge-dropout", type=float, default=0.15)
    p.add_argument("--conditions", type=int, default=None,
                   help="condition count M; defaults to the attribute label dimension")
    p.add_argument("--supervision", choices=("auto", "unsupervised", "supervised", "hybrid"),
                   default="auto")
    p.add_argument("--relevance", choices=("on", "off"), default="on")
    p.add_argument("--fa", choices=sorted(FA_FLAGS), default="or")
    p.add_argument("--lambda", dest="lambda_", type=float, default=1.0)
    p.add_argument("--lr", type=float, default=0.03)
    p.add_argument("--epochs", type=int, default=1200)
    p.add_argument("--mode", choices=("single-batch", "minibatch"), default="single-batch")
    p.add_argument("--batch-size", type=int, default=96)
    p.add_argument("--val-every", type=int, default=100)
    p.add_argument("--val-metric", choices=tr.VAL_METRICS, default=None)
    p.add_argument("--pairs-per-epoch", type=int, default=4096)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--randomize-labels", action="store_true",
                   help="sanity check: replace labelled attributes with coin flips")
    p.add_argument("--baseline", choices=("none", "siamese", "multitask", "attr-sim"),
                   default="none")
    p.add_argument("--margin", type=float, default=0.2, help="triplet margin (siamese)")


def _add_train_parser(sub) -> None:
    p = sub.add_parser("train", help="train a model on a bundle")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    _add_train_flags(p)


def _encoder_spec_from_args(args) -> EncoderSpec:
    if args.encoder == "identity":
        return EncoderSpec(kind="identity")
    if args.encoder == "mlp":
        dims = tuple(int(x) for x in str(args.mlp_dims).split(",") if x.strip())
        return EncoderSpec(kind="mlp", layer_dims=dims, activation=args.activation)
    return EncoderSpec(
        kind="gcn",
        num_layers=args.gcn_layers,
        hidden_dim=args.gcn_hidden,
        activation=args.activation,
        layer_dropout_p=args.dropout,
        edge_dropout_p=args.edge_dropout,
    )


def _resolve_model_config(args, bundle) -> tuple[EncoderSpec, csm_mod.CsmConfig, str]:
    fa = FA_FLAGS[args.fa]
    supervision = args.supervision
    if supervision == "auto":
        supervision = "supervised" if bundle.attributes is not None else "unsupervised"
    if supervision in ("supervised", "hybrid") and bundle.attributes is None:
        raise ContractError(f"{supervision} training requires a bundle with attributes")
    if supervision == "unsupervised":
        m = args.conditions if args.conditions is not None else 16
        cfg = csm_mod.CsmConfig(m=m, relevance_enabled=args.relevance == "on")
    elif supervision == "supervised":
        label_dim = label_dimension(bundle.attributes.m, fa)
        m = args.conditions if args.conditions is not None else label_dim
        cfg = csm_mod.CsmConfig(
            m=m, supervision="supervised", relevance_enabled=args.relevance == "on"
        )
    else:
        label_dim = label_dimension(bundle.attributes.m, fa)
        total = args.conditions if args.conditions is not None else 2 * label_dim
        cfg = csm_mod.CsmConfig(
            m=total, supervision="hybrid", m_sup=label_dim, m_unsup=total - label_dim,
            relevance_enabled=args.relevance == "on",
        )
    return _encoder_spec_from_args(args), cfg, fa


def _train_config_from_args(args, seed: int, fa: str) -> tr.TrainConfig:
    return tr.TrainConfig(
        lambda_=args.lambda_,
        learning_rate=args.lr,
        epochs=args.epochs,
        mode=args.mode.replace("-", "_"),
        batch_size=args.batch_size,
        seed=seed,
        fa=fa,
        validation_every=args.val_every,
        val_metric=args.val_metric,
        pairs_per_epoch=args.pairs_per_epoch,
    )


def _train_once(args, bundle, out_dir: Path, seed: int) -> dict:
    """Shared by cmd_train and sweep workers; returns summary facts."""
    encoder_spec, csm_config, fa = _resolve_model_config(args, bundle)
    config = _train_config_from_args(args, seed, fa)
    resolved = {
        "baseline": args.baseline,
        "bundle": str(args.bundle),
        "encoder": encoder_spec.__dict__ | {"layer_dims": list(encoder_spec.layer_dims)},
        "csm": {
            "m": csm_config.m,
            "supervision": csm_config.supervision,
            "m_sup": csm_config.m_sup,
            "m_unsup": csm_config.m_unsup,
            "relevance_enabled": csm_config.relevance_enabled,
        },
        "train": {k: getattr(config, k) for k in (
            "lambda_", "learning_rate", "epochs", "mode", "batch_size", "seed",
            "beta1", "beta2", "eps", "fa", "validation_every", "val_metric",
            "pairs_per_epoch",
        )},
        "randomize_labels": bool(args.randomize_labels),
        "margin": args.margin,
    }
    manifest = _write_run_manifest(out_dir, "train", resolved)

    table = bundle.attributes
    if args.randomize_labels:
        if table is None:
            raise ContractError("--randomize-labels needs a bundle with attributes")
        table = randomize_labels(table, derive_seed(seed, "randomize-labels"))

    if args.baseline == "none":
        result = tr.train_pan(bundle, encoder_spec, csm_config, config, attribute_table=table)
        tr.save_checkpoint(out_dir / "checkpoint.json", result.model)
        tr.write_history_csv(out_dir / "history.csv", result.history)
        # the manifest was echoed before work started; rewrite it with the
        # metric history now that training is done
        manifest["history"] = [
            [row.epoch, row.train_loss, row.val_metric] for row in result.history
        ]
        _write_json(out_dir / "run.json", manifest)
        summary = {
            "best_epoch": result.best_epoch,
            "best_val_metric": result.best_metric,
            "final_train_loss": result.history[-1].train_loss if result.history else None,
        }
    else:
        model = _train_baseline(args, bundle, config, table)
        _save_baseline(out_dir / "checkpoint.json", args.baseline, model)
        summary = {"baseline": args.baseline}
    _write_json(out_dir / "summary.json", summary)
    return {"summary": summary, "fingerprint": manifest["fingerprint"]}


def _train_baseline(args, bundle, config: tr.TrainConfig, table):
    if args.baseline == "siamese":
        return tr.train_siamese_baseline(bundle, args.margin, config)
    if args.baseline == "multitask":
        return tr.train_multitask_baseline(bundle, config)
    patched = bundle
    if table is not bundle.attributes:
        patched = data_mod.DatasetBundle(
            bundle.features, bundle.graph, dict(bundle.splits), table,
            bundle.categories, bundle.sets, task=bundle.task,
        )
    return tr.train_attr_similarity_baseline(patched, config)


BASELINE_FORMAT = "pan-baseline-v1"


def _save_baseline(path: Path, kind: str, model) -> None:
    matrices = {}
    if kind == "siamese":
        matrices = {"embed_w": model.embed_w, "link_w": model.link_w, "link_b": model.link_b}
        extra = {}
    elif kind == "multitask":
        matrices = {"link_w": model.link_w, "link_b": model.link_b}
        for idx, w in enumerate(model.encoder_weights.weights):
            matrices[f"enc_w{idx}"] = w
        for idx, b in enumerate(model.encoder_weights.biases):
            matrices[f"enc_b{idx}"] = b
        if model.attr_w is not None:
            matrices["attr_w"] = model.attr_w
            matrices["attr_b"] = model.attr_b
        extra = {
            "encoder": model.encoder_spec.__dict__
            | {"layer_dims": list(model.encoder_spec.layer_dims)},
            "n_enc_layers": len(model.encoder_weights.weights),
        }
    else:
        matrices = {"pair_w": model.pair_w, "pair_b": model.pair_b}
        if model.attr_w is not None:
            matrices["attr_w"] = model.attr_w
            matrices["attr_b"] = model.attr_b
        if model.true_probs is not None:
            matrices["true_probs"] = model.true_probs
        extra = {}
    payload = {
        "format": BASELINE_FORMAT,
        "kind": kind,
        "matrices": {k: csm_mod.matrix_to_hex(v) for k, v in matrices.items()},
        **extra,
    }
    _write_json(path, payload)


def _load_baseline(obj: dict):
    kind = obj["kind"]
    mats = {k: csm_mod.matrix_from_hex(v) for k, v in obj["matrices"].items()}
    if kind == "siamese":
        return tr.SiameseModel(mats["embed_w"], mats["link_w"], mats["link_b"])
    if kind == "multitask":
        enc = obj["encoder"]
        spec = EncoderSpec(
            kind=enc["kind"], layer_dims=tuple(enc["layer_dims"]),
            activation=enc["activation"], num_layers=enc["num_layers"],
            hidden_dim=enc["hidden_dim"], layer_dropout_p=enc["layer_dropout_p"],
            edge_dropout_p=enc["edge_dropout_p"],
        )
        n_layers = obj["n_enc_layers"]
        weights = tr.EncoderWeights(
            spec.kind,
            [mats[f"enc_w{k}"] for k in range(n_layers)],
            [mats[f"enc_b{k}"] for k in range(n_layers) if f"enc_b{k}" in mats],
        )
        return tr.MultitaskModel(
            spec, weights, mats["link_w"], mats["link_b"],
            mats.get("attr_w"), mats.get("attr_b"),
        )
    return tr.AttrSimilarityModel(
        mats.get("attr_w"), mats.get("attr_b"), mats["pair_w"], mats["pair_b"],
        true_probs=mats.get("true_probs"),
    )


def load_any_checkpoint(path):
    obj = json.loads(Path(path).read_text())
    if obj.get("format") == BASELINE_FORMAT:
        return _load_baseline(obj)
    return tr.model_from_dict(obj)


def _cmd_train(args) -> int:
    seed = _default_seed() if args.seed is None else args.seed
    bundle = data_mod.load_bundle(args.bundle)
    facts = _train_once(args, bundle, Path(args.out), seed)
    print(f"trained ({args.baseline}) -> {args.out}  {facts['summary']}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------

def _add_eval_parser(sub) -> None:
    p = sub.add_parser("eval", help="evaluate a checkpoint on a task")
    p.add_argument("--checkpoint", nargs="+", required=True,
                   help="checkpoint file(s); rank-report accepts several")
    p.add_argument("--bundle", required=True)
    p.add_argument("--task", choices=EVAL_TASKS, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default=None, help="evaluation split (default test/novel)")
    p.add_argument("--choices", type=int, default=10, help="candidates per question (fitb)")
    p.add_argument("--way", type=int, default=5)
    p.add_argument("--shot", type=int, default=5)
    p.add_argument("--query", type=int, default=16)
    p.add_argument("--episodes", type=int, default=600)
    p.add_argument("--k", type=int, default=1)
    p.add_argument("--query-split", default="test")
    p.add_argument("--gallery-split", default="train")
    p.add_argument("--fa", choices=sorted(FA_FLAGS), default="or")
    p.add_argument("--max-pairs", type=int, default=20000)
    p.add_argument("--seed", type=int, default=None)


def _eval_split(args, bundle) -> str:
    if args.split is not None:
        if args.split not in bundle.splits:
            raise ContractError(f"bundle has no split {args.split!r}")
        return args.split
    for name in ("test", "novel"):
        if name in bundle.splits:
            return name
    raise ContractError("bundle has neither a test nor a novel split")


def _check_dims(model, bundle) -> None:
    if isinstance(model, tr.ModelBundle):
        if model.encoder_spec.kind == "identity":
            expected = model.csm_params.d
        elif model.encoder_spec.kind == "mlp":
            expected = model.encoder_weights.weights[0].shape[0]
        else:
            expected = model.encoder_weights.weights[0].shape[0]
        if expected != bundle.d:
            raise DimensionError(
                f"checkpoint expects {expected}-dimensional features, bundle has {bundle.d}"
            )


def _sampled_split_pairs(bundle, split: str, seed: int, cap: int) -> np.ndarray:
    idx = np.asarray(bundle.splits[split], dtype=np.int64)
    pairs = [(int(a), int(b)) for p, a in enumerate(idx) for b in idx[p + 1 :]]
    if len(pairs) > cap:
        rng = generator(seed, "eval-pairs", split)
        keep = rng.choice(len(pairs), size=cap, replace=False)
        pairs = [pairs[int(k)] for k in np.sort(keep)]
    return np.asarray(pairs, dtype=np.int64)


def _cmd_eval(args) -> int:
    if args.episodes < 1 or args.way < 1 or args.shot < 1 or args.query < 1:
        raise UsageError("episode parameters must all be >= 1")
    if args.k < 1:
        raise UsageError("--k must be >= 1")
    seed = _default_seed() if args.seed is None else args.seed
    bundle = data_mod.load_bundle(args.bundle)
    out_dir = Path(args.out)
    config = {
        "task": args.task, "checkpoints": [str(c) for c in args.checkpoint],
        "bundle": str(args.bundle), "seed": seed, "split": args.split,
        "choices": args.choices, "way": args.way, "shot": args.shot,
        "query": args.query, "episodes": args.episodes, "k": args.k,
        "query_split": args.query_split, "gallery_split": args.gallery_split,
        "fa": args.fa, "max_pairs": args.max_pairs,
    }
    manifest = _write_run_manifest(out_dir, "eval", config)
    fingerprint = manifest["fingerprint"]
    models = [load_any_checkpoint(c) for c in args.checkpoint]
    for model in models:
        _check_dims(model, bundle)
    model = models[0]

    if args.task == "pair-acc":
        split = _eval_split(args, bundle)
        report = ev.balanced_pair_accuracy(
            model, bundle.features, bundle.graph, bundle.splits[split]
        )
    elif args.task == "fitb":
        split = _eval_split(args, bundle)
        if not bundle.sets or not bundle.sets.get(split):
            raise ContractError(f"bundle has no item sets for split {split!r}")
        if bundle.categories is None:
            raise ContractError("fitb needs item categories")
        questions = data_mod.build_fitb_questions(
            bundle.sets[split], args.choices, bundle.categories,
            derive_seed(seed, "fitb"), pool=bundle.splits[split],
        )
        report = ev.fitb_accuracy(model, questions, bundle.features)
    elif args.task == "auc":
        split = _eval_split(args, bundle)
        if not bundle.sets or not bundle.sets.get(split):
            raise ContractError(f"bundle has no item sets for split {split!r}")
        positives = [s for s in bundle.sets[split] if len(s) >= 2]
        negatives = data_mod.resample_negative_sets(
            positives, bundle.categories, derive_seed(seed, "neg-sets"),
            pool=bundle.splits[split],
        )
        report = ev.compatibility_auc(model, positives, negatives, bundle.features)
    elif args.task == "fewshot":
        split = args.split or ("novel" if "novel" in bundle.splits else "test")
        episodes = data_mod.build_episodes(
            bundle, args.way, args.shot, args.query, args.episodes,
            derive_seed(seed, "episodes"), split=split,
        )
        report = ev.few_shot_accuracy(model, episodes, bundle.features)
    elif args.task == "recall":
        if bundle.categories is None:
            raise ContractError("recall needs item categories as labels")
        if args.query_split == args.gallery_split:
            # retrieval within one split: disjoint query/gallery halves
            idx = np.asarray(bundle.splits[args.query_split], dtype=np.int64)
            q_idx, g_idx = idx[0::2], idx[1::2]
        else:
            q_idx = np.asarray(bundle.splits[args.query_split], dtype=np.int64)
            g_idx = np.asarray(bundle.splits[args.gallery_split], dtype=np.int64)
        report = ev.recall_at_k(
            bundle.features[q_idx], bundle.features[g_idx],
            bundle.categories[q_idx], bundle.categories[g_idx], args.k,
        )
    elif args.task == "attr-map":
        split = _eval_split(args, bundle)
        if bundle.attributes is None:
            raise ContractError("attr-map needs a bundle with attributes")
        pairs = _sampled_split_pairs(bundle, split, seed, args.max_pairs)
        report = ev.attribute_map(
            model, pairs, bundle.attributes, FA_FLAGS[args.fa], bundle.features
        )
        ap_rows = ["attribute,ap"]
        for a, val in enumerate(report.detail["per_attribute_ap"]):
            ap_rows.append(f"{a},{'' if np.isnan(val) else repr(float(val))}")
        (out_dir / "per_attribute_ap.csv").write_text("\n".join(ap_rows) + "\n")
    else:  # rank-report
        split = _eval_split(args, bundle)
        pairs = _sampled_split_pairs(bundle, split, seed, args.max_pairs)
        rows = ev.attribute_rank_report(models, pairs, bundle.features)
        header = ("attribute,mean_rank_relevance,sd_rank_relevance,"
                  "mean_rank_contribution,sd_rank_contribution")
        lines = [header] + [
            f"{r['attribute']},{repr(r['mean_rank_relevance'])},{repr(r['sd_rank_relevance'])},"
            f"{repr(r['mean_rank_contribution'])},{repr(r['sd_rank_contribution'])}"
            for r in rows
        ]
        (out_dir / "rank_report.csv").write_text("\n".join(lines) + "\n")
        mean_top = min(r["mean_rank_relevance"] for r in rows)
        report = ev.MetricReport("rank_report_runs", float(len(models)), None, len(rows),
                                 detail={"best_mean_rank_relevance": mean_top})

    _write_metric_files(out_dir, report, fingerprint)
    print(f"{report.name} = {report.value:.6f} (count {report.count}) -> {out_dir}")
    return 0


# ---------------------------------------------------------------------------
# gradcheck
# ---------------------------------------------------------------------------

def _add_gradcheck_parser(sub) -> None:
    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--dims", default="d=6,M=4", help="like d=6,M=4")
    p.add_argument("--seeds", type=int, default=100)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.add_argument("--negate-analytic", action="store_true", help=argparse.SUPPRESS)


def _parse_dims(text: str) -> tuple[int, int]:
    out = {}
    for part in text.split(","):
        key, _, value = part.partition("=")
        out[key.strip().lower()] = int(value)
    return out.get("d", 6), out.get("m", 4)


def _kink_margin(kind, spec, params, feats, idx_i, idx_j, a_hat_values) -> float:
    """Distance of the nearest relu/abs kink from its argument.

    Central differences are only valid away from non-differentiable points,
    so compositions that land too close to one are redrawn.
    """
    from .encoders import encode

    if kind == "csm":
        h = feats
        margin = np.inf
    else:
        weights = tr.EncoderWeights(
            spec.kind,
            [params[f"enc_w{k}"] for k in range(sum(1 for p in params if p.startswith("enc_w")))],
            [params[f"enc_b{k}"] for k in range(sum(1 for p in params if p.startswith("enc_b")))],
        )
        margin = np.inf
        if spec.kind == "mlp":
            pre = feats @ weights.weights[0] + weights.biases[0]
            margin = min(margin, float(np.abs(pre).min()))
            h = np.maximum(pre, 0.0) @ weights.weights[1] + weights.biases[1]
        else:
            h = feats
            for w in weights.weights:
                pre = (a_hat_values @ h) @ w
                margin = min(margin, float(np.abs(pre).min()))
                h = np.maximum(pre, 0.0)
    # an exactly-zero abs argument is symmetric under central differences and
    # matches the subgradient 0; only near-zero nonzero entries are unsafe
    diff = h[idx_i] - h[idx_j]
    nonzero = np.abs(diff[diff != 0.0])
    if nonzero.size:
        margin = min(margin, float(nonzero.min()))
    return margin


def gradcheck_composition(seed: int, d: int, m: int, step: float = 1e-5):
    """One randomized (loss_fn, params) pair cycling the encoder kinds.

    Draws are redrawn (deterministically) when the composition is unmeasurable
    by central differences at 64-bit: a relu/abs argument within 64 steps of
    its kink, or a parameter entry whose true gradient sits below the
    subtraction noise floor of the difference quotient.
    """
    kind = ("csm", "mlp", "gcn")[seed % 3]
    n, n_pairs = 8, 6
    cfg = csm_mod.CsmConfig(m=m)
    from .encoders import encode_on_tape, init_encoder_weights

    for attempt in range(64):
        rng = generator(seed, "gradcheck", attempt)
        feats = rng.normal(size=(n, d))
        idx_i = rng.integers(0, n, size=n_pairs)
        idx_j = (idx_i + 1 + rng.integers(0, n - 1, size=n_pairs)) % n
        e = rng.integers(0, 2, size=(n_pairs, 1)).astype(float)
        labels = rng.integers(0, 2, size=(n_pairs, m)).astype(float)
        mask = rng.integers(0, 2, size=(n_pairs, m)).astype(float)
        params = dict(csm_mod.init_params(d, m, derive_seed(seed, attempt)).as_dict())

        if kind == "csm":
            spec = EncoderSpec(kind="identity")
            params["features"] = feats
        elif kind == "mlp":
            spec = EncoderSpec(kind="mlp", layer_dims=(d + 1, d))
            params.update(init_encoder_weights(spec, d, derive_seed(seed, attempt)).as_dict())
        else:
            spec = EncoderSpec(kind="gcn", num_layers=2, hidden_dim=d, activation="relu")
            params.update(init_encoder_weights(spec, d, derive_seed(seed, attempt)).as_dict())
        edges = set()
        while len(edges) < n:
            a, b = rng.integers(0, n, size=2)
            if a != b:
                edges.add((min(int(a), int(b)), max(int(a), int(b))))
        a_hat_values = normalize_adjacency(SimilarityGraph(n, edges))

        def loss_fn(tape, tensors, _kind=kind, _spec=spec, _feats=feats,
                    _a_hat=a_hat_values, _i=idx_i, _j=idx_j, _e=e,
                    _labels=labels, _mask=mask):
            if _kind == "csm":
                h = tensors["features"]
            else:
                a_hat = tape.constant(_a_hat) if _kind == "gcn" else None
                h = encode_on_tape(_spec, tape, tape.constant(_feats), tensors, a_hat)
            hi = ad.gather_rows(h, _i)
            hj = ad.gather_rows(h, _j)
            rho, p = csm_mod.csm_on_tape(tape, hi, hj, tensors, cfg)
            link = ad.bce_mean(p, _e)
            attr = ad.masked_bce_mean(rho, _labels, _mask)
            # |h_i - h_j| cancels any common shift of the encodings (the final
            # mlp bias is invisible to it); a direct per-node term keeps every
            # parameter measurable
            node = ad.scale(ad.mean_all(ad.sigmoid(h)), 0.25)
            return ad.add(ad.add(link, attr), node)

        if _kink_margin(kind, spec, params, feats, idx_i, idx_j, a_hat_values) <= 64 * step:
            continue
        probe = ad.Tape()
        tensors = {k: probe.parameter(v, k) for k, v in params.items()}
        grads = ad.backward(probe, loss_fn(probe, tensors))
        # exactly-zero gradients belong to structurally dead directions (for
        # example a relu channel off for every node); the probe cannot move
        # them either, so numeric and analytic agree at 0. Only tiny nonzero
        # gradients drown in the difference-quotient noise floor.
        live_mins = [
            float(np.abs(g[g != 0.0]).min()) for g in grads.grads.values() if (g != 0.0).any()
        ]
        if min(live_mins, default=1.0) >= 1e-6:
            return loss_fn, params
    raise NumericError(f"could not draw a finite-difference-measurable composition for seed {seed}")


def _cmd_gradcheck(args) -> int:
    d, m = _parse_dims(args.dims)
    transform = None
    if args.negate_analytic:
        def transform(store):
            return ad.GradientStore({k: -v for k, v in store.grads.items()})

    worst = 0.0
    worst_where = ("", -1, -1)
    for seed in range(args.seeds):
        loss_fn, params = gradcheck_composition(seed, d, m)
        errors = ad.finite_diff_errors(loss_fn, params, step=args.step, grad_transform=transform)
        for name, err in errors.items():
            flat = int(err.argmax())
            if err.flat[flat] > worst:
                worst = float(err.flat[flat])
                worst_where = (name, flat, seed)
    print(f"gradcheck: {args.seeds} seeds, worst relative error {worst:.3e} "
          f"(tolerance {args.tolerance:g})")
    if worst >= args.tolerance:
        name, flat, seed = worst_where
        print(f"FAIL at parameter {name}[{flat}] (seed {seed})", file=sys.stderr)
        return 1
    print("PASS")
    return 0


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------

def _add_sweep_parser(sub) -> None:
    p = sub.add_parser("sweep", help="train+eval across one axis of values")
    p.add_argument("--axis", choices=("lambda", "conditions", "fa"), required=True)
    p.add_argument("--values", required=True, help="comma-separated axis values")
    p.add_argument("--bundle", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--runs", type=int, default=1)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--eval-task", choices=("pair-acc",), default="pair-acc")
    p.add_argument("--eval-split", default=None)
    _add_train_flags(p)


def _sweep_axis_values(args) -> list[str]:
    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise UsageError("--values must list at least one value")
    return values


def _sweep_one(packed) -> tuple[str, int, float | None, str | None]:
    """Worker: train with one axis value, return the evaluated metric."""
    args_dict, axis, value, run, bundle_dir, out_dir = packed
    args = argparse.Namespace(**args_dict)
    try:
        if axis == "lambda":
            args.lambda_ = float(value)
        elif axis == "conditions":
            args.conditions = int(value)
        else:
            if value not in FA_FLAGS:
                raise ContractError(f"unknown fa value {value!r}")
            args.fa = value
        bundle = data_mod.load_bundle(bundle_dir)
        run_dir = Path(out_dir) / "runs" / f"{axis}-{value}-run{run}"
        seed = derive_seed(args.seed if args.seed is not None else _default_seed(),
                           "sweep", value, run)
        _train_once(args, bundle, run_dir, seed)
        model = load_any_checkpoint(run_dir / "checkpoint.json")
        split = args.eval_split
        if split is None:
            split = "test" if "test" in bundle.splits else "novel"
        report = ev.balanced_pair_accuracy(
            model, bundle.features, bundle.graph, bundle.splits[split]
        )
        return value, run, report.value, None
    except Exception as exc:  # noqa: BLE001 - failures are recorded, sweep continues
        return value, run, None, f"{type(exc).__name__}: {exc}"


def _cmd_sweep(args) -> int:
    values = _sweep_axis_values(args)
    if args.runs < 1:
        raise UsageError("--runs must be >= 1")
    out_dir = Path(args.out)
    config = {k: v for k, v in vars(args).items() if k != "func"}
    _write_run_manifest(out_dir, "sweep", {k: str(v) for k, v in sorted(config.items())})
    jobs = []
    args_dict = {k: v for k, v in vars(args).items() if k != "func"}
    for value in values:
        for run in range(args.runs):
            jobs.append((args_dict, args.axis, value, run, str(args.bundle), str(out_dir)))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_sweep_one, jobs))
    else:
        results = [_sweep_one(job) for job in jobs]

    lines = ["value,run,metric"]
    failures = []
    by_value: dict[str, list[float]] = {}
    for value, run, metric, error in results:
        lines.append(f"{value},{run},{'' if metric is None else repr(metric)}")
        if metric is None:
            failures.append((value, run, error))
        else:
            by_value.setdefault(value, []).append(metric)
    (out_dir / "sweep.csv").write_text("\n".join(lines) + "\n")

    summary = ["value,mean,half_width_95,runs"]
    for value in values:
        metrics = by_value.get(value, [])
        if metrics:
            mean = float(np.mean(metrics))
            half = (
                float(1.96 * np.std(metrics, ddof=1) / np.sqrt(len(metrics)))
                if len(metrics) > 1 else 0.0
            )
            summary.append(f"{value},{repr(mean)},{repr(half)},{len(metrics)}")
        else:
            summary.append(f"{value},,,0")
    (out_dir / "summary.csv").write_text("\n".join(summary) + "\n")

    for value, run, error in failures:
        print(f"run failed: {args.axis}={value} run={run}: {error}", file=sys.stderr)
    print(f"sweep over {args.axis} complete: {len(results) - len(failures)}/{len(results)} runs ok")
    return 1 if failures else 0


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

class UsageError(Exception):
    """Flag-level validation failure; maps to exit code 2."""


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pan",
        description="pairwise attribute-informed similarity: generate, train, evaluate",
    )
    parser.add_argument("--config", default=None,
                        help="JSON file of snake_case defaults; flags override")
    sub = parser.add_subparsers(dest="command", required=True)
    _add_gen_parser(sub)
    _add_train_parser(sub)
    _add_eval_parser(sub)
    _add_gradcheck_parser(sub)
    _add_sweep_parser(sub)
    # kept for --config default injection: subparser defaults would otherwise
    # shadow set_defaults() on the top-level parser
    parser._pan_subparsers = sub.choices  # noqa: SLF001
    return parser


def _apply_config_file(parser: argparse.ArgumentParser, argv: list[str]) -> list[str]:
    """Load --config JSON into parser defaults; explicit flags still win."""
    if "--config" not in argv:
        return argv
    pos = argv.index("--config")
    if pos + 1 >= len(argv):
        parser.error("--config needs a path")
    path = Path(argv[pos + 1])
    if not path.exists():
        parser.error(f"config file {path} does not exist")
    try:
        defaults = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        parser.error(f"config file {path}: {exc}")
    if not isinstance(defaults, dict):
        parser.error(f"config file {path} must hold a JSON object")
    parser.set_defaults(**defaults)
    for sub in parser._pan_subparsers.values():  # noqa: SLF001
        sub.set_defaults(**defaults)
    return argv[:pos] + argv[pos + 2 :]


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    argv = _apply_config_file(parser, argv)
    args = parser.parse_args(argv)
    handlers = {
        "gen": _cmd_gen,
        "train": _cmd_train,
        "eval": _cmd_eval,
        "gradcheck": _cmd_gradcheck,
        "sweep": _cmd_sweep,
    }
    try:
        return handlers[args.command](args)
    except UsageError as exc:
        parser.error(str(exc))  # exits 2
        return 2
    except PAN_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
