"""Command-line entry point.

Commands: gen-data, pretrain, probe, caption, eval, repl. Config precedence
is defaults < JSON config file (--config) < command-line flags; unknown
config-file keys are rejected before anything is written. Every command
writes a run_config.json with the fully resolved configuration next to its
artifacts. Exit codes: 0 success, 2 config error, 3 runtime/numerical
failure.

Environment overrides: BICAP_CORPUS (default corpus root), BICAP_OUT
(default output directory).
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import replace

import numpy as np

from . import data as D
from . import metrics as M
from .caption import SamplingPolicy, generate_report, select_prompts
from .model import ModelConfig
from .rng import make_rng
from .textpipe import Report, load_vocabulary, remove_prior_references
from .training import (
    Checkpoint,
    ProbeConfig,
    ProbeHead,
    TrainConfig,
    TrainingDiverged,
    linear_probe_train,
    load_checkpoint,
    pooled_features_batch,
    pretrain,
    save_checkpoint,
    write_history_csv,
)


class ConfigError(Exception):
    """Bad flags, bad config file or missing inputs; exits with code 2."""


def _env(name: str):
    return os.environ.get(name) or None


def _resolve(defaults: dict, config_path, cli_values: dict) -> dict:
    merged = dict(defaults)
    if config_path:
        if not os.path.exists(config_path):
            raise ConfigError(f"config file not found: {config_path}")
        with open(config_path, encoding="utf-8") as fh:
            try:
                file_cfg = json.load(fh)
            except json.JSONDecodeError as e:
                raise ConfigError(f"config file is not valid JSON: {e}") from e
        unknown = sorted(set(file_cfg) - set(defaults))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        merged.update(file_cfg)
    for key, value in cli_values.items():
        if value is not None:
            merged[key] = value
    return merged


def _require_dir(path, what: str) -> str:
    if not path:
        raise ConfigError(f"{what} not given (flag or environment)")
    if not os.path.isdir(path):
        raise ConfigError(f"{what} does not exist: {path}")
    return os.fspath(path)


def _require_file(path, what: str) -> str:
    if not path:
        raise ConfigError(f"{what} not given")
    if not os.path.isfile(path):
        raise ConfigError(f"{what} does not exist: {path}")
    return os.fspath(path)


def _write_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def _out_dir(resolved: dict) -> str:
    out = resolved.get("out")
    if not out:
        raise ConfigError("output directory not given (--out or BICAP_OUT)")
    os.makedirs(out, exist_ok=True)
    _write_json(os.path.join(out, "run_config.json"), {"config": resolved})
    return out


def _load_corpus(root: str):
    root = _require_dir(root, "corpus root")
    records = D.load_manifest(root)
    stats = D.load_stats(root)
    return root, records, stats


# ---------------------------------------------------------------------------
# gen-data


GEN_DEFAULTS = {
    "seed": 0,
    "n": 200,
    "out": None,
    "prior_fraction": 0.4,
    "negation_prob": 0.5,
    "image_size": 64,
    "train_fraction": 0.8,
    "val_fraction": 0.1,
    "test_fraction": 0.1,
    "prevalences": None,
    "studies_per_patient": 2,
}


def cmd_gen_data(resolved: dict) -> int:
    out = _out_dir(resolved)
    prevalences = resolved["prevalences"]
    if isinstance(prevalences, str):
        prevalences = json.loads(prevalences)
    records, images = D.synth_generate(
        seed=resolved["seed"],
        n=resolved["n"],
        prevalences=prevalences,
        prior_fraction=resolved["prior_fraction"],
        negation_prob=resolved["negation_prob"],
        image_size=resolved["image_size"],
        studies_per_patient=resolved["studies_per_patient"],
    )
    fractions = (resolved["train_fraction"], resolved["val_fraction"], resolved["test_fraction"])
    records = D.split_dataset(records, fractions, seed=resolved["seed"])
    stats = D.save_corpus(out, records, images, D.build_vocab_tokens())
    print(f"wrote {len(records)} examples to {out} (vocab {len(D.build_vocab_tokens())} tokens)")
    print(json.dumps(stats["label_frequencies"], sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# pretrain


PRETRAIN_DEFAULTS = {
    "corpus": None,
    "out": None,
    "vocab": None,
    "steps": 2000,
    "batch_size": 32,
    "encoder_lr": 0.2,
    "decoder_lr": 0.02,
    "warmup_fraction": 0.05,
    "seed": 0,
    "forward_only": False,
    "keep_priors": False,
    "eval_interval": 200,
    "layers": 2,
    "embed_dim": 128,
    "heads": 4,
    "ff_dim": 512,
    "context_len": 64,
    "dropout": 0.1,
    "rotate_degrees": 0.0,
    "right_angles": "0",
    "lookahead_k": 5,
    "lookahead_alpha": 0.5,
}


def cmd_pretrain(resolved: dict) -> int:
    root, records, stats = _load_corpus(resolved["corpus"])
    vocab_path = resolved["vocab"] or os.path.join(root, "vocab.txt")
    vocab = load_vocabulary(_require_file(vocab_path, "vocabulary file"))
    out = _out_dir(resolved)

    train_records = D.split_records(records, "train")
    val_records = D.split_records(records, "val")
    if not train_records or not val_records:
        raise ConfigError("corpus manifest has no train/val split tags")
    train_images = D.load_images(root, train_records)
    val_images = D.load_images(root, val_records)

    model_config = ModelConfig(
        vocab_size=len(vocab),
        context_len=resolved["context_len"],
        embed_dim=resolved["embed_dim"],
        layers=resolved["layers"],
        heads=resolved["heads"],
        ff_dim=resolved["ff_dim"],
        dropout=resolved["dropout"],
        image_size=resolved["image_size"] if "image_size" in resolved else train_images.shape[1],
    )
    train_config = TrainConfig(
        total_steps=resolved["steps"],
        batch_size=resolved["batch_size"],
        encoder_lr=resolved["encoder_lr"],
        decoder_lr=resolved["decoder_lr"],
        warmup_fraction=resolved["warmup_fraction"],
        seed=resolved["seed"],
        forward_only=resolved["forward_only"],
        remove_priors=not resolved["keep_priors"],
        eval_interval=resolved["eval_interval"],
        lookahead_k=resolved["lookahead_k"],
        lookahead_alpha=resolved["lookahead_alpha"],
    )
    policy = D.AugmentPolicy(
        rotate_degrees=resolved["rotate_degrees"],
        output_side=model_config.image_size,
        right_angle_set=tuple(int(a) for a in str(resolved["right_angles"]).split(",")),
        mean=stats["image_mean"],
        std=stats["image_std"],
    )
    best, history = pretrain(
        train_records, val_records, train_images, val_images, vocab, model_config, train_config, policy
    )
    save_checkpoint(best, os.path.join(out, "checkpoint.bin"))
    write_history_csv(os.path.join(out, "loss.csv"), history, resolved)
    print(f"best checkpoint at step {best.step}, val loss {best.val_loss:.4f} -> {out}/checkpoint.bin")
    return 0


# ---------------------------------------------------------------------------
# probe


PROBE_DEFAULTS = {
    "checkpoint": None,
    "corpus": None,
    "out": None,
    "fraction": 1.0,
    "seed": 0,
    "epochs": 80,
    "lr": 0.02,
    "batch_size": 16,
}


def _load_model(resolved: dict) -> Checkpoint:
    path = _require_file(resolved["checkpoint"], "checkpoint")
    return load_checkpoint(path)


def _normalized_images(root, records, ckpt: Checkpoint) -> np.ndarray:
    images = D.load_images(root, records)
    return D.normalize_image(images, ckpt.meta.get("norm_mean", 0.0), ckpt.meta.get("norm_std", 1.0))


def cmd_probe(resolved: dict) -> int:
    ckpt = _load_model(resolved)
    root, records, stats = _load_corpus(resolved["corpus"])
    out = _out_dir(resolved)
    classes = sorted(stats["label_counts"])

    train_records = D.split_records(records, "train")
    if resolved["fraction"] < 1.0:
        train_records = D.subsample_labels(train_records, resolved["fraction"], seed=resolved["seed"])
    val_records = D.split_records(records, "val")
    test_records = D.split_records(records, "test")
    if not (train_records and val_records and test_records):
        raise ConfigError("corpus manifest needs train/val/test split tags")

    head = linear_probe_train(
        ckpt.params,
        _normalized_images(root, train_records, ckpt),
        [set(r["labels"]) for r in train_records],
        _normalized_images(root, val_records, ckpt),
        [set(r["labels"]) for r in val_records],
        classes,
        ProbeConfig(lr=resolved["lr"], epochs=resolved["epochs"], batch_size=resolved["batch_size"], seed=resolved["seed"]),
    )

    val_scores = head.scores(pooled_features_batch(ckpt.params, _normalized_images(root, val_records, ckpt)))
    y_val = np.array([[c in set(r["labels"]) for c in classes] for r in val_records], dtype=int)
    thresholds = {}
    for j, c in enumerate(classes):
        if 0 < y_val[:, j].sum() < len(val_records):
            thresholds[c], _ = M.youden_threshold(val_scores[:, j], y_val[:, j])
        else:
            thresholds[c] = 0.5

    test_scores = head.scores(pooled_features_batch(ckpt.params, _normalized_images(root, test_records, ckpt)))
    y_test = np.array([[c in set(r["labels"]) for c in classes] for r in test_records], dtype=int)
    per_class = {}
    aucs, aucprs = [], []
    for j, c in enumerate(classes):
        if 0 < y_test[:, j].sum() < len(test_records):
            auc = M.roc_auc(test_scores[:, j], y_test[:, j])
            aucpr = M.pr_auc(test_scores[:, j], y_test[:, j])
        else:
            auc = aucpr = float("nan")
        per_class[c] = {"auc": auc, "aucpr": aucpr, "youden_threshold": thresholds[c]}
        if np.isfinite(auc):
            aucs.append(auc)
            aucprs.append(aucpr)

    payload = {
        "config": resolved,
        "classes": classes,
        "per_class": per_class,
        "macro_auc": float(np.mean(aucs)),
        "macro_aucpr": float(np.mean(aucprs)),
        "n_train": len(train_records),
        "head": {"weight": head.weight.tolist(), "bias": head.bias.tolist()},
    }
    _write_json(os.path.join(out, "probe.json"), payload)
    print(f"probe macro-AUC {payload['macro_auc']:.4f}, macro-AUCPR {payload['macro_aucpr']:.4f} -> {out}/probe.json")
    return 0


def load_probe_head(path) -> tuple[ProbeHead, dict]:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    head = ProbeHead(
        classes=payload["classes"],
        weight=np.asarray(payload["head"]["weight"], dtype=np.float64),
        bias=np.asarray(payload["head"]["bias"], dtype=np.float64),
    )
    thresholds = {c: payload["per_class"][c]["youden_threshold"] for c in payload["classes"]}
    return head, thresholds


# ---------------------------------------------------------------------------
# caption / eval


CAPTION_DEFAULTS = {
    "checkpoint": None,
    "corpus": None,
    "out": None,
    "image": None,
    "mode": "unprompted",
    "prompts": None,
    "auto_prompts": None,
    "nucleus_p": 0.9,
    "temperature": 1.0,
    "max_length": None,
    "seed": 0,
    "limit": None,
}


def _reference_text(record) -> str:
    return Report(record["findings"], record["impression"]).text()


def _caption_metrics(reports, records, stats) -> dict:
    lexicon = M.default_lexicon()
    texts = [r["text"] for r in reports]
    truth = [set(rec["labels"]) for rec in records]
    table = M.clinical_efficacy(texts, truth, lexicon, train_frequency=stats.get("label_frequencies"))
    bleus = [M.bleu2(t, _reference_text(rec)) if t.strip() else 0.0 for t, rec in zip(texts, records)]
    return {
        "bleu2": float(np.mean(bleus)),
        "macro_f1": table.macro_f1,
        "per_class": table.to_dict()["per_class"],
        "hallucination_rate": M.hallucination_rate(texts),
    }


def cmd_caption(resolved: dict) -> int:
    ckpt = _load_model(resolved)
    root, records, stats = _load_corpus(resolved["corpus"])
    vocab = load_vocabulary(os.path.join(root, "vocab.txt"))
    if len(vocab) != ckpt.config.vocab_size:
        raise ConfigError(f"vocabulary size {len(vocab)} does not match checkpoint ({ckpt.config.vocab_size})")
    if resolved["mode"] not in ("unprompted", "prompted", "iterative"):
        raise ConfigError(f"unknown mode {resolved['mode']!r}")
    out = _out_dir(resolved)

    head = thresholds = None
    if resolved["auto_prompts"]:
        head, thresholds = load_probe_head(_require_file(resolved["auto_prompts"], "probe output"))
    fixed_prompts = [p.strip() for p in resolved["prompts"].split(",")] if resolved["prompts"] else None

    if resolved["image"]:
        targets = [{"image": resolved["image"], "labels": None}]
        images = np.stack([D.read_pgm(_require_file(resolved["image"], "image"))])
    else:
        targets = D.split_records(records, "test")
        if resolved["limit"]:
            targets = targets[: resolved["limit"]]
        if not targets:
            raise ConfigError("corpus has no test split")
        images = D.load_images(root, targets)
    norm = D.normalize_image(images, ckpt.meta.get("norm_mean", 0.0), ckpt.meta.get("norm_std", 1.0))

    policy = SamplingPolicy(
        nucleus_p=resolved["nucleus_p"],
        temperature=resolved["temperature"],
        max_length=resolved["max_length"],
        seed=resolved["seed"],
    )
    reports = []
    for i, (rec, img) in enumerate(zip(targets, norm)):
        prompts = fixed_prompts
        if head is not None:
            feats = pooled_features_batch(ckpt.params, img[None])[0]
            probs = head.scores(feats[None])[0]
            prompts = select_prompts(probs, [thresholds[c] for c in head.classes], head.classes)
        rep = generate_report(
            ckpt.params, vocab, img, resolved["mode"], replace(policy, seed=policy.seed + i), prompts=prompts
        )
        row = {"image": rec["image"], **rep.to_dict()}
        reports.append(row)

    reports_path = os.path.join(out, "reports.jsonl")
    with open(reports_path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps({"meta": {"config": resolved}}, sort_keys=True) + "\n")
        for row in reports:
            fh.write(json.dumps(row, sort_keys=True) + "\n")

    if targets[0]["labels"] is not None:
        metrics = _caption_metrics(reports, targets, stats)
        metrics["config"] = resolved
        _write_json(os.path.join(out, "metrics.json"), metrics)
        print(
            f"{len(reports)} reports -> {reports_path}; bleu2 {metrics['bleu2']:.4f}, "
            f"macro_f1 {metrics['macro_f1']:.4f}, hallucination {metrics['hallucination_rate']:.4f}"
        )
    else:
        print(f"{len(reports)} report(s) -> {reports_path}")
        print(reports[0]["text"])
    return 0


EVAL_DEFAULTS = {"reports": None, "corpus": None, "out": None}


def cmd_eval(resolved: dict) -> int:
    root, records, stats = _load_corpus(resolved["corpus"])
    path = _require_file(resolved["reports"], "reports file")
    rows = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if not line.strip():
                continue
            obj = json.loads(line)
            if "meta" in obj:
                continue
            rows.append(obj)
    if not rows:
        raise ConfigError("reports file contains no report rows")
    by_image = {r["image"]: r for r in records}
    try:
        matched = [by_image[row["image"]] for row in rows]
    except KeyError as e:
        raise ConfigError(f"report references unknown image {e}") from e
    out = _out_dir(resolved)
    metrics = _caption_metrics(rows, matched, stats)
    metrics["config"] = resolved
    _write_json(os.path.join(out, "metrics.json"), metrics)
    print(json.dumps({k: metrics[k] for k in ("bleu2", "macro_f1", "hallucination_rate")}, sort_keys=True))
    return 0


# ---------------------------------------------------------------------------
# repl


REPL_DEFAULTS = {
    "checkpoint": None,
    "corpus": None,
    "image": None,
    "nucleus_p": 0.9,
    "temperature": 1.0,
    "seed": 0,
}

REPL_USAGE = (
    "type a prompt for a prompted sentence; prefix with '+' for iterative; "
    "/unprompted for a full report; /seed N to reseed; /quit to exit"
)


def cmd_repl(resolved: dict) -> int:
    ckpt = _load_model(resolved)
    root, _records, _stats = _load_corpus(resolved["corpus"])
    vocab = load_vocabulary(os.path.join(root, "vocab.txt"))
    image = D.read_pgm(_require_file(resolved["image"], "image"))
    img = D.normalize_image(image, ckpt.meta.get("norm_mean", 0.0), ckpt.meta.get("norm_std", 1.0))
    seed = resolved["seed"]
    counter = 0
    print(REPL_USAGE)
    for line in sys.stdin:
        line = line.strip()
        if not line:
            print(REPL_USAGE)
            continue
        if line == "/quit":
            return 0
        if line.startswith("/seed"):
            parts = line.split()
            if len(parts) != 2 or not parts[1].lstrip("-").isdigit():
                print("usage: /seed N")
                continue
            seed = int(parts[1])
            counter = 0
            print(f"seed set to {seed}")
            continue
        policy = SamplingPolicy(
            nucleus_p=resolved["nucleus_p"], temperature=resolved["temperature"], seed=seed + counter
        )
        counter += 1
        if line == "/unprompted":
            print(generate_report(ckpt.params, vocab, img, "unprompted", policy).text)
            continue
        mode = "iterative" if line.startswith("+") else "prompted"
        prompt = line[1:].strip() if line.startswith("+") else line
        if not prompt:
            print(REPL_USAGE)
            continue
        print(generate_report(ckpt.params, vocab, img, mode, policy, prompts=[prompt]).text)
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def _add_common(sub):
    sub.add_argument("--config", help="JSON config file (defaults < file < flags)")
    sub.add_argument("--out", default=None, help="output directory")
    sub.add_argument("--seed", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bicap", description="bidirectional captioning pretraining workbench")
    subs = parser.add_subparsers(dest="command", required=True)

    g = subs.add_parser("gen-data", help="generate a synthetic image-report corpus")
    _add_common(g)
    g.add_argument("--n", type=int, default=None)
    g.add_argument("--prior-fraction", dest="prior_fraction", type=float, default=None)
    g.add_argument("--negation-prob", dest="negation_prob", type=float, default=None)
    g.add_argument("--image-size", dest="image_size", type=int, default=None)
    g.add_argument("--prevalences", default=None, help='JSON dict, e.g. \'{"edema": 0.3}\'')
    g.add_argument("--train-fraction", dest="train_fraction", type=float, default=None)
    g.add_argument("--val-fraction", dest="val_fraction", type=float, default=None)
    g.add_argument("--test-fraction", dest="test_fraction", type=float, default=None)
    g.add_argument("--studies-per-patient", dest="studies_per_patient", type=int, default=None)

    p = subs.add_parser("pretrain", help="run bicaptioning pretraining")
    _add_common(p)
    p.add_argument("--corpus", default=None)
    p.add_argument("--vocab", default=None, help="vocabulary file (default: corpus vocab.txt)")
    p.add_argument("--steps", type=int, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--encoder-lr", dest="encoder_lr", type=float, default=None)
    p.add_argument("--decoder-lr", dest="decoder_lr", type=float, default=None)
    p.add_argument("--warmup-fraction", dest="warmup_fraction", type=float, default=None)
    p.add_argument("--eval-interval", dest="eval_interval", type=int, default=None)
    p.add_argument("--layers", type=int, default=None)
    p.add_argument("--embed-dim", dest="embed_dim", type=int, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--ff-dim", dest="ff_dim", type=int, default=None)
    p.add_argument("--context-len", dest="context_len", type=int, default=None)
    p.add_argument("--dropout", type=float, default=None)
    p.add_argument("--rotate-degrees", dest="rotate_degrees", type=float, default=None)
    p.add_argument("--right-angles", dest="right_angles", default=None, help="comma list from {0,90,180,270}")
    p.add_argument("--forward-only", dest="forward_only", action="store_const", const=True, default=None)
    p.add_argument("--keep-priors", dest="keep_priors", action="store_const", const=True, default=None)
    p.add_argument("--lookahead-k", dest="lookahead_k", type=int, default=None)
    p.add_argument("--lookahead-alpha", dest="lookahead_alpha", type=float, default=None)

    r = subs.add_parser("probe", help="linear-probe a frozen checkpoint")
    _add_common(r)
    r.add_argument("--checkpoint", default=None)
    r.add_argument("--corpus", default=None)
    r.add_argument("--fraction", type=float, default=None)
    r.add_argument("--epochs", type=int, default=None)
    r.add_argument("--lr", type=float, default=None)
    r.add_argument("--batch-size", dest="batch_size", type=int, default=None)

    c = subs.add_parser("caption", help="generate reports for the test split or one image")
    _add_common(c)
    c.add_argument("--checkpoint", default=None)
    c.add_argument("--corpus", default=None)
    c.add_argument("--image", default=None, help="caption a single PGM instead of the test split")
    c.add_argument("--mode", default=None, choices=("unprompted", "prompted", "iterative"))
    c.add_argument("--prompts", default=None, help="comma-separated prompt list")
    c.add_argument("--auto-prompts", dest="auto_prompts", default=None, help="probe.json for classifier-driven prompts")
    c.add_argument("--nucleus-p", dest="nucleus_p", type=float, default=None)
    c.add_argument("--temperature", type=float, default=None)
    c.add_argument("--max-length", dest="max_length", type=int, default=None)
    c.add_argument("--limit", type=int, default=None, help="cap the number of test images")

    e = subs.add_parser("eval", help="recompute metrics for an existing reports.jsonl")
    _add_common(e)
    e.add_argument("--reports", default=None)
    e.add_argument("--corpus", default=None)

    i = subs.add_parser("repl", help="interactive prompting session")
    _add_common(i)
    i.add_argument("--checkpoint", default=None)
    i.add_argument("--corpus", default=None)
    i.add_argument("--image", default=None)
    i.add_argument("--nucleus-p", dest="nucleus_p", type=float, default=None)
    i.add_argument("--temperature", type=float, default=None)

    return parser


_COMMANDS = {
    "gen-data": (GEN_DEFAULTS, cmd_gen_data),
    "pretrain": (PRETRAIN_DEFAULTS, cmd_pretrain),
    "probe": (PROBE_DEFAULTS, cmd_probe),
    "caption": (CAPTION_DEFAULTS, cmd_caption),
    "eval": (EVAL_DEFAULTS, cmd_eval),
    "repl": (REPL_DEFAULTS, cmd_repl),
}


def main(argv=None) -> int:
    parser = build_parser()
    args = vars(parser.parse_args(argv))
    command = args.pop("command")
    config_path = args.pop("config", None)
    defaults, runner = _COMMANDS[command]
    try:
        resolved = _resolve(defaults, config_path, args)
        if "corpus" in defaults and resolved.get("corpus") is None:
            resolved["corpus"] = _env("BICAP_CORPUS")
        if resolved.get("out") is None:
            resolved["out"] = _env("BICAP_OUT")
        return runner(resolved)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except (TrainingDiverged, FloatingPointError, ValueError, OSError) as e:
        print(f"runtime error: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
