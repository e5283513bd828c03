"""Command-line entry point.

Exit codes: 0 success, 1 invalid input (arguments, config, manifest, audio,
checkpoint), 2 failure while running (including a failed gradient check).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import diffcore as dc
from .config import ConfigError, RunConfig, format_config, load_config
from .data import ManifestError, ManifestRow, load_dataset, read_manifest, write_manifest
from .dsp import mfcc, read_audio, save_features
from .eval import PROTOCOL_TAGS, cross_eval, export_embeddings, kfold_split, run_cv_protocols
from .model import (CheckpointError, ModelConfig, checkpoint_load, checkpoint_save, forward, init_timnet,
                    normalize_variant)
from .synth import write_corpus
from .train import smoothed_cross_entropy, train

log = logging.getLogger("timnet")

GRADCHECK_CAPS = {"frames": 32, "channels": 8, "tabs": 4}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else RunConfig()
    over = {}
    if getattr(args, "seed", None) is not None:
        over["seed"] = args.seed
    if getattr(args, "variant", None):
        over["variant"] = normalize_variant(args.variant)
    for key in ("protocol", "folds", "epochs"):
        if getattr(args, key, None) is not None:
            over[key] = getattr(args, key)
    if getattr(args, "by_speaker", False):
        over["by_speaker"] = True
    if getattr(args, "no_plots", False):
        over["plots"] = False
    return replace(cfg, **over).validate()


def _out_dir(args, cfg) -> Path:
    out = Path(args.out or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    manifest = write_corpus(args.out, args.n_per_class, args.seed if args.seed is not None else 0)
    print(f"wrote {3 * args.n_per_class} clips and {manifest}")
    return 0


def _content_hash(path: Path, cfg: RunConfig) -> str:
    h = hashlib.sha256(path.read_bytes())
    h.update(cfg.feature_config().describe().encode())
    return h.hexdigest()


def cmd_extract(args) -> int:
    cfg = _resolve_config(args)
    fcfg = cfg.feature_config()
    manifest = read_manifest(args.manifest)
    out = _out_dir(args, cfg)
    index_path = out / "extract-index.json"
    index = json.loads(index_path.read_text()) if index_path.exists() else {}

    names, seen = [], set()
    for row in manifest.rows:
        name = row.path.stem
        if name in seen:
            name = f"{name}-{hashlib.sha1(str(row.path).encode()).hexdigest()[:8]}"
        seen.add(name)
        names.append(name + ".timf")

    def work(item):
        row, name = item
        target = out / name
        digest = _content_hash(row.path, cfg)
        if target.exists() and index.get(name) == digest:
            return name, digest, False, None
        try:
            feats = mfcc(read_audio(row.path), fcfg, source_id=row.path.stem)
        except (ValueError, OSError) as exc:
            return name, None, False, f"{row.path} (manifest line {row.line}): {exc}"
        save_features(feats, target)
        return name, digest, True, None

    with ThreadPoolExecutor(max_workers=max(1, args.workers)) as pool:
        results = list(pool.map(work, zip(manifest.rows, names)))

    failures = [err for _, _, _, err in results if err]
    written = sum(1 for r in results if r[2])
    feature_rows = []
    for (name, digest, _, err), row in zip(results, manifest.rows):
        if err is None:
            index[name] = digest
            feature_rows.append(ManifestRow(out / name, row.label, row.speaker))
    index_path.write_text(json.dumps(index, indent=1, sort_keys=True))
    write_manifest(out / "features.csv", feature_rows)
    print(f"extracted {written}, up to date {len(results) - written - len(failures)}, failed {len(failures)}")
    for err in failures:
        print(f"error: {err}", file=sys.stderr)
    return 1 if failures else 0


def _load_train_data(args, cfg: RunConfig):
    manifest = read_manifest(args.manifest)
    if len(manifest) == 0:
        raise ManifestError(f"{args.manifest}: manifest has no rows")
    data, T = load_dataset(manifest, cfg.feature_config(), cfg.input_T or None)
    return data, T


def _save_run_config(out: Path, cfg: RunConfig, T: int) -> None:
    (out / "config.txt").write_text(format_config(replace(cfg, input_T=T)))


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    data, T = _load_train_data(args, cfg)
    mcfg = cfg.model_config(len(data.vocab), T)
    eval_data = None
    if args.eval_manifest:
        eval_data, _ = load_dataset(read_manifest(args.eval_manifest), cfg.feature_config(), T, vocab=data.vocab)
    out = _out_dir(args, cfg)
    result = train(data, mcfg, cfg.train_config(), eval_data=eval_data)
    checkpoint_save(result.params, mcfg, out / "checkpoint.timc")
    if result.best_params is not None:
        checkpoint_save(result.best_params, mcfg, out / "best.timc")
    result.history.to_csv(out / "history.csv")
    _save_run_config(out, cfg, T)
    if cfg.plots:
        from .plotting import plot_history
        plot_history(result.history, out / "history.png", title="training curves")
    last = result.history.records[-1] if result.history.records else None
    if last is not None:
        print(f"epochs {len(result.history)}  train_loss {last.train_loss:.4f}  train_war {last.train_war:.4f}")
    if result.best_epoch is not None:
        print(f"best eval WAR {result.best_war:.4f} at epoch {result.best_epoch}")
    print(f"checkpoint written to {out / 'checkpoint.timc'}")
    return 0


def cmd_cv(args) -> int:
    cfg = _resolve_config(args)
    data, T = _load_train_data(args, cfg)
    mcfg = cfg.model_config(len(data.vocab), T)
    groups = data.speakers if cfg.by_speaker else None
    if groups is not None and not all(groups):
        raise ManifestError("--by-speaker needs a speaker for every manifest row")
    plan = kfold_split(len(data), cfg.folds, cfg.seed, cfg.protocol, groups=groups)
    out = _out_dir(args, cfg)
    histories = {}

    def on_fold(i, fold_results, result):
        histories[f"fold {i}"] = result.history
        result.history.to_csv(out / f"history_fold{i}.csv")
        r = fold_results[cfg.protocol]
        print(f"fold {i}: UAR {r.uar:.4f}  WAR {r.war:.4f}  (epoch {r.epoch})")

    report = run_cv_protocols(data, mcfg, cfg.train_config(), plan, protocols=(cfg.protocol,),
                              on_fold=on_fold)[cfg.protocol]
    report.to_csv(out / "report.csv")
    _save_run_config(out, cfg, T)
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    if cfg.plots:
        from .plotting import plot_confusion, plot_history
        tag = PROTOCOL_TAGS[cfg.protocol]
        plot_confusion(report.total_confusion, data.vocab, out / "confusion.png", title=f"{cfg.folds}-fold CV{tag}")
        plot_history(histories, out / "history.png", title=f"{cfg.folds}-fold CV{tag}")
    print(f"aggregate ({cfg.protocol}): UAR {report.uar:.4f}  WAR {report.war:.4f}")
    return 0


def _load_eval_manifest(args, cfg: RunConfig, mcfg: ModelConfig, vocab):
    manifest = read_manifest(args.manifest)
    if len(manifest) == 0:
        raise ManifestError(f"{args.manifest}: manifest has no rows")
    return load_dataset(manifest, cfg.feature_config(), mcfg.input_T, vocab=vocab)[0]


def cmd_crosseval(args) -> int:
    cfg = _resolve_config(args)
    params, mcfg = checkpoint_load(args.checkpoint)
    target, _ = load_dataset(read_manifest(args.manifest), cfg.feature_config(), mcfg.input_T)
    report = cross_eval(params, mcfg, target)
    out = _out_dir(args, cfg)
    report.to_csv(out / "crosseval.csv")
    if cfg.plots:
        from .plotting import plot_confusion
        plot_confusion(report.total_confusion, report.labels, out / "crosseval_confusion.png", title="cross-corpus")
    for w in report.warnings:
        print(f"warning: {w}", file=sys.stderr)
    print(f"shared classes: {', '.join(report.labels)}")
    print(f"UAR {report.uar:.4f}  WAR {report.war:.4f}")
    return 0


def cmd_infer(args) -> int:
    cfg = _resolve_config(args)
    params, mcfg = checkpoint_load(args.checkpoint)
    manifest = read_manifest(args.manifest)
    unknown = sorted({r.label for r in manifest.rows} - set(params.labels) - {"?"})
    if unknown:
        raise ManifestError(f"labels {unknown} are not in the checkpoint vocabulary {params.labels}")
    for r in manifest.rows:
        r.label = params.labels[0] if r.label == "?" else r.label
    data = load_dataset(manifest, cfg.feature_config(), mcfg.input_T, vocab=params.labels)[0]
    probs = np.concatenate([forward(data.features[s:s + 256], params, mcfg).probs.value
                            for s in range(0, len(data), 256)]) if len(data) else np.zeros((0, len(params.labels)))
    print(",".join(["utterance_id", "predicted"] + [f"p_{lab}" for lab in params.labels]))
    for uid, p in zip(data.ids, probs):
        print(",".join([uid, params.labels[int(p.argmax())]] + [f"{v:.6f}" for v in p]))
    return 0


def cmd_embed(args) -> int:
    cfg = _resolve_config(args)
    params, mcfg = checkpoint_load(args.checkpoint)
    data = _load_eval_manifest(args, cfg, mcfg, None)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    export_embeddings(params, mcfg, data, out)
    print(f"wrote {len(data)} embeddings to {out}")
    return 0


def gradcheck_report(batch=2, frames=16, channels=4, tabs=3, classes=3, seed=0, eps=1e-5, variant="full",
                     dropout=0.1):
    """Finite-difference check of the full training loss on random inputs."""
    for key, val in (("frames", frames), ("channels", channels), ("tabs", tabs)):
        if val > GRADCHECK_CAPS[key]:
            raise UsageError(f"--{key} {val} exceeds the gradient-check cap of {GRADCHECK_CAPS[key]}")
    mcfg = ModelConfig(classes, frames, n_tabs=tabs, channels=channels, n_features=channels,
                       dropout=dropout, variant=variant)
    rng = dc.RngStream(seed)
    params = init_timnet(mcfg, rng.split("init"))
    gen = rng.split("data").generator()
    x = gen.standard_normal((batch, frames, channels))
    y = gen.integers(0, classes, size=batch)
    named = params.trainable(mcfg)
    dropout_rng = rng.split("dropout")

    def loss():
        trace = forward(x, params, mcfg, training=True, rng=dropout_rng)
        return smoothed_cross_entropy(trace.probs, y, 0.1)

    return dc.finite_diff_check(loss, list(named.values()), eps)


def cmd_gradcheck(args) -> int:
    seed = args.seed if args.seed is not None else 0
    report = gradcheck_report(args.batch, args.frames, args.channels, args.tabs, args.classes, seed, args.eps,
                              normalize_variant(args.variant or "full"))
    groups = {}
    for name, err in report.per_param.items():
        parts = name.split(".")
        group = ".".join(parts[:2]) if parts[0] in ("fwd", "bwd") else parts[0]
        groups[group] = max(groups.get(group, 0.0), err)
    for group, err in groups.items():
        print(f"{group:16s} max_rel_err {err:.3e}")
    ok = report.passed(args.tol)
    print(f"coordinates {report.n_coords}  max_rel_err {report.max_rel_error:.3e}  "
          f"mean_rel_err {report.mean_rel_error:.3e}  tol {args.tol:.0e}  {'PASS' if ok else 'FAIL'}")
    return 0 if ok else 2


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="timnet", description="Temporal-aware bi-directional multi-scale network for speech emotion recognition")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, manifest=True, out=True):
        sp.add_argument("--config", help="key = value run configuration file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--no-plots", action="store_true", help="skip figure rendering")
        if manifest:
            sp.add_argument("--manifest", required=True)
        if out:
            sp.add_argument("--out")

    sp = sub.add_parser("synth", help="write the synthetic three-class corpus")
    sp.add_argument("--out", required=True)
    sp.add_argument("--n-per-class", type=int, default=20)
    sp.add_argument("--seed", type=int)
    sp.set_defaults(func=cmd_synth)

    sp = sub.add_parser("extract", help="compute MFCC feature caches")
    common(sp)
    sp.add_argument("--workers", type=int, default=4)
    sp.set_defaults(func=cmd_extract)

    for name, func, helptext in (("train", cmd_train, "train one model"),
                                 ("cv", cmd_cv, "k-fold cross-validation")):
        sp = sub.add_parser(name, help=helptext)
        common(sp)
        sp.add_argument("--variant", choices=["full", "tcn", "no-bd", "no-ms", "no-df"])
        sp.add_argument("--epochs", type=int)
        if name == "train":
            sp.add_argument("--eval-manifest")
        else:
            sp.add_argument("--folds", type=int)
            sp.add_argument("--protocol", choices=["last", "best"])
            sp.add_argument("--by-speaker", action="store_true")
        sp.set_defaults(func=func)

    sp = sub.add_parser("crosseval", help="evaluate a checkpoint on another corpus")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(func=cmd_crosseval)

    sp = sub.add_parser("infer", help="print per-utterance predictions")
    common(sp, out=False)
    sp.add_argument("--checkpoint", required=True)
    sp.set_defaults(func=cmd_infer)

    sp = sub.add_parser("embed", help="export fused features as CSV")
    common(sp, out=False)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_embed)

    sp = sub.add_parser("gradcheck", help="finite-difference gradient check on a small model")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--batch", type=int, default=2)
    sp.add_argument("--frames", type=int, default=16)
    sp.add_argument("--channels", type=int, default=4)
    sp.add_argument("--tabs", type=int, default=3)
    sp.add_argument("--classes", type=int, default=3)
    sp.add_argument("--variant", choices=["full", "tcn", "no-bd", "no-ms", "no-df"])
    sp.add_argument("--eps", type=float, default=1e-5)
    sp.add_argument("--tol", type=float, default=1e-4)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, ManifestError, CheckpointError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001
        log.debug("command failed", exc_info=True)
        print(f"failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
