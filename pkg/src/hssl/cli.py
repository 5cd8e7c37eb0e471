"""Command-line entry point: ``hssl {pretrain,search,probe,report}``.

Exit codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O or
format error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import os
import sys

import numpy as np

from .checkpoint import load_base, read_checkpoint, save_base, save_state
from .config import DatasetConfig, RunConfig, load_config
from .data import ImageDataset, generate_synthetic, load_cifar_binary
from .discrepancy import (SolvedSets, count_newly_solved, evaluate_discrepancy, run_search, siou)
from .engine import detach_auxiliary, extract_features, extract_head_features, fit, new_state
from .errors import ConfigError, FormatError, HsslError, NumericalError, UndefinedMetricError
from .probe import FeatureMatrix, alpha_sweep, knn_probe, linear_probe

log = logging.getLogger("hssl")

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_IO = 0, 2, 3, 4


# -- small I/O helpers -------------------------------------------------------------

def _atomic_text(path, text: str):
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    tmp = f"{path}.tmp"
    with open(tmp, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)
    os.replace(tmp, path)


def write_csv(path, header: list, rows: list):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    _atomic_text(path, buf.getvalue())


def read_csv(path) -> list:
    with open(path, encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


class MetricsWriter:
    """Append-only per-step CSV with a fixed column order."""

    def __init__(self, path, stream_names: list):
        self.columns = ["step", "epoch", "loss"] + [f"D_{s}" for s in stream_names] + ["lr", "wall_time"]
        self.path = path
        self.fh = open(path, "w", encoding="utf-8", newline="")
        self.writer = csv.writer(self.fh, lineterminator="\n")
        self.writer.writerow(self.columns)

    def __call__(self, m: dict):
        disc = m["discrepancy"]
        row = [m["step"], m["epoch"], repr(m["loss"])]
        row += [repr(disc[c[2:]]) if c[2:] in disc else "" for c in self.columns[3:-2]]
        row += [repr(m["lr"]), f"{m['wall_time']:.6f}"]
        self.writer.writerow(row)
        self.fh.flush()

    def close(self):
        self.fh.close()


def build_datasets(cfg: DatasetConfig) -> tuple[ImageDataset, ImageDataset]:
    if cfg.kind == "cifar":
        train = load_cifar_binary(cfg.train_path)
        test = load_cifar_binary(cfg.test_path) if cfg.test_path else train.subset(np.arange(0))
        test = ImageDataset(test.images, test.labels, test.ids + len(train), test.seed)
        return train, test
    train = generate_synthetic(cfg.num_classes, cfg.per_class, cfg.image_size, cfg.seed)
    test = generate_synthetic(cfg.num_classes, cfg.test_per_class, cfg.image_size, cfg.seed + 1_000_003,
                              id_offset=len(train))
    return train, test


def _apply_overrides(cfg: RunConfig, args) -> RunConfig:
    if getattr(args, "seed", None) is not None:
        cfg = cfg.with_seed(args.seed)
    if getattr(args, "out", None):
        cfg = dataclasses.replace(cfg, output_dir=args.out)
    if getattr(args, "data_fraction", None) is not None:
        cfg = dataclasses.replace(cfg, search=dataclasses.replace(cfg.search, data_fraction=args.data_fraction))
    return cfg.validate()


# -- verbs ----------------------------------------------------------------------------

def cmd_pretrain(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    _atomic_text(os.path.join(out, "config.json"), cfg.to_json())
    train, test = build_datasets(cfg.dataset)
    if args.data_fraction is not None:
        train = train.fraction(args.data_fraction, seed=cfg.seed)
    state = new_state(cfg.hssl, train)
    if not cfg.search.reinitialize:
        searched, _ = load_base(cfg.search.resume_base)
        for net in (state.student, state.teacher):
            try:
                net.base.load_state_dict(searched.state_dict())
            except Exception as exc:
                raise ConfigError(f"searched base does not fit model.base: {exc}",
                                  keys=["search.resume_base"]) from None
    names = [s.name for s in state.student.streams] if state.student.has_heads else []
    writer = MetricsWriter(os.path.join(out, "metrics.csv"), names)
    epoch_rows = []
    ckpt = os.path.join(out, "checkpoint.hssl")

    def on_step(m):
        writer(m)
        end_of_epoch = (m["step"] + 1) % state.steps_per_epoch == 0
        if not end_of_epoch:
            return
        epoch = m["epoch"]
        if names and cfg.hssl.objective.kind == "clustering" and len(test):
            for r in evaluate_discrepancy(state, test.images, epoch=epoch):
                epoch_rows.append([epoch, r.head_id, repr(r.D), repr(r.d_min), repr(r.d_median), repr(r.d_max)])
        if cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
            save_state(ckpt, state, cfg)

    try:
        fit(state, train, on_step=on_step)
    finally:
        writer.close()
    save_state(ckpt, state, cfg)
    save_base(os.path.join(out, "base.hssl"), detach_auxiliary(state), cfg)
    write_csv(os.path.join(out, "discrepancy_epochs.csv"),
              ["epoch", "head_id", "D", "d_min", "d_median", "d_max"], epoch_rows)
    print(f"pretrained {state.step} steps -> {ckpt}")
    return EXIT_OK


def cmd_search(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    if len(cfg.hssl.heads) < 2:
        raise ConfigError("search needs at least two candidate heads", keys=["model.heads"])
    out = cfg.output_dir
    os.makedirs(out, exist_ok=True)
    _atomic_text(os.path.join(out, "config.json"), cfg.to_json())
    train, test = build_datasets(cfg.dataset)
    epochs = cfg.search.epochs if cfg.search.epochs >= 0 else None
    result = run_search(cfg.hssl, train, test.images, cfg.search.data_fraction, epochs)
    doc = result.as_dict()
    doc["reinitialize"] = cfg.search.reinitialize
    doc["searched_base"] = os.path.abspath(os.path.join(out, "search_base.hssl"))
    save_base(doc["searched_base"], result.base, cfg)
    _atomic_text(os.path.join(out, "search.json"), json.dumps(doc, indent=2, sort_keys=True))
    write_csv(os.path.join(out, "search_heads.csv"), ["head_id", "D", "d_min", "d_median", "d_max", "epoch"],
              [[r.head_id, repr(r.D), repr(r.d_min), repr(r.d_median), repr(r.d_max), r.epoch]
               for r in result.reports])
    print(f"selected head {result.selected}")
    return EXIT_OK


def _features(path):
    base, cfg = load_base(path)
    train, test = build_datasets(cfg.dataset)
    return (FeatureMatrix(extract_features(base, train.images), train.labels, train.ids),
            FeatureMatrix(extract_features(base, test.images), test.labels, test.ids), cfg)


def _head_correctness(path, cfg: RunConfig, train, test, k, temperature):
    """kNN correctness of the first auxiliary head's teacher features, if the checkpoint has one."""
    header, _ = read_checkpoint(path)
    if header.get("kind") != "state" or not cfg.hssl.heads or not cfg.hssl.uses_heads:
        return None
    from .checkpoint import load_state

    state, _ = load_state(path)
    ds_train, ds_test = build_datasets(cfg.dataset)
    tr = FeatureMatrix(extract_head_features(state.teacher, ds_train.images), train.labels, train.ids)
    te = FeatureMatrix(extract_head_features(state.teacher, ds_test.images), test.labels, test.ids)
    return knn_probe(tr, te, k, temperature)


def cmd_probe(args) -> int:
    kind = args.probe
    paths = args.checkpoint
    if not paths:
        raise ConfigError("probe needs --checkpoint", keys=["--checkpoint"])
    out = args.out or os.path.dirname(os.path.abspath(paths[0]))
    os.makedirs(out, exist_ok=True)
    train, test, cfg = _features(paths[0])
    pc = cfg.probe
    if kind == "blend":
        if len(paths) != 2:
            raise ConfigError("blend probe needs exactly two checkpoints", keys=["--checkpoint"])
        train2, test2, _ = _features(paths[1])
        alphas = [float(a) for a in args.alpha_list.split(",")] if args.alpha_list else list(pc.alphas)
        curve = alpha_sweep(train, test, train2, test2, alphas, "knn", k=min(pc.k, len(train)),
                            temperature=pc.temperature)
        write_csv(os.path.join(out, "alpha_curve.csv"), ["alpha", "accuracy"],
                  [[repr(a), repr(acc)] for a, acc in curve])
        print("\n".join(f"alpha={a:g} accuracy={acc:.4f}" for a, acc in curve))
        return EXIT_OK
    k = min(pc.k, len(train))
    if kind == "knn":
        res = knn_probe(train, test, k, pc.temperature)
    else:
        res = linear_probe(train, test, pc.linear_epochs, pc.linear_lr, seed=cfg.seed)
    head = _head_correctness(paths[0], cfg, train, test, k, pc.temperature)
    report = {"probe": kind, "accuracy": res.accuracy, "num_test": len(test),
              "checkpoint": os.path.abspath(paths[0]), "k": k if kind == "knn" else None}
    header = ["id", "label", "pred", "correct"]
    rows = [[int(i), int(l), int(p), int(c)] for i, l, p, c in
            zip(test.ids, test.labels, res.predictions, res.correct)]
    if head is not None:
        report["head_accuracy"] = head.accuracy
        header += ["head_pred", "head_correct"]
        rows = [r + [int(p), int(c)] for r, p, c in zip(rows, head.predictions, head.correct)]
    _atomic_text(os.path.join(out, "probe.json"), json.dumps(report, indent=2, sort_keys=True))
    write_csv(os.path.join(out, "correctness.csv"), header, rows)
    print(f"{kind} accuracy {res.accuracy:.4f}")
    return EXIT_OK


# -- report ---------------------------------------------------------------------------

def annotate_trend(values: list) -> list:
    """Label maximal monotone runs of a curve: ``[(start, end, 'rise'|'fall'|'flat'), ...]``."""
    segments = []
    for i in range(1, len(values)):
        d = values[i] - values[i - 1]
        label = "rise" if d > 0 else "fall" if d < 0 else "flat"
        if segments and segments[-1][2] == label:
            segments[-1] = (segments[-1][0], i, label)
        else:
            segments.append((i - 1, i, label))
    return segments


def solved_sets_from_dumps(baseline_rows: list, hssl_rows: list) -> SolvedSets:
    ids_b = {int(r["id"]) for r in baseline_rows}
    ids_h = {int(r["id"]) for r in hssl_rows}
    if ids_b != ids_h:
        raise FormatError("correctness dumps cover different sample ids")
    if hssl_rows and "head_correct" not in hssl_rows[0]:
        raise FormatError("HSSL correctness dump lacks head_correct column")
    return SolvedSets(U=ids_b,
                      B1={int(r["id"]) for r in baseline_rows if r["correct"] == "1"},
                      B2={int(r["id"]) for r in hssl_rows if r["correct"] == "1"},
                      H={int(r["id"]) for r in hssl_rows if r["head_correct"] == "1"})


def cmd_report(args) -> int:
    run = args.run_dir or args.out
    if not run:
        raise ConfigError("report needs a run directory", keys=["run_dir"])
    metrics = os.path.join(run, "metrics.csv")
    baseline = args.baseline or os.path.join(run, "baseline_correctness.csv")
    hssl = args.hssl or os.path.join(run, "correctness.csv")
    have_metrics = os.path.isfile(metrics)
    have_dumps = os.path.isfile(baseline) and os.path.isfile(hssl)
    if not have_metrics and not have_dumps:
        raise FileNotFoundError(f"no report inputs in {run}; expected {metrics} and/or the correctness "
                                f"dumps {baseline} and {hssl}")
    lines = []
    if have_metrics:
        rows = read_csv(metrics)
        d_cols = [c for c in (rows[0].keys() if rows else []) if c.startswith("D_")]
        epochs = sorted({int(r["epoch"]) for r in rows})
        table = []
        for e in epochs:
            er = [r for r in rows if int(r["epoch"]) == e]
            entry = [e, float(np.mean([float(r["loss"]) for r in er]))]
            entry += [float(np.mean([float(r[c]) for r in er if r[c] != ""])) if any(r[c] for r in er)
                      else float("nan") for c in d_cols]
            table.append(entry)
        write_csv(os.path.join(run, "summary_epochs.csv"), ["epoch", "loss"] + d_cols,
                  [[e, repr(l)] + [repr(d) for d in ds] for e, l, *ds in table])
        lines.append("epoch  loss      " + "  ".join(f"{c:>12}" for c in d_cols))
        for e, l, *ds in table:
            lines.append(f"{e:<6} {l:<9.4f} " + "  ".join(f"{d:>12.4e}" for d in ds))
        curve_path = os.path.join(run, "discrepancy_epochs.csv")
        if os.path.isfile(curve_path):
            curve = read_csv(curve_path)
            for head in sorted({r["head_id"] for r in curve}):
                vals = [float(r["D"]) for r in curve if r["head_id"] == head]
                segs = annotate_trend(vals)
                desc = ", ".join(f"{lab} {a}->{b}" for a, b, lab in segs) or "single epoch"
                lines.append(f"D trend [{head}]: {desc}")
    if have_dumps:
        sets = solved_sets_from_dumps(read_csv(baseline), read_csv(hssl))
        ns = count_newly_solved(sets)
        try:
            s = siou(sets)
        except UndefinedMetricError as exc:
            s = float("nan")
            lines.append(f"sIoU undefined: {exc}")
        write_csv(os.path.join(run, "summary_unsolved.csv"),
                  ["U", "B1", "B2", "H", "unsolved_by_baseline", "N_s", "sIoU"],
                  [[len(sets.U), len(sets.B1), len(sets.B2), len(sets.H),
                    len(sets.unsolved_by_baseline), ns, repr(s)]])
        lines.append(f"|U|={len(sets.U)} |U-B1|={len(sets.unsolved_by_baseline)} N_s={ns} sIoU={s:.4f}")
    text = "\n".join(lines) + "\n"
    _atomic_text(os.path.join(run, "summary.txt"), text)
    sys.stdout.write(text)
    return EXIT_OK


# -- entry point ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hssl", description="Heterogeneous self-supervised pre-training")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", required=True, help="run configuration JSON")
        sp.add_argument("--out", help="output directory (overrides output_dir)")
        sp.add_argument("--seed", type=int, help="override the run seed")

    sp = sub.add_parser("pretrain", help="train base model + auxiliary heads")
    common(sp)
    sp.add_argument("--data-fraction", type=float, help="train on a stratified fraction of the data")
    sp.set_defaults(func=cmd_pretrain)

    sp = sub.add_parser("search", help="joint search over candidate heads")
    common(sp)
    sp.add_argument("--data-fraction", type=float, help="fraction of training data (default from config)")
    sp.set_defaults(func=cmd_search)

    sp = sub.add_parser("probe", help="frozen-feature evaluation of a checkpoint")
    sp.add_argument("--checkpoint", nargs="+", required=True, help="checkpoint(s); two for --probe blend")
    sp.add_argument("--probe", choices=("knn", "linear", "blend"), default="knn")
    sp.add_argument("--alpha-list", help="comma-separated blend weights")
    sp.add_argument("--out", help="output directory (default: next to the checkpoint)")
    sp.set_defaults(func=cmd_probe)

    sp = sub.add_parser("report", help="summarize a run directory")
    sp.add_argument("run_dir", nargs="?", help="run directory")
    sp.add_argument("--out", help="run directory (alternative to the positional argument)")
    sp.add_argument("--baseline", help="baseline correctness CSV")
    sp.add_argument("--hssl", help="HSSL correctness CSV (with head_correct column)")
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        keys = f" (keys: {', '.join(exc.keys)})" if getattr(exc, "keys", None) else ""
        log.error("configuration error: %s%s", exc, keys)
        return EXIT_CONFIG
    except NumericalError as exc:
        log.error("numerical failure: %s", exc)
        return EXIT_NUMERICAL
    except (OSError, FormatError) as exc:
        log.error("I/O error: %s", exc)
        return EXIT_IO
    except HsslError as exc:
        log.error("error: %s", exc)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
