"""Command-line surface: gen-data | train | decode | eval | verify | ablate.

Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric failure,
5 verification failure. Run directories default under $KTASR_RUN_ROOT.
"""

import argparse
import json
import os
import statistics
import sys

import numpy as np

from . import data as data_mod
from . import report, verify
from .config import load_config, parse_config_text, RunConfig
from .errors import ConfigError, DataError, NumericError, VerificationError
from .training import (decode_utterance, encoder_from_checkpoint,
                       load_checkpoint, run_training)

GRID = [("pos", "none"), ("pos", "left"), ("pos", "right"),
        ("token_pos", "none"), ("token_pos", "left"), ("token_pos", "right")]

SHIFT_INT = {"none": 0, "left": -1, "right": 1}


def _run_root():
    return os.environ.get("KTASR_RUN_ROOT", "runs")


def _collect_overrides(args):
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = args.seed
    if getattr(args, "kt", None) is not None:
        overrides["kt.enabled"] = args.kt
        if args.kt == "off":
            overrides["train.lambda"] = 1.0
    if getattr(args, "shift", None) is not None:
        overrides["kt.shift"] = args.shift
    if getattr(args, "query", None) is not None:
        overrides["kt.query_mode"] = args.query
    return overrides


def cmd_gen_data(args):
    cfg = load_config(args.config, _collect_overrides(args))
    synth = cfg.synth_config()
    splits, vocab = data_mod.generate_corpus(synth)
    os.makedirs(args.out, exist_ok=True)
    for name, utts in splits.items():
        data_mod.write_manifest(utts, os.path.join(args.out, f"{name}.jsonl"))
    vocab.save(os.path.join(args.out, "vocab.json"))
    with open(os.path.join(args.out, "config.txt"), "w") as f:
        f.write(cfg.canonical_text())
    stats = {name: {"utterances": len(utts),
                    "frames": int(sum(u.n_frames for u in utts)),
                    "tokens": int(sum(len(u.tokens) for u in utts))}
             for name, utts in splits.items()}
    print(json.dumps({"out": args.out, "splits": stats}, indent=1))
    return 0


def cmd_train(args):
    cfg = load_config(args.config, _collect_overrides(args))
    run_dir = args.run_dir or os.path.join(_run_root(), "train")
    summary = run_training(cfg, args.data, run_dir, quiet=args.quiet)
    with open(os.path.join(run_dir, "epochs.jsonl")) as f:
        epochs = [json.loads(l) for l in f if l.strip()]
    report.render_training_curves(epochs, os.path.join(run_dir, "loss_curve.png"))
    print(json.dumps({k: summary[k] for k in
                      ("epochs_run", "best_epochs", "final_checkpoint",
                       "inference_model")}, indent=1))
    print(f"final dev metric: {min(summary['dev_metrics']):.6f}")
    return 0


def _load_encoder(model_path):
    ckpt = load_checkpoint(model_path)
    cfg = RunConfig(parse_config_text(ckpt.config_text))
    return encoder_from_checkpoint(ckpt, cfg.encoder_config()), cfg


def cmd_decode(args):
    if not os.path.exists(args.model):
        raise DataError(f"model file {args.model} not found")
    encoder, cfg = _load_encoder(args.model)
    utts = data_mod.read_manifest(args.manifest)
    vocab_path = args.vocab or os.path.join(os.path.dirname(args.manifest), "vocab.json")
    if os.path.exists(vocab_path):
        vocab = data_mod.Vocab.load(vocab_path)
    else:
        vocab = data_mod.Vocab(cfg["encoder.vocab_size"])
    with open(args.out, "w") as f:
        for u in sorted(utts, key=lambda u: u.id):
            hyp = decode_utterance(encoder, u)
            f.write(json.dumps({"id": u.id, "hyp_tokens": hyp,
                                "hyp_text": vocab.text(hyp)}) + "\n")
    print(f"decoded {len(utts)} utterances -> {args.out}")
    return 0


def cmd_eval(args):
    refs = data_mod.read_manifest(args.ref)
    hyps = {}
    with open(args.hyp) as f:
        for line in f:
            if line.strip():
                rec = json.loads(line)
                hyps[rec["id"]] = rec["hyp_tokens"]
    rep = data_mod.score_hypotheses(refs, hyps)
    out = {k: rep[k] for k in ("cer", "subs", "ins", "dels", "n_ref_tokens")}
    if args.out:
        with open(args.out, "w") as f:
            json.dump(rep, f, indent=1)
    print(json.dumps(out, indent=1))
    return 0


def cmd_verify(args):
    failed = False
    for suite in args.suite:
        result = verify.run_suite(suite)
        status = "PASS" if result["ok"] else "FAIL"
        detail = {k: v for k, v in result.items() if k != "ok"}
        print(f"[{status}] {suite}: {json.dumps(detail, default=str)[:400]}")
        failed = failed or not result["ok"]
    if failed:
        raise VerificationError("one or more verify suites failed")
    return 0


def ablate_grid(cfg, data_dir, out_dir, seeds, quiet=True):
    """Train the 6-cell query-mode x shift grid across the given seeds and
    return mean/sd dev/test CER rows in the standard ordering."""
    test_utts = data_mod.read_manifest(os.path.join(data_dir, "test.jsonl"))
    dev_utts = data_mod.read_manifest(os.path.join(data_dir, "dev.jsonl"))
    rows = []
    for query, shift in GRID:
        dev_cers, test_cers = [], []
        for seed in seeds:
            cell_cfg = RunConfig(dict(cfg.values))
            cell_cfg.update({"kt.query_mode": query, "kt.shift": shift,
                             "seed": seed})
            run_dir = os.path.join(out_dir, f"{query}_{shift}_s{seed}")
            summary = run_training(cell_cfg, data_dir, run_dir, quiet=quiet)
            encoder, _ = _load_encoder(summary["inference_model"])
            dev_cers.append(data_mod.cer(
                dev_utts, lambda u: decode_utterance(encoder, u))["cer"])
            test_cers.append(data_mod.cer(
                test_utts, lambda u: decode_utterance(encoder, u))["cer"])
        rows.append({
            "query": query,
            "shift": SHIFT_INT[shift],
            "dev_cers": dev_cers,
            "test_cers": test_cers,
            "dev_mean": statistics.mean(dev_cers),
            "dev_sd": statistics.stdev(dev_cers) if len(dev_cers) > 1 else 0.0,
            "test_mean": statistics.mean(test_cers),
            "test_sd": statistics.stdev(test_cers) if len(test_cers) > 1 else 0.0,
        })
    return rows


def cmd_ablate(args):
    cfg = load_config(args.config, _collect_overrides(args))
    out_dir = args.out or os.path.join(_run_root(), "ablate")
    os.makedirs(out_dir, exist_ok=True)
    base_seed = cfg["seed"]
    seeds = [base_seed + i for i in range(args.seeds)]
    rows = ablate_grid(cfg, args.data, out_dir, seeds, quiet=True)
    report.write_grid_csv(rows, os.path.join(out_dir, "grid.csv"))
    report.write_grid_json(rows, os.path.join(out_dir, "grid.json"))
    report.render_grid_figure(rows, os.path.join(out_dir, "grid.png"))
    for r in rows:
        print(f"{r['query']:>10} shift {r['shift']:+d}: "
              f"dev {r['dev_mean']:.4f}±{r['dev_sd']:.4f} "
              f"test {r['test_mean']:.4f}±{r['test_sd']:.4f}")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="ktasr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, config=True):
        if config:
            sp.add_argument("--config", default=None, help="flat-key config file")
            sp.add_argument("--set", action="append", metavar="KEY=VALUE",
                            help="override a single config key")
            sp.add_argument("--seed", type=int, default=None)

    sp = sub.add_parser("gen-data", help="generate the synthetic corpus")
    common(sp)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_gen_data)

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--run-dir", default=None)
    sp.add_argument("--kt", choices=["on", "off"], default=None)
    sp.add_argument("--shift", choices=["none", "left", "right"], default=None)
    sp.add_argument("--query", choices=["pos", "token_pos"], default=None)
    sp.add_argument("--quiet", action="store_true")
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("decode", help="greedy-decode a manifest")
    sp.add_argument("--model", required=True)
    sp.add_argument("--manifest", required=True)
    sp.add_argument("--out", required=True)
    sp.add_argument("--vocab", default=None)
    sp.set_defaults(fn=cmd_decode)

    sp = sub.add_parser("eval", help="score hypotheses against a manifest")
    sp.add_argument("--ref", required=True)
    sp.add_argument("--hyp", required=True)
    sp.add_argument("--out", default=None)
    sp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("verify", help="run self-verification suites")
    sp.add_argument("suite", nargs="+",
                    choices=sorted(verify.SUITES) + ["all"])
    sp.set_defaults(fn=cmd_verify)

    sp = sub.add_parser("ablate", help="query-mode x shift grid")
    common(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--out", default=None)
    sp.add_argument("--seeds", type=int, default=3)
    sp.set_defaults(fn=cmd_ablate)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    if getattr(args, "suite", None) == ["all"]:
        args.suite = sorted(verify.SUITES)
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except DataError as e:
        print(f"data error: {e}", file=sys.stderr)
        return 3
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return 4
    except VerificationError as e:
        print(f"verification failure: {e}", file=sys.stderr)
        return 5


if __name__ == "__main__":
    sys.exit(main())
