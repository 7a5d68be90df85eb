"""Command-line entry points.

Exit codes: 0 success, 2 config error, 3 training divergence, 4 I/O error.
Every subcommand accepts --seed, --config and --out-dir; ones that do not
need them simply ignore them.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

import numpy as np

from . import metrics
from .adversarial import DivergenceError, Generator, adjacent_pool, kmeans_segment
from .binio import BinaryFormatError
from .corpus import (
    gen_synthetic_corpus,
    load_corpus,
    read_bit_lines,
    read_token_lines,
    save_corpus,
    write_bit_lines,
    write_token_lines,
    PhonemeInventory,
)
from .lm import load_lm
from .nnet import load_checkpoint
from .pipeline import (
    ConfigError,
    PipelineConfig,
    RunPaths,
    apply_pca,
    load_config,
    mean_pool,
    run_iterations,
)
from .segmenter import SegmentationPolicy, dedup, infer_boundaries, merge_boundaries, policy_forward

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DIVERGENCE = 3
EXIT_IO = 4


def _load_pipeline_config(args) -> PipelineConfig:
    config = load_config(args.config) if args.config else PipelineConfig()
    if args.seed is not None:
        config = dataclasses.replace(config, seed=args.seed)
        config = dataclasses.replace(config, synth=dataclasses.replace(config.synth, seed=args.seed))
    return config


def _require_out_dir(args) -> Path:
    if not args.out_dir:
        raise ConfigError("this subcommand requires --out-dir")
    return Path(args.out_dir)


def cmd_gen_corpus(args) -> int:
    config = _load_pipeline_config(args)
    out = _require_out_dir(args)
    utts, text = gen_synthetic_corpus(config.synth)
    n_train = config.synth.n_speech_utts
    manifest = save_corpus({"train": utts[:n_train], "valid": utts[n_train:]}, text, out)
    print(manifest)
    return EXIT_OK


def _run_until(args, stop_after: str | None) -> int:
    config = _load_pipeline_config(args)
    if getattr(args, "no_merge", False):
        config = dataclasses.replace(config, merge_for_stage2=False)
    if getattr(args, "max_iterations", None) is not None:
        config = dataclasses.replace(config, max_iterations=args.max_iterations)
    state = run_iterations(config, _require_out_dir(args), resume=True, stop_after=stop_after)
    print(json.dumps({"completed": state.completed, "metrics": state.metrics}, indent=2))
    return EXIT_OK


def cmd_train_init(args) -> int:
    return _run_until(args, "init")


def cmd_train_segmenter(args) -> int:
    return _run_until(args, f"iter{args.iteration}.stage1")


def cmd_train_gan(args) -> int:
    return _run_until(args, f"iter{args.iteration}.stage2")


def cmd_run_pipeline(args) -> int:
    config = _load_pipeline_config(args)
    if args.max_iterations is not None:
        config = dataclasses.replace(config, max_iterations=args.max_iterations)
    state = run_iterations(config, _require_out_dir(args), resume=args.resume, stop_after=args.stop_after)
    report_path = Path(args.out_dir) / "reports" / "report.json"
    if report_path.exists():
        print(report_path.read_text())
    else:
        print(json.dumps({"completed": state.completed, "metrics": state.metrics}, indent=2))
    return EXIT_OK


def cmd_merge_boundaries(args) -> int:
    _, text = load_corpus(args.manifest)
    bounds = read_bit_lines(args.boundaries)
    preds = read_token_lines(args.predictions, text.inventory)
    merged = [merge_boundaries(b, p) for b, p in zip(bounds, preds)]
    write_bit_lines(args.out, merged)
    print(args.out)
    return EXIT_OK


def cmd_predict(args) -> int:
    run = RunPaths(_require_out_dir(args))
    splits, text = load_corpus(run.root / "corpus" / "manifest.json")
    if args.split not in splits:
        raise ConfigError(f"unknown split {args.split!r}")
    utts = [u.without_oracle() for u in splits[args.split]]
    config = load_config(run.root / "config.json")

    from .adversarial import KMeansModel, PcaModel, adjacent_pool_boundary

    arrays, _, _ = load_checkpoint(run.checkpoint("preproc"))
    pca = PcaModel(arrays["pca.mean"], arrays["pca.components"], arrays["pca.explained"])
    km = KMeansModel(arrays["kmeans.centroids"], float(arrays["kmeans.inertia"][0]))

    gen_name = "init_gen" if args.iteration == 0 else f"iter{args.iteration}_gen"
    if not run.checkpoint(gen_name).exists():
        raise ConfigError(f"no checkpoint {gen_name} in {run.root}")
    gen_arrays, _, _ = load_checkpoint(run.checkpoint(gen_name))
    gen = Generator(config.pca_dim, text.inventory.size, config.gen_kernel)
    gen.load_parameters(gen_arrays)

    policy = None
    if args.iteration > 0:
        pol_arrays, _, _ = load_checkpoint(run.checkpoint(f"iter{args.iteration}_policy"))
        policy = SegmentationPolicy(utts[0].features.shape[1], config.policy_hidden)
        policy.load_parameters(pol_arrays)

    preds, bound_list = [], []
    for u in utts:
        reduced = apply_pca(pca, u.features)
        if policy is None:
            raw_bits = kmeans_segment(km, reduced)
            bits = adjacent_pool_boundary(raw_bits)
            segs = adjacent_pool(mean_pool(reduced, raw_bits))
        else:
            bits = infer_boundaries(policy_forward(policy, u.features))
            segs = mean_pool(reduced, bits)
        preds.append(dedup(gen.predict_ids(segs)))
        bound_list.append(bits)
    write_token_lines(args.out, preds, text.inventory)
    if args.boundaries_out:
        write_bit_lines(args.boundaries_out, bound_list)
    print(args.out)
    return EXIT_OK


def _inventory_for_eval(args) -> PhonemeInventory:
    if args.manifest:
        _, text = load_corpus(args.manifest)
        return text.inventory
    raise ConfigError("--manifest is required to decode token files")


def cmd_eval_per(args) -> int:
    inv = _inventory_for_eval(args)
    refs = read_token_lines(args.ref, inv)
    hyps = read_token_lines(args.hyp, inv)
    report = metrics.per(refs, hyps)
    print(
        json.dumps(
            {
                "per": report.rate,
                "substitutions": report.substitutions,
                "insertions": report.insertions,
                "deletions": report.deletions,
                "ref_length": report.ref_length,
            },
            indent=2,
        )
    )
    return EXIT_OK


def cmd_eval_boundaries(args) -> int:
    refs = read_bit_lines(args.ref)
    hyps = read_bit_lines(args.hyp)
    tol = args.tol_frames if args.tol_frames is not None else int(args.tolerance_ms / 1000.0 * args.frame_rate)
    score = metrics.boundary_prf_corpus(refs, hyps, tol, args.scheme)
    out = metrics.score_report(score)
    out["frame_rate_hz"] = args.frame_rate
    out["seg_frequency_hz"] = sum(int(np.sum(b)) for b in hyps) * args.frame_rate / sum(len(b) for b in hyps)
    print(json.dumps(out, indent=2))
    return EXIT_OK


def cmd_score_lm(args) -> int:
    model = load_lm(args.lm)
    if model.symbols is None:
        raise ConfigError("LM file does not carry symbols; cannot decode token lines")
    inv = PhonemeInventory(symbols=tuple(model.symbols), sil_id=0)
    seqs = read_token_lines(args.input, inv)
    lines = [{"nll": model.score_nll(s), "ppl": model.perplexity(s), "tokens": len(s)} for s in seqs]
    total_nll = sum(e["nll"] for e in lines)
    print(json.dumps({"total_nll": total_nll, "sequences": lines}, indent=2))
    return EXIT_OK


def cmd_unsup_metric(args) -> int:
    model = load_lm(args.lm)
    if model.symbols is None:
        raise ConfigError("LM file does not carry symbols; cannot decode token lines")
    inv = PhonemeInventory(symbols=tuple(model.symbols), sil_id=0)
    seqs = read_token_lines(args.input, inv)
    usage = metrics.vocab_usage(seqs, model.n_symbols)
    value = metrics.unsup_metric(seqs, model)
    print(json.dumps({"unsup_metric": value, "vocab_usage": usage,
                      "total_nll": value * usage, "n_sequences": len(seqs)}, indent=2))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="uasr", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **kwargs):
        p = sub.add_parser(name, **kwargs)
        p.add_argument("--seed", type=int, default=None, help="overrides the config seed")
        p.add_argument("--config", default=None, help="JSON pipeline config file")
        p.add_argument("--out-dir", default=None, help="run/output directory")
        p.set_defaults(fn=fn)
        return p

    add("gen-corpus", cmd_gen_corpus, help="generate a synthetic corpus into --out-dir")
    add("train-init", cmd_train_init, help="run the initialization stage")
    p = add("train-segmenter", cmd_train_segmenter, help="run stage 1 of one iteration")
    p.add_argument("--iteration", type=int, default=1)
    p = add("train-gan", cmd_train_gan, help="run stage 2 of one iteration")
    p.add_argument("--iteration", type=int, default=1)
    p.add_argument("--no-merge", action="store_true", help="train on unmerged stage-1 boundaries")
    p = add("run-pipeline", cmd_run_pipeline, help="initialization plus full iteration loop")
    p.add_argument("--resume", action="store_true")
    p.add_argument("--stop-after", default=None, help="e.g. init, iter1.stage1")
    p.add_argument("--max-iterations", type=int, default=None)
    p = add("merge-boundaries", cmd_merge_boundaries, help="merge same-prediction segments")
    p.add_argument("--boundaries", required=True)
    p.add_argument("--predictions", required=True, help="per-segment predictions, NOT de-duplicated")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p = add("predict", cmd_predict, help="decode a split with a trained checkpoint")
    p.add_argument("--split", default="valid")
    p.add_argument("--iteration", type=int, default=0, help="0 = initialization models")
    p.add_argument("--out", required=True)
    p.add_argument("--boundaries-out", default=None)
    p = add("eval-per", cmd_eval_per, help="phoneme error rate of hyp vs ref token files")
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.add_argument("--manifest", required=True)
    p = add("eval-boundaries", cmd_eval_boundaries, help="boundary P/R/F1/R-value")
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp", required=True)
    p.add_argument("--scheme", choices=["harsh", "lenient"], default="harsh")
    p.add_argument("--tol-frames", type=int, default=None)
    p.add_argument("--tolerance-ms", type=float, default=20.0)
    p.add_argument("--frame-rate", type=float, default=50.0)
    p = add("score-lm", cmd_score_lm, help="NLL/perplexity of token lines under a saved LM")
    p.add_argument("--lm", required=True)
    p.add_argument("--input", required=True)
    p = add("unsup-metric", cmd_unsup_metric, help="unsupervised validation metric of predictions")
    p.add_argument("--lm", required=True)
    p.add_argument("--input", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"training diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGENCE
    except (OSError, BinaryFormatError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
