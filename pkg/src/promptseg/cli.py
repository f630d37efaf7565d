"""Command-line entry points; each subcommand is a thin wrapper over the
core pipelines.  Exit codes: 0 success, 1 usage error, 2 runtime error."""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from .corpus import PromptCorpusConfig, generate_prompt_corpus, load_corpus, save_corpus
from .errors import PromptsegError
from .experiment import CanonicalConfig
from .fusion import FusionCheckpoint, load_checkpoint, save_checkpoint
from .grids import LabelMap
from .metrics import evaluate_labelmaps, format_report_kv, format_report_table
from .phantom import (
    LogitOracleConfig,
    PatchSamplerConfig,
    generate_phantom,
    normalize_intensity,
    oracle_logits,
    random_phantom_spec,
    sample_patches,
    load_phantom_spec,
)
from .pipelines import (
    InferenceConfig,
    OracleLogitSource,
    TrainRunConfig,
    evaluate_run,
    infer,
    train_fusion,
    windowed_logits,
)
from .prompts import default_lexicon, load_lexicon, parse_prompt
from .refine import (
    RefineCheckpoint,
    RefineTrainConfig,
    finetune_refinement,
    load_refine_checkpoint,
    refine_config_hash,
    save_refine_checkpoint,
)
from .volio import load_labelmap, load_logits, save_grid


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        raise SystemExit(1)


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(v) for v in text.split(","))


def _lexicon(args):
    if getattr(args, "lexicon", None):
        return load_lexicon(args.lexicon)
    return default_lexicon()


def _load_volume_dir(directory: str):
    pairs = []
    for name in sorted(os.listdir(directory)):
        if name.endswith("_labels.vol"):
            stem = name[: -len("_labels.vol")]
            from .volio import load_volume

            vol = load_volume(os.path.join(directory, stem + ".vol"))
            labels = load_labelmap(os.path.join(directory, name))
            pairs.append((stem, vol, labels))
    if not pairs:
        raise PromptsegError(f"no <name>.vol / <name>_labels.vol pairs in {directory}")
    return pairs


# --- subcommand implementations -------------------------------------------

def cmd_gen_data(args) -> int:
    os.makedirs(args.out, exist_ok=True)
    oracle_cfg = LogitOracleConfig(
        scale=args.oracle_scale,
        noise_sigma=args.noise_sigma,
        suppressed_classes=frozenset(_ints(args.suppress)) if args.suppress else frozenset(),
        suppression_margin=args.margin,
        seed=args.seed,
    )
    for i in range(args.count):
        if args.spec:
            spec = load_phantom_spec(args.spec)
            spec.seed = args.seed + i
        else:
            spec = random_phantom_spec(
                args.seed + i, dims=_ints(args.dims), organ_ids=_ints(args.organ_ids)
            )
        volume, labels = generate_phantom(spec)
        volume = normalize_intensity(volume)
        rng = np.random.default_rng(np.random.SeedSequence((args.seed, i)))
        logits = oracle_logits(labels, oracle_cfg, args.classes, rng)
        stem = os.path.join(args.out, f"vol_{i:03d}")
        save_grid(volume, stem + ".vol")
        save_grid(labels, stem + "_labels.vol")
        save_grid(logits, stem + "_logits.vol")
        print(f"wrote {stem}.vol (+labels, +logits)")
    return 0


def cmd_gen_prompts(args) -> int:
    lex = _lexicon(args)
    labels = [lm for _, _, lm in _load_volume_dir(args.data)]
    cfg = PromptCorpusConfig(
        n_train=args.n_train,
        n_val=args.n_val,
        relation_probability=args.relation_prob,
        synonym_probability=args.synonym_prob,
        seed=args.seed,
    )
    records = generate_prompt_corpus(labels, cfg, lex)
    save_corpus(records, args.out)
    print(f"wrote {len(records)} prompts to {args.out}")
    return 0


def cmd_train_fusion(args) -> int:
    lex = _lexicon(args)
    pairs = _load_volume_dir(args.data)
    volumes = [(v, lm) for _, v, lm in pairs]
    corpus = load_corpus(args.corpus)
    if args.n_train:
        corpus = corpus[: args.n_train]
    cfg = TrainRunConfig(
        epochs=args.epochs,
        iterations_per_epoch=args.iters,
        lr=args.lr,
        weight_decay=args.wd,
        lambda_text=args.lambda_text,
        lambda_rel=args.lambda_rel,
        seed=args.seed,
        patch_dims=_ints(args.patch),
        pos_fraction=args.pos_fraction,
    )
    source = OracleLogitSource(
        LogitOracleConfig(
            scale=args.oracle_scale,
            noise_sigma=args.noise_sigma,
            suppression_margin=args.margin,
        ),
        num_classes=lex.num_classes,
        suppress_prompted=args.suppress_prompted,
    )
    ckpt, history, log_lines = train_fusion(volumes, source, corpus, cfg, lex)
    save_checkpoint(ckpt, args.out)
    if args.log:
        with open(args.log, "w", encoding="utf-8") as fh:
            fh.write("\n".join(log_lines) + "\n")
    print(
        f"trained {cfg.epochs} epochs; final total loss "
        f"{history[-1].total if history else float('nan')}; checkpoint at {args.out}"
    )
    return 0


def cmd_finetune_rh(args) -> int:
    pairs = _load_volume_dir(args.data)
    samples = []
    for stem, volume, labels in pairs:
        logits = load_logits(os.path.join(args.data, stem + "_logits.vol"))
        sampler = PatchSamplerConfig(
            patch_dims=_ints(args.patch),
            pos_fraction=0.5,
            samples_per_volume=args.patches_per_volume,
            seed=args.seed,
        )
        for _, lab_patch, off in sample_patches(volume, labels, sampler):
            sl = tuple(slice(o, o + p) for o, p in zip(off, _ints(args.patch)))
            from .grids import LogitTensor

            lpatch = LogitTensor(logits.data[(slice(None),) + sl].copy(), logits.spacing)
            samples.append((lpatch, lab_patch))
    cfg = RefineTrainConfig(
        epochs=args.epochs,
        lr=args.lr,
        weight_decay=args.wd,
        cycles=args.cycles,
        seed=args.seed,
    )
    params, history = finetune_refinement(samples, cfg)
    from .optim import AdamWState

    ckpt = RefineCheckpoint(
        params, cfg.epochs, AdamWState(), refine_config_hash(params.channels)
    )
    save_refine_checkpoint(ckpt, args.out)
    print(f"fine-tuned refinement head on {len(samples)} patches -> {args.out}")
    print(f"first/last loss: {history[0]:.4f} / {history[-1]:.4f}")
    return 0


def cmd_infer(args) -> int:
    lex = _lexicon(args)
    ckpt = load_checkpoint(args.fusion)
    refine = load_refine_checkpoint(args.refine).params if args.refine else None
    if args.logits:
        visual = load_logits(args.logits)
    else:
        labels = load_labelmap(args.labels)
        source = OracleLogitSource(
            LogitOracleConfig(
                scale=args.oracle_scale,
                noise_sigma=args.noise_sigma,
                suppression_margin=args.margin,
            ),
            num_classes=lex.num_classes,
            suppress_prompted=args.suppress_prompted,
        )
        parsed = parse_prompt(args.prompt, lex)
        if args.window:
            visual = windowed_logits(
                labels, source, parsed, _ints(args.window), overlap=args.overlap,
                seed=args.seed,
            )
        else:
            rng = np.random.default_rng(args.seed)
            visual = source(labels, parsed, rng)
    result = infer(
        visual,
        args.prompt,
        ckpt.params,
        lex,
        InferenceConfig(restrict_to_prompt=args.restrict),
        refine_params=refine,
    )
    save_grid(result.mask, args.out)
    ids, counts = np.unique(result.mask.data, return_counts=True)
    summary = {
        "mask": args.out,
        "fallback_visual_only": result.fallback_visual_only,
        "voxel_counts": {int(i): int(n) for i, n in zip(ids, counts)},
    }
    print(json.dumps(summary))
    return 0


def cmd_eval(args) -> int:
    lex = _lexicon(args)
    names = {e.id: e.canonical_name for e in lex.entries}
    if os.path.isdir(args.pred):
        _, report = evaluate_run(args.pred, args.gt, args.classes)
    else:
        pred = load_labelmap(args.pred)
        gt = load_labelmap(args.gt)
        report = evaluate_labelmaps(pred, gt, args.classes)
    text = (
        format_report_kv(report)
        if args.format == "kv"
        else format_report_table(report, names)
    )
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text if text.endswith("\n") else text + "\n")
    print(text)
    return 0


def cmd_parse_prompt(args) -> int:
    lex = _lexicon(args)
    parsed = parse_prompt(args.prompt, lex)
    out = {
        "presence": list(parsed.presence),
        "mentioned": {c: lex.entry(c).canonical_name for c in parsed.mentioned()},
        "relations": [list(r) for r in parsed.relations],
    }
    print(json.dumps(out))
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import build_state, create_app

    state = build_state(
        args.fusion,
        data_dir=args.data,
        refine_ckpt=args.refine,
        lexicon_path=args.lexicon,
    )
    app = create_app(state, console_dir=args.console)
    port = int(os.environ.get("PORT", args.port))
    uvicorn.run(app, host=args.host, port=port, log_level="warning")
    return 0


# --- argument wiring --------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="promptseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate phantom volumes, labels, and oracle logits")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=6)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dims", default="48,48,48")
    p.add_argument("--organ-ids", default="1,2,3,6,7")
    p.add_argument("--classes", type=int, default=14)
    p.add_argument("--spec", help="phantom spec file (overrides --dims/--organ-ids)")
    p.add_argument("--oracle-scale", type=float, default=8.0)
    p.add_argument("--noise-sigma", type=float, default=0.25)
    p.add_argument("--margin", type=float, default=2.0)
    p.add_argument("--suppress", default="", help="comma-separated class ids to suppress")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("gen-prompts", help="generate a synthetic prompt corpus")
    p.add_argument("--data", required=True, help="directory with *_labels.vol files")
    p.add_argument("--out", required=True)
    p.add_argument("--n-train", type=int, default=650)
    p.add_argument("--n-val", type=int, default=130)
    p.add_argument("--relation-prob", type=float, default=0.35)
    p.add_argument("--synonym-prob", type=float, default=0.3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lexicon")
    p.set_defaults(func=cmd_gen_prompts)

    p = sub.add_parser("train-fusion", help="train the text fusion head")
    p.add_argument("--data", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--iters", type=int, default=100)
    p.add_argument("--lr", type=float, default=2e-3)
    p.add_argument("--wd", type=float, default=1e-4)
    p.add_argument("--lambda-text", type=float, default=0.2)
    p.add_argument("--lambda-rel", type=float, default=0.2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--patch", default="32,32,32")
    p.add_argument("--pos-fraction", type=float, default=1.0)
    p.add_argument("--n-train", type=int, default=0, help="use only the first N prompts")
    p.add_argument("--oracle-scale", type=float, default=8.0)
    p.add_argument("--noise-sigma", type=float, default=0.25)
    p.add_argument("--margin", type=float, default=2.0)
    p.add_argument("--suppress-prompted", action="store_true", default=True)
    p.add_argument("--no-suppress-prompted", dest="suppress_prompted", action="store_false")
    p.add_argument("--lexicon")
    p.set_defaults(func=cmd_train_fusion)

    p = sub.add_parser("finetune-rh", help="fine-tune the refinement head on logit/label patches")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=15)
    p.add_argument("--lr", type=float, default=5e-4)
    p.add_argument("--wd", type=float, default=1e-5)
    p.add_argument("--cycles", type=int, default=5)
    p.add_argument("--patch", default="32,32,32")
    p.add_argument("--patches-per-volume", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_finetune_rh)

    p = sub.add_parser("infer", help="prompt-conditioned inference")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--logits", help="precomputed visual logits (.vol)")
    src.add_argument("--labels", help="label map to drive the oracle logit source")
    p.add_argument("--prompt", required=True)
    p.add_argument("--fusion", required=True)
    p.add_argument("--refine")
    p.add_argument("--out", required=True)
    p.add_argument("--restrict", action="store_true")
    p.add_argument("--window", help="patch dims for sliding-window logits, e.g. 32,32,32")
    p.add_argument("--overlap", type=float, default=0.25)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--oracle-scale", type=float, default=8.0)
    p.add_argument("--noise-sigma", type=float, default=0.25)
    p.add_argument("--margin", type=float, default=2.0)
    p.add_argument("--suppress-prompted", action="store_true")
    p.add_argument("--lexicon")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="evaluate predicted label maps against ground truth")
    p.add_argument("--pred", required=True, help="label .vol file or directory")
    p.add_argument("--gt", required=True)
    p.add_argument("--classes", type=int, default=14)
    p.add_argument("--format", choices=("table", "kv"), default="table")
    p.add_argument("--out")
    p.add_argument("--lexicon")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("parse-prompt", help="show presence vector and relations for a prompt")
    p.add_argument("--prompt", required=True)
    p.add_argument("--lexicon")
    p.set_defaults(func=cmd_parse_prompt)

    p = sub.add_parser("serve", help="run the HTTP service for the prompt console")
    p.add_argument("--fusion", required=True)
    p.add_argument("--data", required=True, help="volume directory from gen-data")
    p.add_argument("--refine")
    p.add_argument("--lexicon")
    p.add_argument("--console", help="static console build to serve at /")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=7860)
    p.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args) or 0
    except PromptsegError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
