"""Command-line interface.

Exit codes: 0 on success, 1 on expected failures (bad configuration,
malformed data, missing files, a failed gradient check), 2 on unexpected
internal errors.
"""

from __future__ import annotations

import argparse
import json
import sys

from .ablation import DEFAULT_VARIANTS, VARIANTS, run_ablation
from .autodiff import ConfigurationError, Tensor
from .checkpoint import CheckpointError
from .data import (CropConfig, DataError, GeneratorSpec, generate_dataset,
                   generate_sequence, load_dataset)
from .evaluate import evaluate_ope, track_sequence
from .gradcheck import NonDeterministicFunctionError, finite_diff_check
from .introspect import inspect_sample
from .losses import total_loss
from .model import build_tracker
from .rng import derive_rng
from .text import Vocabulary
from .train import TrainConfig, fit, load_model

EXPECTED_ERRORS = (ConfigurationError, DataError, CheckpointError,
                   FileNotFoundError, NonDeterministicFunctionError,
                   ValueError, json.JSONDecodeError)


class GradCheckFailure(RuntimeError):
    pass


def _load_train_config(path: str | None) -> TrainConfig:
    if path is None:
        return TrainConfig()
    with open(path) as fh:
        return TrainConfig.from_dict(json.load(fh))


def _pick_sequence(data_root: str, name: str | None):
    seqs = load_dataset(data_root)
    if name is None:
        return seqs[0]
    for s in seqs:
        if s.name == name:
            return s
    raise DataError(f"sequence {name!r} not found under {data_root}; "
                    f"available: {[s.name for s in seqs]}")


def cmd_generate_data(args) -> int:
    spec = GeneratorSpec(frame_size=args.frame_size, num_frames=args.frames,
                         distractor_count=args.distractors)
    paths = generate_dataset(args.out, args.seed, args.count, spec)
    print(f"wrote {len(paths)} sequences under {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_train_config(args.config)
    if args.epochs is not None:
        cfg.epochs = args.epochs
    if args.seed is not None:
        cfg.seed = args.seed
    if args.batch_size is not None:
        cfg.batch_size = args.batch_size
    sequences = load_dataset(args.data)
    _, stem = fit(cfg, sequences, args.out, resume_from=args.resume)
    print(f"final checkpoint: {stem}")
    return 0


def cmd_eval(args) -> int:
    model, cfg, _, _ = load_model(args.checkpoint)
    sequences = load_dataset(args.data)
    report = evaluate_ope(model, sequences, cfg.crop, model.vocab)
    text = json.dumps(report.to_dict(), indent=1)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def cmd_track(args) -> int:
    model, cfg, _, _ = load_model(args.checkpoint)
    seq = _pick_sequence(args.data, args.sequence)
    boxes = track_sequence(model, seq, cfg.crop, model.vocab)
    lines = []
    for b in boxes:
        lines.append(f"{b[0]:.3f},{b[1]:.3f},{b[2] - b[0]:.3f},{b[3] - b[1]:.3f}")
    out_text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(out_text)
        print(f"wrote {len(boxes)} boxes to {args.out}")
    else:
        print(out_text, end="")
    return 0


def cmd_gradcheck(args) -> int:
    vocab = Vocabulary.default()
    model = build_tracker(vocab=vocab, seed=args.seed)
    model.eval()  # fixed batch-norm statistics keep the loss deterministic
    seq = generate_sequence(args.seed, 0, GeneratorSpec(num_frames=2))
    from .data import make_sample
    bcfg = model.cfg.backbone
    sample = make_sample(seq, 0, 1, CropConfig(), bcfg.template_size,
                         bcfg.search_size, vocab, bcfg.text_plan.max_len)
    template = Tensor(sample.template[None])
    search = Tensor(sample.search[None])
    ids, mask = sample.tokens.ids[None], sample.tokens.mask[None]
    gt = sample.gt_box[None]

    def loss_fn():
        out = model(template, search, ids, mask, compute_score=True)
        loss, _ = total_loss(out["box"], gt, out["score"], model.cfg.loss)
        return loss

    params = list(model.named_parameters())
    report = finite_diff_check(loss_fn, params, h=args.h,
                               samples_per_param=args.samples,
                               rng=derive_rng(args.seed, "gradcheck"))
    name, worst = report.worst()
    print(f"checked {len(params)} parameters, {args.samples} coordinates each")
    print(f"max relative error {report.max_rel_error:.3e} (parameter {name})")
    if report.max_rel_error > args.tol:
        raise GradCheckFailure(
            f"gradient check failed: {report.max_rel_error:.3e} > {args.tol:g}")
    print("gradient check passed")
    return 0


def cmd_ablate(args) -> int:
    cfg = _load_train_config(args.config)
    if args.epochs is not None:
        cfg.epochs = args.epochs
    variants = tuple(args.variants.split(",")) if args.variants else DEFAULT_VARIANTS
    train_seqs = load_dataset(args.data)
    eval_seqs = load_dataset(args.eval_data)
    results = run_ablation(cfg, train_seqs, eval_seqs, args.out, variants)
    for r in results:
        print(f"{r.variant}: success_auc={r.report.success_auc:.4f} "
              f"precision={r.report.precision:.4f} "
              f"norm_precision_auc={r.report.norm_precision_auc:.4f}")
    print(f"results table: {args.out}/ablation.csv")
    return 0


def cmd_inspect(args) -> int:
    model, cfg, _, _ = load_model(args.checkpoint)
    seq = _pick_sequence(args.data, args.sequence)
    written = inspect_sample(model, seq, args.template_frame, args.search_frame,
                             cfg.crop, model.vocab, args.out)
    print(f"wrote {len(written)} signal dumps under {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vltrack",
                                description="Vision-language single-object tracker")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate-data", help="render a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--count", type=int, default=10)
    g.add_argument("--frames", type=int, default=32)
    g.add_argument("--frame-size", type=int, default=64)
    g.add_argument("--distractors", type=int, default=2)
    g.set_defaults(func=cmd_generate_data)

    t = sub.add_parser("train", help="train a tracker on a dataset directory")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--config", help="JSON training configuration")
    t.add_argument("--resume", help="checkpoint stem to resume from")
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="one-pass evaluation of a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", help="write the JSON report here")
    e.set_defaults(func=cmd_eval)

    k = sub.add_parser("track", help="run the tracker over one sequence")
    k.add_argument("--checkpoint", required=True)
    k.add_argument("--data", required=True)
    k.add_argument("--sequence", help="sequence name (default: first)")
    k.add_argument("--out", help="write x,y,w,h lines here")
    k.set_defaults(func=cmd_track)

    c = sub.add_parser("gradcheck",
                       help="finite-difference check of the whole model")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--samples", type=int, default=3,
                   help="coordinates checked per parameter")
    c.add_argument("--h", type=float, default=1e-6,
                   help="step size; small enough to avoid relu kink crossings")
    c.add_argument("--tol", type=float, default=1e-4)
    c.set_defaults(func=cmd_gradcheck)

    a = sub.add_parser("ablate", help="train and compare model variants")
    a.add_argument("--data", required=True)
    a.add_argument("--eval-data", required=True)
    a.add_argument("--out", required=True)
    a.add_argument("--config", help="JSON training configuration")
    a.add_argument("--epochs", type=int)
    a.add_argument("--variants",
                   help=f"comma-separated subset of {sorted(VARIANTS)}")
    a.set_defaults(func=cmd_ablate)

    i = sub.add_parser("inspect", help="dump internal signals for one sample")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--sequence")
    i.add_argument("--template-frame", type=int, default=0)
    i.add_argument("--search-frame", type=int, default=1)
    i.add_argument("--out", required=True)
    i.set_defaults(func=cmd_inspect)
    return p


def main(argv: list | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (*EXPECTED_ERRORS, GradCheckFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # anything unexpected
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
