"""Command-line entry point: ``mmtl <subcommand> ...``.

Exit codes: 0 success, 1 usage error, 2 data/config error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from . import datastore as ds
from . import evalkit
from .decoder import ENSEMBLE_MODES, translate_corpus
from .model import (VARIANTS, FrozenModel, ModelConfig, check_gradients, count_params,
                    param_breakdown, toy_config)
from .numerics import ParamStore
from .textpipe import BpeModel, Vocabulary, bpe_apply, bpe_learn, bpe_undo, normalize_line, vocab_build
from .trainer import Datasets, TrainConfig, TrainingDiverged, decode_tokens, train_multi

log = logging.getLogger("mmtl")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
PRESETS = ("ende", "enfr", "synthetic")
DATA_KEYS = ("train_src", "train_trg", "valid_src", "valid_trg", "train_global",
             "train_spatial", "valid_global", "valid_spatial", "src_vocab", "trg_vocab",
             "synth_dir")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


# --------------------------------------------------------------------------
# configuration


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    data: dict = field(default_factory=dict)
    normalize_features: bool = False

    def to_dict(self):
        return {"model": self.model.to_dict(), "train": self.train.to_dict(),
                "data": dict(self.data), "normalize_features": self.normalize_features}


def read_config(ref) -> tuple[dict, str, Path | None]:
    """Load a JSON config by path or preset name. Returns (dict, raw text, base dir)."""
    path = Path(ref)
    if path.is_file():
        text = path.read_text(encoding="utf-8")
        base = path.resolve().parent
    else:
        name = path.name[:-5] if path.name.endswith(".json") else path.name
        if name not in PRESETS:
            raise ds.DataError(f"config {ref!r} is neither a file nor a preset {PRESETS}")
        text = resources.files("mmtl").joinpath("presets", f"{name}.json").read_text(encoding="utf-8")
        base = None
    try:
        return json.loads(text), text, base
    except json.JSONDecodeError as e:
        raise ds.DataError(f"{ref}: invalid JSON ({e})") from None


def build_experiment(raw: dict, base: Path | None) -> ExperimentConfig:
    unknown = set(raw) - {"model", "train", "data", "normalize_features"}
    if unknown:
        raise ds.DataError(f"unknown config sections {sorted(unknown)}")
    data = dict(raw.get("data", {}))
    bad = set(data) - set(DATA_KEYS)
    if bad:
        raise ds.DataError(f"unknown data keys {sorted(bad)}")
    if base is not None:
        data = {k: str((base / v).resolve()) for k, v in data.items()}
    try:
        return ExperimentConfig(ModelConfig.from_dict(raw.get("model", {})),
                                TrainConfig.from_dict(raw.get("train", {})),
                                data, bool(raw.get("normalize_features", False)))
    except TypeError as e:
        raise ds.DataError(f"bad config field: {e}") from None


def _parse_seeds(text):
    try:
        return [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--seeds expects comma-separated integers, got {text!r}") from None


def _apply_overrides(exp: ExperimentConfig, args):
    m, t = exp.model, exp.train
    if args.variant:
        m = ModelConfig.from_dict({**m.to_dict(), "variant": args.variant})
    if args.dropout:
        m = ModelConfig.from_dict({**m.to_dict(), "dropout": [float(x) for x in args.dropout.split(",")]})
    tw = t.to_dict()
    for flag, key in (("lr", "lr"), ("batch_size", "batch_size"), ("max_updates", "max_updates"),
                      ("eval_every", "eval_every"), ("patience", "patience"),
                      ("beam", "beam_for_validation"), ("l2", "l2"), ("clip", "clip")):
        v = getattr(args, flag)
        if v is not None:
            tw[key] = v
    if args.seeds:
        tw["seeds"] = _parse_seeds(args.seeds)
    exp.model, exp.train = m, TrainConfig.from_dict(tw)
    if args.synth:
        exp.data["synth_dir"] = str(Path(args.synth).resolve())
    return exp


# --------------------------------------------------------------------------
# data assembly


def _synth_paths(d):
    d = Path(d)
    paths = {}
    for split in ("train", "valid"):
        paths[f"{split}_src"] = d / f"{split}.src"
        paths[f"{split}_trg"] = d / f"{split}.trg"
        paths[f"{split}_global"] = d / f"{split}.global.mmtf"
        paths[f"{split}_spatial"] = d / f"{split}.spatial.mmtf"
    return {k: str(v) for k, v in paths.items()}


def _require(data, key):
    if key not in data:
        raise ds.DataError(f"config data section lacks {key!r}")
    if not Path(data[key]).is_file():
        raise ds.DataError(f"{key}: file not found: {data[key]}")
    return data[key]


def _load_split(exp, data, split, sv, tv):
    samples = ds.load_parallel(_require(data, f"{split}_src"), _require(data, f"{split}_trg"), sv, tv)
    g = s = None
    if exp.model.uses_global:
        g = ds.load_features(_require(data, f"{split}_global"), expect_rank=1)
    if exp.model.uses_spatial:
        s = ds.load_features(_require(data, f"{split}_spatial"), expect_rank=2)
    ds.attach_features(samples, g, s, normalize=exp.normalize_features)
    return samples


def load_experiment_data(exp: ExperimentConfig):
    data = dict(exp.data)
    if "synth_dir" in data:
        data = {**_synth_paths(data.pop("synth_dir")), **data}
    if "src_vocab" in data:
        sv = Vocabulary.load(_require(data, "src_vocab"))
    else:
        sv = vocab_build(ds.read_lines(_require(data, "train_src")))
    if "trg_vocab" in data:
        tv = Vocabulary.load(_require(data, "trg_vocab"))
    else:
        tv = vocab_build(ds.read_lines(_require(data, "train_trg")))
    if (exp.model.src_vocab_size, exp.model.trg_vocab_size) != (len(sv), len(tv)):
        log.info("vocabulary sizes taken from data: %d -> %d", len(sv), len(tv))
        exp.model = ModelConfig.from_dict({**exp.model.to_dict(), "src_vocab_size": len(sv),
                                           "trg_vocab_size": len(tv)})
    train = _load_split(exp, data, "train", sv, tv)
    valid, refs = [], []
    if "valid_src" in data:
        valid = _load_split(exp, data, "valid", sv, tv)
        refs = [bpe_undo(line.split()) for line in ds.read_lines(data["valid_trg"])]
    return Datasets(train, valid, refs, tv), sv


def load_checkpoint(path):
    params, meta = ParamStore.load(path)
    if not meta or "model" not in meta:
        raise ds.DataError(f"{path}: checkpoint lacks model metadata")
    cfg = ModelConfig.from_dict(meta["model"])
    sv = Vocabulary(meta["src_vocab"]) if "src_vocab" in meta else None
    tv = Vocabulary(meta["trg_vocab"]) if "trg_vocab" in meta else None
    return FrozenModel(cfg, params), sv, tv


def _write_json(path, obj):
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _out_dir(args):
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# subcommands


def cmd_learn_bpe(args):
    corpus = []
    for p in args.input:
        for line in ds.read_lines(p):
            corpus.append(line.split() if args.no_normalize else normalize_line(line))
    model = bpe_learn(corpus, args.merges)
    out = _out_dir(args)
    model.save(out / args.name)
    print(f"learned {len(model)} merges -> {out / args.name}")


def cmd_apply_bpe(args):
    model = BpeModel.load(args.codes)
    out = _out_dir(args)
    for p in args.input:
        lines = []
        for line in ds.read_lines(p):
            toks = line.split() if args.no_normalize else normalize_line(line)
            lines.append(" ".join(bpe_apply(model, toks)))
        (out / Path(p).name).write_text("".join(x + "\n" for x in lines), encoding="utf-8")
        print(f"segmented {len(lines)} lines -> {out / Path(p).name}")


def cmd_build_vocab(args):
    lines = [line for p in args.input for line in ds.read_lines(p)]
    vocab = vocab_build(lines)
    out = _out_dir(args)
    vocab.save(out / args.name)
    print(f"{len(vocab)} entries (incl. 4 reserved) -> {out / args.name}")


def cmd_synth(args):
    cfg = ds.SynthConfig()
    if args.config:
        raw, _, _ = read_config(args.config)
        try:
            cfg = ds.SynthConfig(**raw)
        except TypeError as e:
            raise ds.DataError(f"bad synth config: {e}") from None
    for key in ("n_train", "n_valid", "n_test", "noise_sigma"):
        v = getattr(args, key)
        if v is not None:
            setattr(cfg, key, v)
    corpus = ds.synth_generate(cfg, args.seed)
    ds.write_synth(corpus, _out_dir(args))
    sv, tv = ds.synth_vocabs(corpus)
    print(f"synthetic corpus seed={args.seed} -> {args.out} "
          f"(src vocab {len(sv)}, trg vocab {len(tv)})")


def cmd_train(args):
    raw, text, base = read_config(args.config)
    exp = _apply_overrides(build_experiment(raw, base), args)
    out = _out_dir(args)
    (out / "config.input.json").write_text(text, encoding="utf-8")
    datasets, sv = load_experiment_data(exp)
    _write_json(out / "config.json", exp.to_dict())
    sv.save(out / "src.vocab")
    datasets.trg_vocab.save(out / "trg.vocab")
    results = train_multi(exp.model, exp.train, datasets, exp.train.seeds,
                          workers=args.parallel, out_dir=out, src_vocab=sv)
    summary = {"variant": exp.model.variant, "runs": [
        {"seed": r.log.seed, "best_update": r.log.best_update, "best_metric": r.log.best_metric,
         "stop_reason": r.log.stop_reason, "updates": len(r.log.losses),
         "checkpoint": f"seed{r.log.seed}/best.ckpt"} for r in results]}
    metrics = [r.log.best_metric for r in results if r.log.best_metric is not None]
    if metrics:
        summary["mean"], summary["std"] = evalkit.mean_std(metrics)
    _write_json(out / "summary.json", summary)
    for run in summary["runs"]:
        m = run["best_metric"]
        print(f"seed {run['seed']}: {run['updates']} updates, {run['stop_reason']}, "
              f"best valid {'n/a' if m is None else f'{m:.4f}'} @ {run['best_update']}")


def cmd_translate(args):
    loaded = [load_checkpoint(p) for p in args.ckpt]
    models = [m for m, _, _ in loaded]
    sv, tv = loaded[0][1], loaded[0][2]
    if sv is None or tv is None:
        raise ds.DataError(f"{args.ckpt[0]}: checkpoint lacks vocabularies")
    for p, (_, s2, t2) in zip(args.ckpt[1:], loaded[1:]):
        if s2 is None or t2 is None or s2.itos != sv.itos or t2.itos != tv.itos:
            raise ds.DataError(f"{p}: vocabularies differ from {args.ckpt[0]}")
    samples = ds.load_source(args.input, sv)
    cfg = models[0].cfg
    if any(m.cfg.uses_global for m in models):
        if not args.global_feats:
            raise ds.DataError("--global features required by the checkpoint variant")
        ds.attach_features(samples, ds.load_features(args.global_feats, 1), None,
                           normalize=args.normalize_features)
    if any(m.cfg.uses_spatial for m in models):
        if not args.spatial_feats:
            raise ds.DataError("--spatial features required by fusion-conv")
        ds.attach_features(samples, None, ds.load_features(args.spatial_feats, 2),
                           normalize=args.normalize_features)
    results = translate_corpus(models, samples, args.beam, args.ensemble_mode, args.length_norm)
    hyps = decode_tokens(results, tv)
    out = _out_dir(args)
    (out / args.name).write_text("".join(" ".join(h) + "\n" for h in hyps), encoding="utf-8")
    _write_json(out / (Path(args.name).stem + ".json"), {
        "checkpoints": [str(p) for p in args.ckpt], "input": str(args.input),
        "beam": args.beam, "ensemble_mode": args.ensemble_mode, "length_norm": args.length_norm,
        "variant": cfg.variant, "unfinished": sum(not r.finished for r in results)})
    print(f"translated {len(hyps)} sentences -> {out / args.name}")


def _read_tokens(path):
    return [line.split() for line in ds.read_lines(path)]


def _labels_accuracy(hyps, labels_path, senses):
    correct, rivals = [], []
    for _, tok in ds.read_labels(labels_path):
        stem, _, j = tok.rpartition("_")
        correct.append(tok)
        rivals.append([f"{stem}_{k}" for k in range(senses) if str(k) != j])
    return evalkit.ambiguous_accuracy(hyps, correct, rivals)


def cmd_evaluate(args):
    refs = _read_tokens(args.ref)
    runs = [_read_tokens(p) for p in args.hyp]
    ens = _read_tokens(args.ensemble) if args.ensemble else None
    report = evalkit.aggregate_runs(runs, ens, refs, args.name)
    text = report.render()
    extra = {}
    if args.labels:
        accs = [_labels_accuracy(h, args.labels, args.senses) for h in runs]
        extra["ambiguous_accuracy"] = accs
        text += "\nambiguous-token accuracy: " + ", ".join(f"{a:.3f}" for a in accs)
    print(text)
    if args.out:
        out = _out_dir(args)
        (out / "report.txt").write_text(text + "\n", encoding="utf-8")
        obj = json.loads(report.to_json())
        obj.update(extra)
        _write_json(out / "report.json", obj)


def cmd_significance(args):
    refs = _read_tokens(args.ref)
    a, b = _read_tokens(args.hyp_a), _read_tokens(args.hyp_b)
    metrics = ("bleu", "meteor") if args.metric == "all" else (args.metric,)
    res = {m: evalkit.ar_test(m, a, b, refs, args.shuffles, args.seed) for m in metrics}
    for m, p in res.items():
        print(f"{m}: p = {p:.4f} ({args.shuffles} shuffles, seed {args.seed})")
    if args.out:
        _write_json(_out_dir(args) / "significance.json",
                    {"p_values": res, "shuffles": args.shuffles, "seed": args.seed,
                     "meteor_label": evalkit.METEOR_LABEL})


def _block(name):
    return name.split(".")[0] if not name.startswith("enc.") else ".".join(name.split(".")[:2])


def cmd_count_params(args):
    raw, _, base = read_config(args.config)
    exp = build_experiment(raw, base)
    variants = VARIANTS if args.all_variants else [args.variant or exp.model.variant]
    for v in variants:
        cfg = ModelConfig.from_dict({**exp.model.to_dict(), "variant": v})
        blocks = {}
        for name, n in param_breakdown(cfg).items():
            blocks[_block(name)] = blocks.get(_block(name), 0) + n
        total = count_params(cfg)
        print(f"{v}: {total} parameters ({total / 1e6:.2f}M)")
        for b, n in blocks.items():
            print(f"  {b:12s} {n:>10d}")


def cmd_grad_check(args):
    variants = VARIANTS if args.variant == "all" else [args.variant]
    ok = True
    for v in variants:
        rep = check_gradients(toy_config(v), seed=args.seed, eps=args.eps, tol=args.tol)
        ok &= rep.passed
        print(f"{v}: max relative error {rep.max_error:.3e} {'PASS' if rep.passed else 'FAIL'}")
        if args.verbose or not rep.passed:
            print(rep)
    if not ok:
        return EXIT_NUMERIC


# --------------------------------------------------------------------------


def build_parser():
    p = _Parser(prog="mmtl", description="Multimodal attentive NMT toolkit")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    s = sub.add_parser("learn-bpe", help="learn BPE merges")
    s.add_argument("--input", nargs="+", required=True)
    s.add_argument("--merges", type=int, default=10000)
    s.add_argument("--name", default="bpe.codes")
    s.add_argument("--no-normalize", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_learn_bpe)

    s = sub.add_parser("apply-bpe", help="normalise and segment text")
    s.add_argument("--codes", required=True)
    s.add_argument("--input", nargs="+", required=True)
    s.add_argument("--no-normalize", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_apply_bpe)

    s = sub.add_parser("build-vocab", help="vocabulary from segmented text")
    s.add_argument("--input", nargs="+", required=True)
    s.add_argument("--name", default="vocab.txt")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_build_vocab)

    s = sub.add_parser("synth", help="generate the synthetic disambiguation corpus")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--config")
    s.add_argument("--n-train", type=int)
    s.add_argument("--n-valid", type=int)
    s.add_argument("--n-test", type=int)
    s.add_argument("--noise-sigma", type=float)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("train", help="train one model per seed")
    s.add_argument("--config", required=True, help="JSON file or preset name")
    s.add_argument("--out", required=True)
    s.add_argument("--synth", help="synthetic corpus directory (sets the data section)")
    s.add_argument("--variant", choices=VARIANTS)
    s.add_argument("--seeds")
    s.add_argument("--parallel", type=int, default=1)
    s.add_argument("--dropout", help="three comma-separated probabilities")
    s.add_argument("--lr", type=float)
    s.add_argument("--l2", type=float)
    s.add_argument("--clip", type=float)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--max-updates", type=int)
    s.add_argument("--eval-every", type=int)
    s.add_argument("--patience", type=int)
    s.add_argument("--beam", type=int)
    s.set_defaults(fn=cmd_train)

    s = sub.add_parser("translate", help="beam-search decoding, optionally ensembled")
    s.add_argument("--ckpt", nargs="+", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--global", dest="global_feats")
    s.add_argument("--spatial", dest="spatial_feats")
    s.add_argument("--normalize-features", action="store_true")
    s.add_argument("--beam", type=int, default=12)
    s.add_argument("--ensemble-mode", choices=ENSEMBLE_MODES, default="arith")
    s.add_argument("--length-norm", action="store_true")
    s.add_argument("--name", default="hyps.txt")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_translate)

    s = sub.add_parser("evaluate", help="BLEU and METEOR surrogate, mean ± std / ensemble")
    s.add_argument("--hyp", nargs="+", required=True, help="one file per run")
    s.add_argument("--ref", required=True)
    s.add_argument("--ensemble")
    s.add_argument("--name", default="system")
    s.add_argument("--labels", help="synthetic .labels file for ambiguous-token accuracy")
    s.add_argument("--senses", type=int, default=2)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("significance", help="approximate randomization test")
    s.add_argument("--hyp-a", required=True)
    s.add_argument("--hyp-b", required=True)
    s.add_argument("--ref", required=True)
    s.add_argument("--metric", choices=("bleu", "meteor", "all"), default="all")
    s.add_argument("--shuffles", type=int, default=10000)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(fn=cmd_significance)

    s = sub.add_parser("count-params", help="closed-form parameter counts")
    s.add_argument("--config", default="ende")
    s.add_argument("--variant", choices=VARIANTS)
    s.add_argument("--all-variants", action="store_true")
    s.set_defaults(fn=cmd_count_params)

    s = sub.add_parser("grad-check", help="finite-difference check at toy dimensions")
    s.add_argument("--variant", choices=VARIANTS + ("all",), default="all")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--eps", type=float, default=1e-5)
    s.add_argument("--tol", type=float, default=1e-4)
    s.set_defaults(fn=cmd_grad_check)
    return p


def run(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if not args.command:
            raise UsageError(parser.format_help())
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                            format="%(levelname)s %(name)s: %(message)s")
        rc = args.fn(args)
        return EXIT_OK if rc is None else rc
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return EXIT_USAGE
    except TrainingDiverged as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except FloatingPointError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ds.DataError, ValueError, OSError, KeyError, IndexError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA


def main():
    sys.exit(run())


if __name__ == "__main__":
    main()
