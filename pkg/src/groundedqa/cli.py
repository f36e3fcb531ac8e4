"""
Batch driver: synthesize data, split, train, evaluate, gradient-check,
report statistics, and export attention heat maps.

Exit codes: 0 success, 1 usage, 2 validation, 3 numerics.
"""

import argparse
import os
import sys
import time
from dataclasses import dataclass, fields

import numpy as np

from . import baselines  # noqa: F401  (re-exported for scripted use)
from . import datamodel, evalkit, featurestore, qamodel, synthdata
from .numkit import NumericsError, finite_diff_grad_check

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_VALIDATION = 2
EXIT_NUMERICS = 3


class UsageError(Exception):
    pass


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


@dataclass
class RunConfig:
    command: str = ""
    corpus: str = None
    features: str = None
    splits: str = None
    splits_seed: int = 0
    checkpoint: str = None
    mode: str = "learned"
    task: str = "both"
    preset: str = "micro"
    hidden: int = None
    d_a: int = None
    epochs: int = 10
    batch: int = 128
    lr: float = 1e-4
    seed: int = 0
    out: str = None
    n_telling: int = 32
    n_pointing: int = 32
    gold_stub: bool = False
    blur: bool = False


_FLAG_TYPES = {
    "splits_seed": int, "hidden": int, "d_a": int, "epochs": int,
    "batch": int, "seed": int, "n_telling": int, "n_pointing": int,
    "lr": float, "gold_stub": lambda s: s.lower() in ("1", "true", "yes"),
    "blur": lambda s: s.lower() in ("1", "true", "yes"),
}

COMMANDS = ("synth", "split", "train", "eval", "gradcheck", "stats",
            "heatmap")


def _build_parser() -> _Parser:
    p = _Parser(prog="groundedqa", description=__doc__)
    p.add_argument("command", choices=COMMANDS)
    p.add_argument("--config", help="key=value config file; flags override")
    p.add_argument("--corpus")
    p.add_argument("--features")
    p.add_argument("--splits")
    p.add_argument("--splits-seed", type=int, dest="splits_seed")
    p.add_argument("--checkpoint")
    p.add_argument("--mode", choices=("learned", "uniform"))
    p.add_argument("--task", choices=("telling", "pointing", "both"))
    p.add_argument("--preset", choices=("micro", "full"))
    p.add_argument("--hidden", type=int)
    p.add_argument("--d-a", type=int, dest="d_a")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.add_argument("--n-telling", type=int, dest="n_telling")
    p.add_argument("--n-pointing", type=int, dest="n_pointing")
    p.add_argument("--gold-stub", action="store_const", const=True,
                   dest="gold_stub")
    p.add_argument("--blur", action="store_const", const=True, dest="blur")
    return p


def _read_config_file(path) -> dict:
    values = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            key, _, value = line.partition("=")
            key = key.strip().replace("-", "_")
            if key not in {f.name for f in fields(RunConfig)}:
                raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
            values[key] = _FLAG_TYPES.get(key, str)(value.strip())
    return values


def parse_config(argv) -> RunConfig:
    """CLI flags override config-file values override defaults."""
    if not argv:
        raise UsageError("no command given; commands: " + ", ".join(COMMANDS))
    args = _build_parser().parse_args(argv)
    cfg = RunConfig(command=args.command)
    if args.config:
        for key, value in _read_config_file(args.config).items():
            setattr(cfg, key, value)
    explicit = set()
    for f in fields(RunConfig):
        if f.name == "command":
            continue
        value = getattr(args, f.name, None)
        if value is not None:
            setattr(cfg, f.name, value)
            explicit.add(f.name)
    _validate_widths(cfg, explicit)
    return cfg


def _validate_widths(cfg: RunConfig, explicit) -> None:
    preset_hidden = 8 if cfg.preset == "micro" else 512
    hidden = cfg.hidden if cfg.hidden is not None else preset_hidden
    d_a = cfg.d_a if cfg.d_a is not None else preset_hidden
    one_explicit = ("hidden" in explicit) != ("d_a" in explicit)
    if one_explicit and hidden != d_a:
        raise ValidationError(
            f"conflicting widths: hidden {hidden} vs attention width {d_a} "
            f"from preset {cfg.preset!r}; set both explicitly to mix them")
    cfg.hidden = hidden
    cfg.d_a = d_a


def _model_config(cfg: RunConfig, vocab_size: int) -> qamodel.ModelConfig:
    if cfg.preset == "micro":
        mc = qamodel.ModelConfig.micro(vocab_size)
    else:
        mc = qamodel.ModelConfig(vocab_size=vocab_size)
    mc.hidden = cfg.hidden
    mc.d_a = cfg.d_a
    return mc


def _config_echo(cfg: RunConfig):
    return [f"{f.name}={getattr(cfg, f.name)}" for f in fields(cfg)
            if getattr(cfg, f.name) is not None]


def _prepare_out(cfg: RunConfig):
    if not cfg.out:
        raise UsageError("--out is required for this command")
    os.makedirs(cfg.out, exist_ok=True)
    echo = _config_echo(cfg)
    with open(os.path.join(cfg.out, "config.echo.txt"), "w") as f:
        f.write("\n".join(echo) + "\n")
    with open(os.path.join(cfg.out, "run.log"), "a") as f:
        f.write(f"{time.strftime('%Y-%m-%dT%H:%M:%S')} {cfg.command}\n")
    return echo


def _require(cfg: RunConfig, *names):
    for name in names:
        value = getattr(cfg, name)
        if value is None:
            raise UsageError(f"--{name.replace('_', '-')} is required")
        if name in ("corpus", "features", "splits", "checkpoint") \
                and not os.path.exists(value):
            raise UsageError(f"--{name.replace('_', '-')}: "
                             f"no such path {value!r}")


def _load_packs(features_dir):
    packs = {}
    for entry in sorted(os.listdir(features_dir)):
        if entry.endswith(".fpk"):
            pack = featurestore.read_feature_pack(
                os.path.join(features_dir, entry))
            packs[pack.image_id] = pack
    return packs


def _select_records(corpus, cfg: RunConfig, split=None):
    records = corpus.records
    if cfg.task != "both":
        records = [r for r in records if r.kind == cfg.task]
    if split and cfg.splits:
        assignment = datamodel.read_splits(cfg.splits).assignment
        records = [r for r in records if assignment.get(r.qa_id) == split]
    return records


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def _cmd_synth(cfg: RunConfig) -> int:
    _prepare_out(cfg)
    corpus, packs = synthdata.synth_corpus(cfg.n_telling, cfg.n_pointing,
                                           cfg.seed)
    datamodel.write_corpus(corpus, os.path.join(cfg.out, "corpus.json"))
    pack_dir = os.path.join(cfg.out, "packs")
    os.makedirs(pack_dir, exist_ok=True)
    for image_id in sorted(packs):
        featurestore.write_feature_pack(
            packs[image_id], os.path.join(pack_dir, f"{image_id}.fpk"))
    return EXIT_OK


def _cmd_split(cfg: RunConfig) -> int:
    _require(cfg, "corpus")
    echo = _prepare_out(cfg)
    corpus = datamodel.parse_corpus(cfg.corpus)
    splits = datamodel.make_splits(corpus, cfg.splits_seed)
    path = os.path.join(cfg.out, "splits.tsv")
    with open(path, "w") as f:
        for line in echo:
            f.write(f"# {line}\n")
    with open(path, "a") as f:
        for qa_id in sorted(splits.assignment):
            f.write(f"{qa_id}\t{splits.assignment[qa_id]}\n")
    return EXIT_OK


def _cmd_train(cfg: RunConfig) -> int:
    _require(cfg, "corpus", "features")
    echo = _prepare_out(cfg)
    corpus = datamodel.parse_corpus(cfg.corpus)
    packs = _load_packs(cfg.features)
    records = _select_records(corpus, cfg, split="train")
    if not records:
        raise ValidationError("no training records selected")
    vocab = datamodel.build_vocab(records)
    mc = _model_config(cfg, vocab.size)
    params = qamodel.init_params(mc, cfg.seed)
    tc = qamodel.TrainConfig(epochs=cfg.epochs, batch_size=cfg.batch,
                             learning_rate=cfg.lr, seed=cfg.seed,
                             mode=cfg.mode)
    params, curve = qamodel.train(records, packs, vocab, params, mc, tc)
    qamodel.save_checkpoint(params, mc,
                            os.path.join(cfg.out, "model.ckpt"))
    with open(os.path.join(cfg.out, "loss_curve.txt"), "w") as f:
        for line in echo:
            f.write(f"# {line}\n")
        for epoch, loss in enumerate(curve):
            f.write(f"{epoch}\t{loss:.10f}\n")
    with open(os.path.join(cfg.out, "vocab.txt"), "w") as f:
        f.write("\n".join(vocab.index_to_token) + "\n")
    return EXIT_OK


def _load_vocab(path) -> datamodel.Vocabulary:
    with open(path, "r", encoding="utf-8") as f:
        tokens = [line.rstrip("\n") for line in f if line.rstrip("\n")]
    return datamodel.Vocabulary(
        token_to_index={t: i for i, t in enumerate(tokens)},
        index_to_token=tokens)


def _cmd_eval(cfg: RunConfig) -> int:
    _require(cfg, "corpus", "features")
    echo = _prepare_out(cfg)
    corpus = datamodel.parse_corpus(cfg.corpus)
    packs = _load_packs(cfg.features)
    records = _select_records(corpus, cfg, split="test")
    if cfg.gold_stub:
        def predict(rec, pack):
            _, target = datamodel.mc_candidates(rec)
            return target
    else:
        _require(cfg, "checkpoint")
        params, mc = qamodel.load_checkpoint(cfg.checkpoint)
        vocab = _load_vocab(os.path.join(os.path.dirname(cfg.checkpoint),
                                         "vocab.txt"))

        def predict(rec, pack):
            chosen, _ = qamodel.predict_mc(rec, pack, params, vocab, mc,
                                           cfg.mode)
            return chosen
    report = evalkit.evaluate(predict, records, packs)
    with open(os.path.join(cfg.out, "report.txt"), "w") as f:
        f.write(report.to_text(header_lines=echo))
    return EXIT_OK


def _cmd_gradcheck(cfg: RunConfig) -> int:
    echo = _prepare_out(cfg) if cfg.out else _config_echo(cfg)
    corpus, packs = synthdata.synth_corpus(
        2, 2, cfg.seed, global_dim=12, conv_cells=4, conv_channels=6)
    vocab = datamodel.build_vocab(corpus.records)
    mc = _model_config(cfg, vocab.size)
    params = qamodel.init_params(mc, cfg.seed)
    worst = 0.0
    for rec in corpus.records:
        pack = packs[rec.image_id]
        loss_fn, grad_fn = qamodel.gradcheck_fns(mc, rec, pack, vocab,
                                                 cfg.mode)
        result = finite_diff_grad_check(loss_fn, grad_fn, params)
        worst = max(worst, result.max_rel_error)
        print(f"{rec.qa_id}: max relative error {result.max_rel_error:.3e} "
              f"({result.worst_param})")
    print(f"overall max relative error {worst:.3e}")
    if cfg.out:
        with open(os.path.join(cfg.out, "gradcheck.txt"), "w") as f:
            for line in echo:
                f.write(f"# {line}\n")
            f.write(f"max_rel_error\t{worst:.6e}\n")
    if worst >= 1e-4:
        raise NumericsError(f"gradient check failed: {worst:.3e} >= 1e-4")
    return EXIT_OK


def _cmd_stats(cfg: RunConfig) -> int:
    _require(cfg, "corpus")
    echo = _prepare_out(cfg)
    corpus = datamodel.parse_corpus(cfg.corpus)
    stats = datamodel.corpus_stats(corpus)
    bins = datamodel.object_frequency_bins(corpus.records)
    with open(os.path.join(cfg.out, "stats.txt"), "w") as f:
        for line in echo:
            f.write(f"# {line}\n")
        f.write(f"avg_q_len\t{stats.avg_q_len:.4f}\t{stats.sd_q_len:.4f}\n")
        f.write(f"avg_a_len\t{stats.avg_a_len:.4f}\t{stats.sd_a_len:.4f}\n")
        f.write(f"long_answer_frac\t{stats.long_answer_frac:.4f}\n")
        f.write(f"top_1000_coverage\t{stats.top_1000_coverage:.4f}\n")
        for k in (1, 2, 3):
            f.write(f"answer_len_{k}\t{stats.answer_len_hist[k]:.4f}\n")
        f.write(f"n_telling\t{stats.n_telling}\n")
        f.write(f"n_pointing\t{stats.n_pointing}\n")
        for ub in sorted(bins):
            names = ",".join(sorted(bins[ub]))
            f.write(f"freq_bin_{ub}\t{names}\n")
    return EXIT_OK


def _cmd_heatmap(cfg: RunConfig) -> int:
    _require(cfg, "corpus", "features", "checkpoint")
    _prepare_out(cfg)
    corpus = datamodel.parse_corpus(cfg.corpus)
    packs = _load_packs(cfg.features)
    params, mc = qamodel.load_checkpoint(cfg.checkpoint)
    vocab = _load_vocab(os.path.join(os.path.dirname(cfg.checkpoint),
                                     "vocab.txt"))
    for rec in _select_records(corpus, cfg):
        pack = packs[rec.image_id]
        q_tokens = vocab.encode(datamodel.tokenize(rec.question))
        state = qamodel.encode(pack, q_tokens, params, mc, cfg.mode)
        trace = list(state.trace)
        if rec.kind == "telling":
            a_tokens = vocab.encode(datamodel.tokenize(rec.answer))
            _, caches, _ = qamodel._decode_telling(state, a_tokens, params,
                                                   cfg.mode)
            trace += [st["a"] for st in caches]
        width, height = corpus.image_dims(rec.image_id)
        heatmap = evalkit.attention_heatmap(trace, width, height)
        evalkit.export_heatmap_image(
            heatmap, os.path.join(cfg.out, f"{rec.qa_id}.pgm"),
            blur=cfg.blur)
    return EXIT_OK


_DISPATCH = {
    "synth": _cmd_synth, "split": _cmd_split, "train": _cmd_train,
    "eval": _cmd_eval, "gradcheck": _cmd_gradcheck, "stats": _cmd_stats,
    "heatmap": _cmd_heatmap,
}


def run(cfg: RunConfig) -> int:
    return _DISPATCH[cfg.command](cfg)


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else argv
    try:
        cfg = parse_config(argv)
        return run(cfg)
    except UsageError as e:
        print(f"usage error: {e}", file=sys.stderr)
        print("commands: " + " | ".join(COMMANDS), file=sys.stderr)
        return EXIT_USAGE
    except (ValidationError, datamodel.CorpusError,
            featurestore.FormatError, ValueError) as e:
        print(f"validation error: {e}", file=sys.stderr)
        return EXIT_VALIDATION
    except (NumericsError, FloatingPointError) as e:
        print(f"numerics error: {e}", file=sys.stderr)
        return EXIT_NUMERICS


if __name__ == "__main__":
    sys.exit(main())
