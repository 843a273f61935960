"""Command-line surface: prepare, train, finetune, decode, bench, analyze.

Every command writes a manifest.json into its output directory so a run
can be reproduced from its recorded inputs, config, and seed.  Exit
codes: 0 success, 2 configuration error, 3 data error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt
from . import config as cfgmod
from . import tensor as tz
from .analysis import attention_mass, encoder_entropy
from .data import (UNK, Corpus, Vocab, build_vocab, load_ids, load_text_lines,
                   make_toy_corpus, save_ids)
from .errors import ConfigError, DataError, DegenerateMemoryError, NumericError, ShapeError
from .gates import GateSet, gate_report
from .hardconcrete import DEFAULT_PARAMS
from .model import DenseMemory, Model, beam_decode
from .patterns import (FrequencyTable, freq_pattern, group_pattern, load_tags,
                       mask_corpus, tag_pattern)
from .rng import RngState
from .sparse import bench_cross_attention, compact
from .training import TrainConfig, evaluate, train

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4


def _manifest(out_dir: Path, command: str, args: argparse.Namespace,
              kv: dict | None, started: float, outputs: dict[str, str]) -> None:
    """One manifest per run: command, config snapshot, seed, paths, and
    content hashes of produced checkpoint files."""
    hashes = {}
    for name in outputs.values():
        p = out_dir / name
        if p.suffix == ".ckpt" and p.exists():
            hashes[name] = ckpt.file_hash(p)
    doc = {
        "command": command,
        "argv": [str(a) for a in getattr(args, "_argv", sys.argv[1:])],
        "config": kv or {},
        "seed": getattr(args, "seed", None),
        "mode": getattr(args, "mode", None),
        "inputs": {k: str(v) for k, v in vars(args).items()
                   if k.endswith(("data", "config", "checkpoint", "baseline",
                                  "input", "tags_file", "resume")) and v},
        "outputs": outputs,
        "checkpoint_hashes": hashes,
        "wall_s": round(time.time() - started, 3),
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(doc, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_corpus(data_dir: str | Path, split: str) -> Corpus:
    d = Path(data_dir)
    src_vocab = Vocab.load(d / "src.vocab")
    tgt_vocab = Vocab.load(d / "tgt.vocab")
    return Corpus(src=load_ids(d / f"{split}.src.ids"),
                  tgt=load_ids(d / f"{split}.tgt.ids"),
                  src_vocab=src_vocab, tgt_vocab=tgt_vocab)


def _resolve_pattern(args, corpus: Corpus):
    """Build the SparsityPattern selected by --pattern flags, plus per-
    sentence tag lists when the tag kind asks for them."""
    if not args.pattern:
        return None, None
    if args.pattern == "group":
        return group_pattern(), None
    if args.pattern == "tag":
        if not args.tags_file:
            raise ConfigError("--pattern tag requires --tags-file")
        if not args.drop_tags:
            raise ConfigError("--pattern tag requires --drop-tags")
        tags = load_tags(args.tags_file)
        return tag_pattern(args.drop_tags.split(",")), tags
    table = FrequencyTable.from_sentences(
        [[corpus.src_vocab.tokens[int(t)] for t in s] for s in corpus.src])
    return freq_pattern(table, args.coverage,
                        inverse=args.pattern == "inv-freq"), None


# -- prepare ----------------------------------------------------------------

def cmd_prepare(args) -> int:
    started = time.time()
    out = _out_dir(args)
    if args.toy:
        corpus = make_toy_corpus(args.toy, args.vocab_size, args.min_len,
                                 args.max_len, args.size, seed=args.seed)
    else:
        if not (args.src and args.tgt):
            raise ConfigError("prepare needs either --toy or --src and --tgt")
        src_sents = load_text_lines(args.src)
        tgt_sents = load_text_lines(args.tgt)
        if not src_sents:
            raise DataError(f"{args.src}: empty input")
        if len(src_sents) != len(tgt_sents):
            raise DataError(f"line count mismatch: {len(src_sents)} source vs "
                            f"{len(tgt_sents)} target")
        src_vocab = build_vocab(src_sents, max_size=args.vocab_size)
        tgt_vocab = build_vocab(tgt_sents, max_size=args.vocab_size)
        corpus = Corpus(src=[src_vocab.encode(s) for s in src_sents],
                        tgt=[tgt_vocab.encode(s) for s in tgt_sents],
                        src_vocab=src_vocab, tgt_vocab=tgt_vocab)
    n_valid = max(1, len(corpus) // 20) if len(corpus) > 1 else 0
    n_train = len(corpus) - n_valid
    corpus.src_vocab.save(out / "src.vocab")
    corpus.tgt_vocab.save(out / "tgt.vocab")
    save_ids(out / "train.src.ids", corpus.src[:n_train])
    save_ids(out / "train.tgt.ids", corpus.tgt[:n_train])
    save_ids(out / "valid.src.ids", corpus.src[n_train:])
    save_ids(out / "valid.tgt.ids", corpus.tgt[n_train:])
    outputs = {k: k for k in ("src.vocab", "tgt.vocab", "train.src.ids",
                              "train.tgt.ids", "valid.src.ids", "valid.tgt.ids")}
    _manifest(out, "prepare", args, None, started, outputs)
    print(f"prepared {n_train} train / {n_valid} valid sentences in {out}")
    return 0


# -- train / finetune -------------------------------------------------------

def _write_log(path: Path, log: list[dict]) -> None:
    cols = ("step", "loss", "mle", "l0", "lambda", "lr", "grad_norm", "wall_s")
    lines = ["\t".join(cols)]
    for row in log:
        lines.append("\t".join(f"{row[c]:.6g}" if c in row else "" for c in cols))
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def _run_training(args, command: str) -> int:
    started = time.time()
    out = _out_dir(args)
    kv = cfgmod.load_kv(args.config)
    corpus = _load_corpus(args.data, "train")
    mcfg = cfgmod.model_config(kv, len(corpus.src_vocab), len(corpus.tgt_vocab))
    tcfg = cfgmod.train_config(kv, default_smoothing=mcfg.label_smoothing)
    if args.seed is not None:
        tcfg = replace(tcfg, seed=args.seed)
    pattern = None
    if command == "finetune":
        if args.lam is not None:
            tcfg = replace(tcfg, lam=args.lam)
        tcfg = replace(tcfg, mode="finetune_pattern" if args.pattern
                       else "finetune_l0drop")

    pattern_masks = None
    if command == "finetune" and args.pattern:
        pattern, tags = _resolve_pattern(args, corpus)
        pattern_masks = mask_corpus(pattern, corpus, vocab=corpus.src_vocab,
                                    tags=tags)

    if args.resume:
        # the saved config governs a resumed run so the trajectory is the
        # one the uninterrupted run would have taken
        model, tcfg, optimizer, noise_rng, drop_rng, cursor, meta = \
            ckpt.load_training_state(args.resume)
        ckpt.check_vocab(meta, corpus.src_vocab, corpus.tgt_vocab)
        result = train(model, corpus, tcfg, optimizer=optimizer,
                       noise_rng=noise_rng, drop_rng=drop_rng,
                       start_step=cursor["step"], start_epoch=cursor["epoch"],
                       start_batch=cursor["batch_idx"],
                       pattern_masks=pattern_masks)
    else:
        model = Model(mcfg, seed=tcfg.seed)
        if command == "finetune":
            if not args.baseline:
                raise ConfigError("finetune requires --baseline checkpoint")
            base, _ = ckpt.load_model(args.baseline, corpus.src_vocab,
                                      corpus.tgt_vocab)
            for name, t in base.params.items():
                model.params[name].data = t.data
        result = train(model, corpus, tcfg, pattern_masks=pattern_masks)

    ckpt.save_model(out / "checkpoint.ckpt", result.model, corpus.src_vocab,
                    corpus.tgt_vocab)
    ckpt.save_training_state(out / "state.ckpt", result.model, tcfg,
                             result.optimizer, result.noise_rng,
                             result.drop_rng, result.steps_done, result.epoch,
                             result.batch_idx, corpus.src_vocab,
                             corpus.tgt_vocab)
    _write_log(out / "train.log", result.log)

    outputs = {"checkpoint": "checkpoint.ckpt", "state": "state.ckpt",
               "log": "train.log"}
    valid_path = Path(args.data) / "valid.src.ids"
    if valid_path.exists():
        valid = _load_corpus(args.data, "valid")
        valid_masks = None
        if pattern is not None and not pattern.needs_tags:
            valid_masks = mask_corpus(pattern, valid, vocab=valid.src_vocab)
        ev = evaluate(result.model, valid, pattern_masks=valid_masks)
        sp = "" if ev.sparsity is None else f"{ev.sparsity:.6f}"
        report = (f"token_accuracy\t{ev.token_accuracy:.6f}\n"
                  f"bigram_overlap\t{ev.bigram_overlap:.6f}\n"
                  f"sparsity\t{sp}\n")
        (out / "eval.txt").write_text(report, encoding="utf-8")
        outputs["eval"] = "eval.txt"
        print(report.strip())
    _manifest(out, command, args, kv, started, outputs)
    print(f"{command} finished after {result.steps_done} steps -> {out}")
    return 0


def cmd_train(args) -> int:
    return _run_training(args, "train")


def cmd_finetune(args) -> int:
    return _run_training(args, "finetune")


# -- decode -----------------------------------------------------------------

def cmd_decode(args) -> int:
    started = time.time()
    out = _out_dir(args)
    d = Path(args.data)
    src_vocab = Vocab.load(d / "src.vocab")
    tgt_vocab = Vocab.load(d / "tgt.vocab")
    model, _ = ckpt.load_model(args.checkpoint, src_vocab, tgt_vocab)

    if args.input:
        src = [src_vocab.encode(s) for s in load_text_lines(args.input)]
        # placeholder references: raw input has no targets to score against
        tgt = [np.array([UNK], dtype=np.int64) for _ in src]
        corpus = Corpus(src=src, tgt=tgt, src_vocab=src_vocab,
                        tgt_vocab=tgt_vocab)
    else:
        corpus = _load_corpus(args.data, args.split)

    pattern, tags = _resolve_pattern(args, corpus)
    pattern_masks = (mask_corpus(pattern, corpus, vocab=src_vocab, tags=tags)
                     if pattern else None)

    if args.beam > 1:
        outputs, gate_sets = _beam_corpus(model, corpus, args, pattern_masks)
    else:
        ev = evaluate(model, corpus, use_sparse=not args.dense,
                      pattern_masks=pattern_masks, max_len=args.max_len)
        outputs, gate_sets = ev.outputs, None

    text = "\n".join(" ".join(tgt_vocab.decode(o)) for o in outputs)
    (out / "output.txt").write_text(text + "\n", encoding="utf-8")

    report_lines, corpus_rate = _sparsity_report(model, corpus, pattern_masks)
    (out / "report.txt").write_text("\n".join(report_lines) + "\n",
                                    encoding="utf-8")
    outputs_map = {"output": "output.txt", "report": "report.txt"}
    if args.gate_dump:
        dump = _gate_dump(model, corpus, pattern_masks)
        (out / "gates.txt").write_text(dump, encoding="utf-8")
        outputs_map["gates"] = "gates.txt"
    _manifest(out, "decode", args, None, started, outputs_map)
    rate = "n/a" if corpus_rate is None else f"{corpus_rate:.4f}"
    print(f"decoded {len(corpus)} sentences, corpus sparsity {rate} -> {out}")
    return 0


def _beam_corpus(model, corpus, args, pattern_masks):
    from .analysis import eval_gate_pass
    outputs = []
    with tz.no_grad():
        for i in range(len(corpus)):
            src = corpus.src[i][None, :]
            if pattern_masks is not None:
                enc, real = model.encode(src)
                mem = compact(enc.data[0], pattern_masks[i])
            elif model.config.gate_layers and not args.dense:
                dense_enc, raw_enc, gs, real = eval_gate_pass(
                    model, src, DEFAULT_PARAMS)
                if gs is not None and (gs.gates[0] > 0).any():
                    mem = compact(raw_enc.data[0], gs.gates[0])
                else:
                    mem = DenseMemory(dense_enc, real)
            else:
                enc, real = model.encode(src)
                mem = DenseMemory(enc, real)
            outputs.append(beam_decode(model, mem, args.beam,
                                       args.length_penalty, args.max_len))
    return outputs, None


def _gate_values(model, corpus, pattern_masks):
    """Per-sentence (log_alphas, gates) under eval semantics, or None for
    an ungated dense model."""
    from .analysis import eval_gate_pass
    from .data import pad_batch
    if pattern_masks is not None:
        return [(np.zeros(len(m)), np.asarray(m, dtype=float))
                for m in pattern_masks]
    if not model.config.gate_layers:
        return None
    vals = []
    with tz.no_grad():
        for lo in range(0, len(corpus), 64):
            batch = pad_batch(corpus, range(lo, min(lo + 64, len(corpus))))
            _, _, gs, real = eval_gate_pass(model, batch.src, DEFAULT_PARAMS)
            for r in range(batch.nsentences):
                n = int(real[r].sum())
                if gs is None:
                    vals.append((np.zeros(n), np.ones(n)))
                else:
                    vals.append((gs.log_alphas[r, :n], gs.gates[r, :n]))
    return vals


def _sparsity_report(model, corpus, pattern_masks):
    vals = _gate_values(model, corpus, pattern_masks)
    lines = ["sentence\tlength\tpruned\trate"]
    if vals is None:
        for i in range(len(corpus)):
            n = len(corpus.src[i])
            lines.append(f"{i}\t{n}\t0\t0.0000")
        lines.append("corpus\t-\t-\t0.0000")
        return lines, None
    total = pruned = 0
    for i, (_, g) in enumerate(vals):
        n = len(g)
        p = int((g == 0).sum())
        total += n
        pruned += p
        lines.append(f"{i}\t{n}\t{p}\t{p / n:.4f}")
    rate = pruned / total if total else 0.0
    lines.append(f"corpus\t-\t-\t{rate:.4f}")
    return lines, rate


def _gate_dump(model, corpus, pattern_masks):
    vals = _gate_values(model, corpus, pattern_masks)
    tokens = [[corpus.src_vocab.tokens[int(t)] for t in s] for s in corpus.src]
    if vals is None:
        vals = [(np.zeros(len(s)), np.ones(len(s))) for s in corpus.src]
    sets = [GateSet(log_alphas=la[None], gates=g[None],
                    pad_mask=np.zeros((1, len(g)), dtype=bool))
            for la, g in vals]
    return gate_report(tokens, sets)


# -- bench ------------------------------------------------------------------

def cmd_bench(args) -> int:
    started = time.time()
    out = _out_dir(args)
    rows = ["n\tsparsity\tn_prime\tm\td\theads\tdense_ns\tsparse_ns\tspeedup"]
    for n in args.n:
        for sp in args.sparsity:
            rec = bench_cross_attention(n, sp, args.m, d=args.d,
                                        heads=args.heads,
                                        repetitions=args.repetitions,
                                        seed=args.seed or 0)
            rows.append(f"{rec.N}\t{sp:.2f}\t{rec.N_prime}\t{rec.M}\t{rec.d}\t"
                        f"{rec.heads}\t{rec.dense_ns_per_step:.0f}\t"
                        f"{rec.sparse_ns_per_step:.0f}\t{rec.speedup:.3f}")
            print(rec.format())
    (out / "bench.tsv").write_text("\n".join(rows) + "\n", encoding="utf-8")
    _manifest(out, "bench", args, None, started, {"bench": "bench.tsv"})
    return 0


# -- analyze ----------------------------------------------------------------

def cmd_analyze(args) -> int:
    started = time.time()
    out = _out_dir(args)
    corpus = _load_corpus(args.data, args.split)
    model, _ = ckpt.load_model(args.checkpoint, corpus.src_vocab,
                               corpus.tgt_vocab)
    gates_from = None
    if args.gates_from:
        gates_from, _ = ckpt.load_model(args.gates_from, corpus.src_vocab,
                                        corpus.tgt_vocab)

    outputs = {}
    if args.which in ("attention_mass", "both"):
        rep = attention_mass(model, corpus)
        counts, edges = rep.histogram(bins=20, retained_only=True)
        rows = ["bin_lo\tbin_hi\tcount"]
        rows += [f"{edges[i]:.4f}\t{edges[i + 1]:.4f}\t{int(c)}"
                 for i, c in enumerate(counts)]
        (out / "mass_histogram.tsv").write_text("\n".join(rows) + "\n",
                                                encoding="utf-8")
        summary = {
            "mean_all": rep.mean_all,
            "mean_retained": rep.mean_retained,
            "frac_below_one_retained": rep.frac_below(1.0),
            "frac_below_one_all": rep.frac_below(1.0, retained_only=False),
            "n_words": int(rep.masses.size),
            "n_fallback_sentences": rep.n_fallback,
        }
        (out / "mass_summary.json").write_text(
            json.dumps(summary, indent=2) + "\n", encoding="utf-8")
        outputs.update({"histogram": "mass_histogram.tsv",
                        "mass_summary": "mass_summary.json"})
        print(f"attention mass: mean {rep.mean_retained:.4f} over retained, "
              f"{100 * rep.frac_below(1.0):.1f}% below one unit")
    if args.which in ("entropy", "both"):
        rep = encoder_entropy(model, corpus, gates_from=gates_from)
        # NaN means an empty class; JSON gets null so strict parsers cope.
        doc = {"retained_mean": rep.retained_mean,
               "pruned_mean": rep.pruned_mean if rep.n_pruned else None,
               "n_retained": rep.n_retained, "n_pruned": rep.n_pruned}
        (out / "entropy.json").write_text(json.dumps(doc, indent=2) + "\n",
                                          encoding="utf-8")
        outputs["entropy"] = "entropy.json"
        print(f"entropy: retained {rep.retained_mean:.4f} "
              f"({rep.n_retained} rows), pruned {rep.pruned_mean:.4f} "
              f"({rep.n_pruned} rows)")
    _manifest(out, "analyze", args, None, started, outputs)
    return 0


# -- argument parsing -------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(
        prog="l0seq",
        description="Sequence-to-sequence toolkit with learned and rule-based "
                    "encoder-output pruning.")
    p.add_argument("--mode", choices=("verify", "fast"), default="verify",
                   help="numeric mode: verify = 64-bit with finiteness checks, "
                        "fast = 32-bit")
    sub = p.add_subparsers(dest="command", required=True)

    sp = sub.add_parser("prepare", help="build vocab + id corpus")
    sp.add_argument("--toy", choices=("copy", "reverse", "sorted"))
    sp.add_argument("--vocab-size", type=int, default=50)
    sp.add_argument("--min-len", type=int, default=5)
    sp.add_argument("--max-len", type=int, default=20)
    sp.add_argument("--size", type=int, default=10000)
    sp.add_argument("--src")
    sp.add_argument("--tgt")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_prepare)

    for name in ("train", "finetune"):
        st = sub.add_parser(name, help=f"{name} a model")
        st.add_argument("--config", required=True)
        st.add_argument("--data", required=True)
        st.add_argument("--out", required=True)
        st.add_argument("--seed", type=int)
        st.add_argument("--resume", help="training-state checkpoint to continue")
        if name == "finetune":
            st.add_argument("--baseline", help="model checkpoint to start from")
            st.add_argument("--lambda", dest="lam", type=float)
            _add_pattern_flags(st)
        st.set_defaults(func=cmd_train if name == "train" else cmd_finetune)

    sd = sub.add_parser("decode", help="decode a corpus or raw text")
    sd.add_argument("--checkpoint", required=True)
    sd.add_argument("--data", required=True)
    sd.add_argument("--split", default="valid")
    sd.add_argument("--input", help="raw text file instead of a corpus split")
    sd.add_argument("--beam", type=int, default=1)
    sd.add_argument("--length-penalty", type=float, default=0.0)
    g = sd.add_mutually_exclusive_group()
    g.add_argument("--sparse", action="store_true", default=True,
                   help="decode through the compacted memory (default)")
    g.add_argument("--dense", action="store_true", default=False,
                   help="decode through the full dense memory")
    sd.add_argument("--max-len", type=int, default=64)
    sd.add_argument("--gate-dump", action="store_true")
    _add_pattern_flags(sd)
    sd.add_argument("--out", required=True)
    sd.set_defaults(func=cmd_decode)

    sb = sub.add_parser("bench", help="cross-attention timing")
    sb.add_argument("--n", type=int, nargs="+", default=[64, 1024])
    sb.add_argument("--sparsity", type=float, nargs="+", default=[0.0, 0.4, 0.7])
    sb.add_argument("--m", type=int, default=64)
    sb.add_argument("--d", type=int, default=512)
    sb.add_argument("--heads", type=int, default=8)
    sb.add_argument("--repetitions", type=int, default=5)
    sb.add_argument("--seed", type=int, default=0)
    sb.add_argument("--out", required=True)
    sb.set_defaults(func=cmd_bench)

    sa = sub.add_parser("analyze", help="attention mass and entropy reports")
    sa.add_argument("--checkpoint", required=True)
    sa.add_argument("--data", required=True)
    sa.add_argument("--split", default="valid")
    sa.add_argument("--which", choices=("attention_mass", "entropy", "both"),
                    default="both")
    sa.add_argument("--gates-from",
                    help="gated checkpoint whose keep/drop split classifies rows")
    sa.add_argument("--out", required=True)
    sa.set_defaults(func=cmd_analyze)
    return p


def _add_pattern_flags(sp) -> None:
    sp.add_argument("--pattern", choices=("tag", "freq", "inv-freq", "group"))
    sp.add_argument("--coverage", type=float, default=0.5)
    sp.add_argument("--tags-file")
    sp.add_argument("--drop-tags", help="comma-separated tags to drop")


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    args._argv = list(sys.argv[1:] if argv is None else argv)
    tz.set_mode(args.mode)
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ShapeError, DegenerateMemoryError, FileNotFoundError) as e:
        print(f"data error: {e}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
