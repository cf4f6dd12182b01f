"""Command line: gen-synth, tokenize, train, translate, evaluate, compare.

Configuration is flat ``section.key = value`` text.  A run starts from a named
preset, then a config file, then ``--set key=value`` overrides; the
``SIGNSEQ_SEED`` environment variable overrides every seed.  Failures print
one line ``error: <category>: <message>`` and exit with status 1.
"""
from __future__ import annotations

import argparse
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

from . import __version__, metrics, significance, synthcorpus
from .autodiff import AutodiffError
from .formats import FormatError, ManifestRecord, read_lines, read_manifest, save_features, write_lines, \
    write_manifest
from .metrics import MetricError
from .seq2seq import ModelConfig, ModelError, Seq2Seq, Vocabulary, model_from_checkpoint
from .significance import SignificanceError
from .synthcorpus import SynthConfig, SynthError
from .tokenization import TokenizationError, TokenizerSpec
from .training import Sample, TrainConfig, TrainingError, evaluate_model, train_seq2seq


class ConfigError(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration

DEFAULTS = {
    "model.layers": 2,
    "model.hidden": 64,
    "model.embed": 32,
    "model.attention": "bahdanau",
    "model.dropout": 0.2,
    "model.residual": True,
    "model.init_std": 0.1,
    "model.input_proj": 0,
    "train.max_iterations": 2000,
    "train.checkpoint_interval": 200,
    "train.average_window": 5,
    "train.lr": 1e-3,
    "train.optimizer": "adam",
    "train.batch_size": 16,
    "train.teacher_forcing": 1.0,
    "train.teacher_forcing_end": "",
    "train.clip_norm": 5.0,
    "train.seed": 0,
    "train.max_decode_len": 50,
    "train.eval_limit": 0,
    "tokenizer.kind": "keypoints",
    "tokenizer.parts": "body,right,left",
    "tokenizer.grouping": "per-part",
    "tokenizer.window": 8,
    "tokenizer.reverse": False,
    "data.train": "",
    "data.dev": "",
    "data.test": "",
    "synth.seed": 0,
    "synth.languages": 2,
    "synth.sentences": 700,
    "synth.min_length": 3,
    "synth.max_length": 6,
    "synth.noise": 0.02,
    "synth.garbage_prob": 0.05,
    "synth.shift": 1.0,
    "synth.train_ratio": 600 / 700,
    "synth.dev_ratio": 50 / 700,
    "synth.test_ratio": 50 / 700,
    "synth.eval_language": "",
    "synth.feature_dim": 32,
    "synth.companion_dim": 0,
}

_PAPER = {
    "model.layers": 4, "model.hidden": 512, "model.embed": 256, "model.dropout": 0.2,
    "model.residual": True, "model.init_std": 0.02,
    "train.max_iterations": 30000, "train.checkpoint_interval": 1000, "train.average_window": 5,
    "train.lr": 1e-4, "train.optimizer": "adam", "train.batch_size": 16,
    "tokenizer.kind": "features",
}

PRESETS = {
    "desk": {},
    "paper-bahdanau": {**_PAPER, "model.attention": "bahdanau"},
    "paper-luong": {**_PAPER, "model.attention": "luong"},
}


def _coerce(key: str, value):
    default = DEFAULTS[key]
    if not isinstance(value, str):
        return value
    value = value.strip()
    try:
        if isinstance(default, bool):
            low = value.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(value)
            return low in ("true", "1", "yes")
        if isinstance(default, int):
            return int(value)
        if isinstance(default, float):
            return float(value)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {value!r} as {type(default).__name__}") from None
    return value


def parse_config_text(text: str, source: str = "<config>") -> dict:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value")
        key, value = (x.strip() for x in line.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _coerce(key, value)
    return out


def format_config(cfg: dict) -> str:
    lines = []
    for key in sorted(cfg):
        v = cfg[key]
        lines.append(f"{key} = {str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"


def resolve_config(preset: str = "desk", path: Optional[str] = None, overrides: Sequence[str] = (),
                   env: Optional[dict] = None) -> dict:
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {sorted(PRESETS)}")
    cfg = dict(DEFAULTS)
    cfg.update(PRESETS[preset])
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file {path} not found")
        cfg.update(parse_config_text(p.read_text(), str(p)))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = (x.strip() for x in item.split("=", 1))
        if key not in DEFAULTS:
            raise ConfigError(f"unknown key {key!r}")
        cfg[key] = _coerce(key, value)
    env = os.environ if env is None else env
    if env.get("SIGNSEQ_SEED"):
        try:
            seed = int(env["SIGNSEQ_SEED"])
        except ValueError:
            raise ConfigError(f"SIGNSEQ_SEED={env['SIGNSEQ_SEED']!r} is not an integer") from None
        cfg["train.seed"] = seed
        cfg["synth.seed"] = seed
    return cfg


def synth_config(cfg: dict) -> SynthConfig:
    ev = cfg["synth.eval_language"]
    return SynthConfig(
        seed=cfg["synth.seed"], languages=cfg["synth.languages"], sentences=cfg["synth.sentences"],
        length_range=(cfg["synth.min_length"], cfg["synth.max_length"]), noise=cfg["synth.noise"],
        garbage_prob=cfg["synth.garbage_prob"], shift=cfg["synth.shift"],
        splits=(cfg["synth.train_ratio"], cfg["synth.dev_ratio"], cfg["synth.test_ratio"]),
        eval_language=int(ev) if str(ev).strip() != "" else None,
        feature_dim=cfg["synth.feature_dim"], companion_dim=cfg["synth.companion_dim"])


def tokenizer_spec(cfg: dict) -> TokenizerSpec:
    parts = tuple(p.strip() for p in cfg["tokenizer.parts"].split(",") if p.strip())
    return TokenizerSpec(cfg["tokenizer.kind"], parts, cfg["tokenizer.grouping"],
                         cfg["tokenizer.window"], cfg["tokenizer.reverse"])


def train_config(cfg: dict) -> TrainConfig:
    end = str(cfg["train.teacher_forcing_end"]).strip()
    return TrainConfig(
        max_iterations=cfg["train.max_iterations"], checkpoint_interval=cfg["train.checkpoint_interval"],
        average_window=cfg["train.average_window"], lr=cfg["train.lr"], optimizer=cfg["train.optimizer"],
        batch_size=cfg["train.batch_size"], teacher_forcing=cfg["train.teacher_forcing"],
        teacher_forcing_end=float(end) if end else None,
        clip_norm=cfg["train.clip_norm"] if cfg["train.clip_norm"] > 0 else None,
        seed=cfg["train.seed"], max_decode_len=cfg["train.max_decode_len"])


def model_config(cfg: dict, token_dim: int, vocab_size: int) -> ModelConfig:
    return ModelConfig(token_dim=token_dim, vocab_size=vocab_size, layers=cfg["model.layers"],
                       hidden=cfg["model.hidden"], embed=cfg["model.embed"],
                       attention=cfg["model.attention"], dropout=cfg["model.dropout"],
                       residual=cfg["model.residual"], init_std=cfg["model.init_std"],
                       input_proj=cfg["model.input_proj"])


# ---------------------------------------------------------------------------
# data handling


def _check_records(records: Sequence[ManifestRecord], spec: TokenizerSpec, manifest) -> None:
    needs = {"keypoints": ("keypoint_path",), "features": ("feature_path",),
             "features+companion": ("feature_path", "companion_path"), "clips": ("feature_path",)}[spec.kind]
    for r in records:
        for attr in needs:
            p = getattr(r, attr)
            if p is None:
                raise ConfigError(f"{manifest}: {r.sample_id} has no {attr.split('_')[0]} file "
                                  f"but tokenizer is {spec.kind!r}")
            if not Path(p).is_file():
                raise FileNotFoundError(f"{p} (referenced by {manifest})")


def load_split(manifest, spec: TokenizerSpec, vocab: Optional[Vocabulary] = None) -> list:
    """Tokenized ``Sample``s for a manifest; targets are left empty without a vocabulary."""
    if not Path(manifest).is_file():
        raise FileNotFoundError(f"manifest {manifest} not found")
    records = read_manifest(manifest)
    if not records:
        raise ConfigError(f"{manifest}: no records")
    _check_records(records, spec, manifest)
    return [Sample(r.sample_id, spec.apply(r), vocab.encode(r.sentence) if vocab else [], r.sentence)
            for r in records]


@dataclass
class RunOutcome:
    run_dir: Path
    report: Optional[metrics.MetricReport]
    hypotheses: list
    references: list
    result: object


def run_training(cfg: dict, run_dir, resume: bool = False, log=None) -> RunOutcome:
    """Train from a resolved config into ``run_dir`` and score the test (else dev) split."""
    run_dir = Path(run_dir)
    snapshot = run_dir / "config.txt"
    if resume and snapshot.exists():
        frozen = parse_config_text(snapshot.read_text(), str(snapshot))
        if frozen != {k: cfg[k] for k in frozen}:
            changed = sorted(k for k in frozen if frozen[k] != cfg.get(k))
            raise ConfigError(f"resume config differs from the run snapshot in {changed}")
    elif run_dir.exists() and any(run_dir.glob("ckpt-*.ssck")):
        raise ConfigError(f"run directory {run_dir} already holds checkpoints; use --resume")
    if not cfg["data.train"]:
        raise ConfigError("data.train is not set")
    spec = tokenizer_spec(cfg)
    tc = train_config(cfg)
    train_records = read_manifest(cfg["data.train"]) if Path(cfg["data.train"]).is_file() else None
    if train_records is None:
        raise FileNotFoundError(f"manifest {cfg['data.train']} not found")
    vocab = Vocabulary.from_sentences(r.sentence for r in train_records)
    train = load_split(cfg["data.train"], spec, vocab)
    dev = load_split(cfg["data.dev"], spec, vocab) if cfg["data.dev"] else []
    test = load_split(cfg["data.test"], spec, vocab) if cfg["data.test"] else []
    model = Seq2Seq.init(model_config(cfg, train[0].tokens.dim, len(vocab)), seed=tc.seed)
    run_dir.mkdir(parents=True, exist_ok=True)
    if not snapshot.exists():
        snapshot.write_text(format_config(cfg))
    vocab.save(run_dir / "vocab.txt")
    result = train_seq2seq(model, train, dev, tc, vocab, run_dir=run_dir, resume=resume, log=log,
                           eval_limit=cfg["train.eval_limit"] or None)
    scored = test or dev
    report, hyps, refs = None, [], []
    if scored:
        _, _, hyps = evaluate_model(result.model, scored, vocab, max_len=tc.max_decode_len)
        refs = [s.sentence for s in scored]
        split = "test" if test else "dev"
        report = metrics.evaluate(hyps, refs, system=split)
        write_lines(run_dir / f"{split}.hyp.txt", hyps)
        (run_dir / "report.txt").write_text(report.keyvalue() + "\n" + report.table())
    return RunOutcome(run_dir, report, hyps, refs, result)


def load_run(run_dir, checkpoint: Optional[str] = None) -> tuple:
    run_dir = Path(run_dir)
    snapshot = run_dir / "config.txt"
    if not snapshot.is_file():
        raise FileNotFoundError(f"{snapshot} not found; not a run directory")
    cfg = dict(DEFAULTS)
    cfg.update(parse_config_text(snapshot.read_text(), str(snapshot)))
    vocab = Vocabulary.load(run_dir / "vocab.txt")
    ckpt = Path(checkpoint) if checkpoint else run_dir / "final.ssck"
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint {ckpt} not found")
    return cfg, vocab, model_from_checkpoint(ckpt)


def translate(run_dir, manifest, checkpoint: Optional[str] = None, batch_size: int = 32) -> list:
    cfg, vocab, model = load_run(run_dir, checkpoint)
    samples = load_split(manifest, tokenizer_spec(cfg))
    if samples[0].tokens.dim != model.config.token_dim:
        raise ConfigError(f"tokens have dimension {samples[0].tokens.dim}, "
                          f"model expects {model.config.token_dim}")
    hyps = []
    for lo in range(0, len(samples), batch_size):
        chunk = [s.tokens for s in samples[lo:lo + batch_size]]
        hyps += [vocab.decode(ids) for ids in model.greedy_decode(chunk, max_len=cfg["train.max_decode_len"])]
    return hyps


@dataclass
class ShiftBenchmark:
    """Per-seed test BLEU-4 for two tokenizers under train/test domain shift."""

    kinds: tuple
    bleu: dict  # seed -> {kind: BLEU-4}
    comparisons: list  # ComparisonReport per seed, first kind vs second

    def wins(self) -> int:
        a, b = self.kinds
        return sum(v[a] > v[b] for v in self.bleu.values())

    def means(self) -> dict:
        return {k: sum(v[k] for v in self.bleu.values()) / len(self.bleu) for k in self.kinds}

    def report(self) -> str:
        a, b = self.kinds
        lines = [f"{'seed':<6}{a:>12}{b:>12}"]
        for seed, v in sorted(self.bleu.items()):
            lines.append(f"{seed:<6}{v[a]:>12.2f}{v[b]:>12.2f}")
        m = self.means()
        lines.append(f"{'mean':<6}{m[a]:>12.2f}{m[b]:>12.2f}")
        lines.append(f"{a} above {b} in {self.wins()} of {len(self.bleu)} seeds")
        lines.append("")
        lines.append(significance.comparison_table(self.comparisons).rstrip())
        return "\n".join(lines) + "\n"


def shift_benchmark(workdir, seeds: Sequence[int] = (1, 2, 3, 4, 5),
                    kinds: tuple = ("keypoints", "features"), overrides: Sequence[str] = (),
                    bootstrap_samples: int = 1000, log=None) -> ShiftBenchmark:
    """Train each tokenizer on the reference language and test on a shifted one, per seed.

    The synthetic corpus renders training pairs in language 0 and test pairs
    in language 1 (affine offset and scale).  Keypoint tokens are standardized
    per part, so the shift cancels; raw features carry it into the model.
    """
    workdir = Path(workdir)
    bleu, comps = {}, []
    for seed in seeds:
        base = resolve_config("desk", overrides=[f"synth.seed={seed}", f"train.seed={seed}", *overrides],
                              env={})
        corpus = workdir / f"corpus-{seed}"
        synthcorpus.generate(synth_config(base), corpus)
        hyps, refs = {}, None
        bleu[seed] = {}
        for kind in kinds:
            cfg = dict(base)
            cfg.update({"tokenizer.kind": kind, "data.train": str(corpus / "train.tsv"), "data.dev": "",
                        "data.test": str(corpus / "test.tsv")})
            out = run_training(cfg, workdir / f"run-{seed}-{kind}")
            bleu[seed][kind] = out.report.bleu[3]
            hyps[kind], refs = out.hypotheses, out.references
            if log:
                log(f"seed {seed} {kind}: test BLEU-4 {out.report.bleu[3]:.2f}")
        a, b = kinds
        comps.append(significance.paired_bootstrap(
            significance.SystemOutput(f"{a}-s{seed}", hyps[a]), significance.SystemOutput(f"{b}-s{seed}", hyps[b]),
            refs, samples=bootstrap_samples, seed=seed))
    return ShiftBenchmark(tuple(kinds), bleu, comps)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_synth(args, cfg) -> int:
    corpus = synthcorpus.generate(synth_config(cfg), args.out)
    (Path(args.out) / "synth.txt").write_text(
        format_config({k: v for k, v in cfg.items() if k.startswith("synth.")}))
    counts = {k: sum(1 for s in corpus.samples if s.split == k) for k in synthcorpus.SPLITS}
    print(" ".join(f"{k}={v}" for k, v in counts.items()))
    return 0


def cmd_tokenize(args, cfg) -> int:
    spec = tokenizer_spec(cfg)
    out = Path(args.out)
    (out / "tokens").mkdir(parents=True, exist_ok=True)
    records = []
    for s in load_split(args.manifest, spec):
        path = out / "tokens" / f"{s.sample_id}.sseq"
        save_features(path, s.tokens.tokens)
        records.append(ManifestRecord(s.sample_id, path, None, None, s.sentence))
    write_manifest(out / "manifest.tsv", records)
    print(f"tokenized {len(records)} samples -> {out / 'manifest.tsv'}")
    return 0


def cmd_train(args, cfg) -> int:
    outcome = run_training(cfg, args.run_dir, resume=args.resume, log=None if args.quiet else print)
    if outcome.report is not None:
        print(outcome.report.table(), end="")
    return 0


def cmd_translate(args, cfg) -> int:
    hyps = translate(args.run_dir, args.manifest, args.checkpoint)
    if args.out:
        write_lines(args.out, hyps)
    else:
        for h in hyps:
            print(h)
    return 0


def cmd_evaluate(args, cfg) -> int:
    report = metrics.evaluate(read_lines(args.hyp), read_lines(args.ref), system=args.system,
                              smooth=args.smooth)
    if args.out:
        Path(args.out).write_text(report.keyvalue())
    print(report.table(), end="")
    return 0


def cmd_compare(args, cfg) -> int:
    refs = read_lines(args.ref)
    a = significance.SystemOutput(args.name_a, read_lines(args.hyp_a))
    b = significance.SystemOutput(args.name_b, read_lines(args.hyp_b))
    seed = int(os.environ["SIGNSEQ_SEED"]) if os.environ.get("SIGNSEQ_SEED") else args.seed
    sizes = tuple(int(x) for x in args.sizes.split(","))
    rep = significance.paired_bootstrap(a, b, refs, sizes=sizes, samples=args.samples, seed=seed)
    if args.out:
        Path(args.out).write_text(rep.keyvalue() + "\n" + rep.table())
    print(rep.table(), end="")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="signseq", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"signseq {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--preset", default="desk", help="named defaults: " + ", ".join(PRESETS))
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", dest="overrides")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synth", parents=[common], help="write a synthetic corpus")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen_synth)

    t = sub.add_parser("tokenize", parents=[common], help="materialize token sequences as feature files")
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", required=True)
    t.set_defaults(fn=cmd_tokenize)

    tr = sub.add_parser("train", parents=[common], help="train a model into a run directory")
    tr.add_argument("--run-dir", required=True)
    tr.add_argument("--resume", action="store_true")
    tr.add_argument("--quiet", action="store_true")
    tr.set_defaults(fn=cmd_train)

    tl = sub.add_parser("translate", parents=[common], help="greedy-decode a manifest")
    tl.add_argument("--run-dir", required=True)
    tl.add_argument("--manifest", required=True)
    tl.add_argument("--checkpoint")
    tl.add_argument("--out")
    tl.set_defaults(fn=cmd_translate)

    ev = sub.add_parser("evaluate", parents=[common], help="score hypotheses against references")
    ev.add_argument("--hyp", required=True)
    ev.add_argument("--ref", required=True)
    ev.add_argument("--system", default="system")
    ev.add_argument("--smooth", action="store_true")
    ev.add_argument("--out")
    ev.set_defaults(fn=cmd_evaluate)

    c = sub.add_parser("compare", parents=[common], help="paired bootstrap: is A better than B?")
    c.add_argument("--hyp-a", required=True)
    c.add_argument("--hyp-b", required=True)
    c.add_argument("--ref", required=True)
    c.add_argument("--name-a", default="A")
    c.add_argument("--name-b", default="B")
    c.add_argument("--samples", type=int, default=significance.DEFAULT_SAMPLES)
    c.add_argument("--sizes", default=",".join(map(str, significance.DEFAULT_SIZES)))
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--out")
    c.set_defaults(fn=cmd_compare)
    return p


_CATEGORIES = (
    (ConfigError, "config"),
    (FileNotFoundError, "io"),
    (FormatError, "format"),
    (TokenizationError, "tokenize"),
    (ModelError, "model"),
    (TrainingError, "training"),
    (AutodiffError, "numeric"),
    (MetricError, "metric"),
    (SignificanceError, "significance"),
    (SynthError, "synth"),
    (OSError, "io"),
)


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = resolve_config(args.preset, args.config, args.overrides)
        return args.fn(args, cfg)
    except Exception as exc:  # one machine-parsable line per failure
        for kind, name in _CATEGORIES:
            if isinstance(exc, kind):
                msg = " ".join(str(exc).split())
                print(f"error: {name}: {msg}", file=sys.stderr)
                return 1
        raise


if __name__ == "__main__":
    sys.exit(main())
