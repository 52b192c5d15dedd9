"""Command-line entry point: gen-data | pretrain | adapt | eval | inspect-augment.

Settings resolve as defaults < config file < QADA_SEED (seed only) < flags.
The resolved config is printed to stderr as a config file before any work,
so stdout stays machine-readable (``eval`` prints a single JSON object).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import MISSING, asdict, dataclass, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import torch

from .adapt import KernelConfig
from .augment import AttentiveCutoff, AugmentConfig, sample_question_hulls
from .corpus import DataError, GenConfig, Vocab, build_neighborhood, generate_domain_pair, load_dataset, read_lexicon, save_dataset, split_dev
from .model import ModelConfig, build_model, encode_examples, load_checkpoint, save_checkpoint
from .numerics import Rng
from .pipeline import AdaptConfig, ConfigError, adapt, evaluate, pretrain

log = logging.getLogger("qada")

EXIT_OK, EXIT_USAGE, EXIT_CONFIG = 0, 1, 2
COMMANDS = ("gen-data", "pretrain", "adapt", "eval", "inspect-augment")


@dataclass
class RunConfig:
    seed: int = 0
    out_dir: str = "runs"
    # data and artefacts
    source: str = ""
    target: str = ""
    dev_source: str = ""
    dev_target: str = ""
    data: str = ""
    vocab: str = ""
    lexicon: str = ""
    checkpoint: str = ""
    dump_features: bool = False
    n_examples: int = 3
    # generator
    gen_source: int = 200
    gen_target: int = 200
    # model
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 128
    max_len: int = 192
    max_answer_len: int = 12
    dropout: float = 0.1
    # optimisation and adaptation
    tau: float = 0.6
    lam: float = 0.0005
    epochs_pretrain: int = 2
    epochs_adapt: int = 4
    n_source: int = 12
    n_target: int = 12
    batch_size_pretrain: int = 12
    lr_pretrain: float = 3e-5
    lr_adapt: float = 2e-5
    warmup: float = 0.1
    weight_decay: float = 0.01
    augment_domains: str = "both"
    # augmentation
    zeta: float = 0.4
    phi_cut: float = 0.2
    alpha_original: float = 1.0
    decay: float = 0.1
    # contrastive kernel
    bandwidth: str = "median"
    fixed_sigma: float = 1.0

    def model_config(self, vocab_size: int) -> ModelConfig:
        return ModelConfig(vocab_size, **{f.name: getattr(self, f.name) for f in fields(ModelConfig) if f.name != "vocab_size"})

    def adapt_config(self) -> AdaptConfig:
        aug = AugmentConfig(self.zeta, self.phi_cut, self.alpha_original, self.decay)
        kernel = KernelConfig(self.bandwidth, self.fixed_sigma)
        names = [f.name for f in fields(AdaptConfig) if f.name not in ("augment", "kernel")]
        return AdaptConfig(**{n: getattr(self, n) for n in names}, augment=aug, kernel=kernel)

    def to_toml(self) -> str:
        lines = []
        for key, value in asdict(self).items():
            if isinstance(value, bool):
                text = "true" if value else "false"
            elif isinstance(value, str):
                text = json.dumps(value)
            else:
                text = repr(value)
            lines.append(f"{key} = {text}")
        return "\n".join(lines) + "\n"


# paths each command needs; checked for existence before any work
REQUIRED = {
    "gen-data": (),
    "pretrain": ("source", "vocab"),
    "adapt": ("checkpoint", "source", "target"),
    "eval": ("checkpoint", "data"),
    "inspect-augment": ("checkpoint", "data"),
}
OPTIONAL_PATHS = ("dev_source", "dev_target", "lexicon")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise argparse.ArgumentTypeError(f"expected a boolean, got {text!r}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="qada", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=COMMANDS)
    parser.add_argument("--config", help="TOML file of flat key = value settings")
    parser.add_argument("-v", "--verbose", action="store_true")
    for f in fields(RunConfig):
        kind = {"int": int, "float": float, "bool": _parse_bool}.get(f.type, str)
        flag = "--" + f.name.replace("_", "-")
        parser.add_argument(flag, dest=f.name, type=kind, default=None, metavar=f.name.upper())
    return parser


def resolve_config(args: argparse.Namespace, environ=os.environ) -> RunConfig:
    values = {}
    if args.config:
        path = Path(args.config)
        if not path.is_file():
            raise ConfigError("config", f"file not found: {path}")
        try:
            values = tomllib.loads(path.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as err:
            raise ConfigError("config", f"cannot parse {path}: {err}") from err
    known = {f.name: f for f in fields(RunConfig)}
    for key, value in values.items():
        if key not in known:
            raise ConfigError(key, "unknown config key")
        values[key] = _coerce(key, value, known[key])
    if environ.get("QADA_SEED"):
        try:
            values["seed"] = int(environ["QADA_SEED"])
        except ValueError:
            raise ConfigError("seed", f"QADA_SEED must be an integer, got {environ['QADA_SEED']!r}") from None
    for name in known:
        flag = getattr(args, name, None)
        if flag is not None:
            values[name] = flag
    return RunConfig(**values)


def _coerce(key, value, f):
    default = f.default if f.default is not MISSING else None
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(key, f"expected a boolean, got {value!r}")
        return value
    if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if type(value) is not type(default):
        raise ConfigError(key, f"expected {type(default).__name__}, got {value!r}")
    return value


def _check_paths(command: str, cfg: RunConfig) -> None:
    for name in REQUIRED[command]:
        if not getattr(cfg, name):
            raise ConfigError(name, f"required by {command}")
    for name in REQUIRED[command] + OPTIONAL_PATHS:
        value = getattr(cfg, name)
        if value and not Path(value).is_file():
            raise ConfigError(name, f"file not found: {value}")


# --- commands -----------------------------------------------------------------------


def cmd_gen_data(cfg: RunConfig, out: Path) -> None:
    gen = GenConfig(n_source=cfg.gen_source, n_target=cfg.gen_target)
    data_rng, split_rng = Rng(cfg.seed).split(2)
    pair = generate_domain_pair(gen, data_rng)
    train, dev = split_dev(pair.source, gen.dev_fraction, split_rng)
    save_dataset(out / "source_train.jsonl", train)
    save_dataset(out / "source_dev.jsonl", dev)
    save_dataset(out / "target.jsonl", pair.target)
    save_dataset(out / "target_unlabeled.jsonl", pair.target_unlabeled)
    pair.vocab.save(out / "vocab.txt")
    (out / "lexicon.txt").write_text("".join(f"{a} {b}\n" for a, b in pair.lexicon), encoding="utf-8")
    print(json.dumps({"source_train": len(train), "source_dev": len(dev), "target": len(pair.target), "vocab": len(pair.vocab)}))


def _vocab_meta(vocab: Vocab) -> dict:
    return {"vocab": vocab.itos}


def _load_model(cfg: RunConfig):
    model, meta = load_checkpoint(cfg.checkpoint)
    if "vocab" not in meta:
        raise DataError(f"{cfg.checkpoint}: checkpoint carries no vocabulary")
    vocab = Vocab(meta["vocab"][4:])
    if vocab.itos != meta["vocab"]:
        raise DataError(f"{cfg.checkpoint}: malformed vocabulary")
    return model, vocab, meta


def _dataset(path: str, vocab: Vocab):
    return load_dataset(path, vocab) if path else None


def cmd_pretrain(cfg: RunConfig, out: Path) -> None:
    vocab = Vocab.load(cfg.vocab)
    source = load_dataset(cfg.source, vocab)
    dev = _dataset(cfg.dev_source, vocab)
    config = cfg.adapt_config()
    model = build_model(cfg.model_config(len(vocab)), cfg.seed)
    result = pretrain(model, source, config, dev=dev)
    meta = _vocab_meta(vocab)
    save_checkpoint(out / "pretrained.ckpt", model, meta)
    with open(out / "metrics.jsonl", "w", encoding="utf-8") as fh:
        for epoch, loss in enumerate(result.epoch_losses):
            fh.write(json.dumps({"phase": "pretrain", "epoch": epoch, "ce": loss}) + "\n")
    if dev:
        model.load_state_dict(result.best_state)
        save_checkpoint(out / "pretrained_best.ckpt", model, {**meta, "best_dev_f1": result.best_dev_f1})
    print(json.dumps({"epoch_losses": result.epoch_losses, "best_dev_f1": result.best_dev_f1}))


def cmd_adapt(cfg: RunConfig, out: Path) -> None:
    model, vocab, meta = _load_model(cfg)
    source = load_dataset(cfg.source, vocab)
    # gold answers in the target file, if any, are dropped
    target = [ex.unlabeled() for ex in load_dataset(cfg.target, vocab)]
    neighborhood = build_neighborhood(vocab, read_lexicon(cfg.lexicon or None), alpha_original=cfg.alpha_original, decay=cfg.decay)
    config = cfg.adapt_config()
    feature_fh = open(out / "features.jsonl", "w", encoding="utf-8") if cfg.dump_features else None
    try:
        with open(out / "metrics.jsonl", "w", encoding="utf-8") as metrics_fh:
            result = adapt(model, source, target, neighborhood, config, _dataset(cfg.dev_source, vocab),
                           _dataset(cfg.dev_target, vocab), metrics_fh, feature_fh)
    finally:
        if feature_fh is not None:
            feature_fh.close()
    save_checkpoint(out / "adapted.ckpt", model, {"vocab": meta["vocab"]})
    last = result.reports[-1].to_json() if result.reports else "{}"
    print(last)


def cmd_eval(cfg: RunConfig, out: Path | None) -> None:
    model, vocab, _ = _load_model(cfg)
    metrics = evaluate(model, load_dataset(cfg.data, vocab))
    print(json.dumps({"em": metrics["em"], "f1": metrics["f1"]}))


def cmd_inspect_augment(cfg: RunConfig, out: Path | None) -> None:
    model, vocab, _ = _load_model(cfg)
    examples = load_dataset(cfg.data, vocab)[: cfg.n_examples]
    if not examples:
        raise DataError(f"{cfg.data}: no usable examples")
    aug = cfg.adapt_config().augment
    neighborhood = build_neighborhood(vocab, read_lexicon(cfg.lexicon or None), alpha_original=aug.alpha_original, decay=aug.decay)
    rngs = Rng(cfg.seed).split(len(examples))
    batch = encode_examples(examples, model.cfg.max_len)
    hulls = [sample_question_hulls(ex.question_ids, neighborhood, aug, rng) for ex, rng in zip(examples, rngs)]
    cutoff = AttentiveCutoff(batch.context_spans, aug.phi_cut, rngs) if aug.phi_cut > 0 else None
    model.eval()
    with torch.no_grad():
        model(batch, cutoff)
    for b, ex in enumerate(examples):
        cs = batch.context_spans[b][0]
        plan = [layer[b] for layer in cutoff.history] + [None] if cutoff else [None] * model.cfg.n_layers
        print(json.dumps({
            "id": ex.id,
            "question": [vocab.token(t) for t in ex.question_ids],
            "overrides": [
                {"position": h.position, "vertices": [vocab.token(v) for v in h.vertices], "alphas": h.alphas, "eta": [float(x) for x in h.eta]}
                for h in hulls[b]
            ],
            # context-token indices, half open
            "cutoff": [None if s is None else [s[0] - cs, s[1] - cs] for s in plan],
        }))


HANDLERS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "adapt": cmd_adapt,
    "eval": cmd_eval,
    "inspect-augment": cmd_inspect_augment,
}


def run(argv=None, environ=os.environ) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(err, file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(args, environ)
        # validate every model and pipeline setting before any work
        cfg.adapt_config()
        cfg.model_config(vocab_size=1)
        _check_paths(args.command, cfg)
        print(f"# resolved config for {args.command}\n{cfg.to_toml()}", file=sys.stderr, flush=True)
        out = None
        if args.command in ("gen-data", "pretrain", "adapt"):
            out = Path(cfg.out_dir)
            out.mkdir(parents=True, exist_ok=True)
            (out / "config.toml").write_text(cfg.to_toml(), encoding="utf-8")
        HANDLERS[args.command](cfg, out)
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, ValueError, OSError, KeyError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    return EXIT_OK


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
