"""Command-line entry point.

A config file is a JSON object with optional ``generator`` and ``model``
sections (see README). ``DIFFUMIN_SEED`` overrides the seed of both.
Exit codes: 0 success, 1 validation error, 2 numerical failure.
"""

import argparse
import json
import logging
import os
import sys

from . import data, harness
from .errors import ConfigError, NumericalError, ValidationError
from .model import VARIANTS, ModelConfig, file_hash, load_checkpoint, save_checkpoint

log = logging.getLogger("diffumin")

SEED_ENV = "DIFFUMIN_SEED"


def _env_seed():
    raw = os.environ.get(SEED_ENV)
    if raw is None or raw == "":
        return None
    try:
        return int(raw)
    except ValueError:
        raise ConfigError(f"{SEED_ENV} must be an integer, got {raw!r}") from None


def read_config(path):
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON ({exc.msg})") from None
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    unknown = sorted(set(raw) - {"generator", "model"})
    if unknown:
        raise ConfigError(f"{path}: unknown sections {', '.join(unknown)}")
    return raw


def generator_config(raw, seed=None):
    section = dict(raw.get("generator", {}))
    env = _env_seed()
    for override in (seed, env):
        if override is not None:
            section["seed"] = override
    try:
        return data.GeneratorConfig.from_dict(section)
    except TypeError as exc:
        raise ConfigError(str(exc)) from None


def model_config(raw):
    section = dict(raw.get("model", {}))
    env = _env_seed()
    if env is not None:
        section["seed"] = env
    return ModelConfig.from_dict(section)


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_gen_data(args):
    cfg = generator_config(read_config(args.config), args.seed)
    n = data.generate(cfg, args.output)
    print(f"wrote {n} examples to {args.output} (hash {harness.dataset_hash(args.output)})")


def cmd_train(args):
    cfg = model_config(read_config(args.config))
    examples = data.load_all(args.data, data.limits_for(cfg))

    def progress(step, losses):
        if step % args.log_every == 0:
            log.info("step %d  L=%.5f  L_ctr=%.5f  L_d=%.5f  L_cl=%.5f", step, losses["L"],
                     losses["L_ctr"], losses["L_d"], losses["L_cl"])

    result = harness.train(cfg, examples, data_hash=harness.dataset_hash(args.data),
                           progress=progress)
    digest = save_checkpoint(result.model, args.output)
    manifest = {**result.manifest, "checkpoint": args.output, "checkpoint_sha256": digest,
                "data": args.data, "loss_curves": result.history}
    _write_json(args.output + ".manifest.json", manifest)
    print(f"trained {manifest['steps']} steps; checkpoint {args.output} sha256 {digest}")


def cmd_eval(args):
    model = load_checkpoint(args.checkpoint)
    examples = data.load_all(args.data, data.limits_for(model.config))
    metrics = harness.evaluate(model, examples, args.baseline_auc)
    out = {**metrics.to_dict(), "checkpoint": args.checkpoint,
           "checkpoint_sha256": file_hash(args.checkpoint),
           "dataset_hash": harness.dataset_hash(args.data)}
    print(json.dumps(out, indent=2, sort_keys=True))
    if args.json:
        _write_json(args.json, out)


def _parse_fraction(text):
    if "/" in text:
        num, den = text.split("/", 1)
        value = float(num) / float(den)
    else:
        value = float(text)
    if not 0 < value < 1:
        raise ConfigError(f"test fraction must lie strictly between 0 and 1, got {text}")
    return value


def cmd_ablate(args):
    cfg = model_config(read_config(args.config))
    variants = [v for v in args.variants.split(",") if v]
    bad = [v for v in variants if v not in VARIANTS]
    if bad:
        raise ConfigError(f"unknown variants {', '.join(bad)}; choose from {', '.join(VARIANTS)}")
    seeds = [int(s) for s in args.seeds.split(",") if s]
    env = _env_seed()
    if env is not None:
        seeds = [env]
    examples = data.load_all(args.data, data.limits_for(cfg))
    n_test = int(round(len(examples) * _parse_fraction(args.test_fraction)))
    train_ex, test_ex = data.split(examples, len(examples) - n_test)
    result = harness.ablate(cfg, train_ex, test_ex, variants, seeds,
                            progress=lambda v, s, a: log.info("%s seed %d: AUC %.4f", v, s, a))
    result.update(dataset_hash=harness.dataset_hash(args.data), n_train=len(train_ex),
                  n_test=len(test_ex), config=cfg.to_dict())
    print(harness.format_table(result))
    if args.json:
        _write_json(args.json, result)


def cmd_grad_check(args):
    raw = read_config(args.config)
    overrides = raw.get("model", {})
    variants = args.variants.split(",") if args.variants else list(VARIANTS)
    worst = 0.0
    for tag in variants:
        cfg = harness.micro_config(tag, **{k: v for k, v in overrides.items() if k != "variant"})
        model = harness.DiffuMIN(cfg)
        report = harness.grad_check(model, harness.micro_batch(cfg), h=args.h)
        err = max(r.rel_error for r in report)
        worst = max(worst, err)
        print(f"{tag:5s} max relative error {err:.3e} over {len(report)} parameter groups")
    if worst >= args.tolerance:
        raise NumericalError(f"gradient check failed: {worst:.3e} >= {args.tolerance}")


def cmd_dump_embeddings(args):
    model = load_checkpoint(args.checkpoint)
    examples = data.load_all(args.data, data.limits_for(model.config))
    n = harness.dump_embeddings(model, examples, args.output)
    print(f"wrote {n} records to {args.output}")


def build_parser():
    p = argparse.ArgumentParser(prog="diffumin", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("gen-data", help="write a synthetic JSONL dataset")
    s.add_argument("config")
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("train", help="train one epoch and save a checkpoint")
    s.add_argument("config")
    s.add_argument("--data", required=True)
    s.add_argument("-o", "--output", required=True)
    s.add_argument("--log-every", type=int, default=20)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a dataset with a checkpoint")
    s.add_argument("checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("--baseline-auc", type=float)
    s.add_argument("--json")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("ablate", help="train and score several variants")
    s.add_argument("config")
    s.add_argument("--data", required=True)
    s.add_argument("--variants", default="Full,A,B,C,D,E")
    s.add_argument("--seeds", default="0,1,2")
    s.add_argument("--test-fraction", default="1/6")
    s.add_argument("--json")
    s.set_defaults(func=cmd_ablate)

    s = sub.add_parser("grad-check", help="finite-difference gradient check on a micro model")
    s.add_argument("config")
    s.add_argument("--variants")
    s.add_argument("--h", type=float, default=1e-5)
    s.add_argument("--tolerance", type=float, default=1e-4)
    s.set_defaults(func=cmd_grad_check)

    s = sub.add_parser("dump-embeddings", help="write per-example channels and interests")
    s.add_argument("checkpoint")
    s.add_argument("--data", required=True)
    s.add_argument("-o", "--output", required=True)
    s.set_defaults(func=cmd_dump_embeddings)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
