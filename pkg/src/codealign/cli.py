"""Command-line driver: generate, embed, align, refine, evaluate, benchmark, pipeline.

Settings come from (lowest to highest precedence) built-in defaults, an INI
style config file, and ``--key value`` flags. ``--section.key`` always works;
a bare ``--key`` resolves to the first section of the subcommand that has it.
"""
from __future__ import annotations

import argparse
import configparser
import dataclasses
import logging
import os
import shutil
import sys
from pathlib import Path

import numpy as np

from . import __version__
from . import align as A
from . import refine as R
from .benchmark import METHODS, BenchmarkConfig, code_frequencies, run_benchmark
from .corpus import (
    GeneratorConfig, generate_synthetic, load_corpus, load_ontology, load_truth, save_corpus,
    save_ontology, save_truth, split_corpus,
)
from .embedding import GloveConfig, build_cooccurrence, load_embedding, normalize_embedding, save_embedding, train_glove
from .eval import mapping_report, task_report
from .numerics import load_matrix, save_matrix
from .seeds import derive_seed

CONFIG_ENV = "CODEALIGN_CONFIG"
log = logging.getLogger("codealign")


@dataclasses.dataclass(frozen=True)
class RunSection:
    seed: int = 0
    workdir: str = "run"


@dataclasses.dataclass(frozen=True)
class EmbedSection:
    normalize: bool = True


@dataclasses.dataclass(frozen=True)
class TaskSection:
    task: str = "mortality"
    backbone: str = "mlp"
    label_budget: int = 100
    split: tuple = (0.7, 0.1, 0.2)


@dataclasses.dataclass(frozen=True)
class RefineSection:
    enabled: bool = True  # off for black-box backbones: the step-1 mapping is final


@dataclasses.dataclass(frozen=True)
class EvaluateSection:
    k: int = 10
    n_bootstrap: int = 1000


@dataclasses.dataclass(frozen=True)
class BenchmarkSection:
    seeds: tuple = (0, 1, 2)
    tasks: tuple = ("mortality",)
    methods: tuple = METHODS
    output: str = "benchmark.csv"


def _no_seed(cls):
    return [f for f in dataclasses.fields(cls) if f.name != "seed"]


# section name -> list of (dataclass, fields) contributing keys
SECTIONS = {
    "run": [(RunSection, dataclasses.fields(RunSection))],
    "generate": [(GeneratorConfig, _no_seed(GeneratorConfig))],
    "embed": [(GloveConfig, _no_seed(GloveConfig)), (EmbedSection, dataclasses.fields(EmbedSection))],
    "align": [(A.AlignConfig, _no_seed(A.AlignConfig))],
    "task": [(TaskSection, dataclasses.fields(TaskSection)), (R.TrainConfig, _no_seed(R.TrainConfig))],
    "refine": [(R.RefineConfig, _no_seed(R.RefineConfig)), (RefineSection, dataclasses.fields(RefineSection))],
    "evaluate": [(EvaluateSection, dataclasses.fields(EvaluateSection))],
    "benchmark": [(BenchmarkSection, dataclasses.fields(BenchmarkSection))],
}

SECTION_DEFAULTS = {
    "embed": {"d": 32, "epochs": 300, "batch_size": 256},
    "align": {"k": 100, "kmeans_ks": (2, 4, 16, 64)},
}

COMMANDS = {
    "generate": ["generate", "run"],
    "embed": ["embed", "run"],
    "align": ["align", "run"],
    "refine": ["refine", "task", "run"],
    "evaluate": ["evaluate", "task", "run"],
    "benchmark": ["benchmark", "generate", "embed", "align", "refine", "task", "evaluate", "run"],
    "pipeline": ["generate", "embed", "align", "refine", "task", "evaluate", "run"],
}

ARTIFACTS = {
    "source_corpus": "source.jsonl",
    "target_corpus": "target.jsonl",
    "source_ontology": "source_ontology.tsv",
    "target_ontology": "target_ontology.tsv",
    "truth": "truth.tsv",
    "source_embedding": "source_embedding.txt",
    "target_embedding": "target_embedding.txt",
    "step1_mapping": "mapping_step1.txt",
    "anchors": "anchors.tsv",
    "source_model": "source_model.txt",
    "mapping": "mapping.txt",
    "refine_log": "refine_log.csv",
    "mapping_report": "mapping_report.csv",
    "mapping_pairs": "mapping_pairs.csv",
    "task_report": "task_report.csv",
}


class StageError(Exception):
    def __init__(self, stage, exc):
        super().__init__(str(exc))
        self.stage, self.exc = stage, exc


class UsageError(Exception):
    pass


def _field_type(f):
    default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
    return type(default), default


def _parse_value(text: str, kind, default):
    text = text.strip()
    if kind is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if kind is tuple:
        items = [x.strip() for x in text.split(",") if x.strip()]
        if default:
            return tuple(type(default[0])(x) for x in items)
        return tuple(int(x) if x.lstrip("-").isdigit() else x for x in items)
    return kind(text)


def _keys(section):
    for cls, fields in SECTIONS[section]:
        for f in fields:
            yield f.name, f


def _defaults():
    out = {}
    for section in SECTIONS:
        vals = {}
        for name, f in _keys(section):
            vals[name] = _field_type(f)[1]
        vals.update(SECTION_DEFAULTS.get(section, {}))
        out[section] = vals
    return out


def load_settings(config_path, overrides: dict) -> dict:
    """Merge defaults, the config file and flag overrides into {section: {key: value}}."""
    settings = _defaults()
    if config_path:
        path = Path(config_path)
        if not path.is_file():
            raise UsageError(f"config file not found: {path}")
        cp = configparser.ConfigParser(interpolation=None)
        cp.optionxform = str
        try:
            cp.read(path, encoding="utf-8")
        except configparser.Error as exc:
            raise UsageError(f"malformed config {path}: {exc}".replace("\n", " ")) from None
        for section in cp.sections():
            if section not in SECTIONS:
                raise UsageError(f"unknown config section [{section}]")
            known = dict(_keys(section))
            for key, raw in cp.items(section):
                if key not in known:
                    raise UsageError(f"unknown key {key!r} in section [{section}]")
                kind, default = _field_type(known[key])
                try:
                    settings[section][key] = _parse_value(raw, kind, default)
                except ValueError as exc:
                    raise UsageError(f"[{section}] {key}: {exc}") from None
    for (section, key), value in overrides.items():
        settings[section][key] = value
    return settings


def _build(cls, values: dict, seed: int | None = None, **extra):
    names = {f.name for f in dataclasses.fields(cls)}
    kw = {k: v for k, v in values.items() if k in names}
    if seed is not None and "seed" in names:
        kw["seed"] = seed
    kw.update(extra)
    return cls(**kw)


class Context:
    """Resolved settings plus artifact paths for one invocation."""

    def __init__(self, settings):
        self.s = settings
        self.seed = int(settings["run"]["seed"])
        self.workdir = Path(settings["run"]["workdir"])

    def path(self, name) -> Path:
        return self.workdir / ARTIFACTS[name]

    def need(self, *names):
        missing = [str(self.path(n)) for n in names if not self.path(n).exists()]
        if missing:
            raise FileNotFoundError(f"missing input artifact(s): {', '.join(missing)}")


# ----------------------------------------------------------------- stages

def stage_generate(ctx: Context):
    gen = _build(GeneratorConfig, ctx.s["generate"], derive_seed(ctx.seed, "generate"))
    source, target, onto_s, onto_t, truth = generate_synthetic(gen)
    ctx.workdir.mkdir(parents=True, exist_ok=True)
    save_corpus(source, ctx.path("source_corpus"))
    save_corpus(target, ctx.path("target_corpus"))
    save_ontology(onto_s, ctx.path("source_ontology"))
    save_ontology(onto_t, ctx.path("target_ontology"))
    save_truth(truth, ctx.path("truth"))


def _corpora(ctx):
    ctx.need("source_corpus", "target_corpus")
    return load_corpus(ctx.path("source_corpus"), "source"), load_corpus(ctx.path("target_corpus"), "target")


def stage_embed(ctx: Context):
    source, target = _corpora(ctx)
    for role, corpus in (("source", source), ("target", target)):
        gc = _build(GloveConfig, ctx.s["embed"], derive_seed(ctx.seed, "embed", role))
        emb = train_glove(build_cooccurrence(corpus), gc)
        if ctx.s["embed"]["normalize"]:
            emb = normalize_embedding(emb)
        save_embedding(emb, ctx.path(f"{role}_embedding"))


def _embeddings(ctx):
    ctx.need("source_embedding", "target_embedding")
    return load_embedding(ctx.path("source_embedding")), load_embedding(ctx.path("target_embedding"))


def stage_align(ctx: Context):
    emb_s, emb_t = _embeddings(ctx)
    cfg = _build(A.AlignConfig, ctx.s["align"], derive_seed(ctx.seed, "align", "step1"))
    counts_t = counts_s = None
    if ctx.path("source_corpus").exists() and ctx.path("target_corpus").exists():
        source, target = _corpora(ctx)
        counts_t, counts_s = code_frequencies(target, emb_t.codes), code_frequencies(source, emb_s.codes)
    onto_t = onto_s = None
    if cfg.grouping == "ontology":
        ctx.need("source_ontology", "target_ontology")
        onto_s, onto_t = load_ontology(ctx.path("source_ontology")), load_ontology(ctx.path("target_ontology"))
    result = A.ontology_align(emb_t, emb_s, onto_t, onto_s, cfg, counts_t, counts_s)
    save_matrix(result.W, ctx.path("step1_mapping"))
    A.save_anchors(result.anchors, ctx.path("anchors"))


def _task_splits(ctx, emb_s, emb_t):
    source, target = _corpora(ctx)
    ts = ctx.s["task"]
    splits_s = split_corpus(source, ts["split"], derive_seed(ctx.seed, "split", "source"))
    splits_t = split_corpus(target, ts["split"], derive_seed(ctx.seed, "split", "target"))
    order = np.random.default_rng(derive_seed(ctx.seed, "labels")).permutation(len(splits_t[0].patients))
    keep = sorted(order[:ts["label_budget"]])
    labelled = splits_t[0].subset([splits_t[0].patients[i].id for i in keep])
    task = ts["task"]
    data = {
        "s_train": R.task_data(splits_s[0], task, emb_s.codes),
        "s_val": R.task_data(splits_s[1], task, emb_s.codes),
        "t_val": R.task_data(splits_t[1], task, emb_t.codes),
        "t_test": R.task_data(splits_t[2], task, emb_t.codes),
        "t_lab": R.task_data(labelled, task, emb_t.codes),
    }
    return data


def _source_model(ctx, emb_s, data, reuse=True):
    """The task model trained on labelled source data; ``refine`` always retrains it."""
    ts = ctx.s["task"]
    if reuse and ctx.path("source_model").exists():
        return R.Backbone.load(ctx.path("source_model"), ts["backbone"], ts["task"])
    tc = _build(R.TrainConfig, ts, derive_seed(ctx.seed, "source_model", ts["task"]))
    model = R.train_backbone_fixed(data["s_train"], data["s_val"], emb_s.vectors, ts["backbone"], tc)
    model.save(ctx.path("source_model"))
    return model


def stage_refine(ctx: Context):
    emb_s, emb_t = _embeddings(ctx)
    ctx.need("step1_mapping")
    W1 = load_matrix(ctx.path("step1_mapping"))
    if not ctx.s["refine"]["enabled"]:
        shutil.copyfile(ctx.path("step1_mapping"), ctx.path("mapping"))
        return
    data = _task_splits(ctx, emb_s, emb_t)
    model = _source_model(ctx, emb_s, data, reuse=False)
    rc = _build(R.RefineConfig, ctx.s["refine"], derive_seed(ctx.seed, "full", ctx.s["task"]["task"]))
    result = R.refine_mapping(W1, emb_t.vectors, emb_s.vectors, model, data["t_lab"], data["t_val"], rc)
    save_matrix(result.W, ctx.path("mapping"))
    result.write_log(ctx.path("refine_log"))


def stage_evaluate(ctx: Context):
    emb_s, emb_t = _embeddings(ctx)
    ctx.need("truth")
    truth = load_truth(ctx.path("truth"), emb_t.codes, emb_s.codes)
    mapping = "mapping" if ctx.path("mapping").exists() else "step1_mapping"
    ctx.need(mapping)
    W = load_matrix(ctx.path(mapping))
    ev = ctx.s["evaluate"]
    rep = mapping_report(W, emb_t, emb_s, truth, ev["k"])
    ctx.path("mapping_pairs").write_text(rep.to_csv(), encoding="utf-8")
    ctx.path("mapping_report").write_text(
        f"metric,value\nsimilarity,{rep.similarity:.10f}\nhit_at_{ev['k']},{rep.hit_at_10:.10f}\n", encoding="utf-8")
    data = _task_splits(ctx, emb_s, emb_t)
    model = _source_model(ctx, emb_s, data)
    test = data["t_test"]
    task = ctx.s["task"]["task"]
    prob = model.predict_proba(test, emb_t.vectors @ W)
    metrics = task_report(task, prob, test.labels, test.patients, ev["n_bootstrap"], derive_seed(ctx.seed, "bootstrap", task))
    lines = ["task,metric,mean,std"] + [f"{task},{m},{v[0]:.10f},{v[1]:.10f}" for m, v in metrics.items()]
    ctx.path("task_report").write_text("\n".join(lines) + "\n", encoding="utf-8")


def stage_benchmark(ctx: Context):
    s = ctx.s
    bs = s["benchmark"]
    cfg = BenchmarkConfig(
        seeds=tuple(int(x) for x in bs["seeds"]),
        generator=_build(GeneratorConfig, s["generate"]),
        glove=_build(GloveConfig, s["embed"]),
        align=_build(A.AlignConfig, s["align"]),
        refine=_build(R.RefineConfig, s["refine"]),
        train=_build(R.TrainConfig, s["task"]),
        label_budget=s["task"]["label_budget"],
        split=s["task"]["split"],
        tasks=tuple(bs["tasks"]),
        backbone=s["task"]["backbone"],
        n_bootstrap=s["evaluate"]["n_bootstrap"],
        methods=tuple(bs["methods"]),
    )
    result = run_benchmark(cfg)
    ctx.workdir.mkdir(parents=True, exist_ok=True)
    result.write_csv(ctx.workdir / bs["output"])


STAGES = {
    "generate": stage_generate,
    "embed": stage_embed,
    "align": stage_align,
    "refine": stage_refine,
    "evaluate": stage_evaluate,
    "benchmark": stage_benchmark,
}


def run(command: str, settings: dict) -> None:
    ctx = Context(settings)
    stages = ["generate", "embed", "align", "refine", "evaluate"] if command == "pipeline" else [command]
    for stage in stages:
        try:
            STAGES[stage](ctx)
        except (ValueError, KeyError, OSError, RuntimeError, ArithmeticError) as exc:
            raise StageError(stage, exc) from exc
        log.info("stage %s done", stage)


# ----------------------------------------------------------------- argument parsing

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(2, f"{self.prog}: usage error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="codealign", description="Map codes between two medical coding systems without paired data.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    helps = {
        "generate": "write a synthetic source/target corpus pair with ontologies and ground truth",
        "embed": "train GloVe embeddings for both corpora",
        "align": "step 1: ontology-guided orthogonal mapping",
        "refine": "step 2: adversarial and task-guided refinement of the mapping",
        "evaluate": "mapping accuracy and downstream task metrics",
        "benchmark": "all methods and ablations over several seeds",
        "pipeline": "generate, embed, align, refine and evaluate in one go",
    }
    for command, sections in COMMANDS.items():
        p = sub.add_parser(command, help=helps[command], description=helps[command])
        p.add_argument("--config", help=f"INI config file (default: ${CONFIG_ENV} if set)")
        p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
        seen = set()
        for section in sections:
            group = p.add_argument_group(f"[{section}]")
            for key, f in _keys(section):
                names = [f"--{section}.{key}"]
                if key not in seen:
                    names.insert(0, f"--{key}")
                    seen.add(key)
                group.add_argument(*names, dest=f"{section}.{key}", metavar=key.upper(), default=None)
    return parser


def _overrides(args) -> dict:
    out = {}
    for dest, raw in vars(args).items():
        if raw is None or "." not in dest:
            continue
        section, key = dest.split(".", 1)
        kind, default = _field_type(dict(_keys(section))[key])
        try:
            out[(section, key)] = _parse_value(raw, kind, default)
        except ValueError as exc:
            raise UsageError(f"--{key}: {exc}") from None
    return out


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help(sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(name)s: %(message)s", stream=sys.stderr)
    try:
        settings = load_settings(args.config or os.environ.get(CONFIG_ENV), _overrides(args))
        run(args.command, settings)
    except UsageError as exc:
        print(f"codealign: usage error: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        msg = str(exc).replace("\n", " ")
        print(f"codealign: error stage={exc.stage} type={type(exc.exc).__name__} message={msg}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
