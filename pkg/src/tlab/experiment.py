"""Experiment orchestration: config schema, seed streams, per-seed runs.

One experiment = one strategy evaluated over an epsilon grid for a list
of seeds.  Every random decision (domain rendering, parameter init,
batch shuffling, splits) draws from a stream derived as
SeedSequence((seed, ROLE)), so a seed fully determines the run and two
runs with equal configs are bit-identical, checkpoints included.

The config is a plain JSON object; ``parse_config`` validates it and
reports the offending field by name.  ``resolved_config`` emits the
defaults-filled dict embedded in report.json, which is itself a valid
config that reproduces the run.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field

import numpy as np

from .data import load_idx, partition, resolve_style, subsample, synth_domain
from .metrics import compile_report, gradient_norm_histogram
from .model import save_checkpoint
from .training import (
    ConfigurationError,
    TrainConfig,
    run_common_init,
    run_finetune,
    run_scratch,
)

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "SeedRun",
    "derive_seed",
    "parse_config",
    "resolved_config",
    "build_domain",
    "run_seed",
    "ROLE_STREAMS",
]

STRATEGIES = ("scratch", "ft", "common_init")

# role codes mixed into SeedSequence((seed, code)); never reuse a code
ROLE_STREAMS = {
    "data_a": 0x11, "data_b": 0x12, "data_c": 0x13, "data_test": 0x14,
    "train_a": 0x21, "train_b": 0x22, "train_c": 0x23,
}


class ConfigError(ValueError):
    """A config field is missing, mistyped, or out of range."""


def derive_seed(seed, role):
    """Stable per-role integer seed derived from the experiment seed."""
    code = ROLE_STREAMS[role]
    return int(np.random.SeedSequence((int(seed), code)).generate_state(1)[0])


@dataclass
class ExperimentConfig:
    strategy: str
    domain_b: dict
    eps_grid: list
    seeds: list
    domain_a: dict = None
    domain_c: dict = None
    domain_test: dict = None
    num_classes: int = 10
    test_n: int = 1000
    train: dict = field(default_factory=dict)
    train_a: dict = field(default_factory=dict)
    train_b: dict = field(default_factory=dict)
    train_c: dict = field(default_factory=dict)
    clip_to_valid_range: bool = True
    hist_bins: int = 50


_TRAIN_FIELDS = {"learning_rate", "weight_decay", "momentum", "batch_size",
                 "max_epochs", "patience", "val_fraction"}


def _check_domain(spec, name):
    if not isinstance(spec, dict):
        raise ConfigError(f"field '{name}': expected an object, got "
                          f"{type(spec).__name__}")
    has_style = "style" in spec
    has_idx = "idx_images" in spec or "idx_labels" in spec
    if has_style == has_idx:
        raise ConfigError(
            f"field '{name}': give either 'style' (synthetic) or "
            f"'idx_images'+'idx_labels' (files), not both or neither")
    if has_style:
        if "n" not in spec:
            raise ConfigError(f"field '{name}.n': required for synthetic "
                              f"domains")
        if not isinstance(spec["n"], int) or spec["n"] < 1:
            raise ConfigError(f"field '{name}.n': must be a positive int, "
                              f"got {spec['n']!r}")
        try:
            resolve_style(spec["style"])
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"field '{name}.style': {exc}") from None
    else:
        for key in ("idx_images", "idx_labels"):
            if key not in spec:
                raise ConfigError(f"field '{name}.{key}': required for IDX "
                                  f"domains")
        if "n" in spec and (not isinstance(spec["n"], int) or spec["n"] < 1):
            raise ConfigError(f"field '{name}.n': must be a positive int, "
                              f"got {spec['n']!r}")
    unknown = set(spec) - {"style", "n", "idx_images", "idx_labels"}
    if unknown:
        raise ConfigError(f"field '{name}': unknown keys {sorted(unknown)}")


def _check_train(spec, name):
    if not isinstance(spec, dict):
        raise ConfigError(f"field '{name}': expected an object")
    unknown = set(spec) - _TRAIN_FIELDS
    if unknown:
        raise ConfigError(f"field '{name}': unknown keys {sorted(unknown)}")
    try:
        TrainConfig(**spec)
    except (ConfigurationError, TypeError) as exc:
        raise ConfigError(f"field '{name}': {exc}") from None


def parse_config(raw):
    """Validate a raw dict into an ExperimentConfig.

    Raises ConfigError naming the first offending field.
    """
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a JSON object")
    known = {f for f in ExperimentConfig.__dataclass_fields__}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f"unknown config fields {sorted(unknown)}")
    for req in ("strategy", "domain_b", "eps_grid", "seeds"):
        if req not in raw:
            raise ConfigError(f"field '{req}': required")
    if raw["strategy"] not in STRATEGIES:
        raise ConfigError(f"field 'strategy': must be one of "
                          f"{list(STRATEGIES)}, got {raw['strategy']!r}")
    cfg = ExperimentConfig(**raw)
    if not isinstance(cfg.num_classes, int) or cfg.num_classes < 2:
        raise ConfigError(f"field 'num_classes': must be an int >= 2, got "
                          f"{cfg.num_classes!r}")
    if not isinstance(cfg.test_n, int) or cfg.test_n < 1:
        raise ConfigError(f"field 'test_n': must be a positive int, got "
                          f"{cfg.test_n!r}")
    if not isinstance(cfg.hist_bins, int) or cfg.hist_bins < 2:
        raise ConfigError(f"field 'hist_bins': must be an int >= 2, got "
                          f"{cfg.hist_bins!r}")
    if not isinstance(cfg.clip_to_valid_range, bool):
        raise ConfigError("field 'clip_to_valid_range': must be a boolean")
    if (not isinstance(cfg.eps_grid, list) or not cfg.eps_grid
            or not all(isinstance(e, (int, float)) and not isinstance(e, bool)
                       and e >= 0 for e in cfg.eps_grid)):
        raise ConfigError("field 'eps_grid': must be a non-empty list of "
                          "numbers >= 0")
    if (not isinstance(cfg.seeds, list) or not cfg.seeds
            or not all(isinstance(s, int) and not isinstance(s, bool)
                       and s >= 0 for s in cfg.seeds)):
        raise ConfigError("field 'seeds': must be a non-empty list of "
                          "ints >= 0")
    if len(set(cfg.seeds)) != len(cfg.seeds):
        raise ConfigError("field 'seeds': duplicate seeds")
    _check_domain(cfg.domain_b, "domain_b")
    needs_a = cfg.strategy in ("ft", "common_init")
    if cfg.domain_a is None and needs_a:
        raise ConfigError(
            f"field 'domain_a': required when strategy={cfg.strategy!r}")
    if cfg.domain_a is not None:
        _check_domain(cfg.domain_a, "domain_a")
    if cfg.strategy == "common_init":
        if cfg.domain_c is None:
            raise ConfigError(
                "field 'domain_c': required when strategy='common_init'")
        _check_domain(cfg.domain_c, "domain_c")
    elif cfg.domain_c is not None:
        raise ConfigError("field 'domain_c': only valid for common_init")
    if cfg.domain_test is not None:
        _check_domain(cfg.domain_test, "domain_test")
    elif "idx_images" in cfg.domain_b and "n" not in cfg.domain_b:
        raise ConfigError(
            "field 'domain_test': required when domain_b consumes whole IDX "
            "files (nothing is left to hold out)")
    for name in ("train", "train_a", "train_b", "train_c"):
        _check_train(getattr(cfg, name), name)
    return cfg


def resolved_config(cfg):
    """Defaults-filled dict form; itself a valid, reproducing config."""
    out = {k: v for k, v in asdict(cfg).items() if v is not None}
    return out


def _train_config(cfg, role, seed):
    merged = dict(cfg.train)
    merged.update(getattr(cfg, role))
    return TrainConfig(seed=derive_seed(seed, role), **merged)


def build_domain(spec, num_classes, seed_int, name):
    """Materialize a domain spec (synthetic style or IDX files)."""
    if "style" in spec:
        return synth_domain(spec["style"], spec["n"], num_classes, seed_int,
                            domain_name=name)
    ds = load_idx(spec["idx_images"], spec["idx_labels"],
                  num_classes=num_classes)
    if "n" in spec:
        ds = subsample(ds, spec["n"], seed_int)
    return ds


def _build_b_and_test(cfg, seed):
    """Domain B plus a test set that never overlaps B's training rows."""
    b_seed = derive_seed(seed, "data_b")
    t_seed = derive_seed(seed, "data_test")
    holdout = None
    if "style" in cfg.domain_b:
        domain_b = synth_domain(cfg.domain_b["style"], cfg.domain_b["n"],
                                cfg.num_classes, b_seed, domain_name="B")
    else:
        full = load_idx(cfg.domain_b["idx_images"],
                        cfg.domain_b["idx_labels"],
                        num_classes=cfg.num_classes)
        if "n" in cfg.domain_b:
            domain_b, holdout = partition(full, cfg.domain_b["n"], b_seed)
        else:
            domain_b = full
    if cfg.domain_test is not None:
        test_b = build_domain(cfg.domain_test, cfg.num_classes, t_seed,
                              "B-test")
    elif "style" in cfg.domain_b:
        test_b = synth_domain(cfg.domain_b["style"], cfg.test_n,
                              cfg.num_classes, t_seed, domain_name="B-test")
    else:
        if holdout is None or len(holdout) == 0:
            raise ConfigError(
                "field 'domain_test': required, no IDX rows left to hold out")
        test_b = holdout
        if len(test_b) > cfg.test_n:
            test_b = subsample(test_b, cfg.test_n, t_seed)
    return domain_b, test_b


@dataclass
class SeedRun:
    """Everything one seed produced: report rows, models, diagnostics."""

    seed: int
    strategy: str
    reports: list
    trained_target: object
    trained_source: object
    hist: object
    timings: dict


def run_seed(cfg, seed, verbose=False):
    """Train the strategy's models for one seed and evaluate the grid.

    The black-box source is the domain-A model of the pair: trained
    from scratch for the scratch and ft strategies (for ft it is also
    the fine-tune parent), the A-branch for common_init.  Scratch with
    no domain_a runs white-box only.
    """
    timings = {}
    t0 = time.perf_counter()
    domain_b, test_b = _build_b_and_test(cfg, seed)
    domain_a = None
    if cfg.domain_a is not None:
        domain_a = build_domain(cfg.domain_a, cfg.num_classes,
                                derive_seed(seed, "data_a"), "A")
    timings["data"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    trained_source = None
    if cfg.strategy == "scratch":
        trained_target = run_scratch(domain_b, _train_config(cfg, "train_b", seed),
                                     verbose=verbose)
        if domain_a is not None:
            trained_source = run_scratch(domain_a,
                                         _train_config(cfg, "train_a", seed),
                                         verbose=verbose)
    elif cfg.strategy == "ft":
        trained_source, trained_target = run_finetune(
            domain_a, domain_b,
            _train_config(cfg, "train_a", seed),
            _train_config(cfg, "train_b", seed), verbose=verbose)
    else:
        domain_c = build_domain(cfg.domain_c, cfg.num_classes,
                                derive_seed(seed, "data_c"), "C")
        trained_source, trained_target = run_common_init(
            domain_c, domain_a, domain_b,
            _train_config(cfg, "train_c", seed),
            _train_config(cfg, "train_a", seed),
            _train_config(cfg, "train_b", seed), verbose=verbose)
    timings["train"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    source_model = trained_source.model if trained_source else None
    reports = compile_report(trained_target.model, test_b, cfg.eps_grid,
                             source=source_model,
                             strategy_tag=cfg.strategy,
                             clip_to_valid_range=cfg.clip_to_valid_range)
    timings["attack"] = time.perf_counter() - t0

    t0 = time.perf_counter()
    hist = gradient_norm_histogram(trained_target.model, test_b,
                                   bins=cfg.hist_bins)
    timings["hist"] = time.perf_counter() - t0
    return SeedRun(seed=seed, strategy=cfg.strategy, reports=reports,
                   trained_target=trained_target,
                   trained_source=trained_source, hist=hist,
                   timings=timings)


def save_run_checkpoints(run, out_dir):
    """Write target (and source, if any) checkpoints for one seed."""
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    target = run.trained_target
    meta = {"strategy": run.strategy, "seed": run.seed,
            "epochs": len(target.history), "best_epoch": target.best_epoch,
            "role": "target"}
    p = out_dir / f"model_b_seed{run.seed}.ckpt"
    save_checkpoint(target.model, p, metadata=meta)
    paths["target"] = str(p)
    if run.trained_source is not None:
        source = run.trained_source
        meta = {"strategy": run.strategy, "seed": run.seed,
                "epochs": len(source.history),
                "best_epoch": source.best_epoch, "role": "source"}
        p = out_dir / f"model_a_seed{run.seed}.ckpt"
        save_checkpoint(source.model, p, metadata=meta)
        paths["source"] = str(p)
    return paths
