"""Experiment configuration: JSON in, validated frozen dataclasses out.

Parsing is strict: unknown keys, wrong types, and out-of-range values raise
ConfigError with the dotted path of the offending field. The resolved
configuration can be serialized back to a JSON-safe dict (infinity becomes
the string "inf") so runs can embed exactly what they executed.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

from .geometry import AggregationMethod, Divergence

DEFAULT_LAMBDAS = (0.0, 0.1, 0.25, 0.5, 1.0, 2.0, 4.0, 10.0, math.inf)


class ConfigError(ValueError):
    def __init__(self, path: str, detail: str):
        super().__init__(f"config field '{path}': {detail}")
        self.path = path


class _Section:
    """Dict wrapper that tracks consumed keys and errors on leftovers."""

    def __init__(self, raw: dict, path: str):
        if not isinstance(raw, dict):
            raise ConfigError(path or "<root>", f"expected an object, got {type(raw).__name__}")
        self.raw = dict(raw)
        self.path = path

    def _at(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def take(self, key: str, kind, default=..., required: bool = False):
        if key not in self.raw:
            if required or default is ...:
                raise ConfigError(self._at(key), "required field is missing")
            return default
        value = self.raw.pop(key)
        if kind is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if kind is not None and not isinstance(value, kind):
            raise ConfigError(
                self._at(key),
                f"expected {getattr(kind, '__name__', kind)}, got {type(value).__name__}",
            )
        if kind in (int, float) and isinstance(value, bool):
            raise ConfigError(self._at(key), "expected a number, got a bool")
        return value

    def section(self, key: str, required: bool = True) -> "_Section | None":
        if key not in self.raw:
            if required:
                raise ConfigError(self._at(key), "required section is missing")
            return None
        return _Section(self.raw.pop(key), self._at(key))

    def finish(self):
        if self.raw:
            extra = sorted(self.raw)
            raise ConfigError(
                self._at(extra[0]), f"unknown key(s): {', '.join(extra)}"
            )


def _positive(value, path: str, kind: str = "value"):
    if value <= 0:
        raise ConfigError(path, f"{kind} must be > 0, got {value}")
    return value


@dataclass(frozen=True)
class DatasetCfg:
    kind: str  # "synth" or "idx"
    n_per_class: int = 60
    classes: int = 10
    dim: int = 8
    spread: float = 0.12
    seed: int = 0  # fixes the drawn dataset and split across master seeds
    test_fraction: float = 0.25
    train_images: str = ""
    train_labels: str = ""
    test_images: str = ""
    test_labels: str = ""
    limit: int = 0  # 0 keeps every example


@dataclass(frozen=True)
class ModelCfg:
    hidden: tuple[int, ...] = (32,)


@dataclass(frozen=True)
class PartitionCfg:
    n_clients: int = 10
    beta: float = 0.5
    min_shard: int = 10
    shared_test_draw: bool = True


@dataclass(frozen=True)
class OptimizerCfg:
    lr_initial: float = 0.1
    lr_final: float = 0.01
    weight_decay: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.99999
    h0: float = 5.0
    clip_radius: float | None = None
    mc_train_samples: int = 1


@dataclass(frozen=True)
class FederationCfg:
    rounds: int = 20
    local_epochs: int = 2
    batch_size: int = 64
    aggregation: AggregationMethod = AggregationMethod.W2B
    algorithm: str = "bayes"  # or "fedavg"
    frozen_var: float = 1e-4
    threads: int = 1


@dataclass(frozen=True)
class PersonalizationCfg:
    divergence: Divergence = Divergence.W2SQ
    lambdas: tuple[float, ...] = DEFAULT_LAMBDAS


@dataclass(frozen=True)
class EvalCfg:
    mc_samples: int = 10
    ece_bins: int = 15


DEFAULT_W_GRID = tuple(round(0.1 * i, 1) for i in range(11))


@dataclass(frozen=True)
class IncrementalCfg:
    w_grid: tuple[float, ...] = DEFAULT_W_GRID
    split_class: int | None = None  # None: lower half of the classes is task A


@dataclass(frozen=True)
class CompareCfg:
    methods: tuple[str, ...] = ("eaa", "w2b", "rklb")


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetCfg
    model: ModelCfg = ModelCfg()
    partition: PartitionCfg = PartitionCfg()
    optimizer: OptimizerCfg = OptimizerCfg()
    federation: FederationCfg = FederationCfg()
    personalization: PersonalizationCfg = PersonalizationCfg()
    eval: EvalCfg = EvalCfg()
    incremental: IncrementalCfg = IncrementalCfg()
    compare: CompareCfg = CompareCfg()
    seeds: tuple[int, ...] = (0,)
    out_dir: str = "runs/out"

    def to_json_dict(self, include_execution: bool = True) -> dict:
        """JSON-safe dict of the resolved config.

        ``include_execution=False`` drops fields that do not affect numeric
        results (output directory, thread count) so artifacts embedding the
        config stay byte-identical across execution modes.
        """

        def scrub(value):
            if isinstance(value, dict):
                return {k: scrub(v) for k, v in value.items()}
            if isinstance(value, (list, tuple)):
                return [scrub(v) for v in value]
            if isinstance(value, float) and math.isinf(value):
                return "inf"
            if isinstance(value, (AggregationMethod, Divergence)):
                return value.value
            return value

        out = scrub(dataclasses.asdict(self))
        if not include_execution:
            out.pop("out_dir", None)
            out["federation"].pop("threads", None)
        return out


def _parse_lambda(value, path: str) -> float:
    if isinstance(value, str):
        if value.lower() == "inf":
            return math.inf
        raise ConfigError(path, f"expected a number or 'inf', got {value!r}")
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(path, f"expected a number or 'inf', got {type(value).__name__}")
    if value < 0:
        raise ConfigError(path, f"lambda must be >= 0, got {value}")
    return float(value)


def _parse_dataset(sec: _Section) -> DatasetCfg:
    kind = sec.take("kind", str, required=True)
    if kind not in ("synth", "idx"):
        raise ConfigError(sec._at("kind"), f"expected 'synth' or 'idx', got {kind!r}")
    cfg = DatasetCfg(
        kind=kind,
        n_per_class=sec.take("n_per_class", int, 60),
        classes=sec.take("classes", int, 10),
        dim=sec.take("dim", int, 8),
        spread=sec.take("spread", float, 0.12),
        seed=sec.take("seed", int, 0),
        test_fraction=sec.take("test_fraction", float, 0.25),
        train_images=sec.take("train_images", str, ""),
        train_labels=sec.take("train_labels", str, ""),
        test_images=sec.take("test_images", str, ""),
        test_labels=sec.take("test_labels", str, ""),
        limit=sec.take("limit", int, 0),
    )
    sec.finish()
    if kind == "idx":
        for name in ("train_images", "train_labels", "test_images", "test_labels"):
            if not getattr(cfg, name):
                raise ConfigError(f"dataset.{name}", "required for kind 'idx'")
    else:
        _positive(cfg.n_per_class, "dataset.n_per_class")
        _positive(cfg.spread, "dataset.spread")
        if not 0.0 < cfg.test_fraction < 1.0:
            raise ConfigError("dataset.test_fraction", "must lie in (0, 1)")
    return cfg


def _parse_optimizer(sec: _Section) -> OptimizerCfg:
    clip = sec.take("clip_radius", None, None)
    if clip is not None and (isinstance(clip, bool) or not isinstance(clip, (int, float))):
        raise ConfigError(
            "optimizer.clip_radius", f"expected a number or null, got {type(clip).__name__}"
        )
    cfg = OptimizerCfg(
        lr_initial=sec.take("lr_initial", float, 0.1),
        lr_final=sec.take("lr_final", float, 0.01),
        weight_decay=sec.take("weight_decay", float, 2e-4),
        beta1=sec.take("beta1", float, 0.9),
        beta2=sec.take("beta2", float, 0.99999),
        h0=sec.take("h0", float, 5.0),
        clip_radius=None if clip is None else float(clip),
        mc_train_samples=sec.take("mc_train_samples", int, 1),
    )
    sec.finish()
    _positive(cfg.lr_initial, "optimizer.lr_initial")
    _positive(cfg.lr_final, "optimizer.lr_final")
    _positive(cfg.h0, "optimizer.h0")
    _positive(cfg.mc_train_samples, "optimizer.mc_train_samples")
    if cfg.weight_decay < 0:
        raise ConfigError("optimizer.weight_decay", "must be >= 0")
    for name in ("beta1", "beta2"):
        if not 0.0 <= getattr(cfg, name) < 1.0:
            raise ConfigError(f"optimizer.{name}", "must lie in [0, 1)")
    if cfg.clip_radius is not None and cfg.clip_radius <= 0:
        raise ConfigError("optimizer.clip_radius", "must be > 0 or null")
    return cfg


def parse_config(obj: dict) -> ExperimentConfig:
    root = _Section(obj, "")

    dataset = _parse_dataset(root.section("dataset"))

    model = ModelCfg()
    sec = root.section("model", required=False)
    if sec is not None:
        hidden = sec.take("hidden", list, [32])
        sec.finish()
        if not all(isinstance(h, int) and not isinstance(h, bool) and h > 0 for h in hidden):
            raise ConfigError("model.hidden", "expected a list of positive integers")
        model = ModelCfg(hidden=tuple(hidden))

    partition = PartitionCfg()
    sec = root.section("partition", required=False)
    if sec is not None:
        partition = PartitionCfg(
            n_clients=sec.take("n_clients", int, 10),
            beta=sec.take("beta", float, 0.5),
            min_shard=sec.take("min_shard", int, 10),
            shared_test_draw=sec.take("shared_test_draw", bool, True),
        )
        sec.finish()
        _positive(partition.n_clients, "partition.n_clients")
        _positive(partition.beta, "partition.beta")
        _positive(partition.min_shard, "partition.min_shard")

    optimizer = OptimizerCfg()
    sec = root.section("optimizer", required=False)
    if sec is not None:
        optimizer = _parse_optimizer(sec)

    federation = FederationCfg()
    sec = root.section("federation", required=False)
    if sec is not None:
        agg = sec.take("aggregation", str, "w2b")
        try:
            agg_method = AggregationMethod(agg.upper())
        except ValueError:
            raise ConfigError(
                "federation.aggregation",
                f"expected one of {[m.value.lower() for m in AggregationMethod]}, got {agg!r}",
            ) from None
        algorithm = sec.take("algorithm", str, "bayes")
        if algorithm not in ("bayes", "fedavg"):
            raise ConfigError("federation.algorithm", f"expected 'bayes' or 'fedavg', got {algorithm!r}")
        federation = FederationCfg(
            rounds=sec.take("rounds", int, 20),
            local_epochs=sec.take("local_epochs", int, 2),
            batch_size=sec.take("batch_size", int, 64),
            aggregation=agg_method,
            algorithm=algorithm,
            frozen_var=sec.take("frozen_var", float, 1e-4),
            threads=sec.take("threads", int, 1),
        )
        sec.finish()
        _positive(federation.rounds, "federation.rounds")
        _positive(federation.batch_size, "federation.batch_size")
        _positive(federation.frozen_var, "federation.frozen_var")
        _positive(federation.threads, "federation.threads")
        if federation.local_epochs < 0:
            raise ConfigError("federation.local_epochs", "must be >= 0")

    personalization = PersonalizationCfg()
    sec = root.section("personalization", required=False)
    if sec is not None:
        div = sec.take("divergence", str, "w2sq")
        try:
            div_method = Divergence(div.upper())
        except ValueError:
            raise ConfigError(
                "personalization.divergence",
                f"expected one of {[d.value.lower() for d in Divergence]}, got {div!r}",
            ) from None
        if div_method is Divergence.KL:
            raise ConfigError(
                "personalization.divergence",
                "forward kl admits no two-point pullback; use rkl or w2sq",
            )
        raw = sec.take("lambdas", list, list(DEFAULT_LAMBDAS))
        sec.finish()
        lambdas = tuple(
            _parse_lambda(v, f"personalization.lambdas[{i}]") for i, v in enumerate(raw)
        )
        if len(lambdas) < 1:
            raise ConfigError("personalization.lambdas", "must not be empty")
        if any(b <= a for a, b in zip(lambdas, lambdas[1:])):
            raise ConfigError("personalization.lambdas", "must be strictly ascending")
        personalization = PersonalizationCfg(divergence=div_method, lambdas=lambdas)

    eval_cfg = EvalCfg()
    sec = root.section("eval", required=False)
    if sec is not None:
        eval_cfg = EvalCfg(
            mc_samples=sec.take("mc_samples", int, 10),
            ece_bins=sec.take("ece_bins", int, 15),
        )
        sec.finish()
        _positive(eval_cfg.mc_samples, "eval.mc_samples")
        _positive(eval_cfg.ece_bins, "eval.ece_bins")

    incremental = IncrementalCfg()
    sec = root.section("incremental", required=False)
    if sec is not None:
        raw_grid = sec.take("w_grid", list, list(DEFAULT_W_GRID))
        split = sec.take("split_class", int, None)
        sec.finish()
        grid = []
        for i, v in enumerate(raw_grid):
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise ConfigError(f"incremental.w_grid[{i}]", "expected a number")
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"incremental.w_grid[{i}]", f"must lie in [0, 1], got {v}")
            grid.append(float(v))
        if not grid or any(b <= a for a, b in zip(grid, grid[1:])):
            raise ConfigError("incremental.w_grid", "must be non-empty and strictly ascending")
        if split is not None and split < 1:
            raise ConfigError("incremental.split_class", "must be >= 1")
        incremental = IncrementalCfg(w_grid=tuple(grid), split_class=split)

    compare = CompareCfg()
    sec = root.section("compare", required=False)
    if sec is not None:
        raw_methods = sec.take("methods", list, ["eaa", "w2b", "rklb"])
        sec.finish()
        methods = []
        for i, m in enumerate(raw_methods):
            if not isinstance(m, str):
                raise ConfigError(f"compare.methods[{i}]", "expected a string")
            try:
                AggregationMethod(m.upper())
            except ValueError:
                raise ConfigError(
                    f"compare.methods[{i}]",
                    f"expected one of {[a.value.lower() for a in AggregationMethod]}, got {m!r}",
                ) from None
            methods.append(m.lower())
        compare = CompareCfg(methods=tuple(methods))

    seeds = root.take("seeds", list, [0])
    if not seeds or not all(
        isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds
    ):
        raise ConfigError("seeds", "expected a non-empty list of non-negative integers")

    out_dir = root.take("out_dir", str, "runs/out")
    root.finish()

    return ExperimentConfig(
        dataset=dataset,
        model=model,
        partition=partition,
        optimizer=optimizer,
        federation=federation,
        personalization=personalization,
        eval=eval_cfg,
        incremental=incremental,
        compare=compare,
        seeds=tuple(seeds),
        out_dir=out_dir,
    )


def load_config(path: str) -> ExperimentConfig:
    with open(path) as fh:
        try:
            obj = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigError("<file>", f"invalid JSON in {path}: {exc}") from None
    return parse_config(obj)
