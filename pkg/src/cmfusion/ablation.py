"""Ablation variants and the multi-seed comparison runner."""

from __future__ import annotations

import os
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

from .data import DatasetSplit
from .model import STREAMS, CMRobertaModel, ModelConfig
from .train import TrainConfig, evaluate, fit


@dataclass(frozen=True)
class AblationVariant:
    id: str
    description: str
    streams: tuple[str, ...] = STREAMS
    zero: str | None = None  # "lld" or "bottleneck" audio columns

    def apply(self, config: ModelConfig) -> ModelConfig:
        zero_range = None
        if self.zero == "lld":
            zero_range = (0, config.lld_dim)
        elif self.zero == "bottleneck":
            zero_range = (config.lld_dim, config.d_audio_in)
        return replace(config, streams=self.streams, audio_zero_range=zero_range)


_ATTENTION = ("c_a", "c_t", "s_a", "s_t")

VARIANTS: dict[str, AblationVariant] = {v.id: v for v in (
    AblationVariant("full", "all seven streams"),
    AblationVariant("no-sca", "without the self/cross attention unit",
                    tuple(s for s in STREAMS if s not in _ATTENTION)),
    AblationVariant("audio-only", "audio self-attention and audio residual", ("s_a", "r_a")),
    AblationVariant("text-only", "text self-attention and text residual", ("s_t", "r_t")),
    AblationVariant("no-mid", "without mid-level fusion", tuple(s for s in STREAMS if s != "mid")),
    AblationVariant("no-residual", "without residual branches",
                    tuple(s for s in STREAMS if s not in ("r_a", "r_t"))),
    AblationVariant("audio-no-lld", "audio without low-level descriptors", zero="lld"),
    AblationVariant("audio-no-openl3", "audio without bottleneck embeddings", zero="bottleneck"),
)}

DEFAULT_SEEDS = (0, 1, 2, 3, 4)


def parse_variants(spec: str | list[str]) -> list[str]:
    """Validate variant ids; the result follows registry order without duplicates."""
    ids = [s.strip() for s in spec.split(",")] if isinstance(spec, str) else list(spec)
    unknown = [v for v in ids if v not in VARIANTS]
    if unknown or not ids:
        raise KeyError(f"unknown ablation variant(s) {unknown}; choose from {list(VARIANTS)}")
    return [v for v in VARIANTS if v in ids]


@dataclass
class VariantResult:
    id: str
    description: str
    scores: list[float]

    @property
    def mean(self) -> float:
        return statistics.fmean(self.scores)

    @property
    def sd(self) -> float:
        return statistics.stdev(self.scores) if len(self.scores) > 1 else 0.0

    def to_dict(self) -> dict:
        return {"id": self.id, "description": self.description, "scores": self.scores,
                "mean": self.mean, "sd": self.sd}


def run_one(variant_id: str, seed: int, model_config: ModelConfig, train_config: TrainConfig,
            train: DatasetSplit, val: DatasetSplit, test: DatasetSplit) -> float:
    """Train one variant from ``seed`` and return its test weighted F1."""
    cfg = replace(VARIANTS[variant_id].apply(model_config), seed=seed)
    model = CMRobertaModel(cfg)
    fit(model, train, val, replace(train_config, seed=seed))
    return evaluate(model, test, train_config.batch_size).weighted_f1


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("CMF_THREADS", "1")))
    except ValueError:
        return 1


def run_ablation(variants: list[str], model_config: ModelConfig, train_config: TrainConfig,
                 train: DatasetSplit, val: DatasetSplit, test: DatasetSplit,
                 seeds=DEFAULT_SEEDS, threads: int | None = None) -> list[VariantResult]:
    """Train every (variant, seed) pair; results come back in registry order.

    Jobs are independent, so up to ``threads`` (default ``$CMF_THREADS``, else
    1) run in separate processes.
    """
    ids = parse_variants(variants)
    jobs = [(v, s) for v in ids for s in seeds]
    threads = threads or _threads()
    args = (model_config, train_config, train, val, test)
    if threads == 1:
        scores = [run_one(v, s, *args) for v, s in jobs]
    else:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            futures = [pool.submit(run_one, v, s, *args) for v, s in jobs]
            scores = [f.result() for f in futures]
    by_variant: dict[str, list[float]] = {v: [] for v in ids}
    for (v, _), score in zip(jobs, scores):
        by_variant[v].append(float(score))
    return [VariantResult(v, VARIANTS[v].description, by_variant[v]) for v in ids]


def format_ablation(results: list[VariantResult]) -> str:
    rows = [("Variant", "Description", "w-average F1 (mean ± sd)")]
    rows += [(r.id, r.description, f"{100 * r.mean:.2f} ± {100 * r.sd:.2f}") for r in results]
    widths = [max(len(r[i]) for r in rows) for i in range(3)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
    lines.insert(1, "-" * max(len(line) for line in lines))
    return "\n".join(lines)
