"""Deployment scenario pipelines.

Four orderings of pretraining, pruning with retraining, and target-domain
fine-tuning:

1. prune and retrain on the source domain, then fine-tune on the target;
2. scenario 1 plus a second prune and retrain round on the target;
3. fine-tune on the target first, then prune and retrain there;
4. prune with target-data ranking before any fine-tuning, then retrain
   and fine-tune in one pass (progressive soft pruning cannot express
   this split and is rejected).

Every stage is timed and followed by a complexity and accuracy
measurement of the current feature extractor on the target test split.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .criteria import ProbeBatch, TaylorCriterion, make_criterion
from .datasets import (
    ClassificationDataset, ReidDataset, ReidSpec, SourceSpec,
    gen_source_dataset, gen_target_reid_dataset, probe_from,
)
from .graph import NetworkGraph, append_classifier, count_flops, count_params, strip_heads
from .models import load_architecture
from .reid import EmbeddingBatch, domain_similarity, eval_cmc_map, finetune_policy, loss_metric
from .reporting import RunReport, StageRecord
from .strategies import (
    AutoBalancedPruner, IterativePruner, OneStepPruner, PlayAndPrunePruner,
    PruneSchedule, PsfpPruner,
)
from .training import Trainer, embed_dataset

__all__ = ["ScenarioConfig", "ConfigError", "run_scenario", "sweep_pruning_rates",
           "evaluate_graph"]


class ConfigError(Exception):
    pass


@dataclass
class ScenarioConfig:
    """Everything that determines one experiment run."""

    scenario: int = 1
    arch: str = "toy"
    seed: int = 7
    source: SourceSpec = field(default_factory=SourceSpec)
    target: ReidSpec = field(default_factory=ReidSpec)
    criterion: str = "l1"
    criterion_params: dict = field(default_factory=dict)
    strategy: str = "iterative"
    strategy_params: dict = field(default_factory=dict)
    schedule: PruneSchedule = field(default_factory=PruneSchedule)
    second_target_compression: Optional[float] = None
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 32
    margin: float = 0.5
    pk_p: int = 8
    pk_k: int = 4
    pretrain_epochs: int = 15
    finetune_epochs: int = 25
    probe_size: int = 256
    max_rank: int = 10
    threshold_n: float = 20.0
    threshold_c: float = 0.1

    def validate(self) -> "ScenarioConfig":
        if self.scenario not in (1, 2, 3, 4):
            raise ConfigError(f"scenario must be 1..4, got {self.scenario}")
        if self.scenario == 4 and self.strategy == "psfp":
            raise ConfigError("progressive soft pruning merges prune, retrain and fine-tune "
                              "into one pass and cannot rank before fine-tuning; "
                              "it is not applicable to scenario 4")
        if self.pretrain_epochs < 0 or self.finetune_epochs < 0:
            raise ConfigError("epoch counts cannot be negative")
        return self

    def echo(self) -> dict:
        doc = {
            "scenario": self.scenario, "arch": self.arch, "seed": self.seed,
            "criterion": self.criterion, "criterion_params": dict(self.criterion_params),
            "strategy": self.strategy, "strategy_params": dict(self.strategy_params),
            "schedule": {
                "fraction_per_iteration": self.schedule.fraction_per_iteration,
                "ranking_epochs": self.schedule.ranking_epochs,
                "retrain_epochs": self.schedule.retrain_epochs,
                "target_compression": self.schedule.target_compression,
                "scope": self.schedule.scope,
            },
            "second_target_compression": self.second_target_compression,
            "trainer": {"lr": self.lr, "momentum": self.momentum,
                        "weight_decay": self.weight_decay, "batch_size": self.batch_size,
                        "margin": self.margin, "pk_p": self.pk_p, "pk_k": self.pk_k},
            "pretrain_epochs": self.pretrain_epochs,
            "finetune_epochs": self.finetune_epochs,
            "probe_size": self.probe_size, "max_rank": self.max_rank,
            "policy": {"threshold_n": self.threshold_n, "threshold_c": self.threshold_c},
            "source": self.source.__dict__ | {"image_shape": list(self.source.image_shape)},
            "target": self.target.__dict__ | {"image_shape": list(self.target.image_shape)},
        }
        return doc


def evaluate_graph(graph: NetworkGraph, data: ReidDataset, max_rank: int = 10) -> dict:
    """Rank-1 and mAP of a feature extractor on the target test split."""
    feat = strip_heads(graph)
    split = data.split_embeddings(lambda imgs: embed_dataset(feat, imgs))
    rep = eval_cmc_map(split, max_rank=max_rank)
    return {"rank1": rep.rank1, "map": rep.map}


class _ScenarioRun:
    def __init__(self, cfg: ScenarioConfig):
        self.cfg = cfg.validate()
        self.rng = np.random.default_rng(cfg.seed)
        self.source_data = gen_source_dataset(cfg.source)
        self.target_data = gen_target_reid_dataset(cfg.target)
        self.input_shape = tuple(cfg.target.image_shape)
        self.report = RunReport(config=cfg.echo(), seed=cfg.seed)

    # -- helpers -------------------------------------------------------------

    def _trainer(self, loss: str) -> Trainer:
        cfg = self.cfg
        return Trainer(lr=cfg.lr, momentum=cfg.momentum, weight_decay=cfg.weight_decay,
                       batch_size=cfg.batch_size, loss=loss, margin=cfg.margin,
                       pk_p=cfg.pk_p, pk_k=cfg.pk_k, seed=cfg.seed)

    def _measure(self, stage: str, graph: NetworkGraph, seconds: float) -> None:
        feat = strip_heads(graph)
        metrics = evaluate_graph(feat, self.target_data, self.cfg.max_rank)
        self.report.add(StageRecord(stage, count_flops(feat, self.input_shape),
                                    count_params(feat), metrics["rank1"], metrics["map"],
                                    seconds))

    def _make_criterion(self, domain: str):
        cfg = self.cfg
        crit = make_criterion(cfg.criterion, **cfg.criterion_params)
        if isinstance(crit, TaylorCriterion) and crit.loss_builder is None and domain == "target":
            margin = cfg.margin

            def builder(outputs, labels, _margin=margin):
                # the deepest 2-D output is the embedding
                emb_id = next(nid for nid in reversed(list(outputs))
                              if outputs[nid].data.ndim == 2)
                batch = EmbeddingBatch(outputs[emb_id], labels, margin=_margin)
                return loss_metric("batch_hard", batch)

            crit.loss_builder = builder
        return crit

    def _probe(self, data, offset: int) -> ProbeBatch:
        size = max(1, self.cfg.probe_size * max(1, self.cfg.schedule.ranking_epochs))
        return probe_from(data, size=size, seed=self.cfg.seed + offset)

    def _pruner(self, criterion, schedule: PruneSchedule, trainer: Optional[Trainer],
                eval_fn: Optional[Callable]):
        cfg = self.cfg
        params = dict(cfg.strategy_params)
        if cfg.strategy == "one_step":
            return OneStepPruner(criterion, schedule, trainer)
        if cfg.strategy == "iterative":
            return IterativePruner(criterion, schedule, trainer)
        if cfg.strategy == "autobalanced":
            return AutoBalancedPruner(schedule, trainer, alpha=params.get("alpha", 1e-4))
        if cfg.strategy == "psfp":
            return PsfpPruner(trainer, p_final=schedule.target_compression,
                              decay=params.get("decay", 0.3),
                              epochs=params.get("epochs", 10),
                              norm=params.get("norm", 2))
        if cfg.strategy == "play_and_prune":
            return PlayAndPrunePruner(trainer,
                                      epsilon=params.get("epsilon", 1.0),
                                      delta_w=params.get("delta_w", 1.1),
                                      lam=params.get("lam", 1e-4),
                                      alpha_frac=params.get("alpha_frac", 0.10),
                                      max_epochs=params.get("max_epochs", 20),
                                      target_compression=schedule.target_compression)
        raise ConfigError(f"unknown strategy '{cfg.strategy}'")

    def _prune_stage(self, graph: NetworkGraph, data, loss: str, domain: str,
                     target: float, retrain: bool = True) -> NetworkGraph:
        cfg = self.cfg
        schedule = replace(cfg.schedule, target_compression=target)
        criterion = self._make_criterion(domain)
        probe = self._probe(data, offset=101 if domain == "source" else 202)
        eval_fn = None
        if retrain:
            if cfg.strategy == "play_and_prune":
                def eval_fn(g):
                    return evaluate_graph(g, self.target_data, cfg.max_rank)
            pruner = self._pruner(criterion, schedule, self._trainer(loss), eval_fn)
        else:
            # single ranking pass with no retraining (scenario 4's prune stage)
            schedule = replace(schedule, retrain_epochs=0)
            pruner = OneStepPruner(criterion, schedule, None)
        pruner.fit(graph, data, probe=probe, eval_fn=eval_fn,
                   input_shape=tuple(data.images.shape[1:]), rng=self.rng)
        self.last_prune_report_ = pruner.report_
        return pruner.graph_

    def _finetune_stage(self, graph: NetworkGraph, epochs: int) -> NetworkGraph:
        """Fine-tune on the target with policy-selected freezing."""
        cfg = self.cfg
        feat = strip_heads(graph)
        src_sample = self.source_data.images[:min(len(self.source_data), 256)]
        tgt_sample = self.target_data.images[:min(len(self.target_data), 256)]
        src_emb = embed_dataset(feat, src_sample)
        tgt_emb = embed_dataset(feat, tgt_sample)
        cos_dist, mmd = domain_similarity(src_emb, tgt_emb)
        decision = finetune_policy(cos_dist, mmd, self.target_data.samples_per_class,
                                   cfg.threshold_n, cfg.threshold_c)
        self.report.config.setdefault("derived", {})["finetune"] = {
            "cosine_distance": float(cos_dist), "mmd": float(mmd), "policy": decision,
        }
        params = None
        if decision == "freeze_extractor":
            head = feat.nodes[feat.embedding_id()]
            if head.params:
                params = list(head.params.values())
        trainer = self._trainer("batch_hard")
        trainer.train(feat, self.target_data, epochs, params=params, rng=self.rng)
        return feat

    # -- the four pipelines ----------------------------------------------------

    def run(self) -> RunReport:
        cfg = self.cfg
        t0 = time.monotonic()
        graph = load_architecture(cfg.arch, seed=cfg.seed)
        clf = append_classifier(graph, self.source_data.n_classes, seed=cfg.seed + 1)
        self._trainer("cross_entropy").train(clf, self.source_data, cfg.pretrain_epochs,
                                             rng=self.rng)
        self._measure("pretrain", clf, time.monotonic() - t0)

        primary = cfg.schedule.target_compression
        second = cfg.second_target_compression
        if second is None:
            second = primary

        if cfg.scenario in (1, 2):
            t0 = time.monotonic()
            clf = self._prune_stage(clf, self.source_data, "cross_entropy", "source", primary)
            self._measure("prune_retrain_source", clf, time.monotonic() - t0)

            t0 = time.monotonic()
            feat = self._finetune_stage(clf, cfg.finetune_epochs)
            self._measure("finetune_target", feat, time.monotonic() - t0)

            if cfg.scenario == 2:
                t0 = time.monotonic()
                feat = self._prune_stage(feat, self.target_data, "batch_hard", "target", second)
                self._measure("prune_retrain_target", feat, time.monotonic() - t0)
        elif cfg.scenario == 3:
            t0 = time.monotonic()
            feat = self._finetune_stage(clf, cfg.finetune_epochs)
            self._measure("finetune_target", feat, time.monotonic() - t0)

            t0 = time.monotonic()
            feat = self._prune_stage(feat, self.target_data, "batch_hard", "target", primary)
            self._measure("prune_retrain_target", feat, time.monotonic() - t0)
        else:  # scenario 4
            t0 = time.monotonic()
            feat = strip_heads(clf)
            feat = self._prune_stage(feat, self.target_data, "batch_hard", "target",
                                     primary, retrain=False)
            self._measure("prune_target_ranking", feat, time.monotonic() - t0)

            t0 = time.monotonic()
            # the merged stage gets the same target-domain budget as a
            # fine-tune stage; scenario 1 spends its retraining on the source
            trainer = self._trainer("batch_hard")
            trainer.train(feat, self.target_data, cfg.finetune_epochs, rng=self.rng)
            self._measure("retrain_finetune_target", feat, time.monotonic() - t0)

        t0 = time.monotonic()
        self._measure("eval", feat, time.monotonic() - t0)
        self.final_graph_ = feat
        return self.report


def run_scenario(cfg: ScenarioConfig) -> RunReport:
    """Execute the configured pipeline; any stage error aborts with the
    partial report attached to the exception."""
    run = _ScenarioRun(cfg)
    try:
        return run.run()
    except Exception as exc:
        exc.partial_report = run.report  # type: ignore[attr-defined]
        raise


def sweep_pruning_rates(cfg: ScenarioConfig, rates, threads: int = 1) -> list:
    """One scenario run per compression rate under a shared seed.

    Returns [(rate, RunReport)] ordered like ``rates``. With ``threads``
    above 1, rates run in separate processes.
    """
    rates = list(rates)
    if not rates:
        raise ConfigError("rate list is empty")
    for r in rates:
        if not 0.0 <= float(r) < 1.0:
            raise ConfigError(f"pruning rate {r} outside [0, 1)")
    configs = [replace(cfg, schedule=replace(cfg.schedule, target_compression=float(r)))
               for r in rates]
    if threads > 1:
        from concurrent.futures import ProcessPoolExecutor

        with ProcessPoolExecutor(max_workers=threads) as pool:
            reports = list(pool.map(run_scenario, configs))
    else:
        reports = [run_scenario(c) for c in configs]
    return list(zip((float(r) for r in rates), reports))
