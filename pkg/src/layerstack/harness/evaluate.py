"""Desk-scale metrics: mask exclusivity and classifier-based prompt alignment."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np
import torch

from ..layerspace import LayerSet, exclusivity
from ..sampler import GuidanceConfig, sample_batch
from ..textcond import COLORS, SHAPES, PromptTexts
from .checkpoint import Checkpoint
from .classifier import AttributeClassifier, parse_attributes, predict, region_inputs


@dataclass
class SampleScore:
    num_layers: int
    exclusivity: float
    color_correct: float
    shape_correct: float
    seed: int


@dataclass
class MetricsReport:
    exclusivity: float
    color_accuracy: float
    shape_accuracy: float
    alignment_accuracy: float
    per_layer_count: dict[int, dict[str, float]] = field(default_factory=dict)
    loss_curve: list[float] = field(default_factory=list)
    samples: list[SampleScore] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["per_layer_count"] = {str(k): v for k, v in self.per_layer_count.items()}
        return d


def score_layer_set(ls: LayerSet, soft_masks: np.ndarray, clf: AttributeClassifier | None) -> tuple[float, float, float]:
    """(exclusivity, colour accuracy, shape accuracy) for one generated set."""
    excl = exclusivity(soft_masks)
    if clf is None or not ls.foregrounds:
        return excl, float("nan"), float("nan")
    xs = region_inputs(ls)
    p = predict(clf, torch.stack(xs))
    col, shp = [], []
    for i, fg in enumerate(ls.foregrounds):
        attr = parse_attributes(fg.prompt)
        if attr is None:
            continue
        empty = fg.mask.grid.sum() == 0
        col.append(not empty and COLORS[p.color[i]] == attr[0])
        shp.append(not empty and SHAPES[p.shape[i]] == attr[1])
    if not col:
        return excl, float("nan"), float("nan")
    return excl, float(np.mean(col)), float(np.mean(shp))


def _summarize(scores: Sequence[SampleScore]) -> dict[str, float]:
    e = np.array([s.exclusivity for s in scores])
    c = np.array([s.color_correct for s in scores])
    sh = np.array([s.shape_correct for s in scores])
    return {
        "n": float(len(scores)),
        "exclusivity": float(np.nanmean(e)),
        "color_accuracy": float(np.nanmean(c)),
        "shape_accuracy": float(np.nanmean(sh)),
    }


def evaluate(
    ckpt: Checkpoint,
    prompts: Sequence[PromptTexts],
    n_samples: int,
    gcfg: GuidanceConfig,
    classifier: AttributeClassifier | None,
    batch_size: int = 8,
    loss_curve: Sequence[float] = (),
) -> MetricsReport:
    """Sample ``n_samples`` layer sets (cycling through ``prompts``) and score them.

    Sample ``i`` uses seed ``gcfg.seed + i``, so two evaluations with the same
    prompts and seed are paired sample-by-sample.
    """
    if not prompts:
        raise ValueError("no prompts to evaluate")
    res = ckpt.model.config.resolution
    gcfg = replace(gcfg, record_trace=False)
    jobs = [(i, prompts[i % len(prompts)]) for i in range(n_samples)]
    by_count: dict[int, list] = {}
    for i, tx in jobs:
        by_count.setdefault(tx.num_layers, []).append((i, tx))
    scores: dict[int, SampleScore] = {}
    for n, items in sorted(by_count.items()):
        for s in range(0, len(items), batch_size):
            chunk = items[s : s + batch_size]
            seeds = [gcfg.seed + i for i, _ in chunk]
            out = sample_batch(ckpt.model, ckpt.schedule, ckpt.vocab, [tx for _, tx in chunk], gcfg, seeds, res)
            for j, (i, _) in enumerate(chunk):
                e, c, sh = score_layer_set(out.layer_sets[j], out.soft_masks[j].numpy(), classifier)
                scores[i] = SampleScore(n, e, c, sh, seeds[j])
    ordered = [scores[i] for i in range(n_samples)]
    overall = _summarize(ordered)
    per = {n: _summarize([s for s in ordered if s.num_layers == n]) for n in sorted(by_count)}
    return MetricsReport(
        exclusivity=overall["exclusivity"],
        color_accuracy=overall["color_accuracy"],
        shape_accuracy=overall["shape_accuracy"],
        alignment_accuracy=float(np.nanmean([overall["color_accuracy"], overall["shape_accuracy"]])),
        per_layer_count=per,
        loss_curve=list(loss_curve),
        samples=ordered,
    )


def paired_not_worse(treated: Sequence[float], control: Sequence[float]) -> tuple[bool, float, float]:
    """Directional paired check: mean(treated - control) >= -1 standard error.

    Returns (passed, mean difference, standard error).
    """
    d = np.asarray(treated, dtype=np.float64) - np.asarray(control, dtype=np.float64)
    d = d[np.isfinite(d)]
    if len(d) == 0:
        return False, float("nan"), float("nan")
    se = float(d.std(ddof=1) / np.sqrt(len(d))) if len(d) > 1 else 0.0
    mean = float(d.mean())
    return mean >= -se, mean, se
