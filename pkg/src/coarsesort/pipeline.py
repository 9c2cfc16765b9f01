"""Scene -> classification -> pick plan -> joint execution, end to end."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .control import EpisodeReport, PickTarget, PolicyModel, Strategy, plan_pick_sequence, run_episode, workspace
from .matclass import (
    MaterialClass,
    MlpConfig,
    MlpModel,
    SampleSet,
    SyntheticSceneSpec,
    classify_cube,
    extract_samples,
    gen_synthetic_scene,
    metrics_from_predictions,
    scene_family,
    train_mlp,
)
from .plant import JointPlantParams, canonical_params

DEFAULT_PRIORITY = (
    MaterialClass.Wood,
    MaterialClass.Metal,
    MaterialClass.Plastic,
    MaterialClass.PaperCardboard,
    MaterialClass.Textile,
    MaterialClass.Foam,
    MaterialClass.MineralStone,
)


def default_strategy() -> Strategy:
    return Strategy(DEFAULT_PRIORITY, min_area=20, min_confidence=0.5)


@dataclass
class PipelineResult:
    label_map: np.ndarray
    confidence: np.ndarray
    ground_truth: np.ndarray
    targets: list[PickTarget]
    report: EpisodeReport
    classifier: MlpModel
    scene_macro_f1: float
    extras: dict = field(default_factory=dict)


def run_pipeline(seed: int = 0, strategy: Strategy | None = None, controller: str = "PID",
                 estimator: str = "Direct", policy: PolicyModel | None = None,
                 classifier: MlpModel | None = None, params: JointPlantParams | None = None,
                 mlp_config: MlpConfig | None = None) -> PipelineResult:
    """Run one seeded sorting episode on a synthetic scene.

    Without a ``classifier`` one is trained on a separate seeded scene
    family first. Every random draw derives from ``seed``.
    """
    strategy = default_strategy() if strategy is None else strategy
    params = canonical_params() if params is None else params
    if classifier is None:
        family = scene_family(3, seed=seed + 1)
        samples = SampleSet.concat(extract_samples(cube, rects) for cube, _, rects in family)
        cfg = MlpConfig(epochs=10, seed=seed) if mlp_config is None else mlp_config
        classifier = train_mlp(samples, cfg)
    cube, gt = gen_synthetic_scene(SyntheticSceneSpec(seed=seed))
    labels, conf = classify_cube(classifier, cube)
    known = gt >= 0
    scene_f1 = metrics_from_predictions(gt[known], labels[known]).macro_f1
    span = workspace(params)
    targets = plan_pick_sequence(labels, conf, strategy, span)
    report = run_episode(params, targets, controller, estimator, seed=seed, policy=policy, span=span)
    return PipelineResult(labels, conf, gt, targets, report, classifier, float(scene_f1))
