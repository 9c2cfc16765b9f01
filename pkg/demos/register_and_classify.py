"""Register a synthetic three-camera series, then train and apply the
material classifier on a family of synthetic cubes.

    python3 demos/register_and_classify.py
"""
import numpy as np

from coarsesort.matclass import (
    MlpConfig,
    SampleSet,
    classify_cube,
    evaluate,
    extract_samples,
    scene_family,
    stratified_split,
    train_mlp,
)
from coarsesort.register import apply_homography, register_series, synthetic_series


def main():
    vis, _, truth = synthetic_series(256, seed=3)
    result = register_series(vis, seed=3)
    corners = np.array([[0, 0], [255, 0], [0, 255], [255, 255]], float)
    for cam, st in sorted(result.stats.items()):
        if cam != "UV" and cam in result.homographies:
            err = np.abs(result.homographies[cam].apply(corners)
                         - apply_homography(truth[cam], corners)).max()
            print(f"{cam:7s} {st}  corner err {err:.3f} px")

    family = scene_family(4, seed=0)
    samples = SampleSet.concat(extract_samples(cube, rects) for cube, _, rects in family)
    train, test = stratified_split(samples, 0.2, seed=0)
    model = train_mlp(train, MlpConfig())
    print(evaluate(model, test).summary())

    cube, label_map, _ = scene_family(1, seed=99)[0]
    pred, conf = classify_cube(model, cube)
    ok = label_map >= 0
    print(f"unseen scene: {np.mean(pred[ok] == label_map[ok]):.3f} pixel accuracy, "
          f"median confidence {np.median(conf):.2f}")


if __name__ == "__main__":
    main()
