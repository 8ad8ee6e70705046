"""Smoke test for the posedn extension module.

Build and install first:
    pip install --no-build-isolation ./crates/py
then run:
    python python/smoke_test.py
"""

import math
import tempfile
from pathlib import Path

import posedn


def close(a, b, tol=1e-6):
    return abs(a - b) <= tol


def main():
    # similarity and its inverse
    alpha = posedn.alpha_from_ks(0.7, 0.4, 0.1)
    assert close(posedn.keypoint_similarity(alpha, 0.4, 0.1), 0.7)
    assert close(posedn.ksvf_loss(0.8, 0.5), 0.554518)
    assert close(posedn.ksvf_loss(0.0, 0.5), 0.129965)
    assert posedn.hungarian_match([[1.0, 2.0], [3.0, 1.0]]) == [(0, 0), (1, 1)]

    pose = [(0.4 + 0.03 * i, 0.5 - 0.02 * i, True) for i in range(5)]
    for polarity, lo, hi in [("pos", 0.5, 1.0), ("neg", 0.1, 0.5)]:
        points, drawn = posedn.pose_query(pose, polarity, seed=3)
        assert len(points) == 5 and all(lo <= k < hi for k in drawn)

    try:
        posedn.pose_query(pose, "sideways", seed=0)
    except ValueError:
        pass
    else:
        raise AssertionError("bad polarity accepted")

    with tempfile.TemporaryDirectory() as tmp:
        data = Path(tmp) / "scenes"
        people = posedn.generate_dataset(str(data), 3, seed=1, img_size=64, max_persons=2, skeleton="star5")
        assert people >= 3
        assert len((data / "annotations.jsonl").read_text().splitlines()) == 3

        model = posedn.Model(seed=0, num_keypoints=5, num_queries=6)
        assert model.num_keypoints == 5 and model.num_parameters > 0
        trace = model.train(str(data), iterations=3, lr=1e-3, batch_size=2, log_every=1)
        assert [r["iteration"] for r in trace] == [0, 1, 2]
        assert all(math.isfinite(r["total"]) for r in trace)

        report = model.evaluate(str(data))
        assert set(report) == {"AP", "AP50", "AP75", "AR"}
        assert all(0.0 <= v <= 1.0 for v in report.values())

        image = [[0.0] * 64 for _ in range(64)]
        preds = model.predict(image)
        assert len(preds) == 6
        assert all(len(kps) == 5 for kps, _ in preds)
        assert all(a[1] >= b[1] for a, b in zip(preds, preds[1:]))

        ckpt = str(Path(tmp) / "model.ntc")
        model.save(ckpt)
        again = posedn.Model.load(ckpt, num_keypoints=5, num_queries=6)
        assert again.predict(image) == preds

    print("smoke test passed")


if __name__ == "__main__":
    main()
