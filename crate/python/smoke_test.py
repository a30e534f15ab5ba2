"""Smoke test for the ipf_field extension module.

Build and stage the module first:

    cargo build --release -p ipf-py
    cp target/release/libipf_field.so python/ipf_field.so
    python3 python/smoke_test.py
"""

import math
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import numpy as np

import ipf_field


def main():
    # kernel identities
    field = ipf_field.IpfField([[0.0, 0.0], [2.0, 0.0]], 0.5)
    mid = field.evaluate([[1.0, 0.0]])[0]
    assert abs(mid - math.exp(-4.0 / (8 * 0.25))) < 1e-12, mid
    assert ipf_field.IpfField([[1.0, 2.0]], 0.3).evaluate([[1.0, 2.0]]) == [1.0]
    score, is_ood = field.decide([40.0, 40.0], 1e-6)
    assert is_ood and score < 1e-6
    assert len(field) == 2 and field.dim == 2

    # numpy arrays go in directly
    points, labels = ipf_field.make_two_moons(300, 0.1, 0)
    pts = np.asarray(points)
    assert pts.shape == (600, 2) and sorted(set(labels)) == [0, 1]
    field = ipf_field.IpfField(pts, ipf_field.DEFAULT_BANDWIDTH_2D)
    threshold = field.calibrate_threshold(5.0)
    own = np.asarray(field.evaluate(pts))
    assert abs((own < threshold).mean() - 0.05) < 0.01

    far = np.full((20, 2), 9.0)
    auc = ipf_field.auroc(field.evaluate_log(pts[:100]), field.evaluate_log(far))
    assert auc == 1.0, auc
    best_h, best_auc, table = ipf_field.sweep_bandwidth(pts, pts[:50], far, [0.1, 0.3])
    assert best_h == 0.1 and best_auc == 1.0 and len(table) == 2

    assert ipf_field.ece([1.0, 1.0], [True, True]) == 0.0
    assert ipf_field.accuracy([0, 1, 1], [0, 1, 0]) == 2 / 3
    h = ipf_field.softmax_entropy([[0.0, 0.0], [100.0, 0.0]])
    assert abs(h[0] - math.log(2)) < 1e-12 and h[1] < 1e-30
    assert ipf_field.silverman_bandwidth(pts) > 0

    # a short training run and a checkpoint round trip
    model, losses = ipf_field.SnMlp.train(pts, labels, epochs=15, seed=1)
    assert len(losses) == 15 and losses[-1] < losses[0]
    assert max(model.spectral_estimates()) <= 1.001
    with tempfile.TemporaryDirectory() as tmp:
        ckpt = os.path.join(tmp, "m.snml")
        model.save(ckpt)
        again = ipf_field.SnMlp.load(ckpt)
        assert again.features(pts[:5].tolist()) == model.features(pts[:5].tolist())

        feats, logits = model.forward(pts)
        path = os.path.join(tmp, "f.ipff")
        ipf_field.write_features(path, feats, [int(l) for l in labels])
        back, back_labels = ipf_field.read_features(path)
        assert back_labels == list(labels)
        assert np.array_equal(np.asarray(back), np.asarray(feats, dtype=np.float32).astype(np.float64))

    try:
        ipf_field.IpfField([[0.0]], -1.0)
    except ValueError:
        pass
    else:
        raise AssertionError("negative bandwidth accepted")

    print("ipf_field smoke test passed")


if __name__ == "__main__":
    main()
