"""Smoke test for the sure_med extension module."""

import math
import os
import tempfile

import sure_med


def main():
    r = sure_med.repair_view("UNK", [0.05, 0.05, 0.85, 0.05])
    assert r["resolved"] == "LATERAL" and r["provenance"] == "resolved_unknown", r
    assert sure_med.repair_view("PA")["provenance"] == "kept_original"

    assert sure_med.raw_weight(20000) == 1.0
    assert sure_med.raw_weight(8000) == 1.5
    assert sure_med.raw_weight(7999) == 2.0
    w, m = sure_med.normalize_weights([1.0, 1.5, 2.0], 0.1)
    assert m == 2.0
    assert all(abs(a - b) < 1e-12 for a, b in zip(w, [0.55, 0.775, 1.0]))
    ce, key, total = sure_med.tsl_loss([1.0, 2.0, 3.0], [1.0, 1.0, 1.0], 2.0)
    assert abs(total - 3 * ce) < 1e-12 and key == ce

    res = sure_med.Resampler(seed=7, n_queries=4, model_dim=8, out_dim=3)
    frontal = [[math.sin(i * 8 + j) for j in range(8)] for i in range(5)]
    lateral = [[math.cos(i * 8 + j) for j in range(8)] for i in range(2)]
    z = res.fuse(frontal, lateral)
    assert len(z) == 4 and all(len(row) == 3 for row in z)
    for row in res.frontal_attention(frontal):
        assert abs(sum(row) - 1.0) < 1e-12

    labels = [0] * 14
    labels[2] = 1
    sentences = [
        {"text": "opacity.", "source": "prior1", "labels": labels, "embedding": [1.0, 0.0]},
        {"text": "no opacity.", "source": "prior2", "labels": [0] * 14, "embedding": [1.0, 0.0]},
    ]
    out = sure_med.filter_prior(sentences, [1.0, 0.1], mode="fixed")
    assert [s["text"] for s in out["retained"]] == ["opacity."]
    assert out["dropped"][0]["reason"] == "no_positive_finding"

    assert sure_med.split_sentences("No effusion. Heart size is normal.") == [
        "No effusion.",
        "Heart size is normal.",
    ]

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "x.emb")
        sure_med.write_emb1(path, [[0.5, -1.25], [3.0, 0.0]])
        assert sure_med.read_emb1(path) == [[0.5, -1.25], [3.0, 0.0]]

    for op in ("cross_attend", "favr_fuse"):
        rep = sure_med.grad_check(op, seed=3)
        assert rep["passed"], rep

    try:
        sure_med.Resampler(0, 2, 3, 2, init="identity")
    except ValueError:
        pass
    else:
        raise AssertionError("identity init with model_dim != out_dim should fail")

    print("sure_med smoke test passed")


if __name__ == "__main__":
    main()
