"""Smoke test for the apn extension module.

Build and install first:  pip install --no-build-isolation ./crates/py
"""
import json
import os
import tempfile

import apn

SPEC = {"num_domains": 2, "clips_per_pair": 2, "num_classes": 3}
MODEL = {"num_classes": 3, "feature_dim": 8, "head_count": 2, "encoder_hidden": 8, "dtype": "f64"}


def main():
    report = apn.gradcheck(["kernels"])
    assert report and all(e["passed"] for e in report), report

    b = apn.Benchmark.generate(json.dumps(SPEC))
    assert b.split_len("train") > 0 and b.target_domains == [1]
    frames, label, domain = b.clip("train", 0)
    assert frames.dims == [12, 24, 24, 3] and domain == 0

    m = apn.Model(json.dumps(MODEL), seed=3, learning_rate=0.01)
    p = m.predict_proba(frames)
    assert abs(sum(p) - 1.0) < 1e-9

    clips = [b.clip("train", i) for i in range(b.split_len("train"))]
    ada = json.dumps({"t_max": 1, "levels": ["ii", "iii"]})
    metrics = m.train_step([c[0] for c in clips], [c[1] for c in clips], ada)
    assert "cost_ii" in metrics and "cost_iii" in metrics, metrics

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.apn1")
        m.save(path)
        again = apn.Model.load(path, json.dumps(MODEL))
        assert again.param_names() == m.param_names()
        data = os.path.join(d, "d.vdg")
        b.save(data)
        assert apn.Benchmark.load(data).split_len("val") == b.split_len("val")
        assert json.loads(apn.read_manifest(data))

    try:
        apn.Tensor([2], [1.0], "f64")
    except ValueError:
        pass
    else:
        raise AssertionError("shape mismatch accepted")
    print("apn smoke test ok")


if __name__ == "__main__":
    main()
