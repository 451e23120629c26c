"""Smoke test for the pyfairfpr extension.

Build and install first, e.g.

    pip install --no-build-isolation ./crates/python

then run `python python/smoke_test.py`.
"""

import json
import math
import tempfile
from pathlib import Path

import pyfairfpr as ff


def check_dataset(tmp):
    d = ff.Dataset.generate(seed=3)
    assert len(d) == 4 * 32 * 16, len(d)
    assert d.group_ids() == ["a", "b", "c", "d"]
    assert all(abs(math.hypot(*row) - 1.0) < 1e-12 for row in d.features[:10])
    base = str(Path(tmp) / "ds")
    d.save(base)
    back = ff.Dataset.load(base)
    assert back.features == d.features and back.identity_labels == d.identity_labels
    train, ev = d.split(8)
    assert train.num_classes == 96 and ev.num_classes == 32
    return train, ev


def check_losses():
    cos = [[0.5, 0.1]]
    loss, grad, fpr = ff.loss_forward(cos, [0], kind="cosface", s=1.0, m=0.0)
    expected = math.log(1 + math.exp(0.1 - 0.5))
    assert abs(loss - expected) < 1e-12, (loss, expected)
    assert fpr is None
    # alpha = 0 makes the penalty loss coincide with cosface
    a = ff.loss_forward([[0.3, 0.8, -0.2]], [0], kind="fpr-penalty-cosface", s=8.0, alpha=0.0, gamma_u=0.9)
    b = ff.loss_forward([[0.3, 0.8, -0.2]], [0], kind="cosface", s=8.0)
    assert abs(a[0] - b[0]) < 1e-12 and a[1] == b[1]
    assert a[2] == [0.5]
    t_u, k, pool, realized = ff.estimate_threshold([[0.9, 0.1, 0.4, 0.7]], [0], 0.34)
    assert (t_u, k, pool) == (0.4, 2, 3), (t_u, k, pool)
    assert ff.kth_largest([3.0, 1.0, 2.0], 2) == 2.0
    assert abs(ff.bias_degree_from_rates([0.02, 0.0], 0.01) - math.sqrt(2) / 2) < 1e-12


def check_training(train, ev, tmp):
    cfg = json.dumps({"schema_version": 1, "train": {"epochs": 2, "learning_rate": 0.01}})
    model = ff.train(train, cfg, seed=1)
    assert len(model.epochs) == 2
    assert {"t_u", "group_instance_fpr", "std_instance_fpr"} <= set(model.telemetry[0])
    report = model.evaluate(ev, gammas=[1e-2, 1e-1])
    assert set(report["per_group"]) == {"a", "b", "c", "d"}
    assert [op["gamma"] for op in report["operating_points"]] == [1e-2, 1e-1]
    base = str(Path(tmp) / "ck")
    model.save(base)
    again = ff.Model.load(base)
    assert again.embed(ev.features[:5]) == model.embed(ev.features[:5])
    return report


def main():
    with tempfile.TemporaryDirectory() as tmp:
        train, ev = check_dataset(tmp)
        check_losses()
        report = check_training(train, ev, tmp)
    print("pyfairfpr", ff.__version__, "ok; mean accuracy after 2 epochs: %.4f" % report["mean_accuracy"])


if __name__ == "__main__":
    main()
