"""End-to-end smoke test of the Python bindings.

Run after `pip install -e crates/python --no-build-isolation`.
"""

import math
import tempfile
from pathlib import Path

import dpgcd_py as dp


def check_kernels():
    x = dp.Tensor([2, 3], [1.0, 2.0, 3.0, 0.0, 0.0, 0.0])
    rows = dp.softmax(x).tolist()
    assert abs(sum(rows[:3]) - 1.0) < 1e-12
    assert all(abs(v - 1 / 3) < 1e-12 for v in rows[3:])

    # One step, one channel, one state: y = C * delta * B * x.
    one = lambda v: dp.Tensor([1, 1], [v])
    y = dp.selective_scan(one(2.0), one(0.5), one(-1.0), one(3.0), one(4.0))
    assert abs(y.tolist()[0] - 12.0) < 1e-12

    scores = dp.class_scores([0, 1, 1, 2], [0, 1, 2, 2], 3)
    assert scores[0] == (1.0, 1.0, False)
    assert abs(scores[1][0] - 0.5) < 1e-12

    gt = dp.Tensor([1, 2, 2], [0.0, 2.0, 0.0, -4.0])
    err = dp.height_errors(dp.Tensor.zeros([1, 2, 2]), gt, [0, 1, 0, 2])
    assert abs(err["crmse"] - math.sqrt(10.0)) < 1e-12
    assert abs(err["mae"] - 1.5) < 1e-12


def check_pipeline(root: Path):
    tiles = dp.synthetic_tiles({"tiles": "2", "tile_size": "32", "building_size": "4,8"})
    t = tiles[0]
    assert t["dsm_t1"].shape == [1, 32, 32]
    d = [b - a for a, b in zip(t["dsm_t1"].tolist(), t["dsm_t2"].tolist())]
    assert d == t["delta_h"].tolist()

    manifest = dp.write_synthetic_set(str(root / "data"), {"tiles": "10", "seed": "3"})
    model, curve = dp.train(str(manifest), steps=3, seed=1)
    assert len(curve) == 3 and all(math.isfinite(v) for v in curve)
    assert model.num_parameters > 0

    ckpt = root / "m.ckpt"
    model.save(str(ckpt))
    again = dp.Model.load(str(ckpt))
    assert again.config() == model.config()
    labels, height = again.predict(t["dsm_t1"], t["img_t2"], t["depth_prior"])
    assert len(labels) == 32 * 32 and height.shape == [1, 32, 32]
    table = again.evaluate(str(manifest), str(root / "eval"))
    assert "miou_ch=" in table and "cRMSE=" in table
    assert (root / "eval" / "metrics.csv").exists()

    try:
        dp.Model({"use_edp": "maybe"})
    except ValueError:
        pass
    else:
        raise AssertionError("invalid config accepted")


def check_gradients():
    rows = dp.gradcheck("softmax", 2)
    assert rows and all(r[3] < dp.TOLERANCE for r in rows)


if __name__ == "__main__":
    check_kernels()
    with tempfile.TemporaryDirectory() as d:
        check_pipeline(Path(d))
    check_gradients()
    print("python smoke test passed")
