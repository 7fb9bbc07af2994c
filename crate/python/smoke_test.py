"""Smoke test for the tumorseg Python extension.

Build first with `cargo build --release -p tumorseg-py` (or `maturin develop`
inside crates/python). If the module is not installed, the freshly built
shared library is loaded from target/.
"""

import importlib
import os
import shutil
import sys
import tempfile

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))


def load_module():
    try:
        return importlib.import_module("tumorseg")
    except ImportError:
        pass
    for profile in ("release", "debug"):
        lib = os.path.join(ROOT, "target", profile, "libtumorseg.so")
        if os.path.exists(lib):
            tmp = tempfile.mkdtemp()
            shutil.copy(lib, os.path.join(tmp, "tumorseg.so"))
            sys.path.insert(0, tmp)
            return importlib.import_module("tumorseg")
    sys.exit("tumorseg extension not found; run `cargo build --release -p tumorseg-py` first")


def main():
    ts = load_module()

    cfg = ts.UNetConfig(5, 64, 240)
    assert [lvl[1] for lvl in cfg.encoder_levels()] == [240, 120, 60, 30, 15]
    assert [lvl[0] for lvl in cfg.encoder_levels()] == [64, 128, 256, 512, 1024]
    assert ts.UNetConfig(2, 8, 16).param_count() == 7074

    assert abs(ts.dsc([1, 1, 1, 0], [1, 1, 0, 1]) - 2 / 3) < 1e-12
    assert ts.dsc([0, 0], [0, 0]) == 1.0
    assert ts.region_mask([0, 1, 2, 3, 4], "core") == [0, 1, 0, 1, 1]
    assert ts.soft_dice_loss([1.0, 0.0], [1, 0]) == 0.0

    folds = ts.kfold_split([f"c{i}" for i in range(10)], 5, 1)
    assert sorted(c for _, test in folds for c in test) == sorted(f"c{i}" for i in range(10))

    for prim, shapes in [
        ("conv2d", [[1, 2, 4, 4], [2, 2, 3, 3], [2]]),
        ("conv_transpose2d", [[1, 2, 3, 3], [2, 1, 3, 3], [1]]),
        ("softmax2", [[1, 2, 3, 3]]),
    ]:
        assert ts.grad_check(prim, shapes, 0) < 1e-4, prim

    size, depth = 16, 6
    ph = ts.generate_phantom(size, depth, seed=3)
    assert ph["dims"] == [size, size, depth]
    assert set(ph["labels"]) <= {0, 1, 2, 3, 4}

    def axial(values, z):
        return [values[(x * size + y) * depth + z] for x in range(size) for y in range(size)]

    slices = [axial(ph["flair"], z) for z in range(1, depth - 1)]
    masks = [ts.region_mask(axial(ph["labels"], z), "complete") for z in range(1, depth - 1)]

    image, labels = ts.augment_slice(slices[0], axial(ph["labels"], 1), size, size, seed=4)
    assert len(image) == size * size and set(labels) <= {0, 1, 2, 3, 4}

    net = ts.UNet(ts.UNetConfig(2, 4, size), seed=1)
    losses = net.fit(slices, masks, epochs=3, learning_rate=1e-3, batch_size=2, seed=2)
    assert len(losses) == 3 and all(0.0 <= v <= 1.0 for v in losses)
    pred = net.predict(slices)
    assert len(pred) == len(slices) and all(set(p) <= {0, 1} for p in pred)

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.unet")
        net.save(path, task="complete", epochs=3)
        again = ts.UNet.load(path)
        assert again.param_count() == net.param_count()
        assert again.predict(slices) == ts.UNet.load(path).predict(slices)

    print("python smoke test: ok")


if __name__ == "__main__":
    main()
