"""Smoke test for the fdnet Python extension.

Build and install first:

    pip install maturin
    maturin build --release -m crates/py/Cargo.toml -o dist
    pip install dist/fdnet-*.whl
"""

import math
import os
import tempfile

import fdnet


def check_tensor():
    t = fdnet.Tensor([2, 3], [1.0, 2.0, 3.0, 4.0, 5.0, 6.0])
    assert t.shape == [2, 3]
    assert t.sum() == 21.0
    assert len(t) == 6
    try:
        fdnet.Tensor([2, 2], [1.0])
    except fdnet.FdnetError:
        pass
    else:
        raise AssertionError("bad shape accepted")


def check_bands():
    labels = [[0] * 8 for _ in range(8)]
    for y in range(8):
        for x in range(4, 8):
            labels[y][x] = 1
    bands = fdnet.band_partition(labels, [1, 2])
    assert bands[0] == [3, 2, 1, 1, 1, 1, 2, 3]


def check_loss():
    probs = fdnet.Tensor.full([1, 2, 4, 4], 0.5)
    labels = [[[0, 0, 1, 1] for _ in range(4)]]
    ce = fdnet.boundary_aware_loss(probs, labels, [1.0], [], mode="poly", lam=0.0)
    assert abs(ce - math.log(2.0)) < 1e-12


def check_network():
    spec = fdnet.NetworkSpec.toy(stride=16)
    assert spec.block_scales() == [4, 8, 16, 16]
    net = fdnet.Network(spec, seed=0)
    edges = net.connectivity()
    assert len(edges) == 15, edges
    image = fdnet.Tensor.full([1, 3, 32, 32], 0.5)
    out = net.forward(image)
    assert out["probs"].shape == [1, 4, 32, 32]
    labels, probs = net.predict(image, scales=[1.0], flip=False)
    assert probs.max_abs_diff(out["probs"]) == 0.0
    assert len(labels) == 32 and len(labels[0]) == 32

    stride32 = fdnet.Network(fdnet.NetworkSpec.toy(stride=32))
    assert stride32.count_parameters() == net.count_parameters()


def check_metrics():
    gt = [[0, 1], [2, 3]]
    m = fdnet.compute_metrics(gt, gt, 4)
    assert m["mean_iou"] == 1.0
    assert fdnet.trimap_miou(gt, gt, 1, 4) == 1.0
    assert abs(fdnet.poly_lr(0, 2.5e-3, 300, 0.9) - 2.5e-3) < 1e-18


def check_gradcheck():
    assert "conv2d" in fdnet.gradcheck_ops()
    err, coords, passed = fdnet.gradcheck_op("conv2d")
    assert passed and coords > 0, err


def check_training():
    data = fdnet.Dataset.synthetic(seed=0, samples=2, canvas=32, size_range=(5, 10))
    assert len(data) == 2
    net = fdnet.Network(fdnet.NetworkSpec.toy(), seed=0)
    log = net.train(data, config='{"max_iter": 3, "batch_size": 2, "crop": 32}')
    assert [row[0] for row in log] == [0, 1, 2]
    assert all(math.isfinite(row[2]) for row in log)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "net.fdckpt")
        net.save(path)
        again = fdnet.Network.load(path)
        _, image, _ = data.sample(0)
        a = net.forward(image)["probs"]
        b = again.forward(image)["probs"]
        assert a.max_abs_diff(b) == 0.0


def main():
    for check in [check_tensor, check_bands, check_loss, check_network, check_metrics, check_gradcheck, check_training]:
        check()
        print("ok", check.__name__)


if __name__ == "__main__":
    main()
