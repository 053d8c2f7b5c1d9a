"""Smoke test for the sciflow Python bindings.

Build and install first:  pip install --no-build-isolation ./crates/python
"""

import math
import os
import tempfile

import sciflow


def zeros(h, w):
    return [[[0.0, 0.0] for _ in range(w)] for _ in range(h)]


def main():
    img1, img2, gt = sciflow.synth_pair(3, seed=7, width=16, height=16)
    assert len(img1) == 16 and len(img1[0]) == 16 and len(img1[0][0]) == 3
    assert max(math.hypot(u, v) for row in gt for u, v in row) <= 4.0 + 1e-9

    model = sciflow.Model(feature_channels=8, hidden_channels=8, correlation_radius=1,
                          iterations=3, downsample_factor=4, seed=1)
    flows = model.estimate_flow(img1, img2)
    assert len(flows) == 3
    assert len(flows[-1]) == 16 and len(flows[-1][0]) == 16
    print(f"untrained model: {model.parameter_count} parameters, "
          f"EPE {sciflow.epe(flows[-1], gt):.3f}")

    with tempfile.TemporaryDirectory() as tmp:
        ckpt = os.path.join(tmp, "model.bin")
        model.save(ckpt)
        again = sciflow.Model.load(ckpt).estimate_flow(img1, img2)
        assert again == flows, "checkpoint round trip changed the output"

        path = os.path.join(tmp, "gt.flo")
        sciflow.write_flo(path, gt)
        back, valid = sciflow.read_flo(path)
        assert all(all(row) for row in valid)
        assert sciflow.epe(back, gt) < 1e-6

        try:
            sciflow.read_flo(os.path.join(tmp, "missing.flo"))
        except OSError:
            pass
        else:
            raise AssertionError("missing file should raise OSError")

    pred = [[[3.0, 4.0]]]
    assert sciflow.epe(pred, [[[0.0, 0.0]]]) == 5.0
    assert sciflow.fl_all([[[15.0, 0.0], [1.0, 0.0], [1.0, 0.0], [1.0, 0.0]]],
                          [[[10.0, 0.0], [1.0, 0.0], [1.0, 0.0], [1.0, 0.0]]]) == 25.0

    same = [[[0.5, -0.2]], [[1.0, 2.0]]]
    assert sciflow.sci_map(same, same) == [[1.0, 1.0]]
    spot = sciflow.sci_map([[[0.0]]] * 4, [[[1.0]]] * 4)[0][0]
    assert abs(spot - math.exp(-1.0)) < 1e-12

    white = sciflow.flow_to_color(zeros(2, 3))
    assert all(px == (255, 255, 255) for row in white for px in row)

    model, report = sciflow.train(
        "variant=sci\nmodel.feature_channels=8\nmodel.hidden_channels=8\n"
        "model.iterations=2\ndata.width=16\ndata.height=16\n"
        "optim.kind=adam\noptim.steps=5\neval.count=4\n"
    )
    assert model.sci_enabled and len(report["per_iteration_epe"]) == 2
    print(f"5-step training: held-out EPE {report['epe']:.3f}, Fl-all {report['fl_all']:.2f}%")
    print("python smoke test passed")


if __name__ == "__main__":
    main()
