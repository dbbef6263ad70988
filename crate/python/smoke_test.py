"""Smoke test for the irpatch_py extension module.

Build the module first:

    cargo build -p irpatch-py

then run:

    python3 python/smoke_test.py
"""

import ctypes  # noqa: F401  (keeps the import error message obvious on odd platforms)
import importlib.util
import math
import pathlib
import sys


def load_module():
    root = pathlib.Path(__file__).resolve().parents[1]
    candidates = []
    for profile in ("debug", "release"):
        d = root / "target" / profile
        candidates += list(d.glob("libirpatch_py.so"))
        candidates += list(d.glob("irpatch_py.so"))
        candidates += list(d.glob("libirpatch_py.dylib"))
    if not candidates:
        sys.exit("irpatch_py cdylib not found; run `cargo build -p irpatch-py` first")
    path = max(candidates, key=lambda p: p.stat().st_mtime)
    spec = importlib.util.spec_from_file_location("irpatch_py", path)
    module = importlib.util.module_from_spec(spec)
    spec.loader.exec_module(module)
    return module


def main():
    m = load_module()

    # rendering: a single spot at the center of a 51px patch peaks at mu + s
    side = 51
    px = m.render_gaussian_patch([(25.0, 25.0)], 0.2, 8.0, 0.5, side)
    assert len(px) == side * side
    center = px[25 * side + 25]
    assert abs(center - 0.7) < 1e-12, center

    # total variation of a hand-worked 2x2 patch [[0, 0.5], [0.25, 1]]:
    # isotropic form, sum of sqrt(dx^2 + dy^2) per pixel:
    # sqrt(0.5^2 + 0.25^2) + sqrt(0.5^2) + sqrt(0.75^2)
    tv = m.total_variation(2, [0.0, 0.5, 0.25, 1.0])
    want = math.hypot(0.5, 0.25) + 0.5 + 0.75
    assert abs(tv - want) < 1e-12, tv

    # calibration roundtrip on a noiseless synthetic profile
    amp, cen, sig, base = 10.62, 200.0, 70.07, 23.0
    xs = [4.0 * i for i in range(101)]
    ts = [base + amp * math.exp(-((x - cen) ** 2) / (2 * sig * sig)) for x in xs]
    a, c, s, b, rmse, converged = m.fit_bulb_profile(xs, ts)
    assert converged
    assert abs(a - amp) < 1e-2 * amp and abs(s - sig) < 1e-2 * sig, (a, s)
    assert rmse < 1e-2, rmse
    assert abs(m.temperature_to_intensity(10.62, (15.0, 45.0)) - 0.354) < 1e-12

    # IoU of two unit boxes offset by half a side: overlap 0.5, union 1.5
    assert abs(m.iou((0, 0, 1, 1), (0.5, 0, 1, 1)) - 1.0 / 3.0) < 1e-12

    # AP hand case: FP at conf 0.95 then TP at 0.9 over one GT box -> 0.5
    ap = m.average_precision(
        [(0, (100, 100, 10, 10), 0.95), (0, (0, 0, 10, 10), 0.9)],
        [(0, (0, 0, 10, 10))],
    )
    assert abs(ap - 0.5) < 1e-12, ap

    # scene synthesis feeds the detector
    h, w, pixels, persons = m.synth_scene(7)
    assert h == w and len(pixels) == h * w and persons
    dets = m.toy_detect(h, w, pixels)
    assert dets and dets[0][4] > 0.5, dets[:1]

    # board export maps the 300px canvas onto 35cm
    bulbs, warnings = m.export_board([(150.0, 150.0), (30.0, 270.0)], 300, 35.0, 1.0)
    assert len(bulbs) == 2
    assert abs(bulbs[0][1] - 17.5) < 1e-9 and abs(bulbs[0][2] - 17.5) < 1e-9

    print("smoke test passed")


if __name__ == "__main__":
    main()
