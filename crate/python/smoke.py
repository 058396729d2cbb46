"""Quick end-to-end check of the Python bindings."""

import json
import math
import tempfile

import oamlink


def main():
    assert abs(oamlink.fidelity_threshold(2) - 0.8900) < 5e-4
    assert oamlink.key_rate(4, 0.0) == 2.0

    g = oamlink.Grid(128, 0.04, 633e-9)
    f = oamlink.Field.oam(g, 2, 3e-3)
    assert abs(f.power() - 1.0) < 1e-9
    z = f.propagate(1.0)
    assert abs(z.power() - 1.0) < 1e-9
    assert abs(oamlink.Field.oam(g, 1, 3e-3).overlap(f)) < 1e-9

    m = oamlink.free_space_crosstalk(g, 2, 3e-3, 1.0)
    print("free-space OAM fidelity", round(m.fidelity(), 6))
    assert m.fidelity() > 0.999

    screen = oamlink.phase_screen(g, 5e-3, 7)
    assert len(screen) == 128 and all(math.isfinite(v) for row in screen for v in row)

    pts = [(x, (1 + 3.4 * x * x) ** -0.5) for x in (0.1, 0.5, 1.0, 2.0)]
    c = oamlink.fit_fidelity_model(pts, "B")
    print("model fit c =", round(c, 4))
    assert abs(c - 3.4) < 1e-3

    s = oamlink.Scenario.preset("lab").with_d_over_r0(0.884)
    s.n_realizations = 2
    s.set_frames(4, 2)
    r = s.run()
    print("lab D/r0", round(r.d_over_r0, 3), "OAM F", round(r.oam_mean, 4),
          "uncorrected", round(r.uncorrected_oam_mean, 4))
    for v in r.verdicts:
        print("  ", v)
    assert json.loads(r.to_json())["seed"] == s.seed

    with tempfile.TemporaryDirectory() as d:
        paths = r.emit(d)
        assert any(str(p).endswith("report.json") for p in paths)

    try:
        oamlink.Scenario.preset("nowhere")
    except ValueError as e:
        print("rejected:", e)
    else:
        raise AssertionError("unknown preset accepted")
    print("ok")


if __name__ == "__main__":
    main()
