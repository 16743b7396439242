"""Smoke test for the probeopt_py extension module."""

import math

import probeopt_py as po


def main():
    s = po.Scenario.desk()
    pbm, rate = s.sample(combo=0, seed=1)
    assert len(pbm) == s.users * s.aps * 8
    assert all(v >= 0.0 for v in pbm) and rate >= 0.0

    mix = po.MixtureDensity([1.0], [[0.0, 0.0]], [[[1.0, 0.0], [0.0, 1.0]]])
    assert abs(mix.log_density([0.0, 0.0]) + math.log(2 * math.pi)) < 1e-12
    pts = mix.sample(200, seed=3)
    assert len(pts) == 200 and len(pts[0]) == 2

    assert po.mmd(pts, pts, 1.0) <= 1e-12
    assert po.mmd(pts, [[p[0] + 3.0, p[1]] for p in pts]) > 0.0

    sampled = [[1.0, 2.0], [5.0], [3.0, 3.0, 3.0]]
    assert po.fitness_values(sampled) == [1.5, 5.0, 3.0]
    assert po.exhaustive_select(sampled) == 1
    best, fit = po.ga_optimize(sampled, seed=7)
    assert best == 1 and fit == 5.0

    rows = po.generate_dataset("location_sets = 5\nsampled_combos = [2]\n")
    assert {r[2] for r in rows} <= {"train", "validation", "test"}
    assert all(r[1] == 2 for r in rows if r[2] != "test")

    try:
        po.exhaustive_select([[], [1.0]])
    except ValueError as e:
        assert "empty_combinations" in str(e)
    else:
        raise AssertionError("empty combination accepted")
    print("smoke test passed")


if __name__ == "__main__":
    main()
