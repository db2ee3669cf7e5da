"""Smoke test for the crowdtruth Python bindings."""

import math

import crowdtruth


def main():
    assert abs(crowdtruth.reputation_update(0.5, 1.0) - 0.509) < 1e-12
    assert abs(crowdtruth.reputation_update(0.5, 0.0) - 0.47) < 1e-12
    assert math.isclose(crowdtruth.implication((1.0, 2.0), (2.0, 4.0)), 1.0)
    assert crowdtruth.implication((0.0, 0.0), (1.0, 1.0)) == 0.0
    assert all(math.isclose(a, b) for a, b in zip(crowdtruth.feature(130.0, 100.0, 0.1), (10.0, 20.0)))

    td = crowdtruth.TruthDiscovery(3, 1, "rho = 0.05")
    out = td.run_slot(1, [(1, 1, 100.0), (2, 1, 100.0), (3, 1, 140.0)], [100.0])
    assert out.converged and len(out.records) == 3
    assert out.records[0].kept and not out.records[2].kept
    assert td.reputations[0] > 0.5 > td.reputations[2]
    assert td.malicious() == [False, False, True]

    try:
        crowdtruth.TruthDiscovery(3, 1, "gamma = 2.0")
    except ValueError:
        pass
    else:
        raise AssertionError("invalid config accepted")

    world = crowdtruth.simulate(seed=5)
    assert len(world.truth) == 120 and len(world.truth[0]) == 32
    assert len(world.reports) == 3000 and sum(world.malicious) == 10

    rows = crowdtruth.run_experiment("methods = ['prbtd', 'cnb']", repetitions=1)
    assert [r[0] for r in rows] == ["prbtd", "cnb"]
    for name, f1, rd, nrr, runs, failures in rows:
        print(f"{name}: f1={f1:.3f} rd={rd:.3f} nrr={nrr:.3f} runs={runs} failures={failures}")
    print("python smoke test passed")


if __name__ == "__main__":
    main()
