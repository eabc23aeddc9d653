"""Smoke test for the hurdlecast extension module.

    pip install --no-build-isolation ./crates/python
    python python/smoke_test.py
"""

import math
import tempfile
from pathlib import Path

import hurdlecast as hc


def main():
    # scalar helpers
    assert abs(hc.marginal_mean(0.6, 0.3, 2.5) - 0.6 * 0.3 * 2.5 / (1 - math.exp(-2.5))) < 1e-12
    total = hc.joint_probability(0.6, 0.3, 2.5, 0, False) + sum(
        hc.joint_probability(0.6, 0.3, 2.5, y, True) for y in range(200)
    )
    assert abs(total - 1) < 1e-12, total
    assert abs(hc.tadda_term(-0.2, 0.5) - 0.9) < 1e-15
    assert hc.calibration_loss([0.0, 1.0], [0.0, 1.0]) == 0.0

    spec = hc.ModelSpec.default()
    assert hc.ModelSpec.from_toml(spec.to_toml()).hash() == spec.hash()

    panel = hc.Panel.simulate(countries=4, cells=5, months=40, seed=3)
    assert len(panel) == 4 * 5 * 40
    first, last = panel.month_range()

    with tempfile.TemporaryDirectory() as d:
        path = Path(d) / "panel.csv"
        panel.write_csv(path)
        assert len(hc.Panel.read_csv(path)) == len(panel)

        model = hc.HurdleModel.fit(panel, lag=2, through=last - 1, seed=1)
        assert model.train_months[1] == last - 1
        est, se = model.coefficient(1, "(Intercept)")
        assert math.isfinite(est) and se > 0

        tau1, tau2, loss = model.calibrate(panel, month=last, seed=5, population=20, generations=50)
        assert 0 <= tau1 <= 1 and 0 <= tau2 <= 1 and loss >= 0
        assert model.thresholds == (tau1, tau2)

        model.save(Path(d) / "model.hcm")
        again = hc.HurdleModel.load(Path(d) / "model.hcm")
        assert again.thresholds == model.thresholds

    preds = model.predict(panel, last)
    assert len(preds["pi1"]) == 20
    assert all(0 < p < 1 for p in preds["pi1"] + preds["pi2"])

    forecast = model.forecast(panel)
    assert set(forecast["month"]) == {last + 2}
    assert all(y == 0 or y == lam for y, lam in zip(forecast["yhat"], forecast["lambda3"]))

    scores = hc.evaluate(panel, months=[last], steps=[2, 3], seed=2, population=20, generations=40)
    assert [s["s"] for s in scores] == [2, 3]
    assert all(math.isfinite(s["mse"]) for s in scores)
    print("hurdlecast", hc.__version__, "smoke test passed")


if __name__ == "__main__":
    main()
