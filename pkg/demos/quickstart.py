"""
Fitting every quantile at once
==============================

Train one lattice model on a skewed toy problem, then look at a few of its
quantile curves. Runs in a few seconds.
"""

import numpy as np

from qrlattice import (FeatureSpec, ModelConfig, SimSpec, TauDistribution, TrainConfig, build_report, fit,
                       generate_sim, init_model, location_scale_residual, predict_curve)

# 3 sin(pi x) plus right-skewed noise; ``oracle`` gives the true conditional quantiles
train = generate_sim(SimSpec(n=1000, seed=0, a=1.0, b=3.0))
test = generate_sim(SimSpec(n=2000, seed=1, a=1.0, b=3.0))

# tau is a model input. Three knots along tau let the curve shape change with x
config = ModelConfig([FeatureSpec("x", bounds=(-1, 1), keypoints=2, lattice_knots=12)],
                     tau_knots=3, tau_calibrator_keypoints=6,
                     output_range=tuple(np.quantile(train.y, [0.01, 0.99])))
model = init_model(config, 0)

# expected pinball loss with tau drawn uniformly at every step
model, history = fit(model, train, None, TrainConfig(epochs=150, batch_size=100, learning_rate=0.02,
                                                     tau_dist=TauDistribution.uniform(), seed=0))
print("final training loss:", round(history.rows[-1]["loss"], 4))

report = build_report(model, test)
print("mean pinball on test:", round(report.pinball_mean, 4))
print("quantile MSE vs truth:", round(report.quantile_mse, 4))
print("crossing rate:", report.crossing_rate)  # zero by construction

# %%
# A few curves at three x values; rows increase along tau for every x
taus = [0.1, 0.25, 0.5, 0.75, 0.9]
for x in (-0.8, 0.0, 0.8):
    got = predict_curve(model, [x], taus)
    want = test.oracle(np.array([[x]]), taus)[0]
    print(f"x={x:+.1f}", " ".join(f"{g:6.2f}" for g in got), "| truth", " ".join(f"{w:6.2f}" for w in want))

# %%
# With two tau knots the model can only shift and stretch one shared curve
config2 = ModelConfig(config.features, tau_knots=2, tau_calibrator_keypoints=6, output_range=config.output_range)
model2, _ = fit(init_model(config2, 0), train, None, TrainConfig(epochs=150, batch_size=100, learning_rate=0.02))
print("location-scale residual, 2 knots:", location_scale_residual(model2, test.X[:200], taus))
print("location-scale residual, 3 knots:", location_scale_residual(model, test.X[:200], taus))
