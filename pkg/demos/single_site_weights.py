"""Balancing weights for a single site, step by step.

Builds a synthetic trial whose covariates are shifted away from the target
population, solves the balancing program at several regularization levels,
and shows the imbalance / effective-sample-size trade-off together with the
resulting effect estimates.

Run:  python demos/single_site_weights.py
"""

import numpy as np

from sitetransport import (
    BalanceProblem,
    FeatureMap,
    TargetSpec,
    UnitRecord,
    fit_feature_map,
    naive_estimate,
    solve_weights,
    validate_dataset,
    weighting_estimate,
)

rng = np.random.default_rng(42)

# --- a site whose covariates sit below the target's -------------------------
n, d = 300, 5
X = rng.normal(0.0, 1.0, size=(n, d))
z = (rng.random(n) < 0.5).astype(int)
cate = 0.5 + 0.4 * X[:, 0]          # effect rises with the first covariate
y = X @ rng.normal(0.3, 0.2, d) + z * cate + rng.normal(0, 0.5, n)

records = [
    UnitRecord(covariates=tuple(X[i]), treatment=int(z[i]), outcome=float(y[i]), site_id="demo")
    for i in range(n)
]
(site,) = validate_dataset(records)

# target population centered half a standard deviation higher
target = TargetSpec.from_sample(rng.normal(0.5, 1.0, size=(500, d)))

true_transported = float(np.mean(0.5 + 0.4 * target.sample[:, 0]))
print(f"site ATE (naive):          {naive_estimate(site).estimate:+.3f}")
print(f"true transported effect:   {true_transported:+.3f}\n")

# --- solve the balancing program along a small grid --------------------------
fmap = fit_feature_map(FeatureMap(standardize=True), np.vstack([X, target.sample]))

print(f"{'lambda':>10} {'target imb.':>12} {'arm imb.':>10} {'ESS':>8} {'estimate':>10}")
for lam in (1e-4, 0.03, 0.3, 3.0, 1e6):
    prob = BalanceProblem(site=site, target=target, lam=lam, cate_map=fmap, prognostic_map=fmap)
    ws = solve_weights(prob)
    est = weighting_estimate(site, ws.gamma)
    print(
        f"{lam:>10g} {ws.cate_imbalance:>12.4f} {ws.prognostic_imbalance:>10.4f}"
        f" {ws.ess:>8.1f} {est.estimate:>+10.3f}"
    )

print(
    "\nSmall lambda buys covariate balance (the estimate moves toward the"
    "\ntransported truth) at the price of effective sample size; huge lambda"
    "\nreturns uniform weights and reproduces the naive estimate."
)
