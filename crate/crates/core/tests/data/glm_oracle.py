import os
import json, numpy as np, statsmodels.api as sm
rng = np.random.default_rng(314159)
n = 400
x = (rng.random(n) < 0.4).astype(float)
z1 = rng.normal(size=n); z2 = rng.normal(size=n)
eta = -1.2 + 0.5 * x + 0.7 * z1 - 0.4 * z2
y = (rng.random(n) < 1 / (1 + np.exp(-eta))).astype(float)
g = 1.0 + 2.0 * x - z1 + rng.normal(size=n)
w = 1 / (0.3 + 0.6 * rng.random(n))
X = np.column_stack([np.ones(n), x, z1, z2])

unw = sm.GLM(y, X, family=sm.families.Binomial()).fit(tol=1e-14)
wtd = sm.GLM(y, X, family=sm.families.Binomial(), var_weights=w).fit(tol=1e-14, cov_type="HC0")
gau = sm.GLM(g, X, family=sm.families.Gaussian()).fit()

def means(b):
    X1 = X.copy(); X1[:, 1] = 1; X0 = X.copy(); X0[:, 1] = 0
    m1 = np.average(1 / (1 + np.exp(-X1 @ b)), weights=w)
    m0 = np.average(1 / (1 + np.exp(-X0 @ b)), weights=w)
    return m1, m0
def contrasts(b):
    m1, m0 = means(b)
    lo = lambda p: np.log(p / (1 - p))
    return np.array([m1 - m0, np.log(m1 / m0), lo(m1) - lo(m0)])
b = wtd.params; V = wtd.cov_params()
J = np.zeros((3, len(b)))
for j in range(len(b)):
    h = 1e-6 * max(1, abs(b[j])); e = np.zeros(len(b)); e[j] = h
    J[:, j] = (contrasts(b + e) - contrasts(b - e)) / (2 * h)
se = np.sqrt(np.diag(J @ V @ J.T))
out = {
  "source": "statsmodels GLM; standardized contrasts by numpy, delta SEs from central differences",
  "x": x.tolist(), "z1": z1.tolist(), "z2": z2.tolist(), "y": y.tolist(), "g": g.tolist(), "w": w.tolist(),
  "logistic": {"coef": unw.params.tolist(), "se": unw.bse.tolist(), "deviance": unw.deviance},
  "weighted_logistic_hc0": {"coef": wtd.params.tolist(), "se": wtd.bse.tolist()},
  "gaussian": {"coef": gau.params.tolist(), "se": gau.bse.tolist(), "scale": gau.scale},
  "standardized": {"mu1": means(b)[0], "mu0": means(b)[1], "mRD": contrasts(b)[0], "mlogRR": contrasts(b)[1], "mlogOR": contrasts(b)[2],
                   "se": se.tolist()},
}
json.dump(out, open(os.path.join(os.path.dirname(os.path.abspath(__file__)), "glm_oracle.json"), "w"))
print(unw.params, wtd.bse, se)
