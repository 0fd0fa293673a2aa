"""Reference solves for four-step leader problems with binding storage.

Each instance is drawn at random, its revenue is expanded symbolically from
the provider's cash flow (SES sales minus grid purchases, with the
retailer's optimal aggregate substituted in), and the resulting concave QP
is solved with CVXPY/Clarabel at tight tolerances. Instances where no
storage constraint binds are redrawn.

Writes leader_h4.json next to this file. Run with:

    python3 leader_h4.py
"""

import json
import pathlib

import cvxpy as cp
import numpy as np
import sympy as sp

H = 4
COUNT = 10
SEED = 20240611


def step_revenue():
    """Revenue at one step as a quadratic in (p, e): returns a function of
    (phi, delta, en, s) giving (Hessian, gradient)."""
    p, e, phi, delta, en, s = sp.symbols("p e phi delta en s", real=True)
    y = ((p - delta) / phi - en - e) / 2
    grid_price = phi * (e + en + y) + delta
    revenue = sp.expand(-p * (y + s) - grid_price * e)
    z = [p, e]
    hess = sp.hessian(revenue, z)
    grad0 = [sp.diff(revenue, v).subs({p: 0, e: 0}) for v in z]
    const = revenue.subs({p: 0, e: 0})
    assert sp.simplify(const) == 0
    f = sp.lambdify((phi, delta, en, s), (hess, grad0), "numpy")
    return lambda *a: tuple(np.array(x, dtype=float) for x in f(*a))


def draw(rng):
    phi = rng.uniform(0.05, 0.6, H)
    delta = rng.uniform(2.0, 12.0, H)
    en = rng.uniform(2.0, 20.0, H)
    s = np.where(rng.random(H) < 0.5, rng.uniform(-8.0, -0.5, H), rng.uniform(0.5, 8.0, H))
    bounds, kinds, flows = [], [], []
    for t in range(H):
        if s[t] < 0:
            lo, hi, kind = 0.0, -s[t], "deficit"
            flows.append({"charge": 0.0, "discharge": rng.uniform(0.0, -s[t])})
        else:
            lo, hi, kind = -s[t], 0.0, "surplus"
            flows.append({"charge": rng.uniform(0.0, s[t]), "discharge": 0.0})
        bounds.append({"lo": lo, "hi": hi, "lo_family": "allocation-bounds", "hi_family": "allocation-bounds"})
        kinds.append(kind)
    capacity = rng.uniform(3.0, 10.0)
    ses = {
        "capacity": capacity,
        "leakage": rng.uniform(0.85, 1.0),
        "charge_eff": rng.uniform(0.8, 1.0),
        "discharge_eff": rng.uniform(1.0, 1.25),
        "initial_charge": rng.uniform(0.1, 0.9) * capacity,
    }
    return {
        "phi": phi.tolist(),
        "delta": delta.tolist(),
        "non_participant_load": en.tolist(),
        "declared_total": s.tolist(),
        "step_type": kinds,
        "payoff_case": ["non-negative"] * H,
        "bounds": bounds,
        "user_flows": flows,
        "storage": ses,
        "exchange_bounds": None,
        "p_min": 0.1,
    }


def solve(prob, quad):
    p = cp.Variable(H)
    e = cp.Variable(H)
    v = cp.Variable(H)
    ses = prob["storage"]
    objective = 0
    cons = [p >= prob["p_min"], v >= 0, e + v >= 0]
    storage_rows = []
    b = ses["initial_charge"]
    for t in range(H):
        hess, grad = quad(prob["phi"][t], prob["delta"][t], prob["non_participant_load"][t], prob["declared_total"][t])
        z = cp.hstack([p[t], e[t]])
        objective += 0.5 * cp.quad_form(z, hess, assume_PSD=False) + grad @ z
        y = ((p[t] - prob["delta"][t]) / prob["phi"][t] - prob["non_participant_load"][t] - e[t]) / 2
        cons += [y >= prob["bounds"][t]["lo"], y <= prob["bounds"][t]["hi"]]
        f = prob["user_flows"][t]
        b = ses["leakage"] * b + ses["charge_eff"] * (e[t] + v[t] + f["charge"]) - ses["discharge_eff"] * (v[t] + f["discharge"])
        if t < H - 1:
            storage_rows.append((t, b))
            cons += [b >= 0, b <= ses["capacity"]]
        else:
            cons += [b == ses["initial_charge"]]
    problem = cp.Problem(cp.Maximize(objective), cons)
    problem.solve(
        solver=cp.CLARABEL,
        tol_gap_abs=1e-12,
        tol_gap_rel=1e-12,
        tol_feas=1e-12,
        max_iter=500,
    )
    if problem.status != cp.OPTIMAL:
        return None
    active = [
        t
        for t, expr in storage_rows
        if min(expr.value, ses["capacity"] - expr.value) < 1e-6
    ]
    return {
        "objective": problem.value,
        "price": p.value.tolist(),
        "exchange": e.value.tolist(),
        "active_storage_steps": active,
    }


def main():
    rng = np.random.default_rng(SEED)
    quad = step_revenue()
    cases = []
    while len(cases) < COUNT:
        prob = draw(rng)
        sol = solve(prob, quad)
        if sol is None or not sol["active_storage_steps"]:
            continue
        cases.append({"problem": prob, **sol})
    out = pathlib.Path(__file__).with_name("leader_h4.json")
    out.write_text(json.dumps({"seed": SEED, "cases": cases}, indent=1) + "\n")
    print(f"wrote {len(cases)} cases to {out}")


if __name__ == "__main__":
    main()
