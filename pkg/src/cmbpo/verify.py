"""Batch verification of the theoretical bounds on random finite CMDPs.

Runs the exact-analysis checks over seeded random instances and writes one
line-delimited record per instance plus a summary with violation counts,
minimum slack, and tightness quantiles.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .analysis import (
    boundary_report,
    error_term_check,
    lemma_state_dist_check,
    random_instance,
    return_identity_check,
)

SUITES = ("boundary", "lemma", "identity", "all")


def run_verification(suite: str, trials: int, seed: int,
                     out_dir: str | Path | None = None,
                     equal_policies: bool = False) -> dict:
    """Execute one suite; returns the summary dict (also written to disk)."""
    if suite not in SUITES:
        raise ValueError(f"suite must be one of {SUITES}")
    if trials < 1:
        raise ValueError("trials must be >= 1")

    records = []
    violations = 0
    slacks = []
    tightness = []
    identity_residuals = []
    root = np.random.SeedSequence(seed)
    for i, child in enumerate(root.spawn(trials)):
        rng = np.random.default_rng(child)
        inst = random_instance(rng, equal_policies=equal_policies)
        record: dict = {"seed": seed, "index": i,
                        "n_states": inst.cmdp.n_states,
                        "n_actions": inst.cmdp.n_actions,
                        "gamma": inst.cmdp.discount}
        ok = True

        if suite in ("boundary", "all"):
            for sig in ["reward"] + list(range(inst.cmdp.n_costs)):
                rep = boundary_report(inst.cmdp, inst.model_kernel,
                                      inst.policy_old, inst.policy_new, sig)
                tag = "reward" if sig == "reward" else f"cost{sig}"
                record[f"eps_pi"] = rep.eps_pi
                record[f"eps_m"] = rep.eps_m
                record[f"delta_j_{tag}"] = rep.delta_j
                record[f"lower_{tag}"] = rep.lower
                record[f"upper_{tag}"] = rep.upper
                record[f"holds_{tag}"] = rep.holds
                ok = ok and rep.holds
                slacks.append(min(rep.delta_j - rep.lower, rep.upper - rep.delta_j))
                width = rep.upper - rep.lower
                if width > 0:
                    tightness.append(abs(rep.delta_j - rep.l_m / (1 - inst.cmdp.discount))
                                     / (width / 2))
            e1, e2 = error_term_check(inst.cmdp, inst.model_kernel,
                                      inst.policy_old, inst.policy_new)
            record["error_terms_ok"] = bool(e1 and e2)
            ok = ok and e1 and e2

        if suite in ("lemma", "all"):
            rep = lemma_state_dist_check(inst.cmdp, inst.model_kernel,
                                         inst.policy_old, inst.policy_new)
            record["lemma_lhs"] = rep.lhs_l1
            record["lemma_rhs"] = rep.rhs_bound
            record["holds_lemma"] = rep.holds
            ok = ok and rep.holds
            slacks.append(rep.rhs_bound - rep.lhs_l1)
            if rep.rhs_bound > 0:
                tightness.append(rep.lhs_l1 / rep.rhs_bound)

        if suite in ("identity", "all"):
            f = rng.uniform(-10.0, 10.0, size=inst.cmdp.n_states)
            residual = return_identity_check(inst.cmdp, inst.policy_old, f)
            record["identity_residual"] = residual
            identity_residuals.append(residual)
            ok = ok and residual < 1e-9

        record["holds"] = bool(ok)
        if not ok:
            violations += 1
        records.append(record)

    summary = {
        "suite": suite,
        "trials": trials,
        "seed": seed,
        "equal_policies": equal_policies,
        "violations": violations,
        "min_slack": float(np.min(slacks)) if slacks else None,
        "tightness_quantiles": {
            q: float(np.quantile(tightness, float(q)))
            for q in ("0.5", "0.9", "0.99")
        } if tightness else None,
        "max_identity_residual": float(np.max(identity_residuals))
        if identity_residuals else None,
    }

    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / f"verify_{suite}.jsonl", "w") as fh:
            for rec in records:
                fh.write(json.dumps(rec, sort_keys=True) + "\n")
        with open(out / f"verify_{suite}_summary.json", "w") as fh:
            json.dump(summary, fh, indent=2, sort_keys=True)
    return summary
