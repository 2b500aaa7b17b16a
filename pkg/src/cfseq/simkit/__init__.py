"""Confounded longitudinal cohort generators and ground-truth counterfactual rollouts."""
import numpy as np

from .cohort import Cohort, Trajectory, atomic_write_text, load_cohort, save_cohort
from .ehr import EHRGenConfig, apply_treatment_effect, ehr_counterfactual, simulate_ehr_cohort
from .gp import bspline_basis, matern32, rff_function, sample_gp_matern
from .tumor import (
    D_MAX, PKPDParams, TumorConfig, assign_treatment_tumor, diameter_from_volume, sample_pkpd_patient,
    simulate_tumor_cohort, step_tumor, treatment_probability, tumor_counterfactual, tumor_counterfactual_batch,
    volume_from_diameter,
)


def ground_truth_counterfactual(trajectory: Trajectory, t: int, plan) -> list:
    """Potential outcomes ``Y_{t+1..t+len(plan)}`` under the forced ``plan``.

    Re-rolls the generator from the recorded state at ``t`` reusing the
    stored per-step noise, so the factual plan reproduces the factual record.
    """
    if trajectory.sim_state is None:
        raise ValueError(f"unit {trajectory.unit_id} has no sim_state; counterfactuals need a simulated cohort")
    if len(plan) == 0:
        return []
    if t + len(plan) >= len(trajectory.Y):
        raise ValueError(f"origin {t} + horizon {len(plan)} exceeds simulated length {len(trajectory.Y)}")
    gen = trajectory.sim_state["generator"]
    if gen == "tumor":
        return tumor_counterfactual(trajectory, t, plan)
    if gen == "ehr":
        return ehr_counterfactual(trajectory, t, plan)
    raise ValueError(f"unknown generator {gen!r}")


def ground_truth_batch(cohort: Cohort, units, origins, plans):
    """Potential outcomes for many queries; identical values to the per-query path."""
    if not cohort.has_sim_state():
        raise ValueError("cohort has no sim_state; counterfactuals need a simulated cohort")
    plans = np.asarray(plans)
    if len(units) and np.max(np.asarray(origins) + plans.shape[1]) >= cohort.max_len:
        raise ValueError("a query horizon exceeds the simulated length")
    if cohort.generator == "tumor":
        return tumor_counterfactual_batch(cohort, units, origins, plans)
    out = np.empty(plans.shape)
    for r, (i, t) in enumerate(zip(units, origins)):
        out[r] = ground_truth_counterfactual(cohort[int(i)], int(t), plans[r].tolist())
    return out


__all__ = [
    "Cohort", "Trajectory", "save_cohort", "load_cohort", "atomic_write_text", "EHRGenConfig",
    "apply_treatment_effect", "simulate_ehr_cohort", "bspline_basis", "matern32", "rff_function",
    "sample_gp_matern", "D_MAX", "PKPDParams", "TumorConfig", "assign_treatment_tumor",
    "diameter_from_volume", "sample_pkpd_patient", "simulate_tumor_cohort", "step_tumor",
    "treatment_probability", "volume_from_diameter", "ground_truth_counterfactual", "ground_truth_batch",
]
