"""Regenerate the frozen golden trace (tie-line attack, onset 15 s, 0.2138 pu).

Only run this after an intentional change to the plant model.
"""
import json
from importlib import resources

from agc_fdia.attack import AceLimitPolicy, AttackSpec, enforce_ace_limit
from agc_fdia.plant import DisturbanceSpec, ScenarioConfig, default_system

scenario = ScenarioConfig(
    system=default_system(nonlinear_mode=True),
    disturbance=DisturbanceSpec(area=1, magnitude=0.02, start_time=5.0),
    seed=20250315,
)
spec = AttackSpec(target="delta_p_tie", t_start=15.0, f_i=-0.2138, f_f=-0.2138, subtlety="subtle")
checked, trace = enforce_ace_limit(scenario, spec, AceLimitPolicy(), return_trace=True)
assert checked == spec, "golden attack must not need rescaling"

out = {
    "scenario": scenario.to_dict(),
    "attack": spec.to_dict(),
    "trace": {
        "t_s": trace.t.tolist(),
        "delta_f1_pu": trace.delta_f1.tolist(),
        "delta_f2_pu": trace.delta_f2.tolist(),
        "delta_p_tie_pu": trace.delta_p_tie.tolist(),
    },
}
path = resources.files("agc_fdia.data").joinpath("golden_tieline.json")
with open(path, "w") as fh:
    json.dump(out, fh, indent=1)
    fh.write("\n")
print("wrote", path)
