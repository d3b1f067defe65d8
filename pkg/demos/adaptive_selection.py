"""
Per-round strategy selection
============================

Inside each cohort the server forms four candidate models (FedAvg,
FedAdagrad, FedYogi, FedAdam) from the same client drift and keeps the one
whose norm grew the least. The round log records every score.
"""

from collections import Counter

from licfl.cohorting import CohortConfig
from licfl.data import SynthSpec, prepare_clients, synth_generate
from licfl.orchestrator import FederationConfig, run_federation

datasets, _ = synth_generate(SynthSpec(num_clients=12, cohorts=2, samples_per_client=600), seed=2)
clients = prepare_clients(datasets)
cfg = FederationConfig(rounds=12, aggregation="adaptive", cohorting="licfl", cohort=CohortConfig(k_cohorts=2))
res = run_federation(cfg, clients)

for rec in res.logs[:4]:
    for entry in rec.cohorts:
        scores = "  ".join(f"{k}={v:+.4f}" for k, v in entry["scores"].items())
        print(f"round {rec.round} cohort {entry['cohort']}: {scores} -> {entry['chosen']}")

###############################################################################
# How often each strategy won over the whole run.

print(Counter(e["chosen"] for rec in res.logs for e in rec.cohorts))
print("final mse:", round(res.logs[-1].global_mse, 4))
