#!/usr/bin/env python3
"""Every aggregation rule against every attack, side by side.

Runs the six attack presets against the unlearning defense and the
baselines, then prints a summary in the usual method-by-metric layout.
Lower BA and higher RA is better; fedavg_star is the oracle upper bound.
"""

from masafl.attacks import AttackSpec
from masafl.harness import ExperimentConfig, run_experiment

DEFENSES = ("fedavg", "fedavg_star", "rfa", "multi_krum", "rlr", "masa")
ATTACKS = ("badnet", "dba", "scaling", "pgd", "neurotoxin", "lie")


def main():
    print("running the full matrix at desk scale (this takes a minute or two) ...\n")
    rows = {}
    for defense in DEFENSES:
        cells = []
        for attack in ATTACKS:
            cfg = ExperimentConfig(
                rounds=40, defense=defense, seed=0, attack=AttackSpec(kind=attack)
            )
            s = run_experiment(cfg).summary
            cells.append((s["final_ba"], s["final_ra"]))
        rows[defense] = cells

    print(f"{'defense':<12}" + "".join(f"{a:>16}" for a in ATTACKS))
    print(f"{'':<12}" + f"{'BA /    RA':>16}" * len(ATTACKS))
    for defense, cells in rows.items():
        line = f"{defense:<12}"
        for ba, ra in cells:
            line += f"{ba:>7.1f}/{ra:>7.1f} "
        print(line)

    print("\nreading guide: the fedavg row shows each attack's raw strength;")
    print("masa should track fedavg_star (BA near zero, RA near the oracle).")


if __name__ == "__main__":
    main()
