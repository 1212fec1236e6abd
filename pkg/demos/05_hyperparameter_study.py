#!/usr/bin/env python3
"""How the two defense knobs trade detection off against collateral damage.

fusion_degree blends each client's model with the round mean before the
unlearning probe (1.0 disables the blend); filter_radius sets how far
above the median score a client may sit before it is dropped. Runs a
small grid on the non-IID split and reports, per setting:

  TPR   malicious updates excluded (%)
  FPR   benign updates excluded (%)
  leak  malicious updates that survived filtering (%)

Also sweeps the proxy size to show detection starving as the probe set
shrinks.
"""

import numpy as np

from masafl.harness import ExperimentConfig, run_experiment


def leak_rate(report):
    vals = []
    for r in report.rounds[len(report.rounds) // 4:]:
        mal = set(r.malicious_sampled)
        if mal:
            vals.append(100 * len(mal & set(r.selected)) / len(mal))
    return float(np.mean(vals))


def run(**masa_overrides):
    base = dict(fusion_degree=0.7, filter_radius=1.0)
    base.update(masa_overrides)
    cfg = ExperimentConfig(
        rounds=40, defense="masa", seed=0,
        distribution="dirichlet", dirichlet_alpha=0.5, masa=base,
    )
    return run_experiment(cfg)


def main():
    print("Dirichlet(0.5), Badnet, 20% malicious\n")
    print(f"{'setting':<22}{'TPR':>8}{'FPR':>8}{'leak':>8}{'BA':>8}")
    for label, overrides in (
        ("fusion 0.7 (default)", {}),
        ("fusion 0.9", {"fusion_degree": 0.9}),
        ("fusion 1.0 (off)", {"fusion_degree": 1.0}),
        ("radius 0.5", {"filter_radius": 0.5}),
        ("radius 1.0 (default)", {}),
        ("radius 2.0", {"filter_radius": 2.0}),
    ):
        rep = run(**overrides)
        s = rep.summary
        print(f"{label:<22}{s['tpr_post_warmup']:>8.1f}{s['fpr_post_warmup']:>8.2f}"
              f"{leak_rate(rep):>8.1f}{s['final_ba']:>8.2f}")

    print("\nshrinking the proxy starves the probe:")
    print(f"{'proxy fraction':<16}{'examples':>9}{'TPR':>8}{'BA':>8}")
    for frac in (0.01, 0.005, 0.0025, 0.001):
        cfg = ExperimentConfig(rounds=40, defense="masa", seed=0,
                               distribution="dirichlet", dirichlet_alpha=0.5,
                               proxy_fraction=frac)
        s = run_experiment(cfg).summary
        n_proxy = max(1, int(np.ceil(frac * 1600)))
        print(f"{frac:<16}{n_proxy:>9}{s['tpr_post_warmup']:>8.1f}{s['final_ba']:>8.2f}")


if __name__ == "__main__":
    main()
