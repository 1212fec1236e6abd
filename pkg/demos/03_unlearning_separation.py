#!/usr/bin/env python3
"""The signal behind the defense: unlearning losses separate the cohorts.

Every round the server rebuilds each client's model, blends it with the
round mean, and gradient-ascends it on a small clean proxy while summing
the losses it observes. Backdoored models shed the main task much faster,
so their accumulated loss towers over the benign cluster round after
round. This prints that separation as a text-mode range chart.
"""

from masafl.harness import ExperimentConfig, run_experiment


def bar(lo, hi, scale, width=44):
    a, b = int(lo * scale), max(int(hi * scale), int(lo * scale) + 1)
    return " " * min(a, width) + "#" * max(min(b, width) - a, 1)


def main():
    cfg = ExperimentConfig(rounds=30, defense="masa", seed=0)
    report = run_experiment(cfg)

    print("accumulated unlearning loss per round (b = benign range, M = malicious range)\n")
    for r in report.rounds:
        if r.round_index % 3 != 0:
            continue
        a = r.unlearning["accumulated_losses"]
        mal = [a[i] for i in r.malicious_sampled]
        ben = [a[i] for i in r.sampled if i not in r.malicious_sampled]
        scale = 40.0 / max(max(mal), max(ben))
        print(f"r{r.round_index:>3} ben [{min(ben):7.3f} {max(ben):7.3f}] "
              f"{bar(min(ben), max(ben), scale).replace('#', 'b')}")
        print(f"     mal [{min(mal):7.3f} {max(mal):7.3f}] "
              f"{bar(min(mal), max(mal), scale).replace('#', 'M')}")

    rounds = report.rounds[9:]
    separated = sum(
        min(r.unlearning["accumulated_losses"][i] for i in r.malicious_sampled)
        > max(r.unlearning["accumulated_losses"][i] for i in r.sampled if i not in r.malicious_sampled)
        for r in rounds
    )
    print(f"\nrounds 10+ with min(malicious) > max(benign): {separated}/{len(rounds)}")
    s = report.summary
    print(f"detection so far: TPR {s['tpr_post_warmup']:.1f}%  FPR {s['fpr_post_warmup']:.2f}%  "
          f"final BA {s['final_ba']:.2f}%")


if __name__ == "__main__":
    main()
