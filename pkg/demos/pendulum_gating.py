"""Train a pendulum novice with tube gating and with the doubt-model baseline.

Run:  python3 demos/pendulum_gating.py [seed]
Prints per-episode progress for both loops and the context switches each
needed before the novice alone reached the solved reward.
"""

import sys

from tubedagger.dagger import TrainConfig, context_switches_until_solved, lazydagger_train, tubedagger_train
from tubedagger.envs import make_system
from tubedagger.gating import DoubtGateConfig, TubeGateConfig
from tubedagger.policies import OptimConfig, default_doubt, default_expert, default_novice
from tubedagger.reachtube import TubeConfig, build_tube
from tubedagger.rng import make_rng


def show(name, metrics):
    for r in metrics:
        print(f"  {name} ep {r.episode:2d}: eval {r.eval_reward_median:7.1f}  collect {r.combined_reward:7.1f}  "
              f"novice {r.novice_action_pct:5.1f}%  switches {r.context_switches_cum:3d}  |D| {r.dataset_size}")
    count, solved = context_switches_until_solved(metrics)
    print(f"  {name}: {'solved' if solved else 'not solved'} after {count} context switches\n")


def main(seed=0):
    seed = int(seed)
    system = make_system("inverted_pendulum")
    expert = default_expert(system)
    tube = build_tube(system, expert, TubeConfig(), rng_seed=0)
    optim = OptimConfig(lr=1e-2)

    cfg = TrainConfig(episodes=30, gate=TubeGateConfig(0.2, 0.7), optim=optim, seed=seed, stop_on_solve=True)
    _, metrics = tubedagger_train(system, expert, default_novice(system, make_rng(seed, "init")), tube, cfg)
    show("tube", metrics)

    cfg = cfg.replace(gate=DoubtGateConfig(0.1, 0.5))
    doubt = default_doubt(system, make_rng(seed, "doubt-init"))
    _, _, metrics = lazydagger_train(system, expert, default_novice(system, make_rng(seed, "init")), doubt, cfg)
    show("doubt", metrics)


if __name__ == "__main__":
    main(*sys.argv[1:])
