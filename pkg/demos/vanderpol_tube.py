"""Build a reach-tube around the Van der Pol expert and check fresh rollouts against it.

Run:  python3 demos/vanderpol_tube.py [out_dir]
Writes tube.json and tube.svg to out_dir (default: demo_out/).
"""

import sys
from pathlib import Path

import numpy as np

from tubedagger.envs import batch_rollout, make_system
from tubedagger.plotting import tube_plot
from tubedagger.policies import default_expert
from tubedagger.reachtube import TubeConfig, build_tube, containment_fraction, sample_initial_surface, save_tube
from tubedagger.rng import make_rng


def main(out_dir="demo_out"):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    system = make_system("vanderpol")
    expert = default_expert(system)

    tube = build_tube(system, expert, TubeConfig(), rng_seed=0)
    print(f"{len(tube)} slices, {tube.source['n_traces']} traces, min cap coverage {tube.source['min_coverage']:.3f}")
    vols = [s.volume_proxy() for s in tube.slices]
    print(f"slice volume proxy: first {vols[1]:.3g}, largest {max(vols):.3g}, last {vols[-1]:.3g}")

    # holdout starts come from an independent stream
    starts = sample_initial_surface(system.x0, system.start_radius, 200, make_rng(1, "holdout"))
    states, _, _, _ = batch_rollout(system, expert, starts)
    frac = containment_fraction(tube, list(states))
    print(f"holdout rollouts fully inside the tube: {frac:.1%}")

    save_tube(out / "tube.json", tube)
    (out / "tube.svg").write_text(tube_plot(tube, every=25, overlay=(0.2, 0.7)))
    print(f"wrote {out / 'tube.json'} and {out / 'tube.svg'}")
    return np.isfinite(frac)


if __name__ == "__main__":
    main(*sys.argv[1:])
