"""Compare the 2M samplers against a fine Euler reference on N(0, 1) data.

For unit Gaussian data the posterior mean is known in closed form, so the
sampler error can be measured without a trained network.
"""

import numpy as np

from reactgen.schedule import build_cosine_schedule
from reactgen.solvers import initial_state, solve_euler_reference, solve_ode_2m, solve_sde_2m


def model(x, alpha, sigma):
    return alpha * x / (alpha**2 + sigma**2)


def main():
    probe = np.linspace(-2.0, 2.0, 9)
    print(" T   max |ODE-2M - reference|")
    for T in (10, 20, 40, 80):
        sch = build_cosine_schedule(T)
        ref = solve_euler_reference(probe, sch, model, substeps=10_000 // T * T)
        err = np.max(np.abs(solve_ode_2m(probe, sch, model).final - ref))
        print(f"{T:2d}   {err:.3e}")

    sch = build_cosine_schedule(50)
    rng = np.random.default_rng(0)
    x = solve_sde_2m(initial_state(rng, (10_000,), sch), sch, model, eta=1.0, rng=rng).final
    print(f"SDE-2M, 10^4 draws: mean {x.mean():+.4f}, variance {x.var():.4f}")


if __name__ == "__main__":
    main()
