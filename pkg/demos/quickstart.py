"""Train a small model on synthetic sessions and score its reactions.

Runs in a couple of minutes on one CPU.
"""

from reactgen.cli import evaluate
from reactgen.core import GenerationConfig
from reactgen.data import synth_corpus
from reactgen.generator import TrainConfig, generate_session, train
from reactgen.score_net import NetConfig, ScoreNet


def main():
    corpus = synth_corpus(8, 2, w=16, windows_per_session=8, seed=0)
    held_out = synth_corpus(2, 2, w=16, windows_per_session=8, seed=1)

    net = ScoreNet(NetConfig(hidden=32, embed=16), seed=0)
    log = train(corpus, net, hyper=TrainConfig(iterations=300, seed=0))
    dm = log.column("dm")
    print(f"L_dm: first 10 iterations {dm[:10].mean():.3f}, last 10 {dm[-10:].mean():.3f}")

    for solver in ("sde_2m", "ode_2m"):
        cfg = GenerationConfig(m_samples=3, seed=0, solver=solver)
        generated = [generate_session(s, net, cfg) for s in held_out]
        report = evaluate(generated, held_out, 48)[0]
        print(solver, "  ".join(f"{k} {v:.4f}" for k, v in report.items()))


if __name__ == "__main__":
    main()
