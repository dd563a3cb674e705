"""Memorize 64 synthetic records with the ``overfit`` preset and report the run."""

import argparse
import time

import torch

from mambacad import config, corpus
from mambacad.train import pretrain, tokenize


def moving_average(xs, k=5):
    return [sum(xs[i : i + k]) / k for i in range(len(xs) - k + 1)]


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--log", help="per-step CSV")
    args = p.parse_args()
    torch.set_num_threads(1)
    cfg = config.load(None, "overfit")
    seqs = tokenize(corpus.synthesize(cfg.synth.count, seed=args.seed, distribution=corpus.REFERENCE_DISTRIBUTION))
    t0 = time.time()
    _, hist = pretrain(seqs, cfg.model, cfg.train, log_path=args.log)
    ma = moving_average(hist.losses[:200])
    rises = [i for i in range(len(ma) - 1) if not ma[i + 1] < ma[i]]
    print(f"{len(hist.steps)} steps in {time.time() - t0:.0f} s; stopped early: {hist.stopped_early}")
    for step, a_c, a_p in hist.evals:
        print(f"step {step:5d}  A_c {a_c:.4f}  A_p {a_p:.4f}")
    print(f"moving-average rises in the first 200 steps: {rises or 'none'}")


if __name__ == "__main__":
    main()
