"""Train the Mamba configuration and ablations A/B/C on the overfit corpus for a fixed step budget."""

import argparse
from dataclasses import replace

import torch

from mambacad import config, corpus
from mambacad.cli import ABLATIONS
from mambacad.train import pretrain, tokenize


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("--steps", type=int, default=600)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    torch.set_num_threads(1)
    cfg = config.load(None, "overfit")
    seqs = tokenize(corpus.synthesize(cfg.synth.count, seed=args.seed, distribution=corpus.REFERENCE_DISTRIBUTION))
    tc = replace(cfg.train, max_steps=args.steps, eval_every=0)
    variants = {"mamba": {}, **ABLATIONS}
    for name, change in variants.items():
        _, hist = pretrain(seqs, replace(cfg.model, **change), tc)
        print(f"{name:6s} final loss {hist.losses[-1]:.4f}")


if __name__ == "__main__":
    main()
