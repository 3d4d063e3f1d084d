"""Latency-aware search on a space small enough to enumerate.

Three layers choose among a 3x3 block, a 5x5 block and a zero block. The
latency table makes every 5x5 block 100x slower than its analytic cost.
The data carries pixel noise, so cross-entropy stays above zero and the
latency factor keeps a grip on the architecture logits.

Single runs are noisy; averaged over seeds, a larger beta ends the search
with a lower expected latency.
"""
import numpy as np

from dnasforge.cost import synth_lut
from dnasforge.data import split_dataset, synth_blobs
from dnasforge.engine import SearchConfig, finalize, run_dnas
from dnasforge.rng import Rng
from dnasforge.spaces import toy_space

net = toy_space(("k3_e1", "k5_e1", "zero"), rng=Rng(0))
lut = synth_lut(net)
lut = lut.scaled({k: 100 for k in lut.entries if "k=5" in k})
train, held = split_dataset(synth_blobs(240, 4, 8, 0.5, seed=0), 0.75, 1)
w, theta = split_dataset(train, 0.8, 0)

for beta in (0.0, 1.2):
    print(f"\nbeta = {beta}")
    finals, picks = [], []
    for seed in range(5):
        cfg = SearchConfig(seed=seed, beta=beta, epochs=20, t0=1.0, theta_lr=0.1, samples_to_draw=0,
                           finalize_epochs=5)
        result = run_dnas(net, w, theta, cfg, lut)
        finals.append(result.trace[-1]["expected_cost"])
        picks.append(result.samples[-1].arch)
        print(f"  seed {seed}: expected latency {finals[-1]:6.1f} us, argmax {picks[-1].indices}")
    print(f"  mean expected latency {np.mean(finals):.1f} us")
    scored = finalize(net, picks, train, held, cfg, lut)
    print("  retrained argmax architectures:")
    for s in scored:
        print(f"    {s.arch.indices}: accuracy {s.accuracy:.3f}, latency {s.latency:.1f} us")
