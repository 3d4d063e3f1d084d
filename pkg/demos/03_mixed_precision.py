"""Per-block bit widths for a small residual network.

Each of the six basic blocks picks a precision from {1, 2, 4, 8, 32} bits
for both weights and activations. The loss multiplies cross-entropy by a
log-size factor, so the search trades bits for accuracy; the finalized
result is compared with the all-32-bit network.
"""
from dnasforge.data import split_dataset, synth_blobs
from dnasforge.engine import SearchConfig, finalize, run_dnas
from dnasforge.rng import Rng
from dnasforge.spaces import mixed_precision_space

net = mixed_precision_space(rng=Rng(0))
train, held = split_dataset(synth_blobs(400, 4, 8, 0.1, seed=0), 0.75, 1)
w, theta = split_dataset(train, 0.8, 0)
cfg = SearchConfig(loss="quant_size", gamma=1.0, epochs=20, t0=1.0, theta_lr=0.1, samples_to_draw=0)

result = run_dnas(net, w, theta, cfg)
print(f"size factor calibrated to beta = {result.quant_beta:.4f}")
chosen = result.samples[-1].arch
full = net.arch_from_indices([len(l.candidates) - 1 for l in net.search_layers])
bits = [net.search_layers[i].candidates[j].weight_bits for i, j in enumerate(chosen.indices)]
print(f"searched bit widths per block: {bits}")

found, base = finalize(net, [chosen, full], train, held, cfg)
print(f"all 32-bit: accuracy {base.accuracy:.3f}, {base.size_cost / 8 / 1024:.1f} KiB of weights")
print(f"searched  : accuracy {found.accuracy:.3f}, {found.size_cost / 8 / 1024:.1f} KiB of weights "
      f"({base.size_cost / found.size_cost:.1f}x smaller)")
