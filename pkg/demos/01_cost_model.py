"""Counting cost: MACs, parameters, memory traffic and synthetic latency.

Prints the reference convolution table, then the candidates of one search
layer with their MACs and synthetic latency under the MAC-only model and
the model that also charges for parameters and activations moved.
"""
from dnasforge.cost import block_latency_model, macs_of, synth_lut, table_2_2_report
from dnasforge.rng import Rng
from dnasforge.spaces import fbnet_space

print(table_2_2_report().format())
print("\nDepthwise layers do the fewest MACs per byte moved; pointwise layers sit in between.\n")

net = fbnet_space(rng=Rng(0))
layer = net.search_layers[2]
rows = []
for block in layer.candidates:
    cfgs = block.layer_configs()
    rows.append((str(block.key).split("|")[0], block.key.kernel, block.key.expansion,
                 sum(macs_of(c) for c in cfgs),
                 block_latency_model(cfgs, "analytic_macs"), block_latency_model(cfgs, "macs_plus_memory")))

print(f"candidates of layer {layer.name}:")
print(f"{'type':8} {'k':>2} {'e':>2} {'MACs':>12} {'lat(macs)':>10} {'lat(+mem)':>10}")
for r in sorted(rows, key=lambda r: r[3]):
    print(f"{r[0]:8} {r[1]:>2} {r[2]:>2} {r[3]:>12,} {r[4]:>10.2f} {r[5]:>10.2f}")

lut = synth_lut(net, "macs_plus_memory")
print(f"\nA synthetic table for the whole space has {len(lut)} entries;")
arch = net.argmax_arch()
print(f"the uniform-theta argmax architecture costs {net.net_latency(arch, lut):.1f} us under it.")
