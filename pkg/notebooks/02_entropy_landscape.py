"""
How many segments look like keys?
=================================

Entropy exceedance on synthetic process memory, and what each key-length
threshold leaves to try. Run with ``python notebooks/02_entropy_landscape.py``.
"""

# %%
import numpy as np

from memscry.fixtures import FixtureSpec, synth_memory, synth_session
from memscry.memory import EntropyConfig, entropy_histogram, scan_key_candidates, shannon_entropy

spec = FixtureSpec(seed=3, memory_size=8 << 20)
_, truth = synth_session(spec)
snaps = [synth_memory(spec, truth, p) for p in spec.snapshot_positions]

# %%
# A 32-byte segment tops out at log2(32) = 5 bits, so a threshold of 4.65
# only admits segments with few repeated bytes.
print(shannon_entropy(bytes(32)), shannon_entropy(bytes(range(32))), shannon_entropy(bytes(range(8)) * 2))

# %%
# Fraction of 32-byte segments above each entropy level.
edges = np.arange(0.0, 5.01, 0.5)
hist = entropy_histogram(snaps[0], 32, edges, 4)
for e, c in zip(hist.bucket_edges, hist.counts):
    frac = c / hist.total_segments
    print(f"> {e:3.1f}  {frac:7.2%}  {'#' * int(round(frac * 60))}")

# %%
# Candidate counts at the default threshold per key length. Shorter keys
# have a lower ceiling (log2 16 = 4) so more noise clears their threshold.
for klen in (16, 24, 32):
    found = scan_key_candidates(snaps[0], snaps[1], klen)
    print(f"{klen * 8}-bit keys: {len(found)} candidates")

# %%
# Candidate count as the 32-byte threshold rises.
for t in (4.0, 4.3, 4.5, 4.65, 4.8, 4.9):
    cfg = EntropyConfig(threshold_128=min(t, 3.4), threshold_192=min(t, 4.0), threshold_256=t)
    print(f"threshold {t:4.2f}: {len(scan_key_candidates(snaps[0], snaps[1], 32, cfg))}")
