"""
Recovering an SFTP upload from a capture and two memory snapshots
=================================================================

Run with ``python notebooks/01_walkthrough.py``. Everything is synthesized,
so the script needs no external data.
"""

# %%
# A fixture session: PuTTY-style client uploading a small text file over
# aes256-ctr, plus client memory captured after the 1st and 2nd outgoing
# encrypted packets.
from memscry.capture import ingest_pcap
from memscry.fixtures import FixtureSpec, planted_addresses, synth_memory, synth_session
from memscry.model import C2S, S2C, Mode

spec = FixtureSpec(mode=Mode.CTR, key_length_bits=256, file_size=4000, memory_size=4 << 20, seed=7)
pcap, truth = synth_session(spec)
snaps = [synth_memory(spec, truth, p) for p in spec.snapshot_positions]
capture = ingest_pcap(pcap)
print(capture.summary())

# %%
# Counter search: the client-to-server counter advanced by exactly the number
# of cipher blocks sent between the two snapshots.
from memscry.capture import count_cipher_blocks, packets_sent_before
from memscry.memory import scan_ctr_iv_candidates

delta = count_cipher_blocks(capture, C2S, 1, 2)
ivs = scan_ctr_iv_candidates(snaps[0], snaps[1], delta)
where = planted_addresses(spec, truth)
print(f"delta = {delta} blocks, {len(ivs)} counter candidates")
for c in ivs:
    tag = "true IV" if c.address == where[("iv", C2S)] else "lockstep copy"
    print(f"  {c.address:#x}  {c.value.hex()}  {tag}")

# %%
# Key search: static, high-entropy 32-byte segments.
from memscry.memory import scan_key_candidates

keys = scan_key_candidates(snaps[0], snaps[1], 32)
print(f"{len(keys)} key candidates; planted key among them: {truth.key(C2S) in {k.value for k in keys}}")

# %%
# Pair candidates until two consecutive packets decrypt to sane headers.
from memscry.decrypt import search_valid_combination

match = search_valid_combination(keys, ivs, capture, C2S,
                                 {s.snapshot_id: s.captured_after_packet for s in snaps})
print(f"valid after {match.tried_combinations} trials; key {match.keys.key.hex()}")
print(f"initial IV rebased to {match.keys.initial_iv.hex()} (truth {truth.initial_ivs['c2s']})")

# %%
# The whole pipeline in one call, both directions, then the plaintext.
from memscry.decrypt import decrypt_session
from memscry.protocols import summary_text

s2c_ivs = scan_ctr_iv_candidates(snaps[0], snaps[1],
                                 count_cipher_blocks(capture, S2C,
                                                     packets_sent_before(capture, C2S, 1, S2C),
                                                     packets_sent_before(capture, C2S, 2, S2C)),
                                 direction=S2C)
positions = {d: {s.snapshot_id: packets_sent_before(capture, C2S, s.captured_after_packet, d) for s in snaps}
             for d in (C2S, S2C)}
plaintext, report = decrypt_session(capture, keys, {C2S: ivs, S2C: s2c_ivs}, positions)
print(summary_text(plaintext))
print("sha256 match:", plaintext.files[0].sha256 == truth.file_sha256)
