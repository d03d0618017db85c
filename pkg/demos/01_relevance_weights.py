#!/usr/bin/env python3
"""From language posteriors to relevance-weighted statistics, one step at a time.

A block whose posterior is peaked (low entropy) keeps its frames; a block that
cannot tell the languages apart is muted. Runs in a few seconds.

    python3 demos/01_relevance_weights.py
"""
import numpy as np

from relid.bwstats import (GammaConfig, accumulate_stats, block_bounds, entropy, gamma_from_entropy,
                           inverse_entropy_fuse, relevance_weights)
from relid.corpus import CorpusConfig, generate_corpus
from relid.pipeline import FrontEndConfig, prepare, train_front_end

L = 3
cfg = GammaConfig.for_languages(L)
print(f"ln L = {np.log(L):.4f}  h_min = {cfg.h_min:.4f}  h_max = {cfg.h_max:.4f}")

print("\n  posterior            H (nats)  gamma")
for p in ([0.98, 0.01, 0.01], [0.8, 0.1, 0.1], [0.6, 0.3, 0.1], [0.45, 0.35, 0.2], [1 / 3] * 3):
    h = entropy(p)
    print(f"  {str(np.round(p, 2)):20s} {h:8.4f}  {gamma_from_entropy(h, cfg):.3f}")

# two systems, one twice as sure: it gets twice the weight
fused, label, w = inverse_entropy_fuse([[0.5, 0.5, 0.0, 0.0], [0.25] * 4])
print(f"\nfusion weights {w.round(4)}  fused {fused.round(4)}  label {label}")

# a small partial-noise corpus: first half noisy, second half clean
cc = CorpusConfig(num_languages=L, utts_per_language=6, duration_s=(6.0, 6.0), noise="partial",
                  snr_db=10.0, seed=4)
fec = FrontEndConfig(ubm_components=8, tvm_rank=5, seed=4)
utts = prepare(generate_corpus(cc), fec)
fe = train_front_end(utts, fec)
u = utts[0]
bounds = block_bounds(u.features.num_frames, cfg.block_frames)
print(f"\nutterance {u.id}: {u.features.num_frames} frames, {int(u.features.voiced.sum())} voiced, "
      f"{len(bounds)} blocks")

# stand-in for the entropy DNN: confident where the SNR is high.
# relevance_weights visits blocks in order, so an iterator over bounds
# tells the oracle which stretch of the utterance it is looking at.
where = iter(bounds)


def oracle_posterior(block):
    a, b = next(where)
    snr = min(float(np.mean(u.snr_trace[a:b])), 60.0)  # clean frames carry a large sentinel
    p = np.ones(L)
    p[u.language] += max(snr, 0.0) / 2
    return p / p.sum()


gamma = relevance_weights(oracle_posterior, u.features, cfg)
for a, b in bounds:
    snr = np.mean(u.snr_trace[a:b])
    label = f"{snr:5.1f} dB" if snr < 100 else "clean   "
    print(f"  frames {a:4d}-{b:4d}  {label}  gamma {gamma[a]:.3f}")

plain = accumulate_stats(fe.ubm, u.features)
weighted = accumulate_stats(fe.ubm, u.features, gamma[u.features.voiced])
print(f"\nzeroth-order mass: plain {plain.n.sum():.1f}  weighted {weighted.n.sum():.1f}")
half = u.features.num_frames // 2
print(f"mean gamma, noisy half {gamma[:half].mean():.3f}  clean half {gamma[half:].mean():.3f}")
