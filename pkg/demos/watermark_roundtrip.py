"""Embed a payload, survive some abuse, lose it to a time stretch.

Walks the basic lifecycle: make a scheme, watermark a clip, check the
detector on clean/marked/perturbed audio, then calibrate a threshold from
a small corpus instead of trusting the family default.
"""

import tempfile
from pathlib import Path

from audiomark import (
    PerturbationSpec,
    SchemeConfig,
    apply,
    calibrate_threshold,
    generate_synthetic_corpus,
    make_scheme,
    random_bits,
    read_wav,
    snr,
)

cfg = SchemeConfig(kind="spread_spectrum", seed=42)
scheme = make_scheme(cfg)
payload = random_bits(cfg.payload_bits, seed=42)
print(f"payload: {''.join(str(b) for b in payload.bits)}")

root = Path(tempfile.mkdtemp(prefix="audiomark-demo-"))
corpus = generate_synthetic_corpus(16, root, seed=42)
clip = read_wav(corpus.resolve(corpus.entries[0]))

marked = scheme.embed(clip, payload)
print(f"embedding cost: {snr(clip, marked):.1f} dB SNR")

for name, wave in (("clean", clip), ("marked", marked)):
    out = scheme.decode(wave, payload)
    print(f"{name:>7}: decision={out.decision} score={out.score:.4f}")

# mild noise keeps the payload, a 1.3x time stretch destroys the framing
noisy = apply(PerturbationSpec("gaussian_noise", 20.0, seed=1), marked)
print(f"  noisy: decision={scheme.decode(noisy, payload).decision}"
      f" (snr {snr(marked, noisy):.1f} dB)")
stretched = apply(PerturbationSpec("time_stretch", 1.3), marked)
print(f"stretch: decision={scheme.decode(stretched, payload).decision}"
      f" (length {len(marked)} -> {len(stretched)})")

# thresholds are a corpus property, not a constant: derive one
waves = [read_wav(corpus.resolve(e)) for e in corpus.entries]
payloads = [random_bits(cfg.payload_bits, seed=42, tag=f"payload/{i}")
            for i in range(len(waves))]
marked_all = [scheme.embed(w, b) for w, b in zip(waves, payloads)]
result = calibrate_threshold(
    cfg, list(zip(marked_all, payloads)), list(zip(waves, payloads))
)
print(f"calibrated tau: {result.tau} (family default {cfg.tau})")
