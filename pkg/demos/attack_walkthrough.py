"""One clip, three attacker knowledge tiers.

No-box: apply a perturbation and hope. Black-box: query the detector as an
oracle and walk its boundary. White-box: descend the decoder's own gradient
under an SNR budget. Prints the score/SNR trajectories so you can watch
each attack work (or honestly fail).
"""

import tempfile
from pathlib import Path

from audiomark import (
    OracleBudget,
    PerturbationSpec,
    SchemeConfig,
    SchemeOracle,
    WhiteboxConfig,
    apply,
    generate_synthetic_corpus,
    hsja,
    make_scheme,
    random_bits,
    read_wav,
    whitebox_remove,
)

root = Path(tempfile.mkdtemp(prefix="audiomark-demo-"))
corpus = generate_synthetic_corpus(4, root, seed=11)
clip = read_wav(corpus.resolve(corpus.entries[0]))

scheme = make_scheme(SchemeConfig(kind="spread_spectrum", seed=11))
bits = random_bits(16, 11)
marked = scheme.embed(clip, bits)
print(f"marked clip decodes at score {scheme.decode(marked, bits).score}")

print("\n-- no-box: 20 dB gaussian noise --")
noisy = apply(PerturbationSpec("gaussian_noise", 20.0, seed=3), marked)
print(f"detector still fires: {scheme.decode(noisy, bits).decision}")

print("\n-- black-box: boundary walk in the spectrogram --")
res = hsja(
    SchemeOracle(scheme, bits),
    marked,
    "removal",
    domain="spectrogram",
    budget=OracleBudget(max_queries=3000, max_iterations=300,
                        grad_est_init=10, grad_est_cap=40),
    seed=5,
)
ladder = [f"{v:.1f}" for _, v in res.trace[:: max(1, len(res.trace) // 8)]]
print(f"best-SNR trace (dB): {' -> '.join(ladder)}")
print(f"success={res.success} final snr {res.final_snr:.1f} dB "
      f"after {res.queries_used} queries")

print("\n-- white-box: gradient descent at a 30 dB budget --")
res = whitebox_remove(marked, bits, scheme, cfg=WhiteboxConfig(snr_budget=30.0))
ladder = [f"{v:.3f}" for _, v in res.trace]
print(f"score trace: {' -> '.join(ladder)}")
print(f"success={res.success} snr {res.final_snr:.1f} dB "
      f"quality {res.final_quality:.2f} in {res.queries_used} gradient steps")
