"""Reference values for softmax, cross-entropy and KL tests.

Evaluated at 50 significant digits with mpmath from the exact binary values
of the double-precision inputs; the printed numbers are frozen into the Rust
tests.
"""
from mpmath import mp, mpf, exp, log

mp.dps = 50

LOGITS = [
    [0.3, -1.7, 2.25, 0.0, 4.1, -3.3, 1.05, 0.6, -0.45, 2.9],
    [-12.5, 3.75, 3.7, -0.01, 8.2, 7.9, -4.4, 0.0, 1.5, 2.2],
]


def softmax(row):
    xs = [mpf(v) for v in row]
    m = max(xs)
    es = [exp(x - m) for x in xs]
    s = sum(es)
    return [e / s for e in es]


qs = [softmax(r) for r in LOGITS]
for q in qs:
    print("softmax", [mp.nstr(v, 20) for v in q])

LABELS = [4, 1]
ce = -sum(log(q[c]) for q, c in zip(qs, LABELS)) / len(LABELS)
print("cross_entropy", mp.nstr(ce, 20))

kl = sum(sum(v * log(v / mpf(0.1)) for v in q) for q in qs) / len(qs)
print("kl_uniform", mp.nstr(kl, 20))
