"""The teacher as an exponential moving average, and what happens to
normalization statistics under the three strategies.

Run:  python demos/03_ema_and_norm_strategies.py
"""
import numpy as np

from wsdet.ema import (
    EMA_BN,
    FROZEN_BN,
    OPEN_BN,
    NormStrategy,
    ParameterState,
    apply_norm_strategy,
    ema_update,
)

rng = np.random.default_rng(1)

# --- 1. parameter EMA -------------------------------------------------------
student = ParameterState(rng.normal(size=6), np.zeros(3), np.ones(3))
teacher = ParameterState(rng.normal(size=6), np.zeros(3), np.ones(3))

print("parameter EMA with a frozen student, smoothing factor 0.999:")
gap0 = np.linalg.norm(teacher.theta - student.theta)
current = teacher
done = 0
for k in (1, 10, 100, 1000):
    for _ in range(k - done):
        current = ema_update(current, student, 0.999)
    done = k
    gap = np.linalg.norm(current.theta - student.theta)
    print(f"  after {k:4d} steps: |teacher - student| = {gap:.6f} "
          f"(closed form {0.999**k * gap0:.6f})")

# --- 2. normalization strategies -------------------------------------------
print("\nnormalization statistics after 200 noisy batches (channel 0):")
batches = [(rng.normal(0.8, 0.05, size=3), rng.uniform(0.2, 0.3, size=3))
           for _ in range(200)]

for strategy in (NormStrategy(kind=FROZEN_BN),
                 NormStrategy(kind=OPEN_BN),
                 NormStrategy(kind=EMA_BN, alpha=0.99)):
    t = ParameterState(np.zeros(1), np.zeros(3), np.ones(3))
    s = ParameterState(np.zeros(1), np.zeros(3), np.ones(3))
    for mean, var in batches:
        t, s = apply_norm_strategy(strategy, t, s, mean, var)
    print(f"  {strategy.kind:7s}: teacher mean {t.norm_mean[0]:+.4f}  "
          f"student mean {s.norm_mean[0]:+.4f}")

print("\nreading: frozen keeps both at the pre-training estimate; open lets the")
print("student drift while the teacher stays put (the mismatch the freeze fixes);")
print("ema drags the teacher after the student with its own smoothing factor")
