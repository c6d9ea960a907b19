"""
Operation counts, load balance and efficiency bound
===================================================

The cost model predicts kernel calls per routine exactly, picks the
top-to-middle size ratio that balances work, and bounds the parallel
efficiency when communication is free.
"""

from btaselinv import generate_spd_bta
from btaselinv.analysis import (
    CostModel,
    efficiency_grid,
    flop_count,
    ideal_load_balance,
    predicted_rank_counts,
)
from btaselinv.parallel import run_pipeline

# forward and backward passes cost about 3 and 2 units of b^3 per block
for n in (8, 64, 4096):
    ratio = flop_count("POBTAF", n, 64, 0) / flop_count("POBTASI", n, 64, 0)
    print(f"n={n:<5} forward/backward flop ratio {ratio:.4f}")

# solving the reduced system costs about 20 kernel calls per rank
model = CostModel()
for P in (2, 16, 256):
    print(f"P={P:<4} reduced-system calls per rank {sum(model.counts('POBTARSSI', 0, 1, P).values()) / P:.2f}")

# ideal ratio for large blocks
for n in (32, 64, 128, 256, 512):
    lb = ideal_load_balance(n, 1024, 256)
    print(f"n={n:<4} r_LB {lb.r_lb:.4f} (forward {lb.r_ppobtaf:.4f}, backward {lb.r_ppobtasi:.4f})")

# efficiency falls with P and recovers with n
for row in efficiency_grid([64, 512], [1, 2, 4, 8, 16], 1024, 256):
    print(f"n={row['n']:<4} P={row['P']:<3} efficiency {row['efficiency']:.3f}")

# the prediction matches what the instrumented kernels record
A = generate_spd_bta(seed=2, n=40, b=3, a=2)
res = run_pipeline(A, 4, r=1.8, nested=True)
print("ledger matches model:", [led.counts() for led in res.ledgers] == predicted_rank_counts(40, 2, 4, 1.8, True))
