"""How much privacy a training run spends.

The moments accountant tracks log-moments of the privacy loss for each
order lambda and converts them to an (epsilon, delta) statement at the
end.  Compared with adding up per-step epsilons it is far tighter, which
is what lets a run of many steps stay inside a small budget.
"""
from privtrain.accountant import MomentLedger, accumulate, calibrate_sigma, eps_for_delta, linear_epsilon, step_log_moment

q, sigma, delta = 0.01, 4.0, 1e-5
print("per-step log-moments at q=0.01, sigma=4:")
for lam in (1, 2, 4, 8, 16, 32):
    print(f"  lambda {lam:>2}: {step_log_moment(q, sigma, lam):.3e}")

print("\nsteps    moments eps   linear eps")
for steps in (100, 1000, 10_000):
    ledger = accumulate(MomentLedger(q, sigma), steps)
    print(f"{steps:>6}   {eps_for_delta(ledger, delta):>11.4f}   {linear_epsilon(sigma, steps, delta):>10.1f}")

# the noise a 100-step run with lots of 600 out of 6000 needs for eps = 4
s = calibrate_sigma(4.0, delta, 600 / 6000, 100)
print(f"\ncalibrated noise multiplier for eps=4, delta=1e-5, q=0.1, T=100: {s:.6f}")
print(f"spent: {eps_for_delta(accumulate(MomentLedger(0.1, s), 100), delta):.5f}")
