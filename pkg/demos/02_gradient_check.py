"""
Checking analytic gradients against finite differences
======================================================

The tape records every operation of the forward pass, so one backward sweep
gives gradients for all parameters. Here we compare them with central
differences on a tiny model, then break one entry on purpose.
"""
from histomet.trainer import grad_check, gradcheck_instance

params, bags, label = gradcheck_instance(seed=0)
print("parameter groups:", len(params.arrays), "label:", label)

report = grad_check(params, bags, label)
for name, err in sorted(report.items(), key=lambda kv: -kv[1]):
    print(f"{name:14s} {err:.2e}")
print("worst:", max(report.values()))

# the self-test flag nudges one analytic entry, which the check must catch
broken = grad_check(params, bags, label, break_gradient=True)
print("with a broken gradient the worst error is", max(broken.values()))
