"""Central-difference gradient verification helper.

``check_grad`` perturbs coordinates of an array in place, re-evaluating
a scalar loss closure. Two guards make the comparison honest:

- finite differences only estimate a derivative where the function is
  smooth, so each probe is validated with a second, half-size step; if
  the two estimates disagree the probe straddles a relu kink and the
  coordinate is skipped (and counted);
- below the difference quotient's rounding floor a relative comparison
  is meaningless, so the acceptance test is the combined form
  |analytic - fd| <= atol + rtol * max(|analytic|, |fd|), enforcing the
  relative bound wherever finite differences can resolve it.
"""

import numpy as np

RTOL = 1e-4
ATOL = 1e-7
EPS = 1e-5


def check_grad(loss_fn, arr, analytic, rng, max_coords=8, eps=EPS, rtol=RTOL, atol=ATOL):
    """Returns (n_checked, n_skipped); asserts every checked coordinate.

    loss_fn() must evaluate the scalar loss at the current contents of
    ``arr`` (which is temporarily mutated).
    """
    flat = arr.reshape(-1)
    gflat = np.asarray(analytic).reshape(-1)
    n = flat.size
    idxs = rng.choice(n, size=min(max_coords, n), replace=False)
    checked = skipped = 0
    for idx in idxs:
        orig = flat[idx]

        def at(d):
            flat[idx] = orig + d
            val = loss_fn()
            flat[idx] = orig
            return val

        fd1 = (at(eps) - at(-eps)) / (2 * eps)
        fd2 = (at(eps / 2) - at(-eps / 2)) / eps
        scale = max(abs(fd1), abs(fd2), 1e-6)
        if abs(fd1 - fd2) > 1e-3 * scale:
            skipped += 1  # non-smooth inside the probe interval
            continue
        diff = abs(gflat[idx] - fd1)
        bound = atol + rtol * max(abs(gflat[idx]), abs(fd1))
        assert diff <= bound, (
            f"gradient mismatch at flat index {idx}: analytic {gflat[idx]:.8e} "
            f"fd {fd1:.8e} diff {diff:.2e} > {bound:.2e}"
        )
        checked += 1
    return checked, skipped


def run_check(build, arrays, rng, draws=20, max_coords=4):
    """FD-verify every input of ``build(tensors...) -> scalar Tensor``
    over fresh random draws; returns total coordinates checked."""
    from ecgfusion import autodiff as ad

    total_checked = 0
    for d in range(draws):
        local = np.random.default_rng(1000 + d)
        vals = [local.normal(size=a.shape) for a in arrays]
        tensors = [ad.Tensor(v) for v in vals]

        def fwd():
            ts = [ad.Tensor(v) for v in vals]
            return float(build(*ts).data)

        loss = build(*tensors)
        ad.backward(loss)
        for t, v in zip(tensors, vals):
            checked, _ = check_grad(fwd, v, t.grad, local, max_coords=max_coords)
            total_checked += checked
    return total_checked
