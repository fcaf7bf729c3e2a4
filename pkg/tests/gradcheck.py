"""Shared finite-difference gradient checker.

The checker re-evaluates the caller's forward closure with each parameter
entry nudged by +/-step, so it is completely independent of the tape's
backward rules.
"""

import numpy as np

from lrlnet.tensor import Tape, backward, zero_grads

FD_STEP = 1e-5


def finite_difference_grads(forward, params, step=FD_STEP):
    """Central differences of `forward()` (a float) w.r.t. every param entry."""
    grads = []
    for pb in params:
        flat = pb.tensor.data.reshape(-1)
        g = np.empty_like(flat)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = forward()
            flat[i] = orig - step
            fm = forward()
            flat[i] = orig
            g[i] = (fp - fm) / (2.0 * step)
        grads.append(g.reshape(pb.tensor.data.shape))
    return grads


def assert_grads_close(analytic, numeric, name, rel_tol, abs_tol=1e-7):
    err = np.abs(analytic - numeric)
    bound = rel_tol * np.maximum(np.abs(analytic), np.abs(numeric)) + abs_tol
    if not np.all(err <= bound):
        worst = np.unravel_index(np.argmax(err - bound), err.shape)
        raise AssertionError(
            f"{name}: gradient mismatch at {worst}: analytic={analytic[worst]!r} "
            f"numeric={numeric[worst]!r} (|diff|={err[worst]:.3e})"
        )


def check_gradients(build_loss, params, rel_tol=1e-4, step=FD_STEP, abs_tol=1e-7):
    """Reverse-mode grads of `build_loss()` must match central differences.

    `build_loss` must be deterministic: it is re-run many times with nudged
    parameters.
    """
    zero_grads(params)
    with Tape() as tape:
        loss = build_loss()
        backward(loss, tape, params)
    analytic = [pb.grad.copy() for pb in params]
    numeric = finite_difference_grads(lambda: float(build_loss().data), params, step)
    for pb, a, n in zip(params, analytic, numeric):
        assert_grads_close(a, n, pb.name, rel_tol, abs_tol)


def kink_risk(build_loss, relu_thr=5e-5, gap_thr=1e-4):
    """True when finite differencing would straddle a non-smooth point.

    Flags relu inputs within `relu_thr` of zero and max reductions whose two
    leading candidates are within `gap_thr`.  Exact zeros and exact ties are
    treated as structural (duplicated rows, self-pair differences): the
    subgradient convention handles them and perturbations move both sides
    together.
    """
    with Tape() as tape:
        build_loss()
    for node in tape.nodes:
        if node.op == "relu":
            x = np.abs(node.inputs[0].data)
            if np.any(x < relu_thr):
                return True
        elif node.op in ("max_rows", "group_max"):
            x = node.inputs[0].data
            if node.op == "group_max":
                # infer group size from shapes
                k = x.shape[0] // node.output.data.shape[0]
                x = x.reshape(-1, k, x.shape[1])
                if x.shape[1] < 2:
                    continue
                top = np.sort(x, axis=1)
                gap = top[:, -1, :] - top[:, -2, :]
            else:
                if x.shape[0] < 2:
                    continue
                top = np.sort(x, axis=0)
                gap = top[-1] - top[-2]
            if np.any((gap > 0.0) & (gap < gap_thr)):
                return True
    return False


def check_gradients_on_instances(make_instance, n_instances, rel_tol=1e-4,
                                 max_attempts_each=30):
    """Gradcheck `n_instances` kink-free instances.

    `make_instance(attempt_key)` returns (params, forward); instances whose
    forward pass sits near a relu/max kink are resampled.
    """
    done = 0
    attempt = 0
    while done < n_instances:
        attempt += 1
        if attempt > n_instances * max_attempts_each:
            raise AssertionError("could not find enough kink-free instances")
        params, forward = make_instance(attempt)
        from instances import squared

        if kink_risk(lambda: squared(forward())):
            continue
        check_gradients(lambda: squared(forward()), params.blocks(), rel_tol=rel_tol)
        done += 1
