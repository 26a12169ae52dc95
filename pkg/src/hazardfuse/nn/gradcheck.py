"""Central-difference gradient checks, run in float64."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class GradcheckResult:
    max_rel_error: float
    n_checked: int
    worst: str
    n_skipped: int = 0  # samples whose +-epsilon probes crossed a ReLU/pooling switch

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error <= tol


def rel_error(a: float, n: float) -> float:
    return abs(a - n) / max(abs(a), abs(n), 1e-8)


def _same(pa: list, pb: list) -> bool:
    return len(pa) == len(pb) and all(np.array_equal(a, b) for a, b in zip(pa, pb))


def _quota(params: dict, n: int) -> dict:
    total = sum(a.size for a in params.values())
    return {name: min(a.size, max(2, int(np.ceil(n * a.size / total)))) for name, a in params.items()}


def _probe(arrays: dict, grads: dict, quota: dict, loss, pattern, epsilon: float, rng: np.random.Generator):
    """Central differences on ``quota[name]`` entries of each array.

    A probe whose perturbed forward passes make different discrete choices
    than the unperturbed one straddles a kink, where central differences do
    not estimate the derivative; it is discarded and another entry of the
    same array is drawn in its place.
    """
    base = pattern()
    worst, worst_name, checked, skipped = 0.0, "", 0, 0
    for name, arr in arrays.items():
        flat_arr = arr.reshape(-1)
        want = quota[name]
        done = 0
        for flat in rng.permutation(arr.size):
            if done == want:
                break
            old = flat_arr[flat]
            flat_arr[flat] = old + epsilon
            lp = loss()
            smooth = _same(base, pattern())
            flat_arr[flat] = old - epsilon
            lm = loss()
            smooth = smooth and _same(base, pattern())
            flat_arr[flat] = old
            if not smooth:
                skipped += 1
                continue
            err = rel_error(float(grads[name].reshape(-1)[flat]), (lp - lm) / (2 * epsilon))
            done += 1
            if err > worst:
                worst, worst_name = err, f"{name}[{flat}]"
        checked += done
    return GradcheckResult(worst, checked, worst_name, skipped)


def gradcheck(network, inputs: dict, target: np.ndarray, epsilon: float = 1e-4, n_samples: int = 200,
              seed: int = 0, ignore: np.ndarray | None = None) -> GradcheckResult:
    """Max relative error between backprop and central differences over sampled parameters.

    The network is copied to float64 and its dropout masks are frozen after
    the first training-mode pass, so every loss evaluation sees the same map.
    Samples are spread over parameter tensors in proportion to their size,
    at least two per tensor.
    """
    net = network.astype(np.float64)
    net.freeze_dropout(True)
    x = {k: np.asarray(v, dtype=np.float64) for k, v in inputs.items()}
    net.loss(x, target, ignore, train=True)
    analytic = {k: g.copy() for k, g in net.gradients().items()}
    params = net.parameters()

    def loss():
        return net.loss(x, target, ignore, train=True, backward=False)

    return _probe(params, analytic, _quota(params, n_samples), loss, net.switch_pattern, epsilon,
                  np.random.default_rng(seed))


def gradcheck_layer(layer, x: np.ndarray, epsilon: float = 1e-4, n_samples: int = 200,
                    seed: int = 0) -> GradcheckResult:
    """Check input (and parameter) gradients of one layer under L = sum(r * layer(x))."""
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64).copy()
    for k in layer.params:
        layer.params[k] = layer.params[k].astype(np.float64)
    if hasattr(layer, "frozen"):
        layer.frozen = True
    r = rng.standard_normal(layer.forward(x, train=True).shape)

    def loss():
        return float(np.sum(r * layer.forward(x, train=True)))

    def pattern():
        st = layer.switch_state()
        return [] if st is None else [st.copy()]

    loss()
    dx = layer.backward(r)
    arrays = {"input": x, **layer.params}
    grads = {"input": dx, **layer.grads}
    quota = {k: min(a.size, n_samples) for k, a in arrays.items()}
    return _probe(arrays, grads, quota, loss, pattern, epsilon, rng)
