"""Central finite-difference verification of tape gradients.

The checker perturbs one parameter entry at a time and re-evaluates the
loss numerically. For layered models the forward is restarted from the
perturbed parameter's own layer (earlier activations are unaffected by the
perturbation), which keeps a full-parameter sweep fast.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tape, Tensor
from .model import BeamformingModel, postprocess, sample_features
from .training import energy_efficiency_tensors, loss


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps dead-support spline
    coefficients (tape and FD both ~0, FD noise ~1e-11) from dominating."""
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def finite_difference_grad(f, tensor: Tensor, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar f() with respect to every entry of tensor."""
    flat = tensor.data.ravel()
    grad = np.empty_like(flat)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * step)
    return grad.reshape(tensor.data.shape)


def _stage_layout(model: BeamformingModel, samples):
    """Per-layer stage functions plus cached unperturbed activations."""
    n_t, p_max = model.n_t, samples[0].config.p_max

    def embed(a, _i):
        return a @ model.w0.data

    fns = [embed]
    for layer in model.encoder + model.decoder:
        fns.append(lambda a, _i, layer=layer: layer.forward(Tensor(a)).data)

    def head(a, i):
        wr, wi = postprocess(Tensor(a), n_t, p_max)
        return energy_efficiency_tensors(samples[i], wr, wi).item()

    fns.append(head)

    stage_of = {"w0": 0}
    for idx, layer in enumerate(model.encoder):
        prefix = ("tel" if model.config.encoder_kind == "transformer" else "gat") + str(idx)
        stage_of[prefix] = 1 + idx
    for idx, layer in enumerate(model.decoder):
        prefix = ("kdl" if model.config.decoder_kind == "kan" else "mlpdec") + str(idx)
        stage_of[prefix] = 1 + len(model.encoder) + idx

    caches = []
    for i, s in enumerate(samples):
        acts = [sample_features(s)]
        for fn in fns[:-1]:
            acts.append(fn(acts[-1], i))
        caches.append(acts)
    return fns, stage_of, caches


def model_loss_gradcheck(model, samples, step: float = 1e-5, floor: float = 1e-6) -> dict:
    """Compare tape gradients of the batch loss against finite differences.

    Returns {'max_rel': float, 'per_param': {name: max rel error},
    'n_params': int}. Works for any model; layered restarts apply to
    BeamformingModel instances.
    """
    with Tape() as tape:
        l = loss(model, samples)
    tape.backward(l)
    analytic = {name: t.grad.copy() for name, t in model.params.items()}
    model.params.zero_grad()

    staged = isinstance(model, BeamformingModel)
    if staged:
        fns, stage_of, caches = _stage_layout(model, samples)

        def value_from(stage: int) -> float:
            total = 0.0
            for i in range(len(samples)):
                a = caches[i][stage]
                for fn in fns[stage:]:
                    a = fn(a, i)
                total += a
            return -total / len(samples)

    def full_value() -> float:
        return loss(model, samples).item()

    per_param = {}
    for name, t in model.params.items():
        if staged:
            stage = stage_of[name.split(".")[0]]
            f = lambda: value_from(stage)
        else:
            f = full_value
        numeric = finite_difference_grad(f, t, step)
        per_param[name] = float(rel_error(analytic[name], numeric, floor).max())
    return {
        "max_rel": max(per_param.values()),
        "per_param": per_param,
        "n_params": model.params.total_count(),
    }
