"""Independent reference computations shared by the unit and acceptance tests."""
import numpy as np
from skimage import data as skdata

from srkit.arch import Network, ParamStore
from srkit.train import AdamState, adam_step, l1_loss, sample_batch, step_rng


def corpus(size=64):
    """Five HR crops from the scikit-image sample set."""
    sources = [
        (skdata.astronaut, 30, 180),
        (skdata.coffee, 100, 200),
        (skdata.chelsea, 80, 150),
        (skdata.rocket, 150, 250),
        (skdata.immunohistochemistry, 200, 200),
    ]
    return [np.ascontiguousarray(f()[y:y + size, x:x + size, :3]) for f, y, x in sources]


def unshared_clone(net):
    """A non-recursive network with the same spec and every unit copied out of the shared store."""
    flat = Network(net.spec.with_(variant="custom", recursive=False), dtype=net.params["entry.weight"].dtype)
    for name in flat.params:
        flat.params[name][...] = net.params[name]
    return flat


def tied_training(net, dataset, cfg, steps):
    """Train ``net``'s weights through an unshared clone.

    Each step runs the clone, sums the gradients of corresponding unit copies,
    applies Adam to the shared weights, then re-ties the clone.
    Returns the resulting shared store.
    """
    tied = net.params.copy()
    flat = unshared_clone(net)
    aliases = net.shared_unit_aliases()
    state = AdamState()
    for step in range(steps):
        for name in flat.params:
            flat.params[name][...] = tied[name]
        rng = step_rng(cfg.seed, step)
        scale = cfg.scales[int(rng.integers(len(cfg.scales)))]
        lr, hr = sample_batch(dataset, scale, cfg, rng)
        dtype = tied["entry.weight"].dtype
        pred, trace = flat.forward_train(lr.astype(dtype), scale)
        _, grad = l1_loss(pred, hr.astype(dtype))
        flat_grads = flat.backward(trace, grad)
        summed = ParamStore()
        for name, g in flat_grads.items():
            layer, _, rest = name.rpartition(".conv")
            key = f"{aliases[layer]}.conv{rest}" if layer in aliases else name
            summed.accumulate(key, g)
        adam_step(tied, summed, state, cfg)
    return tied
