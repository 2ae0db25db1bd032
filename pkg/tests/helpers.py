import numpy as np

from ofvc import bitstream as bs
from ofvc.encoder import weight_scale
from ofvc.frame import synthesis_outputs
from ofvc.graph import Tape, backward, leaf
from ofvc.latent import level_shapes
from ofvc.params import MODULES, QuantizedNetwork


def dense_tconv_oracle(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Scatter every input sample as a full 8x8 kernel copy, then crop 3."""
    h, w = x.shape
    full = np.zeros((2 * h + 6, 2 * w + 6))
    for i in range(h):
        for j in range(w):
            full[2 * i : 2 * i + 8, 2 * j : 2 * j + 8] += x[i, j] * kernel
    return full[3 : 3 + 2 * h, 3 : 3 + 2 * w]


def check_gradients(build, inputs: list[np.ndarray], h: float = 1e-4, n_probe: int = 12,
                    seed: int = 0) -> float:
    """Worst relative error between tape gradients and central differences.

    ``build(tape, tensors)`` must return a scalar tensor.  A random subset of
    coordinates of every input is probed.
    """
    rng = np.random.default_rng(seed)
    tape = Tape()
    tensors = [leaf(v, dtype=np.float64) for v in inputs]
    loss = build(tape, tensors)
    backward(tape, loss)
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.value) for t in tensors]

    def f(vals):
        t2 = Tape(record=True)
        return float(build(t2, [leaf(v, dtype=np.float64) for v in vals]).value)

    worst = 0.0
    for idx, base in enumerate(inputs):
        flat = rng.choice(base.size, size=min(n_probe, base.size), replace=False)
        for k in flat:
            plus = [v.astype(np.float64).copy() for v in inputs]
            minus = [v.astype(np.float64).copy() for v in inputs]
            plus[idx].flat[k] += h
            minus[idx].flat[k] -= h
            numeric = (f(plus) - f(minus)) / (2 * h)
            a = analytic[idx].flat[k]
            denom = max(abs(a), abs(numeric), 1e-6)
            worst = max(worst, abs(a - numeric) / denom)
    return worst


def random_qnet(rng, n_out, zero=False):
    sizes = bs.network_sizes(n_out)
    exps, scales, syms = {}, {}, {}
    for name in MODULES:
        sym = np.zeros(sizes[name], np.int32) if zero else rng.integers(-30, 31, sizes[name]).astype(np.int32)
        exps[name], scales[name], syms[name] = 6, weight_scale(sym), sym
    return QuantizedNetwork(exps, scales, syms)


def random_payload(rng, ftype, h, w, display=0, refs=(None, None), **flags):
    n_out = synthesis_outputs(ftype, **flags)
    qnet = random_qnet(rng, n_out)
    params = qnet.dequantize(n_out)
    symbols = [rng.integers(-2, 3, size=s).astype(np.int32) for s in level_shapes(h, w)]
    return bs.FramePayload(ftype, display, *refs, bs.encode_network(qnet),
                           bs.encode_latents(symbols, params.arm), **flags), symbols, params
