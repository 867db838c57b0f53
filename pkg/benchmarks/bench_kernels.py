"""Compare the compiled row kernels against the numpy fallback.

    python3 benchmarks/bench_kernels.py [--repeat 5]

Prints per-kernel timings for the shapes the default encoder produces,
then one encoder forward + backward pass with each backend swapped in.
"""

import argparse
import timeit

import numpy as np

import fslab._kernels as K
from fslab import tensor as T
from fslab._kernels import _numpy
from fslab.encoder import EncoderConfig, encode_image, init_encoder
from fslab.lora import default_lora_config, inject

try:
    from fslab._kernels import _fused
except ImportError:
    _fused = None

KERNELS = [n for n in K.__all__ if n != "BACKEND"]


def kernel_cases(rng):
    # attention scores (B*heads*tokens rows of 65) and token activations
    scores = rng.normal(size=(8 * 4 * 65, 65))
    tokens = rng.normal(size=(8 * 65, 64))
    hidden = rng.normal(size=(8 * 65, 256))
    gain, bias = rng.normal(size=64), rng.normal(size=64)
    s = _numpy.softmax_forward(scores)
    ls = _numpy.log_softmax_forward(scores)
    _, th = _numpy.gelu_forward(hidden)
    _, xhat, inv = _numpy.layer_norm_forward(tokens, gain, bias, 1e-5)
    return {
        "gelu_forward": (hidden,),
        "gelu_backward": (hidden, th, hidden),
        "softmax_forward": (scores,),
        "softmax_backward": (s, scores),
        "log_softmax_forward": (scores,),
        "log_softmax_backward": (ls, scores),
        "layer_norm_forward": (tokens, gain, bias, 1e-5),
        "layer_norm_backward": (tokens, xhat, inv, gain),
    }


def best_of(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def use_backend(mod):
    for name in KERNELS:
        setattr(K, name, getattr(mod, name))


def encoder_step(weights, adapters, images):
    out = encode_image(weights, adapters, images, training=True)
    T.zero_grads(adapters.parameters())
    out.sum().backward()


def main():
    parser = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    parser.add_argument("--repeat", type=int, default=5)
    args = parser.parse_args()
    backends = [("numpy", _numpy)] + ([("cython", _fused)] if _fused is not None else [])
    if _fused is None:
        print("compiled kernels unavailable; timing the numpy fallback only")

    cases = kernel_cases(np.random.default_rng(0))
    print(f"{'kernel':<22}" + "".join(f"{name:>12}" for name, _ in backends) + "     speedup")
    for kernel in KERNELS:
        times = [best_of(lambda: getattr(mod, kernel)(*cases[kernel]), args.repeat, 20) for _, mod in backends]
        speed = f"{times[0] / times[1]:>10.2f}x" if len(times) > 1 else ""
        print(f"{kernel:<22}" + "".join(f"{t * 1e3:>10.3f}ms" for t in times) + speed)

    weights = init_encoder(EncoderConfig())
    adapters = inject(weights, default_lora_config(5, 8))
    images = np.random.default_rng(1).random((8, 3, 32, 32))
    saved = {n: getattr(K, n) for n in KERNELS}
    times = []
    try:
        for _, mod in backends:
            use_backend(mod)
            times.append(best_of(lambda: encoder_step(weights, adapters, images), args.repeat, 1))
    finally:
        for n, fn in saved.items():
            setattr(K, n, fn)
    speed = f"{times[0] / times[1]:>10.2f}x" if len(times) > 1 else ""
    print(f"{'encoder fwd+bwd (B=8)':<22}" + "".join(f"{t * 1e3:>10.1f}ms" for t in times) + speed)


if __name__ == "__main__":
    main()
