"""Compare the compiled and numpy row kernels, plus one model training step.

    python benchmarks/bench_kernels.py [--repeat N]

Shapes follow the default toy model: 4 heads, 7 frames of 4x4 latent tokens,
so attention rows are 112 wide and hidden rows 96 wide.
"""
import argparse
import time
import timeit

import numpy as np

from vsrflow.numerics import kernels

RNG = np.random.default_rng(0)


def cases(dtype):
    att = RNG.standard_normal((4, 4, 112, 112)).astype(dtype)
    hid = RNG.standard_normal((4, 112, 96)).astype(dtype)
    xq = RNG.standard_normal((4, 4, 112, 24)).astype(dtype)
    ang = RNG.uniform(0, 6, size=(112, 12))
    cos, sin = np.cos(ang).astype(dtype), np.sin(ang).astype(dtype)
    sm = kernels.softmax_forward(att)
    xhat, rstd = kernels.layernorm_forward(hid, 1e-6)
    return {
        "softmax_fwd": lambda: kernels.softmax_forward(att),
        "softmax_bwd": lambda: kernels.softmax_backward(sm, att),
        "layernorm_fwd": lambda: kernels.layernorm_forward(hid, 1e-6),
        "layernorm_bwd": lambda: kernels.layernorm_backward(xhat, rstd, hid),
        "rope": lambda: kernels.rope_rotate(xq, cos, sin),
        "gelu_fwd": lambda: kernels.gelu_forward(hid),
        "gelu_bwd": lambda: kernels.gelu_backward(hid, hid),
    }


def train_step_time(repeat):
    from vsrflow.degrade import build_corpus
    from vsrflow.trainer import TrainConfig, init_state, train_step

    cfg = TrainConfig(batch_size=4)
    samples = build_corpus("t2v", 4, 0)
    state = init_state(cfg)
    mcfg = cfg.model_config()
    train_step(state, samples, cfg, mcfg)  # warm caches
    t0 = time.perf_counter()
    for _ in range(repeat):
        train_step(state, samples, cfg, mcfg)
    return (time.perf_counter() - t0) / repeat


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=200)
    ap.add_argument("--steps", type=int, default=10, help="training steps timed per backend")
    args = ap.parse_args()
    backends = kernels.available_backends()
    prev = kernels.backend_name()
    results = {}
    try:
        for dtype in (np.float32, np.float64):
            for name in backends:
                kernels.use_backend(name)
                for case, fn in cases(dtype).items():
                    t = min(timeit.repeat(fn, number=args.repeat, repeat=3)) / args.repeat
                    results[(np.dtype(dtype).name, case, name)] = t
        step = {}
        for name in backends:
            kernels.use_backend(name)
            step[name] = train_step_time(args.steps)
    finally:
        kernels.use_backend(prev)

    print(f"{'dtype':8} {'kernel':14} " + " ".join(f"{b + ' us':>12}" for b in backends) + "  speedup")
    for dtype in ("float32", "float64"):
        for case in cases(np.float32):
            ts = [results[(dtype, case, b)] * 1e6 for b in backends]
            sp = (results[(dtype, case, "python")] / results[(dtype, case, "cython")]
                  if "cython" in backends else float("nan"))
            print(f"{dtype:8} {case:14} " + " ".join(f"{t:12.1f}" for t in ts) + f"  {sp:6.2f}x")
    print()
    for name, t in step.items():
        print(f"train step (batch 4, default model) [{name}]: {t * 1e3:.1f} ms")


if __name__ == "__main__":
    main()
