"""Seeded gradient-check suites shared by the CLI and the test suite.

Two generators live here: adapter cases exercise the real adapted-linear
forward (all of Q, Lambda, lambda_scale, B, A against a frozen base), and
random-graph cases exercise arbitrary compositions of the tape's
primitive set. Both compare reverse-mode gradients against central
finite differences at eps = 1e-5.
"""

from __future__ import annotations

import numpy as np

from .adapters import AdaptedLinear, BaseLinear, init_lora, init_symlora
from .autodiff import Node, Tape, check_gradients
from .matrix import Matrix
from .rng import SeededRng, gaussian_matrix


def adapter_gradient_check_case(case: int, base_seed: int = 0,
                                max_n: int = 32, max_r: int = 4) -> float:
    """Max relative gradient error for one seeded adapter configuration.

    Builds a random square base, attaches a SymLoRA and a LoRA adapter at
    a random interior point in parameter space (spectrum, base scale and
    B away from their init values), and checks the gradients of an MSE
    loss through the real forward path.
    """
    rng = SeededRng(base_seed).spawn(case)
    bits = rng.integers(3, 1000)
    n = 4 + int(bits[0]) % (max_n - 3)
    r = 1 + int(bits[1]) % min(max_r, n)
    batch = 2 + int(bits[2]) % 5
    w0 = gaussian_matrix(n, n, 0.4, rng)
    x = gaussian_matrix(n, batch, 1.0, rng)
    y = gaussian_matrix(n, batch, 1.0, rng)

    worst = 0.0
    for kind in ("symlora", "lora"):
        if kind == "symlora":
            adapter = init_symlora(n, r, float(r), init_std=0.3, rng=rng)
            adapter._lam[:, 0] = rng.normal(r)
            adapter._scale[0, 0] = 1.0 + 0.3 * float(rng.normal(1)[0])
        else:
            adapter = init_lora(n, n, r, float(r), init_std=0.3, rng=rng)
            adapter._b[...] = 0.3 * rng.normal(n * r).reshape(n, r)
        layer = AdaptedLinear(BaseLinear(w0, 0, "grad-check"), adapter)
        specs = layer.param_specs()
        params = {key: Matrix(arr) for key, arr, _ in specs}
        trainable = {key for key, _, is_trainable in specs if is_trainable}

        def build(tape: Tape, leaves: dict[str, Node], layer=layer) -> Node:
            pred = layer.forward_node(tape, tape.constant(x), leaves)
            diff = tape.sub(pred, tape.constant(y))
            return tape.mean(tape.mul(diff, diff))

        worst = max(worst, check_gradients(build, params, trainable))
    return worst


def random_graph_gradient_check_case(case: int, base_seed: int = 0) -> float:
    """Max relative gradient error for one random primitive composition.

    Starts from a few leaves (a random subset trainable, the rest
    frozen) and applies a random chain of smooth primitives before
    reducing to a scalar.
    """
    rng = SeededRng(base_seed).spawn(10_000 + case)
    dims = 2 + rng.integers(3, 4)  # three dims in 2..5
    d0, d1, d2 = (int(v) for v in dims)

    tape_ops = ["matmul", "add", "mul", "transpose", "tanh", "gelu",
                "softmax_cols", "scale", "smul", "mul_col", "add_col",
                "layer_norm"]
    n_ops = 3 + int(rng.integers(1, 5)[0])
    chosen = [tape_ops[int(i)] for i in rng.integers(n_ops, len(tape_ops))]

    params = {
        "p0": gaussian_matrix(d0, d1, 0.8, rng),
        "p1": gaussian_matrix(d1, d2, 0.8, rng),
        "sq": gaussian_matrix(d0, d0, 0.8, rng),
        "vec": gaussian_matrix(d0, 1, 0.8, rng),
        "sc": gaussian_matrix(1, 1, 0.5, rng),
    }
    trainable = {name for name in params if float(rng.uniform(1)[0]) < 0.7}
    if not trainable:
        trainable = {"p0"}
    const = gaussian_matrix(d0, d2, 1.0, rng)

    def build(tape: Tape, leaves: dict[str, Node]) -> Node:
        # cur keeps shape (d0, d2) throughout the chain
        cur = tape.matmul(leaves["p0"], leaves["p1"])
        for op in chosen:
            if op == "matmul":
                cur = tape.matmul(leaves["sq"], cur)
            elif op == "add":
                cur = tape.add(cur, tape.constant(const))
            elif op == "mul":
                cur = tape.mul(cur, cur)
            elif op == "transpose":
                cur = tape.transpose(tape.transpose(cur))
            elif op == "tanh":
                cur = tape.tanh(cur)
            elif op == "gelu":
                cur = tape.gelu(cur)
            elif op == "softmax_cols":
                cur = tape.softmax_cols(cur)
            elif op == "scale":
                cur = tape.scale(cur, 1.7)
            elif op == "smul":
                cur = tape.smul(leaves["sc"], cur)
            elif op == "mul_col":
                cur = tape.mul_col(cur, leaves["vec"])
            elif op == "add_col":
                cur = tape.add_col(cur, leaves["vec"])
            elif op == "layer_norm":
                cur = tape.layer_norm_cols(cur, leaves["vec"],
                                           tape.constant(np.zeros((d0, 1))))
        return tape.mean(tape.mul(cur, cur))

    return check_gradients(build, params, trainable)
