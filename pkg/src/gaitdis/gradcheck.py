"""Finite-difference verification of every differentiable op and of the total loss.

Each case draws random shapes and values from a generator and returns its
inputs plus a function that rebuilds the op on a fresh graph. The check
contracts the output with a random seed so every output element matters.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Dict, List, Tuple

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, ICState, Tensor

Builder = Callable[[Graph, Dict[str, Tensor]], Tensor]


@dataclass
class GradCase:
    name: str
    inputs: Dict[str, np.ndarray]
    build: Builder


@dataclass
class GradResult:
    name: str
    max_rel_error: float
    # a ReLU input changed sign inside the +-eps stencil: the loss is not
    # differentiable there and the central difference is not comparable
    kink_crossed: bool = False


def relu_input_signs(graph: Graph) -> List[np.ndarray]:
    """Signs of every ReLU pre-activation recorded on ``graph``, in evaluation order."""
    return [np.sign(graph.nodes[n.inputs[0]].value) for n in graph.nodes if n.op == "relu"]


def _same_signs(a: List[np.ndarray], b: List[np.ndarray]) -> bool:
    return len(a) == len(b) and all(np.array_equal(x, y) for x, y in zip(a, b))


def _away_from_zero(rng, shape, gap=0.05):
    v = rng.normal(size=shape)
    return np.sign(v) * (gap + np.abs(v))


def case_conv1d(rng) -> GradCase:
    c_in, c_out, k = rng.integers(1, 4), rng.integers(1, 4), rng.integers(1, 5)
    stride, padding = int(rng.integers(1, 3)), int(rng.integers(0, 3))
    t = int(rng.integers(max(k, 3), 10))
    shape = (int(rng.integers(1, 3)), c_in, t) if rng.random() < 0.5 else (c_in, t)
    return GradCase("conv1d", {"x": rng.normal(size=shape), "w": rng.normal(size=(c_out, c_in, k))},
                    lambda g, v: ad.conv1d(v["x"], v["w"], stride, padding))


def case_dense(rng) -> GradCase:
    n_in, n_out = rng.integers(1, 6), rng.integers(1, 6)
    shape = (int(rng.integers(1, 4)), n_in) if rng.random() < 0.5 else (n_in,)
    return GradCase("dense", {"x": rng.normal(size=shape), "w": rng.normal(size=(n_out, n_in)),
                              "b": rng.normal(size=n_out)},
                    lambda g, v: ad.dense(v["x"], v["w"], v["b"]))


def case_channel_bias(rng) -> GradCase:
    c, t = rng.integers(1, 4), rng.integers(1, 6)
    return GradCase("channel_bias", {"x": rng.normal(size=(2, c, t)), "b": rng.normal(size=c)},
                    lambda g, v: ad.channel_bias(v["x"], v["b"]))


def case_relu(rng) -> GradCase:
    return GradCase("relu", {"x": _away_from_zero(rng, (3, 4))}, lambda g, v: ad.relu(v["x"]))


def case_ic_train(rng) -> GradCase:
    c, t, n = int(rng.integers(1, 4)), int(rng.integers(2, 6)), int(rng.integers(1, 3))
    rate = float(rng.choice([0.0, 0.3]))
    seed = int(rng.integers(1000))
    return GradCase("ic_layer[train]", {"x": rng.normal(size=(n, c, t))},
                    lambda g, v: ad.ic_layer(v["x"], ICState.fresh(c), rate, "train", seed))


def case_ic_eval(rng) -> GradCase:
    c = int(rng.integers(1, 4))
    state = ICState(rng.normal(size=c), rng.uniform(0.5, 2.0, size=c))
    return GradCase("ic_layer[eval]", {"x": rng.normal(size=(c, 5))},
                    lambda g, v: ad.ic_layer(v["x"], state.copy(), 0.2, "eval", 0))


def case_elementwise(rng) -> GradCase:
    shape = (int(rng.integers(1, 4)), int(rng.integers(1, 4)))
    op = rng.choice(["add", "sub", "mul"])
    fn = {"add": ad.add, "sub": ad.sub, "mul": ad.mul}[op]
    return GradCase(str(op), {"a": rng.normal(size=shape), "b": rng.normal(size=shape)},
                    lambda g, v: fn(v["a"], v["b"]))


def case_scale(rng) -> GradCase:
    c = float(rng.normal())
    return GradCase("scale", {"a": rng.normal(size=(2, 3))}, lambda g, v: ad.scale(v["a"], c))


def case_reshape_upsample(rng) -> GradCase:
    factor = int(rng.integers(1, 4))
    return GradCase("reshape+upsample", {"a": rng.normal(size=(2, 6))},
                    lambda g, v: ad.upsample(ad.reshape(v["a"], (2, 2, 3)), factor))


def case_time_mean(rng) -> GradCase:
    shape = (2, 3, 4) if rng.random() < 0.5 else (3, 4)
    return GradCase("time_mean", {"a": rng.normal(size=shape)}, lambda g, v: ad.time_mean(v["a"]))


def case_concat_take(rng) -> GradCase:
    idx = rng.integers(0, 4, size=5)
    return GradCase("concat+take", {"a": rng.normal(size=(4, 2)), "b": rng.normal(size=(4, 3))},
                    lambda g, v: ad.take(ad.concat([v["a"], v["b"]], axis=-1), idx))


def case_l2_normalize(rng) -> GradCase:
    return GradCase("l2_normalize", {"a": rng.normal(size=(3, 4))}, lambda g, v: ad.l2_normalize(v["a"]))


def case_row_norm(rng) -> GradCase:
    return GradCase("row_norm", {"a": rng.normal(size=(3, 4))}, lambda g, v: ad.row_norm(v["a"]))


def case_mean(rng) -> GradCase:
    return GradCase("mean", {"a": rng.normal(size=(3, 4))}, lambda g, v: ad.mean(v["a"]))


def case_mse(rng) -> GradCase:
    shape = (2, 3, 4)
    return GradCase("mse", {"p": rng.normal(size=shape), "t": rng.normal(size=shape)},
                    lambda g, v: ad.mse(v["p"], v["t"]))


def case_weighted_sum(rng) -> GradCase:
    w = tuple(rng.uniform(0, 2, size=3))
    return GradCase("weighted_sum", {"a": rng.normal(size=(2,)), "b": rng.normal(size=(2,)),
                                     "c": rng.normal(size=(2,))},
                    lambda g, v: ad.weighted_sum([ad.mean(v["a"]), ad.mean(v["b"]), ad.mean(v["c"])], w))


def case_softmax_xent(rng) -> GradCase:
    n, c = int(rng.integers(1, 5)), int(rng.integers(2, 5))
    labels = rng.integers(0, c, size=n)
    return GradCase("softmax_cross_entropy", {"z": rng.normal(size=(n, c))},
                    lambda g, v: ad.softmax_cross_entropy(v["z"], labels))


def case_triplet(rng) -> GradCase:
    from .training import triplet_graph
    trip = np.array([[0, 1, 2], [1, 0, 3], [2, 3, 0]])
    return GradCase("triplet", {"codes": rng.normal(size=(4, 3))},
                    lambda g, v: triplet_graph(ad.l2_normalize(v["codes"]), trip, 1.5))


OP_CASES: Tuple[Callable[[np.random.Generator], GradCase], ...] = (
    case_conv1d, case_dense, case_channel_bias, case_relu, case_ic_train, case_ic_eval,
    case_elementwise, case_scale, case_reshape_upsample, case_time_mean, case_concat_take,
    case_l2_normalize, case_row_norm, case_mean, case_mse, case_weighted_sum, case_softmax_xent,
    case_triplet,
)


def check_case(case: GradCase, rng: np.random.Generator, eps: float = 1e-5) -> GradResult:
    """Max relative error between backprop and central differences over all inputs."""
    g = Graph()
    tensors = {k: g.input(v) for k, v in case.inputs.items()}
    out = case.build(g, tensors)
    seed = rng.normal(size=out.shape)
    tape = ad.backprop(g, out, seed)
    worst = 0.0
    for name, value in case.inputs.items():
        def f(arr, name=name):
            g2 = Graph()
            vals = {k: g2.input(arr if k == name else v) for k, v in case.inputs.items()}
            return float(np.sum(seed * case.build(g2, vals).data))
        numeric = ad.numerical_gradient(f, value, eps)
        worst = max(worst, ad.max_relative_error(tape[tensors[name]], numeric))
    return GradResult(case.name, worst)


def check_total_loss(rng: np.random.Generator, entries_per_tensor: int = 2, eps: float = 1e-5,
                     mode: str = "train") -> GradResult:
    """Total loss of a tiny autoencoder: sampled parameter entries vs. central differences."""
    from .model import ModelConfig, init_params
    from .training import CrossBatch, LossWeights, build_loss_graph

    cfg = ModelConfig(length=8, encoder=((3, 3, 2), (4, 3, 2)), subject_dim=3, affect_dim=2, dropout=0.2)
    params = init_params(cfg, int(rng.integers(1 << 30)))
    B = 2
    x = rng.normal(size=(4 * B, cfg.in_channels, cfg.length))
    r = np.arange(B)
    trip = np.concatenate([np.stack([r, r + 2 * B, r + B], 1), np.stack([r + B, r + 3 * B, r], 1)])
    batch = CrossBatch(x, np.zeros(4 * B, int), np.zeros(4 * B, int), trip, trip[:, [0, 2, 1]], r)
    weights = LossWeights(*rng.uniform(0.5, 1.5, size=4), margin=2.0)
    drop_seed = int(rng.integers(1000))
    stats = {k: s.copy() for k, s in params.stats.items()}

    def loss(p):
        p.stats = {k: s.copy() for k, s in stats.items()}
        return build_loss_graph(p, batch, weights, mode, drop_seed)

    lg = loss(params)
    grads = ad.backprop(lg.forward.graph, lg.total).param_grads()
    signs = relu_input_signs(lg.forward.graph)
    worst, kink = 0.0, False
    for name, w in params.weights.items():
        flat = w.reshape(-1)
        for i in rng.choice(flat.size, size=min(entries_per_tensor, flat.size), replace=False):
            old = flat[i]
            values = []
            for delta in (eps, -eps):
                flat[i] = old + delta
                shifted = loss(params)
                values.append(float(shifted.total.data))
                kink = kink or not _same_signs(relu_input_signs(shifted.forward.graph), signs)
            flat[i] = old
            num = (values[0] - values[1]) / (2 * eps)
            worst = max(worst, ad.max_relative_error(grads[name].reshape(-1)[i], num))
    return GradResult("total_loss", worst, kink)


def run_gradient_suite(n_configs: int = 50, seed: int = 0, max_redraws: int = 20) -> List[GradResult]:
    """Every op case and the total loss on ``n_configs`` random configurations each.

    A total-loss configuration whose finite-difference stencil crosses a ReLU
    kink is redrawn (the crossing is recorded in the returned results too).
    """
    rng = np.random.default_rng(seed)
    results = []
    for _ in range(n_configs):
        for make in OP_CASES:
            results.append(check_case(make(rng), rng))
        for _ in range(max_redraws):
            res = check_total_loss(rng)
            results.append(res)
            if not res.kink_crossed:
                break
        else:
            raise RuntimeError(f"no kink-free total-loss configuration in {max_redraws} draws")
    return results
