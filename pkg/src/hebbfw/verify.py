"""Finite-difference gradient suite over every kernel and the composed
episode path (embedding, prototypes, loss)."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .backbones import (BlockParams, block_forward, build_model, patch_merge, preset_config,
                        swin_block_forward)
from .fewshot import classify_queries, embed_episode, episode_loss, prototypes
from .gradcheck import GradCheckReport, grad_check
from .hfw import HfwConfig, HfwParams, hfw_forward
from .tensor import Tensor


def _leaf(rng, *shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def _away_from(rng, shape, edges, margin=1e-2, scale=2.0):
    x = rng.uniform(-scale, scale, size=shape)
    for e in edges:
        close = np.abs(x - e) < margin
        x[close] += 2 * margin
    return x


def _weighted(out: Tensor, w: np.ndarray) -> Tensor:
    return T.tsum(T.hadamard(out, Tensor(w)))


def kernel_cases(rng: np.random.Generator) -> dict:
    """name -> (scalar function, leaves). Random output weights make every
    output entry matter to the scalar."""
    cases = {}

    a, b = _leaf(rng, 2, 3, 4), _leaf(rng, 4, 5)
    w = rng.normal(size=(2, 3, 5))
    cases["matmul"] = (lambda: _weighted(T.matmul(a, b), w), [a, b])

    x = Tensor(_away_from(rng, (3, 4), (-1.0, 1.0)), requires_grad=True)
    w1 = rng.normal(size=(3, 4))
    cases["clamp"] = (lambda: _weighted(T.clamp(x, -1.0, 1.0), w1), [x])

    xl, g, bt = _leaf(rng, 2, 3, 6), _leaf(rng, 6, low=0.5, high=1.5), _leaf(rng, 6)
    w2 = rng.normal(size=(2, 3, 6))
    cases["layer_norm"] = (lambda: _weighted(T.layer_norm(xl, g, bt), w2), [xl, g, bt])

    xs = _leaf(rng, 3, 4, low=-3, high=3)
    w3 = rng.normal(size=(3, 4))
    cases["sigmoid"] = (lambda: _weighted(T.sigmoid(xs), w3), [xs])
    cases["softmax"] = (lambda: _weighted(T.softmax(xs, axis=-1), w3), [xs])
    cases["log_softmax"] = (lambda: _weighted(T.log_softmax(xs, axis=0), w3), [xs])
    cases["gelu"] = (lambda: _weighted(T.gelu(xs), w3), [xs])
    cases["tanh"] = (lambda: _weighted(T.tanh(xs), w3), [xs])
    cases["exp"] = (lambda: _weighted(T.exp(xs), w3), [xs])

    p, q = _leaf(rng, 3, 4), _leaf(rng, 1, 4, low=0.5, high=2.0)
    cases["add"] = (lambda: _weighted(T.add(p, q), w3), [p, q])
    cases["sub"] = (lambda: _weighted(T.sub(p, q), w3), [p, q])
    cases["hadamard"] = (lambda: _weighted(T.hadamard(p, q), w3), [p, q])
    cases["div"] = (lambda: _weighted(T.div(p, q), w3), [p, q])
    cases["scale"] = (lambda: _weighted(T.scale(p, -2.5), w3), [p])
    cases["log"] = (lambda: _weighted(T.log(q), w3[:1]), [q])
    cases["power"] = (lambda: _weighted(T.power(q, 3.0), w3[:1]), [q])

    m = _leaf(rng, 2, 3, 3)
    w4 = rng.normal(size=(2, 3, 3))
    cases["frobenius_normalize"] = (lambda: _weighted(T.frobenius_normalize(m, 1e-6), w4), [m])

    img = _leaf(rng, 2, 3, 4, 4)
    w5 = rng.normal(size=(2, 4, 12))
    cases["patchify"] = (lambda: _weighted(T.patchify(img, 2), w5), [img])
    tok = _leaf(rng, 2, 5, 3)
    w6 = rng.normal(size=(2, 3))
    cases["gap"] = (lambda: _weighted(T.gap(tok), w6), [tok])
    w_mean = rng.normal(size=5)
    cases["mean"] = (lambda: _weighted(T.mean(tok, axis=(0, 2)), w_mean), [tok])

    w7 = rng.normal(size=(2, 7, 3))
    cases["pad"] = (lambda: _weighted(T.pad(tok, [(0, 0), (1, 1), (0, 0)], 0.3), w7), [tok])
    w8 = rng.normal(size=(2, 5, 3))
    cases["roll"] = (lambda: _weighted(T.roll(tok, 2, axis=1), w8), [tok])
    cases["transpose"] = (lambda: _weighted(T.transpose(tok, (1, 0, 2)), w8.transpose(1, 0, 2)), [tok])
    w9 = rng.normal(size=(2, 3, 3))
    cases["getitem"] = (lambda: _weighted(tok[:, [0, 0, 2]], w9), [tok])
    cases["concat"] = (lambda: _weighted(T.concat([tok, tok[:, :2]], axis=1), w7), [tok])
    base = _leaf(rng, 1, 5, 3)
    cases["broadcast_to"] = (lambda: _weighted(T.broadcast_to(base, (2, 5, 3)), w8), [base])
    return cases


def _hfw_case(rng, scope="per_forward"):
    cfg = HfwConfig(d=4, heads=2, delta=0.75, memory_scope=scope)
    params = HfwParams.init(cfg, rng, np.float64, eta_logit=rng.normal(), lambda_logit=rng.normal())
    x = _leaf(rng, 2, 3, 4)
    w = rng.normal(size=(2, 3, 4))
    leaves = [x] + list(params.named().values())
    names = ["x"] + list(params.named())

    def f():
        out, _ = hfw_forward(x, params, cfg)
        return _weighted(out, w)

    return f, leaves, names


def _block_case(rng):
    model = build_model(preset_config("desk_vit", {"d": 8, "heads": 2, "depth": 1, "patch": 4, "image_size": 8}),
                        seed=int(rng.integers(1 << 31)), dtype=np.float64)
    _perturb(model, rng)
    bp = BlockParams(model.params, "blocks.0")
    x = _leaf(rng, 2, 3, 8)
    w = rng.normal(size=(2, 3, 8))
    leaves = [x] + [t for n, t in model.params.items() if n.startswith("blocks.0.")]
    names = ["x"] + [n for n in model.params if n.startswith("blocks.0.")]
    return (lambda: _weighted(block_forward(x, bp, 2), w)), leaves, names


def _swin_case(rng):
    model = build_model(preset_config("desk_swin", {"stage_depths": (2, 1), "stage_dims": (4, 8),
                                                    "stage_heads": (2, 2), "window": 2, "patch": 2,
                                                    "image_size": 8}),
                        seed=int(rng.integers(1 << 31)), dtype=np.float64)
    _perturb(model, rng)
    x = _leaf(rng, 1, 4, 4, 4)
    w = rng.normal(size=(1, 2, 2, 8))
    block = BlockParams(model.params, "stages.0.blocks.1")
    merge = BlockParams(model.params, "stages.0.merge")

    def f():
        y = swin_block_forward(x, block, 2, 2, True)
        return _weighted(patch_merge(y, merge), w)

    names = ["x"] + [n for n in model.params if n.startswith(("stages.0.blocks.1.", "stages.0.merge."))]
    return f, [x] + [model.params[n] for n in names[1:]], names


def _perturb(model, rng, scale=0.3):
    # move norms/biases off their identity init so every path is exercised
    for t in model.params.values():
        t.data = np.asarray(t.data + rng.normal(0.0, scale, size=t.shape))


def toy_episode_case(rng, preset: str = "desk_vit_hebbian", scope: str = "per_forward", n_way: int = 2):
    """2-way 1-shot episode through a tiny float64 model, prototypes and loss."""
    if preset.startswith("desk_swin"):
        overrides = {"stage_depths": (1, 1), "stage_dims": (4, 8), "stage_heads": (2, 2), "window": 2,
                     "patch": 2, "image_size": 8}
    else:
        overrides = {"d": 8, "heads": 2, "depth": 1, "patch": 4, "image_size": 8}
    hfw = {"memory_scope": scope} if preset.endswith("hebbian") else None
    model = build_model(preset_config(preset, overrides, hfw), seed=int(rng.integers(1 << 31)), dtype=np.float64)
    _perturb(model, rng, 0.2)
    support = rng.normal(size=(n_way, 3, 8, 8))
    query = rng.normal(size=(2 * n_way, 3, 8, 8))
    s_labels = np.arange(n_way)
    q_labels = np.repeat(np.arange(n_way), 2)

    def f():
        s_emb, q_emb = embed_episode(model, support, query)
        logits, _ = classify_queries(q_emb, prototypes(s_emb, s_labels, n_way))
        return episode_loss(logits, q_labels)

    return f, list(model.params.values()), list(model.params)


def run_gradcheck_suite(seed: int = 0, tol: float = 1e-4, preset: str = "desk_vit_hebbian",
                        max_entries: int = 12, kernels: bool = True) -> list[tuple[str, GradCheckReport]]:
    rng = np.random.default_rng(seed)
    results = []
    if kernels:
        for name, (f, leaves) in kernel_cases(rng).items():
            results.append((name, grad_check(f, leaves, tol)))
        for name, builder in (("hfw_forward", _hfw_case), ("block_forward", _block_case),
                              ("swin_block+patch_merge", _swin_case)):
            f, leaves, names = builder(rng)
            results.append((name, grad_check(f, leaves, tol, names=names, max_entries=max_entries, rng=rng)))
    f, leaves, names = toy_episode_case(rng, preset)
    results.append((f"episode[{preset}]", grad_check(f, leaves, tol, names=names, max_entries=max_entries, rng=rng)))
    return results
