"""Finite-difference checking of every differentiable primitive, plus the
composed decode -> render -> field-query path.  Shared by the ``gradcheck``
CLI subcommand and the acceptance tests."""

from __future__ import annotations

import zlib

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .conditioner import DecoderConfig, TextCondition, build_decoder_params, decode
from .renderer import AnnealState, CameraPose, build_head_params, render


def _wsum(x, seed):
    """Contract a tensor to a scalar with seed-fixed random weights."""
    w = np.random.default_rng(seed).normal(size=x.data.shape)
    return ad.tsum(x * Tensor(w.astype(x.data.dtype)))


def _wseed(rng):
    return int(rng.integers(2 ** 31))


def _r(rng, *shape):
    return rng.normal(size=shape)


def _primitive_cases():
    """(name, case) pairs; each case maps an rng to (params, builder)."""

    def unary(op, lo=-2.0, hi=2.0):
        def case(rng):
            shape = tuple(rng.integers(1, 4, size=int(rng.integers(1, 3))))
            params = {"x": rng.uniform(lo, hi, size=shape)}
            return params, lambda p, s=_wseed(rng): _wsum(op(p["x"]), s)
        return case

    cases = {
        "add": lambda rng: ({"a": _r(rng, 3, 2), "b": _r(rng, 2)},
                            lambda p, s=_wseed(rng): _wsum(p["a"] + p["b"], s)),
        "sub": lambda rng: ({"a": _r(rng, 2, 3), "b": _r(rng, 2, 3)},
                            lambda p, s=_wseed(rng): _wsum(p["a"] - p["b"], s)),
        "mul": lambda rng: ({"a": _r(rng, 3, 2), "b": _r(rng, 3, 1)},
                            lambda p, s=_wseed(rng): _wsum(p["a"] * p["b"], s)),
        "div": lambda rng: ({"a": _r(rng, 2, 2),
                             "b": _r(rng, 2, 2) + 3.0},
                            lambda p, s=_wseed(rng): _wsum(p["a"] / p["b"], s)),
        "exp": unary(ad.exp, -1.5, 1.5),
        "log": unary(ad.log, 0.5, 3.0),
        "sqrt": unary(ad.sqrt, 0.5, 3.0),
        "cos": unary(ad.cos),
        "sin": unary(ad.sin),
        "sigmoid": unary(ad.sigmoid, -4, 4),
        "softplus": unary(ad.softplus, -4, 4),
        "silu": unary(ad.silu, -4, 4),
        "scaled_sigmoid": lambda rng: (
            {"x": _r(rng, 3, 2)},
            lambda p, a=float(rng.uniform(0.1, 1.0)), s=_wseed(rng):
                _wsum(ad.scaled_sigmoid(p["x"], a), s)),
        "power": lambda rng: ({"x": np.abs(_r(rng, 4)) + 0.5},
                              lambda p, s=_wseed(rng): _wsum(p["x"] ** 2, s)),
        "matmul": lambda rng: ({"a": _r(rng, 3, 4), "b": _r(rng, 4, 2)},
                               lambda p, s=_wseed(rng): _wsum(ad.matmul(p["a"], p["b"]), s)),
        "matmul_batched": lambda rng: (
            {"a": _r(rng, 2, 3, 4), "b": _r(rng, 2, 4, 2)},
            lambda p, s=_wseed(rng): _wsum(ad.matmul(p["a"], p["b"]), s)),
        "reshape": lambda rng: ({"x": _r(rng, 2, 6)},
                                lambda p, s=_wseed(rng): _wsum(ad.reshape(p["x"], (3, 4)), s)),
        "transpose": lambda rng: ({"x": _r(rng, 2, 3, 4)},
                                  lambda p, s=_wseed(rng): _wsum(ad.transpose(p["x"], (2, 0, 1)), s)),
        "getitem": lambda rng: ({"x": _r(rng, 4, 5)},
                                lambda p, s=_wseed(rng): _wsum(p["x"][1:3, ::2], s)),
        "concat": lambda rng: ({"a": _r(rng, 2, 3), "b": _r(rng, 4, 3)},
                               lambda p, s=_wseed(rng): _wsum(ad.concat([p["a"], p["b"]], axis=0), s)),
        "stack": lambda rng: ({"a": _r(rng, 3), "b": _r(rng, 3)},
                              lambda p, s=_wseed(rng): _wsum(ad.stack([p["a"], p["b"]], axis=1), s)),
        "sum": lambda rng: ({"x": _r(rng, 3, 4)},
                            lambda p, s=_wseed(rng): _wsum(ad.tsum(p["x"], axis=1), s)),
        "mean": lambda rng: ({"x": _r(rng, 2, 3, 2)},
                             lambda p, s=_wseed(rng): _wsum(ad.tmean(p["x"], axis=(0, 2)), s)),
        "cumsum": lambda rng: ({"x": _r(rng, 3, 5)},
                               lambda p, s=_wseed(rng): _wsum(ad.cumsum(p["x"], axis=1), s)),
        "softmax": lambda rng: ({"x": _r(rng, 3, 4)},
                                lambda p, s=_wseed(rng): _wsum(ad.softmax(p["x"], axis=-1), s)),
        "clip": lambda rng: ({"x": _r(rng, 8) * 2},
                             lambda p, s=_wseed(rng): _wsum(ad.clip(p["x"], -1.0, 1.0), s)),
        "conv3x3": lambda rng: (
            {"x": _r(rng, 2, 4, 4), "w": _r(rng, 3, 2, 3, 3) * 0.5, "b": _r(rng, 3)},
            lambda p, s=_wseed(rng): _wsum(ad.conv3x3(p["x"], p["w"], p["b"]), s)),
        "upsample2x": lambda rng: ({"x": _r(rng, 2, 3, 3)},
                                   lambda p, s=_wseed(rng): _wsum(ad.upsample2x(p["x"]), s)),
        "grid_sample": lambda rng: (
            {"plane": _r(rng, 2, 5, 5),
             "coords": rng.uniform(-0.95, 0.95, size=(6, 2))},
            lambda p, s=_wseed(rng): _wsum(ad.grid_sample(p["plane"], p["coords"]), s)),
        "instance_stats": lambda rng: (
            {"x": _r(rng, 2, 3, 3)},
            lambda p, s=_wseed(rng): _wsum(ad.instance_stats(p["x"])[0]
                                           + ad.instance_stats(p["x"])[1], s)),
        "group_norm": lambda rng: ({"x": _r(rng, 4, 3, 3)},
                                   lambda p, s=_wseed(rng): _wsum(ad.group_norm(p["x"], 2), s)),
        "layer_norm": lambda rng: ({"x": _r(rng, 3, 5)},
                                   lambda p, s=_wseed(rng): _wsum(ad.layer_norm(p["x"]), s)),
    }
    return cases


def _broken_case(rng):
    """Backward deliberately off by 2x; the suite must flag it."""

    def bad_sigmoid(a):
        a = ad._lift(a)
        s = ad._sigmoid_np(a.data)

        def bw(g):
            ad._accum(a, g * 2.0 * s * (1.0 - s))

        return ad._result(s, (a,), bw)

    params = {"x": _r(rng, 3)}
    return params, lambda p, s=_wseed(rng): _wsum(bad_sigmoid(p["x"]), s)


def tiny_pipeline_case(dtype=np.float32):
    """decode -> render -> query on a minimal config; returns (params, builder)."""
    cfg = DecoderConfig(base_channel=8, layers_per_block=1,
                        channel_multipliers=(1,), base_resolution=8, stages=1,
                        style_noise_dim=8, out_channels=4, out_resolution=16,
                        token_reduce_dim=8, style_token_dim=8, attention_heads=2)
    rng = np.random.default_rng(1234)
    tok = rng.normal(size=(8, 16)).astype(np.float32)
    cond = TextCondition(tok, tok.mean(axis=0) / np.linalg.norm(tok.mean(axis=0)))
    noise = rng.normal(size=8).astype(np.float32)
    params = build_decoder_params(cfg, 16, 8, rng)
    params.update(build_head_params(3 * 4, 8, rng, layers=1))
    # widen from init scale so the render is not numerically flat
    params = {k: (v * 4.0 if "weight" in k else v).astype(dtype)
              for k, v in params.items()}
    pose = CameraPose(polar=75.0, azimuth=30.0, radius=3.2, fov=75.0)
    anneal = AnnealState(alpha=0.8)
    wr = np.random.default_rng(99).normal(size=(4, 4, 3))
    wo = np.random.default_rng(98).normal(size=(4, 4))

    def builder(p):
        tp = decode(cond, noise, cfg, p)
        out = render(tp, p, pose, 4, 4, anneal, n_uniform=6, n_importance=0,
                     rng=None)
        dt = out.rgb.data.dtype
        # the 0.01 scale keeps finite-difference roundoff on near-zero
        # gradient entries below the relative-error floor
        return 0.01 * (ad.tsum(out.rgb * Tensor(wr.astype(dt)))
                       + ad.tsum(out.opacity * Tensor(wo.astype(dt))))

    return params, builder


def run_suite(cases_per_primitive: int = 50, tol: float = 1e-3,
              eps: float = 1e-4, dtype=np.float32, inject_fault: bool = False,
              include_composed: bool = True, composed_tol: float | None = None,
              composed_eps: float | None = None,
              composed_sample: int = 2, seed: int = 0,
              progress=None) -> dict:
    """Run the full gradient suite; returns {primitive: max_rel_err, ...} plus
    an overall ``passed`` flag."""
    report = {"passed": True, "tol": tol, "primitives": {}}
    cases = dict(_primitive_cases())
    if inject_fault:
        cases["injected_fault"] = _broken_case
    for name, case in cases.items():
        worst = 0.0
        for i in range(cases_per_primitive):
            name_key = zlib.crc32(name.encode()) & 0xFFFF
            rng = np.random.default_rng(np.random.SeedSequence([seed, name_key, i]))
            params, builder = case(rng)
            params = {k: np.asarray(v, dtype=dtype) for k, v in params.items()}
            rep = ad.grad_check(builder, params, eps=eps, tol=tol)
            worst = max(worst, rep["max_rel_err"])
        report["primitives"][name] = worst
        if worst > tol:
            report["passed"] = False
        if progress:
            progress(name, worst)
    if include_composed:
        params, builder = tiny_pipeline_case(dtype)
        ctol = composed_tol if composed_tol is not None else tol
        ceps = composed_eps if composed_eps is not None else eps
        rep = ad.grad_check(builder, params, eps=ceps, tol=ctol,
                            sample=composed_sample)
        report["primitives"]["composed_decode_render_query"] = rep["max_rel_err"]
        if rep["max_rel_err"] > ctol:
            report["passed"] = False
        if progress:
            progress("composed_decode_render_query", rep["max_rel_err"])
    return report
