"""
Gradient and invariant audit behind the ``selftest`` command.

Every registered op and four composite blocks are checked against central
finite differences on several seeds; structural invariants (LoRA equivalences,
sequence layout arithmetic, enhancer wiring, DDIM inversion) are checked directly.
"""
import logging
import time
from typing import Callable, Dict, List, Sequence, Tuple

import numpy as np

from .cme import Enhancer, enhancer_forward
from .diffusion import Denoiser, NoiseSchedule, denoise, forward_noising, sample_edit
from .edit_models import GuidanceBundle
from .frce import IDController, id_controller
from .guidance_lm import QFormer, assemble_sequence, qformer_align
from .layers import LoraLinear, LoraSettings, lora_merge
from .model import SelftestCase, SelftestReport
from .tensor import (
    OP_REGISTRY, ComputeTape, Tensor, add, concat, constant, gelu, grad_check, layernorm, log_softmax,
    masked_fill, matmul, mean_all, mul, neg, pick, reshape, slice_axis, softmax, square, sub, sum_all,
    take_rows, transpose,
)

logger = logging.getLogger(__name__)

Case = Tuple[Callable[..., Tensor], List[Tensor]]


def _param(rng: np.random.Generator, *shape) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


def _weighted(rng: np.random.Generator, fn: Callable[..., Tensor], out_shape) -> Callable[..., Tensor]:
    """f(inputs) = Σ fn(inputs) ⊙ w for a fixed random w, so every output entry matters."""
    w = constant(rng.normal(size=out_shape))
    return lambda *inputs: sum_all(mul(fn(*inputs), w))


def op_cases(rng: np.random.Generator) -> Dict[str, Case]:
    """One small scalar-valued case per registered op name."""
    p = lambda *shape: _param(rng, *shape)
    mask = rng.random((3, 4)) < 0.3
    cases: Dict[str, Case] = {
        "add": (_weighted(rng, add, (3, 4)), [p(3, 4), p(4)]),
        "sub": (_weighted(rng, sub, (3, 4)), [p(3, 4), p(3, 4)]),
        "neg": (_weighted(rng, neg, (3, 4)), [p(3, 4)]),
        "mul": (_weighted(rng, mul, (3, 4)), [p(3, 4), p(3, 4)]),
        "square": (_weighted(rng, square, (3, 4)), [p(3, 4)]),
        "gelu": (_weighted(rng, gelu, (3, 4)), [p(3, 4)]),
        "masked_fill": (_weighted(rng, lambda a: masked_fill(a, mask, 0.0), (3, 4)), [p(3, 4)]),
        "sum": (lambda a: mul(sum_all(a), 0.7), [p(3, 4)]),
        "mean": (lambda a: mul(mean_all(square(a)), 1.3), [p(3, 4)]),
        "pick": (_weighted(rng, lambda a: pick(a, [1, 0, 4, 2]), (4,)), [p(4, 5)]),
        "matmul": (_weighted(rng, matmul, (2, 3, 5)), [p(2, 3, 4), p(4, 5)]),
        "matmul_batched": (_weighted(rng, matmul, (2, 3, 5)), [p(2, 3, 4), p(2, 4, 5)]),
        "transpose": (_weighted(rng, lambda a: transpose(a, (2, 0, 1)), (4, 2, 3)), [p(2, 3, 4)]),
        "reshape": (_weighted(rng, lambda a: reshape(a, (2, 6)), (2, 6)), [p(3, 4)]),
        "concat": (_weighted(rng, lambda a, b: concat([a, b], axis=0), (5, 4)), [p(2, 4), p(3, 4)]),
        "slice_axis": (_weighted(rng, lambda a: slice_axis(a, 1, 4, axis=0), (3, 4)), [p(5, 4)]),
        "take_rows": (_weighted(rng, lambda a: take_rows(a, [0, 2, 2, 4]), (4, 4)), [p(5, 4)]),
        "softmax": (_weighted(rng, softmax, (3, 5)), [p(3, 5)]),
        "log_softmax": (_weighted(rng, log_softmax, (3, 5)), [p(3, 5)]),
        "layernorm": (_weighted(rng, layernorm, (3, 6)), [p(3, 6), p(6), p(6)]),
    }
    return cases


def composite_cases(rng: np.random.Generator) -> Dict[str, Case]:
    """ID controller, one enhancer, QFormer and denoiser at toy widths."""
    d, heads = 8, 2
    controller = IDController(d, heads, rng)
    r_visual, objects = _param(rng, 5, d), _param(rng, 2, d)
    idc = _weighted(rng, lambda rv, o, w: id_controller(rv, o, controller), (2, d))

    enhancer = Enhancer(d, heads, 3, rng, "visual")
    w_r, w_e = constant(rng.normal(size=(5, d))), constant(rng.normal(size=(3, d)))

    def enhancer_loss(v_hat, ctx, cues, w):
        r_bar, e_bar = enhancer_forward(v_hat, ctx, cues, enhancer)
        return add(sum_all(mul(r_bar, w_r)), sum_all(mul(e_bar, w_e)))

    qformer = QFormer(d, 4, heads, 3, 2, rng)
    qf = _weighted(rng, lambda v, w: qformer_align(v, qformer), (3, 4))

    denoiser = Denoiser(4, d, heads, rng)
    dn = _weighted(rng, lambda cond, ctx, w: denoise(5, cond, ctx, denoiser), (6, 4))

    return {
        "id_controller": (idc, [r_visual, objects, controller.attn.w_q.weight]),
        "cme_enhancer": (enhancer_loss, [_param(rng, 4, d), _param(rng, 5, d), _param(rng, 3, d),
                                         enhancer.block3.w_v.weight]),
        "qformer": (qf, [_param(rng, 4, d), qformer.queries]),
        "denoiser": (dn, [_param(rng, 6, 8), _param(rng, 3, d), denoiser.head.weight]),
    }


def check_lora(rng: np.random.Generator, sizes: Sequence[Tuple[int, int]]) -> bool:
    """Zero-init equivalence and merged-weight equality on every (d_in, d_out)."""
    settings = LoraSettings(rank=8, alpha=16.0)
    for d_in, d_out in sizes:
        layer = LoraLinear(d_in, d_out, rng, lora=settings)
        x = constant(rng.normal(size=(5, d_in)))
        base = x.values @ layer.weight.values.T
        if np.abs(layer(x).values - base).max() >= 1e-6:
            return False
        layer.adapter.B.values[...] = rng.normal(0.0, 0.1, size=layer.adapter.B.shape)
        merged = x.values @ lora_merge(layer.weight, layer.adapter).values.T
        if np.abs(layer(x).values - merged).max() >= 1e-6:
            return False
    return True


def check_layout(rng: np.random.Generator, trials: int = 20) -> bool:
    for _ in range(trials):
        sizes = [int(s) for s in rng.integers(1, 6, size=5)]
        parts = [constant(rng.normal(size=(n, 4))) for n in sizes]
        seq, layout = assemble_sequence(*parts)
        if layout.ends != [int(e) for e in np.cumsum(sizes)] or seq.shape != (sum(sizes), 4):
            return False
        start, stop = layout.span("img_tokens")
        if not np.array_equal(seq.values[start:stop], parts[-1].values):
            return False
    return True


def check_enhancer_wiring(rng: np.random.Generator) -> bool:
    """Five cross-attention markers per enhancer with the expected query/key-value sources."""
    d = 8
    enhancer = Enhancer(d, 2, 3, rng, "textual")
    v_hat, ctx, cues = (_param(rng, n, d) for n in (4, 5, 3))
    with ComputeTape() as tape:
        r_bar, _ = enhancer_forward(v_hat, ctx, cues, enhancer)
    marks = [m for m in tape.markers("cross_attention") if m.tags["label"].startswith("cme.textual.")]
    if len(marks) != 5:
        return False
    by_label = {m.tags["label"]: m for m in marks}
    b = [by_label[f"cme.textual.block{i}"] for i in range(1, 6)]
    return (
        b[0].tags["query"] == enhancer.queries.id and b[0].tags["kv"] == v_hat.id
        and b[1].tags["query"] == ctx.id and b[1].tags["kv"] == cues.id
        and b[2].tags["query"] == b[0].output.id and b[2].tags["kv"] == b[1].output.id
        and b[3].tags["query"] == b[1].output.id and b[3].tags["kv"] == b[2].output.id
        and b[4].tags["query"] == b[3].output.id and b[4].tags["kv"] == cues.id
    )


def check_sampler_inversion(rng: np.random.Generator) -> bool:
    """DDIM with the true-noise predictor returns z0 at 100 and at 10 steps."""
    sched = NoiseSchedule.linear(100)
    z0 = rng.normal(size=(6, 4))
    bundle = GuidanceBundle(v=constant(np.zeros((2, 4))), v_hat=constant(np.zeros((2, 4))))

    class Passthrough:
        def condition(self, z_t, img_lat, bundle):
            return z_t

    def oracle(t, z_t, context):
        a = sched.alpha_bar(t)
        return constant((z_t.values - np.sqrt(a) * z0) / np.sqrt(1.0 - a))

    for steps in (100, 10):
        out = sample_edit(constant(z0), bundle, sched, Passthrough(), steps, np.random.default_rng(0), predict=oracle)
        if np.abs(out - z0).max() >= 1e-5:
            return False
    # forward noising at t=1 stays close to z0
    return np.abs(forward_noising(z0, 1, np.zeros_like(z0), sched) - z0).max() < 1e-3


def run_selftest(seeds: int = 5, tolerance: float = 1e-4, coords: int = 10) -> SelftestReport:
    start = time.perf_counter()
    cases: List[SelftestCase] = []
    worst: Dict[Tuple[str, str], float] = {}
    for seed in range(seeds):
        rng = np.random.default_rng(seed)
        for kind, suite, sample in (("op", op_cases(rng), None), ("composite", composite_cases(rng), coords)):
            for name, (f, inputs) in suite.items():
                err = grad_check(f, inputs, coords=sample, seed=seed)
                worst[(kind, name)] = max(worst.get((kind, name), 0.0), err)
    for (kind, name), err in sorted(worst.items()):
        cases.append(SelftestCase(name=name, kind=kind, max_rel_error=err, passed=err < tolerance))

    rng = np.random.default_rng(seeds)
    registered = set(OP_REGISTRY)
    audited = {name for kind, name in worst if kind == "op"}
    lora_sizes = [(int(a), int(b)) for a, b in rng.integers(8, 48, size=(9, 2))] + [(64, 64)]
    invariants = {
        "ops_covered": registered <= audited,
        "lora_equivalence": check_lora(rng, lora_sizes),
        "sequence_layout": check_layout(rng),
        "enhancer_wiring": check_enhancer_wiring(rng),
        "sampler_inversion": check_sampler_inversion(rng),
    }
    passed = all(c.passed for c in cases) and all(invariants.values())
    seconds = time.perf_counter() - start
    for c in cases:
        if not c.passed:
            logger.error(f"Gradient check failed: {c.kind} {c.name} max relative error {c.max_rel_error:.3e}")
    for name, ok in invariants.items():
        if not ok:
            logger.error(f"Invariant failed: {name}")
    logger.info(f"Selftest {'passed' if passed else 'FAILED'}: {len(cases)} gradient cases, "
                f"{len(invariants)} invariants in {seconds:.1f}s")
    return SelftestReport(seeds=seeds, tolerance=tolerance, cases=cases, invariants=invariants, passed=passed,
                          seconds=round(seconds, 3))
