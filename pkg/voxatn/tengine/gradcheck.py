"""Finite-difference verification of analytic gradients.

Coordinates are sampled per parameter; each one is perturbed by +/-epsilon and
the central difference is compared to the backward pass. A coordinate whose
stencil crosses a kink (a LeakyReLU sign flip or a max-pool argmax change) is
skipped and counted, since neither side of the difference is then meaningful.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Mapping, Set, Tuple

import numpy as np

from ..errors import GradientCheckError
from . import ops
from .tensor import Tensor

logger = logging.getLogger(__name__)

DEFAULT_EPSILON = 1e-5
DEFAULT_FLOOR = 1e-3
# draws per wanted coordinate before a tensor gives up on kinked stencils
MAX_ATTEMPTS_PER_SAMPLE = 4
PERMUTE_LIMIT = 1 << 20


@dataclass
class ParamCheck:
    name: str
    checked: int = 0
    skipped: int = 0
    max_rel_error: float = 0.0
    worst_index: int = -1


@dataclass
class GradCheckReport:
    label: str
    tolerance: float
    params: List[ParamCheck] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((p.max_rel_error for p in self.params), default=0.0)

    @property
    def checked(self) -> int:
        return sum(p.checked for p in self.params)

    @property
    def skipped(self) -> int:
        return sum(p.skipped for p in self.params)

    @property
    def passed(self) -> bool:
        return self.checked > 0 and self.max_rel_error < self.tolerance

    def raise_for_failure(self) -> None:
        if not self.passed:
            raise GradientCheckError(
                f"gradient check failed: label={self.label}, max_rel_error={self.max_rel_error:.3e}, "
                f"tolerance={self.tolerance:.1e}, checked={self.checked}"
            )

    def lines(self) -> List[str]:
        status = "PASS" if self.passed else "FAIL"
        out = [
            f"{status} {self.label}: max_rel_error={self.max_rel_error:.3e} "
            f"(tol {self.tolerance:.0e}, checked {self.checked}, skipped {self.skipped})"
        ]
        for p in self.params:
            out.append(f"    {p.name}: max_rel_error={p.max_rel_error:.3e} checked={p.checked} skipped={p.skipped}")
        return out


def relative_error(analytic: float, numeric: float, floor: float = DEFAULT_FLOOR) -> float:
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), floor)


def _coordinates(rng: np.random.Generator, size: int, limit: int) -> Iterator[int]:
    """Up to limit distinct flat indices below size, in random order."""
    limit = min(limit, size)
    if size <= PERMUTE_LIMIT:
        yield from rng.permutation(size)[:limit].tolist()
        return
    seen: Set[int] = set()
    while len(seen) < limit:
        idx = int(rng.integers(size))
        if idx not in seen:
            seen.add(idx)
            yield idx


def kink_signature(loss: Tensor) -> Tuple[bytes, ...]:
    """Bytes of every recorded kink state reachable from loss, in tape order."""
    return tuple(node.signature.tobytes() for node in loss._topo() if node.signature is not None)


def gradient_check(
    loss_fn: Callable[[], Tensor],
    params: Mapping[str, Tensor],
    *,
    label: str = "graph",
    epsilon: float = DEFAULT_EPSILON,
    tolerance: float = 1e-6,
    n_samples: int = 200,
    seed: int = 0,
    floor: float = DEFAULT_FLOOR,
) -> GradCheckReport:
    """Compare the backward pass of ``loss_fn()`` against central differences.

    ``loss_fn`` must rebuild the graph from the current parameter values on
    every call. ``n_samples`` coordinates are checked in total; the quota a
    small tensor cannot fill moves on to larger ones and a kink-skipped
    coordinate is replaced by a fresh draw. Fewer are checked only when the
    parameters hold fewer scalars or kinks use up the retry budget.
    """
    for p in params.values():
        p.zero_grad()
    loss = loss_fn()
    base_sig = kink_signature(loss)
    loss.backward()
    analytic: Dict[str, np.ndarray] = {
        name: (p.grad.copy() if p.grad is not None else np.zeros_like(p.data)) for name, p in params.items()
    }

    rng = np.random.default_rng(seed)
    report = GradCheckReport(label=label, tolerance=tolerance)
    # smallest tensors first so quota they cannot use passes on to larger ones
    order = sorted(params, key=lambda name: params[name].size)
    remaining = n_samples
    results: Dict[str, ParamCheck] = {}
    for i, name in enumerate(order):
        quota = math.ceil(remaining / (len(order) - i))
        flat = params[name].data.reshape(-1)
        pc = ParamCheck(name=name)
        for idx in _coordinates(rng, flat.size, quota * MAX_ATTEMPTS_PER_SAMPLE):
            if pc.checked >= quota:
                break
            old = flat[idx]
            flat[idx] = old + epsilon
            plus = loss_fn()
            flat[idx] = old - epsilon
            minus = loss_fn()
            flat[idx] = old
            if kink_signature(plus) != base_sig or kink_signature(minus) != base_sig:
                pc.skipped += 1
                continue
            numeric = (plus.item() - minus.item()) / (2.0 * epsilon)
            err = relative_error(float(analytic[name].reshape(-1)[idx]), numeric, floor)
            pc.checked += 1
            if err > pc.max_rel_error:
                pc.max_rel_error, pc.worst_index = err, idx
        remaining = max(0, remaining - pc.checked)
        results[name] = pc
    report.params = [results[name] for name in params]

    logger.info(
        f"Gradient check: label={label}, max_rel_error={report.max_rel_error:.3e}, "
        f"checked={report.checked}, skipped={report.skipped}, passed={report.passed}"
    )
    return report


# --- per-layer harness ---


def _head(out: Tensor, rng: np.random.Generator) -> Tensor:
    # fixed random readout so every layer is checked through the same scalar loss
    flat = ops.flatten(out)
    w = Tensor(rng.normal(0.0, 1.0 / np.sqrt(flat.shape[1]), size=(flat.shape[1], 2)))
    b = Tensor(rng.normal(0.0, 0.1, size=2))
    targets = ops.one_hot(np.arange(flat.shape[0]) % 2, 2)
    return ops.cross_entropy(ops.softmax(ops.fully_connected(flat, w, b)), targets)


def _layer_cases(rng: np.random.Generator):
    def p(*shape, scale=1.0):
        return Tensor(rng.normal(0.0, scale, size=shape), requires_grad=True)

    x5, w5, b5 = p(1, 2, 5, 5, 5), p(3, 2, 3, 3, 3, scale=0.3), p(3)
    yield "conv3d", {"input": x5, "weight": w5, "bias": b5}, lambda: ops.conv3d(x5, w5, b5, (2, 2, 2), (1, 1, 1))
    xl = p(3, 7)
    yield "leaky_relu", {"input": xl}, lambda: ops.leaky_relu(xl, 0.01)
    xm = p(2, 3, 3, 3, 3)
    yield "global_max_pool", {"input": xm}, lambda: ops.global_pool(xm, "max")
    xa = p(2, 3, 3, 3, 3)
    yield "global_avg_pool", {"input": xa}, lambda: ops.global_pool(xa, "avg")
    xf, wf, bf = p(4, 6), p(6, 5, scale=0.5), p(5)
    yield "fully_connected", {"input": xf, "weight": wf, "bias": bf}, lambda: ops.fully_connected(xf, wf, bf)
    xs = p(3, 4, scale=2.0)
    yield "sigmoid", {"input": xs}, lambda: ops.sigmoid(xs)
    xo = p(4, 3)
    yield "softmax", {"input": xo}, lambda: ops.softmax(xo)
    c1, c2 = p(3, 2), p(3, 4)
    yield "concat", {"left": c1, "right": c2}, lambda: ops.concat([c1, c2])
    g, xb = p(2, 3), p(2, 3, 2, 2, 2)
    yield "multiply_broadcast", {"gate": g, "input": xb}, lambda: ops.multiply_broadcast(g, xb)
    xt = p(2, 3, 2, 2)
    yield "flatten", {"input": xt}, lambda: ops.flatten(xt)


def run_layer_checks(seed: int = 0, tolerance: float = 1e-6) -> List[GradCheckReport]:
    """Gradient check of every layer kind on small random inputs."""
    rng = np.random.default_rng(seed)
    reports = []
    for label, params, build in _layer_cases(rng):
        head_seed = int(rng.integers(0, 2**31))

        def loss_fn(build=build, head_seed=head_seed) -> Tensor:
            return _head(build(), np.random.default_rng(head_seed))

        reports.append(gradient_check(loss_fn, params, label=label, tolerance=tolerance, seed=seed))
    return reports
