"""Central finite-difference check of analytic gradients.

A central difference across a relu kink measures the average of two
one-sided slopes, not the derivative. Probes whose +/-eps evaluations change
any relu's active set are therefore replaced by another coordinate of the
same array (and counted in ``kinks_skipped``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Dict, List, Mapping

import numpy as np

from .errors import ContractError
from .tensor import Tensor, backward, record_kinks

ModelEval = Callable[[Dict[str, Tensor]], Tensor]


@dataclass
class GradCheckReport:
    max_rel_err: float
    worst_param: str
    n_checked: int
    per_param: Dict[str, float] = field(default_factory=dict)
    kinks_skipped: int = 0
    # arrays where every candidate coordinate straddled a kink
    unchecked: List[str] = field(default_factory=list)

    def passed(self, tol: float) -> bool:
        return self.max_rel_err < tol and not self.unchecked


def rel_err(a: float, b: float) -> float:
    return abs(a - b) / max(1e-8, abs(a) + abs(b))


def _sample_coords(params: Mapping[str, np.ndarray], n_coords: int, rng: np.random.Generator):
    # every array gets a share; small arrays are checked exhaustively
    names = list(params)
    sizes = {k: params[k].size for k in names}
    share = max(1, -(-n_coords // len(names)))
    picks = {}
    for k in names:
        m = min(sizes[k], share)
        picks[k] = np.sort(rng.choice(sizes[k], size=m, replace=False))
    total = sum(len(v) for v in picks.values())
    # top up from the larger arrays if exhaustive small ones left us short
    for k in sorted(names, key=lambda k: -sizes[k]):
        if total >= n_coords:
            break
        rest = np.setdiff1d(np.arange(sizes[k]), picks[k])
        extra = rng.choice(rest, size=min(len(rest), n_coords - total), replace=False)
        picks[k] = np.sort(np.concatenate([picks[k], extra]))
        total += len(extra)
    return picks


def grad_check(
    model_eval: ModelEval,
    params: Mapping[str, np.ndarray],
    eps: float = 1e-4,
    n_coords: int = 200,
    seed: int = 0,
) -> GradCheckReport:
    """Compare backward() against (f(θ+eps) - f(θ-eps)) / 2eps on sampled coordinates.

    ``model_eval`` maps a dict of leaf tensors to a scalar loss tensor and
    must be deterministic. All parameter arrays must be float64.
    """
    if not 1e-6 <= eps <= 1e-2:
        raise ContractError(f"eps={eps} outside [1e-6, 1e-2]")
    for k, v in params.items():
        if np.asarray(v).dtype != np.float64:
            raise ContractError(f"grad_check needs double precision, {k} is {np.asarray(v).dtype}")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}

    def f(values):
        with record_kinks() as log:
            out = model_eval({k: Tensor(v) for k, v in values.items()}).data
        if out.size != 1:
            raise ContractError(f"model_eval must return a scalar, got shape {out.shape}")
        pattern = np.concatenate([m.reshape(-1) for m in log]) if log else np.zeros(0, dtype=bool)
        return float(out.reshape(-1)[0]), pattern

    f0, pattern0 = f(base)
    if f(base)[0] != f0:
        raise ContractError("model_eval is not deterministic")

    leaves = {k: Tensor(v.copy(), requires_grad=True) for k, v in base.items()}
    backward(model_eval(leaves))
    analytic = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in leaves.items()}

    rng = np.random.default_rng(seed)
    picks = _sample_coords(base, n_coords, rng)
    worst, worst_name, per_param, n, kinks = 0.0, "", {}, 0, 0
    unchecked = []
    for name, idx in picks.items():
        flat = base[name].reshape(-1)
        # replacement candidates, in a seeded order
        spare = [int(j) for j in rng.permutation(np.setdiff1d(np.arange(flat.size), idx))]
        pmax, checked = 0.0, 0
        for i in idx:
            i = int(i)
            while True:
                orig = flat[i]
                flat[i] = orig + eps
                fp, pp = f(base)
                flat[i] = orig - eps
                fm, pm = f(base)
                flat[i] = orig
                if np.array_equal(pp, pattern0) and np.array_equal(pm, pattern0):
                    break
                kinks += 1
                if not spare:
                    i = -1
                    break
                i = spare.pop()
            if i < 0:
                continue
            numeric = (fp - fm) / (2 * eps)
            err = rel_err(float(analytic[name].reshape(-1)[i]), numeric)
            pmax = max(pmax, err)
            checked += 1
            n += 1
        if checked == 0:
            unchecked.append(name)
            continue
        per_param[name] = pmax
        if pmax > worst or not worst_name:
            worst, worst_name = pmax, name
    return GradCheckReport(
        max_rel_err=worst,
        worst_param=worst_name,
        n_checked=n,
        per_param=per_param,
        kinks_skipped=kinks,
        unchecked=unchecked,
    )
