"""Finite-difference verification of the full network's backward pass."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .model import CMRobertaModel, ModelConfig, tiny_config
from .tensor import GradCheckResult, Tensor
from .train import cross_entropy


class BranchMemo:
    """Caches branch outputs while only unrelated parameters are perturbed.

    A cached branch is reused when every parameter it reads still holds the
    value it had when the branch was computed. Rectifier sign patterns logged
    by the branch are replayed on a cache hit so kink detection sees the same
    sequence as a full evaluation.
    """

    def __init__(self, model: CMRobertaModel):
        params = dict(model.named_parameters())
        self._deps = {
            branch: [(n, p) for n, p in params.items() if n.startswith(prefixes)]
            for branch, prefixes in model.branch_dependencies().items()
        }
        self._cache: dict[str, tuple[list[np.ndarray], object, list[bytes]]] = {}
        self.hits = 0
        self.misses = 0

    def __call__(self, branch: str, compute):
        # only cache where the sign log is being recorded, so a hit can replay it
        if T.is_grad_enabled() or T._KINK_LOG is None:
            return compute()
        deps = self._deps[branch]
        entry = self._cache.get(branch)
        if entry is not None and all(np.array_equal(p.data, s) for (_, p), s in zip(deps, entry[0])):
            self.hits += 1
            T._KINK_LOG.extend(entry[2])
            return entry[1]
        self.misses += 1
        log = T._KINK_LOG
        start = len(log)
        out = compute()
        self._cache[branch] = ([p.data.copy() for _, p in deps], out, list(log[start:]))
        return out


def _dropped_row_batch(cfg: ModelConfig, batch: int, steps: int, rng: np.random.Generator,
                       input_scale: float):
    X_a = input_scale * rng.standard_normal((batch, steps, cfg.d_audio_in))
    X_t = input_scale * rng.standard_normal((batch, steps, cfg.d_text_in))
    mask = np.ones((batch, steps))
    if batch > 1 and steps > 1:
        mask[-1, -1] = 0.0
    labels = rng.integers(0, cfg.n_classes, size=(batch, steps))
    return X_a, X_t, mask, labels


@dataclass
class ModelCheck:
    result: GradCheckResult
    seconds: float
    n_parameters: int
    cache_hits: int

    @property
    def max_rel_error(self) -> float:
        return self.result.max_rel_error

    def passed(self, tol: float = 1e-4) -> bool:
        return self.result.passed(tol)

    def to_dict(self, tol: float = 1e-4) -> dict:
        return {
            "max_rel_error": self.result.max_rel_error,
            "worst_parameter": self.result.worst_param,
            "worst_index": list(self.result.worst_index or ()),
            "n_checked": self.result.n_checked,
            "step_reductions": self.result.n_step_reductions,
            "tolerance": tol,
            "passed": self.passed(tol),
            "complete": self.result.n_checked == self.n_parameters,
            "seconds": self.seconds,
        }


def _precise_cross_entropy(logits: np.ndarray, labels: np.ndarray, mask: np.ndarray) -> np.longdouble:
    """Masked mean cross-entropy accumulated in ``np.longdouble``."""
    z = logits.astype(np.longdouble)
    z = z - z.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1))
    valid = np.asarray(mask) > 0
    picked = np.take_along_axis(z, np.where(valid, labels, 0)[..., None], axis=-1)[..., 0]
    return np.sum((lse - picked)[valid]) / np.longdouble(valid.sum())


def check_model(config: ModelConfig | None = None, seed: int = 0, batch: int = 4, steps: int = 3,
                eps: float = 1e-3, method: str = "richardson", input_scale: float = 2.0,
                memoize: bool = True, stop_above: float | None = None,
                precise: bool = True) -> ModelCheck:
    """Gradient-check every parameter of a small network on a random padded batch.

    The defaults use Richardson-extrapolated central differences with a coarse
    step; deep recurrent paths carry gradients near ``1e-9`` whose plain
    central differences drown in rounding error at smaller steps.

    With ``precise`` the finite-difference side reduces the logits to the loss
    in extended precision and subtracts the unperturbed loss before rounding,
    which removes most of the float64 rounding noise of the final reduction.
    The backpropagated side is untouched.
    """
    cfg = config or tiny_config(seed=seed)
    model = CMRobertaModel(cfg)
    rng = np.random.default_rng([seed, 7])
    X_a, X_t, mask, labels = _dropped_row_batch(cfg, batch, steps, rng, input_scale)
    memo = BranchMemo(model) if memoize else None

    def objective() -> Tensor:
        return cross_entropy(model.forward(X_a, X_t, mask, memo=memo), labels, mask)

    def wide_loss() -> np.longdouble:
        return _precise_cross_entropy(model.forward(X_a, X_t, mask, memo=memo).data, labels, mask)

    with T.no_grad():
        ref = wide_loss()

    def centred() -> float:
        return float(wide_loss() - ref)

    start = time.perf_counter()
    result = T.gradient_check(objective, dict(model.named_parameters()), eps=eps, method=method,
                               stop_above=stop_above, value=centred if precise else None)
    return ModelCheck(result, time.perf_counter() - start, model.n_parameters(),
                      memo.hits if memo else 0)
