"""Compare tape gradients with central finite differences."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from pcmnet.numerics.tape import Tape, Var


@dataclass
class ProbeResult:
    name: str
    index: tuple[int, ...]
    tape_grad: float
    fd_grad: float
    rel_error: float


@dataclass
class GradCheckReport:
    probes: list[ProbeResult] = field(default_factory=list)

    @property
    def max_rel_error(self) -> float:
        return max((p.rel_error for p in self.probes), default=0.0)

    def passed(self, tol: float = 1e-4) -> bool:
        return self.max_rel_error <= tol

    def worst(self, n: int = 5) -> list[ProbeResult]:
        return sorted(self.probes, key=lambda p: -p.rel_error)[:n]


def relative_error(a: float, b: float, floor: float = 1e-8) -> float:
    # floor keeps the ratio defined when both gradients vanish
    return abs(a - b) / max(abs(a), abs(b), floor)


def check_gradients(model_fn: Callable[[Mapping[str, Var]], Var],
                    params: Mapping[str, np.ndarray],
                    probe_count: int | None = None,
                    step: float = 1e-4,
                    seed: int = 0,
                    floor: float = 1e-8) -> GradCheckReport:
    """Probe scalar entries of ``params`` and report tape-vs-FD agreement.

    ``model_fn`` maps a dict of ``Var`` to a scalar ``Var``; it is called once
    on a tape and twice per probe on constant inputs.  ``probe_count=None``
    probes every scalar parameter.
    """
    tape = Tape()
    watched = {name: tape.watch(np.array(value, dtype=np.float64), name)
               for name, value in params.items()}
    loss = model_fn(watched)
    tape.backward(loss)
    grads = tape.gradients()

    slots = [(name, idx) for name, value in params.items()
             for idx in np.ndindex(np.shape(value))]
    if probe_count is not None and probe_count < len(slots):
        rng = np.random.default_rng(seed)
        chosen = sorted(rng.choice(len(slots), size=probe_count, replace=False))
        slots = [slots[i] for i in chosen]

    base = {name: np.array(value, dtype=np.float64) for name, value in params.items()}
    report = GradCheckReport()
    for name, idx in slots:
        arr = base[name]
        orig = arr[idx]
        arr[idx] = orig + step
        up = float(model_fn({k: Var(v) for k, v in base.items()}).value)
        arr[idx] = orig - step
        down = float(model_fn({k: Var(v) for k, v in base.items()}).value)
        arr[idx] = orig
        fd = (up - down) / (2 * step)
        g = float(grads[name][idx])
        report.probes.append(ProbeResult(name, tuple(int(i) for i in idx), g, fd,
                                         relative_error(g, fd, floor)))
    return report
