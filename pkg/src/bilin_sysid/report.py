from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass
class EstimationReport:
    """Outcome of one fitting run (ML or EM)."""

    params: object
    method: str
    termination: str
    n_iter: int
    cost_trace: list = field(default_factory=list)
    step_norms: list = field(default_factory=list)
    loglik_trace: list = field(default_factory=list)
    param_trace: list = field(default_factory=list)
    wall_time: float = 0.0
    iter_times: list = field(default_factory=list)

    @property
    def final_step_norm(self):
        return self.step_norms[-1] if self.step_norms else float("nan")

    @property
    def final_cost(self):
        return self.cost_trace[-1] if self.cost_trace else float("nan")

    def trace_rows(self):
        """Per-iteration rows ``(iteration, cost, step_norm, loglik)``; NaN when absent."""
        n = max(len(self.cost_trace), len(self.step_norms), len(self.loglik_trace))

        def get(seq, i):
            return seq[i] if i < len(seq) else np.nan

        return [
            (i, get(self.cost_trace, i), get(self.step_norms, i), get(self.loglik_trace, i))
            for i in range(n)
        ]
