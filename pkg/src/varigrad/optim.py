"""Adam gradient ascent with temporal averaging and the alpha <= 1 projection."""

from dataclasses import dataclass, field

import numpy as np

from .errors import OptimizerError


def is_log_alpha(key):
    return key.endswith("log_alpha")


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    avg_decay: float = 0.999
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    avg: dict = field(default_factory=dict)


class Adam:
    """Adam on a maximised objective.

    ``step`` updates ``params`` in place (each value must be a numpy array),
    then projects every ``*log_alpha`` entry onto ``log_alpha <= 0``. An
    exponential moving average of the iterates is kept for evaluation.
    """

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8, avg_decay=0.999,
                 constrained=is_log_alpha):
        self.state = AdamState(lr, beta1, beta2, eps, avg_decay)
        self.constrained = constrained

    @property
    def t(self):
        return self.state.t

    def step(self, params, grads):
        s = self.state
        for key in params:
            g = grads.get(key)
            if g is None:
                raise OptimizerError(f"no gradient for parameter {key}", path=key)
            g = np.asarray(g, dtype=np.float64)
            if g.shape != np.shape(params[key]):
                raise OptimizerError(f"gradient shape {g.shape} does not match parameter "
                                     f"{key} {np.shape(params[key])}", path=key)
            if not np.all(np.isfinite(g)):
                raise OptimizerError(f"non-finite gradient for {key} at step {s.t + 1}", path=key)

        s.t += 1
        bc1 = 1.0 - s.beta1 ** s.t
        bc2 = 1.0 - s.beta2 ** s.t
        for key, p in params.items():
            g = np.asarray(grads[key], dtype=np.float64)
            if key not in s.m:
                s.m[key] = np.zeros_like(p, dtype=np.float64)
                s.v[key] = np.zeros_like(p, dtype=np.float64)
                s.avg[key] = np.zeros_like(p, dtype=np.float64)
            m, v = s.m[key], s.v[key]
            m *= s.beta1
            m += (1.0 - s.beta1) * g
            v *= s.beta2
            v += (1.0 - s.beta2) * (g * g)
            # ascent
            p += s.lr * (m / bc1) / (np.sqrt(v / bc2) + s.eps)
            if self.constrained(key):
                np.minimum(p, 0.0, out=p)
            a = s.avg[key]
            a *= s.avg_decay
            a += (1.0 - s.avg_decay) * p
        return params

    def averaged_params(self):
        """Bias-corrected exponential moving average of the parameter iterates."""
        s = self.state
        if s.t < 1:
            raise OptimizerError("no steps taken yet")
        corr = 1.0 - s.avg_decay ** s.t
        return {key: a / corr for key, a in s.avg.items()}
