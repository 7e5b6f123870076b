"""Finite-difference validation of the autodiff graph on a whole model.

The model is rebuilt in float64 and put in eval mode so every forward is
a pure function of the parameters (batch-norm reads its running buffers,
which start at identity statistics). The checked scalar is a fixed
random projection of the logits averaged over all entries, so every
output element carries gradient signal while the scalar stays O(1).
A few entries per parameter tensor are perturbed by +-h; relative error
compares the central difference against the analytic gradient.

The step default balances two error floors measured on this network:
ReLU/max-pool kinks invalidate secants for h at 1e-3..1e-4 (the
difference spans activation sign changes), while h below 1e-5 amplifies
f64 roundoff on near-zero gradient entries. h = 3e-5 sits in the band
where the central difference tracks the true tangent to ~1e-7.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import build_model
from .tensor import Tensor, no_grad


def to_float64(model):
    for p in model.parameters():
        p.data = p.data.astype(np.float64)
        p.grad = np.zeros_like(p.data)
    return model


@dataclass
class GradCheckRow:
    name: str
    max_rel: float
    checked: int


@dataclass
class GradCheckReport:
    rows: list
    group_max: dict  # top-level module -> worst relative error
    threshold: float
    passed: bool

    def format(self):
        lines = []
        for group in sorted(self.group_max):
            ok = "ok" if self.group_max[group] < self.threshold else "FAIL"
            lines.append(f"{group:<10s} max rel err {self.group_max[group]:.3e}  {ok}")
        worst = max(self.rows, key=lambda r: r.max_rel)
        lines.append(f"worst tensor: {worst.name} ({worst.max_rel:.3e})")
        lines.append(
            f"{'PASS' if self.passed else 'FAIL'}: "
            f"{len(self.rows)} tensors, threshold {self.threshold:g}"
        )
        return "\n".join(lines)


def run_gradcheck(model_name="hiformer-tiny", seed=0, hw=None,
                  samples_per_tensor=3, h=3e-5, threshold=1e-4, **overrides):
    if hw is not None:
        overrides["hw"] = hw
    model = to_float64(build_model(model_name, seed=seed, **overrides))
    model.eval()
    H, W = model.cfg.input_hw

    rng = np.random.default_rng(seed + 90210)
    x = Tensor(rng.uniform(0.0, 1.0, size=(1, 3, H, W)), dtype=np.float64)

    with no_grad():
        probe = model(x)
    # Small probe scale keeps |f| itself small, so the f64 roundoff of
    # (f+ - f-) stays far below the 1e-8 relative-error floor even on
    # near-zero gradient entries. Relative truncation is scale-free.
    R = Tensor(0.01 * rng.normal(size=probe.shape), dtype=np.float64)

    def scalar():
        return (model(x) * R).mean()

    model.zero_grad()
    loss = scalar()
    loss.backward()
    analytic = {name: p.grad.copy() for name, p in model.named_parameters()}

    rows = []
    group_max = {}
    with no_grad():
        for name, p in model.named_parameters():
            k = min(samples_per_tensor, p.data.size)
            idx = rng.choice(p.data.size, size=k, replace=False)
            worst = 0.0
            flat = p.data.reshape(-1)
            for i in idx:
                orig = flat[i]
                flat[i] = orig + h
                f_plus = scalar().item()
                flat[i] = orig - h
                f_minus = scalar().item()
                flat[i] = orig
                numeric = (f_plus - f_minus) / (2.0 * h)
                a = analytic[name].reshape(-1)[i]
                rel = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
                worst = max(worst, rel)
            rows.append(GradCheckRow(name=name, max_rel=worst, checked=k))
            group = name.split(".", 1)[0]
            group_max[group] = max(group_max.get(group, 0.0), worst)

    passed = all(v < threshold for v in group_max.values())
    return GradCheckReport(rows=rows, group_max=group_max,
                           threshold=threshold, passed=passed)
