"""Full-scene prediction, confusion counts, PCC / kappa, and the noise sweep."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass

import numpy as np

from .data import RAYLEIGH_UNIT_MEAN_SCALE, SWEEP_VARIANCES, inject_noise, patch_pairs
from .model import SAFNet
from .tensor import no_grad


def predict_change_map(model: SAFNet, i1: np.ndarray, i2: np.ndarray, r: int = 13,
                       batch_size: int = 256) -> np.ndarray:
    """Classify every pixel of the scene -> 0/255 float grid."""
    if i1.shape != i2.shape:
        raise ValueError(f"images differ in size: {i1.shape} vs {i2.shape}")
    h, w = i1.shape
    rows, cols = np.divmod(np.arange(h * w), w)
    out = np.empty(h * w, dtype=np.float64)
    dtype = model.dtype
    with no_grad():
        for s in range(0, h * w, batch_size):
            sl = slice(s, s + batch_size)
            x1, x2 = patch_pairs(i1, i2, rows[sl], cols[sl], r, dtype=dtype)
            p = model.forward(x1, x2, training=False).probs.data
            out[sl] = np.where(p[:, 1] > p[:, 0], 255.0, 0.0)
    return out.reshape(h, w)


def _binary(grid, what: str) -> np.ndarray:
    g = np.asarray(grid)
    ok = (g == 0) | (g == 255)
    if not ok.all():
        r, c = np.argwhere(~ok)[0]
        raise ValueError(f"{what} must be binary 0/255; found {g[r, c]} at ({r},{c})")
    return g == 255


@dataclass
class Confusion:
    fp: int
    fn: int
    n_c: int
    n_u: int

    @property
    def oe(self) -> int:
        return self.fp + self.fn

    @property
    def n(self) -> int:
        return self.n_c + self.n_u


def confusion(pred, truth) -> Confusion:
    p = _binary(pred, "predicted map")
    t = _binary(truth, "reference map")
    if p.shape != t.shape:
        raise ValueError(f"map sizes differ: {p.shape} vs {t.shape}")
    return Confusion(fp=int((p & ~t).sum()), fn=int((~p & t).sum()),
                     n_c=int(t.sum()), n_u=int((~t).sum()))


def pcc(c: Confusion) -> float:
    return (c.n - c.oe) / c.n * 100.0


def expected_agreement(c: Confusion) -> float:
    n = c.n
    return ((c.n_c + c.fp - c.fn) * c.n_c + (c.n_u + c.fn - c.fp) * c.n_u) / (n * n)


def kappa(c: Confusion) -> float:
    """Kappa coefficient in percent; 100 when chance agreement is already perfect."""
    pre = expected_agreement(c)
    if pre == 1.0:
        return 100.0
    return (pcc(c) / 100.0 - pre) / (1.0 - pre) * 100.0


@dataclass
class MetricsReport:
    fp: int
    fn: int
    oe: int
    pcc: float
    kc: float
    n_c: int
    n_u: int
    noise_model: str = "none"
    seed: int = 0

    @classmethod
    def from_maps(cls, pred, truth, noise_model: str = "none", seed: int = 0) -> "MetricsReport":
        c = confusion(pred, truth)
        return cls(c.fp, c.fn, c.oe, pcc(c), kappa(c), c.n_c, c.n_u, noise_model, seed)

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def table(self) -> str:
        return (f"{'FP':>8} {'FN':>8} {'OE':>8} {'PCC(%)':>8} {'KC(%)':>8}\n"
                f"{self.fp:>8d} {self.fn:>8d} {self.oe:>8d} {self.pcc:>8.2f} {self.kc:>8.2f}")


def noise_conditions(variances=SWEEP_VARIANCES, rayleigh_scale: float = RAYLEIGH_UNIT_MEAN_SCALE):
    """(label, model, var, scale) for each sweep column."""
    conds = [(f"var={v:g}", "gaussian", float(v), rayleigh_scale) for v in variances]
    conds.append((f"rayleigh={rayleigh_scale:.4f}", "rayleigh", 0.0, rayleigh_scale))
    return conds


def noisy_pair(i1, i2, model: str, var: float, scale: float, seed: int, both: bool = True):
    """Corrupt the pair with independent noise draws; ``both=False`` leaves ``i1`` clean."""
    n2 = inject_noise(i2, model, var, scale, seed=2 * seed + 1)
    n1 = inject_noise(i1, model, var, scale, seed=2 * seed) if both else np.asarray(i1, np.float64).copy()
    return n1, n2


def noise_sweep(model: SAFNet, i1, i2, truth, r: int = 13, seed: int = 0, both: bool = True,
                variances=SWEEP_VARIANCES, rayleigh_scale: float = RAYLEIGH_UNIT_MEAN_SCALE,
                batch_size: int = 256) -> list[tuple[str, MetricsReport]]:
    """Evaluate a trained model on noise-corrupted copies of the pair."""
    rows = []
    for label, kind, var, scale in noise_conditions(variances, rayleigh_scale):
        a, b = noisy_pair(i1, i2, kind, var, scale, seed, both)
        pred = predict_change_map(model, a, b, r, batch_size)
        name = kind if kind == "rayleigh" else f"gaussian:{var:g}"
        rows.append((label, MetricsReport.from_maps(pred, truth, name, seed)))
    return rows


def sweep_table(rows: list[tuple[str, MetricsReport]]) -> str:
    lines = [f"{'condition':<18} {'PCC(%)':>8} {'KC(%)':>8}"]
    for label, rep in rows:
        lines.append(f"{label:<18} {rep.pcc:>8.2f} {rep.kc:>8.2f}")
    return "\n".join(lines)
