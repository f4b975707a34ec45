"""Normalized-RBF regression over a sliding window of steady-state samples.

Predictions are weighted averages of stored outputs, with weights decaying
in the standardized input distance. The window is FIFO so the map tracks a
plant whose characteristics drift. Models are immutable; add_sample returns
a new instance.
"""

from dataclasses import dataclass
from typing import Optional

import numpy as np


class InsufficientData(Exception):
    pass


class ParseError(Exception):
    pass


SIGMA_GRID = np.logspace(-2.0, 1.0, 31)


@dataclass(frozen=True)
class GrnnModel:
    samples: tuple           # ((input, output), ...) as 1-D float arrays
    sigma: float             # kernel width in standardized input units
    capacity: int
    n_out: int
    input_scale: Optional[tuple]   # (mean, spread) per input dimension

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be > 0")
        if self.capacity < 1:
            raise ValueError("capacity must be >= 1")
        if len(self.samples) > self.capacity:
            raise ValueError("more samples than capacity")


def make_model(capacity, n_out, sigma=0.5):
    return GrnnModel((), float(sigma), int(capacity), int(n_out), None)


def _rescale(samples):
    X = np.array([s[0] for s in samples])
    mean = X.mean(axis=0)
    spread = X.std(axis=0)
    # constant dimensions would blow up the normalization
    spread = np.where(spread < 1e-12, 1.0, spread)
    return (mean, spread)


def add_sample(model, r, d_ss):
    r = np.asarray(r, dtype=float).reshape(-1).copy()
    d_ss = np.asarray(d_ss, dtype=float).reshape(-1).copy()
    if not (np.all(np.isfinite(r)) and np.all(np.isfinite(d_ss))):
        raise ValueError("sample must be finite")
    if d_ss.shape[0] != model.n_out:
        raise ValueError("output dimension mismatch")
    if model.samples and model.samples[0][0].shape != r.shape:
        raise ValueError("input dimension mismatch")
    samples = model.samples + ((r, d_ss),)
    if len(samples) > model.capacity:
        samples = samples[1:]
    return GrnnModel(samples, model.sigma, model.capacity, model.n_out,
                     _rescale(samples))


def _normalized(model):
    mean, spread = model.input_scale
    X = np.array([s[0] for s in model.samples])
    return (X - mean) / spread


def _weights(Xn, qn, sigma):
    d2 = ((Xn - qn) ** 2).sum(axis=1)
    # shifting by the minimum keeps the largest weight at 1, so the
    # average stays well defined down to the nearest-neighbor limit
    d2 = d2 - d2.min()
    return np.exp(-d2 / (2.0 * sigma ** 2))


def predict(model, r):
    if not model.samples:
        return np.zeros(model.n_out)
    mean, spread = model.input_scale
    qn = (np.asarray(r, dtype=float).reshape(-1) - mean) / spread
    Xn = _normalized(model)
    w = _weights(Xn, qn, model.sigma)
    Y = np.array([s[1] for s in model.samples])
    return (w[:, None] * Y).sum(axis=0) / w.sum()


def loo_error(model, sigma):
    """Mean squared leave-one-out prediction error at a given sigma."""
    k = len(model.samples)
    if k < 2:
        raise InsufficientData("need at least 2 samples")
    Xn = _normalized(model)
    Y = np.array([s[1] for s in model.samples])
    err = 0.0
    for j in range(k):
        keep = np.arange(k) != j
        w = _weights(Xn[keep], Xn[j], sigma)
        pred = (w[:, None] * Y[keep]).sum(axis=0) / w.sum()
        err += float(((pred - Y[j]) ** 2).sum())
    return err / k


def select_sigma(model, grid=None):
    """Leave-one-out sweep over an ascending sigma grid; ties keep the
    smaller sigma."""
    if len(model.samples) < 2:
        raise InsufficientData("need at least 2 samples")
    grid = SIGMA_GRID if grid is None else np.asarray(grid, dtype=float)
    best_s, best_e = None, np.inf
    for s in grid:
        e = loo_error(model, float(s))
        if e < best_e:
            best_s, best_e = float(s), e
    return best_s


def default_sigma(model):
    if len(model.samples) >= 5:
        return select_sigma(model)
    return 0.5


def with_sigma(model, sigma):
    return GrnnModel(model.samples, float(sigma), model.capacity,
                     model.n_out, model.input_scale)


# ---- line-oriented text serialization ----

def _fmt(v):
    return " ".join("%.17g" % x for x in v)


def write_samples(path, samples, n_in=None):
    if samples:
        n_in = samples[0][0].shape[0]
    with open(path, "w") as fh:
        fh.write("# steady-state training samples\n")
        if n_in is not None:
            fh.write(f"# inputs {n_in}\n")
        for r, d in samples:
            fh.write(_fmt(r) + " " + _fmt(d) + "\n")


def load_samples(path, n_in=None):
    """Whitespace-separated numeric rows, '#' comments; the input/output
    split comes from an '# inputs k' directive or the n_in argument."""
    rows = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)
            comment = line[1].strip() if len(line) > 1 else ""
            if comment.startswith("inputs"):
                try:
                    n_in = int(comment.split()[1])
                except (IndexError, ValueError):
                    raise ParseError(f"line {lineno}: bad inputs directive")
            body = line[0].strip()
            if not body:
                continue
            try:
                vals = [float(tok) for tok in body.split()]
            except ValueError:
                raise ParseError(f"line {lineno}: non-numeric field")
            rows.append((lineno, vals))
    if not rows:
        return []
    width = len(rows[0][1])
    if n_in is None:
        raise ParseError("input dimension unknown: no '# inputs k' directive")
    if not 0 < n_in < width:
        raise ParseError(f"inputs directive {n_in} inconsistent with "
                         f"{width}-column rows")
    out = []
    for lineno, vals in rows:
        if len(vals) != width:
            raise ParseError(f"line {lineno}: expected {width} fields, "
                             f"got {len(vals)}")
        out.append((np.array(vals[:n_in]), np.array(vals[n_in:])))
    return out


def write_model(path, model):
    with open(path, "w") as fh:
        fh.write("# fitted regression model\n")
        fh.write("sigma %.17g\n" % model.sigma)
        fh.write("capacity %d\n" % model.capacity)
        fh.write("outputs %d\n" % model.n_out)
        if model.samples:
            fh.write(f"# inputs {model.samples[0][0].shape[0]}\n")
        for r, d in model.samples:
            fh.write(_fmt(r) + " " + _fmt(d) + "\n")


def read_model(path):
    sigma, capacity, n_out, n_in = None, None, None, None
    rows = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)
            comment = line[1].strip() if len(line) > 1 else ""
            if comment.startswith("inputs"):
                n_in = int(comment.split()[1])
            body = line[0].strip()
            if not body:
                continue
            head = body.split()[0]
            if head in ("sigma", "capacity", "outputs"):
                try:
                    val = float(body.split()[1])
                except (IndexError, ValueError):
                    raise ParseError(f"line {lineno}: bad {head} line")
                if head == "sigma":
                    sigma = val
                elif head == "capacity":
                    capacity = int(val)
                else:
                    n_out = int(val)
                continue
            try:
                rows.append([float(tok) for tok in body.split()])
            except ValueError:
                raise ParseError(f"line {lineno}: non-numeric field")
    if sigma is None or capacity is None or n_out is None:
        raise ParseError("missing sigma/capacity/outputs header")
    model = make_model(capacity, n_out, sigma)
    for vals in rows:
        if n_in is None:
            n_in = len(vals) - n_out
        model = add_sample(model, vals[:n_in], vals[n_in:])
    return model
