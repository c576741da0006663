"""Dataset ingestion, the 1-d toy problem, normalization and fold splitting."""
import csv
from dataclasses import dataclass

import numpy as np

from gdkl.errors import ConfigError, NonFinite, ParseError
from gdkl.gp import Dataset, GaussianPosterior

TOY_NOISE_VAR = 0.05
TOY_GAP = (4.0, 8.0)


def toy_function(x):
    x = np.asarray(x, dtype=float)
    return 0.6 - np.exp(-((x - 2.0) ** 2)) - np.exp(-0.1 * (x - 6.0) ** 2) - 1.0 / (x**2 + 1.0)


def toy_dataset(rng, n=800, low=-2.0, high=12.0, gap=TOY_GAP):
    """800 noisy samples on [-2, 12], split in half; the first half loses the gap.

    Returns ``(D1, D2, f)`` where ``D1`` has no inputs inside ``gap``.
    """
    x = rng.uniform(low, high, size=n)
    y = toy_function(x) + np.sqrt(TOY_NOISE_VAR) * rng.standard_normal(n)
    perm = rng.permutation(n)
    i1, i2 = perm[: n // 2], perm[n // 2 :]
    keep = ~((x[i1] >= gap[0]) & (x[i1] <= gap[1]))
    i1 = np.sort(i1[keep])
    i2 = np.sort(i2)
    return Dataset(x[i1, None], y[i1]), Dataset(x[i2, None], y[i2]), toy_function


def load_csv(path, num_targets=1):
    """Read a numeric CSV with a header row; the last ``num_targets`` columns are targets."""
    rows = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise ParseError(f"{path}: empty file", row=0)
        width = len(header)
        if width <= num_targets:
            raise ParseError(f"{path}: need more than {num_targets} columns, header has {width}", row=0)
        for line_no, record in enumerate(reader, start=2):
            if not record or all(not cell.strip() for cell in record):
                continue
            if len(record) != width:
                raise ParseError(f"{path}:{line_no}: expected {width} fields, got {len(record)}", row=line_no)
            values = []
            for col, cell in enumerate(record):
                try:
                    values.append(float(cell))
                except ValueError:
                    raise ParseError(
                        f"{path}:{line_no}: column {col + 1} ({header[col]!r}) is not numeric: {cell!r}",
                        row=line_no, column=col + 1,
                    ) from None
            rows.append(values)
    data = np.array(rows, dtype=float).reshape(-1, width)
    if not np.all(np.isfinite(data)):
        r, c = np.argwhere(~np.isfinite(data))[0]
        raise NonFinite(f"{path}: non-finite value at row {r + 2}, column {c + 1}")
    return Dataset(data[:, :-num_targets], data[:, -num_targets:])


def write_csv(path, D, header=None):
    data = np.hstack([D.inputs, D.targets])
    if header is None:
        header = [f"x{i}" for i in range(D.inputs.shape[1])] + [f"y{i}" for i in range(D.targets.shape[1])]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows([repr(float(v)) for v in row] for row in data)


@dataclass(frozen=True)
class Scaler:
    x_mean: np.ndarray
    x_std: np.ndarray
    y_mean: np.ndarray
    y_std: np.ndarray
    constant_inputs: np.ndarray  # boolean mask of train columns left unscaled
    constant_targets: np.ndarray

    def transform(self, D):
        targets = (D.targets - self.y_mean) / self.y_std
        noise = None if D.noise_var is None else D.noise_var / self.y_std**2
        return Dataset((D.inputs - self.x_mean) / self.x_std, targets, noise)

    def inverse_targets(self, y):
        return np.asarray(y) * self.y_std + self.y_mean

    def inverse_posterior(self, post):
        return GaussianPosterior(self.inverse_targets(post.mean), np.asarray(post.variance) * self.y_std**2)


def _column_stats(a):
    mean = a.mean(axis=0)
    std = a.std(axis=0)
    constant = ~(std > 0)
    # constant columns pass through untouched
    return np.where(constant, 0.0, mean), np.where(constant, 1.0, std), constant


def normalize(train, apply_to=(), scale_targets=True):
    """Zero-mean, unit-std columns using ``train`` statistics only.

    Returns ``(train_normalized, [others normalized], scaler)``.
    """
    x_mean, x_std, cx = _column_stats(train.inputs)
    if scale_targets:
        y_mean, y_std, cy = _column_stats(train.targets)
    else:
        c = train.targets.shape[1]
        y_mean, y_std, cy = np.zeros(c), np.ones(c), np.zeros(c, dtype=bool)
    scaler = Scaler(x_mean, x_std, y_mean, y_std, cx, cy)
    return scaler.transform(train), [scaler.transform(D) for D in apply_to], scaler


def kfold(D, k, seed, mode="kfold", test_fraction=0.1):
    """Train/test index pairs.

    ``mode="kfold"`` shuffles once and cuts ``k`` near-equal disjoint test
    folds. ``mode="resplit"`` draws ``k`` independent random splits holding
    out ``test_fraction`` of the data each.
    """
    n = D if isinstance(D, (int, np.integer)) else len(D)
    if k < 2 and mode == "kfold":
        raise ConfigError("k-fold needs k >= 2 (k = 1 leaves an empty test set)")
    if k < 1:
        raise ConfigError("need at least one split")
    rng = np.random.default_rng(seed)
    splits = []
    if mode == "kfold":
        if k > n:
            raise ConfigError(f"cannot cut {k} folds from {n} points")
        perm = rng.permutation(n)
        for test in np.array_split(perm, k):
            mask = np.ones(n, dtype=bool)
            mask[test] = False
            splits.append((np.flatnonzero(mask), np.sort(test)))
    elif mode == "resplit":
        n_test = int(round(test_fraction * n))
        if not 0 < n_test < n:
            raise ConfigError(f"test_fraction {test_fraction} leaves an empty side on {n} points")
        for _ in range(k):
            perm = rng.permutation(n)
            splits.append((np.sort(perm[n_test:]), np.sort(perm[:n_test])))
    else:
        raise ConfigError(f"unknown split mode {mode!r}")
    return splits
