"""Deep reward function: an MLP from state features to a scalar, with exact backprop."""
from __future__ import annotations

import base64
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

CHECKPOINT_FORMAT = "velopref.reward/1"


@dataclass
class RewardModel:
    weights: list[np.ndarray]   # weights[k] has shape (fan_in, fan_out)
    biases: list[np.ndarray]

    @property
    def input_dim(self) -> int:
        return self.weights[0].shape[0]

    @property
    def depth(self) -> int:
        return len(self.weights) - 1

    @property
    def shapes(self) -> list[tuple[int, int]]:
        return [w.shape for w in self.weights]

    @property
    def n_params(self) -> int:
        return sum(w.size + b.size for w, b in zip(self.weights, self.biases))

    @property
    def theta(self) -> np.ndarray:
        return np.concatenate([p.ravel() for wb in zip(self.weights, self.biases) for p in wb])

    def with_theta(self, theta) -> "RewardModel":
        theta = np.asarray(theta, dtype=np.float64)
        if theta.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {theta.shape}")
        weights, biases, i = [], [], 0
        for w, b in zip(self.weights, self.biases):
            weights.append(theta[i:i + w.size].reshape(w.shape).copy())
            i += w.size
            biases.append(theta[i:i + b.size].copy())
            i += b.size
        return RewardModel(weights, biases)

    def copy(self) -> "RewardModel":
        return self.with_theta(self.theta)

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.theta)))


def init_model(seed: int, d: int, width: int = 64, depth: int = 4) -> RewardModel:
    """Fan-in scaled uniform weights U(-sqrt(6/fan_in), +sqrt(6/fan_in)), zero biases."""
    if d < 1 or depth < 0 or (depth > 0 and width < 1):
        raise ValueError("need d >= 1, depth >= 0 and width >= 1")
    rng = np.random.default_rng(seed)
    sizes = [d] + [width] * depth + [1]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        biases.append(np.zeros(fan_out))
    return RewardModel(weights, biases)


def _check_input(model: RewardModel, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.input_dim:
        raise ValueError(f"feature dimension {x.shape[-1]} does not match model input {model.input_dim}")
    return x


def _forward_cache(model: RewardModel, x: np.ndarray):
    acts = [x]
    h = x
    last = len(model.weights) - 1
    for k, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w + b
        h = z if k == last else np.maximum(z, 0.0)
        acts.append(h)
    return acts


def reward_forward(model: RewardModel, x) -> np.ndarray | float:
    """Reward of one feature vector (returns float) or of a batch (n, d) (returns (n,))."""
    x = _check_input(model, x)
    single = x.ndim == 1
    out = _forward_cache(model, np.atleast_2d(x))[-1][:, 0]
    return float(out[0]) if single else out


def reward_backward(model: RewardModel, x, upstream) -> RewardModel:
    """Gradient of sum_i upstream_i * R(x_i) with respect to every parameter.

    The result is a RewardModel-shaped record holding partial derivatives.
    """
    x = _check_input(model, x)
    x = np.atleast_2d(x)
    upstream = np.atleast_1d(np.asarray(upstream, dtype=np.float64))
    if upstream.shape != (x.shape[0],):
        raise ValueError("upstream must have one value per input row")
    acts = _forward_cache(model, x)
    delta = upstream[:, None]
    gw, gb = [None] * len(model.weights), [None] * len(model.weights)
    for k in range(len(model.weights) - 1, -1, -1):
        gw[k] = acts[k].T @ delta
        gb[k] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ model.weights[k].T) * (acts[k] > 0)
    return RewardModel(gw, gb)


def prior_gradient(model: RewardModel, lam: float) -> RewardModel:
    """Gradient of the zero-mean Gaussian log-prior -lam/2 * |theta|^2."""
    if lam < 0:
        raise ValueError("lambda must be nonnegative")
    return model.with_theta(-lam * model.theta)


def log_prior(model: RewardModel, lam: float) -> float:
    theta = model.theta
    return -0.5 * lam * float(theta @ theta)


def save_model(model: RewardModel, path, compact: bool = False) -> None:
    doc = {"format": CHECKPOINT_FORMAT, "shapes": [list(s) for s in model.shapes]}
    theta = model.theta
    if compact:
        doc["theta_b64"] = base64.b64encode(theta.astype("<f8").tobytes()).decode("ascii")
    else:
        doc["theta"] = theta.tolist()
    Path(path).write_text(json.dumps(doc, separators=(",", ":")))


def load_model(path) -> RewardModel:
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"unsupported checkpoint format {doc.get('format')!r}")
    shapes = [tuple(s) for s in doc["shapes"]]
    if "theta_b64" in doc:
        theta = np.frombuffer(base64.b64decode(doc["theta_b64"]), dtype="<f8").astype(np.float64)
    else:
        theta = np.asarray(doc["theta"], dtype=np.float64)
    skeleton = RewardModel([np.zeros(s) for s in shapes], [np.zeros(s[1]) for s in shapes])
    return skeleton.with_theta(theta)
