"""Fast gradient sign method against a frozen network.

Each window is moved by ``epsilon`` along the sign of the gradient of its own
MSE loss w.r.t. its input. ``epsilon`` is measured in the network's input
units, i.e. standardized aggregate watts.
"""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .nn import Network
from .tensor import ShapeError


class AttackError(RuntimeError):
    pass


@dataclass(frozen=True)
class AttackConfig:
    epsilon: float
    targets: tuple[int, ...] | None = None  # window indices; None = all
    clip_min: float | None = None  # lower bound for perturbed inputs, off by default

    def __post_init__(self):
        if not (np.isfinite(self.epsilon) and self.epsilon >= 0):
            raise ValueError(f"epsilon must be a finite value >= 0, got {self.epsilon}")


@dataclass
class AdversarialBatch:
    clean: np.ndarray
    perturbed: np.ndarray
    perturbation: np.ndarray  # exactly epsilon * sign(grad), elements in {-eps, 0, +eps}
    epsilon: float
    window_ids: np.ndarray
    checksums: list[int] = field(default_factory=list)

    def save(self, directory, seed: int | None = None, model_checksum: str | None = None) -> Path:
        """Write ``adversarial.csv`` (window,t,clean,perturbed) and ``manifest.json``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        with open(directory / "adversarial.csv", "w") as fh:
            fh.write("window,t,clean,perturbed\n")
            for wid, xc, xp in zip(self.window_ids, self.clean, self.perturbed):
                for t, (a, b) in enumerate(zip(xc, xp)):
                    fh.write(f"{wid},{t},{float(a)!r},{float(b)!r}\n")
        manifest = {
            "epsilon": self.epsilon,
            "seed": seed,
            "model_checksum": model_checksum,
            "windows": len(self.window_ids),
            "window_len": int(self.clean.shape[1]),
            "sign_checksums": self.checksums,
        }
        with open(directory / "manifest.json", "w") as fh:
            json.dump(manifest, fh, indent=2)
        return directory

    @classmethod
    def load(cls, directory) -> "AdversarialBatch":
        directory = Path(directory)
        manifest = json.loads((directory / "manifest.json").read_text())
        raw = np.loadtxt(directory / "adversarial.csv", delimiter=",", skiprows=1, ndmin=2)
        n, length = manifest["windows"], manifest["window_len"]
        clean = raw[:, 2].reshape(n, length)
        perturbed = raw[:, 3].reshape(n, length)
        eps = float(manifest["epsilon"])
        return cls(
            clean=clean,
            perturbed=perturbed,
            perturbation=eps * np.sign(perturbed - clean),
            epsilon=eps,
            window_ids=raw[::length, 0].astype(np.int64),
            checksums=manifest.get("sign_checksums", []),
        )


def _bounded_add(x: np.ndarray, delta: np.ndarray, eps: float) -> np.ndarray:
    # x + delta rounds to nearest; where that overshoots eps in the computed
    # difference, step one ulp back towards x so |x_adv - x| <= eps holds exactly
    out = x + delta
    for _ in range(4):
        over = np.abs(out - x) > eps
        if not over.any():
            break
        out[over] = np.nextafter(out[over], x[over])
    return out


def _unpack(dataset):
    if hasattr(dataset, "inputs"):
        return dataset.inputs, dataset.targets
    inputs, targets = dataset
    return inputs, targets


def fgsm(net: Network, dataset, epsilon: float, *, window_ids=None,
         clip_min: float | None = None, batch_size: int = 1024) -> AdversarialBatch:
    """x_adv = x + epsilon * sign(grad_x MSE(net(x), y)), with sign(0) = 0.

    ``dataset`` is a :class:`~nilmadv.data.WindowedDataset` or an
    ``(inputs, targets)`` pair.
    """
    config = AttackConfig(epsilon, None if window_ids is None else tuple(window_ids), clip_min)
    inputs, targets = _unpack(dataset)
    x = np.array(inputs, dtype=np.float64)  # copy, callers' windows are never touched
    y = np.asarray(targets, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.input_len:
        raise ShapeError(f"inputs must be (windows, {net.input_len}), got {x.shape}")
    if len(y) != len(x):
        raise ShapeError(f"{len(x)} windows but {len(y)} targets")
    ids = np.arange(len(x)) if config.targets is None else np.asarray(config.targets, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= len(x)):
        raise AttackError("target window index out of range")
    x, y = x[ids], y[ids]

    before = net.checksum()
    signs = np.empty_like(x)
    for start in range(0, len(x), batch_size):
        sl = slice(start, start + batch_size)
        grad = net.input_gradient(x[sl], y[sl])
        bad = ~np.isfinite(grad).all(axis=1)
        if bad.any():
            raise AttackError(f"non-finite input gradient in window {int(ids[sl][bad][0])}")
        signs[sl] = np.sign(grad)
    if net.checksum() != before:
        raise AttackError("network parameters changed during gradient computation")

    delta = config.epsilon * signs
    if config.epsilon == 0:
        perturbed = x.copy()
    else:
        perturbed = _bounded_add(x, delta, config.epsilon)
    if clip_min is not None:
        perturbed = np.maximum(perturbed, clip_min)
    checksums = [zlib.crc32(s.astype(np.int8).tobytes()) for s in signs]
    return AdversarialBatch(x, perturbed, delta, config.epsilon, ids, checksums)


def loss_delta(net: Network, clean, adversarial, targets) -> tuple[np.ndarray, np.ndarray]:
    """Per-window MSE on clean and on attacked inputs."""
    clean = np.asarray(clean, dtype=np.float64)
    adversarial = np.asarray(adversarial, dtype=np.float64)
    if clean.shape != adversarial.shape:
        raise ShapeError(f"clean {clean.shape} and adversarial {adversarial.shape} differ")
    y = np.asarray(targets, dtype=np.float64).reshape(len(clean), net.output_len)
    p_clean = net.forward(clean)
    p_adv = net.forward(adversarial)
    clean_loss = np.mean((p_clean - y) ** 2, axis=1)
    adv_loss = np.mean((p_adv - y) ** 2, axis=1)
    return clean_loss, adv_loss

