"""Training utilities: cyclical learning rate, SGD, losses, and a small
synthetic hand corpus for closed-loop checks.

The synthetic images are articulated stick figures: five chains radiating
from a wrist point, rendered as Gaussian blobs plus uniform noise. They
are not meant to look like hands, only to give the coordinate regression
something spatially structured to memorize, with exactly 21 keypoints in
the standard order (wrist, then four joints per finger).
"""

from dataclasses import dataclass

import numpy as np

from .metrics import NUM_KEYPOINTS
from .tensor import ConfigError


class DivergenceError(RuntimeError):
    """Raised when a parameter or gradient goes non-finite mid-training."""


@dataclass
class LRSchedule:
    lr_min: float = 1e-4
    lr_max: float = 1e-1
    stepsize: int = 6            # epochs per half-cycle

    def __post_init__(self):
        if self.lr_min <= 0 or self.lr_max < self.lr_min:
            raise ConfigError("need 0 < lr_min <= lr_max")
        if self.stepsize < 1:
            raise ConfigError("stepsize must be >= 1 epoch")


def cyclical_lr(epoch, sched):
    """Triangular wave: lr_min at epochs 0, 2*stepsize, ...; lr_max at
    stepsize, 3*stepsize, ...; linear in between."""
    t = float(epoch)
    cycle = np.floor(1.0 + t / (2.0 * sched.stepsize))
    x = abs(t / sched.stepsize - 2.0 * cycle + 1.0)
    return sched.lr_min + (sched.lr_max - sched.lr_min) * max(0.0, 1.0 - x)


class SGD:
    """Plain SGD with optional momentum. Grad buffers live on the model;
    step() applies and the caller zeroes them."""

    def __init__(self, model, momentum=0.0):
        self.model = model
        self.momentum = float(momentum)
        self._vel = None
        if self.momentum:
            self._vel = {name: np.zeros_like(p)
                         for name, p, _ in self._triples()}

    def _triples(self):
        return self.model.named_items()

    def step(self, lr):
        for name, p, g in self._triples():
            if not np.all(np.isfinite(g)):
                raise DivergenceError(f"non-finite gradient in {name}")
            if self._vel is None:
                p -= lr * g
            else:
                v = self._vel[name]
                v *= self.momentum
                v -= lr * g
                p += v
            if not np.all(np.isfinite(p)):
                raise DivergenceError(f"parameter {name} diverged")


def coordinate_loss(pred, target, kind="mse"):
    """Mean coordinate loss and its gradient wrt pred.

    pred and target are raw head outputs, (N,1,1,42) or any matching
    shapes; the mean runs over every scalar.
    """
    if pred.shape != target.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.astype(np.float64) - target.astype(np.float64)
    n = diff.size
    if kind == "mse":
        loss = float(np.mean(diff * diff))
        grad = (2.0 / n) * diff
    elif kind == "mae":
        loss = float(np.mean(np.abs(diff)))
        grad = np.sign(diff) / n
    else:
        raise ConfigError(f"unknown loss {kind!r}")
    if not np.isfinite(loss):
        raise DivergenceError("loss is non-finite")
    return loss, grad.astype(pred.dtype)


# ------------------------------------------------------------- synth data

# wrist + 5 chains of 4 joints = 21 points, chain j joint i at index 1+4j+i
_CHAIN_SPREAD = 0.5          # radians between adjacent chain base angles
_SEG_FRAC = 0.16             # segment length as a fraction of image size


def synth_hand(rng, size=32, dtype=np.float32):
    """One synthetic sample: (size,size,3) image and (21,2) pixel coords.

    Joints sit on half-integer-nudged pixel centers so a memorizing model
    has an unambiguous target. Coordinates are (x, y), x right, y down.
    """
    base = rng.uniform(0.35 * size, 0.65 * size, size=2)   # wrist (x, y)
    heading = rng.uniform(0.0, 2.0 * np.pi)
    seg = _SEG_FRAC * size
    pts = np.empty((NUM_KEYPOINTS, 2), dtype=np.float64)
    pts[0] = base
    for j in range(5):
        ang = heading + (j - 2) * _CHAIN_SPREAD + rng.uniform(-0.15, 0.15)
        x, y = base
        for i in range(4):
            ang += rng.uniform(-0.3, 0.3)
            x += seg * np.cos(ang)
            y += seg * np.sin(ang)
            pts[1 + 4 * j + i] = (x, y)
    # land on pixel centers, stay inside the frame with a 2px margin
    pts = np.clip(np.round(pts - 0.5) + 0.5, 2.0, size - 3.0)
    img = np.zeros((size, size), dtype=np.float64)
    yy, xx = np.mgrid[0:size, 0:size]
    for j in range(5):
        chain = np.vstack([pts[0], pts[1 + 4 * j : 5 + 4 * j]])
        for a, b in zip(chain[:-1], chain[1:]):
            for t in np.linspace(0.0, 1.0, 8):
                cx, cy = a + t * (b - a)
                img += 0.1 * np.exp(-((xx - cx) ** 2 + (yy - cy) ** 2)
                                    / (2.0 * 0.9 ** 2))
    for px, py in pts:
        img += np.exp(-((xx - px) ** 2 + (yy - py) ** 2) / (2.0 * 0.9 ** 2))
    img = img / max(img.max(), 1e-12)
    rgb = np.empty((size, size, 3), dtype=np.float64)
    rgb[..., 0] = img
    rgb[..., 1] = 0.6 * img
    rgb[..., 2] = 1.0 - img
    rgb += rng.uniform(0.0, 0.05, size=rgb.shape)
    return rgb.astype(dtype), pts


def make_synth_dataset(n, size=32, seed=0, dtype=np.float32):
    """(images (N,S,S,3), keypoints (N,21,2) in pixels)."""
    rng = np.random.default_rng(seed)
    imgs = np.empty((n, size, size, 3), dtype=dtype)
    kps = np.empty((n, NUM_KEYPOINTS, 2), dtype=np.float64)
    for i in range(n):
        imgs[i], kps[i] = synth_hand(rng, size, dtype)
    return imgs, kps


def targets_from_keypoints(kps, h, w, dtype=np.float32):
    """Pixel (21,2) coords -> raw head targets (N,1,1,42) in [0,1]."""
    t = np.asarray(kps, dtype=np.float64).copy()
    t[..., 0] /= w
    t[..., 1] /= h
    return t.reshape(t.shape[0], 1, 1, 2 * NUM_KEYPOINTS).astype(dtype)


@dataclass
class TrainState:
    epoch: int
    lr: float
    loss: float
    epe_px: float


def train_toy(net, images, keypoints, epochs, batch_size=8, sched=None,
              momentum=0.9, loss_kind="mse", seed=0, log=None,
              checkpoint_every=0, checkpoint_fn=None):
    """Minibatch SGD on raw-coordinate regression. Deterministic for a
    fixed seed: shuffling uses its own generator, and kernels are exact.

    Returns the per-epoch TrainState history; the final entry's epe_px is
    measured in inference mode over the whole set.
    """
    if sched is None:
        sched = LRSchedule()
    n = images.shape[0]
    if n == 0:
        raise ValueError("empty dataset")
    h, w = net.cfg.input_h, net.cfg.input_w
    targets = targets_from_keypoints(keypoints, h, w, net.dtype)
    opt = SGD(net, momentum=momentum)
    order_rng = np.random.default_rng(seed)
    history = []
    for epoch in range(epochs):
        lr = cyclical_lr(epoch, sched)
        order = order_rng.permutation(n)
        total, seen = 0.0, 0
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            net.zero_grads()
            out = net.forward_raw(images[idx], train=True)
            loss, dloss = coordinate_loss(out, targets[idx], loss_kind)
            net.backward(dloss)
            opt.step(lr)
            total += loss * len(idx)
            seen += len(idx)
        pred = net.predict(images)
        err = np.sqrt(((pred - keypoints) ** 2).sum(-1)).mean()
        state = TrainState(epoch=epoch, lr=lr, loss=total / seen,
                           epe_px=float(err))
        history.append(state)
        if log is not None:
            log.write(f"{epoch},{lr:.10g},{state.loss:.10g},{err:.10g}\n")
        if checkpoint_every and checkpoint_fn and \
                (epoch + 1) % checkpoint_every == 0:
            checkpoint_fn(net, epoch)
    return history
