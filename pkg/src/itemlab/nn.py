"""Dense shared-trunk network with interchangeable output heads.

Everything is float64 numpy. Only the trunk and the one head selected for an
iteration receive gradients; the other heads and their momentum buffers are
left bit-for-bit untouched.
"""

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

ACTIVATIONS = ("relu", "identity")


class NonFiniteLossError(FloatingPointError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass
class MixedTargets:
    """Mixup targets for a batch: ``gamma * onehot(a) + (1 - gamma) * onehot(b)``."""

    label_a: np.ndarray
    label_b: np.ndarray
    gamma: np.ndarray

    def __post_init__(self):
        self.label_a = np.atleast_1d(np.asarray(self.label_a, dtype=np.int64))
        self.label_b = np.atleast_1d(np.asarray(self.label_b, dtype=np.int64))
        self.gamma = np.broadcast_to(np.asarray(self.gamma, dtype=np.float64), self.label_a.shape).copy()
        if self.label_b.shape != self.label_a.shape:
            raise ValueError("label_a and label_b must have equal length")
        if np.any(self.gamma < 0) or np.any(self.gamma > 1):
            raise ValueError("gamma must lie in [0, 1]")

    def __len__(self):
        return self.label_a.size


def glorot_uniform(rng, fan_in, fan_out):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class MultiHeadNet:
    """Trunk of dense layers followed by ``m + 1`` dense heads.

    ``trunk`` is a list of ``[W, b]`` pairs (W is fan_in x fan_out), each followed
    by ``activation``. ``heads`` is a list of ``[W, b]`` pairs mapping the trunk
    width to K logits. Head 0 is the nominal classifier; any head can play that
    role in a given iteration.
    """

    def __init__(self, trunk, heads, activation="relu"):
        if activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {activation!r}")
        if not heads:
            raise ValueError("need at least one head")
        self.trunk = [[np.asarray(w, np.float64), np.asarray(b, np.float64)] for w, b in trunk]
        self.heads = [[np.asarray(w, np.float64), np.asarray(b, np.float64)] for w, b in heads]
        self.activation = activation
        width = self.input_dim
        for w, b in self.trunk:
            if w.shape[0] != width or b.shape != (w.shape[1],):
                raise ValueError("trunk layer dimensions do not chain")
            width = w.shape[1]
        for w, b in self.heads:
            if w.shape != self.heads[0][0].shape or b.shape != (w.shape[1],) or w.shape[0] != width:
                raise ValueError("all heads must map the trunk width to the same number of classes")

    @classmethod
    def init(cls, input_dim, hidden, class_count, n_heads, rng, activation="relu"):
        """Glorot-uniform weights, zero biases; trunk first, then heads in order."""
        widths = [int(input_dim)] + [int(h) for h in hidden]
        trunk = [
            [glorot_uniform(rng, a, b), np.zeros(b)] for a, b in zip(widths[:-1], widths[1:])
        ]
        heads = [
            [glorot_uniform(rng, widths[-1], class_count), np.zeros(class_count)] for _ in range(n_heads)
        ]
        return cls(trunk, heads, activation)

    @property
    def input_dim(self):
        return self.trunk[0][0].shape[0] if self.trunk else self.heads[0][0].shape[0]

    @property
    def class_count(self):
        return self.heads[0][0].shape[1]

    @property
    def n_heads(self):
        return len(self.heads)

    @property
    def n_experts(self):
        return len(self.heads) - 1

    def copy(self):
        return MultiHeadNet(
            [[w.copy(), b.copy()] for w, b in self.trunk],
            [[w.copy(), b.copy()] for w, b in self.heads],
            self.activation,
        )

    def parameters(self):
        """Flat list of parameter arrays: trunk layers then heads, W before b."""
        out = []
        for w, b in self.trunk + self.heads:
            out += [w, b]
        return out

    def parameter_count(self, part="all"):
        if part == "trunk":
            layers = self.trunk
        elif part == "head":
            layers = self.heads[:1]
        else:
            layers = self.trunk + self.heads
        return sum(w.size + b.size for w, b in layers)

    def _act(self, z):
        return np.maximum(z, 0.0) if self.activation == "relu" else z

    def _check_input(self, x):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        x = np.atleast_2d(x)
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise ValueError(f"expected input width {self.input_dim}, got shape {np.shape(x)}")
        return x, single

    def trunk_forward(self, x):
        """Return ``(features, cache)``; the cache holds every layer's input and pre-activation."""
        h = x
        cache = []
        for w, b in self.trunk:
            z = h @ w + b
            cache.append((h, z))
            h = self._act(z)
        return h, cache

    def _check_head(self, head):
        if not 0 <= head < self.n_heads:
            raise IndexError(f"head index {head} outside [0, {self.n_heads - 1}]")

    def forward(self, x, head=0):
        self._check_head(head)
        x, single = self._check_input(x)
        h, _ = self.trunk_forward(x)
        w, b = self.heads[head]
        logits = h @ w + b
        return logits[0] if single else logits

    def forward_all_heads(self, x):
        """Logits of every head, shape ``(n_heads, batch, K)``, from one trunk pass."""
        x, single = self._check_input(x)
        h, _ = self.trunk_forward(x)
        out = np.stack([h @ w + b for w, b in self.heads])
        return out[:, 0] if single else out

    def loss_and_grads(self, x, targets, head):
        """Mean batch loss and gradients for the trunk and head ``head`` only.

        Returns ``(loss, trunk_grads, head_grads)`` with grads as ``[dW, db]`` lists.
        """
        self._check_head(head)
        x, _ = self._check_input(x)
        h, cache = self.trunk_forward(x)
        w_head, b_head = self.heads[head]
        logits = h @ w_head + b_head
        q = soft_targets(targets, self.class_count)
        if q.shape[0] != x.shape[0]:
            raise ValueError("targets and inputs differ in batch size")
        logp = log_softmax(logits)
        n = x.shape[0]
        loss = float(-(q * logp).sum() / n)
        dlogits = (np.exp(logp) - q) / n
        head_grads = [h.T @ dlogits, dlogits.sum(axis=0)]
        dh = dlogits @ w_head.T
        trunk_grads = []
        for (w, _), (h_in, z) in zip(reversed(self.trunk), reversed(cache)):
            dz = dh * (z > 0) if self.activation == "relu" else dh
            trunk_grads.append([h_in.T @ dz, dz.sum(axis=0)])
            dh = dz @ w.T
        trunk_grads.reverse()
        return loss, trunk_grads, head_grads

    def joint_loss_and_grads(self, x, targets):
        """Every head scores the same trunk features.

        Returns ``(mean_loss, trunk_grads, [head_grads, ...])``: each head gets
        the gradient of its own CE, the trunk the head-averaged gradient.
        """
        x, _ = self._check_input(x)
        h, cache = self.trunk_forward(x)
        q = soft_targets(targets, self.class_count)
        n, n_heads = x.shape[0], self.n_heads
        total, all_head_grads = 0.0, []
        dh = np.zeros_like(h)
        for w_head, b_head in self.heads:
            logp = log_softmax(h @ w_head + b_head)
            total += float(-(q * logp).sum() / n)
            dlogits = (np.exp(logp) - q) / n
            all_head_grads.append([h.T @ dlogits, dlogits.sum(axis=0)])
            dh += dlogits @ w_head.T
        dh /= n_heads
        trunk_grads = []
        for (w, _), (h_in, z) in zip(reversed(self.trunk), reversed(cache)):
            dz = dh * (z > 0) if self.activation == "relu" else dh
            trunk_grads.append([h_in.T @ dz, dz.sum(axis=0)])
            dh = dz @ w.T
        trunk_grads.reverse()
        return total / n_heads, trunk_grads, all_head_grads


def log_softmax(logits):
    logits = np.asarray(logits, dtype=np.float64)
    shifted = logits - logits.max(axis=-1, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=-1, keepdims=True))


def softmax(logits):
    return np.exp(log_softmax(logits))


def soft_targets(targets, class_count):
    """Target distribution rows from integer labels or :class:`MixedTargets`."""
    if isinstance(targets, MixedTargets):
        n = len(targets)
        if np.any((targets.label_a < 0) | (targets.label_a >= class_count)) or np.any(
            (targets.label_b < 0) | (targets.label_b >= class_count)
        ):
            raise IndexError("target class outside [0, K)")
        q = np.zeros((n, class_count))
        rows = np.arange(n)
        np.add.at(q, (rows, targets.label_a), targets.gamma)
        np.add.at(q, (rows, targets.label_b), 1.0 - targets.gamma)
        return q
    labels = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    if np.any((labels < 0) | (labels >= class_count)):
        raise IndexError("target class outside [0, K)")
    q = np.zeros((labels.size, class_count))
    q[np.arange(labels.size), labels] = 1.0
    return q


def ce_loss(logits, target):
    """Cross-entropy ``-log softmax(logits)[target]``; per row for a batch."""
    logp = log_softmax(logits)
    target = np.asarray(target, dtype=np.int64)
    k = logp.shape[-1]
    if np.any((target < 0) | (target >= k)):
        raise IndexError("target class outside [0, K)")
    if logp.ndim == 1:
        return float(-logp[int(target)])
    return -logp[np.arange(logp.shape[0]), target]


def mix_ce_loss(logits, targets):
    """``gamma * CE(label_a) + (1 - gamma) * CE(label_b)``; scalar for one row."""
    logp = np.atleast_2d(log_softmax(logits))
    q = soft_targets(targets, logp.shape[-1])
    out = -(q * logp).sum(axis=1)
    return float(out[0]) if np.ndim(logits) == 1 else out


def ensemble_probabilities(net, x, heads=None):
    """Head-averaged softmax; ``heads`` restricts the average to a subset."""
    logits = net.forward_all_heads(np.atleast_2d(x))
    if heads is not None:
        logits = logits[list(heads)]
    return softmax(logits).mean(axis=0)


def ensemble_predict(net, x, heads=None):
    """Argmax of the head-averaged softmax; ties go to the lowest class index."""
    pred = np.argmax(ensemble_probabilities(net, x, heads), axis=1)
    return int(pred[0]) if np.ndim(x) == 1 else pred


@dataclass
class SGD:
    """SGD with momentum and L2 weight decay, step-list learning-rate schedule.

    ``lr_steps`` is a list of ``(epoch, multiplier)``; from that epoch on the
    learning rate is ``lr * multiplier``.
    """

    lr: float = 0.02
    momentum: float = 0.9
    weight_decay: float = 1e-3
    lr_steps: list = field(default_factory=list)
    velocity: dict = field(default_factory=dict)
    step_count: int = 0
    current_lr: float = None

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        self.lr_steps = sorted((int(e), float(m)) for e, m in self.lr_steps)
        if self.current_lr is None:
            self.current_lr = self.lr

    def set_epoch(self, epoch):
        mult = 1.0
        for start, m in self.lr_steps:
            if epoch >= start:
                mult = m
        self.current_lr = self.lr * mult
        return self.current_lr

    def _update(self, key, param, grad):
        g = grad + self.weight_decay * param if self.weight_decay else grad
        v = self.velocity.get(key)
        v = g.copy() if v is None else self.momentum * v + g
        self.velocity[key] = v
        param -= self.current_lr * v

    def apply(self, net, trunk_grads, head_grads, head):
        """Update the trunk and head ``head``; ``head=None`` takes one grad pair per head."""
        for i, ((w, b), (gw, gb)) in enumerate(zip(net.trunk, trunk_grads)):
            self._update(("trunk", i, "W"), w, gw)
            self._update(("trunk", i, "b"), b, gb)
        pairs = enumerate(head_grads) if head is None else [(head, head_grads)]
        for h, (gw, gb) in pairs:
            w, b = net.heads[h]
            self._update(("head", h, "W"), w, gw)
            self._update(("head", h, "b"), b, gb)
        self.step_count += 1


def backward_step(net, opt, x, targets, head):
    """One SGD step through the trunk and head ``head``; returns the batch loss.

    ``head=None`` steps every head on the batch (see ``joint_loss_and_grads``).
    """
    if head is None:
        loss, trunk_grads, head_grads = net.joint_loss_and_grads(x, targets)
    else:
        loss, trunk_grads, head_grads = net.loss_and_grads(x, targets, head)
    if not math.isfinite(loss):
        raise NonFiniteLossError(f"non-finite loss {loss} at optimizer step {opt.step_count}")
    opt.apply(net, trunk_grads, head_grads, head)
    return loss


# Checkpoint layout (all little-endian):
#   8 bytes magic b"ITEMCKPT", uint32 version, uint32 header length,
#   UTF-8 JSON header, then every array as raw float64 in header order.
CHECKPOINT_MAGIC = b"ITEMCKPT"
CHECKPOINT_VERSION = 1


def _checkpoint_arrays(net, opt):
    arrays = [("param", i, a) for i, a in enumerate(net.parameters())]
    for key in sorted(opt.velocity, key=repr):
        arrays.append(("velocity", list(key), opt.velocity[key]))
    return arrays


def save_checkpoint(net, opt, path):
    arrays = _checkpoint_arrays(net, opt)
    header = {
        "activation": net.activation,
        "trunk_shapes": [list(w.shape) for w, _ in net.trunk],
        "n_heads": net.n_heads,
        "class_count": net.class_count,
        "input_dim": net.input_dim,
        "optimizer": {
            "lr": opt.lr,
            "momentum": opt.momentum,
            "weight_decay": opt.weight_decay,
            "lr_steps": [list(s) for s in opt.lr_steps],
            "step_count": opt.step_count,
            "current_lr": opt.current_lr,
        },
        "arrays": [{"kind": kind, "key": key, "shape": list(a.shape)} for kind, key, a in arrays],
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(blob)))
        fh.write(blob)
        for _, _, a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_checkpoint(path):
    """Return ``(net, opt)`` exactly as saved."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    if len(raw) < 16:
        raise CheckpointError(f"{path}: truncated header")
    version, hlen = struct.unpack("<II", raw[8:16])
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    if len(raw) < 16 + hlen:
        raise CheckpointError(f"{path}: truncated header")
    try:
        header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    except ValueError as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    offset = 16 + hlen
    params, velocity = [], {}
    for spec in header["arrays"]:
        shape = tuple(spec["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(raw):
            raise CheckpointError(f"{path}: truncated array data")
        a = np.frombuffer(raw, dtype="<f8", count=nbytes // 8, offset=offset).reshape(shape).astype(np.float64)
        offset += nbytes
        if spec["kind"] == "param":
            params.append(a)
        else:
            velocity[tuple(spec["key"])] = a
    if offset != len(raw):
        raise CheckpointError(f"{path}: trailing bytes after array data")
    n_trunk = len(header["trunk_shapes"])
    pairs = [params[i : i + 2] for i in range(0, len(params), 2)]
    net = MultiHeadNet(pairs[:n_trunk], pairs[n_trunk:], header["activation"])
    o = header["optimizer"]
    opt = SGD(
        lr=o["lr"],
        momentum=o["momentum"],
        weight_decay=o["weight_decay"],
        lr_steps=[tuple(s) for s in o["lr_steps"]],
        velocity=velocity,
        step_count=o["step_count"],
        current_lr=o["current_lr"],
    )
    return net, opt
