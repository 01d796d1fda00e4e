"""The behavior-score-embedded encoder network.

A 3D convolutional autoencoder (encoder 32-16-8 channels, mirrored decoder)
trained in two stages: reconstruction only, then reconstruction plus a
contrastive center loss on the flattened bottleneck, where each sample's
cluster comes from a binarized behavior score (CDR or MMSE).
"""
from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .errors import ConfigError, DataError
from .nn import (
    AdamState,
    BatchNormLayer,
    ConvLayer,
    adam_step,
    batchnorm3d_backward_cm,
    batchnorm3d_forward_cm,
    conv3d_backward_cm,
    conv3d_forward_cm,
    maxpool3d_backward,
    maxpool3d_forward,
    relu_backward,
    relu_forward,
    upsample_nearest_backward,
    upsample_nearest_forward,
)
from .seeds import stream

log = logging.getLogger(__name__)

HEALTHY, IMPAIRED = 0, 1
CDR_CUTOFF = 0.5
MMSE_CUTOFF = 27


class BehaviorTest(str, Enum):
    CDR = "CDR"
    MMSE = "MMSE"

    @classmethod
    def parse(cls, text: str) -> "BehaviorTest":
        try:
            return cls(text.strip().upper())
        except ValueError:
            raise ConfigError(f"unknown behavior test {text!r} (expected cdr or mmse)") from None


def binarize_behavior(test: BehaviorTest, value: float) -> int:
    """Map a CDR or MMSE score to HEALTHY (0) or IMPAIRED (1).

    CDR >= 0.5 is impaired; MMSE >= 27 is healthy.
    """
    test = BehaviorTest(test)
    if test is BehaviorTest.CDR:
        if not 0 <= value <= 3:
            raise DataError(f"CDR score out of range: {value}")
        return IMPAIRED if value >= CDR_CUTOFF else HEALTHY
    if not 0 <= value <= 30:
        raise DataError(f"MMSE score out of range: {value}")
    return HEALTHY if value >= MMSE_CUTOFF else IMPAIRED


@dataclass
class BsenConfig:
    input_dims: Tuple[int, int, int] = (64, 80, 64)
    channels: Tuple[int, int, int] = (32, 16, 8)
    alpha: float = 0.5
    delta: float = 1.0
    batch_size: int = 32
    epochs: int = 30
    lr_stage1: float = 1e-4
    lr_stage2: float = 5e-4
    center_momentum: float = 0.5
    seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        self.input_dims = tuple(int(d) for d in self.input_dims)
        self.channels = tuple(int(c) for c in self.channels)
        self.validate()

    def validate(self) -> None:
        if len(self.input_dims) != 3 or any(d <= 0 or d % 8 for d in self.input_dims):
            raise ConfigError(f"input dims must be positive multiples of 8, got {self.input_dims}")
        if len(self.channels) != 3 or any(c < 1 for c in self.channels):
            raise ConfigError(f"need three positive encoder channel counts, got {self.channels}")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        if self.delta <= 0:
            raise ConfigError("delta must be > 0")
        if self.batch_size < 2:
            raise ConfigError("batch_size must be >= 2 (batch normalization)")
        if self.epochs < 0:
            raise ConfigError("epochs must be >= 0")
        if not 0 <= self.center_momentum <= 1:
            raise ConfigError("center_momentum must lie in [0, 1]")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def bottleneck_shape(self) -> Tuple[int, int, int, int]:
        return (self.channels[-1],) + tuple(d // 8 for d in self.input_dims)

    @property
    def latent_dim(self) -> int:
        return int(np.prod(self.bottleneck_shape))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["input_dims"] = list(self.input_dims)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "BsenConfig":
        return cls(**d)


class BsenNet:
    """Encoder-decoder parameters and the forward/backward pass.

    Encoder: 3 x [conv, batchnorm, relu, maxpool]. Decoder: 3 x [upsample,
    conv], with batchnorm+relu after the first two convs and a bare relu
    after the last one.
    """

    def __init__(self, config: BsenConfig):
        self.config = config
        rng = stream(config.seed, "init")
        dt = config.np_dtype
        c1, c2, c3 = config.channels
        enc = [(1, c1), (c1, c2), (c2, c3)]
        dec = [(c3, c2), (c2, c1), (c1, 1)]
        self.enc_conv = [ConvLayer.create(i, o, rng, dt) for i, o in enc]
        self.enc_bn = [BatchNormLayer.create(o, dt) for _, o in enc]
        self.dec_conv = [ConvLayer.create(i, o, rng, dt) for i, o in dec]
        self.dec_bn = [BatchNormLayer.create(o, dt) for _, o in dec[:2]]

    # -- parameter views -------------------------------------------------

    def params(self) -> Dict[str, np.ndarray]:
        """Trainable arrays in declaration order (views, not copies)."""
        out = {}
        for tag, convs, bns in (("enc", self.enc_conv, self.enc_bn), ("dec", self.dec_conv, self.dec_bn)):
            for i, conv in enumerate(convs):
                out[f"{tag}{i}.conv.weight"] = conv.weight
                out[f"{tag}{i}.conv.bias"] = conv.bias
                if i < len(bns):
                    out[f"{tag}{i}.bn.gamma"] = bns[i].gamma
                    out[f"{tag}{i}.bn.beta"] = bns[i].beta
        return out

    def buffers(self) -> Dict[str, np.ndarray]:
        out = {}
        for tag, bns in (("enc", self.enc_bn), ("dec", self.dec_bn)):
            for i, bn in enumerate(bns):
                out[f"{tag}{i}.bn.running_mean"] = bn.running_mean
                out[f"{tag}{i}.bn.running_var"] = bn.running_var
        return out

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {**self.params(), **self.buffers()}

    def copy(self) -> "BsenNet":
        return copy.deepcopy(self)

    # -- forward / backward ----------------------------------------------

    def _check_input(self, x: np.ndarray) -> np.ndarray:
        if x.ndim == 4:
            x = x[:, None]
        if x.ndim != 5 or x.shape[1] != 1 or tuple(x.shape[2:]) != self.config.input_dims:
            raise DataError(f"input shape {x.shape} does not match model dims {self.config.input_dims}")
        return x.astype(self.config.np_dtype, copy=False)

    # Internally activations are channel-major (C, B, x, y, z); see nn.layers.

    def _encode(self, x, training, caches):
        h = x
        for conv, bn in zip(self.enc_conv, self.enc_bn):
            h, c_conv = conv3d_forward_cm(h, conv)
            h, c_bn = batchnorm3d_forward_cm(h, bn, training)
            # relu and max-pool commute; pooling first is 8x cheaper
            h, c_pool = maxpool3d_forward(h)
            h, c_relu = relu_forward(h)
            caches.append((c_conv, c_bn, c_pool, c_relu))
        return h

    def _decode(self, z, training, caches):
        h = z
        for i, conv in enumerate(self.dec_conv):
            h, c_up = upsample_nearest_forward(h)
            h, c_conv = conv3d_forward_cm(h, conv)
            c_bn = None
            if i < len(self.dec_bn):
                h, c_bn = batchnorm3d_forward_cm(h, self.dec_bn[i], training)
            h, c_relu = relu_forward(h)
            caches.append((c_up, c_conv, c_bn, c_relu))
        return h

    @staticmethod
    def _flatten_latent(z):
        return np.ascontiguousarray(z.swapaxes(0, 1)).reshape(z.shape[1], -1)

    def _unflatten_latent(self, latent):
        z = latent.reshape((len(latent),) + self.config.bottleneck_shape)
        return np.ascontiguousarray(z.swapaxes(0, 1))

    def forward(self, x: np.ndarray, training: bool = True):
        """Returns ``(reconstruction, latent, cache)``.

        ``x`` and the reconstruction are ``(B, 1, x, y, z)``; the latent is
        the flattened bottleneck, ``(B, D)``.
        """
        x = self._check_input(x)
        B = len(x)
        enc_caches, dec_caches = [], []
        z = self._encode(x.reshape((1, B) + x.shape[2:]), training, enc_caches)
        recon = self._decode(z, training, dec_caches)
        cache = {"enc": enc_caches, "dec": dec_caches}
        return recon.reshape(x.shape), self._flatten_latent(z), cache

    def backward(self, cache, d_recon: Optional[np.ndarray], d_latent: Optional[np.ndarray] = None,
                 input_grad: bool = False):
        """Gradients of a scalar loss given its gradient w.r.t. the
        reconstruction and (optionally) the flattened latent.

        Returns a dict keyed like :meth:`params`, plus ``"input"`` when
        ``input_grad`` is set.
        """
        if cache is None:
            raise ValueError("backward needs the cache from forward()")
        grads: Dict[str, np.ndarray] = {}
        g = None
        if d_recon is not None:
            B = len(d_recon)
            g = d_recon.astype(self.config.np_dtype, copy=False).reshape((1, B) + d_recon.shape[2:])
            for i in reversed(range(len(self.dec_conv))):
                c_up, c_conv, c_bn, c_relu = cache["dec"][i]
                g = relu_backward(g, c_relu)
                if c_bn is not None:
                    g, grads[f"dec{i}.bn.gamma"], grads[f"dec{i}.bn.beta"] = batchnorm3d_backward_cm(g, c_bn)
                g, grads[f"dec{i}.conv.weight"], grads[f"dec{i}.conv.bias"] = conv3d_backward_cm(g, c_conv)
                g = upsample_nearest_backward(g, c_up)
        if d_latent is not None:
            dz = self._unflatten_latent(np.asarray(d_latent, dtype=self.config.np_dtype))
            g = dz if g is None else g + dz
        if g is None:
            C, B = cache["enc"][-1][3].shape[:2]
            g = np.zeros((C, B) + self.config.bottleneck_shape[1:], self.config.np_dtype)
        for i in reversed(range(len(self.enc_conv))):
            c_conv, c_bn, c_pool, c_relu = cache["enc"][i]
            g = relu_backward(g, c_relu)
            g = maxpool3d_backward(g, c_pool)
            g, grads[f"enc{i}.bn.gamma"], grads[f"enc{i}.bn.beta"] = batchnorm3d_backward_cm(g, c_bn)
            need_dx = i > 0 or input_grad
            g, grads[f"enc{i}.conv.weight"], grads[f"enc{i}.conv.bias"] = conv3d_backward_cm(g, c_conv, need_dx)
        for name, p in self.params().items():
            grads.setdefault(name, np.zeros_like(p))
        out = {name: grads[name] for name in self.params()}
        if input_grad:
            out["input"] = np.ascontiguousarray(g.swapaxes(0, 1))
        return out

    # -- inference helpers -------------------------------------------------

    def encode(self, x: np.ndarray, batch_size: int = 32) -> np.ndarray:
        """Flattened bottleneck activations, inference-mode batchnorm."""
        x = self._check_input(x)
        out = []
        for i in range(0, len(x), batch_size):
            chunk = x[i:i + batch_size]
            z = self._encode(chunk.reshape((1, len(chunk)) + chunk.shape[2:]), False, [])
            out.append(self._flatten_latent(z))
        return np.concatenate(out)

    def decode(self, latent: np.ndarray) -> np.ndarray:
        latent = np.asarray(latent, dtype=self.config.np_dtype)
        D = self.config.latent_dim
        if latent.ndim == 1:
            latent = latent[None]
        if latent.shape[-1] != D:
            raise DataError(f"latent size {latent.shape[-1]} != bottleneck size {D}")
        recon = self._decode(self._unflatten_latent(latent), False, [])
        return recon.reshape((len(latent), 1) + self.config.input_dims)

    def reconstruct(self, x: np.ndarray, batch_size: int = 32) -> np.ndarray:
        return self.decode(self.encode(x, batch_size))


def build_model(config: BsenConfig) -> BsenNet:
    config.validate()
    return BsenNet(config)


# --------------------------------------------------------------------------
# losses


def reconstruction_loss(recons: np.ndarray, originals: np.ndarray) -> float:
    """Mean over samples of the per-sample summed squared error."""
    recons, originals = _paired(recons, originals)
    r = (recons - originals).reshape(len(recons), -1).astype(np.float64)
    return float((r * r).sum() / len(recons))


def reconstruction_loss_grad(recons: np.ndarray, originals: np.ndarray) -> np.ndarray:
    recons, originals = _paired(recons, originals)
    return (2.0 / len(recons)) * (recons - originals)


def _paired(a, b):
    a, b = np.asarray(a), np.asarray(b)
    if len(a) == 0:
        raise DataError("empty batch")
    if a.shape != b.shape:
        raise DataError(f"reconstruction/original shape mismatch {a.shape} vs {b.shape}")
    return a, b


@dataclass
class CenterBank:
    centers: np.ndarray  # (m, D)
    counts: np.ndarray = field(default=None)

    def __post_init__(self):
        self.centers = np.asarray(self.centers)
        if self.centers.ndim != 2:
            raise ValueError("centers must be (m, D)")
        if not np.all(np.isfinite(self.centers)):
            raise ValueError("centers must be finite")
        if self.counts is None:
            self.counts = np.zeros(len(self.centers), dtype=np.int64)

    @property
    def m(self) -> int:
        return len(self.centers)

    def copy(self) -> "CenterBank":
        return CenterBank(self.centers.copy(), self.counts.copy())

    @classmethod
    def from_latents(cls, latents: np.ndarray, assignments: np.ndarray, m: int = 2) -> "CenterBank":
        """Centers initialized as the per-cluster mean latent."""
        assignments = np.asarray(assignments)
        centers = np.zeros((m, latents.shape[1]), dtype=latents.dtype)
        counts = np.zeros(m, dtype=np.int64)
        for j in range(m):
            sel = assignments == j
            if not sel.any():
                raise DataError(f"behavior cluster {j} has no training samples")
            centers[j] = latents[sel].astype(np.float64).mean(axis=0)
            counts[j] = int(sel.sum())
        return cls(centers, counts)


def _contrastive_terms(latents, assignments, centers: CenterBank, delta):
    if centers is None or centers.centers.size == 0:
        raise ValueError("center bank is not initialized")
    x = np.asarray(latents, dtype=np.float64)
    e = np.asarray(assignments)
    if len(e) != len(x):
        raise ValueError("every latent needs a cluster assignment")
    c = centers.centers.astype(np.float64)
    diff = x[:, None, :] - c[None, :, :]  # (N, m, D)
    d2 = (diff * diff).sum(axis=-1)  # (N, m)
    own = d2[np.arange(len(x)), e]
    others = d2.sum(axis=1) - own
    return x, e, c, diff, own, others + delta


def contrastive_loss(latents: np.ndarray, assignments: np.ndarray, centers: CenterBank,
                     delta: float = 1.0) -> float:
    """Half the sum over samples of the squared distance to the sample's own
    center divided by (summed squared distance to the other centers + delta)."""
    *_, own, denom = _contrastive_terms(latents, assignments, centers, delta)
    return float(0.5 * (own / denom).sum())


def contrastive_loss_grad(latents: np.ndarray, assignments: np.ndarray, centers: CenterBank,
                          delta: float = 1.0) -> np.ndarray:
    """Gradient w.r.t. the latents only; centers are treated as constants."""
    x, e, c, diff, own, denom = _contrastive_terms(latents, assignments, centers, delta)
    n = np.arange(len(x))
    own_diff = diff[n, e]  # x - c_e
    other_diff = diff.sum(axis=1) - own_diff  # sum_{j != e} (x - c_j)
    g = own_diff / denom[:, None] - (own / denom ** 2)[:, None] * other_diff
    return g.astype(np.asarray(latents).dtype)


def update_centers(latents: np.ndarray, assignments: np.ndarray, centers: CenterBank,
                   momentum: float = 0.5) -> CenterBank:
    """EMA of each center toward the batch mean of its members; clusters
    absent from the batch keep their center."""
    out = centers.copy()
    x = np.asarray(latents, dtype=np.float64)
    e = np.asarray(assignments)
    for j in range(out.m):
        sel = e == j
        if not sel.any():
            continue
        mean = x[sel].mean(axis=0)
        out.centers[j] = ((1 - momentum) * out.centers[j].astype(np.float64) + momentum * mean).astype(out.centers.dtype)
        out.counts[j] += int(sel.sum())
    return out


def total_loss(l_rec: float, l_c: float, alpha: float) -> float:
    if alpha < 0:
        raise ConfigError("alpha must be >= 0")
    return l_rec + alpha * l_c


# --------------------------------------------------------------------------
# training


@dataclass
class TrainResult:
    model: BsenNet
    centers: Optional[CenterBank] = None
    behavior_test: Optional[BehaviorTest] = None
    epochs_done: int = 0
    history: List[Dict[str, float]] = field(default_factory=list)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        idx = order[i:i + batch_size]
        # a lone trailing sample cannot be batch-normalized; it is skipped this epoch
        if len(idx) >= 2:
            yield idx


def _check_frames(frames: np.ndarray, config: BsenConfig) -> np.ndarray:
    frames = np.asarray(frames)
    if len(frames) < 2:
        raise DataError("training set needs at least 2 samples")
    if tuple(frames.shape[-3:]) != config.input_dims:
        raise DataError(f"training frames {frames.shape[-3:]} do not match config dims {config.input_dims}")
    return frames.reshape((len(frames), 1) + config.input_dims)


def _log_trend(history, key, stage):
    if len(history) >= 2 and history[-1][key] > history[0][key]:
        log.warning("%s: final-epoch %s %.4g above first-epoch %.4g", stage, key, history[-1][key], history[0][key])
    elif history:
        log.info("%s: %s %.4g -> %.4g over %d epochs", stage, key, history[0][key], history[-1][key], len(history))


def train_reconstruction(model: BsenNet, frames: np.ndarray, lr: float, epochs: int,
                         batch_size: int, rng: np.random.Generator, stage: str = "reconstruction") -> TrainResult:
    """Adam on the reconstruction loss alone (the CAE objective)."""
    x_all = _check_frames(frames, model.config)
    params = model.params()
    opt = AdamState(lr=lr)
    history = []
    for epoch in range(epochs):
        losses = []
        for idx in _batches(len(x_all), batch_size, rng):
            x = x_all[idx].astype(model.config.np_dtype, copy=False)
            recon, _, cache = model.forward(x, training=True)
            losses.append(reconstruction_loss(recon, x))
            grads = model.backward(cache, reconstruction_loss_grad(recon, x))
            adam_step(params, grads, opt)
        history.append({"epoch": epoch + 1, "l_rec": float(np.mean(losses))})
    _log_trend(history, "l_rec", stage)
    return TrainResult(model, epochs_done=epochs, history=history)


def train_stage1_autoencoder(frames: np.ndarray, config: BsenConfig,
                             model: Optional[BsenNet] = None) -> TrainResult:
    """Stage 1: reconstruction-only training from a fresh seeded model."""
    model = build_model(config) if model is None else model
    rng = stream(config.seed, "shuffle/stage1")
    return train_reconstruction(model, frames, config.lr_stage1, config.epochs, config.batch_size, rng, "stage1")


def train_stage2_contrastive(stage1_model: BsenNet, frames: np.ndarray, clusters: np.ndarray,
                             test: BehaviorTest, config: Optional[BsenConfig] = None,
                             centers: Optional[CenterBank] = None) -> TrainResult:
    """Stage 2: fine-tune the whole network on L_rec + alpha * L_C.

    ``clusters`` gives the binarized behavior cluster of every frame. The
    stage-1 model is not modified; a copy is trained. Centers start at the
    per-cluster mean latent of the stage-1 model over the training frames and
    follow an EMA of each batch's cluster means; no gradient flows into them.
    """
    config = stage1_model.config if config is None else config
    x_all = _check_frames(frames, config)
    clusters = np.asarray(clusters)
    if len(clusters) != len(x_all):
        raise DataError("need one behavior cluster per training frame")
    for j in (HEALTHY, IMPAIRED):
        if not np.any(clusters == j):
            raise DataError(f"behavior cluster {'healthy' if j == HEALTHY else 'impaired'} has no training subjects")
    model = stage1_model.copy()
    if centers is None:
        centers = CenterBank.from_latents(model.encode(x_all, config.batch_size), clusters)
    else:
        centers = centers.copy()
    params = model.params()
    opt = AdamState(lr=config.lr_stage2)
    rng = stream(config.seed, "shuffle/stage2")
    history = []
    for epoch in range(config.epochs):
        l_recs, l_cs = [], []
        for idx in _batches(len(x_all), config.batch_size, rng):
            x = x_all[idx].astype(config.np_dtype, copy=False)
            e = clusters[idx]
            recon, latent, cache = model.forward(x, training=True)
            l_recs.append(reconstruction_loss(recon, x))
            l_cs.append(contrastive_loss(latent, e, centers, config.delta))
            d_latent = config.alpha * contrastive_loss_grad(latent, e, centers, config.delta)
            grads = model.backward(cache, reconstruction_loss_grad(recon, x), d_latent)
            adam_step(params, grads, opt)
            centers = update_centers(latent, e, centers, config.center_momentum)
        history.append({"epoch": epoch + 1, "l_rec": float(np.mean(l_recs)),
                        "l_c": float(np.mean(l_cs)),
                        "l_total": float(np.mean(l_recs) + config.alpha * np.mean(l_cs))})
    _log_trend(history, "l_total", f"stage2[{BehaviorTest(test).value}]")
    return TrainResult(model, centers, BehaviorTest(test), config.epochs, history)
