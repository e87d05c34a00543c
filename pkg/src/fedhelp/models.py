"""Model roles used by the federation.

* ``Classifier``      trunk + one head (proxy models, large models, oracles)
* ``SurrogateModel``  trunk + private head + public head (small clients)
* ``LargeClientPair`` a large classifier plus a proxy with the shared small layout

Only trunk and private head of a surrogate are ever flattened for upload; the
public head stays on the client.  Surrogate private heads and proxy heads share
parameter names, so both flatten to the same layout table.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .rng import Rng

MAX_PIXEL_SIDE = 64
CHECKPOINT_MAGIC = b"FHCK"
CHECKPOINT_VERSION = 1


class SpecError(ValueError):
    pass


@dataclass(frozen=True)
class ModelSpec:
    """Architecture descriptor.

    For ``kind="mlp"`` ``input_dim`` is the feature width and ``hidden`` the
    dense layer widths.  For ``kind="conv"`` ``input_dim`` is the number of
    image channels, ``hidden`` the channel counts of the ``kernel``x``kernel``
    conv layers, and heads are 1x1 (per-pixel) projections.
    """

    input_dim: int
    hidden: tuple = (64, 64)
    num_classes: int = 2
    public_classes: int | None = None
    kind: str = "mlp"
    kernel: int = 3

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.kind not in ("mlp", "conv"):
            raise SpecError(f"unknown model kind {self.kind!r}")
        if self.input_dim <= 0 or any(h <= 0 for h in self.hidden):
            raise SpecError(f"zero-width layer in spec: input={self.input_dim}, hidden={self.hidden}")
        if self.num_classes < 2:
            raise SpecError(f"head needs at least 2 classes, got {self.num_classes}")
        if self.public_classes is not None and self.public_classes < 2:
            raise SpecError(f"public head needs at least 2 classes, got {self.public_classes}")
        if self.kind == "conv" and self.kernel % 2 == 0:
            raise SpecError("conv kernel size must be odd")

    @classmethod
    def from_widths(cls, widths, **kw):
        """``[in, h1, ..., out]`` -> spec."""
        widths = list(widths)
        if len(widths) < 2:
            raise SpecError("need at least input and output widths")
        return cls(input_dim=widths[0], hidden=tuple(widths[1:-1]), num_classes=widths[-1], **kw)

    def without_public(self):
        return ModelSpec(self.input_dim, self.hidden, self.num_classes, None, self.kind, self.kernel)

    def param_count(self, include_public=False):
        fan = self.kernel * self.kernel if self.kind == "conv" else 1
        total, prev = 0, self.input_dim
        for h in self.hidden:
            total += fan * prev * h + h
            prev = h
        total += prev * self.num_classes + self.num_classes
        if include_public and self.public_classes:
            total += prev * self.public_classes + self.public_classes
        return total


def _init_weight(rng, shape, fan_in, gain):
    bound = np.sqrt(gain / fan_in)
    return Tensor(rng.uniform(-bound, bound, shape), requires_grad=True)


def _init_bias(rng, n, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, (n,)), requires_grad=True)


class FeatureExtractor:
    """Stack of ReLU layers (dense or 'same' conv)."""

    def __init__(self, spec: ModelSpec, rng: Rng):
        self.kind = spec.kind
        self.input_dim = spec.input_dim
        self.layers = []
        prev = spec.input_dim
        for h in spec.hidden:
            if spec.kind == "conv":
                fan_in = spec.kernel * spec.kernel * prev
                w = _init_weight(rng, (spec.kernel, spec.kernel, prev, h), fan_in, 6.0)
            else:
                fan_in = prev
                w = _init_weight(rng, (prev, h), fan_in, 6.0)
            self.layers.append((w, _init_bias(rng, h, fan_in), "relu"))
            prev = h
        self.output_dim = prev

    def __call__(self, x):
        for w, b, _ in self.layers:
            if self.kind == "conv":
                x = ad.relu(ad.conv2d(x, w, b))
            else:
                x = ad.relu(ad.add(ad.matmul(x, w), b))
        return x

    def named_parameters(self, prefix="trunk"):
        out = []
        for i, (w, b, _) in enumerate(self.layers):
            out.append((f"{prefix}.{i}.weight", w))
            out.append((f"{prefix}.{i}.bias", b))
        return out


class Head:
    def __init__(self, in_dim: int, num_classes: int, rng: Rng):
        if num_classes < 2:
            raise SpecError(f"head needs at least 2 classes, got {num_classes}")
        self.weight = _init_weight(rng, (in_dim, num_classes), in_dim, 3.0)
        self.bias = _init_bias(rng, num_classes, in_dim)

    @property
    def num_classes(self):
        return self.weight.shape[1]

    def __call__(self, feats):
        if feats.ndim == 2:
            return ad.add(ad.matmul(feats, self.weight), self.bias)
        lead = feats.shape[:-1]
        flat = ad.reshape(feats, (-1, feats.shape[-1]))
        out = ad.add(ad.matmul(flat, self.weight), self.bias)
        return ad.reshape(out, lead + (self.num_classes,))

    def named_parameters(self, prefix="head"):
        return [(f"{prefix}.weight", self.weight), (f"{prefix}.bias", self.bias)]


def _check_input(trunk, x):
    if trunk.kind == "conv":
        if x.ndim != 4 or x.shape[3] != trunk.input_dim:
            raise ShapeError(f"expected (B,H,W,{trunk.input_dim}) image batch, got {x.shape}")
        if x.shape[1] > MAX_PIXEL_SIDE or x.shape[2] > MAX_PIXEL_SIDE:
            raise ShapeError(f"image side exceeds {MAX_PIXEL_SIDE}: {x.shape}")
    elif x.ndim != 2 or x.shape[1] != trunk.input_dim:
        raise ShapeError(f"expected (B,{trunk.input_dim}) batch, got {x.shape}")


class Classifier:
    def __init__(self, spec: ModelSpec, rng: Rng):
        self.spec = spec.without_public()
        self.trunk = FeatureExtractor(spec, rng)
        self.head = Head(self.trunk.output_dim, spec.num_classes, rng)

    def __call__(self, x):
        x = ad.as_tensor(x)
        _check_input(self.trunk, x)
        return self.head(self.trunk(x))

    def named_parameters(self):
        return self.trunk.named_parameters() + self.head.named_parameters()

    def upload_parameters(self):
        return self.named_parameters()

    def parameters(self):
        return [t for _, t in self.named_parameters()]


class SurrogateModel(Classifier):
    """Small-client model: one trunk feeding a private head and a public head."""

    def __init__(self, spec: ModelSpec, rng: Rng):
        if spec.public_classes is None:
            raise SpecError("surrogate spec needs public_classes")
        super().__init__(spec, rng)
        self.spec = spec
        self.public_head = Head(self.trunk.output_dim, spec.public_classes, rng)

    def forward_public(self, x):
        x = ad.as_tensor(x)
        _check_input(self.trunk, x)
        return self.public_head(self.trunk(x))

    def forward_both(self, x_private, x_public):
        """Private and public logits from one trunk evaluation per batch."""
        return self(x_private), self.forward_public(x_public)

    def named_parameters(self):
        return super().named_parameters() + self.public_head.named_parameters("public_head")

    def upload_parameters(self):
        return Classifier.named_parameters(self)


@dataclass
class LargeClientPair:
    large: Classifier
    proxy: Classifier

    def parameters(self):
        return self.large.parameters() + self.proxy.parameters()

    def upload_parameters(self):
        return self.proxy.named_parameters()


def build(spec: ModelSpec, rng_seed) -> Classifier:
    """Fresh model with seeded fan-in uniform init; a surrogate when the spec has a public head."""
    rng = rng_seed if isinstance(rng_seed, Rng) else Rng("model-init", rng_seed)
    if spec.public_classes is not None:
        return SurrogateModel(spec, rng)
    return Classifier(spec, rng)


def build_pair(large_spec: ModelSpec, proxy_spec: ModelSpec, large_seed, proxy_seed) -> LargeClientPair:
    return LargeClientPair(build(large_spec.without_public(), large_seed),
                           build(proxy_spec.without_public(), proxy_seed))


# -- flattening -------------------------------------------------------------

@dataclass
class ParamVector:
    """Flat float64 parameters plus the (name, shape) layout they unpack to."""

    values: np.ndarray
    layout: tuple = field(default=())

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        self.layout = tuple((str(n), tuple(int(s) for s in shape)) for n, shape in self.layout)
        expected = sum(int(np.prod(s)) for _, s in self.layout)
        if expected != self.values.size:
            raise ShapeError(f"layout describes {expected} values but vector has {self.values.size}")

    @property
    def nbytes(self):
        return self.values.size * 8

    def __len__(self):
        return self.values.size

    def checksum(self):
        import hashlib
        return hashlib.sha256(self.values.astype("<f8").tobytes()).hexdigest()[:16]


def flatten_params(model) -> ParamVector:
    """The upload unit of ``model``: trunk + private head (or the proxy for a large pair)."""
    named = model.upload_parameters()
    layout = tuple((n, t.shape) for n, t in named)
    values = np.concatenate([t.data.ravel() for _, t in named]) if named else np.zeros(0)
    return ParamVector(values, layout)


def unflatten_params(model, pv: ParamVector):
    """Overwrite the upload parameters of ``model`` in place from ``pv``."""
    named = model.upload_parameters()
    layout = tuple((n, t.shape) for n, t in named)
    if layout != pv.layout:
        raise ShapeError("parameter layout mismatch between model and vector")
    offset = 0
    for _, t in named:
        n = t.data.size
        t.data = pv.values[offset:offset + n].reshape(t.shape).copy()
        offset += n
    return model


def forward_logits(model, batch):
    return model(batch)


def forward_pixel_logits(model, image):
    image = ad.as_tensor(image)
    if model.trunk.kind != "conv":
        raise ShapeError("forward_pixel_logits needs a conv model")
    return model(image)


# -- checkpoints ------------------------------------------------------------

def save_checkpoint(path, pv: ParamVector):
    layout = json.dumps([[n, list(s)] for n, s in pv.layout]).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<II", CHECKPOINT_VERSION, len(layout)))
        fh.write(layout)
        fh.write(pv.values.astype("<f8").tobytes())


def load_checkpoint(path) -> ParamVector:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint (bad magic {blob[:4]!r})")
    if len(blob) < 12:
        raise ValueError(f"{path}: truncated checkpoint header")
    version, n = struct.unpack_from("<II", blob, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    layout = [(name, tuple(shape)) for name, shape in json.loads(blob[12:12 + n].decode("utf-8"))]
    payload = blob[12 + n:]
    expected = sum(int(np.prod(s)) for _, s in layout)
    if len(payload) != 8 * expected:
        raise ValueError(f"{path}: truncated checkpoint payload")
    return ParamVector(np.frombuffer(payload, dtype="<f8").astype(np.float64), layout)
