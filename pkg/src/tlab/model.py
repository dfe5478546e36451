"""Small CNN classifiers over 3x32x32 inputs, plus checkpoint I/O.

The workhorse architecture ("dtn") is fixed: three conv(5x5, pad 2) +
relu + 2x2-pool stages with 32/64/128 filters, then dense 2048->256,
relu, dense 256->K.  Weights draw uniform +-sqrt(6/fan_in), biases start
at zero.  Models are plain dataclasses; training never mutates one in
place, it builds a replacement with fresh parameter tensors.

Checkpoints are a single binary file: magic ``TLABCKPT``, a u32 format
version, a length-prefixed UTF-8 JSON header describing the parameters,
then the raw little-endian float32 payloads back to back.  Round trips
are bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from .tensor import (
    Tensor,
    add,
    conv2d,
    flatten,
    matmul,
    max_pool2d,
    relu,
    reshape,
    stable_softmax,
)

__all__ = [
    "LayerSpec",
    "Model",
    "CheckpointError",
    "CheckpointFormatError",
    "CheckpointVersionError",
    "CheckpointTruncatedError",
    "UnknownArchitectureError",
    "ARCH_DTN",
    "DTN_PARAM_COUNT_10_CLASSES",
    "dtn_layer_specs",
    "build_dtn",
    "build_model",
    "forward",
    "forward_logits",
    "predict",
    "predict_proba",
    "accuracy",
    "param_count",
    "fingerprint",
    "model_id",
    "reinit_classifier_head",
    "save_checkpoint",
    "load_checkpoint",
]

CHECKPOINT_MAGIC = b"TLABCKPT"
CHECKPOINT_VERSION = 1

ARCH_DTN = "dtn"
DTN_PARAM_COUNT_10_CLASSES = 785_738


class CheckpointError(Exception):
    """Base class for checkpoint load/save failures."""


class CheckpointFormatError(CheckpointError):
    """File is not a checkpoint or its header is malformed."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint was written by an unsupported format version."""


class CheckpointTruncatedError(CheckpointError):
    """Payload ends before the header's manifest says it should."""


class UnknownArchitectureError(CheckpointError):
    """Checkpoint names an architecture this build cannot rebuild."""


@dataclass(frozen=True)
class LayerSpec:
    """One layer of a sequential model.

    ``kind`` is conv | dense | relu | maxpool | flatten.  ``in_size`` /
    ``out_size`` are channels for conv and features for dense; kernel,
    stride and pad only apply to conv.
    """

    kind: str
    in_size: int = 0
    out_size: int = 0
    kernel: int = 0
    stride: int = 1
    pad: int = 0


@dataclass
class Model:
    """A sequential classifier: layer specs plus named parameter tensors."""

    specs: tuple
    params: dict
    num_classes: int
    arch_id: str
    metadata: dict = field(default_factory=dict)


def dtn_layer_specs(num_classes):
    mp = LayerSpec("maxpool")
    rl = LayerSpec("relu")
    return (
        LayerSpec("conv", in_size=3, out_size=32, kernel=5, pad=2),
        rl, mp,
        LayerSpec("conv", in_size=32, out_size=64, kernel=5, pad=2),
        rl, mp,
        LayerSpec("conv", in_size=64, out_size=128, kernel=5, pad=2),
        rl, mp,
        LayerSpec("flatten"),
        LayerSpec("dense", in_size=128 * 4 * 4, out_size=256),
        rl,
        LayerSpec("dense", in_size=256, out_size=num_classes),
    )


def _param_names(specs):
    """Yield (spec_index, weight_name, bias_name) for parameterized layers."""
    conv_i = dense_i = 0
    for i, spec in enumerate(specs):
        if spec.kind == "conv":
            conv_i += 1
            yield i, f"conv{conv_i}.weight", f"conv{conv_i}.bias"
        elif spec.kind == "dense":
            dense_i += 1
            yield i, f"fc{dense_i}.weight", f"fc{dense_i}.bias"


def _init_layer_params(spec, rng):
    """Uniform +-sqrt(6/fan_in) weights, zero biases, drawn as float32."""
    if spec.kind == "conv":
        fan_in = spec.in_size * spec.kernel * spec.kernel
        shape = (spec.out_size, spec.in_size, spec.kernel, spec.kernel)
    else:
        fan_in = spec.in_size
        shape = (spec.in_size, spec.out_size)
    bound = np.sqrt(6.0 / fan_in)
    w = rng.uniform(-bound, bound, size=shape).astype(np.float32)
    b = np.zeros(spec.out_size, dtype=np.float32)
    return Tensor(w), Tensor(b)


def build_model(specs, num_classes, seed, arch_id="custom"):
    """Construct a sequential model with freshly seeded parameters."""
    rng = np.random.default_rng(seed)
    params = {}
    for i, wname, bname in _param_names(specs):
        w, b = _init_layer_params(specs[i], rng)
        params[wname] = w
        params[bname] = b
    return Model(specs=tuple(specs), params=params, num_classes=num_classes,
                 arch_id=arch_id)


def build_dtn(num_classes, seed):
    """Fresh dtn classifier with ``num_classes`` output units."""
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    return build_model(dtn_layer_specs(num_classes), num_classes, seed,
                       arch_id=ARCH_DTN)


def param_count(model):
    return sum(int(t.size) for t in model.params.values())


def forward(model, batch):
    """Logits for a batch. Record on the innermost active GradientTape
    by watching the relevant tensors before calling this."""
    x = batch if isinstance(batch, Tensor) else Tensor(batch)
    names = {i: (w, b) for i, w, b in _param_names(model.specs)}
    for i, spec in enumerate(model.specs):
        if spec.kind == "conv":
            wname, bname = names[i]
            x = conv2d(x, model.params[wname], stride=spec.stride, pad=spec.pad)
            x = add(x, reshape(model.params[bname], (1, spec.out_size, 1, 1)))
        elif spec.kind == "dense":
            wname, bname = names[i]
            x = add(matmul(x, model.params[wname]), model.params[bname])
        elif spec.kind == "relu":
            x = relu(x)
        elif spec.kind == "maxpool":
            x = max_pool2d(x)
        elif spec.kind == "flatten":
            x = flatten(x)
        else:
            raise ValueError(f"unknown layer kind {spec.kind!r}")
    return x


def forward_logits(model, images, batch_size=512):
    """Untracked chunked forward pass; returns an (N, K) ndarray."""
    images = np.asarray(images, dtype=np.float32)
    if len(images) == 0:
        return np.zeros((0, model.num_classes), dtype=np.float32)
    outs = [forward(model, images[i : i + batch_size]).data
            for i in range(0, len(images), batch_size)]
    return np.concatenate(outs, axis=0)


def predict(model, images, batch_size=512):
    """Predicted labels; argmax ties resolve to the lowest class index."""
    return np.argmax(forward_logits(model, images, batch_size), axis=1)


def predict_proba(model, images, batch_size=512):
    return stable_softmax(forward_logits(model, images, batch_size))


def accuracy(model, images, labels, batch_size=512):
    labels = np.asarray(labels)
    if len(labels) == 0:
        raise ValueError("accuracy over an empty set is undefined")
    return float(np.mean(predict(model, images, batch_size) == labels))


def fingerprint(model):
    """SHA-1 over parameter names and exact bytes; stable across processes."""
    h = hashlib.sha1()
    h.update(model.arch_id.encode())
    for name in sorted(model.params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(model.params[name].data).tobytes())
    return h.hexdigest()


def model_id(model):
    return f"{model.arch_id}:{fingerprint(model)[:12]}"


def reinit_classifier_head(model, num_classes, seed):
    """Copy of ``model`` with the final dense layer rebuilt for
    ``num_classes`` outputs and freshly seeded; all other parameters are
    carried over bit-identically."""
    if num_classes < 2:
        raise ValueError(f"num_classes must be >= 2, got {num_classes}")
    head_idx = max(i for i, spec in enumerate(model.specs)
                   if spec.kind == "dense")
    head = model.specs[head_idx]
    new_specs = list(model.specs)
    new_specs[head_idx] = replace(head, out_size=num_classes)
    names = {i: (w, b) for i, w, b in _param_names(model.specs)}
    wname, bname = names[head_idx]
    params = dict(model.params)
    rng = np.random.default_rng(seed)
    params[wname], params[bname] = _init_layer_params(new_specs[head_idx], rng)
    return Model(specs=tuple(new_specs), params=params,
                 num_classes=num_classes, arch_id=model.arch_id,
                 metadata=dict(model.metadata))


# ------------------------------------------------------------- checkpoints


def save_checkpoint(model, path, metadata=None):
    """Write the model to ``path``; see the module docstring for layout."""
    names = list(model.params)
    manifest = []
    offset = 0
    for name in names:
        arr = model.params[name].data
        manifest.append({"name": name, "shape": list(arr.shape),
                         "offset": offset, "nbytes": int(arr.nbytes)})
        offset += arr.nbytes
    header = {
        "arch_id": model.arch_id,
        "num_classes": int(model.num_classes),
        "metadata": dict(model.metadata, **(metadata or {})),
        "params": manifest,
    }
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for name in names:
            arr = np.ascontiguousarray(model.params[name].data, dtype="<f4")
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Rebuild a model from a checkpoint file.

    Raises CheckpointFormatError / CheckpointVersionError /
    CheckpointTruncatedError / UnknownArchitectureError as appropriate;
    never returns a half-loaded model.
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(CHECKPOINT_MAGIC) + 8:
        raise CheckpointFormatError(f"{path}: too short to be a checkpoint")
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError(
            f"{path}: bad magic {raw[:len(CHECKPOINT_MAGIC)]!r}")
    pos = len(CHECKPOINT_MAGIC)
    (version,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if version != CHECKPOINT_VERSION:
        raise CheckpointVersionError(
            f"{path}: format version {version}, this build reads "
            f"{CHECKPOINT_VERSION}")
    (hlen,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if pos + hlen > len(raw):
        raise CheckpointTruncatedError(f"{path}: header extends past EOF")
    try:
        header = json.loads(raw[pos : pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"{path}: unreadable header: {exc}") from None
    pos += hlen
    for key in ("arch_id", "num_classes", "params"):
        if key not in header:
            raise CheckpointFormatError(f"{path}: header missing {key!r}")
    arch_id = header["arch_id"]
    num_classes = int(header["num_classes"])
    if arch_id != ARCH_DTN:
        raise UnknownArchitectureError(
            f"{path}: unknown architecture {arch_id!r}")
    specs = dtn_layer_specs(num_classes)
    expected = set()
    for _, w, b in _param_names(specs):
        expected.add(w)
        expected.add(b)
    manifest_names = [entry["name"] for entry in header["params"]]
    if set(manifest_names) != expected:
        raise CheckpointFormatError(
            f"{path}: parameter names do not match architecture {arch_id!r}")
    payload = raw[pos:]
    params = {}
    for entry in header["params"]:
        shape = tuple(entry["shape"])
        nbytes = int(entry["nbytes"])
        off = int(entry["offset"])
        if off + nbytes > len(payload):
            raise CheckpointTruncatedError(
                f"{path}: payload for {entry['name']!r} extends past EOF")
        arr = np.frombuffer(payload, dtype="<f4", count=nbytes // 4,
                            offset=off).reshape(shape)
        params[entry["name"]] = Tensor(arr)
    return Model(specs=specs, params=params, num_classes=num_classes,
                 arch_id=arch_id, metadata=dict(header.get("metadata", {})))
