"""
Transformer classifier definition, model and embedding files, synthetic generation and
the verification graph of a model.

Model files are a json manifest plus an optional little-endian f32 blob::

    {"format": "boundcraft-model/v1",
     "config": {"num_layers": 1, "num_heads": 4, ...},
     "blob": "model.bin",
     "tensors": [{"name": "layers.0.attention.q.weight", "shape": [128, 128],
                  "offset": 0, "count": 16384}, ...]}

Small models may inline a tensor as ``"data": [...]`` instead of ``offset``/``count``.
"""

import json
import os
import typing as tp
from collections import OrderedDict

import numpy as np

from boundcraft.core import as_tensor
from boundcraft.graph import VerGraph
from boundcraft.primitives import EMBEDDING_FORMAT, MODEL_FORMAT, Activation, OpKind
from boundcraft.relax import silu
from boundcraft.utils import ModelLoadError, ShapeMismatchError, log

BLOB_DTYPE = np.dtype("<f4")
ATTENTION = ("q", "k", "v", "o")


class TransformerSpec:
    """
    ``TransformerSpec`` is an encoder-only transformer classifier without layer normalization.

    Every layer is self-attention with a residual add followed by a two-matrix feed-forward
    block with a residual add. Positions are mean-pooled before the classifier head.

    Attributes:
        num_layers: Encoder layers, 1 to 6.
        num_heads: Attention heads.
        embed_dim: Embedding size E.
        ffn_dim: Hidden size F of the feed-forward block, E by default.
        length: Sequence length L.
        batch_size: Samples per input tensor.
        num_classes: Classifier outputs C.
        activation: Feed-forward ``Activation``.
        leaky_slope: Negative slope of ``Activation.LEAKY_RELU``.
        weights: Mapping tensor name -> read-only array, empty for a bare configuration.
    """

    def __init__(
        self,
        num_layers: int = 1,
        num_heads: int = 4,
        embed_dim: int = 128,
        ffn_dim: tp.Optional[int] = None,
        length: int = 16,
        batch_size: int = 1,
        num_classes: int = 2,
        activation=Activation.RELU,
        leaky_slope: float = 0.01,
        weights: tp.Optional[dict] = None,
    ):
        self.num_layers = int(num_layers)
        self.num_heads = int(num_heads)
        self.embed_dim = int(embed_dim)
        self.ffn_dim = int(ffn_dim or embed_dim)
        self.length = int(length)
        self.batch_size = int(batch_size)
        self.num_classes = int(num_classes)
        self.activation = Activation(activation)
        self.leaky_slope = float(leaky_slope)

        assert 1 <= self.num_layers <= 6, f"Incorrect num_layers = {num_layers}"
        assert self.num_heads >= 1 and self.embed_dim % self.num_heads == 0, (
            f"embed_dim = {embed_dim} is not divisible by num_heads = {num_heads}"
        )
        assert min(self.ffn_dim, self.length, self.batch_size) >= 1, "Sizes must be positive"
        assert self.num_classes >= 2, f"Incorrect num_classes = {num_classes}"

        self.weights = OrderedDict()
        if weights:
            self.set_weights(weights)

    @property
    def head_dim(self) -> int:
        return self.embed_dim // self.num_heads

    @property
    def input_shape(self) -> tp.Tuple[int, int, int]:
        return (self.batch_size, self.length, self.embed_dim)

    @property
    def perturbation_dim(self) -> int:
        return self.length * self.embed_dim

    def config(self) -> dict:
        return {
            "num_layers": self.num_layers,
            "num_heads": self.num_heads,
            "embed_dim": self.embed_dim,
            "ffn_dim": self.ffn_dim,
            "length": self.length,
            "batch_size": self.batch_size,
            "num_classes": self.num_classes,
            "activation": self.activation.value,
            "leaky_slope": self.leaky_slope,
        }

    def with_weights(self, weights: dict) -> "TransformerSpec":
        return TransformerSpec(**self.config(), weights=weights)

    def weight_shapes(self) -> "OrderedDict[str, tp.Tuple[int, ...]]":
        """
        Expected tensor names and shapes, in file order.
        """
        E, F, C = self.embed_dim, self.ffn_dim, self.num_classes
        shapes = OrderedDict()
        for i in range(self.num_layers):
            for proj in ATTENTION:
                shapes[f"layers.{i}.attention.{proj}.weight"] = (E, E)
                shapes[f"layers.{i}.attention.{proj}.bias"] = (E,)
            shapes[f"layers.{i}.ffn.1.weight"] = (F, E)
            shapes[f"layers.{i}.ffn.1.bias"] = (F,)
            shapes[f"layers.{i}.ffn.2.weight"] = (E, F)
            shapes[f"layers.{i}.ffn.2.bias"] = (E,)
        shapes["classifier.weight"] = (C, E)
        shapes["classifier.bias"] = (C,)
        return shapes

    def count_parameters(self) -> int:
        """
        ``L*(4E^2 + 4E + 2EF + F + E) + CE + C``.
        """
        E, F, C = self.embed_dim, self.ffn_dim, self.num_classes
        return self.num_layers * (4 * E * E + 4 * E + 2 * E * F + F + E) + C * E + C

    def set_weights(self, weights: dict):
        """
        Check and store a complete set of weights.

        Raises:
            ShapeMismatchError: a tensor is missing or has the wrong shape.
        """
        expected = self.weight_shapes()
        missing = [name for name in expected if name not in weights]
        if missing:
            raise ShapeMismatchError(f"Missing tensors: {missing[:4]}")
        for name, shape in expected.items():
            value = np.asarray(weights[name])
            if value.shape != shape:
                raise ShapeMismatchError(f"Tensor {name} has shape {value.shape}, expected {shape}")
            self.weights[name] = as_tensor(value)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.weights[name]

    def __repr__(self) -> str:
        return f"TransformerSpec({self.config()})"


# ---------------------------------------------------------------- forward pass


def activate(x: np.ndarray, activation: Activation, leaky_slope: float = 0.01) -> np.ndarray:
    if activation is Activation.RELU:
        return np.maximum(x, 0)
    if activation is Activation.LEAKY_RELU:
        return np.where(x >= 0, x, leaky_slope * x)
    if activation is Activation.TANH:
        return np.tanh(x)
    return silu(x)


def forward(model: TransformerSpec, x: np.ndarray) -> np.ndarray:
    """
    Exact numpy forward pass.

    Args:
        model: Model with weights.
        x: Embeddings ``[L, E]`` or ``[B, L, E]``.

    Returns:
        Logits ``[C]`` or ``[B, C]``.
    """
    x = np.asarray(x, dtype=float)
    squeeze = x.ndim == 2
    h = x[None] if squeeze else x
    if h.shape[1:] != (model.length, model.embed_dim):
        raise ShapeMismatchError(f"Input {x.shape} does not match length {model.length}, embed_dim {model.embed_dim}")
    B, L, E = h.shape
    H, dh = model.num_heads, model.head_dim
    w = model.weights

    def linear(t, name):
        return t @ w[f"{name}.weight"].T + w[f"{name}.bias"]

    for i in range(model.num_layers):
        prefix = f"layers.{i}"
        q, k, v = (
            linear(h, f"{prefix}.attention.{p}").reshape(B, L, H, dh).transpose(0, 2, 1, 3) for p in "qkv"
        )
        scores = q @ k.transpose(0, 1, 3, 2) / np.sqrt(dh)
        scores = scores - scores.max(axis=-1, keepdims=True)
        attn = np.exp(scores)
        attn = attn / attn.sum(axis=-1, keepdims=True)
        ctx = (attn @ v).transpose(0, 2, 1, 3).reshape(B, L, E)
        h = h + linear(ctx, f"{prefix}.attention.o")
        hidden = activate(linear(h, f"{prefix}.ffn.1"), model.activation, model.leaky_slope)
        h = h + linear(hidden, f"{prefix}.ffn.2")

    logits = linear(h.mean(axis=1), "classifier")
    return logits[0] if squeeze else logits


# ---------------------------------------------------------------- graph


def build_graph(model: TransformerSpec, split_projections: bool = True) -> VerGraph:
    """
    Verification graph of a model over input ``x`` of shape ``[B, L, E]``.

    Every layer expands to six projections and fifteen other nodes::

        q, k, v -> reshape, transpose (heads) -> dot(q, k) -> scale 1/sqrt(head_dim) -> softmax
        -> dot(attention, v) -> transpose, reshape -> o -> add residual
        -> ffn.1 -> activation -> ffn.2 -> add residual

    followed by ``mean_pool`` over positions and the classifier projection. A projection is
    one ``affine`` node, or four nodes (split, lower, upper, merge) with ``split_projections``,
    giving ``2 + P + num_layers * (6P + 15)`` nodes with ``P = 4`` or ``P = 1``.

    Args:
        model: Model with weights.
        split_projections: Emit projections in the unfused split form.

    Returns:
        ``VerGraph`` with output logits ``[B, C]``.
    """
    g = VerGraph()
    for name, value in model.weights.items():
        g.add_param(name, value)
    H, dh, E = model.num_heads, model.head_dim, model.embed_dim

    def project(node: str, x: str, param: str) -> str:
        return g.add_affine(node, x, f"{param}.weight", f"{param}.bias", split=split_projections)

    h = g.add_input("x", model.input_shape)
    for i in range(model.num_layers):
        prefix = f"layers.{i}"
        heads = {}
        for p in "qkv":
            proj = project(f"{prefix}.attention.{p}", h, f"{prefix}.attention.{p}")
            split = g.add_node(f"{prefix}.attention.{p}.heads", OpKind.RESHAPE, [proj], {"tail_ndim": 1, "shape": [H, dh]})
            # q, k -> [B, H, L, dh]; v -> [B, H, dh, L]
            perm = [1, 2, 0] if p == "v" else [1, 0, 2]
            heads[p] = g.add_node(f"{prefix}.attention.{p}.t", OpKind.TRANSPOSE, [split], {"perm": perm})
        scores = g.add_node(f"{prefix}.attention.scores", OpKind.DOT_PRODUCT, [heads["q"], heads["k"]])
        scaled = g.add_node(f"{prefix}.attention.scaled", OpKind.SCALE, [scores], {"factor": 1.0 / float(np.sqrt(dh))})
        probs = g.add_node(f"{prefix}.attention.softmax", OpKind.SOFTMAX, [scaled], {"axis": -1})
        ctx = g.add_node(f"{prefix}.attention.context", OpKind.DOT_PRODUCT, [probs, heads["v"]])
        ctx_t = g.add_node(f"{prefix}.attention.context.t", OpKind.TRANSPOSE, [ctx], {"perm": [1, 0, 2]})
        merged = g.add_node(f"{prefix}.attention.merge", OpKind.RESHAPE, [ctx_t], {"tail_ndim": 2, "shape": [E]})
        out = project(f"{prefix}.attention.o", merged, f"{prefix}.attention.o")
        h = g.add_node(f"{prefix}.residual.1", OpKind.ADD, [h, out])

        hidden = project(f"{prefix}.ffn.1", h, f"{prefix}.ffn.1")
        attrs = {"slope": model.leaky_slope} if model.activation is Activation.LEAKY_RELU else {}
        act = g.add_node(f"{prefix}.ffn.act", model.activation.op_kind, [hidden], attrs)
        ffn = project(f"{prefix}.ffn.2", act, f"{prefix}.ffn.2")
        h = g.add_node(f"{prefix}.residual.2", OpKind.ADD, [h, ffn])

    pooled = g.add_node("pool", OpKind.MEAN_POOL, [h], {"axis": -2})
    project("classifier", pooled, "classifier")
    log.debug("Built graph", layers=model.num_layers, nodes=len(g.nodes), split=split_projections)
    return g


def expected_node_count(num_layers: int, split_projections: bool = True) -> int:
    P = 4 if split_projections else 1
    return 2 + P + num_layers * (6 * P + 15)


# ---------------------------------------------------------------- synthetic models


def gen_synthetic(
    seed: int, config: tp.Optional[TransformerSpec] = None
) -> tp.Tuple[TransformerSpec, np.ndarray, np.ndarray]:
    """
    Seeded random model and input embeddings.

    Weights are uniform in ``+-0.5 / sqrt(fan_in)``, biases in the same range, inputs uniform
    in ``[-1, 1]``; all values are rounded to f32 so a saved model loads back unchanged.
    Labels are the model predictions.

    Args:
        seed: Generator seed.
        config: Model configuration, defaults when omitted.

    Returns:
        (model, embeddings ``[B, L, E]``, labels ``[B]``).
    """
    config = config or TransformerSpec()
    rng = np.random.default_rng(seed)
    weights = OrderedDict()
    for name, shape in config.weight_shapes().items():
        fan_in = shape[1] if len(shape) == 2 else config.weight_shapes()[name.replace(".bias", ".weight")][1]
        bound = 0.5 / np.sqrt(fan_in)
        weights[name] = rng.uniform(-bound, bound, size=shape).astype(np.float32).astype(np.float64)
    model = config.with_weights(weights)
    x = rng.uniform(-1.0, 1.0, size=config.input_shape).astype(np.float32).astype(np.float64)
    labels = np.argmax(forward(model, x), axis=-1)
    return model, x, labels


def zero_block_model(config: TransformerSpec, classifier_weight: np.ndarray, classifier_bias=None) -> TransformerSpec:
    """
    Model with zero attention and feed-forward weights, so the logits are the exact linear
    function ``classifier(mean_L(x))``.
    """
    weights = {name: np.zeros(shape) for name, shape in config.weight_shapes().items()}
    weights["classifier.weight"] = np.asarray(classifier_weight, dtype=float)
    if classifier_bias is not None:
        weights["classifier.bias"] = np.asarray(classifier_bias, dtype=float)
    return config.with_weights(weights)


# ---------------------------------------------------------------- files


def _blob_path(manifest_path: str, blob: str) -> str:
    return blob if os.path.isabs(blob) else os.path.join(os.path.dirname(os.path.abspath(manifest_path)), blob)


def _read_json(path: str, kind: str) -> dict:
    try:
        with open(path, "r") as stream:
            return json.load(stream)
    except FileNotFoundError:
        raise ModelLoadError(f"{kind} file not found: {path}")
    except (OSError, json.JSONDecodeError) as exc:
        raise ModelLoadError(f"Cannot parse {kind} file {path}: {exc}")


def _read_tensor(entry: dict, blob: tp.Optional[bytes], blob_path: tp.Optional[str], path: str) -> np.ndarray:
    name, shape = entry["name"], tuple(entry["shape"])
    if "data" in entry:
        value = np.asarray(entry["data"], dtype=np.float64)
    else:
        if blob is None:
            raise ModelLoadError(f"Tensor {name} references a blob but {path} names none")
        offset, count = int(entry["offset"]), int(entry["count"])
        end = offset + count * BLOB_DTYPE.itemsize
        if end > len(blob):
            raise ModelLoadError(f"Blob {blob_path} is truncated: tensor {name} needs bytes {offset}..{end}, size {len(blob)}")
        value = np.frombuffer(blob, dtype=BLOB_DTYPE, count=count, offset=offset).astype(np.float64)
    if value.size != int(np.prod(shape)):
        raise ModelLoadError(f"Tensor {name} in {path} has {value.size} values for shape {shape}")
    value = value.reshape(shape)
    if not np.all(np.isfinite(value)):
        raise ModelLoadError(f"Tensor {name} in {path} contains non-finite values")
    return value


def _read_tensors(record: dict, blob: tp.Optional[bytes], blob_path: tp.Optional[str], path: str) -> tp.Dict[str, np.ndarray]:
    try:
        return {entry["name"]: _read_tensor(entry, blob, blob_path, path) for entry in record["tensors"]}
    except (KeyError, IndexError, TypeError, ValueError) as exc:
        raise ModelLoadError(f"Malformed tensor entry in {path}: {exc!r}")


def _load_blob(path: str, record: dict) -> tp.Tuple[tp.Optional[bytes], tp.Optional[str]]:
    if not record.get("blob"):
        return None, None
    blob_path = _blob_path(path, record["blob"])
    try:
        with open(blob_path, "rb") as stream:
            return stream.read(), blob_path
    except OSError:
        raise ModelLoadError(f"Blob {blob_path} referenced by {path} is missing")


def save_model(model: TransformerSpec, path: str, inline: bool = False) -> None:
    """
    Write a manifest and, unless ``inline``, a ``.bin`` blob next to it.

    Args:
        model: Model with weights.
        path: Manifest path.
        inline: Store the arrays in the manifest.
    """
    tensors, chunks, offset = [], [], 0
    for name, value in model.weights.items():
        entry = {"name": name, "shape": list(value.shape)}
        if inline:
            entry["data"] = value.ravel().tolist()
        else:
            data = value.astype(BLOB_DTYPE).tobytes()
            entry.update(offset=offset, count=int(value.size))
            chunks.append(data)
            offset += len(data)
        tensors.append(entry)

    blob = None
    if not inline:
        blob = os.path.splitext(os.path.basename(path))[0] + ".bin"
        with open(_blob_path(path, blob), "wb") as stream:
            stream.write(b"".join(chunks))
    record = {"format": MODEL_FORMAT, "config": model.config(), "blob": blob, "tensors": tensors}
    with open(path, "w") as stream:
        json.dump(record, stream, indent=1)
    log.info("Saved model", path=path, parameters=model.count_parameters(), inline=inline)


def load_model(path: str) -> TransformerSpec:
    """
    Read a model manifest and its blob.

    Args:
        path: Manifest path.

    Returns:
        ``TransformerSpec`` with weights.

    Raises:
        ModelLoadError: missing file or blob, malformed tensor entry, truncated blob, wrong shape or non-finite weight.
    """
    record = _read_json(path, "Model")
    if record.get("format") != MODEL_FORMAT:
        raise ModelLoadError(f"Unsupported model format = {record.get('format')} in {path}")
    try:
        config = TransformerSpec(**record["config"])
    except (KeyError, TypeError, ValueError, AssertionError) as exc:
        raise ModelLoadError(f"Incorrect model config in {path}: {exc}")
    blob, blob_path = _load_blob(path, record)
    weights = _read_tensors(record, blob, blob_path, path)
    try:
        model = config.with_weights(weights)
    except ShapeMismatchError as exc:
        raise ModelLoadError(f"Model {path}: {exc}")
    log.info("Loaded model", path=path, layers=model.num_layers, parameters=model.count_parameters())
    return model


def save_embedding(x: np.ndarray, path: str, label=None, inline: bool = False) -> None:
    """
    Write an embedding input file: json header plus f32 blob (or inline data).

    Args:
        x: Embeddings ``[L, E]`` or ``[B, L, E]``.
        path: Header path.
        label: Expected class, int or one per sample.
        inline: Store the values in the header.
    """
    x = np.asarray(x, dtype=np.float64)
    entry = {"name": "x", "shape": list(x.shape)}
    blob = None
    if inline:
        entry["data"] = x.ravel().tolist()
    else:
        blob = os.path.splitext(os.path.basename(path))[0] + ".bin"
        with open(_blob_path(path, blob), "wb") as stream:
            stream.write(x.astype(BLOB_DTYPE).tobytes())
        entry.update(offset=0, count=int(x.size))
    if label is not None:
        label = np.asarray(label).tolist()
    record = {"format": EMBEDDING_FORMAT, "label": label, "blob": blob, "tensors": [entry]}
    with open(path, "w") as stream:
        json.dump(record, stream, indent=1)


def load_embedding(path: str) -> tp.Tuple[np.ndarray, tp.Optional[tp.Union[int, tp.List[int]]]]:
    """
    Read an embedding input file.

    Returns:
        (embeddings, label or None).
    """
    record = _read_json(path, "Embedding")
    if record.get("format") != EMBEDDING_FORMAT:
        raise ModelLoadError(f"Unsupported embedding format = {record.get('format')} in {path}")
    blob, blob_path = _load_blob(path, record)
    tensors = _read_tensors(record, blob, blob_path, path)
    if len(tensors) != 1:
        raise ModelLoadError(f"Embedding file {path} holds {len(tensors)} tensors, expected one")
    return next(iter(tensors.values())), record.get("label")
