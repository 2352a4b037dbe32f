"""Object-centric image encoder and frozen text encoder.

Images pass through a small patch transformer; slot attention localizes
objects into K slot vectors which feed a box-regression head; the final
embedding aggregates the pooled image token with a linear readout of the
slots.  Text is hash-tokenized into a tiny frozen transformer.  Everything
is expressed on the autodiff graph so the objectives module can
differentiate end to end; eager wrappers evaluate the same graphs with
parameters bound as constants.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import numpy as np

from .autodiff import Graph, Node, ParamStore, derive_seed

Array = np.ndarray

# Parameters under this prefix are excluded from training updates.
TEXT_PREFIX = "txt."


@dataclass(frozen=True)
class EncoderConfig:
    """Dimensions and slot-attention hyperparameters."""

    patch_size: int = 8
    dim: int = 32
    slot_dim: int = 32
    num_slots: int = 4
    slot_iters: int = 3
    depth: int = 1
    heads: int = 2
    mlp_ratio: int = 2
    max_tokens: int = 64
    text_vocab: int = 128
    text_len: int = 16
    slot_mean: float = 0.0
    slot_std: float | tuple[float, ...] = 1.0
    seed: int = 0

    def __post_init__(self) -> None:
        if self.num_slots < 1:
            raise ValueError("num_slots must be >= 1")
        if self.slot_iters < 1:
            raise ValueError("slot_iters must be >= 1")
        if self.dim < 2 or self.slot_dim < 2:
            raise ValueError("dim and slot_dim must be >= 2")
        if self.dim % self.heads != 0:
            raise ValueError("heads must divide dim")
        if np.any(np.asarray(self.slot_std) <= 0.0):
            raise ValueError("slot_std must be elementwise positive")

    @classmethod
    def reference(cls) -> "EncoderConfig":
        """Full-scale configuration; desk tests never instantiate its weights."""
        return cls(patch_size=16, dim=768, slot_dim=768, num_slots=10,
                   slot_iters=20, depth=12, heads=12, max_tokens=196,
                   text_vocab=4096, text_len=32)

    def slot_sigma(self) -> Array:
        return np.broadcast_to(np.asarray(self.slot_std, dtype=np.float64),
                               (self.slot_dim,)).copy()


@dataclass
class PatchFeatures:
    """Token matrix from the last transformer layer plus its mean pool."""

    tokens: Array
    pooled: Array


@dataclass
class SlotState:
    """Slots with the attention and column-normalized weights that produced them."""

    slots: Array
    attention: Array
    weights: Array
    iteration: int
    history: tuple["SlotState", ...] | None = None


@dataclass
class BoxSet:
    """K normalized corner boxes (x1, y1, x2, y2), each with x1<=x2, y1<=y2."""

    boxes: Array


@dataclass
class Embedding:
    """Unit-norm vector in the shared image/text space."""

    vector: Array


# ----------------------------------------------------------------------
# Parameter initialization


def _linear_init(rng: np.random.Generator, fan_in: int, fan_out: int) -> Array:
    return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))


def init_params(config: EncoderConfig, seed: int | None = None) -> ParamStore:
    """Seeded parameter store; text-encoder tensors are registered frozen."""
    rng = np.random.default_rng(config.seed if seed is None else seed)
    d, ds, k = config.dim, config.slot_dim, config.num_slots
    patch_in = config.patch_size * config.patch_size * 3
    hidden = config.mlp_ratio * d
    store = ParamStore()

    def linear(name: str, fan_in: int, fan_out: int) -> None:
        store[name + ".w"] = _linear_init(rng, fan_in, fan_out)
        store[name + ".b"] = np.zeros(fan_out)

    def norm(name: str, width: int) -> None:
        store[name + ".g"] = np.ones(width)
        store[name + ".b"] = np.zeros(width)

    def transformer(prefix: str, width: int, depth: int) -> None:
        wide = config.mlp_ratio * width
        for i in range(depth):
            blk = f"{prefix}blk{i}"
            norm(blk + ".ln1", width)
            linear(blk + ".qkv", width, 3 * width)
            linear(blk + ".out", width, width)
            norm(blk + ".ln2", width)
            linear(blk + ".mlp1", width, wide)
            linear(blk + ".mlp2", wide, width)
        norm(prefix + "ln_out", width)

    linear("img.patch", patch_in, d)
    store["img.pos"] = 0.02 * rng.normal(size=(config.max_tokens, d))
    transformer("img.", d, config.depth)

    store["slot.k.w"] = _linear_init(rng, d, ds)
    store["slot.q.w"] = _linear_init(rng, ds, ds)
    store["slot.v.w"] = _linear_init(rng, d, ds)
    for gate in ("z", "r", "n"):
        store[f"slot.gru.w{gate}"] = _linear_init(rng, ds, ds)
        store[f"slot.gru.u{gate}"] = _linear_init(rng, ds, ds)
        store[f"slot.gru.b{gate}"] = np.zeros(ds)
    norm("slot.norm", ds)
    linear("slot.mlp1", ds, ds)
    linear("slot.mlp2", ds, ds)

    linear("box.l0", ds, ds)
    linear("box.l1", ds, ds)
    linear("box.l2", ds, 4)

    linear("agg.slots", k * ds, d)
    linear("agg.mlp1", 2 * d, hidden)
    linear("agg.mlp2", hidden, d)

    linear("mc.proj", ds, d)

    store[TEXT_PREFIX + "embed"] = 0.02 * rng.normal(size=(config.text_vocab, d))
    store[TEXT_PREFIX + "pos"] = 0.02 * rng.normal(size=(config.text_len, d))
    transformer(TEXT_PREFIX, d, 1)
    linear(TEXT_PREFIX + "proj", d, d)

    for name in store.names():
        if name.startswith(TEXT_PREFIX):
            store.freeze(name)
    return store


class Binding:
    """Binds store tensors into a graph, memoized by name.

    Trainable parameters become graph parameters; frozen ones (and every
    tensor when trainable=False) become constants so inference and frozen
    branches never enter the gradient.
    """

    def __init__(self, graph: Graph, store: ParamStore, trainable: bool = True) -> None:
        self.graph = graph
        self.store = store
        self.trainable = trainable
        self._nodes: dict[str, Node] = {}

    def __call__(self, name: str) -> Node:
        node = self._nodes.get(name)
        if node is None:
            value = self.store[name]
            if self.trainable and not self.store.is_frozen(name):
                node = self.graph.parameter(name, value)
            else:
                node = self.graph.constant(value, name=name)
            self._nodes[name] = node
        return node


# ----------------------------------------------------------------------
# Graph builders


def patchify(image: Array, patch_size: int) -> Array:
    """Split an H×W×3 image into flattened row-major patches."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an H×W×3 image, got shape {image.shape}")
    h, w, _ = image.shape
    if h % patch_size or w % patch_size:
        raise ValueError(f"image {h}×{w} not divisible by patch size {patch_size}")
    gh, gw = h // patch_size, w // patch_size
    tiles = image.reshape(gh, patch_size, gw, patch_size, 3)
    return tiles.transpose(0, 2, 1, 3, 4).reshape(gh * gw, patch_size * patch_size * 3)


def _layer_norm(g: Graph, bind: Binding, x: Node, prefix: str) -> Node:
    return g.add(g.multiply(g.layer_norm(x), bind(prefix + ".g")), bind(prefix + ".b"))


def _linear(g: Graph, bind: Binding, x: Node, prefix: str) -> Node:
    return g.add(g.matmul(x, bind(prefix + ".w")), bind(prefix + ".b"))


def _transformer_block(g: Graph, bind: Binding, x: Node, blk: str, heads: int) -> Node:
    n, d = x.shape
    dh = d // heads
    h = _layer_norm(g, bind, x, blk + ".ln1")
    qkv = _linear(g, bind, h, blk + ".qkv")
    outputs = []
    scale = 1.0 / np.sqrt(dh)
    for i in range(heads):
        q = g.slice_columns(qkv, i * dh, (i + 1) * dh)
        key = g.slice_columns(qkv, d + i * dh, d + (i + 1) * dh)
        v = g.slice_columns(qkv, 2 * d + i * dh, 2 * d + (i + 1) * dh)
        attn = g.softmax(g.affine(g.matmul(q, g.transpose(key)), scale, 0.0), axis=1)
        outputs.append(g.matmul(attn, v))
    merged = outputs[0] if heads == 1 else g.concat(outputs, axis=1)
    x = g.add(x, _linear(g, bind, merged, blk + ".out"))
    m = _layer_norm(g, bind, x, blk + ".ln2")
    m = g.gelu(_linear(g, bind, m, blk + ".mlp1"))
    return g.add(x, _linear(g, bind, m, blk + ".mlp2"))


def _normalize_row(g: Graph, x: Node) -> Node:
    norm = g.sqrt(g.sum(g.multiply(x, x)))
    return g.divide(x, norm)


def build_image_tokens(g: Graph, bind: Binding, image: Array,
                       config: EncoderConfig) -> tuple[Node, Node]:
    """Patch transformer over one image; returns (tokens N×D, pooled 1×D)."""
    patches = patchify(image, config.patch_size)
    n = patches.shape[0]
    if n > config.max_tokens:
        raise ValueError(f"{n} patches exceed max_tokens={config.max_tokens}")
    x = _linear(g, bind, g.constant(patches, name="patches"), "img.patch")
    x = g.add(x, g.gather(bind("img.pos"), range(n), axis=0))
    for i in range(config.depth):
        x = _transformer_block(g, bind, x, f"img.blk{i}", config.heads)
    tokens = _layer_norm(g, bind, x, "img.ln_out")
    pooled = g.reshape(g.mean(tokens, axis=0), (1, config.dim))
    return tokens, pooled


def build_slot_attention(g: Graph, bind: Binding, tokens: Node,
                         initial_slots: Array, iterations: int,
                         config: EncoderConfig) -> tuple[Node, list[tuple[Node, Node, Node]]]:
    """Iterated slot attention; returns final slots and per-iteration (A, W, S)."""
    ds = config.slot_dim
    keys = g.matmul(tokens, bind("slot.k.w"))
    values = g.matmul(tokens, bind("slot.v.w"))
    slots = g.constant(np.asarray(initial_slots, dtype=np.float64), name="slots0")
    if slots.shape != (config.num_slots, ds):
        raise ValueError(f"initial slots must be {(config.num_slots, ds)}, got {slots.shape}")
    traces: list[tuple[Node, Node, Node]] = []
    for _ in range(iterations):
        queries = g.matmul(slots, bind("slot.q.w"))
        logits = g.affine(g.matmul(keys, g.transpose(queries)), 1.0 / np.sqrt(ds), 0.0)
        attention = g.softmax(logits, axis=1)
        weights = g.divide(attention, g.sum(attention, axis=0))
        updates = g.matmul(g.transpose(weights), values)

        z = g.sigmoid(g.add(g.add(g.matmul(updates, bind("slot.gru.wz")),
                                  g.matmul(slots, bind("slot.gru.uz"))), bind("slot.gru.bz")))
        r = g.sigmoid(g.add(g.add(g.matmul(updates, bind("slot.gru.wr")),
                                  g.matmul(slots, bind("slot.gru.ur"))), bind("slot.gru.br")))
        n = g.tanh(g.add(g.add(g.matmul(updates, bind("slot.gru.wn")),
                               g.multiply(r, g.matmul(slots, bind("slot.gru.un")))),
                         bind("slot.gru.bn")))
        gru = g.add(g.multiply(z, slots), g.multiply(g.affine(z, -1.0, 1.0), n))

        m = _layer_norm(g, bind, gru, "slot.norm")
        m = g.gelu(_linear(g, bind, m, "slot.mlp1"))
        slots = g.add(slots, _linear(g, bind, m, "slot.mlp2"))
        traces.append((attention, weights, slots))
    return slots, traces


def build_box_head(g: Graph, bind: Binding, slots: Node) -> Node:
    """Per-slot 3-layer MLP to sigmoid center-size, converted to clipped corners."""
    h = g.gelu(_linear(g, bind, slots, "box.l0"))
    h = g.gelu(_linear(g, bind, h, "box.l1"))
    raw = g.sigmoid(_linear(g, bind, h, "box.l2"))
    cx = g.slice_columns(raw, 0, 1)
    cy = g.slice_columns(raw, 1, 2)
    half_w = g.affine(g.slice_columns(raw, 2, 3), 0.5, 0.0)
    half_h = g.affine(g.slice_columns(raw, 3, 4), 0.5, 0.0)
    zero = g.constant(0.0, name="box.zero")
    one = g.constant(1.0, name="box.one")

    def clip(node: Node) -> Node:
        return g.maximum(g.minimum(node, one), zero)

    corners = [clip(g.subtract(cx, half_w)), clip(g.subtract(cy, half_h)),
               clip(g.add(cx, half_w)), clip(g.add(cy, half_h))]
    return g.concat([corners[0], corners[1], corners[2], corners[3]], axis=1)


def build_aggregate(g: Graph, bind: Binding, pooled: Node, slots: Node,
                    config: EncoderConfig) -> Node:
    """Eq-style aggregation: concat(pooled, linear(flat slots)) -> MLP -> unit norm."""
    flat = g.reshape(slots, (1, config.num_slots * config.slot_dim))
    slot_vec = _linear(g, bind, flat, "agg.slots")
    cat = g.concat([pooled, slot_vec], axis=1)
    h = g.gelu(_linear(g, bind, cat, "agg.mlp1"))
    return _normalize_row(g, _linear(g, bind, h, "agg.mlp2"))


def build_image_embedding(g: Graph, bind: Binding, image: Array,
                          config: EncoderConfig, initial_slots: Array) -> dict[str, object]:
    """Full image pathway; returns the named nodes downstream consumers need."""
    tokens, pooled = build_image_tokens(g, bind, image, config)
    slots, traces = build_slot_attention(g, bind, tokens, initial_slots,
                                         config.slot_iters, config)
    boxes = build_box_head(g, bind, slots)
    embedding = build_aggregate(g, bind, pooled, slots, config)
    return {"tokens": tokens, "pooled": pooled, "slots": slots, "traces": traces,
            "boxes": boxes, "embedding": embedding}


# ----------------------------------------------------------------------
# Text pathway


def tokenize(text: str, config: EncoderConfig) -> list[int]:
    """Deterministic hash tokenization into the fixed vocabulary."""
    words = text.lower().split()
    if not words:
        raise ValueError("cannot encode an empty query")
    ids = []
    for word in words[:config.text_len]:
        digest = hashlib.sha256(word.encode("utf-8")).digest()
        ids.append(int.from_bytes(digest[:4], "little") % config.text_vocab)
    return ids


def build_text_embedding(g: Graph, bind: Binding, text: str,
                         config: EncoderConfig) -> Node:
    ids = tokenize(text, config)
    x = g.gather(bind(TEXT_PREFIX + "embed"), ids, axis=0)
    x = g.add(x, g.gather(bind(TEXT_PREFIX + "pos"), range(len(ids)), axis=0))
    x = _transformer_block(g, bind, x, TEXT_PREFIX + "blk0", config.heads)
    x = _layer_norm(g, bind, x, TEXT_PREFIX + "ln_out")
    pooled = g.reshape(g.mean(x, axis=0), (1, config.dim))
    return _normalize_row(g, _linear(g, bind, pooled, TEXT_PREFIX + "proj"))


# ----------------------------------------------------------------------
# Eager wrappers (parameters bound as constants)


def sample_slots(config: EncoderConfig, seed: int) -> Array:
    """Draw initial slots from N(mean, diag sigma^2) with an explicit seed."""
    rng = np.random.default_rng(seed)
    sigma = config.slot_sigma()
    return config.slot_mean + sigma * rng.standard_normal((config.num_slots, config.slot_dim))


def encode_image(image: Array, store: ParamStore, config: EncoderConfig) -> PatchFeatures:
    g = Graph()
    bind = Binding(g, store, trainable=False)
    tokens, pooled = build_image_tokens(g, bind, image, config)
    tok, pool = g.evaluate([tokens, pooled])
    return PatchFeatures(tokens=tok, pooled=pool.reshape(-1))


def _slot_states(feats: PatchFeatures, store: ParamStore, config: EncoderConfig,
                 initial_slots: Array, iterations: int,
                 start_iteration: int = 0) -> list[SlotState]:
    g = Graph()
    bind = Binding(g, store, trainable=False)
    tokens = g.constant(feats.tokens, name="tokens")
    _, traces = build_slot_attention(g, bind, tokens, initial_slots, iterations, config)
    values = g.evaluate([node for trace in traces for node in trace])
    return [SlotState(slots=values[3 * u + 2], attention=values[3 * u],
                      weights=values[3 * u + 1], iteration=start_iteration + u + 1)
            for u in range(iterations)]


def slot_attention_step(state: SlotState, feats: PatchFeatures,
                        store: ParamStore, config: EncoderConfig) -> SlotState:
    """One application of the attention/update rule to existing slots."""
    return _slot_states(feats, store, config, state.slots, 1, state.iteration)[0]


def run_slot_attention(feats: PatchFeatures, store: ParamStore, config: EncoderConfig,
                       seed: int | None = None,
                       initial_slots: Array | None = None) -> SlotState:
    """Gaussian-initialized slots refined for config.slot_iters iterations."""
    if initial_slots is None:
        initial_slots = sample_slots(config, derive_seed(config.seed if seed is None else seed,
                                                         "slots"))
    states = _slot_states(feats, store, config, initial_slots, config.slot_iters)
    final = states[-1]
    return SlotState(slots=final.slots, attention=final.attention, weights=final.weights,
                     iteration=final.iteration, history=tuple(states))


def predict_boxes(state: SlotState, store: ParamStore, config: EncoderConfig) -> BoxSet:
    g = Graph()
    bind = Binding(g, store, trainable=False)
    slots = g.constant(state.slots, name="slots")
    return BoxSet(boxes=g.evaluate(build_box_head(g, bind, slots)))


def aggregate_embedding(feats: PatchFeatures, state: SlotState,
                        store: ParamStore, config: EncoderConfig) -> Embedding:
    g = Graph()
    bind = Binding(g, store, trainable=False)
    pooled = g.constant(feats.pooled.reshape(1, -1), name="pooled")
    slots = g.constant(state.slots, name="slots")
    vec = g.evaluate(build_aggregate(g, bind, pooled, slots, config))
    return Embedding(vector=vec.reshape(-1))


def encode_text(query: str, store: ParamStore, config: EncoderConfig) -> Embedding:
    g = Graph()
    bind = Binding(g, store, trainable=False)
    vec = g.evaluate(build_text_embedding(g, bind, query, config))
    return Embedding(vector=vec.reshape(-1))


def image_embedding(image: Array, store: ParamStore, config: EncoderConfig,
                    seed: int | None = None) -> tuple[Embedding, BoxSet, SlotState]:
    """Convenience end-to-end inference for one image."""
    feats = encode_image(image, store, config)
    state = run_slot_attention(feats, store, config, seed=seed)
    return (aggregate_embedding(feats, state, store, config),
            predict_boxes(state, store, config),
            state)


# ----------------------------------------------------------------------
# PPM image files (P6, maxval 255)


def read_ppm(path) -> Array:
    with open(path, "rb") as fh:
        data = fh.read()
    fields: list[bytes] = []
    offset = 0
    while len(fields) < 4:
        while offset < len(data) and data[offset:offset + 1].isspace():
            offset += 1
        if data[offset:offset + 1] == b"#":
            while offset < len(data) and data[offset] != 0x0A:
                offset += 1
            continue
        start = offset
        while offset < len(data) and not data[offset:offset + 1].isspace():
            offset += 1
        fields.append(data[start:offset])
    if fields[0] != b"P6" or fields[3] != b"255":
        raise ValueError(f"{path}: expected binary P6 with maxval 255")
    width, height = int(fields[1]), int(fields[2])
    offset += 1
    pixels = np.frombuffer(data, dtype=np.uint8, count=width * height * 3, offset=offset)
    return pixels.reshape(height, width, 3).astype(np.float64) / 255.0


def write_ppm(path, image: Array) -> None:
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an H×W×3 image, got shape {image.shape}")
    raw = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P6\n{image.shape[1]} {image.shape[0]}\n255\n".encode())
        fh.write(raw.tobytes())
