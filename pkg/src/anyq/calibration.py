"""Per-channel mean absolute activations (``E|x_j|``) for each weight matrix.

Stats come either from running a small reference model on numeric inputs or
from a stats file exported by another runtime. Stats file layout::

    b"ANYS" | u32 header_len | header_len bytes of UTF-8 JSON | float32 LE payload

The JSON header lists modules in payload order with their lengths, plus
``token_count`` and ``source``.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .core import AnyqError, NonFiniteError, ShapeError, as_matrix
from .pack import atomic_write

ACTIVATIONS = {
    "identity": lambda h: h,
    "relu": lambda h: np.maximum(h, np.float32(0)),
    "tanh": np.tanh,
}

STATS_MAGIC = b"ANYS"
STATS_VERSION = 1


class StatsFormatError(AnyqError, ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


@dataclass
class ActivationStats:
    entries: dict[str, np.ndarray]
    token_count: int = 0
    source: str = ""

    def __post_init__(self):
        clean = {}
        for name, vec in self.entries.items():
            v = np.asarray(vec, dtype=np.float32).ravel()
            if not np.all(np.isfinite(v)):
                raise NonFiniteError(f"stats for {name!r} contain non-finite values")
            if np.any(v < 0):
                raise ValueError(f"stats for {name!r} contain negative values")
            clean[name] = v
        self.entries = clean

    def vector_for(self, name: str, k: int) -> np.ndarray:
        """Stats for module ``name``, checked against the matrix width ``k``."""
        if name not in self.entries:
            raise KeyError(f"no activation stats for module {name!r}")
        v = self.entries[name]
        if v.shape != (k,):
            raise ShapeError(f"stats for {name!r} have length {v.size}, matrix has K={k}")
        return v

    def __eq__(self, other):
        if not isinstance(other, ActivationStats):
            return NotImplemented
        return (
            self.token_count == other.token_count
            and self.source == other.source
            and list(self.entries) == list(other.entries)
            and all(np.array_equal(self.entries[n], other.entries[n]) for n in self.entries)
        )


@dataclass
class Layer:
    name: str
    weight: np.ndarray
    activation: str = "identity"

    def __post_init__(self):
        self.weight = as_matrix(self.weight, f"layer {self.name!r} weight")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}; expected one of {sorted(ACTIVATIONS)}")


@dataclass
class ToyModel:
    """A stack of linear layers ``h <- act(h @ W.T)``."""

    layers: list[Layer] = field(default_factory=list)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("a model needs at least one layer")
        for prev, cur in zip(self.layers, self.layers[1:]):
            if cur.weight.shape[1] != prev.weight.shape[0]:
                raise ShapeError(
                    f"layer {cur.name!r} expects {cur.weight.shape[1]} inputs, "
                    f"{prev.name!r} produces {prev.weight.shape[0]}"
                )

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    def layer_inputs(self, inputs) -> dict[str, np.ndarray]:
        """Input activations seen by every layer for a batch of model inputs."""
        h = as_matrix(inputs, "inputs")
        if h.shape[1] != self.input_dim:
            raise ShapeError(f"inputs have {h.shape[1]} features, model expects {self.input_dim}")
        seen = {}
        for layer in self.layers:
            seen[layer.name] = h
            with np.errstate(over="ignore", invalid="ignore"):
                h = ACTIVATIONS[layer.activation](h @ layer.weight.T).astype(np.float32)
            if not np.all(np.isfinite(h)):
                raise NonFiniteError(f"non-finite activations after layer {layer.name!r}")
        return seen

    @classmethod
    def random(cls, dims: list[int], activations: Optional[list[str]] = None, seed: int = 0) -> "ToyModel":
        rng = np.random.default_rng(seed)
        acts = activations or ["relu"] * (len(dims) - 2) + ["identity"]
        layers = []
        for i, (din, dout) in enumerate(zip(dims, dims[1:])):
            w = rng.standard_normal((dout, din)).astype(np.float32) / np.float32(np.sqrt(din))
            layers.append(Layer(f"layer{i}", w, acts[i]))
        return cls(layers)

    @classmethod
    def from_json(cls, doc: dict) -> "ToyModel":
        """Build from ``{"layers": [...], "seed": s, "input_dim": d}``.

        Each layer gives ``name``, ``activation`` and either an explicit
        ``weight`` (list of rows) or ``out_features`` for a seeded random
        weight scaled by ``1/sqrt(fan_in)``.
        """
        rng = np.random.default_rng(int(doc.get("seed", 0)))
        fan_in = doc.get("input_dim")
        layers = []
        for i, item in enumerate(doc["layers"]):
            name = item.get("name", f"layer{i}")
            if "weight" in item:
                w = np.asarray(item["weight"], dtype=np.float32)
            else:
                if fan_in is None:
                    raise ValueError("input_dim is required when weights are generated")
                w = rng.standard_normal((int(item["out_features"]), int(fan_in))).astype(np.float32)
                w /= np.float32(np.sqrt(fan_in))
            layers.append(Layer(name, w, item.get("activation", "identity")))
            fan_in = layers[-1].weight.shape[0]
        model = cls(layers)
        if "input_dim" in doc and int(doc["input_dim"]) != model.input_dim:
            raise ShapeError(f"input_dim {doc['input_dim']} does not match first layer width {model.input_dim}")
        return model


def collect_stats(model: ToyModel, inputs, source: str = "toy-model") -> ActivationStats:
    """Mean over the batch of ``|input|`` per channel, for every layer."""
    seen = model.layer_inputs(inputs)
    entries = {name: np.mean(np.abs(h), axis=0, dtype=np.float64).astype(np.float32) for name, h in seen.items()}
    return ActivationStats(entries, token_count=next(iter(seen.values())).shape[0], source=source)


def stats_to_bytes(stats: ActivationStats) -> bytes:
    header = {
        "format": "anyq-stats",
        "version": STATS_VERSION,
        "token_count": int(stats.token_count),
        "source": stats.source,
        "modules": [{"name": n, "length": int(v.size)} for n, v in stats.entries.items()],
    }
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    payload = b"".join(np.asarray(v, dtype="<f4").tobytes() for v in stats.entries.values())
    return STATS_MAGIC + struct.pack("<I", len(hbytes)) + hbytes + payload


def stats_from_bytes(data: bytes) -> ActivationStats:
    if len(data) < 8:
        raise StatsFormatError(f"file is {len(data)} bytes, too short for the preamble", len(data))
    if data[:4] != STATS_MAGIC:
        raise StatsFormatError(f"bad magic {data[:4]!r}", 0)
    (hlen,) = struct.unpack_from("<I", data, 4)
    if len(data) < 8 + hlen:
        raise StatsFormatError(f"header needs {hlen} bytes, only {len(data) - 8} present", len(data))
    try:
        header = json.loads(data[8 : 8 + hlen].decode("utf-8"))
        modules = [(str(m["name"]), int(m["length"])) for m in header["modules"]]
        token_count = int(header.get("token_count", 0))
        source = str(header.get("source", ""))
    except (ValueError, KeyError, TypeError) as exc:
        raise StatsFormatError(f"malformed JSON header: {exc}", 8) from exc
    if header.get("version") != STATS_VERSION:
        raise StatsFormatError(f"unsupported stats version {header.get('version')!r}", 8)
    pos = 8 + hlen
    entries = {}
    for name, length in modules:
        end = pos + 4 * length
        if length < 0 or end > len(data):
            raise StatsFormatError(f"payload for {name!r} needs {4 * length} bytes, file ends early", len(data))
        vec = np.frombuffer(data[pos:end], dtype="<f4").astype(np.float32)
        if not np.all(np.isfinite(vec)) or np.any(vec < 0):
            bad = int(np.flatnonzero(~(np.isfinite(vec) & (vec >= 0)))[0])
            raise StatsFormatError(f"stats for {name!r} must be finite and non-negative", pos + 4 * bad)
        entries[name] = vec
        pos = end
    if pos != len(data):
        raise StatsFormatError(f"{len(data) - pos} unexpected trailing bytes", pos)
    return ActivationStats(entries, token_count, source)


def save_stats(stats: ActivationStats, path):
    atomic_write(path, stats_to_bytes(stats))


def load_stats(path) -> ActivationStats:
    with open(path, "rb") as fh:
        return stats_from_bytes(fh.read())


_PROMPT = (
    "- Fiction: \"Once upon a time, a girl named Alice was living alone on an island. "
    "One day, she met a wizard ...\"\n"
    "- News: \"The United Nations held its General Assembly meeting this year amid multiple "
    "world crises and wars. In his speech, the General Secretary called for ...\"\n"
    "- Code: ~public static void main(String[] args) {\\n System.out.println(\"Hello world!\");\\n} ~\n"
    "- Math: (5.2 + 2.7) / 0.6 - 1.9 * 2.2 =\n"
    "- Facts: \"The capital of Egypt is Cairo. It is the largest city in the region and is home to...\""
)


def default_prompt() -> str:
    """Single hand-written calibration sample (fiction, news, code, math, facts).

    Whitespace follows the rendered text: the code line keeps literal ``\\n``
    escapes and tilde fences.
    """
    return _PROMPT
